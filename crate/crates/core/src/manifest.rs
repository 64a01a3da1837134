//! Dataset data model and the line-delimited manifest format.
//!
//! A manifest file is UTF-8 text. Line 1 is a header object carrying the
//! schema version, dataset name, label names (in id order), the quality
//! threshold and the creation timestamp. Every following line is one
//! [`ImageRecord`] with a fixed key order. Reals are written with exactly six
//! decimal places so identical manifests serialize to identical bytes.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize, Serializer};
use serde_json::value::RawValue;

use crate::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

pub type LabelId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ClassLabel {
    pub id: LabelId,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    dataset_name: String,
    labels: Vec<ClassLabel>,
}

const VOC_CLASSES: [&str; 21] = [
    "background",
    "airplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "dining table",
    "dog",
    "horse",
    "motorbike",
    "person",
    "potted plant",
    "sheep",
    "sofa",
    "train",
    "tv monitor",
];

const COCO_CLASSES: [&str; 81] = [
    "background",
    "person",
    "bicycle",
    "car",
    "motorcycle",
    "airplane",
    "bus",
    "train",
    "truck",
    "boat",
    "traffic light",
    "fire hydrant",
    "stop sign",
    "parking meter",
    "bench",
    "bird",
    "cat",
    "dog",
    "horse",
    "sheep",
    "cow",
    "elephant",
    "bear",
    "zebra",
    "giraffe",
    "backpack",
    "umbrella",
    "handbag",
    "tie",
    "suitcase",
    "frisbee",
    "skis",
    "snowboard",
    "sports ball",
    "kite",
    "baseball bat",
    "baseball glove",
    "skateboard",
    "surfboard",
    "tennis racket",
    "bottle",
    "wine glass",
    "cup",
    "fork",
    "knife",
    "spoon",
    "bowl",
    "banana",
    "apple",
    "sandwich",
    "orange",
    "broccoli",
    "carrot",
    "hot dog",
    "pizza",
    "donut",
    "cake",
    "chair",
    "couch",
    "potted plant",
    "bed",
    "dining table",
    "toilet",
    "tv",
    "laptop",
    "mouse",
    "remote",
    "keyboard",
    "cell phone",
    "microwave",
    "oven",
    "toaster",
    "sink",
    "refrigerator",
    "book",
    "clock",
    "vase",
    "scissors",
    "teddy bear",
    "hair drier",
    "toothbrush",
];

impl Vocabulary {
    /// Builds a vocabulary with dense ids in the given order. Names are
    /// trimmed and lowercased; empty or duplicate names are rejected.
    pub fn new<S: AsRef<str>>(dataset_name: impl Into<String>, names: &[S]) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Manifest("vocabulary needs at least one label".into()));
        }
        let mut seen = HashSet::new();
        let mut labels = Vec::with_capacity(names.len());
        for (i, raw) in names.iter().enumerate() {
            let name = raw.as_ref().trim().to_lowercase();
            if name.is_empty() {
                return Err(Error::Manifest(format!("label {i} has an empty name")));
            }
            if !seen.insert(name.clone()) {
                return Err(Error::Manifest(format!("duplicate label name {name:?}")));
            }
            labels.push(ClassLabel {
                id: i as LabelId,
                name,
            });
        }
        Ok(Self {
            dataset_name: dataset_name.into(),
            labels,
        })
    }

    /// PASCAL VOC 2012: background plus 20 object classes.
    pub fn voc() -> Self {
        Self::new("voc", &VOC_CLASSES).expect("preset is valid")
    }

    /// MS COCO 2014: background plus 80 object classes.
    pub fn coco() -> Self {
        Self::new("coco", &COCO_CLASSES).expect("preset is valid")
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "voc" => Some(Self::voc()),
            "coco" => Some(Self::coco()),
            _ => None,
        }
    }

    /// Reads one label name per non-empty line.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let names: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let dataset_name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".into());
        Self::new(dataset_name, &names)
    }

    pub fn dataset_name(&self) -> &str {
        &self.dataset_name
    }

    pub fn labels(&self) -> &[ClassLabel] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, id: LabelId) -> Option<&ClassLabel> {
        self.labels.get(id as usize)
    }

    pub fn name_of(&self, id: LabelId) -> Option<&str> {
        self.get(id).map(|l| l.name.as_str())
    }

    pub fn id_of(&self, name: &str) -> Option<LabelId> {
        let name = name.trim().to_lowercase();
        self.labels.iter().find(|l| l.name == name).map(|l| l.id)
    }

    pub fn person_id(&self) -> Option<LabelId> {
        self.id_of("person")
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().map(|l| l.name.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Augmented,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub record_id: String,
    pub image_path: PathBuf,
    pub labels: BTreeSet<LabelId>,
    pub provenance: Provenance,
    pub parent_id: Option<String>,
    pub prompt: Option<String>,
    pub target_score: Option<f64>,
    pub attempts: u32,
    pub seed: Option<u64>,
}

impl ImageRecord {
    pub fn original(
        record_id: impl Into<String>,
        image_path: impl Into<PathBuf>,
        labels: impl IntoIterator<Item = LabelId>,
    ) -> Self {
        Self {
            record_id: record_id.into(),
            image_path: image_path.into(),
            labels: labels.into_iter().collect(),
            provenance: Provenance::Original,
            parent_id: None,
            prompt: None,
            target_score: None,
            attempts: 0,
            seed: None,
        }
    }

    pub fn is_original(&self) -> bool {
        self.provenance == Provenance::Original
    }

    pub fn is_augmented(&self) -> bool {
        self.provenance == Provenance::Augmented
    }
}

impl Serialize for ImageRecord {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut s = serializer.serialize_struct("ImageRecord", 9)?;
        s.serialize_field("record_id", &self.record_id)?;
        s.serialize_field("image_path", &self.image_path)?;
        s.serialize_field("labels", &self.labels)?;
        s.serialize_field("provenance", &self.provenance)?;
        s.serialize_field("parent_id", &self.parent_id)?;
        s.serialize_field("prompt", &self.prompt)?;
        s.serialize_field("target_score", &self.target_score.map(fixed6))?;
        s.serialize_field("attempts", &self.attempts)?;
        s.serialize_field("seed", &self.seed)?;
        s.end()
    }
}

/// A real rendered with six decimal places, emitted verbatim as a JSON number.
fn fixed6(x: f64) -> Box<RawValue> {
    RawValue::from_string(format!("{x:.6}")).expect("fixed-point decimal is valid JSON")
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptyRecordId,
    EmptyLabels,
    UnknownLabel(LabelId),
    MissingParent,
    MissingPrompt,
    MissingScore,
    ScoreOutOfRange(f64),
    NoAttempts,
    OriginalWithAugmentationFields,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyRecordId => write!(f, "empty record id"),
            Violation::EmptyLabels => write!(f, "empty label set"),
            Violation::UnknownLabel(id) => write!(f, "unknown label {id}"),
            Violation::MissingParent => write!(f, "missing parent"),
            Violation::MissingPrompt => write!(f, "missing prompt"),
            Violation::MissingScore => write!(f, "missing target score"),
            Violation::ScoreOutOfRange(s) => write!(f, "score {s} outside [0,1]"),
            Violation::NoAttempts => write!(f, "augmented record with zero attempts"),
            Violation::OriginalWithAugmentationFields => {
                write!(f, "original record carries augmentation fields")
            }
        }
    }
}

/// Checks a single record against the vocabulary and the provenance rules.
/// Violations are returned as data; an empty list means the record is valid.
pub fn validate_record(record: &ImageRecord, vocab: &Vocabulary) -> Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    if record.record_id.is_empty() {
        v.push(Violation::EmptyRecordId);
    }
    if record.labels.is_empty() {
        v.push(Violation::EmptyLabels);
    }
    for &id in &record.labels {
        if id as usize >= vocab.len() {
            v.push(Violation::UnknownLabel(id));
        }
    }
    if let Some(s) = record.target_score {
        if !(0.0..=1.0).contains(&s) {
            v.push(Violation::ScoreOutOfRange(s));
        }
    }
    match record.provenance {
        Provenance::Augmented => {
            if record.parent_id.is_none() {
                v.push(Violation::MissingParent);
            }
            if record.prompt.is_none() {
                v.push(Violation::MissingPrompt);
            }
            if record.target_score.is_none() {
                v.push(Violation::MissingScore);
            }
            if record.attempts == 0 {
                v.push(Violation::NoAttempts);
            }
        }
        Provenance::Original => {
            if record.parent_id.is_some()
                || record.prompt.is_some()
                || record.target_score.is_some()
                || record.attempts != 0
            {
                v.push(Violation::OriginalWithAugmentationFields);
            }
        }
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub vocabulary: Vocabulary,
    pub records: Vec<ImageRecord>,
    pub epsilon: f64,
    pub created_at: DateTime<Utc>,
}

impl DatasetManifest {
    pub fn new(vocabulary: Vocabulary, epsilon: f64, created_at: DateTime<Utc>) -> Self {
        Self {
            vocabulary,
            records: Vec::new(),
            epsilon,
            created_at,
        }
    }

    /// Same vocabulary, threshold and timestamp, no records.
    pub fn empty_like(&self) -> Self {
        Self::new(self.vocabulary.clone(), self.epsilon, self.created_at)
    }

    pub fn originals(&self) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(|r| r.is_original())
    }

    pub fn augmented(&self) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(|r| r.is_augmented())
    }

    pub fn find(&self, record_id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.record_id == record_id)
    }

    /// Number of records carrying each label, keyed by label id. Labels with
    /// no records are omitted.
    pub fn per_class_counts(&self) -> BTreeMap<LabelId, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            for &l in &r.labels {
                *counts.entry(l).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Augmented children per parent id.
    pub fn children_count(&self) -> HashMap<&str, usize> {
        let mut counts = HashMap::new();
        for r in self.augmented() {
            if let Some(p) = &r.parent_id {
                *counts.entry(p.as_str()).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Checks every manifest invariant, stopping at the first violation.
    pub fn validate(&self) -> Result<()> {
        self.validate_with(ParentCheck::Strict)
    }

    pub fn validate_with(&self, parents: ParentCheck) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::Manifest(format!(
                "epsilon {} outside (0,1]",
                self.epsilon
            )));
        }
        let mut kinds: HashMap<&str, Provenance> = HashMap::with_capacity(self.records.len());
        for r in &self.records {
            validate_record(r, &self.vocabulary).map_err(|violations| Error::InvalidRecord {
                record_id: r.record_id.clone(),
                violations,
            })?;
            if kinds.insert(&r.record_id, r.provenance).is_some() {
                return Err(Error::Manifest(format!(
                    "duplicate record_id {}",
                    r.record_id
                )));
            }
        }
        if parents == ParentCheck::Deferred {
            return Ok(());
        }
        for r in self.augmented() {
            let parent = r.parent_id.as_deref().unwrap_or_default();
            match kinds.get(parent) {
                Some(Provenance::Original) => {}
                Some(Provenance::Augmented) => {
                    return Err(Error::Manifest(format!(
                        "record {} has augmented parent {parent}",
                        r.record_id
                    )))
                }
                None => {
                    return Err(Error::Manifest(format!(
                        "record {} has dangling parent {parent}",
                        r.record_id
                    )))
                }
            }
        }
        Ok(())
    }

    /// Serializes the manifest to its text form.
    pub fn to_text(&self) -> String {
        let header = HeaderOut {
            version: MANIFEST_VERSION,
            dataset_name: self.vocabulary.dataset_name(),
            labels: self.vocabulary.names().collect(),
            epsilon: fixed6(self.epsilon),
            created_at: self.created_at.to_rfc3339_opts(SecondsFormat::Secs, true),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Parses the text form and validates all invariants.
    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_text_with(text, ParentCheck::Strict)
    }

    pub fn from_text_with(text: &str, parents: ParentCheck) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, first) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "missing header line".into(),
        })?;
        let header: HeaderIn = serde_json::from_str(first).map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        if header.version != MANIFEST_VERSION {
            return Err(Error::Parse {
                line: 1,
                message: format!("unsupported manifest version {}", header.version),
            });
        }
        let vocabulary = Vocabulary::new(header.dataset_name, &header.labels)?;
        let created_at = DateTime::parse_from_rfc3339(&header.created_at)
            .map_err(|e| Error::Parse {
                line: 1,
                message: format!("created_at: {e}"),
            })?
            .with_timezone(&Utc);
        let mut manifest = DatasetManifest::new(vocabulary, header.epsilon, created_at);
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let record: ImageRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
            manifest.records.push(record);
        }
        manifest.validate_with(parents)?;
        Ok(manifest)
    }

    /// Rewrites relative image paths so they resolve against `to_dir`
    /// instead of `from_dir`. Absolute paths are left alone.
    pub fn rebase_paths(&mut self, from_dir: &Path, to_dir: &Path) {
        for r in &mut self.records {
            r.image_path = rebase_path(&r.image_path, from_dir, to_dir);
        }
    }
}

/// Whether augmented records must find their parent in the same manifest.
/// A file holding only generated records defers that check to assembly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParentCheck {
    Strict,
    Deferred,
}

/// Relative paths are relative to the directory holding the manifest.
pub fn resolve_path(root: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        root.join(path)
    }
}

/// Re-expresses a path relative to `from_dir` as one relative to `to_dir`,
/// using `..` where needed. Absolute paths pass through unchanged.
pub fn rebase_path(path: &Path, from_dir: &Path, to_dir: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    let target = normalize(&resolve_path(from_dir, path));
    let base = normalize(to_dir);
    let (t, b): (Vec<_>, Vec<_>) = (target.components().collect(), base.components().collect());
    let common = t.iter().zip(&b).take_while(|(x, y)| x == y).count();
    if common == 0 && (target.has_root() || base.has_root()) {
        // different roots or drive prefixes: nothing to be relative to
        return target;
    }
    let mut rel = PathBuf::new();
    for _ in common..b.len() {
        rel.push("..");
    }
    rel.extend(&t[common..]);
    rel
}

/// Absolute, lexically normalized form of `path` (`.` and `..` folded
/// without touching the filesystem).
fn normalize(path: &Path) -> PathBuf {
    use std::path::Component;
    let abs = std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf());
    let mut out = PathBuf::new();
    for c in abs.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            other => out.push(other),
        }
    }
    out
}

#[derive(Serialize)]
struct HeaderOut<'a> {
    version: u32,
    dataset_name: &'a str,
    labels: Vec<&'a str>,
    epsilon: Box<RawValue>,
    created_at: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderIn {
    version: u32,
    dataset_name: String,
    labels: Vec<String>,
    epsilon: f64,
    created_at: String,
}

/// Writes the manifest atomically (temp file in the target directory, then
/// rename), so readers never observe a partially written file.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let text = manifest.to_text();
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = path.with_extension("manifest.tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    load_manifest_with(path, ParentCheck::Strict)
}

pub fn load_manifest_with(path: &Path, parents: ParentCheck) -> Result<DatasetManifest> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for line in BufReader::new(f).lines() {
        text.push_str(&line.map_err(|e| Error::io(path, e))?);
        text.push('\n');
    }
    DatasetManifest::from_text_with(&text, parents)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts() -> DateTime<Utc> {
        DateTime::parse_from_rfc3339("2025-01-02T03:04:05Z")
            .unwrap()
            .with_timezone(&Utc)
    }

    fn augmented(id: &str, parent: &str, labels: &[LabelId]) -> ImageRecord {
        ImageRecord {
            record_id: id.into(),
            image_path: format!("aug/{id}.png").into(),
            labels: labels.iter().copied().collect(),
            provenance: Provenance::Augmented,
            parent_id: Some(parent.into()),
            prompt: Some("a quiet harbor at dusk".into()),
            target_score: Some(0.95),
            attempts: 2,
            seed: Some(42),
        }
    }

    #[test]
    fn presets_have_expected_sizes() {
        assert_eq!(Vocabulary::voc().len(), 21);
        assert_eq!(Vocabulary::coco().len(), 81);
        assert!(Vocabulary::voc().person_id().is_some());
        assert!(Vocabulary::coco().person_id().is_some());
    }

    #[test]
    fn vocabulary_normalizes_and_rejects_duplicates() {
        let v = Vocabulary::new("x", &[" Cat ", "DOG"]).unwrap();
        assert_eq!(v.name_of(0), Some("cat"));
        assert_eq!(v.id_of("Dog"), Some(1));
        assert!(Vocabulary::new("x", &["cat", "CAT"]).is_err());
        assert!(Vocabulary::new("x", &["cat", " "]).is_err());
        assert!(Vocabulary::new::<&str>("x", &[]).is_err());
    }

    #[test]
    fn original_person_record_is_valid() {
        let voc = Vocabulary::voc();
        let r = ImageRecord::original("a", "a.png", [voc.person_id().unwrap()]);
        assert_eq!(validate_record(&r, &voc), Ok(()));
    }

    #[test]
    fn augmented_without_parent_is_flagged() {
        let voc = Vocabulary::voc();
        let mut r = augmented("b", "a", &[3]);
        r.parent_id = None;
        let v = validate_record(&r, &voc).unwrap_err();
        assert_eq!(v, vec![Violation::MissingParent]);
        assert_eq!(v[0].to_string(), "missing parent");
    }

    #[test]
    fn label_equal_to_vocab_size_is_unknown() {
        let voc = Vocabulary::voc();
        let r = ImageRecord::original("a", "a.png", [voc.len() as LabelId]);
        let v = validate_record(&r, &voc).unwrap_err();
        assert_eq!(v, vec![Violation::UnknownLabel(21)]);
    }

    #[test]
    fn score_out_of_range_is_flagged() {
        let voc = Vocabulary::voc();
        let mut r = augmented("b", "a", &[3]);
        r.target_score = Some(1.2);
        assert_eq!(
            validate_record(&r, &voc).unwrap_err(),
            vec![Violation::ScoreOutOfRange(1.2)]
        );
    }

    #[test]
    fn original_with_prompt_is_flagged() {
        let voc = Vocabulary::voc();
        let mut r = ImageRecord::original("a", "a.png", [1]);
        r.prompt = Some("x".into());
        assert!(validate_record(&r, &voc).is_err());
    }

    #[test]
    fn empty_manifest_is_header_only() {
        let m = DatasetManifest::new(Vocabulary::voc(), 0.9, ts());
        let text = m.to_text();
        assert_eq!(text.lines().count(), 1);
        assert!(text.contains("\"epsilon\":0.900000"));
        assert_eq!(DatasetManifest::from_text(&text).unwrap(), m);
    }

    #[test]
    fn record_line_has_fixed_key_order_and_precision() {
        let r = augmented("b", "a", &[3, 1]);
        let line = serde_json::to_string(&r).unwrap();
        assert_eq!(
            line,
            r#"{"record_id":"b","image_path":"aug/b.png","labels":[1,3],"provenance":"augmented","parent_id":"a","prompt":"a quiet harbor at dusk","target_score":0.950000,"attempts":2,"seed":42}"#
        );
    }

    #[test]
    fn truncated_line_reports_line_number() {
        let mut m = DatasetManifest::new(Vocabulary::voc(), 0.9, ts());
        m.records.push(ImageRecord::original("a", "a.png", [1]));
        m.records.push(ImageRecord::original("b", "b.png", [2]));
        let text = m.to_text();
        let cut: String = text.lines().take(2).collect::<Vec<_>>().join("\n")
            + "\n"
            + &text.lines().nth(2).unwrap()[..20];
        match DatasetManifest::from_text(&cut) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_record_id_is_rejected() {
        let mut m = DatasetManifest::new(Vocabulary::voc(), 0.9, ts());
        m.records.push(ImageRecord::original("a", "a.png", [1]));
        m.records.push(ImageRecord::original("a", "b.png", [2]));
        let err = DatasetManifest::from_text(&m.to_text()).unwrap_err();
        assert!(err.to_string().contains("duplicate record_id a"), "{err}");
    }

    #[test]
    fn dangling_parent_is_rejected() {
        let mut m = DatasetManifest::new(Vocabulary::voc(), 0.9, ts());
        m.records.push(ImageRecord::original("a", "a.png", [1]));
        m.records.push(augmented("b", "zzz", &[1]));
        assert!(m.validate().is_err());
        m.validate_with(ParentCheck::Deferred).unwrap();
        m.records[1].parent_id = Some("a".into());
        m.validate().unwrap();
    }

    #[test]
    fn rebase_rewrites_relative_paths() {
        let from = Path::new("/data/run");
        assert_eq!(
            rebase_path(Path::new("images/a.png"), from, from),
            PathBuf::from("images/a.png")
        );
        assert_eq!(
            rebase_path(Path::new("images/a.png"), from, Path::new("/data/out")),
            PathBuf::from("../run/images/a.png")
        );
        assert_eq!(
            rebase_path(Path::new("./x/../a.png"), Path::new("/data"), Path::new("/data/run/")),
            PathBuf::from("../a.png")
        );
        assert_eq!(
            rebase_path(Path::new("data/a.png"), Path::new("."), Path::new("out")),
            PathBuf::from("../data/a.png")
        );
        assert_eq!(
            rebase_path(Path::new("/src/x.png"), from, from),
            PathBuf::from("/src/x.png")
        );
    }

    #[test]
    fn save_load_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut m = DatasetManifest::new(Vocabulary::voc(), 0.9, ts());
        m.records.push(ImageRecord::original("a", "a.png", [1, 15]));
        m.records.push(augmented("a-aug0", "a", &[1, 15]));
        save_manifest(&m, &path).unwrap();
        let first = fs::read(&path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded, m);
        save_manifest(&loaded, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }
}
