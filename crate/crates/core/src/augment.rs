//! Per-image generate, score and retry loop, and the quota-driven pipeline
//! over a whole manifest.
//!
//! Every original image is given `quota` augmentation slots. A slot is filled
//! online: candidates are generated and scored until one clears the threshold
//! or `max_attempts` runs out. Filtering after the fact would let some images
//! collect many children and others none.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{detect_for_labels, CannyParams, DetectorKind, PoseBackend};
use crate::generation::{generate, GenerationBackend, GenerationParams, GenerationRequest};
use crate::imageio;
use crate::manifest::{resolve_path, DatasetManifest, ImageRecord, LabelId, Provenance, Vocabulary};
use crate::prompt::{self_refine, LlmBackend, PromptTemplates, DEFAULT_MAX_ITERS};
use crate::scorer::{score_image, EmbeddingBackend, EncoderGeometry, LinearHead};
use crate::seed::attempt_seed;
use crate::{Error, Result, DEFAULT_EPSILON};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    pub epsilon: f64,
    pub max_attempts: u32,
    /// Accepted augmentations sought per original image.
    pub quota: u32,
    pub base_seed: u64,
    /// Draw a new refined prompt for every attempt instead of once per slot.
    pub fresh_prompt_per_attempt: bool,
    pub prompt_max_iters: u32,
    pub canny: CannyParams,
    pub generation: GenerationParams,
    pub geometry: EncoderGeometry,
    pub templates: PromptTemplates,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            max_attempts: 10,
            quota: 1,
            base_seed: 0,
            fresh_prompt_per_attempt: true,
            prompt_max_iters: DEFAULT_MAX_ITERS,
            canny: CannyParams::default(),
            generation: GenerationParams::default(),
            geometry: EncoderGeometry::default(),
            templates: PromptTemplates::default(),
        }
    }
}

impl AugmentationPolicy {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            problems.push(format!("epsilon {} outside (0,1]", self.epsilon));
        }
        if self.max_attempts == 0 {
            problems.push("max_attempts must be at least 1".into());
        }
        if self.quota == 0 {
            problems.push("quota must be at least 1".into());
        }
        if self.prompt_max_iters == 0 {
            problems.push("prompt_max_iters must be at least 1".into());
        }
        for r in [
            self.canny.validate(),
            self.geometry.validate(),
            self.templates.validate(),
        ] {
            if let Err(e) = r {
                problems.push(e.to_string());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// Scores a generated image against the parent's labels.
pub trait QualityGate: Send + Sync {
    fn target_score(&self, image: &RgbImage, labels: &BTreeSet<LabelId>) -> Result<f64>;
}

/// The trained patch classifier as a gate.
pub struct ClassifierGate {
    pub head: LinearHead<f64>,
    pub embedder: Arc<dyn EmbeddingBackend>,
    pub geometry: EncoderGeometry,
}

impl QualityGate for ClassifierGate {
    fn target_score(&self, image: &RgbImage, labels: &BTreeSet<LabelId>) -> Result<f64> {
        score_image(image, labels, &self.head, self.embedder.as_ref(), self.geometry)
            .map(|q| q.target_score)
    }
}

/// Replays a fixed score sequence, repeating the last value.
#[derive(Debug)]
pub struct ScriptedGate {
    scores: Vec<f64>,
    calls: AtomicUsize,
}

impl ScriptedGate {
    pub fn new(scores: &[f64]) -> Self {
        assert!(!scores.is_empty());
        Self {
            scores: scores.to_vec(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn constant(score: f64) -> Self {
        Self::new(&[score])
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl QualityGate for ScriptedGate {
    fn target_score(&self, _image: &RgbImage, _labels: &BTreeSet<LabelId>) -> Result<f64> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(self.scores[n.min(self.scores.len() - 1)])
    }
}

#[derive(Clone)]
pub struct Backends {
    pub llm: Arc<dyn LlmBackend>,
    pub pose: Arc<dyn PoseBackend>,
    pub generator: Arc<dyn GenerationBackend>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptEntry {
    /// 1-based attempt number.
    pub attempt: u32,
    pub seed: u64,
    pub prompt: String,
    pub prompt_best_effort: bool,
    pub target_score: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Accepted,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptLog {
    pub record_id: String,
    pub slot: u32,
    pub detector: DetectorKind,
    pub attempts: Vec<AttemptEntry>,
    pub outcome: Outcome,
}

pub fn child_record_id(parent_id: &str, slot: u32) -> String {
    format!("{parent_id}__aug{slot}")
}

/// Fills one augmentation slot of an original record.
///
/// `root` resolves the record's image path; accepted images are written to
/// `out_dir/images/` and referenced relative to `out_dir`. Returns the
/// augmented record when a candidate scored strictly above the threshold.
#[allow(clippy::too_many_arguments)]
pub fn augment_one(
    record: &ImageRecord,
    slot: u32,
    vocab: &Vocabulary,
    policy: &AugmentationPolicy,
    backends: &Backends,
    gate: &dyn QualityGate,
    root: &Path,
    out_dir: &Path,
) -> Result<(Option<ImageRecord>, AttemptLog)> {
    if record.provenance != Provenance::Original {
        return Err(Error::InvalidArgument(format!(
            "{} is not an original record",
            record.record_id
        )));
    }
    let source = imageio::load_rgb(&resolve_path(root, &record.image_path))?;
    augment_image(record, &source, slot, vocab, policy, backends, gate, out_dir)
}

#[allow(clippy::too_many_arguments)]
fn augment_image(
    record: &ImageRecord,
    source: &RgbImage,
    slot: u32,
    vocab: &Vocabulary,
    policy: &AugmentationPolicy,
    backends: &Backends,
    gate: &dyn QualityGate,
    out_dir: &Path,
) -> Result<(Option<ImageRecord>, AttemptLog)> {
    let labels: Vec<LabelId> = record.labels.iter().copied().collect();
    if labels.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} has no labels",
            record.record_id
        )));
    }
    let map = detect_for_labels(
        source,
        &record.labels,
        vocab,
        &policy.canny,
        backends.pose.as_ref(),
    )?;

    let mut log = AttemptLog {
        record_id: record.record_id.clone(),
        slot,
        detector: map.kind,
        attempts: Vec::new(),
        outcome: Outcome::Exhausted,
    };
    let mut prompt = None;
    for t in 0..policy.max_attempts {
        let seed = attempt_seed(policy.base_seed, &record.record_id, slot, t);
        if prompt.is_none() || policy.fresh_prompt_per_attempt {
            let label = labels[t as usize % labels.len()];
            let category = vocab
                .get(label)
                .ok_or_else(|| Error::InvalidArgument(format!("label {label} not in vocabulary")))?;
            prompt = Some(self_refine(
                backends.llm.as_ref(),
                &policy.templates,
                category,
                policy.epsilon,
                policy.prompt_max_iters,
                seed,
            )?);
        }
        let refined = prompt.as_ref().expect("prompt drawn above");
        let request = GenerationRequest {
            source,
            map: &map,
            prompt: &refined.text,
            seed,
            params: policy.generation,
        };
        let candidate = generate(backends.generator.as_ref(), &request)?;
        let score = gate.target_score(&candidate, &record.labels)?;
        let accepted = score > policy.epsilon;
        log.attempts.push(AttemptEntry {
            attempt: t + 1,
            seed,
            prompt: refined.text.clone(),
            prompt_best_effort: refined.best_effort,
            target_score: score,
            accepted,
        });
        if accepted {
            log.outcome = Outcome::Accepted;
            let child_id = child_record_id(&record.record_id, slot);
            let rel = PathBuf::from("images").join(format!("{child_id}.png"));
            imageio::save_png(&candidate, &out_dir.join(&rel))?;
            let child = ImageRecord {
                record_id: child_id,
                image_path: rel,
                labels: record.labels.clone(),
                provenance: Provenance::Augmented,
                parent_id: Some(record.record_id.clone()),
                prompt: Some(refined.text.clone()),
                target_score: Some(score),
                attempts: t + 1,
                seed: Some(seed),
            };
            return Ok((Some(child), log));
        }
    }
    Ok((None, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExhaustedSlot {
    pub record_id: String,
    pub slot: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedRecord {
    pub record_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Accepted augmentations in this run, per class name.
    pub per_class_counts: BTreeMap<String, usize>,
    /// Attempts needed per accepted slot: attempts -> number of slots.
    pub attempts_histogram: BTreeMap<u32, usize>,
    pub exhausted_record_ids: Vec<String>,
    pub exhausted: Vec<ExhaustedSlot>,
    pub skipped: Vec<SkippedRecord>,
    pub generations: usize,
    pub accepted: usize,
    /// Children per original in the output manifest: children -> originals.
    pub children_histogram: BTreeMap<usize, usize>,
    pub wall_time: f64,
}

pub struct PipelineOutput {
    pub manifest: DatasetManifest,
    pub report: RunReport,
    pub logs: Vec<AttemptLog>,
}

enum SlotResult {
    Done(Option<ImageRecord>, AttemptLog),
    Skipped(String),
}

/// Runs the quota loop over every original in `manifest`.
///
/// The output manifest holds the input records plus the new children, with
/// relative image paths rebased from `root` to `out_dir`. Originals that
/// already have `quota` children are skipped, so rerunning on the output
/// resumes where it stopped.
pub fn run_pipeline(
    manifest: &DatasetManifest,
    root: &Path,
    policy: &AugmentationPolicy,
    backends: &Backends,
    gate: &dyn QualityGate,
    out_dir: &Path,
    jobs: usize,
) -> Result<PipelineOutput> {
    let started = Instant::now();
    policy.validate()?;
    manifest.validate()?;
    if (manifest.epsilon - policy.epsilon).abs() > 1e-12 {
        return Err(Error::Config(vec![format!(
            "policy epsilon {} differs from manifest epsilon {}",
            policy.epsilon, manifest.epsilon
        )]));
    }

    let existing = manifest.children_count();
    let work: Vec<(&ImageRecord, u32)> = manifest
        .originals()
        .map(|r| (r, existing.get(r.record_id.as_str()).copied().unwrap_or(0) as u32))
        .filter(|(_, have)| *have < policy.quota)
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(vec![format!("worker pool: {e}")]))?;
    let per_record: Vec<Vec<SlotResult>> = pool.install(|| {
        work.par_iter()
            .map(|(record, have)| -> Result<Vec<SlotResult>> {
                let path = resolve_path(root, &record.image_path);
                let source = match imageio::load_rgb(&path) {
                    Ok(img) => img,
                    Err(e) => return Ok(vec![SlotResult::Skipped(e.to_string())]),
                };
                (*have..policy.quota)
                    .map(|slot| {
                        augment_image(
                            record,
                            &source,
                            slot,
                            &manifest.vocabulary,
                            policy,
                            backends,
                            gate,
                            out_dir,
                        )
                        .map(|(child, log)| SlotResult::Done(child, log))
                    })
                    .collect()
            })
            .collect::<Result<_>>()
    })?;

    let mut out = manifest.clone();
    out.rebase_paths(root, out_dir);

    let mut report = RunReport::default();
    let mut logs = Vec::new();
    for ((record, _), results) in work.iter().zip(per_record) {
        for result in results {
            match result {
                SlotResult::Skipped(reason) => report.skipped.push(SkippedRecord {
                    record_id: record.record_id.clone(),
                    reason,
                }),
                SlotResult::Done(child, log) => {
                    report.generations += log.attempts.len();
                    match child {
                        Some(child) => {
                            report.accepted += 1;
                            *report.attempts_histogram.entry(child.attempts).or_insert(0) += 1;
                            for &l in &child.labels {
                                let name = manifest.vocabulary.name_of(l).unwrap_or("?").to_string();
                                *report.per_class_counts.entry(name).or_insert(0) += 1;
                            }
                            out.records.push(child);
                        }
                        None => {
                            if report.exhausted_record_ids.last() != Some(&record.record_id) {
                                report.exhausted_record_ids.push(record.record_id.clone());
                            }
                            report.exhausted.push(ExhaustedSlot {
                                record_id: record.record_id.clone(),
                                slot: log.slot,
                            });
                        }
                    }
                    logs.push(log);
                }
            }
        }
    }

    let children = out.children_count();
    for r in out.originals() {
        let n = children.get(r.record_id.as_str()).copied().unwrap_or(0);
        *report.children_histogram.entry(n).or_insert(0) += 1;
    }
    out.validate()?;
    report.wall_time = started.elapsed().as_secs_f64();
    Ok(PipelineOutput {
        manifest: out,
        report,
        logs,
    })
}

/// Writes attempt logs as one JSON object per line.
pub fn write_attempt_log(logs: &[AttemptLog], path: &Path) -> Result<()> {
    let mut text = String::new();
    for l in logs {
        text.push_str(&serde_json::to_string(l).expect("log serializes"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
