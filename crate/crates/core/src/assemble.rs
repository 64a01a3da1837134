//! Final dataset assembly and the original/augmented similarity report.

use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::imageio;
use crate::manifest::{resolve_path, DatasetManifest, LabelId};
use crate::scalar::Scalar;
use crate::scorer::{embed_image, EmbeddingBackend, EncoderGeometry};
use crate::{Error, Result};

/// Union of the original and augmented sets. Both must share a vocabulary,
/// ids must not collide, and every augmented record must name a parent that
/// is an original in `origin`.
pub fn assemble(origin: &DatasetManifest, aug: &DatasetManifest) -> Result<DatasetManifest> {
    if origin.vocabulary != aug.vocabulary {
        return Err(Error::Assemble(format!(
            "vocabulary mismatch: {} ({} labels) vs {} ({} labels)",
            origin.vocabulary.dataset_name(),
            origin.vocabulary.len(),
            aug.vocabulary.dataset_name(),
            aug.vocabulary.len()
        )));
    }
    let ids: HashSet<&str> = origin.records.iter().map(|r| r.record_id.as_str()).collect();
    for r in &aug.records {
        if ids.contains(r.record_id.as_str()) {
            return Err(Error::Assemble(format!(
                "record_id {} appears in both datasets",
                r.record_id
            )));
        }
        if let Some(parent) = &r.parent_id {
            let ok = origin.find(parent).is_some_and(|p| p.is_original());
            if !ok && aug.find(parent).is_none_or(|p| !p.is_original()) {
                return Err(Error::Assemble(format!(
                    "record {} has dangling parent {parent}",
                    r.record_id
                )));
            }
        }
    }
    let mut out = origin.clone();
    out.records.extend(aug.records.iter().cloned());
    out.validate()?;
    Ok(out)
}

/// `(1 + cos(u, v)) / 2`, in `[0, 1]`.
pub fn normalized_similarity<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::Shape(format!(
            "vectors of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (mut dot, mut nu, mut nv) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == T::zero() || nv == T::zero() {
        return Err(Error::InvalidArgument("zero-norm vector".into()));
    }
    // sqrt(nu * nv) rather than sqrt(nu) * sqrt(nv): exact when u = +-v
    let cos = (dot / (nu * nv).sqrt()).max(-T::one()).min(T::one());
    Ok((T::one() + cos) / T::lit(2.0))
}

/// Whole-image embedding used for similarity measurements.
pub trait VectorEmbedder: Send + Sync {
    fn embed_vector(&self, image: &image::RgbImage) -> Result<Vec<f64>>;
}

/// Mean-pools a patch encoder's output into one vector.
pub struct PooledEmbedder {
    pub inner: Arc<dyn EmbeddingBackend>,
    pub geometry: EncoderGeometry,
}

impl VectorEmbedder for PooledEmbedder {
    fn embed_vector(&self, image: &image::RgbImage) -> Result<Vec<f64>> {
        let f = embed_image(self.inner.as_ref(), image, self.geometry)?;
        let m = f.matrix();
        let mut out = vec![0.0; m.cols()];
        for r in 0..m.rows() {
            for (o, v) in out.iter_mut().zip(m.row(r)) {
                *o += v;
            }
        }
        let n = m.rows() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityPair {
    pub parent_id: String,
    pub child_id: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub class_filter: Option<String>,
    pub method: String,
    pub pairs: Vec<SimilarityPair>,
    pub mean: f64,
}

impl SimilarityReport {
    pub fn sample_size(&self) -> usize {
        self.pairs.len()
    }
}

/// Samples up to `sample_size` parent/child pairs without replacement
/// (seeded), embeds both images and reports the normalized similarity.
#[allow(clippy::too_many_arguments)]
pub fn similarity_report(
    manifest: &DatasetManifest,
    root: &Path,
    embedder: &dyn VectorEmbedder,
    class_filter: Option<LabelId>,
    sample_size: usize,
    seed: u64,
    method: &str,
) -> Result<SimilarityReport> {
    let candidates: Vec<_> = manifest
        .augmented()
        .filter(|r| class_filter.is_none_or(|c| r.labels.contains(&c)))
        .map(|child| {
            let parent_id = child.parent_id.as_deref().unwrap_or_default();
            manifest
                .find(parent_id)
                .map(|p| (p, child))
                .ok_or_else(|| Error::Manifest(format!("dangling parent {parent_id}")))
        })
        .collect::<Result<_>>()?;
    if candidates.is_empty() {
        return Err(Error::InvalidArgument(
            "no augmented records to compare".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = sample_size.min(candidates.len());
    let mut picked = rand::seq::index::sample(&mut rng, candidates.len(), k).into_vec();
    picked.sort_unstable();

    let pairs: Vec<SimilarityPair> = picked
        .par_iter()
        .map(|&i| {
            let (parent, child) = candidates[i];
            let a = imageio::load_rgb(&resolve_path(root, &parent.image_path))?;
            let b = imageio::load_rgb(&resolve_path(root, &child.image_path))?;
            let u = embedder.embed_vector(&a)?;
            let v = embedder.embed_vector(&b)?;
            Ok(SimilarityPair {
                parent_id: parent.record_id.clone(),
                child_id: child.record_id.clone(),
                similarity: normalized_similarity(&u, &v)?,
            })
        })
        .collect::<Result<_>>()?;
    let mean = pairs.iter().map(|p| p.similarity).sum::<f64>() / pairs.len() as f64;
    Ok(SimilarityReport {
        class_filter: class_filter
            .and_then(|c| manifest.vocabulary.name_of(c))
            .map(str::to_string),
        method: method.to_string(),
        pairs,
        mean,
    })
}

fn title_case(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Aligned text table with one row per report:
/// image class, sample size, augmentation method, mean similarity.
pub fn render_table(reports: &[SimilarityReport]) -> String {
    let header = ["Image class", "Image Size", "Augmentation Method", "Mean Similarity"];
    let rows: Vec<[String; 4]> = reports
        .iter()
        .map(|r| {
            [
                title_case(r.class_filter.as_deref().unwrap_or("all")),
                r.sample_size().to_string(),
                r.method.clone(),
                format!("{:.3}", r.mean),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: [&str; 4]| {
        let mut s = String::new();
        for (i, (cell, w)) in cells.iter().zip(widths).enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            if i == 3 {
                s.push_str(&format!("{cell:>w$}"));
            } else {
                s.push_str(&format!("{cell:<w$}"));
            }
        }
        s.trim_end().to_string()
    };
    let mut out = line(header);
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 6));
    out.push('\n');
    for row in &rows {
        out.push_str(&line([&row[0], &row[1], &row[2], &row[3]]));
        out.push('\n');
    }
    out
}
