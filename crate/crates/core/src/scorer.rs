//! Patch-driven multi-label classifier used as the online quality gate.
//!
//! Patch embeddings `F` (s x e) from a frozen encoder are mapped through a
//! trainable linear head `W` (e x |C|), softmaxed per patch, and max-pooled
//! over patches into image-level class scores. The head is trained with the
//! mean per-class binary cross-entropy of those pooled scores.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::http::{Endpoint, JsonClient};
use crate::imageio;
use crate::manifest::{resolve_path, DatasetManifest, LabelId};
use crate::scalar::{Matrix, Scalar};
use crate::{Error, Result};

/// Probability clamp applied before taking logarithms.
pub const BCE_CLAMP: f64 = 1e-7;

/// Encoder input geometry: square input side and patch side, both in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderGeometry {
    pub input_size: u32,
    pub patch_size: u32,
}

impl Default for EncoderGeometry {
    fn default() -> Self {
        Self {
            input_size: 384,
            patch_size: 16,
        }
    }
}

impl EncoderGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.input_size == 0 || !self.input_size.is_multiple_of(self.patch_size) {
            return Err(Error::InvalidArgument(format!(
                "input size {} must be a positive multiple of patch size {}",
                self.input_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> u32 {
        self.input_size / self.patch_size
    }

    /// Number of patches, `h * w / d^2`.
    pub fn patches(&self) -> usize {
        (self.grid() as usize).pow(2)
    }
}

/// Patch embedding matrix `F`, one row per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbeddings<T> {
    matrix: Matrix<T>,
}

impl<T: Scalar> PatchEmbeddings<T> {
    pub fn new(matrix: Matrix<T>) -> Result<Self> {
        if matrix.rows() == 0 || matrix.cols() == 0 {
            return Err(Error::Shape("patch embeddings must be non-empty".into()));
        }
        if !matrix.is_finite() {
            return Err(Error::NonFinite("patch embeddings".into()));
        }
        Ok(Self { matrix })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    /// Embeddings for an `h x w` image tiled into `d x d` patches.
    pub fn for_image(height: usize, width: usize, patch: usize, matrix: Matrix<T>) -> Result<Self> {
        if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
            return Err(Error::Shape(format!(
                "{height}x{width} image is not tiled by {patch}x{patch} patches"
            )));
        }
        let s = (height / patch) * (width / patch);
        if matrix.rows() != s {
            return Err(Error::Shape(format!(
                "expected {s} patch rows, got {}",
                matrix.rows()
            )));
        }
        Self::new(matrix)
    }

    pub fn patches(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.matrix
    }

    pub fn cast<U: Scalar>(&self) -> PatchEmbeddings<U> {
        PatchEmbeddings {
            matrix: self.matrix.cast(),
        }
    }
}

/// Linear classification head `W` (e x |C|).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead<T> {
    weights: Matrix<T>,
}

impl<T: Scalar> LinearHead<T> {
    pub fn new(weights: Matrix<T>) -> Result<Self> {
        if weights.rows() == 0 || weights.cols() == 0 {
            return Err(Error::Shape("head must be non-empty".into()));
        }
        if !weights.is_finite() {
            return Err(Error::NonFinite("head weights".into()));
        }
        Ok(Self { weights })
    }

    pub fn zeros(dim: usize, classes: usize) -> Self {
        Self {
            weights: Matrix::zeros(dim, classes),
        }
    }

    /// Uniform entries in `[-scale, scale]` from a seeded ChaCha8 stream.
    pub fn seeded_uniform(dim: usize, classes: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..dim * classes)
            .map(|_| T::lit(rng.random_range(-scale..=scale)))
            .collect();
        Self {
            weights: Matrix::from_vec(dim, classes, data).expect("sized"),
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn classes(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Matrix<T> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Matrix<T> {
        &mut self.weights
    }
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows<T: Scalar>(logits: &Matrix<T>) -> Matrix<T> {
    let mut out = logits.clone();
    let cols = logits.cols();
    for row in out.as_mut_slice().chunks_mut(cols.max(1)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Per-patch class probabilities `softmax(F W)`, an s x |C| matrix.
pub fn patch_scores<T: Scalar>(f: &PatchEmbeddings<T>, w: &LinearHead<T>) -> Result<Matrix<T>> {
    if f.dim() != w.dim() {
        return Err(Error::Shape(format!(
            "embedding dim {} does not match head rows {}",
            f.dim(),
            w.dim()
        )));
    }
    if !f.matrix.is_finite() || !w.weights.is_finite() {
        return Err(Error::NonFinite("patch_scores input".into()));
    }
    Ok(softmax_rows(&f.matrix.matmul(&w.weights)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageScores<T> {
    /// Image-level score per class.
    pub scores: Vec<T>,
    /// First patch index attaining each class maximum.
    pub argmax: Vec<usize>,
}

/// Global max pooling over patches, per class.
pub fn image_scores<T: Scalar>(z: &Matrix<T>) -> Result<ImageScores<T>> {
    if z.rows() == 0 || z.cols() == 0 {
        return Err(Error::Shape("empty patch score matrix".into()));
    }
    let mut scores = z.row(0).to_vec();
    let mut argmax = vec![0; z.cols()];
    for p in 1..z.rows() {
        for (c, &v) in z.row(p).iter().enumerate() {
            if v > scores[c] {
                scores[c] = v;
                argmax[c] = p;
            }
        }
    }
    Ok(ImageScores { scores, argmax })
}

fn clamp_prob<T: Scalar>(p: T) -> T {
    let d = T::lit(BCE_CLAMP);
    p.max(d).min(T::one() - d)
}

/// Mean binary cross-entropy over classes.
pub fn mce_loss<T: Scalar>(targets: &[T], predicted: &[T]) -> Result<T> {
    if targets.len() != predicted.len() || targets.is_empty() {
        return Err(Error::Shape(format!(
            "targets have {} classes, predictions {}",
            targets.len(),
            predicted.len()
        )));
    }
    let mut sum = T::zero();
    for (&y, &p) in targets.iter().zip(predicted) {
        let p = clamp_prob(p);
        sum -= y * p.ln() + (T::one() - y) * (T::one() - p).ln();
    }
    Ok(sum / T::from_usize(targets.len()).expect("class count"))
}

/// Loss and its gradient with respect to `W` for a single image.
///
/// Backpropagates BCE -> max pooling -> softmax -> `F W`. Pooling routes each
/// class's gradient only through its arg-max patch; probabilities sitting in
/// the clamp region contribute zero gradient.
pub fn mce_loss_and_gradient<T: Scalar>(
    targets: &[T],
    f: &PatchEmbeddings<T>,
    w: &LinearHead<T>,
) -> Result<(T, Matrix<T>)> {
    let classes = w.classes();
    if targets.len() != classes {
        return Err(Error::Shape(format!(
            "targets have {} classes, head {}",
            targets.len(),
            classes
        )));
    }
    let z = patch_scores(f, w)?;
    let pooled = image_scores(&z)?;
    let loss = mce_loss(targets, &pooled.scores)?;

    let inv_c = T::one() / T::from_usize(classes).expect("class count");
    let d = T::lit(BCE_CLAMP);
    let e = f.dim();
    let mut grad = Matrix::zeros(e, classes);
    // d loss / d logits, only for patches that won a class
    let mut dlogits: Vec<(usize, Vec<T>)> = Vec::new();
    for c in 0..classes {
        let y = targets[c];
        let p_hat = pooled.scores[c];
        if !(p_hat > d && p_hat < T::one() - d) {
            continue;
        }
        let g = inv_c * (-y / p_hat + (T::one() - y) / (T::one() - p_hat));
        let p = pooled.argmax[c];
        let zrow = z.row(p);
        let slot = match dlogits.iter().position(|(q, _)| *q == p) {
            Some(i) => i,
            None => {
                dlogits.push((p, vec![T::zero(); classes]));
                dlogits.len() - 1
            }
        };
        let row = &mut dlogits[slot].1;
        for j in 0..classes {
            let kron = if j == c { T::one() } else { T::zero() };
            row[j] += g * zrow[c] * (kron - zrow[j]);
        }
    }
    for (p, dl) in &dlogits {
        let frow = f.matrix.row(*p);
        for (k, &fv) in frow.iter().enumerate() {
            if fv == T::zero() {
                continue;
            }
            for (j, &d) in dl.iter().enumerate().take(classes) {
                let cur = grad.get(k, j);
                grad.set(k, j, cur + fv * d);
            }
        }
    }
    Ok((loss, grad))
}

/// Gradient of the multi-label loss with respect to the head weights.
pub fn mce_gradient<T: Scalar>(targets: &[T], f: &PatchEmbeddings<T>, w: &LinearHead<T>) -> Result<Matrix<T>> {
    mce_loss_and_gradient(targets, f, w).map(|(_, g)| g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityScore<T> {
    pub per_class: Vec<T>,
    /// Minimum of `per_class` over the image's labels.
    pub target_score: T,
    pub argmax_patch: Vec<usize>,
}

/// Scores precomputed embeddings against a label set.
pub fn score_embeddings<T: Scalar>(
    f: &PatchEmbeddings<T>,
    labels: &BTreeSet<LabelId>,
    head: &LinearHead<T>,
) -> Result<QualityScore<T>> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("empty label set".into()));
    }
    let z = patch_scores(f, head)?;
    let pooled = image_scores(&z)?;
    let mut target = T::infinity();
    for &l in labels {
        let v = *pooled.scores.get(l as usize).ok_or_else(|| {
            Error::InvalidArgument(format!("label {l} outside head with {} classes", head.classes()))
        })?;
        target = target.min(v);
    }
    Ok(QualityScore {
        per_class: pooled.scores,
        target_score: target,
        argmax_patch: pooled.argmax,
    })
}

pub fn score_image<T: Scalar>(
    image: &RgbImage,
    labels: &BTreeSet<LabelId>,
    head: &LinearHead<T>,
    embedder: &dyn EmbeddingBackend,
    geometry: EncoderGeometry,
) -> Result<QualityScore<T>> {
    let f = embed_image(embedder, image, geometry)?.cast::<T>();
    score_embeddings(&f, labels, head)
}

/// Frozen patch encoder.
pub trait EmbeddingBackend: Send + Sync {
    /// Embeds an image already resized to the encoder input size.
    fn embed(&self, image: &RgbImage) -> Result<PatchEmbeddings<f64>>;
}

/// Resizes to the encoder input and checks the returned patch count.
pub fn embed_image(
    backend: &dyn EmbeddingBackend,
    image: &RgbImage,
    geometry: EncoderGeometry,
) -> Result<PatchEmbeddings<f64>> {
    let size = geometry.input_size;
    let resized;
    let input = if image.dimensions() == (size, size) {
        image
    } else {
        resized = imageops::resize(image, size, size, FilterType::Triangle);
        &resized
    };
    let f = backend.embed(input)?;
    if f.patches() != geometry.patches() {
        return Err(Error::Contract {
            backend: "embedding",
            message: format!(
                "expected {} patches for {size}x{size} input, got {}",
                geometry.patches(),
                f.patches()
            ),
        });
    }
    Ok(f)
}

/// Offline encoder computing hand-made per-patch statistics in HSV space.
/// Hue never enters a feature, so hue-rotated copies embed almost identically.
#[derive(Debug, Clone, Copy)]
pub struct MockEmbedder {
    pub patch_size: u32,
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self { patch_size: 16 }
    }
}

pub const MOCK_EMBED_DIM: usize = 8;

fn sat_val(px: &image::Rgb<u8>) -> (f64, f64) {
    let max = px.0.iter().copied().max().unwrap_or(0) as f64 / 255.0;
    let min = px.0.iter().copied().min().unwrap_or(0) as f64 / 255.0;
    let s = if max > 0.0 { (max - min) / max } else { 0.0 };
    (s, max)
}

impl EmbeddingBackend for MockEmbedder {
    fn embed(&self, image: &RgbImage) -> Result<PatchEmbeddings<f64>> {
        let d = self.patch_size;
        let (w, h) = image.dimensions();
        if d == 0 || w % d != 0 || h % d != 0 {
            return Err(Error::Shape(format!(
                "{w}x{h} image is not tiled by {d}x{d} patches"
            )));
        }
        let (gw, gh) = (w / d, h / d);
        let n = (d * d) as f64;
        let mut data = Vec::with_capacity((gw * gh) as usize * MOCK_EMBED_DIM);
        for py in 0..gh {
            for px in 0..gw {
                let (mut sv, mut ss, mut sv2) = (0.0, 0.0, 0.0);
                let (mut dxs, mut dys, mut bright, mut dark) = (0.0, 0.0, 0.0, 0.0);
                for y in 0..d {
                    for x in 0..d {
                        let (ix, iy) = (px * d + x, py * d + y);
                        let (s, v) = sat_val(image.get_pixel(ix, iy));
                        sv += v;
                        sv2 += v * v;
                        ss += s;
                        if v > 0.75 {
                            bright += 1.0;
                        }
                        if v < 0.25 {
                            dark += 1.0;
                        }
                        if x + 1 < d {
                            dxs += (sat_val(image.get_pixel(ix + 1, iy)).1 - v).abs();
                        }
                        if y + 1 < d {
                            dys += (sat_val(image.get_pixel(ix, iy + 1)).1 - v).abs();
                        }
                    }
                }
                let mean_v = sv / n;
                let edge_n = (d * (d - 1)).max(1) as f64;
                data.extend_from_slice(&[
                    mean_v,
                    ss / n,
                    (sv2 / n - mean_v * mean_v).max(0.0).sqrt(),
                    dxs / edge_n,
                    dys / edge_n,
                    bright / n,
                    dark / n,
                    1.0,
                ]);
            }
        }
        PatchEmbeddings::new(Matrix::from_vec(
            (gw * gh) as usize,
            MOCK_EMBED_DIM,
            data,
        )?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub image: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl EmbedResponse {
    pub fn into_embeddings(self) -> Result<PatchEmbeddings<f64>> {
        let [s, e] = self.shape;
        let m = Matrix::from_vec(s, e, self.data).map_err(|e| Error::Contract {
            backend: "embedding",
            message: e.to_string(),
        })?;
        PatchEmbeddings::new(m)
    }
}

pub struct HttpEmbedder {
    client: JsonClient,
}

impl HttpEmbedder {
    pub fn new(endpoint: Endpoint) -> Self {
        Self {
            client: JsonClient::new("embedding", endpoint),
        }
    }
}

impl EmbeddingBackend for HttpEmbedder {
    fn embed(&self, image: &RgbImage) -> Result<PatchEmbeddings<f64>> {
        let req = EmbedRequest {
            image: imageio::rgb_to_base64_png(image)?,
        };
        let resp: EmbedResponse = self.client.post(&req)?;
        resp.into_embeddings()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Half-width of the uniform initialization interval.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            batch_size: 16,
            learning_rate: 0.05,
            init_scale: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingSample<T> {
    pub embeddings: PatchEmbeddings<T>,
    /// Multi-hot target vector over the vocabulary.
    pub targets: Vec<T>,
}

impl<T: Scalar> TrainingSample<T> {
    pub fn new(embeddings: PatchEmbeddings<T>, labels: &BTreeSet<LabelId>, classes: usize) -> Result<Self> {
        let mut targets = vec![T::zero(); classes];
        for &l in labels {
            *targets.get_mut(l as usize).ok_or_else(|| {
                Error::InvalidArgument(format!("label {l} outside {classes} classes"))
            })? = T::one();
        }
        Ok(Self { embeddings, targets })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub head: LinearHead<T>,
    /// Mean sample loss per epoch, measured before each batch's update.
    pub epoch_losses: Vec<T>,
}

/// Minibatch gradient descent on the multi-label loss.
pub fn train_on_samples<T: Scalar>(
    samples: &[TrainingSample<T>],
    classes: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("no training samples".into()))?;
    let dim = first.embeddings.dim();
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "batch size and learning rate must be positive: {cfg:?}"
        )));
    }
    for (i, s) in samples.iter().enumerate() {
        if s.embeddings.dim() != dim || s.targets.len() != classes {
            return Err(Error::Shape(format!("training sample {i} has inconsistent shape")));
        }
    }

    let mut head = LinearHead::<T>::seeded_uniform(dim, classes, cfg.init_scale, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let lr = T::lit(cfg.learning_rate);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs as usize);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = T::zero();
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grad = Matrix::<T>::zeros(dim, classes);
            for &i in batch {
                let s = &samples[i];
                let (loss, g) = mce_loss_and_gradient(&s.targets, &s.embeddings, &head)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss {loss} at epoch {epoch}, batch {b}, sample {i}"
                    )));
                }
                total += loss;
                for (acc, v) in grad.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *acc += *v;
                }
            }
            let scale = lr / T::from_usize(batch.len()).expect("batch size");
            for (w, g) in head.weights_mut().as_mut_slice().iter_mut().zip(grad.as_slice()) {
                *w -= scale * *g;
            }
            if !head.weights().is_finite() {
                return Err(Error::NonFinite(format!(
                    "head weights after epoch {epoch}, batch {b}"
                )));
            }
        }
        let mean = total / T::from_usize(samples.len()).expect("sample count");
        log::debug!("epoch {epoch}: mean loss {mean}");
        epoch_losses.push(mean);
    }
    Ok(TrainOutcome { head, epoch_losses })
}

/// Trains the head on the original records of a manifest. Embeddings are
/// fetched once (the encoder is frozen), concurrently, and kept in record
/// order so the result only depends on the seed and the data.
pub fn train_head<T: Scalar>(
    manifest: &DatasetManifest,
    root: &Path,
    embedder: &dyn EmbeddingBackend,
    geometry: EncoderGeometry,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    geometry.validate()?;
    let classes = manifest.vocabulary.len();
    let originals: Vec<_> = manifest.originals().collect();
    let samples: Vec<TrainingSample<T>> = originals
        .par_iter()
        .map(|r| {
            let img = imageio::load_rgb(&resolve_path(root, &r.image_path))?;
            let f = embed_image(embedder, &img, geometry)?.cast::<T>();
            TrainingSample::new(f, &r.labels, classes)
        })
        .collect::<Result<_>>()?;
    train_on_samples(&samples, classes, cfg)
}

const HEAD_MAGIC: &[u8; 4] = b"AGHD";
const HEAD_VERSION: u32 = 1;

/// Binary head file: magic, `u32` format version, `u64` rows (e), `u64`
/// columns (|C|), then row-major little-endian `f64` weights.
pub fn save_head<T: Scalar>(head: &LinearHead<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + 8 * head.dim() * head.classes());
    buf.extend_from_slice(HEAD_MAGIC);
    buf.extend_from_slice(&HEAD_VERSION.to_le_bytes());
    buf.extend_from_slice(&(head.dim() as u64).to_le_bytes());
    buf.extend_from_slice(&(head.classes() as u64).to_le_bytes());
    for v in head.weights().as_slice() {
        buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_head<T: Scalar>(path: &Path) -> Result<LinearHead<T>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Parse {
        line: 0,
        message: format!("{}: {m}", path.display()),
    };
    if buf.len() < 24 || &buf[..4] != HEAD_MAGIC {
        return Err(bad("not a head file"));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
    if version != HEAD_VERSION {
        return Err(bad(&format!("unsupported head version {version}")));
    }
    let rows = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes")) as usize;
    let cols = u64::from_le_bytes(buf[16..24].try_into().expect("8 bytes")) as usize;
    let body = &buf[24..];
    if rows.checked_mul(cols).and_then(|n| n.checked_mul(8)) != Some(body.len()) {
        return Err(bad("payload size does not match header"));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect();
    LinearHead::new(Matrix::from_vec(rows, cols, data)?)
}
