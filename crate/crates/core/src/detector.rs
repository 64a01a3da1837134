//! Conditioning maps for controlled generation: a native Canny edge detector
//! and a pose map delegated to a backend.
//!
//! The Canny path is computed in exact integer arithmetic up to the final
//! threshold comparison. Gray levels use integer luma weights (299/587/114),
//! the Gaussian kernel is quantized to integers, and gradient strength is
//! compared through squared magnitudes. Adding a constant to every pixel
//! therefore leaves the output bit-for-bit unchanged.

use std::collections::VecDeque;

use image::imageops::{self, FilterType};
use image::{GrayImage, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::http::{Endpoint, JsonClient};
use crate::imageio;
use crate::manifest::{LabelId, Vocabulary};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Canny,
    Pose,
}

impl DetectorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DetectorKind::Canny => "canny",
            DetectorKind::Pose => "pose",
        }
    }
}

impl std::str::FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canny" => Ok(DetectorKind::Canny),
            "pose" => Ok(DetectorKind::Pose),
            other => Err(Error::InvalidArgument(format!(
                "unknown detector kind {other:?}"
            ))),
        }
    }
}

/// Single-channel conditioning map with the source image's dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorMap {
    pub kind: DetectorKind,
    pub image: GrayImage,
}

impl DetectorMap {
    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }

    pub fn data(&self) -> &[u8] {
        self.image.as_raw()
    }

    pub fn count_nonzero(&self) -> usize {
        self.image.as_raw().iter().filter(|&&v| v != 0).count()
    }
}

/// Pose conditioning iff the vocabulary's `person` label is among `labels`.
pub fn select_detector(labels: &std::collections::BTreeSet<LabelId>, vocab: &Vocabulary) -> DetectorKind {
    match vocab.person_id() {
        Some(p) if labels.contains(&p) => DetectorKind::Pose,
        _ => DetectorKind::Canny,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CannyParams {
    pub sigma: f64,
    /// Weak threshold as a fraction of the largest gradient magnitude.
    pub low: f64,
    /// Strong threshold as a fraction of the largest gradient magnitude.
    pub high: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self {
            sigma: 1.4,
            low: 0.1,
            high: 0.2,
        }
    }
}

const MAX_SIGMA: f64 = 50.0;
const KERNEL_SCALE: f64 = 1024.0;

impl CannyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0 && self.sigma <= MAX_SIGMA) {
            return Err(Error::InvalidArgument(format!(
                "sigma {} outside (0, {MAX_SIGMA}]",
                self.sigma
            )));
        }
        if !(self.low > 0.0 && self.low < self.high && self.high < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "thresholds must satisfy 0 < low < high < 1, got low={} high={}",
                self.low, self.high
            )));
        }
        Ok(())
    }
}

/// Integer Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<i64> {
    let r = (3.0 * sigma).ceil() as i64;
    (-r..=r)
        .map(|i| {
            let x = i as f64;
            (KERNEL_SCALE * (-(x * x) / (2.0 * sigma * sigma)).exp()).round() as i64
        })
        .collect()
}

/// Integer luma, `299 R + 587 G + 114 B`.
#[inline]
pub fn luma(px: &image::Rgb<u8>) -> i64 {
    299 * px[0] as i64 + 587 * px[1] as i64 + 114 * px[2] as i64
}

struct Plane<T> {
    w: usize,
    h: usize,
    data: Vec<T>,
}

impl<T: Copy + Default> Plane<T> {
    fn new(w: usize, h: usize) -> Self {
        Self {
            w,
            h,
            data: vec![T::default(); w * h],
        }
    }

    #[inline]
    fn at(&self, x: usize, y: usize) -> T {
        self.data[y * self.w + x]
    }

    #[inline]
    fn clamped(&self, x: i64, y: i64) -> T {
        let x = x.clamp(0, self.w as i64 - 1) as usize;
        let y = y.clamp(0, self.h as i64 - 1) as usize;
        self.at(x, y)
    }

    /// Value at `(x, y)`, or the default outside the image.
    #[inline]
    fn or_default(&self, x: i64, y: i64) -> T {
        if x < 0 || y < 0 || x >= self.w as i64 || y >= self.h as i64 {
            T::default()
        } else {
            self.at(x as usize, y as usize)
        }
    }
}

/// Separable blur with replicated borders.
fn blur(gray: &Plane<i64>, kernel: &[i64]) -> Plane<i64> {
    let r = (kernel.len() / 2) as i64;
    let mut tmp = Plane::new(gray.w, gray.h);
    for y in 0..gray.h {
        for x in 0..gray.w {
            let mut acc = 0i64;
            for (k, &wk) in kernel.iter().enumerate() {
                acc += wk * gray.clamped(x as i64 + k as i64 - r, y as i64);
            }
            tmp.data[y * gray.w + x] = acc;
        }
    }
    let mut out = Plane::new(gray.w, gray.h);
    for y in 0..gray.h {
        for x in 0..gray.w {
            let mut acc = 0i64;
            for (k, &wk) in kernel.iter().enumerate() {
                acc += wk * tmp.clamped(x as i64, y as i64 + k as i64 - r);
            }
            out.data[y * gray.w + x] = acc;
        }
    }
    out
}

// tan(22.5°) and tan(67.5°)
const TAN_22_5: f64 = std::f64::consts::SQRT_2 - 1.0;
const TAN_67_5: f64 = std::f64::consts::SQRT_2 + 1.0;

/// Step towards the gradient direction, quantized to four bins.
#[inline]
fn quantized_step(gx: i64, gy: i64) -> (i64, i64) {
    let ax = gx.unsigned_abs() as f64;
    let ay = gy.unsigned_abs() as f64;
    if ay <= ax * TAN_22_5 {
        (1, 0)
    } else if ay > ax * TAN_67_5 {
        (0, 1)
    } else if (gx > 0) == (gy > 0) {
        (1, 1)
    } else {
        (-1, 1)
    }
}

pub fn canny_edge(image: &RgbImage, params: &CannyParams) -> Result<DetectorMap> {
    params.validate()?;
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w < 3 || h < 3 {
        return Err(Error::InvalidArgument(format!(
            "image {w}x{h} smaller than 3x3"
        )));
    }

    let mut gray = Plane::new(w, h);
    for (x, y, px) in image.enumerate_pixels() {
        gray.data[y as usize * w + x as usize] = luma(px);
    }
    let blurred = blur(&gray, &gaussian_kernel(params.sigma));

    let mut gx = Plane::<i64>::new(w, h);
    let mut gy = Plane::<i64>::new(w, h);
    let mut mag2 = Plane::<i128>::new(w, h);
    let mut max2 = 0i128;
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let b = |dx: i64, dy: i64| blurred.clamped(x + dx, y + dy);
            let sx = (b(1, -1) + 2 * b(1, 0) + b(1, 1)) - (b(-1, -1) + 2 * b(-1, 0) + b(-1, 1));
            let sy = (b(-1, 1) + 2 * b(0, 1) + b(1, 1)) - (b(-1, -1) + 2 * b(0, -1) + b(1, -1));
            let i = y as usize * w + x as usize;
            gx.data[i] = sx;
            gy.data[i] = sy;
            let m = sx as i128 * sx as i128 + sy as i128 * sy as i128;
            mag2.data[i] = m;
            max2 = max2.max(m);
        }
    }

    let mut out = GrayImage::new(w as u32, h as u32);
    if max2 == 0 {
        return Ok(DetectorMap {
            kind: DetectorKind::Canny,
            image: out,
        });
    }

    // Non-maximum suppression. Ties resolve towards the pixel further along
    // the gradient so a symmetric ridge keeps exactly one pixel.
    let mut thin = Plane::<i128>::new(w, h);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let i = y as usize * w + x as usize;
            let m = mag2.data[i];
            if m == 0 {
                continue;
            }
            let (dx, dy) = quantized_step(gx.data[i], gy.data[i]);
            let behind = mag2.or_default(x - dx, y - dy);
            let ahead = mag2.or_default(x + dx, y + dy);
            if m >= behind && m > ahead {
                thin.data[i] = m;
            }
        }
    }

    let max2f = max2 as f64;
    let strong_min = params.high * params.high * max2f;
    let weak_min = params.low * params.low * max2f;
    let mut queue = VecDeque::new();
    for (i, &m) in thin.data.iter().enumerate() {
        if m > 0 && m as f64 >= strong_min {
            out.as_mut()[i] = 255;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as i64, (i / w) as i64);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                let m = thin.data[j];
                if out.as_raw()[j] == 0 && m > 0 && m as f64 >= weak_min {
                    out.as_mut()[j] = 255;
                    queue.push_back(j);
                }
            }
        }
    }

    Ok(DetectorMap {
        kind: DetectorKind::Canny,
        image: out,
    })
}

/// Pose-estimation backend returning a rendered single-channel skeleton.
pub trait PoseBackend: Send + Sync {
    fn pose(&self, image: &RgbImage) -> Result<GrayImage>;
}

/// Runs the pose backend; a map of the wrong size is resampled
/// (nearest-neighbour) to the source dimensions.
pub fn pose_map(backend: &dyn PoseBackend, image: &RgbImage) -> Result<DetectorMap> {
    let mut map = backend.pose(image)?;
    if map.dimensions() != image.dimensions() {
        log::debug!(
            "pose map {:?} resized to {:?}",
            map.dimensions(),
            image.dimensions()
        );
        map = imageops::resize(&map, image.width(), image.height(), FilterType::Nearest);
    }
    Ok(DetectorMap {
        kind: DetectorKind::Pose,
        image: map,
    })
}

/// Builds the conditioning map for a record with the given labels.
pub fn detect_for_labels(
    image: &RgbImage,
    labels: &std::collections::BTreeSet<LabelId>,
    vocab: &Vocabulary,
    canny: &CannyParams,
    pose: &dyn PoseBackend,
) -> Result<DetectorMap> {
    match select_detector(labels, vocab) {
        DetectorKind::Canny => canny_edge(image, canny),
        DetectorKind::Pose => pose_map(pose, image),
    }
}

/// Offline pose stand-in: draws the same stick figure for every image,
/// scaled to the image size.
#[derive(Debug, Default)]
pub struct MockPose;

impl MockPose {
    pub fn skeleton(width: u32, height: u32) -> GrayImage {
        let mut img = GrayImage::new(width, height);
        let (w, h) = (width as f64, height as f64);
        let p = |fx: f64, fy: f64| (fx * (w - 1.0), fy * (h - 1.0));
        let segments = [
            (p(0.50, 0.22), p(0.50, 0.55)), // torso
            (p(0.50, 0.30), p(0.30, 0.45)), // left arm
            (p(0.50, 0.30), p(0.70, 0.45)), // right arm
            (p(0.50, 0.55), p(0.38, 0.85)), // left leg
            (p(0.50, 0.55), p(0.62, 0.85)), // right leg
            (p(0.42, 0.30), p(0.58, 0.30)), // shoulders
        ];
        for (a, b) in segments {
            draw_line(&mut img, a, b);
        }
        let (cx, cy) = p(0.5, 0.14);
        let r = 0.07 * w.min(h);
        let steps = 64;
        for k in 0..steps {
            let t0 = k as f64 / steps as f64 * std::f64::consts::TAU;
            let t1 = (k + 1) as f64 / steps as f64 * std::f64::consts::TAU;
            draw_line(
                &mut img,
                (cx + r * t0.cos(), cy + r * t0.sin()),
                (cx + r * t1.cos(), cy + r * t1.sin()),
            );
        }
        img
    }
}

fn draw_line(img: &mut GrayImage, a: (f64, f64), b: (f64, f64)) {
    let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let x = (a.0 + t * (b.0 - a.0)).round();
        let y = (a.1 + t * (b.1 - a.1)).round();
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Luma([255]));
        }
    }
}

impl PoseBackend for MockPose {
    fn pose(&self, image: &RgbImage) -> Result<GrayImage> {
        Ok(Self::skeleton(image.width(), image.height()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PoseRequest {
    pub image: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PoseResponse {
    pub map: String,
}

pub struct HttpPose {
    client: JsonClient,
}

impl HttpPose {
    pub fn new(endpoint: Endpoint) -> Self {
        Self {
            client: JsonClient::new("pose", endpoint),
        }
    }
}

impl PoseBackend for HttpPose {
    fn pose(&self, image: &RgbImage) -> Result<GrayImage> {
        let req = PoseRequest {
            image: imageio::rgb_to_base64_png(image)?,
        };
        let resp: PoseResponse = self.client.post(&req)?;
        imageio::gray_from_base64_png(&resp.map).map_err(|e| Error::Contract {
            backend: "pose",
            message: e.to_string(),
        })
    }
}
