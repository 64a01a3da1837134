//! Controlled image generation `(source, map, prompt) -> image`.

use std::sync::{Condvar, Mutex};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::detector::DetectorMap;
use crate::http::{Endpoint, JsonClient};
use crate::imageio;
use crate::seed::stable_hash;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationParams {
    pub steps: u32,
    pub guidance: f64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            steps: 30,
            guidance: 7.5,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GenerationRequest<'a> {
    pub source: &'a RgbImage,
    pub map: &'a DetectorMap,
    pub prompt: &'a str,
    pub seed: u64,
    pub params: GenerationParams,
}

impl GenerationRequest<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.map.image.dimensions() != self.source.dimensions() {
            return Err(Error::InvalidArgument(format!(
                "map {:?} does not match source {:?}",
                self.map.image.dimensions(),
                self.source.dimensions()
            )));
        }
        if self.prompt.trim().is_empty() {
            return Err(Error::InvalidArgument("empty prompt".into()));
        }
        if self.params.steps == 0 || !(self.params.guidance > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "steps must be positive and guidance > 0, got {:?}",
                self.params
            )));
        }
        Ok(())
    }
}

pub trait GenerationBackend: Send + Sync {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<RgbImage>;
}

/// Validates the request, runs the backend and enforces that the output has
/// the source dimensions.
pub fn generate(backend: &dyn GenerationBackend, request: &GenerationRequest<'_>) -> Result<RgbImage> {
    request.validate()?;
    let out = backend.generate(request)?;
    if out.dimensions() != request.source.dimensions() {
        return Err(Error::Contract {
            backend: "generation",
            message: format!(
                "returned {}x{} for a {}x{} source",
                out.width(),
                out.height(),
                request.source.width(),
                request.source.height()
            ),
        });
    }
    Ok(out)
}

/// Hue rotation in degrees the mock applies for `(prompt, seed)`:
/// SHA-256 over `prompt || 0x00 || seed_le`, first 8 bytes as a
/// little-endian integer, modulo 360.
pub fn mock_hue_angle(prompt: &str, seed: u64) -> u32 {
    (stable_hash(&[prompt.as_bytes(), &[0], &seed.to_le_bytes()]) % 360) as u32
}

/// Rotates the hue of one pixel in HSV space, keeping saturation and value.
pub fn rotate_hue(px: Rgb<u8>, degrees: f64) -> Rgb<u8> {
    let [r, g, b] = px.0.map(|c| c as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if delta == 0.0 {
        return px;
    }
    let hue = if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let sat = delta / max;
    let h = (hue + degrees).rem_euclid(360.0) / 60.0;
    let c = max * sat;
    let x = c * (1.0 - (h.rem_euclid(2.0) - 1.0).abs());
    let m = max - c;
    let (r1, g1, b1) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let to_u8 = |v: f64| ((v + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    Rgb([to_u8(r1), to_u8(g1), to_u8(b1)])
}

/// Offline generator: hue-rotates the source by [`mock_hue_angle`] and
/// blends non-zero map pixels over the result at 50% opacity.
#[derive(Debug, Default)]
pub struct MockGeneration;

impl MockGeneration {
    pub fn render(request: &GenerationRequest<'_>) -> RgbImage {
        let angle = mock_hue_angle(request.prompt, request.seed) as f64;
        let mut out = RgbImage::new(request.source.width(), request.source.height());
        for (x, y, px) in request.source.enumerate_pixels() {
            let mut c = rotate_hue(*px, angle);
            let m = request.map.image.get_pixel(x, y)[0];
            if m != 0 {
                c = Rgb(c.0.map(|v| (v as u16 + m as u16).div_ceil(2) as u8));
            }
            out.put_pixel(x, y, c);
        }
        out
    }
}

impl GenerationBackend for MockGeneration {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<RgbImage> {
        Ok(Self::render(request))
    }
}

/// Wire body for the generation endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateWireRequest {
    pub image: String,
    pub map: String,
    pub map_kind: String,
    pub prompt: String,
    pub seed: u64,
    pub steps: u32,
    pub guidance: f64,
}

impl GenerateWireRequest {
    pub fn from_request(request: &GenerationRequest<'_>) -> Result<Self> {
        Ok(Self {
            image: imageio::rgb_to_base64_png(request.source)?,
            map: imageio::gray_to_base64_png(&request.map.image)?,
            map_kind: request.map.kind.as_str().to_string(),
            prompt: request.prompt.to_string(),
            seed: request.seed,
            steps: request.params.steps,
            guidance: request.params.guidance,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateWireResponse {
    pub image: String,
}

pub struct HttpGeneration {
    client: JsonClient,
}

impl HttpGeneration {
    pub fn new(endpoint: Endpoint) -> Self {
        Self {
            client: JsonClient::new("generation", endpoint),
        }
    }
}

impl GenerationBackend for HttpGeneration {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<RgbImage> {
        let body = GenerateWireRequest::from_request(request)?;
        let resp: GenerateWireResponse = self.client.post(&body)?;
        imageio::rgb_from_base64_png(&resp.image).map_err(|e| Error::Contract {
            backend: "generation",
            message: e.to_string(),
        })
    }
}

/// Counting semaphore.
#[derive(Debug)]
pub(crate) struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    pub(crate) fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    pub(crate) fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut n = self.permits.lock().expect("semaphore lock");
        while *n == 0 {
            n = self.cv.wait(n).expect("semaphore lock");
        }
        *n -= 1;
        SemaphoreGuard { sem: self }
    }
}

pub(crate) struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.sem.permits.lock().expect("semaphore lock") += 1;
        self.sem.cv.notify_one();
    }
}

/// Caps the number of in-flight requests to the wrapped backend.
pub struct ConcurrencyLimited<B> {
    inner: B,
    sem: Semaphore,
}

impl<B> ConcurrencyLimited<B> {
    pub fn new(inner: B, max_in_flight: usize) -> Self {
        Self {
            inner,
            sem: Semaphore::new(max_in_flight),
        }
    }
}

impl<B: GenerationBackend> GenerationBackend for ConcurrencyLimited<B> {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<RgbImage> {
        let _permit = self.sem.acquire();
        self.inner.generate(request)
    }
}
