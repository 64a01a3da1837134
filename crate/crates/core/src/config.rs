//! Run configuration: built-in defaults, overlaid by a TOML file, overlaid
//! by command-line flags.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;

use crate::augment::AugmentationPolicy;
use crate::detector::{CannyParams, HttpPose, MockPose, PoseBackend};
use crate::generation::{ConcurrencyLimited, GenerationBackend, GenerationParams, HttpGeneration, MockGeneration};
use crate::http::{Endpoint, RetryPolicy};
use crate::manifest::Vocabulary;
use crate::prompt::{HttpLlm, LlmBackend, MockLlm, PromptTemplates, DEFAULT_MAX_ITERS};
use crate::scorer::{EmbeddingBackend, EncoderGeometry, HttpEmbedder, MockEmbedder, TrainConfig};
use crate::{Error, Result, DEFAULT_EPSILON};

/// Method label used in similarity tables.
pub const DEFAULT_METHOD: &str = "Controlled Self-Refined Diffusion";

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Every artifact a subcommand writes goes under this directory.
    pub out: PathBuf,
    pub seed: u64,
    pub jobs: usize,
    pub epsilon: f64,
    /// Preset name (`voc` or `coco`), ignored when `vocabulary_file` is set.
    pub vocabulary: String,
    pub vocabulary_file: Option<PathBuf>,
    pub augment: AugmentSection,
    pub canny: CannyParams,
    pub generation: GenerationParams,
    pub geometry: EncoderGeometry,
    pub training: TrainingSection,
    pub templates: PromptTemplates,
    pub report: ReportSection,
    pub llm: BackendSection,
    pub diffusion: BackendSection,
    pub embed: BackendSection,
    pub similarity: BackendSection,
    pub pose: BackendSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("out"),
            seed: 0,
            jobs: 4,
            epsilon: DEFAULT_EPSILON,
            vocabulary: "voc".into(),
            vocabulary_file: None,
            augment: AugmentSection::default(),
            canny: CannyParams::default(),
            generation: GenerationParams::default(),
            geometry: EncoderGeometry::default(),
            training: TrainingSection::default(),
            templates: PromptTemplates::default(),
            report: ReportSection::default(),
            llm: BackendSection::default(),
            diffusion: BackendSection::default(),
            embed: BackendSection::default(),
            similarity: BackendSection::default(),
            pose: BackendSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub max_attempts: u32,
    pub quota: u32,
    pub fresh_prompt_per_attempt: bool,
    pub prompt_max_iters: u32,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let p = AugmentationPolicy::default();
        Self {
            max_attempts: p.max_attempts,
            quota: p.quota,
            fresh_prompt_per_attempt: p.fresh_prompt_per_attempt,
            prompt_max_iters: DEFAULT_MAX_ITERS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub init_scale: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            init_scale: t.init_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    pub sample_size: usize,
    pub method: String,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            sample_size: 100,
            method: DEFAULT_METHOD.into(),
        }
    }
}

/// One backend slot: either the in-process mock or a live HTTP endpoint.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSection {
    pub mock: bool,
    pub url: Option<String>,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    /// Chat model name; only the LLM slot uses it.
    pub model: String,
    pub timeout_secs: u64,
    pub retries: u32,
    /// Cap on concurrent requests; only the diffusion slot uses it.
    pub max_in_flight: usize,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            mock: false,
            url: None,
            api_key_env: None,
            model: "gpt-4o".into(),
            timeout_secs: 300,
            retries: RetryPolicy::default().attempts,
            max_in_flight: 4,
        }
    }
}

impl BackendSection {
    fn endpoint(&self, slot: &str) -> Result<Endpoint> {
        let url = self.url.as_deref().filter(|u| !u.trim().is_empty()).ok_or_else(|| {
            Error::Config(vec![format!(
                "[{slot}] is live but has no url; set [{slot}].url or pass --mock-{}",
                mock_flag(slot)
            )])
        })?;
        let var = self
            .api_key_env
            .clone()
            .unwrap_or_else(|| format!("AUGAGENT_{}_API_KEY", slot.to_ascii_uppercase()));
        let key = std::env::var(&var).ok().filter(|k| !k.is_empty());
        Ok(Endpoint::new(url)
            .with_api_key(key)
            .with_timeout(Duration::from_secs(self.timeout_secs))
            .with_retry(RetryPolicy {
                attempts: self.retries,
                ..RetryPolicy::default()
            }))
    }
}

fn mock_flag(slot: &str) -> &str {
    match slot {
        "similarity" => "embed",
        other => other,
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub epsilon: Option<f64>,
    pub max_attempts: Option<u32>,
    pub quota: Option<u32>,
    pub jobs: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub mock_llm: bool,
    pub mock_diffusion: bool,
    pub mock_embed: bool,
    pub mock_pose: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))
    }

    /// Reads `path` (or starts from defaults), applies `overrides` and
    /// validates the result.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(vec![format!("{}: {e}", p.display())]))?;
                Self::from_toml(&text)
                    .map_err(|e| match e {
                        Error::Config(v) => Error::Config(
                            v.into_iter().map(|m| format!("{}: {m}", p.display())).collect(),
                        ),
                        other => other,
                    })?
            }
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.epsilon {
            self.epsilon = v;
        }
        if let Some(v) = o.max_attempts {
            self.augment.max_attempts = v;
        }
        if let Some(v) = o.quota {
            self.augment.quota = v;
        }
        if let Some(v) = o.jobs {
            self.jobs = v;
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
        self.llm.mock |= o.mock_llm;
        self.diffusion.mock |= o.mock_diffusion;
        self.embed.mock |= o.mock_embed;
        self.similarity.mock |= o.mock_embed;
        self.pose.mock |= o.mock_pose;
    }

    /// Collects every violation rather than stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.jobs == 0 {
            problems.push("jobs must be at least 1".to_string());
        }
        if self.vocabulary_file.is_none() && Vocabulary::preset(&self.vocabulary).is_none() {
            problems.push(format!("unknown vocabulary preset {:?}", self.vocabulary));
        }
        if let Err(Error::Config(v)) = self.policy().validate() {
            problems.extend(v);
        }
        if self.generation.steps == 0 || !(self.generation.guidance > 0.0) {
            problems.push(format!(
                "generation steps must be positive and guidance > 0, got {:?}",
                self.generation
            ));
        }
        let t = &self.training;
        if t.batch_size == 0 {
            problems.push("training batch_size must be at least 1".into());
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            problems.push(format!("training learning_rate {} must be positive", t.learning_rate));
        }
        if !(t.init_scale >= 0.0 && t.init_scale.is_finite()) {
            problems.push(format!("training init_scale {} must be non-negative", t.init_scale));
        }
        if self.report.sample_size == 0 {
            problems.push("report sample_size must be at least 1".into());
        }
        if self.diffusion.max_in_flight == 0 {
            problems.push("diffusion max_in_flight must be at least 1".into());
        }
        for (slot, b) in self.slots() {
            if b.retries == 0 {
                problems.push(format!("[{slot}] retries must be at least 1"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    fn slots(&self) -> [(&'static str, &BackendSection); 5] {
        [
            ("llm", &self.llm),
            ("diffusion", &self.diffusion),
            ("embed", &self.embed),
            ("similarity", &self.similarity),
            ("pose", &self.pose),
        ]
    }

    pub fn policy(&self) -> AugmentationPolicy {
        AugmentationPolicy {
            epsilon: self.epsilon,
            max_attempts: self.augment.max_attempts,
            quota: self.augment.quota,
            base_seed: self.seed,
            fresh_prompt_per_attempt: self.augment.fresh_prompt_per_attempt,
            prompt_max_iters: self.augment.prompt_max_iters,
            canny: self.canny,
            generation: self.generation,
            geometry: self.geometry,
            templates: self.templates.clone(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            learning_rate: self.training.learning_rate,
            init_scale: self.training.init_scale,
            seed: self.seed,
        }
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        match &self.vocabulary_file {
            Some(p) => Vocabulary::from_file(p),
            None => Vocabulary::preset(&self.vocabulary).ok_or_else(|| {
                Error::Config(vec![format!("unknown vocabulary preset {:?}", self.vocabulary)])
            }),
        }
    }

    pub fn llm(&self) -> Result<Arc<dyn LlmBackend>> {
        if self.llm.mock {
            return Ok(Arc::new(MockLlm));
        }
        let client = HttpLlm::new(self.llm.endpoint("llm")?, self.llm.model.clone());
        Ok(Arc::new(client))
    }

    pub fn generator(&self) -> Result<Arc<dyn GenerationBackend>> {
        let limit = self.diffusion.max_in_flight;
        if self.diffusion.mock {
            return Ok(Arc::new(ConcurrencyLimited::new(MockGeneration, limit)));
        }
        let client = HttpGeneration::new(self.diffusion.endpoint("diffusion")?);
        Ok(Arc::new(ConcurrencyLimited::new(client, limit)))
    }

    pub fn embedder(&self) -> Result<Arc<dyn EmbeddingBackend>> {
        embedder_for(&self.embed, "embed", self.geometry.patch_size)
    }

    /// Embedder for similarity reports; a separate slot from the scorer's.
    pub fn similarity_embedder(&self) -> Result<Arc<dyn EmbeddingBackend>> {
        embedder_for(&self.similarity, "similarity", self.geometry.patch_size)
    }

    pub fn pose(&self) -> Result<Arc<dyn PoseBackend>> {
        if self.pose.mock {
            return Ok(Arc::new(MockPose));
        }
        Ok(Arc::new(HttpPose::new(self.pose.endpoint("pose")?)))
    }
}

fn embedder_for(section: &BackendSection, slot: &str, patch_size: u32) -> Result<Arc<dyn EmbeddingBackend>> {
    if section.mock {
        return Ok(Arc::new(MockEmbedder { patch_size }));
    }
    Ok(Arc::new(HttpEmbedder::new(section.endpoint(slot)?)))
}
