//! Command-line entry point: one subcommand per pipeline stage.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SubsecRound, Utc};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::assemble::{assemble, render_table, similarity_report, PooledEmbedder};
use crate::augment::{run_pipeline, write_attempt_log, Backends, ClassifierGate};
use crate::config::{Overrides, RunConfig};
use crate::detector::{canny_edge, pose_map, DetectorKind};
use crate::imageio;
use crate::manifest::{
    load_manifest, load_manifest_with, save_manifest, DatasetManifest, ImageRecord, ParentCheck,
};
use crate::prompt::self_refine;
use crate::scorer::{load_head, save_head, train_head};
use crate::{Error, Result};

/// File names written under the output directory.
pub mod artifacts {
    pub const ORIGIN: &str = "origin.manifest";
    pub const AUGMENTED: &str = "augmented.manifest";
    pub const D_AUG: &str = "d_aug.manifest";
    pub const FINAL: &str = "final.manifest";
    pub const HEAD: &str = "head.bin";
    pub const TRAIN_LOSSES: &str = "train_losses.json";
    pub const PROMPT: &str = "prompt.json";
    pub const RUN_REPORT: &str = "run_report.json";
    pub const ATTEMPTS: &str = "attempts.jsonl";
    pub const SIMILARITY_JSON: &str = "similarity_report.json";
    pub const SIMILARITY_TABLE: &str = "similarity_table.txt";
}

#[derive(Debug, Parser)]
#[command(name = "augagent", version, about = "Quality-gated image augmentation for weakly supervised segmentation")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    #[arg(long, global = true)]
    max_attempts: Option<u32>,
    /// Accepted augmentations sought per original image.
    #[arg(long, global = true)]
    quota: Option<u32>,
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    mock_llm: bool,
    #[arg(long, global = true)]
    mock_diffusion: bool,
    /// Mock both the scorer and the similarity embedder.
    #[arg(long, global = true)]
    mock_embed: bool,
    #[arg(long, global = true)]
    mock_pose: bool,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

impl GlobalArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            epsilon: self.epsilon,
            max_attempts: self.max_attempts,
            quota: self.quota,
            jobs: self.jobs,
            seed: self.seed,
            out: self.out.clone(),
            mock_llm: self.mock_llm,
            mock_diffusion: self.mock_diffusion,
            mock_embed: self.mock_embed,
            mock_pose: self.mock_pose,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build an original-image manifest from a tab-separated listing of
    /// `path<TAB>label,label`.
    Init {
        list: PathBuf,
        /// Header timestamp (RFC 3339); defaults to now.
        #[arg(long)]
        created_at: Option<DateTime<Utc>>,
    },
    /// Train the linear classification head on a manifest's originals.
    TrainScorer { manifest: PathBuf },
    /// Run prompt self-refinement for one category.
    RefinePrompt { category: String },
    /// Compute a detector map for one image.
    Detect {
        image: PathBuf,
        #[arg(long, default_value = "canny")]
        kind: DetectorKind,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        low: Option<f64>,
        #[arg(long)]
        high: Option<f64>,
    },
    /// Generate quality-gated augmentations for every original.
    Augment {
        manifest: PathBuf,
        /// Head file written by `train-scorer`.
        #[arg(long)]
        head: PathBuf,
    },
    /// Merge original and augmented manifests.
    Assemble { origin: PathBuf, augmented: PathBuf },
    /// Original/augmented similarity report.
    Report {
        manifest: PathBuf,
        /// Restrict to records carrying this class.
        #[arg(long)]
        class: Option<String>,
        #[arg(long)]
        sample_size: Option<usize>,
        #[arg(long)]
        method: Option<String>,
    },
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.global.config.as_deref(), &cli.global.overrides())?;
    let out = cfg.out.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    match cli.command {
        Command::Init { list, created_at } => cmd_init(&cfg, &list, created_at),
        Command::TrainScorer { manifest } => cmd_train(&cfg, &manifest),
        Command::RefinePrompt { category } => cmd_refine(&cfg, &category),
        Command::Detect {
            image,
            kind,
            sigma,
            low,
            high,
        } => {
            let mut canny = cfg.canny;
            canny.sigma = sigma.unwrap_or(canny.sigma);
            canny.low = low.unwrap_or(canny.low);
            canny.high = high.unwrap_or(canny.high);
            cmd_detect(&cfg, &image, kind, &canny)
        }
        Command::Augment { manifest, head } => cmd_augment(&cfg, &manifest, &head),
        Command::Assemble { origin, augmented } => cmd_assemble(&cfg, &origin, &augmented),
        Command::Report {
            manifest,
            class,
            sample_size,
            method,
        } => cmd_report(&cfg, &manifest, class.as_deref(), sample_size, method),
    }
}

/// Directory that relative image paths in a manifest are resolved against.
fn manifest_root(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_init(cfg: &RunConfig, list: &Path, created_at: Option<DateTime<Utc>>) -> Result<()> {
    let vocab = cfg.vocabulary()?;
    let text = fs::read_to_string(list).map_err(|e| Error::io(list, e))?;
    let created = created_at.unwrap_or_else(Utc::now).trunc_subsecs(0);
    let mut manifest = DatasetManifest::new(vocab, cfg.epsilon, created);
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: i + 1,
            message,
        };
        let (path, labels) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected path<TAB>labels".into()))?;
        let ids = labels
            .split(',')
            .map(|name| {
                manifest
                    .vocabulary
                    .id_of(name)
                    .ok_or_else(|| parse_err(format!("unknown label {:?}", name.trim())))
            })
            .collect::<Result<Vec<_>>>()?;
        let id = Path::new(path)
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| parse_err(format!("no file name in {path:?}")))?;
        manifest
            .records
            .push(ImageRecord::original(id, path, ids));
    }
    let root = manifest_root(list);
    manifest.rebase_paths(&root, &cfg.out);
    manifest.validate()?;
    let dest = cfg.out.join(artifacts::ORIGIN);
    save_manifest(&manifest, &dest)?;
    println!("{} records -> {}", manifest.records.len(), dest.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    epochs: u32,
    records: usize,
    epoch_losses: Vec<f64>,
}

fn cmd_train(cfg: &RunConfig, manifest_path: &Path) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    let embedder = cfg.embedder()?;
    let train = cfg.train_config();
    let outcome = with_pool(cfg.jobs, || {
        train_head::<f64>(
            &manifest,
            &manifest_root(manifest_path),
            embedder.as_ref(),
            cfg.geometry,
            &train,
        )
    })?;
    save_head(&outcome.head, &cfg.out.join(artifacts::HEAD))?;
    write_json(
        &TrainSummary {
            epochs: train.epochs,
            records: manifest.originals().count(),
            epoch_losses: outcome.epoch_losses.clone(),
        },
        &cfg.out.join(artifacts::TRAIN_LOSSES),
    )?;
    if let (Some(first), Some(last)) = (outcome.epoch_losses.first(), outcome.epoch_losses.last()) {
        println!("loss {first:.6} -> {last:.6} over {} epochs", train.epochs);
    }
    Ok(())
}

fn cmd_refine(cfg: &RunConfig, category: &str) -> Result<()> {
    let vocab = cfg.vocabulary()?;
    let label = vocab
        .id_of(category)
        .and_then(|id| vocab.get(id))
        .ok_or_else(|| Error::InvalidArgument(format!("unknown category {category:?}")))?;
    let llm = cfg.llm()?;
    let refined = self_refine(
        llm.as_ref(),
        &cfg.templates,
        label,
        cfg.epsilon,
        cfg.augment.prompt_max_iters,
        cfg.seed,
    )?;
    write_json(&refined, &cfg.out.join(artifacts::PROMPT))?;
    println!("{}", refined.text);
    Ok(())
}

fn cmd_detect(
    cfg: &RunConfig,
    image: &Path,
    kind: DetectorKind,
    canny: &crate::detector::CannyParams,
) -> Result<()> {
    let img = imageio::load_rgb(image)?;
    let map = match kind {
        DetectorKind::Canny => canny_edge(&img, canny)?,
        DetectorKind::Pose => pose_map(cfg.pose()?.as_ref(), &img)?,
    };
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let dest = cfg.out.join("maps").join(format!("{stem}_{}.png", kind.as_str()));
    imageio::save_gray_png(&map.image, &dest)?;
    println!("{} ({} non-zero pixels)", dest.display(), map.count_nonzero());
    Ok(())
}

fn cmd_augment(cfg: &RunConfig, manifest_path: &Path, head_path: &Path) -> Result<()> {
    let resume = cfg.out.join(artifacts::AUGMENTED);
    let (manifest, root) = if resume.exists() {
        (load_manifest(&resume)?, cfg.out.clone())
    } else {
        (load_manifest(manifest_path)?, manifest_root(manifest_path))
    };
    let head = load_head::<f64>(head_path)?;
    if head.classes() != manifest.vocabulary.len() {
        return Err(Error::Config(vec![format!(
            "head has {} classes but the vocabulary has {}",
            head.classes(),
            manifest.vocabulary.len()
        )]));
    }
    let backends = Backends {
        llm: cfg.llm()?,
        pose: cfg.pose()?,
        generator: cfg.generator()?,
    };
    let gate = ClassifierGate {
        head,
        embedder: cfg.embedder()?,
        geometry: cfg.geometry,
    };
    let output = run_pipeline(
        &manifest,
        &root,
        &cfg.policy(),
        &backends,
        &gate,
        &cfg.out,
        cfg.jobs,
    )?;

    save_manifest(&output.manifest, &resume)?;
    let mut d_aug = output.manifest.empty_like();
    d_aug.records = output.manifest.augmented().cloned().collect();
    save_manifest(&d_aug, &cfg.out.join(artifacts::D_AUG))?;
    write_json(&output.report, &cfg.out.join(artifacts::RUN_REPORT))?;
    write_attempt_log(&output.logs, &cfg.out.join(artifacts::ATTEMPTS))?;

    let r = &output.report;
    println!(
        "{} accepted, {} exhausted, {} skipped, {} generations",
        r.accepted,
        r.exhausted.len(),
        r.skipped.len(),
        r.generations
    );
    Ok(())
}

fn cmd_assemble(cfg: &RunConfig, origin_path: &Path, aug_path: &Path) -> Result<()> {
    let mut origin = load_manifest(origin_path)?;
    let mut aug = load_manifest_with(aug_path, ParentCheck::Deferred)?;
    origin.rebase_paths(&manifest_root(origin_path), &cfg.out);
    aug.rebase_paths(&manifest_root(aug_path), &cfg.out);
    let merged = assemble(&origin, &aug)?;
    let dest = cfg.out.join(artifacts::FINAL);
    save_manifest(&merged, &dest)?;
    println!(
        "{} original + {} augmented -> {}",
        origin.records.len(),
        aug.records.len(),
        dest.display()
    );
    Ok(())
}

fn cmd_report(
    cfg: &RunConfig,
    manifest_path: &Path,
    class: Option<&str>,
    sample_size: Option<usize>,
    method: Option<String>,
) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    let class_filter = class
        .map(|name| {
            manifest
                .vocabulary
                .id_of(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown class {name:?}")))
        })
        .transpose()?;
    let embedder = PooledEmbedder {
        inner: cfg.similarity_embedder()?,
        geometry: cfg.geometry,
    };
    let method = method.unwrap_or_else(|| cfg.report.method.clone());
    let report = with_pool(cfg.jobs, || {
        similarity_report(
            &manifest,
            &manifest_root(manifest_path),
            &embedder,
            class_filter,
            sample_size.unwrap_or(cfg.report.sample_size),
            cfg.seed,
            &method,
        )
    })?;
    write_json(&report, &cfg.out.join(artifacts::SIMILARITY_JSON))?;
    let table = render_table(std::slice::from_ref(&report));
    let dest = cfg.out.join(artifacts::SIMILARITY_TABLE);
    fs::write(&dest, &table).map_err(|e| Error::io(&dest, e))?;
    print!("{table}");
    Ok(())
}

fn with_pool<R: Send>(jobs: usize, f: impl FnOnce() -> Result<R> + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(vec![format!("worker pool: {e}")]))?;
    pool.install(f)
}
