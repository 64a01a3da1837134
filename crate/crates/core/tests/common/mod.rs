//! Fixtures and helpers shared by the integration tests.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgb, RgbImage};

/// Small images the hue-blind mock embedder can tell apart.
pub fn fixture_image(kind: &str) -> RgbImage {
    RgbImage::from_fn(64, 64, |x, y| match kind {
        "airplane" => {
            let v = (200 + (x + y) / 8) as u8;
            Rgb([v - 20, v - 10, v])
        }
        "cat" => {
            let t: u8 = if (x / 4 + y / 4) % 2 == 1 { 40 } else { 90 };
            Rgb([t, t / 4, t / 3])
        }
        _ => {
            let t: u8 = if (y / 8) % 2 == 1 { 150 } else { 120 };
            Rgb([t; 3])
        }
    })
}

/// Writes `data/<name>.png`, `data/list.tsv`, a four-label vocabulary and a
/// run config tuned so a mock-trained head accepts mock generations.
/// Returns the config path.
pub fn write_fixture(dir: &Path, entries: &[(&str, &str)]) -> PathBuf {
    let data = dir.join("data");
    fs::create_dir_all(&data).unwrap();
    let mut list = String::new();
    for (name, kind) in entries {
        fixture_image(kind).save(data.join(format!("{name}.png"))).unwrap();
        list.push_str(&format!("{name}.png\t{kind}\n"));
    }
    fs::write(data.join("list.tsv"), list).unwrap();
    fs::write(dir.join("vocab.txt"), "background\nairplane\ncat\nperson\n").unwrap();
    let config = dir.join("run.toml");
    fs::write(
        &config,
        format!(
            "vocabulary_file = {:?}\nseed = 11\n[training]\nepochs = 400\nlearning_rate = 1.0\n",
            dir.join("vocab.txt")
        ),
    )
    .unwrap();
    config
}

pub fn arg(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

pub fn run_bin(args: &[String]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_augagent"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn with_mocks(mut args: Vec<String>, config: &Path, out: &Path) -> Vec<String> {
    args.extend(["--config".into(), arg(config), "--out".into(), arg(out)]);
    args.extend(["--mock-llm", "--mock-diffusion", "--mock-embed", "--mock-pose"].map(String::from));
    args
}

pub fn init_args(data: &Path) -> Vec<String> {
    vec![
        "init".into(),
        arg(&data.join("list.tsv")),
        "--created-at".into(),
        "2025-01-01T00:00:00Z".into(),
    ]
}

pub fn augment_args(out: &Path) -> Vec<String> {
    vec![
        "augment".into(),
        arg(&out.join("origin.manifest")),
        "--head".into(),
        arg(&out.join("head.bin")),
    ]
}
