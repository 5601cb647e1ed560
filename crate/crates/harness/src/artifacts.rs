//! On-disk artifacts and their config-hash stamps.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use vitsteer_core::checkpoint::Container;
use vitsteer_core::sae::SAE_TAG;
use vitsteer_core::steering::{ActivationStats, STATS_TAG};
use vitsteer_core::vit::VIT_TAG;
use vitsteer_core::{GatedViT32, Sae32, Tensor};

use crate::error::{HarnessError, Result};

pub const VIT_FILE: &str = "vit.pstr";
pub const TRAIN_VIT_FILE: &str = "train_vit.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.pstr";
pub const SAE_FILE: &str = "sae.pstr";
pub const TRAIN_SAE_FILE: &str = "train_sae.json";
pub const STATS_FILE: &str = "stats.pstr";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const HEAD_FREQ_FILE: &str = "head_freq.csv";
pub const OVERLAP_FILE: &str = "overlap.csv";
pub const REPORT_FILE: &str = "report.json";
pub const MANIFEST_FILE: &str = "manifest.json";

pub const EMBEDDINGS_TAG: &[u8; 4] = b"EMB1";
pub const HASH_KEY: &str = "config_hash";

/// Final-layer CLS embeddings of the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    /// `[N×d]`.
    pub x: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))
}

pub fn check_hash(path: &Path, found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(HarnessError::HashMismatch {
            path: path.to_path_buf(),
            found: found.to_string(),
            expected: expected.to_string(),
        });
    }
    Ok(())
}

fn save_stamped(mut c: Container, path: &Path, hash: &str) -> Result<()> {
    c.set(HASH_KEY, hash);
    write_file(path, c.to_bytes())
}

fn load_stamped(path: &Path, tag: &[u8; 4], hash: &str) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    let c = Container::from_bytes_tagged(&bytes, tag).map_err(|e| HarnessError::parse(path, e.to_string()))?;
    let found = c.meta_str(HASH_KEY).map_err(|e| HarnessError::parse(path, e.to_string()))?;
    check_hash(path, found, hash)?;
    Ok(c)
}

/// Reads the config hash stamped into any container artifact.
pub fn container_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    let c = Container::from_bytes(&bytes).map_err(|e| HarnessError::parse(path, e.to_string()))?;
    c.meta_str(HASH_KEY)
        .map(str::to_string)
        .map_err(|e| HarnessError::parse(path, e.to_string()))
}

pub fn save_vit(model: &GatedViT32, path: &Path, hash: &str) -> Result<()> {
    save_stamped(model.to_container(), path, hash)
}

pub fn load_vit(path: &Path, hash: &str) -> Result<GatedViT32> {
    let c = load_stamped(path, VIT_TAG, hash)?;
    GatedViT32::from_container(&c).map_err(|e| HarnessError::parse(path, e.to_string()))
}

pub fn save_sae(sae: &Sae32, path: &Path, hash: &str) -> Result<()> {
    save_stamped(sae.to_container(), path, hash)
}

pub fn load_sae(path: &Path, hash: &str) -> Result<Sae32> {
    let c = load_stamped(path, SAE_TAG, hash)?;
    Sae32::from_container(&c).map_err(|e| HarnessError::parse(path, e.to_string()))
}

pub fn save_stats(stats: &ActivationStats, path: &Path, hash: &str) -> Result<()> {
    save_stamped(stats.to_container()?, path, hash)
}

pub fn load_stats(path: &Path, hash: &str) -> Result<ActivationStats> {
    let c = load_stamped(path, STATS_TAG, hash)?;
    ActivationStats::from_container(&c).map_err(|e| HarnessError::parse(path, e.to_string()))
}

pub fn save_embeddings(e: &Embeddings, path: &Path, hash: &str) -> Result<()> {
    let mut c = Container::new(EMBEDDINGS_TAG);
    c.set("num_classes", e.num_classes);
    c.push("x", &e.x);
    let labels: Vec<f32> = e.labels.iter().map(|&l| l as f32).collect();
    c.push("labels", &Tensor::new(&[labels.len()], labels)?);
    save_stamped(c, path, hash)
}

pub fn load_embeddings(path: &Path, hash: &str) -> Result<Embeddings> {
    let c = load_stamped(path, EMBEDDINGS_TAG, hash)?;
    let parse = |e: vitsteer_core::Error| HarnessError::parse(path, e.to_string());
    let x: Tensor<f32> = c.tensor("x").map_err(parse)?;
    let labels: Tensor<f32> = c.tensor("labels").map_err(parse)?;
    let num_classes: usize = c.meta_parse("num_classes").map_err(parse)?;
    let labels: Vec<usize> = labels.data().iter().map(|&l| l as usize).collect();
    if x.shape().first() != Some(&labels.len()) {
        return Err(HarnessError::parse(path, format!("{} labels for {:?} embeddings", labels.len(), x.shape())));
    }
    Ok(Embeddings { x, labels, num_classes })
}

/// Paths of every artifact under one output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub dir: PathBuf,
}

impl Layout {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }
}
