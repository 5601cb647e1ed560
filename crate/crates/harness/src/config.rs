//! Experiment configuration.
//!
//! A TOML file with a few top-level keys and one table per stage. Every key
//! is optional; omitted keys take the toy defaults below.
//!
//! ```toml
//! seed = 0
//! out_dir = "runs/toy"
//!
//! [dataset]
//! source = "synthetic"        # or "cifar100", reading <path>/train.bin etc.
//! num_classes = 8
//! train_per_class = 200
//! test_per_class = 50
//! image_size = 16
//! seed = 7
//!
//! [vit]
//! layers = 4
//! heads = 6
//! dim = 48
//! target_usage = 0.7
//! budget_weight = 2.0
//! temperature = 0.25
//!
//! [train]
//! epochs = 30
//! lr = 1e-3
//!
//! [sae]
//! n = 384
//! k = 16
//!
//! [steering]
//! k_steer = 10
//! alphas = [-1.0, -0.5, 0.0, 0.5, 1.0, 1.5]
//! report_alpha = 1.2
//! ```
//!
//! Seeds used by the stages derive from the top-level `seed`: the ViT is
//! initialised with `seed`, batches are shuffled with `seed + 1`, the SAE uses
//! `seed + 2` and the random steering strategy `seed + 3 + class`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vitsteer_core::sae::SaeConfig;
use vitsteer_core::steering::{default_alpha_grid, Strategy};
use vitsteer_core::vit::{SteerScope, TrainConfig, ViTConfig};
use vitsteer_core::AdamConfig;

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Artifact directory. Not part of the config hash.
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub vit: VitSection,
    pub train: TrainSection,
    pub sae: SaeSection,
    pub steering: SteeringSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Cifar100,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// CIFAR-100 root holding `train.bin`, `test.bin` and `fine_label_names.txt`.
    pub path: Option<PathBuf>,
    /// The first `num_classes` labels are kept.
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Synthetic only; CIFAR images are always 32×32.
    pub image_size: usize,
    /// Synthetic only. The test split uses `seed + 1000`.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VitSection {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub target_usage: f64,
    pub budget_weight: f64,
    pub temperature: f64,
    pub gate_bias_init: f64,
    pub gate_bias_spread: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeSection {
    /// Input width; must equal `vit.dim` when given.
    pub d: Option<usize>,
    pub n: usize,
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteeringSection {
    pub k_steer: usize,
    pub alphas: Vec<f64>,
    /// α of the per-class head-frequency matrix and the top-gain ranking.
    pub report_alpha: f64,
    /// Range of α the server accepts.
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub strategies: Vec<String>,
    /// Test images per class used by sweeps and the server.
    pub eval_per_class: usize,
    /// `decision_only` or `full_residual`.
    pub scope: String,
    /// Classes listed in the top-gain summary.
    pub top_gain: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/toy"),
            dataset: DatasetConfig::default(),
            vit: VitSection::default(),
            train: TrainSection::default(),
            sae: SaeSection::default(),
            steering: SteeringSection::default(),
        }
    }
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            num_classes: 8,
            train_per_class: 200,
            test_per_class: 50,
            image_size: 16,
            seed: 7,
        }
    }
}

impl Default for VitSection {
    fn default() -> Self {
        let t = ViTConfig::toy();
        Self {
            layers: t.layers,
            heads: t.heads,
            dim: t.dim,
            mlp_ratio: t.mlp_ratio,
            patch_size: t.patch_size,
            target_usage: t.target_usage,
            budget_weight: t.budget_weight,
            temperature: t.temperature,
            gate_bias_init: t.gate_bias_init,
            gate_bias_spread: t.gate_bias_spread,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.adam.lr,
            eval_batch_size: 100,
        }
    }
}

impl Default for SaeSection {
    fn default() -> Self {
        let t = SaeConfig::toy();
        Self {
            d: None,
            n: t.n,
            k: t.k,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
        }
    }
}

impl Default for SteeringSection {
    fn default() -> Self {
        Self {
            k_steer: 10,
            alphas: default_alpha_grid(),
            report_alpha: 1.2,
            alpha_min: -4.0,
            alpha_max: 4.0,
            strategies: Strategy::ALL.iter().map(|s| s.as_str().to_string()).collect(),
            eval_per_class: 50,
            scope: "decision_only".into(),
            top_gain: 5,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// SHA-256 over the canonical JSON form, with `out_dir` removed.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serialises");
        value.as_object_mut().expect("object").remove("out_dir");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        let ds = &self.dataset;
        if ds.num_classes < 2 {
            return bad(format!("dataset.num_classes must be at least 2, got {}", ds.num_classes));
        }
        if ds.train_per_class == 0 || ds.test_per_class == 0 {
            return bad("dataset.train_per_class and dataset.test_per_class must be positive".into());
        }
        if ds.source == DataSource::Cifar100 {
            if ds.path.is_none() {
                return bad("dataset.path is required for cifar100".into());
            }
            if ds.num_classes > vitsteer_core::data::CIFAR_CLASSES {
                return bad(format!("cifar100 has 100 classes, asked for {}", ds.num_classes));
            }
        }
        self.vit_config().validate().map_err(|e| HarnessError::Config(format!("vit: {e}")))?;
        if let Some(d) = self.sae.d {
            if d != self.vit.dim {
                return bad(format!("sae.d = {d} differs from vit.dim = {}", self.vit.dim));
            }
        }
        self.sae_config().validate().map_err(|e| HarnessError::Config(format!("sae: {e}")))?;
        if self.train.epochs == 0 || self.train.batch_size == 0 || self.train.eval_batch_size == 0 {
            return bad("train.epochs, train.batch_size and train.eval_batch_size must be positive".into());
        }
        if !(self.train.lr > 0.0) {
            return bad(format!("train.lr must be positive, got {}", self.train.lr));
        }
        let st = &self.steering;
        if st.k_steer == 0 || st.k_steer > self.sae.n {
            return bad(format!("steering.k_steer must lie in 1..={}, got {}", self.sae.n, st.k_steer));
        }
        if st.alphas.is_empty() || st.alphas.iter().any(|a| !a.is_finite()) {
            return bad("steering.alphas must be a nonempty list of finite values".into());
        }
        if !(st.alpha_min.is_finite() && st.alpha_max.is_finite() && st.alpha_min <= st.alpha_max) {
            return bad(format!("steering alpha bounds [{}, {}] are invalid", st.alpha_min, st.alpha_max));
        }
        if !st.report_alpha.is_finite() {
            return bad("steering.report_alpha must be finite".into());
        }
        if st.eval_per_class == 0 {
            return bad("steering.eval_per_class must be positive".into());
        }
        self.strategies()?;
        self.scope()?;
        Ok(())
    }

    pub fn image_size(&self) -> usize {
        match self.dataset.source {
            DataSource::Synthetic => self.dataset.image_size,
            DataSource::Cifar100 => 32,
        }
    }

    pub fn vit_config(&self) -> ViTConfig {
        let v = &self.vit;
        ViTConfig {
            layers: v.layers,
            heads: v.heads,
            dim: v.dim,
            mlp_ratio: v.mlp_ratio,
            num_classes: self.dataset.num_classes,
            image_size: self.image_size(),
            patch_size: v.patch_size,
            target_usage: v.target_usage,
            budget_weight: v.budget_weight,
            temperature: v.temperature,
            gate_bias_init: v.gate_bias_init,
            gate_bias_spread: v.gate_bias_spread,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            adam: AdamConfig {
                lr: self.train.lr,
                ..AdamConfig::default()
            },
            seed: self.seed.wrapping_add(1),
        }
    }

    pub fn sae_config(&self) -> SaeConfig {
        let s = &self.sae;
        SaeConfig {
            d: self.vit.dim,
            n: s.n,
            k: s.k,
            epochs: s.epochs,
            batch_size: s.batch_size,
            lr: s.lr,
            seed: self.seed.wrapping_add(2),
        }
    }

    /// Base seed of the random strategy; class `c` draws with `base + c`.
    pub fn steering_seed(&self) -> u64 {
        self.seed.wrapping_add(3)
    }

    pub fn strategies(&self) -> Result<Vec<Strategy>> {
        self.steering
            .strategies
            .iter()
            .map(|s| s.parse().map_err(|e: vitsteer_core::Error| HarnessError::Config(format!("steering.strategies: {e}"))))
            .collect()
    }

    pub fn scope(&self) -> Result<SteerScope> {
        match self.steering.scope.as_str() {
            "decision_only" => Ok(SteerScope::DecisionOnly),
            "full_residual" => Ok(SteerScope::FullResidual),
            other => Err(HarnessError::Config(format!(
                "steering.scope must be decision_only or full_residual, got {other:?}"
            ))),
        }
    }
}
