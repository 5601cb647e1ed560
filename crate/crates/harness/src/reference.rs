//! Full-scale reference values (ViT-Small on CIFAR-100, 12 layers × 6 heads,
//! 384-d, SAE 3072 latents with k = 64). Recorded for comparison only; the
//! toy pipeline is not expected to reproduce them.

use serde::{Deserialize, Serialize};

pub const UNPRUNED_ACCURACY_PCT: f64 = 91.27;
pub const PRUNED_ACCURACY_PCT: f64 = 89.79;
pub const HEAD_USAGE: f64 = 0.70;
pub const SAE_EPOCHS: usize = 100;
pub const SAE_MSE: f64 = 0.0228;
pub const SAE_LATENTS: usize = 3072;
pub const SAE_K: usize = 64;
pub const ABLATION_DELTA_ACCURACY_PCT: f64 = -0.12;
pub const ABLATION_DELTA_USAGE: f64 = 0.025;
pub const GLOBAL_PER_CLASS_OVERLAP: f64 = 0.1641;
pub const STEER_ALPHA: f64 = 1.2;

/// A class whose per-class steering result is quoted at full scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassExample {
    pub class: String,
    pub accuracy_pct: (f64, f64),
    pub usage: (f64, f64),
    pub dominant_heads: Vec<usize>,
}

pub fn class_examples() -> Vec<ClassExample> {
    vec![
        ClassExample {
            class: "bowl".into(),
            accuracy_pct: (76.0, 82.0),
            usage: (0.72, 0.33),
            dominant_heads: vec![2, 5],
        },
        ClassExample {
            class: "pine_tree".into(),
            accuracy_pct: (79.0, 84.0),
            usage: (0.93, 0.35),
            dominant_heads: vec![2, 3],
        },
    ]
}

/// Class pairs with high latent overlap.
pub const PAIR_OVERLAPS: [(&str, &str, f64); 2] = [("bowl", "plate", 0.38), ("beaver", "squirrel", 0.39)];

/// Everything above, as embedded in `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub unpruned_accuracy_pct: f64,
    pub pruned_accuracy_pct: f64,
    pub head_usage: f64,
    pub sae_mse: f64,
    pub ablation_delta_accuracy_pct: f64,
    pub ablation_delta_usage: f64,
    pub global_per_class_overlap: f64,
    pub steer_alpha: f64,
    pub class_examples: Vec<ClassExample>,
    pub pair_overlaps: Vec<(String, String, f64)>,
}

impl Default for Reference {
    fn default() -> Self {
        Self {
            unpruned_accuracy_pct: UNPRUNED_ACCURACY_PCT,
            pruned_accuracy_pct: PRUNED_ACCURACY_PCT,
            head_usage: HEAD_USAGE,
            sae_mse: SAE_MSE,
            ablation_delta_accuracy_pct: ABLATION_DELTA_ACCURACY_PCT,
            ablation_delta_usage: ABLATION_DELTA_USAGE,
            global_per_class_overlap: GLOBAL_PER_CLASS_OVERLAP,
            steer_alpha: STEER_ALPHA,
            class_examples: class_examples(),
            pair_overlaps: PAIR_OVERLAPS
                .iter()
                .map(|&(a, b, v)| (a.to_string(), b.to_string(), v))
                .collect(),
        }
    }
}
