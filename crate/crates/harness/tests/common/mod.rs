#![allow(dead_code)]

use std::path::Path;

use vitsteer_harness::ExperimentConfig;

/// A configuration small enough to run every stage in a few seconds.
pub fn tiny(out: &Path) -> ExperimentConfig {
    ExperimentConfig::from_toml_str(&format!(
        r#"
seed = 5
out_dir = "{}"

[dataset]
num_classes = 3
train_per_class = 12
test_per_class = 4
image_size = 8

[vit]
layers = 2
heads = 2
dim = 8
patch_size = 4

[train]
epochs = 2
batch_size = 8
eval_batch_size = 16

[sae]
n = 16
k = 4
epochs = 3
batch_size = 8

[steering]
k_steer = 3
alphas = [-0.5, 0.0, 0.5]
report_alpha = 0.5
eval_per_class = 4
top_gain = 2
"#,
        out.display()
    ))
    .unwrap()
}
