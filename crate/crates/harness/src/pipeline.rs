//! Staged experiment runner.
//!
//! Stages run in the order below. Each reads artifacts written by earlier
//! stages and is skipped when `manifest.json` shows it already ran on
//! identical inputs and its outputs are unchanged on disk.
//!
//! | stage       | reads                                   | writes                                  |
//! |-------------|-----------------------------------------|-----------------------------------------|
//! | `train-vit` |                                         | `vit.pstr`, `train_vit.json`            |
//! | `extract`   | `vit.pstr`                              | `embeddings.pstr`                       |
//! | `train-sae` | `embeddings.pstr`                       | `sae.pstr`, `train_sae.json`            |
//! | `stats`     | `vit.pstr`, `sae.pstr`                  | `stats.pstr`                            |
//! | `sweep`     | `vit.pstr`, `sae.pstr`, `stats.pstr`    | `sweep.csv`                             |
//! | `report`    | all of the above                        | `head_freq.csv`, `overlap.csv`, `report.json` |

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vitsteer_core::data::{gen_synthetic, load_cifar100, ClassTable, Dataset, LabeledImage, Split};
use vitsteer_core::sae::{reconstruct_replace_eval, train_sae};
use vitsteer_core::steering::{
    activation_frequency, alpha_sweep, global_vs_per_class_overlap, overlap_matrix, steered_eval, strategy_latents,
    Strategy, SweepConfig,
};
use vitsteer_core::vit::{train_joint, EvalGating, UsageScope};
use vitsteer_core::GatedViT32;

use crate::artifacts::*;
use crate::config::{DataSource, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::reference::Reference;
use crate::report::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    TrainVit,
    Extract,
    TrainSae,
    Stats,
    Sweep,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::TrainVit,
        Stage::Extract,
        Stage::TrainSae,
        Stage::Stats,
        Stage::Sweep,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::TrainVit => "train-vit",
            Stage::Extract => "extract",
            Stage::TrainSae => "train-sae",
            Stage::Stats => "stats",
            Stage::Sweep => "sweep",
            Stage::Report => "report",
        }
    }

    pub fn inputs(self) -> &'static [&'static str] {
        match self {
            Stage::TrainVit => &[],
            Stage::Extract => &[VIT_FILE],
            Stage::TrainSae => &[EMBEDDINGS_FILE],
            Stage::Stats => &[VIT_FILE, SAE_FILE],
            Stage::Sweep => &[VIT_FILE, SAE_FILE, STATS_FILE],
            Stage::Report => &[VIT_FILE, TRAIN_VIT_FILE, SAE_FILE, TRAIN_SAE_FILE, STATS_FILE, SWEEP_FILE],
        }
    }

    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::TrainVit => &[VIT_FILE, TRAIN_VIT_FILE],
            Stage::Extract => &[EMBEDDINGS_FILE],
            Stage::TrainSae => &[SAE_FILE, TRAIN_SAE_FILE],
            Stage::Stats => &[STATS_FILE],
            Stage::Sweep => &[SWEEP_FILE],
            Stage::Report => &[HEAD_FREQ_FILE, OVERLAP_FILE, REPORT_FILE],
        }
    }

    /// The stage that writes `file`.
    pub fn producer(file: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.outputs().contains(&file))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "extract-embeddings" => Ok(Stage::Extract),
            _ => Stage::ALL
                .into_iter()
                .find(|st| st.name() == s)
                .ok_or_else(|| HarnessError::Config(format!("unknown stage {s:?}"))),
        }
    }
}

/// Record of completed stages.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Digest of the config hash, stage name and input file digests.
    pub key: String,
    /// SHA-256 of each output file.
    pub outputs: BTreeMap<String, String>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineOutcome {
    pub executed: Vec<Stage>,
    pub skipped: Vec<Stage>,
    /// Present when the report stage was requested.
    pub bundle: Option<ReportBundle>,
}

/// Train and test splits as configured.
pub fn load_datasets(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let ds = &config.dataset;
    match ds.source {
        DataSource::Synthetic => Ok((
            gen_synthetic(ds.num_classes, ds.train_per_class, ds.image_size, ds.seed)?,
            gen_synthetic(ds.num_classes, ds.test_per_class, ds.image_size, ds.seed.wrapping_add(1000))?,
        )),
        DataSource::Cifar100 => {
            let root = ds.path.as_deref().ok_or_else(|| HarnessError::Config("dataset.path is required".into()))?;
            let keep = |d: Dataset, cap: usize| -> Result<Dataset> {
                let classes = ClassTable::new(d.classes.names()[..ds.num_classes].to_vec())?;
                let images = d
                    .images
                    .into_iter()
                    .filter(|i| i.label < ds.num_classes)
                    .collect();
                Ok(Dataset {
                    images,
                    classes,
                    image_size: d.image_size,
                }
                .cap_per_class(cap))
            };
            Ok((
                keep(load_cifar100(root, Split::Train, Some(ds.train_per_class))?, ds.train_per_class)?,
                keep(load_cifar100(root, Split::Test, Some(ds.test_per_class))?, ds.test_per_class)?,
            ))
        }
    }
}

/// The test images of each class used for steering, at most
/// `steering.eval_per_class` each.
pub fn eval_subsets<'a>(config: &ExperimentConfig, test: &'a Dataset) -> Vec<Vec<&'a LabeledImage>> {
    (0..config.dataset.num_classes)
        .map(|c| test.class_subset(c, Some(config.steering.eval_per_class)))
        .collect()
}

pub struct Pipeline {
    config: ExperimentConfig,
    hash: String,
    layout: Layout,
    data: Option<(Dataset, Dataset)>,
    verbose: bool,
}

impl Pipeline {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let hash = config.hash();
        let layout = Layout::new(config.out_dir.clone());
        Ok(Self {
            config,
            hash,
            layout,
            data: None,
            verbose: false,
        })
    }

    /// Progress lines on stderr.
    pub fn verbose(mut self, on: bool) -> Self {
        self.verbose = on;
        self
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    fn log(&self, msg: impl fmt::Display) {
        if self.verbose {
            eprintln!("[vitsteer] {msg}");
        }
    }

    fn data(&mut self) -> Result<&(Dataset, Dataset)> {
        if self.data.is_none() {
            self.data = Some(load_datasets(&self.config)?);
        }
        Ok(self.data.as_ref().expect("just loaded"))
    }

    fn manifest_path(&self) -> std::path::PathBuf {
        self.layout.path(MANIFEST_FILE)
    }

    pub fn manifest(&self) -> Manifest {
        read_json(&self.manifest_path()).unwrap_or_default()
    }

    fn stage_key(&self, stage: Stage) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.hash.as_bytes());
        h.update(stage.name().as_bytes());
        for input in stage.inputs() {
            h.update(input.as_bytes());
            h.update(sha256_file(&self.layout.path(input))?.as_bytes());
        }
        Ok(hex::encode(h.finalize()))
    }

    fn is_current(&self, manifest: &Manifest, stage: Stage, key: &str) -> bool {
        let Some(rec) = manifest.stages.get(stage.name()) else {
            return false;
        };
        rec.key == key
            && stage.outputs().iter().all(|f| {
                let p = self.layout.path(f);
                rec.outputs.get(*f).is_some_and(|want| sha256_file(&p).ok().as_ref() == Some(want))
            })
    }

    fn require_inputs(&self, stage: Stage) -> Result<()> {
        for input in stage.inputs() {
            let path = self.layout.path(input);
            if !path.exists() {
                return Err(HarnessError::MissingArtifact {
                    stage: stage.name(),
                    producer: Stage::producer(input).map_or("?", Stage::name),
                    path,
                });
            }
        }
        Ok(())
    }

    fn artifact(&self, file: &'static str) -> Result<PathBuf> {
        let path = self.layout.path(file);
        if !path.exists() {
            return Err(HarnessError::MissingArtifact {
                stage: "load",
                producer: Stage::producer(file).map_or("?", Stage::name),
                path,
            });
        }
        Ok(path)
    }

    /// Runs `stages` in canonical order. An empty list only validates the
    /// config.
    pub fn run(&mut self, stages: &[Stage]) -> Result<PipelineOutcome> {
        let mut todo = stages.to_vec();
        todo.sort();
        todo.dedup();
        let mut outcome = PipelineOutcome::default();
        if todo.is_empty() {
            return Ok(outcome);
        }
        std::fs::create_dir_all(&self.layout.dir).map_err(|e| HarnessError::io(&self.layout.dir, e))?;
        let mut manifest = self.manifest();
        for &stage in &todo {
            self.require_inputs(stage)?;
            let key = self.stage_key(stage)?;
            if self.is_current(&manifest, stage, &key) {
                self.log(format_args!("{stage}: up to date"));
                outcome.skipped.push(stage);
                continue;
            }
            self.log(format_args!("{stage}: running"));
            let t0 = Instant::now();
            self.execute(stage)?;
            let seconds = t0.elapsed().as_secs_f64();
            self.log(format_args!("{stage}: done in {seconds:.1}s"));
            let outputs = stage
                .outputs()
                .iter()
                .map(|f| Ok((f.to_string(), sha256_file(&self.layout.path(f))?)))
                .collect::<Result<_>>()?;
            manifest.stages.insert(stage.name().to_string(), StageRecord { key, outputs, seconds });
            write_json(&self.manifest_path(), &manifest)?;
            outcome.executed.push(stage);
        }
        if todo.contains(&Stage::Report) {
            outcome.bundle = Some(ReportBundle::load(&self.layout.dir, &self.hash)?);
        }
        Ok(outcome)
    }

    fn execute(&mut self, stage: Stage) -> Result<()> {
        match stage {
            Stage::TrainVit => self.train_vit(),
            Stage::Extract => self.extract(),
            Stage::TrainSae => self.train_sae(),
            Stage::Stats => self.stats(),
            Stage::Sweep => self.sweep(),
            Stage::Report => self.report(),
        }
    }

    pub fn load_vit(&self) -> Result<GatedViT32> {
        load_vit(&self.artifact(VIT_FILE)?, &self.hash)
    }

    pub fn load_sae(&self) -> Result<vitsteer_core::Sae32> {
        load_sae(&self.artifact(SAE_FILE)?, &self.hash)
    }

    pub fn load_stats(&self) -> Result<vitsteer_core::steering::ActivationStats> {
        load_stats(&self.artifact(STATS_FILE)?, &self.hash)
    }

    pub fn load_embeddings(&self) -> Result<Embeddings> {
        load_embeddings(&self.artifact(EMBEDDINGS_FILE)?, &self.hash)
    }

    fn train_vit(&mut self) -> Result<()> {
        let cfg = self.config.clone();
        let (train, test) = self.data()?;
        if train.is_empty() {
            return Err(HarnessError::Config("training split is empty".into()));
        }
        let mut model = GatedViT32::init(cfg.vit_config(), cfg.seed)?;
        let train_refs: Vec<&LabeledImage> = train.images.iter().collect();
        let report = train_joint(&mut model, &train_refs, &cfg.train_config())?;
        let test_refs: Vec<&LabeledImage> = test.images.iter().collect();
        let eval = model.evaluate(&test_refs, EvalGating::Eval, None, cfg.train.eval_batch_size)?;
        let summary = TrainingSummary {
            config_hash: self.hash.clone(),
            test_accuracy: eval.accuracy(),
            eval_usage_global: eval.usage(UsageScope::Global)?,
            eval_usage_final: eval.usage(UsageScope::FinalLayer)?,
            eval_usage_per_layer: (0..cfg.vit.layers)
                .map(|l| eval.usage(UsageScope::Layer(l)))
                .collect::<vitsteer_core::Result<_>>()?,
            loss_curve: report.loss_curve(),
            accuracy_curve: report.accuracy_curve(),
            soft_usage_curve: report.usage_curve(),
            hard_usage_curve: report.epochs.iter().map(|e| e.hard_usage).collect(),
        };
        self.log(format_args!(
            "train-vit: test accuracy {:.3}, eval usage {:.3} (final layer {:.3})",
            summary.test_accuracy, summary.eval_usage_global, summary.eval_usage_final
        ));
        save_vit(&model, &self.layout.path(VIT_FILE), &self.hash)?;
        write_json(&self.layout.path(TRAIN_VIT_FILE), &summary)
    }

    fn extract(&mut self) -> Result<()> {
        let model = self.load_vit()?;
        let bs = self.config.train.eval_batch_size;
        let classes = self.config.dataset.num_classes;
        let (train, _) = self.data()?;
        let refs: Vec<&LabeledImage> = train.images.iter().collect();
        let out = model.evaluate(&refs, EvalGating::Eval, None, bs)?;
        let emb = Embeddings {
            x: out.final_cls,
            labels: out.labels,
            num_classes: classes,
        };
        save_embeddings(&emb, &self.layout.path(EMBEDDINGS_FILE), &self.hash)
    }

    fn train_sae(&mut self) -> Result<()> {
        let emb = self.load_embeddings()?;
        let (sae, rep) = train_sae(&self.config.sae_config(), &emb.x)?;
        let summary = SaeSummary {
            config_hash: self.hash.clone(),
            initial_mse: rep.initial_mse,
            final_mse: rep.final_mse,
            loss_curve: rep.loss_curve,
            dead_latents: rep.dead_latents,
            decoder_norm_error: decoder_norm_error(&sae),
        };
        self.log(format_args!(
            "train-sae: mse {:.4} -> {:.4}, {} dead latents",
            summary.initial_mse, summary.final_mse, summary.dead_latents
        ));
        save_sae(&sae, &self.layout.path(SAE_FILE), &self.hash)?;
        write_json(&self.layout.path(TRAIN_SAE_FILE), &summary)
    }

    fn stats(&mut self) -> Result<()> {
        let model = self.load_vit()?;
        let sae = self.load_sae()?;
        let bs = self.config.train.eval_batch_size;
        let (train, _) = self.data()?;
        let refs: Vec<&LabeledImage> = train.images.iter().collect();
        let stats = activation_frequency(&model, &sae, &refs, bs)?;
        save_stats(&stats, &self.layout.path(STATS_FILE), &self.hash)
    }

    fn sweep_config(&self) -> Result<SweepConfig> {
        Ok(SweepConfig {
            strategies: self.config.strategies()?,
            alphas: self.config.steering.alphas.clone(),
            k_steer: self.config.steering.k_steer,
            seed: self.config.steering_seed(),
            scope: self.config.scope()?,
            batch_size: self.config.train.eval_batch_size,
        })
    }

    fn sweep(&mut self) -> Result<()> {
        let model = self.load_vit()?;
        let sae = self.load_sae()?;
        let stats = self.load_stats()?;
        let sweep_cfg = self.sweep_config()?;
        let cfg = self.config.clone();
        let (_, test) = self.data()?;
        let subsets = eval_subsets(&cfg, test);
        let result = alpha_sweep(&model, &sae, &stats, &sweep_cfg, &subsets)?;
        let records: Vec<SweepRecord> = result.rows.iter().map(SweepRecord::from).collect();
        write_file(&self.layout.path(SWEEP_FILE), sweep_csv(&self.hash, cfg.vit.heads, &records))
    }

    fn report(&mut self) -> Result<()> {
        let model = self.load_vit()?;
        let sae = self.load_sae()?;
        let stats = self.load_stats()?;
        let training: TrainingSummary = read_stamped_json(&self.layout.path(TRAIN_VIT_FILE), &self.hash)?;
        let sae_summary: SaeSummary = read_stamped_json(&self.layout.path(TRAIN_SAE_FILE), &self.hash)?;
        let sweep_path = self.layout.path(SWEEP_FILE);
        let (found, sweep) = parse_sweep_csv(&read_text(&sweep_path)?, &sweep_path)?;
        check_hash(&sweep_path, &found, &self.hash)?;

        let cfg = self.config.clone();
        let hash = self.hash.clone();
        let scope = cfg.scope()?;
        let bs = cfg.train.eval_batch_size;
        let k_steer = cfg.steering.k_steer;
        let (_, test) = self.data()?;
        let names = test.classes.names().to_vec();
        let subsets = eval_subsets(&cfg, test);

        let mut gains = Vec::new();
        for (class, images) in subsets.iter().enumerate() {
            if images.is_empty() {
                continue;
            }
            let set = strategy_latents(&stats, Strategy::PerClassFrequent, class, k_steer, cfg.steering_seed())?;
            let base = steered_eval(&model, &sae, &set, 0.0, images, scope, bs)?;
            let steered = steered_eval(&model, &sae, &set, cfg.steering.report_alpha, images, scope, bs)?;
            gains.push(ClassGain {
                class,
                name: names[class].clone(),
                accuracy_base_pct: 100.0 * base.accuracy,
                accuracy_steered_pct: 100.0 * steered.accuracy,
                gain_pct: 100.0 * (steered.accuracy - base.accuracy),
                usage_base: base.final_usage,
                usage_steered: steered.final_usage,
                head_freq: steered.head_freq,
            });
        }
        let head_freq: Vec<Vec<f64>> = gains.iter().map(|g| g.head_freq.clone()).collect();
        let gain_names: Vec<String> = gains.iter().map(|g| g.name.clone()).collect();
        let mut top_gain = gains.clone();
        top_gain.sort_by(|a, b| b.gain_pct.total_cmp(&a.gain_pct).then(a.class.cmp(&b.class)));
        top_gain.truncate(cfg.steering.top_gain);

        let overlap = overlap_matrix(&stats, k_steer)?;
        let overlap_summary = summarize_overlap(&overlap, global_vs_per_class_overlap(&stats, k_steer)?, k_steer);

        let all_eval: Vec<&LabeledImage> = subsets.iter().flatten().copied().collect();
        let ab = reconstruct_replace_eval(&model, &sae, &all_eval, bs)?;
        let ablation = AblationSummary {
            accuracy_original_pct: 100.0 * ab.accuracy_original,
            accuracy_reconstructed_pct: 100.0 * ab.accuracy_reconstructed,
            usage_original: ab.usage_original,
            usage_reconstructed: ab.usage_reconstructed,
            delta_accuracy_pct: ab.delta_accuracy_pct(),
            delta_usage: ab.delta_usage(),
        };

        let curves = cfg
            .strategies()?
            .into_iter()
            .map(|s| strategy_curve(s, &cfg.steering.alphas, &sweep))
            .collect();
        let mut checkpoints = BTreeMap::new();
        for f in [VIT_FILE, EMBEDDINGS_FILE, SAE_FILE, STATS_FILE] {
            let p = self.layout.path(f);
            if p.exists() {
                checkpoints.insert(f.to_string(), sha256_file(&p)?);
            }
        }
        let summary = ReportSummary {
            config_hash: hash.clone(),
            seed: cfg.seed,
            classes: names.clone(),
            checkpoints,
            training,
            sae: sae_summary,
            ablation,
            overlap: overlap_summary,
            report_alpha: cfg.steering.report_alpha,
            top_gain,
            curves,
            reference: Reference::default(),
        };
        write_file(&self.layout.path(HEAD_FREQ_FILE), head_freq_csv(&hash, &gain_names, &head_freq))?;
        write_file(&self.layout.path(OVERLAP_FILE), overlap_csv(&hash, &names, &overlap))?;
        write_json(&self.layout.path(REPORT_FILE), &summary)
    }
}

/// Runs `stages` of `config` quietly.
pub fn run_pipeline(config: ExperimentConfig, stages: &[Stage]) -> Result<PipelineOutcome> {
    Pipeline::new(config)?.run(stages)
}

fn decoder_norm_error(sae: &vitsteer_core::Sae32) -> f64 {
    let w = sae.w_dec();
    let (d, n) = (sae.d(), sae.n());
    (0..n)
        .map(|j| {
            let norm = (0..d).map(|i| (w.at(&[i, j]) as f64).powi(2)).sum::<f64>().sqrt();
            (norm - 1.0).abs()
        })
        .fold(0.0, f64::max)
}

fn summarize_overlap(m: &[Vec<f64>], global: f64, k_steer: usize) -> OverlapSummary {
    let mut total = 0.0;
    let mut pairs = 0usize;
    let mut max_pair = 0.0;
    let mut max_pair_classes = (0, 0);
    for (a, row) in m.iter().enumerate() {
        for (b, &v) in row.iter().enumerate().skip(a + 1) {
            total += v;
            pairs += 1;
            if v > max_pair || pairs == 1 {
                max_pair = v;
                max_pair_classes = (a, b);
            }
        }
    }
    OverlapSummary {
        k_steer,
        global_vs_per_class: global,
        mean_pair: if pairs == 0 { 0.0 } else { total / pairs as f64 },
        max_pair,
        max_pair_classes,
    }
}

fn strategy_curve(strategy: Strategy, alphas: &[f64], sweep: &[SweepRecord]) -> StrategyCurve {
    let mut curve = StrategyCurve {
        strategy: strategy.to_string(),
        alpha: Vec::new(),
        accuracy_pct: Vec::new(),
        final_usage: Vec::new(),
    };
    for &alpha in alphas {
        let rows: Vec<&SweepRecord> = sweep
            .iter()
            .filter(|r| r.strategy == strategy && r.alpha == alpha)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let n = rows.len() as f64;
        curve.alpha.push(alpha);
        curve.accuracy_pct.push(rows.iter().map(|r| r.accuracy_pct).sum::<f64>() / n);
        curve.final_usage.push(rows.iter().map(|r| r.final_usage).sum::<f64>() / n);
    }
    curve
}
