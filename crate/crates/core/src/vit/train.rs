use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gate::budget_loss_tape;
use super::{GatedViT, Gating};
use crate::autograd::Tape;
use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::params::{Adam, AdamConfig};
use crate::scalar::Scalar;

/// Optimiser schedule for [`train_joint`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// Averages over the batches of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Cross-entropy plus budget term.
    pub loss: f64,
    pub cross_entropy: f64,
    pub budget: f64,
    /// Accuracy under the sampled training masks.
    pub accuracy: f64,
    /// Mean soft mask over all layers.
    pub soft_usage: f64,
    /// Mean hard (forward) mask over all layers.
    pub hard_usage: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingReport {
    pub epochs: Vec<EpochMetrics>,
}

impl TrainingReport {
    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn loss_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn accuracy_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.accuracy).collect()
    }

    pub fn usage_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.soft_usage).collect()
    }
}

/// Minimises cross-entropy plus the head budget with Adam.
///
/// Masks are drawn fresh for every batch with the straight-through
/// estimator. The run is a pure function of the model, data and `config`.
pub fn train_joint<T: Scalar>(
    model: &mut GatedViT<T>,
    train: &[&LabeledImage],
    config: &TrainConfig,
) -> Result<TrainingReport> {
    let mut report = TrainingReport::default();
    if train.is_empty() {
        return Ok(report);
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let vc = model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.adam, model.params());
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 6];
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&LabeledImage> = chunk.iter().map(|&i| train[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|i| i.label).collect();
            let diverged = |e: Error| match e {
                Error::NonFinite(_) => Error::Diverged { epoch, loss: f64::NAN },
                other => other,
            };

            let mut tape = Tape::new();
            let params = model.params().attach(&mut tape, true);
            let patches = tape.constant(model.patch_batch(&batch)?);
            let fw = model
                .forward(&mut tape, &params, patches, &mut Gating::Sample(&mut rng), None)
                .map_err(diverged)?;
            let ce = tape.cross_entropy(fw.logits, &labels).map_err(diverged)?;
            let budget = budget_loss_tape(&mut tape, &fw.soft_masks, vc.target_usage, vc.budget_weight)?;
            let loss = tape.add(ce, budget)?;
            let loss_v = tape.value(loss).data()[0].as_f64();
            if !loss_v.is_finite() {
                return Err(Error::Diverged { epoch, loss: loss_v });
            }
            let grads = tape.backward(loss).map_err(diverged)?;
            adam.step(model.params_mut(), &params, &grads);

            let b = batch.len() as f64;
            let lv = tape.value(fw.logits);
            let hits = (0..batch.len())
                .filter(|&r| super::argmax(lv.row(r)) == labels[r])
                .count();
            let mean_of = |vars: &[crate::autograd::Var]| {
                let (s, n) = vars.iter().fold((0.0, 0usize), |(s, n), &v| {
                    let t = tape.value(v);
                    (s + t.data().iter().map(|x| x.as_f64()).sum::<f64>(), n + t.numel())
                });
                s / n.max(1) as f64
            };
            sums[0] += loss_v * b;
            sums[1] += tape.value(ce).data()[0].as_f64() * b;
            sums[2] += tape.value(budget).data()[0].as_f64() * b;
            sums[3] += hits as f64;
            sums[4] += mean_of(&fw.soft_masks) * b;
            sums[5] += mean_of(&fw.masks) * b;
            seen += batch.len();
        }
        let n = seen as f64;
        report.epochs.push(EpochMetrics {
            epoch,
            loss: sums[0] / n,
            cross_entropy: sums[1] / n,
            budget: sums[2] / n,
            accuracy: sums[3] / n,
            soft_usage: sums[4] / n,
            hard_usage: sums[5] / n,
        });
    }
    Ok(report)
}
