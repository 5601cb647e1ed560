//! Head logits, Gumbel-Sigmoid masks, usage ratios and the usage budget.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Importance logits `a_ℓ` of the `H` heads of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadLogits {
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Relaxed sample, entries in `[0, 1]`.
    Soft,
    /// Binary, entries in `{0, 1}`.
    Hard,
}

/// Per-head gate `M_ℓ` of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadMask {
    pub values: Vec<f64>,
    pub mode: MaskMode,
}

impl HeadMask {
    pub fn ones(heads: usize) -> Self {
        Self {
            values: vec![1.0; heads],
            mode: MaskMode::Hard,
        }
    }

    pub fn hard(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Argument(format!("hard mask entries must be 0 or 1: {values:?}")));
        }
        Ok(Self {
            values,
            mode: MaskMode::Hard,
        })
    }

    /// Thresholds a soft mask at 0.5.
    pub fn harden(&self) -> Self {
        Self {
            values: self.values.iter().map(|&s| if s > 0.5 { 1.0 } else { 0.0 }).collect(),
            mode: MaskMode::Hard,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// How masks are drawn from logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    /// Stochastic relaxed sample (the straight-through hard value is
    /// [`HeadMask::harden`] of the result).
    Train,
    /// `M_i = 1[a_i > 0]`, no noise.
    Eval,
}

/// Difference of two independent standard Gumbel draws.
pub fn gumbel_difference<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    gumbel(rng) - gumbel(rng)
}

fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // u in (0, 1): keep both logs finite.
    let u: f64 = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12);
    -(-u.ln()).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("Gumbel temperature must be positive, got {tau}")))
    }
}

/// Samples a mask: `Train` gives `s_i = σ((a_i + g − g′)/τ)`, `Eval` gives `1[a_i > 0]`.
pub fn gumbel_sigmoid<R: Rng + ?Sized>(logits: &HeadLogits, tau: f64, mode: GateMode, rng: &mut R) -> Result<HeadMask> {
    check_temperature(tau)?;
    Ok(match mode {
        GateMode::Eval => HeadMask {
            values: logits.values.iter().map(|&a| if a > 0.0 { 1.0 } else { 0.0 }).collect(),
            mode: MaskMode::Hard,
        },
        GateMode::Train => HeadMask {
            values: logits
                .values
                .iter()
                .map(|&a| sigmoid((a + gumbel_difference(rng)) / tau))
                .collect(),
            mode: MaskMode::Soft,
        },
    })
}

/// Region of the network a usage ratio is averaged over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UsageScope {
    Layer(usize),
    FinalLayer,
    Global,
}

/// Mean mask entry over `masks[sample][layer]` within `scope`.
pub fn head_usage_ratio(masks: &[Vec<HeadMask>], scope: UsageScope) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for per_layer in masks {
        let chosen: Vec<&HeadMask> = match scope {
            UsageScope::Global => per_layer.iter().collect(),
            UsageScope::FinalLayer => per_layer.last().into_iter().collect(),
            UsageScope::Layer(l) => per_layer.get(l).into_iter().collect(),
        };
        for m in chosen {
            sum += m.values.iter().sum::<f64>();
            count += m.values.len();
        }
    }
    if count == 0 {
        return Err(Error::Argument(format!("no mask entries in scope {scope:?}")));
    }
    Ok(sum / count as f64)
}

/// `λ · (mean(masks) − ρ)²` over every entry of every mask.
pub fn budget_loss(masks: &[HeadMask], target: f64, weight: f64) -> Result<f64> {
    if weight < 0.0 {
        return Err(Error::Argument(format!("budget weight must be non-negative, got {weight}")));
    }
    let n: usize = masks.iter().map(HeadMask::len).sum();
    if n == 0 {
        return Ok(0.0);
    }
    let mean = masks.iter().flat_map(|m| &m.values).sum::<f64>() / n as f64;
    Ok(weight * (mean - target) * (mean - target))
}

/// Tape version of [`budget_loss`] over per-layer `[B×H]` soft masks.
pub fn budget_loss_tape<T: Scalar>(tape: &mut Tape<T>, soft: &[Var], target: f64, weight: f64) -> Result<Var> {
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for &s in soft {
        count += tape.value(s).numel();
        let part = tape.sum(s)?;
        total = Some(match total {
            Some(t) => tape.add(t, part)?,
            None => part,
        });
    }
    let total = total.ok_or_else(|| Error::Argument("budget over zero layers".into()))?;
    let mean = tape.scale(total, T::one() / T::of(count as f64))?;
    let rho = tape.constant(Tensor::scalar(T::of(-target)));
    let dev = tape.add(mean, rho)?;
    let sq = tape.mul(dev, dev)?;
    tape.scale(sq, T::of(weight))
}
