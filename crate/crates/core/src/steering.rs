//! Latent amplification on the SAE code of the final-layer CLS and its effect
//! on the final layer's head mask.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Container;
use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::sae::{sparsify, topk_indices, Sae};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::{EvalGating, FinalLayerHook, GatedViT, SteerScope, UsageScope};

pub const STATS_TAG: &[u8; 4] = b"STA1";

/// Per-class and global firing counts of every latent.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationStats {
    /// `counts[c][i]`: class-`c` samples with `z_i > 0`.
    pub counts: Vec<Vec<u64>>,
    pub class_samples: Vec<u64>,
}

impl ActivationStats {
    /// Counts strict positivity in `[N×n]` codes.
    pub fn from_codes<T: Scalar>(codes: &Tensor<T>, labels: &[usize], num_classes: usize) -> Result<Self> {
        let (rows, n) = match codes.shape() {
            [r, n] => (*r, *n),
            s => return Err(Error::Shape { op: "activation stats", lhs: s.to_vec(), rhs: vec![0, 0] }),
        };
        if labels.len() != rows {
            return Err(Error::Length(format!("{} labels for {rows} codes", labels.len())));
        }
        let mut counts = vec![vec![0u64; n]; num_classes];
        let mut class_samples = vec![0u64; num_classes];
        for (r, &c) in labels.iter().enumerate() {
            if c >= num_classes {
                return Err(Error::Argument(format!("label {c} >= {num_classes} classes")));
            }
            class_samples[c] += 1;
            for (cnt, z) in counts[c].iter_mut().zip(codes.row(r)) {
                if *z > T::zero() {
                    *cnt += 1;
                }
            }
        }
        Ok(Self { counts, class_samples })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn n(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    pub fn total_samples(&self) -> u64 {
        self.class_samples.iter().sum()
    }

    /// Row `class` of the frequency table; zeros for a class with no samples.
    pub fn class_freq(&self, class: usize) -> Vec<f64> {
        let total = self.class_samples[class];
        self.counts[class]
            .iter()
            .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
            .collect()
    }

    pub fn per_class_freq(&self) -> Vec<Vec<f64>> {
        (0..self.num_classes()).map(|c| self.class_freq(c)).collect()
    }

    pub fn global_freq(&self) -> Vec<f64> {
        let total = self.total_samples();
        (0..self.n())
            .map(|i| {
                let c: u64 = self.counts.iter().map(|row| row[i]).sum();
                if total == 0 {
                    0.0
                } else {
                    c as f64 / total as f64
                }
            })
            .collect()
    }

    /// The `k` most frequent latents of a class, or globally for `None`.
    pub fn top_latents(&self, class: Option<usize>, k: usize) -> Result<LatentSet> {
        let freq = match class {
            Some(c) if c >= self.num_classes() => {
                return Err(Error::Argument(format!("class {c} >= {}", self.num_classes())))
            }
            Some(c) => self.class_freq(c),
            None => self.global_freq(),
        };
        if k > freq.len() {
            return Err(Error::Argument(format!("k_steer {k} exceeds latent count {}", freq.len())));
        }
        LatentSet::new(topk_indices(&freq, k), freq.len())
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(STATS_TAG);
        c.set("stats.classes", self.num_classes());
        c.set("stats.n", self.n());
        let (classes, n) = (self.num_classes(), self.n());
        if classes == 0 || n == 0 {
            return Err(Error::Argument("empty activation stats".into()));
        }
        if self.class_samples.iter().any(|&v| v >= 1 << 24) {
            return Err(Error::Argument("counts of 2^24 or more do not fit the f32 container".into()));
        }
        let flat = self.counts.iter().flatten().map(|&v| v as f64).collect();
        c.push("counts", &Tensor::<f64>::new(&[classes, n], flat)?);
        let samples = self.class_samples.iter().map(|&v| v as f64).collect();
        c.push("class_samples", &Tensor::<f64>::new(&[classes], samples)?);
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let classes: usize = c.meta_parse("stats.classes")?;
        let n: usize = c.meta_parse("stats.n")?;
        let counts = c.tensor::<f64>("counts")?;
        let samples = c.tensor::<f64>("class_samples")?;
        if counts.shape() != [classes, n] || samples.shape() != [classes] {
            return Err(Error::Format("stats tensors disagree with header".into()));
        }
        Ok(Self {
            counts: (0..classes).map(|r| counts.row(r).iter().map(|&v| v as u64).collect()).collect(),
            class_samples: samples.data().iter().map(|&v| v as u64).collect(),
        })
    }
}

/// Encodes the final-layer residual CLS of every image and counts firings.
pub fn activation_frequency<T: Scalar>(
    model: &GatedViT<T>,
    sae: &Sae<T>,
    images: &[&LabeledImage],
    batch_size: usize,
) -> Result<ActivationStats> {
    check_dims(model, sae)?;
    let classes = model.config().num_classes;
    if images.is_empty() {
        return Ok(ActivationStats {
            counts: vec![vec![0; sae.n()]; classes],
            class_samples: vec![0; classes],
        });
    }
    let out = model.evaluate(images, EvalGating::Eval, None, batch_size)?;
    let codes = sae.encode_batch(&out.final_cls)?;
    ActivationStats::from_codes(&codes, &out.labels, classes)
}

/// A duplicate-free set of latent indices, kept in selection order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentSet {
    indices: Vec<usize>,
}

impl LatentSet {
    pub fn new(indices: Vec<usize>, n: usize) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for &i in &indices {
            if i >= n {
                return Err(Error::Argument(format!("latent index {i} >= {n}")));
            }
            if !seen.insert(i) {
                return Err(Error::Argument(format!("latent index {i} listed twice")));
            }
        }
        Ok(Self { indices })
    }

    pub fn empty() -> Self {
        Self { indices: Vec::new() }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.contains(&i)
    }

    fn as_set(&self) -> BTreeSet<usize> {
        self.indices.iter().copied().collect()
    }
}

/// How the latent set `S` is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Strategy {
    PerClassFrequent,
    GlobalFrequent,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::PerClassFrequent, Strategy::GlobalFrequent, Strategy::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::PerClassFrequent => "per_class",
            Strategy::GlobalFrequent => "global",
            Strategy::Random => "random",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_class" | "per_class_frequent" => Ok(Strategy::PerClassFrequent),
            "global" | "global_frequent" => Ok(Strategy::GlobalFrequent),
            "random" => Ok(Strategy::Random),
            other => Err(Error::Argument(format!("unknown strategy {other:?}"))),
        }
    }
}

/// A steering request.
#[derive(Clone, Debug, PartialEq)]
pub struct SteerSpec {
    pub strategy: Strategy,
    pub alpha: f64,
    pub k_steer: usize,
    pub class: Option<usize>,
    pub seed: Option<u64>,
}

pub fn select_latents(stats: &ActivationStats, spec: &SteerSpec) -> Result<LatentSet> {
    let n = stats.n();
    if spec.k_steer == 0 || spec.k_steer > n {
        return Err(Error::Argument(format!("k_steer {} outside 1..={n}", spec.k_steer)));
    }
    match spec.strategy {
        Strategy::PerClassFrequent => {
            let c = spec
                .class
                .ok_or_else(|| Error::Argument("per-class strategy needs a class".into()))?;
            stats.top_latents(Some(c), spec.k_steer)
        }
        Strategy::GlobalFrequent => stats.top_latents(None, spec.k_steer),
        Strategy::Random => {
            let seed = spec
                .seed
                .ok_or_else(|| Error::Argument("random strategy needs a seed".into()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let picked = rand::seq::index::sample(&mut rng, n, spec.k_steer).into_vec();
            LatentSet::new(picked, n)
        }
    }
}

/// `ReLU(TopK(z + α·1_S))`.
pub fn amplify<T: Scalar>(z: &[T], set: &LatentSet, alpha: f64, k: usize) -> Result<Vec<T>> {
    let mut shifted = z.to_vec();
    let a = T::of(alpha);
    for &i in set.indices() {
        let slot = shifted
            .get_mut(i)
            .ok_or_else(|| Error::Argument(format!("latent index {i} >= {}", z.len())))?;
        *slot += a;
    }
    sparsify(&shifted, k)
}

/// `decode(amplify(encode(x)))` row by row over `[B×d]`.
pub fn steer_embeddings<T: Scalar>(sae: &Sae<T>, x: &Tensor<T>, set: &LatentSet, alpha: f64) -> Result<Tensor<T>> {
    let mut z = sae.encode_batch(x)?;
    let n = sae.n();
    for row in z.data_mut().chunks_mut(n) {
        let steered = amplify(row, set, alpha, sae.k())?;
        row.copy_from_slice(&steered);
    }
    sae.decode_batch(&z)
}

/// Outcome of one steered evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct SteerOutcome {
    pub accuracy: f64,
    pub final_usage: f64,
    /// Fraction of samples with each final-layer head on.
    pub head_freq: Vec<f64>,
    pub samples: usize,
}

/// Evaluates `images` with the final decision network reading the steered
/// embedding; attention and classifier see the genuine residual stream
/// unless `scope` says otherwise.
pub fn steered_eval<T: Scalar>(
    model: &GatedViT<T>,
    sae: &Sae<T>,
    set: &LatentSet,
    alpha: f64,
    images: &[&LabeledImage],
    scope: SteerScope,
    batch_size: usize,
) -> Result<SteerOutcome> {
    check_dims(model, sae)?;
    if !alpha.is_finite() {
        return Err(Error::Argument(format!("alpha must be finite, got {alpha}")));
    }
    if images.is_empty() {
        return Err(Error::Argument("steered evaluation over zero images".into()));
    }
    let transform = |x: &Tensor<T>| steer_embeddings(sae, x, set, alpha);
    let hook = FinalLayerHook { transform: &transform, scope };
    let out = model.evaluate(images, EvalGating::Eval, Some(&hook), batch_size)?;
    Ok(SteerOutcome {
        accuracy: out.accuracy(),
        final_usage: out.usage(UsageScope::FinalLayer)?,
        head_freq: out.head_frequency(model.config().layers - 1),
        samples: images.len(),
    })
}

fn check_dims<T: Scalar>(model: &GatedViT<T>, sae: &Sae<T>) -> Result<()> {
    if model.config().dim != sae.d() {
        return Err(Error::Config(format!("model dim {} vs SAE dim {}", model.config().dim, sae.d())));
    }
    Ok(())
}

/// One `(strategy, α, class)` cell of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub strategy: Strategy,
    pub alpha: f64,
    pub class: usize,
    pub accuracy: f64,
    pub final_usage: f64,
    pub head_freq: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    /// Puts rows in `(strategy, α, class)` order.
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            a.strategy
                .cmp(&b.strategy)
                .then(a.alpha.total_cmp(&b.alpha))
                .then(a.class.cmp(&b.class))
        });
    }

    pub fn get(&self, strategy: Strategy, alpha: f64, class: usize) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.strategy == strategy && r.alpha == alpha && r.class == class)
    }

    fn mean_over_classes(&self, strategy: Strategy, alpha: f64, f: impl Fn(&SweepRow) -> f64) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.strategy == strategy && r.alpha == alpha)
            .map(f)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Class-averaged accuracy at `(strategy, α)`.
    pub fn mean_accuracy(&self, strategy: Strategy, alpha: f64) -> Option<f64> {
        self.mean_over_classes(strategy, alpha, |r| r.accuracy)
    }

    /// Class-averaged final-layer usage at `(strategy, α)`.
    pub fn mean_usage(&self, strategy: Strategy, alpha: f64) -> Option<f64> {
        self.mean_over_classes(strategy, alpha, |r| r.final_usage)
    }
}

/// Sweep settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub strategies: Vec<Strategy>,
    pub alphas: Vec<f64>,
    pub k_steer: usize,
    /// Random draws use `seed + class`.
    pub seed: u64,
    pub scope: SteerScope,
    pub batch_size: usize,
}

/// `−1.0, −0.75, …, 1.5`.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=10).map(|i| -1.0 + 0.25 * i as f64).collect()
}

/// The latent set a strategy assigns to `class`.
pub fn strategy_latents(stats: &ActivationStats, strategy: Strategy, class: usize, k_steer: usize, seed: u64) -> Result<LatentSet> {
    select_latents(
        stats,
        &SteerSpec {
            strategy,
            alpha: 0.0,
            k_steer,
            class: Some(class),
            seed: Some(seed.wrapping_add(class as u64)),
        },
    )
}

/// Runs [`steered_eval`] on each class's images for every strategy and α.
pub fn alpha_sweep<T: Scalar>(
    model: &GatedViT<T>,
    sae: &Sae<T>,
    stats: &ActivationStats,
    config: &SweepConfig,
    per_class_images: &[Vec<&LabeledImage>],
) -> Result<SweepResult> {
    if config.alphas.is_empty() {
        return Err(Error::Argument("empty alpha grid".into()));
    }
    if per_class_images.len() != stats.num_classes() {
        return Err(Error::Argument(format!(
            "{} image groups for {} classes",
            per_class_images.len(),
            stats.num_classes()
        )));
    }
    let mut result = SweepResult::default();
    for &strategy in &config.strategies {
        for (class, images) in per_class_images.iter().enumerate() {
            if images.is_empty() {
                continue;
            }
            let set = strategy_latents(stats, strategy, class, config.k_steer, config.seed)?;
            for &alpha in &config.alphas {
                let o = steered_eval(model, sae, &set, alpha, images, config.scope, config.batch_size)?;
                result.rows.push(SweepRow {
                    strategy,
                    alpha,
                    class,
                    accuracy: o.accuracy,
                    final_usage: o.final_usage,
                    head_freq: o.head_freq,
                });
            }
        }
    }
    result.sort();
    Ok(result)
}

/// `|A ∩ B| / |A ∪ B|`; two empty sets count as identical.
pub fn jaccard(a: &LatentSet, b: &LatentSet) -> f64 {
    let (a, b) = (a.as_set(), b.as_set());
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Overlap between two classes' top-`k_steer` sets, or a class and the
/// global set when `b` is `None`.
pub fn latent_overlap(stats: &ActivationStats, a: usize, b: Option<usize>, k_steer: usize) -> Result<f64> {
    Ok(jaccard(&stats.top_latents(Some(a), k_steer)?, &stats.top_latents(b, k_steer)?))
}

/// `C×C` class-pair overlap matrix.
pub fn overlap_matrix(stats: &ActivationStats, k_steer: usize) -> Result<Vec<Vec<f64>>> {
    let sets: Vec<LatentSet> = (0..stats.num_classes())
        .map(|c| stats.top_latents(Some(c), k_steer))
        .collect::<Result<_>>()?;
    Ok(sets.iter().map(|a| sets.iter().map(|b| jaccard(a, b)).collect()).collect())
}

/// Mean over classes of the per-class versus global overlap.
pub fn global_vs_per_class_overlap(stats: &ActivationStats, k_steer: usize) -> Result<f64> {
    let c = stats.num_classes();
    if c == 0 {
        return Err(Error::Argument("no classes".into()));
    }
    let mut total = 0.0;
    for class in 0..c {
        total += latent_overlap(stats, class, None, k_steer)?;
    }
    Ok(total / c as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(rows: Vec<Vec<u64>>, samples: Vec<u64>) -> ActivationStats {
        ActivationStats { counts: rows, class_samples: samples }
    }

    #[test]
    fn per_class_top2() {
        let s = stats(vec![vec![9, 1, 9, 5]], vec![10]);
        let spec = SteerSpec {
            strategy: Strategy::PerClassFrequent,
            alpha: 1.0,
            k_steer: 2,
            class: Some(0),
            seed: None,
        };
        assert_eq!(select_latents(&s, &spec).unwrap().indices(), &[0, 2]);
        let no_class = SteerSpec { class: None, ..spec };
        assert!(select_latents(&s, &no_class).is_err());
    }

    #[test]
    fn recruitment_and_eviction() {
        let set = LatentSet::new(vec![0], 3).unwrap();
        assert_eq!(amplify(&[0.0f32, 2.0, 0.0], &set, 5.0, 1).unwrap(), vec![5.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_alpha_is_identity() {
        let z = [0.0f32, 1.5, 0.0, 0.25];
        let set = LatentSet::new(vec![0, 2], 4).unwrap();
        let out = amplify(&z, &set, 0.0, 2).unwrap();
        assert_eq!(out.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), z.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn jaccard_cases() {
        let a = LatentSet::new(vec![1, 2, 3], 10).unwrap();
        let b = LatentSet::new(vec![3, 4], 10).unwrap();
        assert_eq!(jaccard(&a, &a), 1.0);
        assert_eq!(jaccard(&a, &b), 0.25);
        assert_eq!(jaccard(&a, &LatentSet::new(vec![7], 10).unwrap()), 0.0);
    }

    #[test]
    fn latent_set_rejects_duplicates_and_range() {
        assert!(LatentSet::new(vec![1, 1], 4).is_err());
        assert!(LatentSet::new(vec![4], 4).is_err());
    }

    #[test]
    fn empty_class_row_is_zero() {
        let s = stats(vec![vec![2, 0], vec![0, 0]], vec![2, 0]);
        assert_eq!(s.class_freq(1), vec![0.0, 0.0]);
        assert_eq!(s.global_freq(), vec![1.0, 0.0]);
    }

    #[test]
    fn strategy_names_roundtrip() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!("nope".parse::<Strategy>().is_err());
    }

    #[test]
    fn stats_container_roundtrip() {
        let s = stats(vec![vec![3, 0, 1], vec![0, 5, 5]], vec![4, 5]);
        let back = ActivationStats::from_container(&s.to_container().unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn default_grid() {
        let g = default_alpha_grid();
        assert_eq!(g.len(), 11);
        assert_eq!(g[0], -1.0);
        assert_eq!(g[10], 1.5);
        assert!(g.contains(&0.0) && g.contains(&-0.75) && g.contains(&1.0));
    }
}
