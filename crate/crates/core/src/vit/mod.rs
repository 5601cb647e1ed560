//! Vision transformer with a per-layer decision network gating its heads.
//!
//! Each pre-norm block reads the CLS token of the residual stream entering
//! it, maps it through a two-layer MLP to `H` head logits, turns those into a
//! mask and scales every head's attention output by its mask entry before the
//! output projection.

mod gate;
mod io;
mod train;

pub use gate::{
    budget_loss, budget_loss_tape, gumbel_difference, gumbel_sigmoid, head_usage_ratio, sigmoid, GateMode,
    HeadLogits, HeadMask, MaskMode, UsageScope,
};
pub use io::VIT_TAG;
pub use train::{train_joint, EpochMetrics, TrainConfig, TrainingReport};

use rand::SeedableRng;
use statrs::distribution::{ContinuousCDF, Normal};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::data::{extract_patches, LabeledImage};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Architecture and budget settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub image_size: usize,
    pub patch_size: usize,
    /// Target head usage ratio ρ.
    pub target_usage: f64,
    /// Budget weight λ.
    pub budget_weight: f64,
    /// Gumbel-Sigmoid temperature τ.
    pub temperature: f64,
    /// Centre of the initial decision output biases.
    pub gate_bias_init: f64,
    /// Scale of those biases. The `L·H` gates take the evenly spaced
    /// quantiles of `N(gate_bias_init, gate_bias_spread²)` in random order.
    pub gate_bias_spread: f64,
}

impl ViTConfig {
    /// Desk-scale default: 4 layers, 6 heads, 48-d on 16×16 images with 4×4 patches.
    pub fn toy() -> Self {
        Self {
            layers: 4,
            heads: 6,
            dim: 48,
            mlp_ratio: 2,
            num_classes: 8,
            image_size: 16,
            patch_size: 4,
            target_usage: 0.7,
            budget_weight: 2.0,
            temperature: 0.25,
            gate_bias_init: 2.2,
            gate_bias_spread: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.heads == 0 || self.dim == 0 || self.num_classes == 0 || self.mlp_ratio == 0 {
            return bad(format!("layers, heads, dim, mlp_ratio and num_classes must be positive: {self:?}"));
        }
        if self.dim % self.heads != 0 {
            return bad(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        if self.dim < 4 {
            return bad(format!("dim {} leaves no room for the d/4 decision hidden layer", self.dim));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if !(self.target_usage > 0.0 && self.target_usage <= 1.0) {
            return bad(format!("target usage must lie in (0, 1], got {}", self.target_usage));
        }
        if !(self.budget_weight >= 0.0) {
            return bad(format!("budget weight must be non-negative, got {}", self.budget_weight));
        }
        gate::check_temperature(self.temperature)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn patch_features(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn decision_hidden(&self) -> usize {
        self.dim / 4
    }
}

/// Parameter handles of one transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerIds {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub w_qkv: ParamId,
    /// Query bias. Keys carry no bias: softmax cancels it.
    pub b_q: ParamId,
    pub b_v: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w_fc1: ParamId,
    pub b_fc1: ParamId,
    pub w_fc2: ParamId,
    pub b_fc2: ParamId,
    pub dec_w1: ParamId,
    pub dec_b1: ParamId,
    pub dec_w2: ParamId,
    pub dec_b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct ModelIds {
    patch_embed: ParamId,
    cls_token: ParamId,
    pos_embed: ParamId,
    layers: Vec<LayerIds>,
    final_gain: ParamId,
    final_bias: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

/// How the masks of a forward pass are produced.
pub enum Gating<'a> {
    /// Deterministic `1[a > 0]` masks.
    Eval,
    /// Caller-provided masks, one per layer, shared by every sample.
    Fixed(&'a [HeadMask]),
    /// Training: Gumbel-Sigmoid sample, hard forward value, gradient through
    /// the soft sample.
    Sample(&'a mut ChaCha8Rng),
    /// The soft sample itself is the mask. Differentiable end to end.
    Relaxed(&'a mut ChaCha8Rng),
    /// Plain ViT: heads are never scaled and decision networks are skipped.
    Ungated,
}

/// Which consumers of the final layer's CLS see a transformed embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SteerScope {
    /// Only the final decision network reads the transformed CLS.
    #[default]
    DecisionOnly,
    /// The transformed CLS also replaces the residual-stream CLS entering the
    /// final block.
    FullResidual,
}

/// Replaces the `[B×d]` residual CLS fed to the final layer's decision network.
pub struct FinalLayerHook<'a, T> {
    pub transform: &'a dyn Fn(&Tensor<T>) -> Result<Tensor<T>>,
    pub scope: SteerScope,
}

/// Tape handles produced by [`GatedViT::forward`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `[B×C]` class logits.
    pub logits: Var,
    /// Residual CLS entering each layer, `[B×d]`.
    pub residual_cls: Vec<Var>,
    /// Decision logits per layer, `[B×H]` (empty when ungated).
    pub head_logits: Vec<Var>,
    /// Masks applied per layer, `[B×H]` (empty when ungated).
    pub masks: Vec<Var>,
    /// Soft masks per layer; equal to `masks` outside training modes.
    pub soft_masks: Vec<Var>,
}

/// Inference-mode results over a set of images.
#[derive(Clone, Debug)]
pub struct EvalOutput<T> {
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    /// `masks[sample][layer]`.
    pub masks: Vec<Vec<HeadMask>>,
    /// `[N×d]` residual CLS entering the final layer.
    pub final_cls: Tensor<T>,
    /// `[N×C]` class logits.
    pub logits: Tensor<T>,
}

impl<T: Scalar> EvalOutput<T> {
    pub fn accuracy(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        let hits = self.predictions.iter().zip(&self.labels).filter(|(p, l)| p == l).count();
        hits as f64 / self.labels.len() as f64
    }

    pub fn usage(&self, scope: UsageScope) -> Result<f64> {
        head_usage_ratio(&self.masks, scope)
    }

    /// Fraction of samples in which each head of `layer` is on.
    pub fn head_frequency(&self, layer: usize) -> Vec<f64> {
        let heads = self.masks.first().map_or(0, |m| m[layer].len());
        let mut freq = vec![0.0; heads];
        for m in &self.masks {
            for (f, v) in freq.iter_mut().zip(&m[layer].values) {
                *f += v;
            }
        }
        let n = self.masks.len().max(1) as f64;
        freq.iter().map(|f| f / n).collect()
    }
}

/// Parameters of the gated transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedViT<T> {
    config: ViTConfig,
    store: ParamStore<T>,
    ids: ModelIds,
}

impl<T: Scalar> GatedViT<T> {
    /// Builds every parameter with zeros (gains at one).
    pub fn zeroed(config: ViTConfig) -> Result<Self> {
        Self::build(config, None)
    }

    pub fn init(config: ViTConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, Some(&mut rng))
    }

    fn build(config: ViTConfig, mut rng: Option<&mut ChaCha8Rng>) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.dim;
        let hidden = c.mlp_ratio * d;
        let dh = c.decision_hidden();
        let residual_scale = 1.0 / ((2 * c.layers) as f64).sqrt();
        let random = rng.is_some();
        let mut store = ParamStore::new();
        let mut weight = |store: &mut ParamStore<T>, name: String, shape: &[usize], std: f64| -> Result<ParamId> {
            let t = match rng.as_deref_mut() {
                Some(r) => Tensor::randn(shape, std, r)?,
                None => Tensor::zeros(shape)?,
            };
            Ok(store.insert(name, t))
        };
        let fill = |store: &mut ParamStore<T>, name: String, shape: &[usize], v: f64| -> Result<ParamId> {
            Ok(store.insert(name, Tensor::full(shape, T::of(v))?))
        };

        let feat = c.patch_features();
        let patch_embed = weight(&mut store, "patch_embed".into(), &[d, feat], 1.0 / (feat as f64).sqrt())?;
        let cls_token = weight(&mut store, "cls_token".into(), &[d], 0.02)?;
        let pos_embed = weight(&mut store, "pos_embed".into(), &[1 + c.num_patches(), d], 0.02)?;
        let mut layers = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            let inv = |n: usize| 1.0 / (n as f64).sqrt();
            layers.push(LayerIds {
                ln1_gain: fill(&mut store, p("ln1.gain"), &[d], 1.0)?,
                ln1_bias: fill(&mut store, p("ln1.bias"), &[d], 0.0)?,
                w_qkv: weight(&mut store, p("attn.w_qkv"), &[d, 3 * d], inv(d))?,
                b_q: fill(&mut store, p("attn.b_q"), &[d], 0.0)?,
                b_v: fill(&mut store, p("attn.b_v"), &[d], 0.0)?,
                w_out: weight(&mut store, p("attn.w_out"), &[d, d], inv(d) * residual_scale)?,
                b_out: fill(&mut store, p("attn.b_out"), &[d], 0.0)?,
                ln2_gain: fill(&mut store, p("ln2.gain"), &[d], 1.0)?,
                ln2_bias: fill(&mut store, p("ln2.bias"), &[d], 0.0)?,
                w_fc1: weight(&mut store, p("mlp.w_fc1"), &[d, hidden], inv(d))?,
                b_fc1: fill(&mut store, p("mlp.b_fc1"), &[hidden], 0.0)?,
                w_fc2: weight(&mut store, p("mlp.w_fc2"), &[hidden, d], inv(hidden) * residual_scale)?,
                b_fc2: fill(&mut store, p("mlp.b_fc2"), &[d], 0.0)?,
                dec_w1: weight(&mut store, p("decision.w1"), &[d, dh], inv(d))?,
                dec_b1: fill(&mut store, p("decision.b1"), &[dh], 0.0)?,
                dec_w2: weight(&mut store, p("decision.w2"), &[dh, c.heads], inv(dh))?,
                dec_b2: weight(&mut store, p("decision.b2"), &[c.heads], 1.0)?,
            });
        }
        if random {
            let gates: Vec<ParamId> = layers.iter().map(|l| l.dec_b2).collect();
            let draws: Vec<T> = gates.iter().flat_map(|&id| store.get(id).data().to_vec()).collect();
            let biases = stratified_biases(&draws, c.gate_bias_init, c.gate_bias_spread);
            for (&id, chunk) in gates.iter().zip(biases.chunks(c.heads)) {
                for (b, &v) in store.get_mut(id).data_mut().iter_mut().zip(chunk) {
                    *b = T::of(v);
                }
            }
        }
        let final_gain = fill(&mut store, "final_ln.gain".into(), &[d], 1.0)?;
        let final_bias = fill(&mut store, "final_ln.bias".into(), &[d], 0.0)?;
        let head_w = weight(&mut store, "head.w".into(), &[d, c.num_classes], 1.0 / (d as f64).sqrt())?;
        let head_b = fill(&mut store, "head.b".into(), &[c.num_classes], 0.0)?;
        let ids = ModelIds {
            patch_embed,
            cls_token,
            pos_embed,
            layers,
            final_gain,
            final_bias,
            head_w,
            head_b,
        };
        Ok(Self { config, store, ids })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn layer_ids(&self, layer: usize) -> &LayerIds {
        &self.ids.layers[layer]
    }

    /// Same parameters in another scalar type.
    pub fn cast<U: Scalar>(&self) -> GatedViT<U> {
        GatedViT {
            config: self.config.clone(),
            store: self.store.cast(),
            ids: self.ids.clone(),
        }
    }

    /// `[B×P×3ps²]` patch tensor for a batch of images.
    pub fn patch_batch(&self, images: &[&LabeledImage]) -> Result<Tensor<T>> {
        let c = &self.config;
        let mut data = Vec::with_capacity(images.len() * c.num_patches() * c.patch_features());
        for img in images {
            if img.size != c.image_size {
                return Err(Error::Config(format!(
                    "image of size {} given to a model for size {}",
                    img.size, c.image_size
                )));
            }
            data.extend(extract_patches::<T>(img, c.patch_size)?);
        }
        if images.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        Tensor::new(&[images.len(), c.num_patches(), c.patch_features()], data)
    }

    /// Forward of one layer's decision network on `[B×d]` CLS input.
    pub fn decision_forward(&self, tape: &mut Tape<T>, params: &[Var], layer: usize, cls: Var) -> Result<Var> {
        let ids = &self.ids.layers[layer];
        let h = tape.matmul(cls, params[ids.dec_w1.0])?;
        let h = tape.add(h, params[ids.dec_b1.0])?;
        let h = tape.gelu(h)?;
        let a = tape.matmul(h, params[ids.dec_w2.0])?;
        tape.add(a, params[ids.dec_b2.0])
    }

    /// Head logits of `layer` for a single residual CLS vector.
    pub fn decision_logits(&self, layer: usize, residual_cls: &Tensor<T>) -> Result<HeadLogits> {
        if layer >= self.config.layers {
            return Err(Error::Argument(format!("layer {layer} >= {}", self.config.layers)));
        }
        let d = self.config.dim;
        if residual_cls.numel() != d {
            return Err(Error::Shape {
                op: "decision_logits",
                lhs: residual_cls.shape().to_vec(),
                rhs: vec![d],
            });
        }
        let mut tape = Tape::new();
        let params = self.store.attach(&mut tape, false);
        let cls = tape.constant(residual_cls.reshape(&[1, d])?);
        let a = self.decision_forward(&mut tape, &params, layer, cls)?;
        Ok(HeadLogits {
            values: tape.value(a).data().iter().map(|v| v.as_f64()).collect(),
        })
    }

    /// Records a full forward pass on `tape`.
    ///
    /// `params` must come from [`ParamStore::attach`] on this model's store.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        patches: Var,
        gating: &mut Gating<'_>,
        hook: Option<&FinalLayerHook<'_, T>>,
    ) -> Result<ForwardVars> {
        let c = &self.config;
        let (d, heads, hd) = (c.dim, c.heads, c.head_dim());
        let pshape = tape.value(patches).shape().to_vec();
        if pshape.len() != 3 || pshape[1] != c.num_patches() || pshape[2] != c.patch_features() {
            return Err(Error::Shape {
                op: "forward patches",
                lhs: pshape,
                rhs: vec![0, c.num_patches(), c.patch_features()],
            });
        }
        if let Gating::Fixed(masks) = gating {
            if masks.len() != c.layers || masks.iter().any(|m| m.len() != heads) {
                return Err(Error::Shape {
                    op: "forward masks",
                    lhs: masks.iter().map(HeadMask::len).collect(),
                    rhs: vec![heads; c.layers],
                });
            }
        }
        let b = pshape[0];
        let tokens = c.num_patches() + 1;

        let pe_t = tape.transpose(params[self.ids.patch_embed.0], 0, 1)?;
        let emb = tape.matmul(patches, pe_t)?;
        let zeros = tape.constant(Tensor::zeros(&[b, 1, d])?);
        let cls = tape.reshape(params[self.ids.cls_token.0], &[1, 1, d])?;
        let cls = tape.add(zeros, cls)?;
        let seq = tape.concat(&[cls, emb], 1)?;
        let mut x = tape.add(seq, params[self.ids.pos_embed.0])?;

        let mut out = ForwardVars {
            logits: x,
            residual_cls: Vec::with_capacity(c.layers),
            head_logits: Vec::new(),
            masks: Vec::new(),
            soft_masks: Vec::new(),
        };
        for (l, ids) in self.ids.layers.iter().enumerate() {
            let cls_tok = tape.slice(x, 1, 0, 1)?;
            let cls_in = tape.reshape(cls_tok, &[b, d])?;
            out.residual_cls.push(cls_in);

            let mut decision_in = cls_in;
            if let (Some(h), true) = (hook, l + 1 == c.layers) {
                let replaced = (h.transform)(tape.value(cls_in))?;
                if replaced.shape() != [b, d] {
                    return Err(Error::Shape {
                        op: "final layer hook",
                        lhs: replaced.shape().to_vec(),
                        rhs: vec![b, d],
                    });
                }
                decision_in = tape.constant(replaced);
                if h.scope == SteerScope::FullResidual {
                    let head = tape.reshape(decision_in, &[b, 1, d])?;
                    let rest = tape.slice(x, 1, 1, tokens - 1)?;
                    x = tape.concat(&[head, rest], 1)?;
                }
            }

            let mask = match gating {
                Gating::Ungated => None,
                _ => {
                    let logits = self.decision_forward(tape, params, l, decision_in)?;
                    out.head_logits.push(logits);
                    let (mask, soft) = self.gate(tape, logits, gating, l, b)?;
                    out.masks.push(mask);
                    out.soft_masks.push(soft);
                    Some(mask)
                }
            };
            x = self.block(tape, params, ids, x, mask, b, tokens, d, heads, hd)?;
        }
        let cls_tok = tape.slice(x, 1, 0, 1)?;
        let cls_out = tape.reshape(cls_tok, &[b, d])?;
        let normed = tape.layer_norm(
            cls_out,
            params[self.ids.final_gain.0],
            params[self.ids.final_bias.0],
            T::of(LAYER_NORM_EPS),
        )?;
        let logits = tape.matmul(normed, params[self.ids.head_w.0])?;
        out.logits = tape.add(logits, params[self.ids.head_b.0])?;
        Ok(out)
    }

    /// Returns `(applied mask, soft mask)`, both `[B×H]`.
    fn gate(&self, tape: &mut Tape<T>, logits: Var, gating: &mut Gating<'_>, layer: usize, b: usize) -> Result<(Var, Var)> {
        let heads = self.config.heads;
        let tau = self.config.temperature;
        match gating {
            Gating::Eval => {
                let hard = tape.value(logits).map(|a| if a > T::zero() { T::one() } else { T::zero() });
                let m = tape.constant(hard);
                Ok((m, m))
            }
            Gating::Fixed(masks) => {
                let row: Vec<T> = masks[layer].values.iter().map(|&v| T::of(v)).collect();
                let m = tape.constant(Tensor::from_fn(&[b, heads], |i| row[i % heads])?);
                Ok((m, m))
            }
            Gating::Sample(rng) | Gating::Relaxed(rng) => {
                let noise = Tensor::from_fn(&[b, heads], |_| T::of(gumbel_difference(&mut **rng)))?;
                let noise = tape.constant(noise);
                let shifted = tape.add(logits, noise)?;
                let scaled = tape.scale(shifted, T::of(1.0 / tau))?;
                let soft = tape.sigmoid(scaled)?;
                if matches!(gating, Gating::Relaxed(_)) {
                    return Ok((soft, soft));
                }
                // Straight-through: forward value 1[s > 0.5], gradient of s.
                let sv = tape.value(soft);
                let offset = sv.map(|s| if s > T::of(0.5) { T::one() - s } else { -s });
                let offset = tape.constant(offset);
                let hard = tape.add(soft, offset)?;
                Ok((hard, soft))
            }
            Gating::Ungated => unreachable!("ungated forward has no masks"),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        ids: &LayerIds,
        x: Var,
        mask: Option<Var>,
        b: usize,
        tokens: usize,
        d: usize,
        heads: usize,
        hd: usize,
    ) -> Result<Var> {
        let eps = T::of(LAYER_NORM_EPS);
        let h = tape.layer_norm(x, params[ids.ln1_gain.0], params[ids.ln1_bias.0], eps)?;
        let qkv = tape.matmul(h, params[ids.w_qkv.0])?;
        let split = |tape: &mut Tape<T>, part: usize, bias: Option<Var>| -> Result<Var> {
            let mut s = tape.slice(qkv, 2, part * d, d)?;
            if let Some(bias) = bias {
                s = tape.add(s, bias)?;
            }
            let s = tape.reshape(s, &[b, tokens, heads, hd])?;
            tape.transpose(s, 1, 2)
        };
        let q = split(tape, 0, Some(params[ids.b_q.0]))?;
        let k = split(tape, 1, None)?;
        let v = split(tape, 2, Some(params[ids.b_v.0]))?;
        let kt = tape.transpose(k, 2, 3)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, T::of(1.0 / (hd as f64).sqrt()))?;
        let attn = tape.softmax(scores, 3)?;
        let mut o = tape.matmul(attn, v)?;
        if let Some(m) = mask {
            let m = tape.reshape(m, &[b, heads, 1, 1])?;
            o = tape.mul(o, m)?;
        }
        let o = tape.transpose(o, 1, 2)?;
        let o = tape.reshape(o, &[b, tokens, d])?;
        let proj = tape.matmul(o, params[ids.w_out.0])?;
        let proj = tape.add(proj, params[ids.b_out.0])?;
        let x = tape.add(x, proj)?;

        let h = tape.layer_norm(x, params[ids.ln2_gain.0], params[ids.ln2_bias.0], eps)?;
        let h = tape.matmul(h, params[ids.w_fc1.0])?;
        let h = tape.add(h, params[ids.b_fc1.0])?;
        let h = tape.gelu(h)?;
        let h = tape.matmul(h, params[ids.w_fc2.0])?;
        let h = tape.add(h, params[ids.b_fc2.0])?;
        tape.add(x, h)
    }

    /// Inference over `images` in batches of `batch_size`.
    pub fn evaluate(
        &self,
        images: &[&LabeledImage],
        gating: EvalGating<'_>,
        hook: Option<&FinalLayerHook<'_, T>>,
        batch_size: usize,
    ) -> Result<EvalOutput<T>> {
        let c = &self.config;
        let mut predictions = Vec::with_capacity(images.len());
        let mut masks = Vec::with_capacity(images.len());
        let mut cls = Vec::with_capacity(images.len() * c.dim);
        let mut logits = Vec::with_capacity(images.len() * c.num_classes);
        for chunk in images.chunks(batch_size.max(1)) {
            let mut tape = Tape::new();
            let params = self.store.attach(&mut tape, false);
            let patches = tape.constant(self.patch_batch(chunk)?);
            let mut g = match gating {
                EvalGating::Eval => Gating::Eval,
                EvalGating::Fixed(m) => Gating::Fixed(m),
                EvalGating::Ungated => Gating::Ungated,
            };
            let fw = self.forward(&mut tape, &params, patches, &mut g, hook)?;
            let lv = tape.value(fw.logits);
            for r in 0..chunk.len() {
                predictions.push(argmax(lv.row(r)));
            }
            logits.extend_from_slice(lv.data());
            cls.extend_from_slice(tape.value(*fw.residual_cls.last().expect("at least one layer")).data());
            for r in 0..chunk.len() {
                let per_layer = fw
                    .masks
                    .iter()
                    .map(|&m| HeadMask {
                        values: tape.value(m).row(r).iter().map(|v| v.as_f64()).collect(),
                        mode: MaskMode::Hard,
                    })
                    .collect();
                masks.push(per_layer);
            }
        }
        let n = images.len();
        Ok(EvalOutput {
            predictions,
            labels: images.iter().map(|i| i.label).collect(),
            masks,
            final_cls: if n == 0 { Tensor::zeros(&[1, c.dim])? } else { Tensor::new(&[n, c.dim], cls)? },
            logits: if n == 0 {
                Tensor::zeros(&[1, c.num_classes])?
            } else {
                Tensor::new(&[n, c.num_classes], logits)?
            },
        })
    }
}

/// Inference-only subset of [`Gating`].
#[derive(Clone, Copy)]
pub enum EvalGating<'a> {
    Eval,
    Fixed(&'a [HeadMask]),
    Ungated,
}

/// Decision output biases at the evenly spaced quantiles of
/// `N(mean, spread²)`, assigned to gates in the rank order of `draws`.
fn stratified_biases<T: Scalar>(draws: &[T], mean: f64, spread: f64) -> Vec<f64> {
    let normal = Normal::standard();
    let h = draws.len();
    let mut order: Vec<usize> = (0..h).collect();
    order.sort_by(|&a, &b| draws[a].as_f64().total_cmp(&draws[b].as_f64()));
    let mut out = vec![mean; h];
    for (rank, &head) in order.iter().enumerate() {
        out[head] = mean + spread * normal.inverse_cdf((rank as f64 + 0.5) / h as f64);
    }
    out
}

/// Index of the largest entry; first wins on ties.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
