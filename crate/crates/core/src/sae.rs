//! TopK sparse autoencoder over `d`-dimensional embeddings.
//!
//! `z = ReLU(TopK(W_enc (x − b_dec)))`, `x̂ = W_dec z + b_dec`, trained on the
//! mean over samples of `‖x − x̂‖²`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::checkpoint::Container;
use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::params::{Adam, AdamConfig, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::{EvalGating, FinalLayerHook, GatedViT, SteerScope, UsageScope};

pub const SAE_TAG: &[u8; 4] = b"SAE1";

#[derive(Clone, Debug, PartialEq)]
pub struct SaeConfig {
    pub d: usize,
    pub n: usize,
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl SaeConfig {
    /// 8× expansion of the toy 48-d embedding, k = 16.
    pub fn toy() -> Self {
        Self {
            d: 48,
            n: 384,
            k: 16,
            epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n < self.d {
            return Err(Error::Config(format!("need 0 < d <= n, got d={} n={}", self.d, self.n)));
        }
        if self.k == 0 || self.k > self.n {
            return Err(Error::Config(format!("need 0 < k <= n, got k={} n={}", self.k, self.n)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("SAE batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("SAE learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Keeps the `k` largest entries by signed value and zeroes the rest.
/// Ties go to the lowest index.
pub fn topk_activation<T: Scalar>(v: &[T], k: usize) -> Result<Vec<T>> {
    if k == 0 || k > v.len() {
        return Err(Error::Argument(format!("k = {k} outside 1..={}", v.len())));
    }
    let mut out = vec![T::zero(); v.len()];
    for i in topk_indices(v, k) {
        out[i] = v[i];
    }
    Ok(out)
}

/// Indices of the `k` largest entries, ordered by decreasing value then index.
pub fn topk_indices<T: Scalar>(v: &[T], k: usize) -> Vec<usize> {
    let by_rank = |a: &usize, b: &usize| v[*b].partial_cmp(&v[*a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..v.len()).collect();
    let k = k.min(v.len());
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, by_rank);
    }
    idx.truncate(k);
    idx.sort_unstable_by(by_rank);
    idx
}

/// `ReLU(TopK(v))`: the encoder nonlinearity.
pub fn sparsify<T: Scalar>(v: &[T], k: usize) -> Result<Vec<T>> {
    let mut z = topk_activation(v, k)?;
    for x in &mut z {
        if !(*x > T::zero()) {
            *x = T::zero();
        }
    }
    Ok(z)
}

/// A code `z` with at most `k` nonzero entries.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVector<T> {
    pub values: Vec<T>,
}

impl<T: Scalar> LatentVector<T> {
    pub fn nnz(&self) -> usize {
        self.values.iter().filter(|v| **v != T::zero()).count()
    }

    pub fn support(&self) -> Vec<usize> {
        (0..self.values.len()).filter(|&i| self.values[i] != T::zero()).collect()
    }
}

/// Autoencoder parameters: `W_enc` `[n×d]`, `W_dec` `[d×n]`, `b_dec` `[d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sae<T> {
    d: usize,
    n: usize,
    k: usize,
    store: ParamStore<T>,
}

const W_ENC: ParamId = ParamId(0);
const W_DEC: ParamId = ParamId(1);
const B_DEC: ParamId = ParamId(2);

/// Tape handles of the three parameter tensors.
#[derive(Clone, Copy, Debug)]
pub struct SaeVars {
    pub w_enc: Var,
    pub w_dec: Var,
    pub b_dec: Var,
}

impl<T: Scalar> Sae<T> {
    pub fn from_parts(w_enc: Tensor<T>, w_dec: Tensor<T>, b_dec: Tensor<T>, k: usize) -> Result<Self> {
        let (n, d) = match w_enc.shape() {
            [n, d] => (*n, *d),
            s => return Err(Error::Shape { op: "sae W_enc", lhs: s.to_vec(), rhs: vec![0, 0] }),
        };
        if w_dec.shape() != [d, n] || b_dec.shape() != [d] {
            return Err(Error::Shape {
                op: "sae parts",
                lhs: [w_dec.shape(), b_dec.shape()].concat(),
                rhs: vec![d, n, d],
            });
        }
        if k == 0 || k > n {
            return Err(Error::Config(format!("need 0 < k <= n, got k={k} n={n}")));
        }
        let mut store = ParamStore::new();
        store.insert("w_enc", w_enc);
        store.insert("w_dec", w_dec);
        store.insert("b_dec", b_dec);
        Ok(Self { d, n, k, store })
    }

    /// `b_dec` at the embedding mean, unit-norm random decoder columns and
    /// `W_enc = W_decᵀ`.
    pub fn init(config: &SaeConfig, embeddings: &Tensor<T>) -> Result<Self> {
        config.validate()?;
        let (rows, d) = check_embeddings(embeddings, config.d)?;
        let n = config.n;
        let mut mean = vec![0.0f64; d];
        for r in 0..rows {
            for (m, v) in mean.iter_mut().zip(embeddings.row(r)) {
                *m += v.as_f64();
            }
        }
        let b_dec = Tensor::new(&[d], mean.iter().map(|m| T::of(m / rows as f64)).collect())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut w_dec = Tensor::<T>::randn(&[d, n], 1.0, &mut rng)?;
        normalize_columns(&mut w_dec);
        let w_enc = w_dec.transpose(0, 1)?;
        Self::from_parts(w_enc, w_dec, b_dec, config.k)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn w_enc(&self) -> &Tensor<T> {
        self.store.get(W_ENC)
    }

    pub fn w_dec(&self) -> &Tensor<T> {
        self.store.get(W_DEC)
    }

    pub fn b_dec(&self) -> &Tensor<T> {
        self.store.get(B_DEC)
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn cast<U: Scalar>(&self) -> Sae<U> {
        Sae {
            d: self.d,
            n: self.n,
            k: self.k,
            store: self.store.cast(),
        }
    }

    /// Encoder pre-activations `W_enc (x − b_dec)` for `[N×d]` input.
    pub fn pre_activations(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_embeddings(x, self.d)?;
        let centered = x.add(&self.b_dec().scale(-T::one()))?;
        centered.matmul(&self.w_enc().transpose(0, 1)?)
    }

    pub fn encode(&self, x: &Tensor<T>) -> Result<LatentVector<T>> {
        if x.numel() != self.d {
            return Err(Error::Shape { op: "sae encode", lhs: x.shape().to_vec(), rhs: vec![self.d] });
        }
        let z = self.encode_batch(&x.reshape(&[1, self.d])?)?;
        Ok(LatentVector { values: z.into_data() })
    }

    /// `[N×d]` → `[N×n]` codes.
    pub fn encode_batch(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut pre = self.pre_activations(x)?;
        let n = self.n;
        for row in pre.data_mut().chunks_mut(n) {
            let z = sparsify(row, self.k)?;
            row.copy_from_slice(&z);
        }
        Ok(pre)
    }

    pub fn decode(&self, z: &LatentVector<T>) -> Result<Tensor<T>> {
        if z.values.len() != self.n {
            return Err(Error::Shape { op: "sae decode", lhs: vec![z.values.len()], rhs: vec![self.n] });
        }
        let zt = Tensor::new(&[1, self.n], z.values.clone())?;
        self.decode_batch(&zt)?.reshape(&[self.d])
    }

    /// `[N×n]` → `[N×d]` reconstructions.
    pub fn decode_batch(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        if z.rank() != 2 || z.shape()[1] != self.n {
            return Err(Error::Shape { op: "sae decode", lhs: z.shape().to_vec(), rhs: vec![0, self.n] });
        }
        z.matmul(&self.w_dec().transpose(0, 1)?)?.add(self.b_dec())
    }

    pub fn reconstruct_batch(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.decode_batch(&self.encode_batch(x)?)
    }

    /// Mean over rows of `‖x − x̂‖²`.
    pub fn mse(&self, x: &Tensor<T>) -> Result<f64> {
        let rec = self.reconstruct_batch(x)?;
        let rows = x.shape()[0];
        let sq: f64 = x
            .data()
            .iter()
            .zip(rec.data())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum();
        Ok(sq / rows as f64)
    }

    /// Latents that never fire on `x`.
    pub fn dead_latents(&self, x: &Tensor<T>) -> Result<usize> {
        let z = self.encode_batch(x)?;
        let mut alive = vec![false; self.n];
        for row in z.data().chunks(self.n) {
            for (a, v) in alive.iter_mut().zip(row) {
                *a |= *v > T::zero();
            }
        }
        Ok(alive.iter().filter(|a| !**a).count())
    }

    pub fn attach(&self, tape: &mut Tape<T>, trainable: bool) -> SaeVars {
        let v = self.store.attach(tape, trainable);
        SaeVars {
            w_enc: v[W_ENC.0],
            w_dec: v[W_DEC.0],
            b_dec: v[B_DEC.0],
        }
    }

    /// Records the reconstruction loss of `[B×d]` rows `x` on `tape`.
    ///
    /// The TopK/ReLU support is read off the recorded pre-activations and
    /// enters the graph as a constant 0/1 mask.
    pub fn loss_tape(&self, tape: &mut Tape<T>, vars: SaeVars, x: &Tensor<T>) -> Result<Var> {
        let (rows, _) = check_embeddings(x, self.d)?;
        let xv = tape.constant(x.clone());
        let neg_b = tape.scale(vars.b_dec, -T::one())?;
        let centered = tape.add(xv, neg_b)?;
        let enc_t = tape.transpose(vars.w_enc, 0, 1)?;
        let pre = tape.matmul(centered, enc_t)?;
        let mut mask = tape.value(pre).clone();
        for row in mask.data_mut().chunks_mut(self.n) {
            let z = sparsify(row, self.k)?;
            for (m, v) in row.iter_mut().zip(z) {
                *m = if v > T::zero() { T::one() } else { T::zero() };
            }
        }
        let mask = tape.constant(mask);
        let z = tape.mul(pre, mask)?;
        let dec_t = tape.transpose(vars.w_dec, 0, 1)?;
        let rec = tape.matmul(z, dec_t)?;
        let rec = tape.add(rec, vars.b_dec)?;
        let diff = tape.sub(xv, rec)?;
        let sq = tape.mul(diff, diff)?;
        let total = tape.sum(sq)?;
        tape.scale(total, T::one() / T::of(rows as f64))
    }

    /// Rescales every decoder column to unit L2 norm.
    pub fn normalize_decoder(&mut self) {
        normalize_columns(self.store.get_mut(W_DEC));
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(SAE_TAG);
        c.set("sae.d", self.d);
        c.set("sae.n", self.n);
        c.set("sae.k", self.k);
        c.push_store(&self.store);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let k = c.meta_parse("sae.k")?;
        let s = Self::from_parts(c.tensor("w_enc")?, c.tensor("w_dec")?, c.tensor("b_dec")?, k)?;
        if s.d != c.meta_parse::<usize>("sae.d")? || s.n != c.meta_parse::<usize>("sae.n")? {
            return Err(Error::Format("SAE header dims disagree with tensors".into()));
        }
        if c.tensors.len() != 3 {
            return Err(Error::Format(format!("SAE container holds {} tensors, expected 3", c.tensors.len())));
        }
        Ok(s)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::from_bytes_tagged(bytes, SAE_TAG)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path, SAE_TAG)?)
    }
}

fn check_embeddings<T: Scalar>(x: &Tensor<T>, d: usize) -> Result<(usize, usize)> {
    match x.shape() {
        [rows, cols] if *cols == d => Ok((*rows, *cols)),
        s => Err(Error::Shape { op: "sae input", lhs: s.to_vec(), rhs: vec![0, d] }),
    }
}

fn normalize_columns<T: Scalar>(w: &mut Tensor<T>) {
    let (d, n) = (w.shape()[0], w.shape()[1]);
    let data = w.data_mut();
    for j in 0..n {
        let norm = (0..d).map(|i| data[i * n + j].as_f64().powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            let inv = T::of(1.0 / norm);
            for i in 0..d {
                data[i * n + j] *= inv;
            }
        }
    }
}

/// Output of [`train_sae`].
#[derive(Clone, Debug, PartialEq)]
pub struct SaeReport {
    /// Full-data MSE before the first update.
    pub initial_mse: f64,
    /// Per-epoch mean of batch MSEs.
    pub loss_curve: Vec<f64>,
    /// Full-data MSE after training.
    pub final_mse: f64,
    pub dead_latents: usize,
}

/// Trains on `[N×d]` embeddings with Adam, renormalising decoder columns
/// after each step.
pub fn train_sae<T: Scalar>(config: &SaeConfig, embeddings: &Tensor<T>) -> Result<(Sae<T>, SaeReport)> {
    config.validate()?;
    let (rows, _) = check_embeddings(embeddings, config.d)?;
    if rows == 0 {
        return Err(Error::Argument("no embeddings to train on".into()));
    }
    let mut sae = Sae::init(config, embeddings)?;
    let initial_mse = sae.mse(embeddings)?;
    let adam_cfg = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(adam_cfg, &sae.store);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5ae5_5ae5);
    let mut order: Vec<usize> = (0..rows).collect();
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let d = config.d;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len() * d);
            for &r in chunk {
                batch.extend_from_slice(embeddings.row(r));
            }
            let batch = Tensor::new(&[chunk.len(), d], batch)?;
            let mut tape = Tape::new();
            let vars = sae.attach(&mut tape, true);
            let loss = sae.loss_tape(&mut tape, vars, &batch).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { epoch, loss: f64::NAN },
                other => other,
            })?;
            let lv = tape.value(loss).data()[0].as_f64();
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch, loss: lv });
            }
            let grads = tape.backward(loss)?;
            adam.step(&mut sae.store, &[vars.w_enc, vars.w_dec, vars.b_dec], &grads);
            sae.normalize_decoder();
            total += lv * chunk.len() as f64;
        }
        loss_curve.push(total / rows as f64);
    }
    let final_mse = sae.mse(embeddings)?;
    let dead_latents = sae.dead_latents(embeddings)?;
    Ok((sae, SaeReport { initial_mse, loss_curve, final_mse, dead_latents }))
}

/// Accuracy and final-layer usage with the final decision network fed the
/// original CLS versus its SAE reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionAblation {
    pub accuracy_original: f64,
    pub accuracy_reconstructed: f64,
    pub usage_original: f64,
    pub usage_reconstructed: f64,
}

impl ReconstructionAblation {
    /// Percentage points.
    pub fn delta_accuracy_pct(&self) -> f64 {
        100.0 * (self.accuracy_reconstructed - self.accuracy_original)
    }

    pub fn delta_usage(&self) -> f64 {
        self.usage_reconstructed - self.usage_original
    }
}

pub fn reconstruct_replace_eval<T: Scalar>(
    model: &GatedViT<T>,
    sae: &Sae<T>,
    images: &[&LabeledImage],
    batch_size: usize,
) -> Result<ReconstructionAblation> {
    if model.config().dim != sae.d() {
        return Err(Error::Config(format!("model dim {} vs SAE dim {}", model.config().dim, sae.d())));
    }
    let base = model.evaluate(images, EvalGating::Eval, None, batch_size)?;
    let transform = |x: &Tensor<T>| sae.reconstruct_batch(x);
    let hook = FinalLayerHook {
        transform: &transform,
        scope: SteerScope::DecisionOnly,
    };
    let rec = model.evaluate(images, EvalGating::Eval, Some(&hook), batch_size)?;
    Ok(ReconstructionAblation {
        accuracy_original: base.accuracy(),
        accuracy_reconstructed: rec.accuracy(),
        usage_original: base.usage(UsageScope::FinalLayer)?,
        usage_reconstructed: rec.usage(UsageScope::FinalLayer)?,
    })
}
