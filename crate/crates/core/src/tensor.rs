//! Dense row-major tensors and the forward/backward kernels behind every
//! differentiable op.
//!
//! Kernels are written as plain loops with a fixed reduction order so that a
//! given input always produces bitwise-identical output.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Argument(format!(
                "tensor shape must be non-empty with positive dims, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Argument(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape, (0..numel).map(f).collect())
    }

    /// Draws i.i.d. `N(0, std²)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Result<Self> {
        Self::from_fn(shape, |_| {
            let v: f64 = StandardNormal.sample(rng);
            T::of(v * std)
        })
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value at a full multi-index.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            off = off * d + i;
        }
        self.data[off]
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        assert_eq!(self.rank(), 2, "row() needs a matrix");
        let n = self.shape[1];
        &self.data[i * n..(i + 1) * n]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(shape_err("reshape", &self.shape, shape));
        }
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    /// Converts element type (e.g. `f32` parameters into an `f64` copy).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul_forward(self, other)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        binary_forward(self, other, BinaryOp::Add)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        binary_forward(self, other, BinaryOp::Mul)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Self> {
        transpose_forward(self, a, b)
    }

    pub fn softmax(&self, axis: usize) -> Result<Self> {
        softmax_forward(self, axis)
    }

    pub fn layer_norm(&self, gain: &Self, bias: &Self, eps: T) -> Result<Self> {
        Ok(layer_norm_forward(self, gain, bias, eps)?.0)
    }

    pub fn gelu(&self) -> Self {
        self.map(gelu)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }
}

// ---------------------------------------------------------------------------
// matmul

/// `out[m×n] += a[m×k] · b[k×n]`. Zero entries of `a` are skipped, which keeps
/// sparse operands cheap and leaves results unchanged.
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k×n] += aᵀ · g` with `a[m×k]`, `g[m×n]`.
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}

/// `out[m×k] += g · bᵀ` with `g[m×n]`, `b[k×n]`.
pub(crate) fn gemm_nt<T: Scalar>(g: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for (p, o) in out_row.iter_mut().enumerate() {
            *o += dot(g_row, &b[p * n..(p + 1) * n]);
        }
    }
}

/// Dot product with eight independent accumulators combined in a fixed order.
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (ac, bc) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += ac[l] * bc[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Operand layout of a (possibly batched) matrix product.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// `b` is a single `[k, n]` matrix shared across the batch.
    pub shared_rhs: bool,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(MatmulDims, Vec<usize>)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(shape_err("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return Err(shape_err("matmul", a, b));
    }
    let a_batch = &a[..a.len() - 2];
    let mut out: Vec<usize> = a_batch.to_vec();
    out.extend([m, n]);
    if b.len() == 2 {
        // Fold the batch into the row dimension.
        let rows = a_batch.iter().product::<usize>() * m;
        let dims = MatmulDims {
            batch: 1,
            m: rows,
            k,
            n,
            shared_rhs: true,
        };
        return Ok((dims, out));
    }
    if &b[..b.len() - 2] != a_batch {
        return Err(shape_err("matmul", a, b));
    }
    let dims = MatmulDims {
        batch: a_batch.iter().product(),
        m,
        k,
        n,
        shared_rhs: false,
    };
    Ok((dims, out))
}

pub(crate) fn matmul_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (d, out_shape) = matmul_dims(&a.shape, &b.shape)?;
    let mut out = vec![T::zero(); d.batch * d.m * d.n];
    for t in 0..d.batch {
        let a_s = &a.data[t * d.m * d.k..(t + 1) * d.m * d.k];
        let b_s = if d.shared_rhs {
            &b.data[..]
        } else {
            &b.data[t * d.k * d.n..(t + 1) * d.k * d.n]
        };
        gemm_nn(a_s, b_s, &mut out[t * d.m * d.n..(t + 1) * d.m * d.n], d.m, d.k, d.n);
    }
    Tensor::new(&out_shape, out)?.ensure_finite("matmul")
}

/// Returns `(da, db)` for `out = a · b` given upstream `g`.
pub(crate) fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    let (d, _) = matmul_dims(&a.shape, &b.shape)?;
    let mut da = vec![T::zero(); a.numel()];
    let mut db = vec![T::zero(); b.numel()];
    for t in 0..d.batch {
        let (mk, kn, mn) = (d.m * d.k, d.k * d.n, d.m * d.n);
        let g_s = &g[t * mn..(t + 1) * mn];
        let a_s = &a.data[t * mk..(t + 1) * mk];
        let (b_s, db_s) = if d.shared_rhs {
            (&b.data[..], &mut db[..])
        } else {
            (&b.data[t * kn..(t + 1) * kn], &mut db[t * kn..(t + 1) * kn])
        };
        gemm_nt(g_s, b_s, &mut da[t * mk..(t + 1) * mk], d.m, d.k, d.n);
        gemm_tn(a_s, g_s, db_s, d.m, d.k, d.n);
    }
    Ok((da, db))
}

// ---------------------------------------------------------------------------
// broadcasting elementwise ops

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryOp {
    Add,
    Mul,
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` aligned to `out` with zeros on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

/// Visits `(out_index, a_index, b_index)` for every output element in order.
fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let rank = out.len();
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let mut o = 0;
    for _ in 0..outer {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..rank - 1 {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        for j in 0..inner {
            f(o, ia + j * ia_step, ib + j * ib_step);
            o += 1;
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub(crate) fn binary_forward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: BinaryOp,
) -> Result<Tensor<T>> {
    let apply = |x: T, y: T| match op {
        BinaryOp::Add => x + y,
        BinaryOp::Mul => x * y,
    };
    let name = match op {
        BinaryOp::Add => "add",
        BinaryOp::Mul => "mul",
    };
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| apply(x, y)).collect();
        return Tensor::new(&a.shape, data)?.ensure_finite(name);
    }
    let out_shape = broadcast_shape(&a.shape, &b.shape).ok_or_else(|| shape_err(name, &a.shape, &b.shape))?;
    let numel: usize = out_shape.iter().product();
    let mut data = vec![T::zero(); numel];
    for_each_broadcast(&out_shape, &a.shape, &b.shape, |o, ia, ib| {
        data[o] = apply(a.data[ia], b.data[ib]);
    });
    Tensor::new(&out_shape, data)?.ensure_finite(name)
}

/// Gradients of a broadcasting binary op, reduced back to each operand's shape.
pub(crate) fn binary_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &[T],
    out_shape: &[usize],
    op: BinaryOp,
) -> (Vec<T>, Vec<T>) {
    let mut ga = vec![T::zero(); a.numel()];
    let mut gb = vec![T::zero(); b.numel()];
    if a.shape == b.shape {
        for i in 0..g.len() {
            match op {
                BinaryOp::Add => {
                    ga[i] = g[i];
                    gb[i] = g[i];
                }
                BinaryOp::Mul => {
                    ga[i] = g[i] * b.data[i];
                    gb[i] = g[i] * a.data[i];
                }
            }
        }
        return (ga, gb);
    }
    for_each_broadcast(out_shape, &a.shape, &b.shape, |o, ia, ib| match op {
        BinaryOp::Add => {
            ga[ia] += g[o];
            gb[ib] += g[o];
        }
        BinaryOp::Mul => {
            ga[ia] += g[o] * b.data[ib];
            gb[ib] += g[o] * a.data[ia];
        }
    });
    (ga, gb)
}

// ---------------------------------------------------------------------------
// layout ops

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Argument(format!("{op}: axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

/// Copies `src` into a new buffer with axes `a` and `b` swapped.
pub(crate) fn swap_axes<T: Scalar>(src: &[T], shape: &[usize], a: usize, b: usize) -> (Vec<T>, Vec<usize>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(a, b);
    if a == b {
        return (src.to_vec(), out_shape);
    }
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    // Strides into `src`, indexed by output axis.
    let mut strides = in_strides.clone();
    strides.swap(a, b);
    let mut out = Vec::with_capacity(src.len());
    let inner = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let outer: usize = out_shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    for _ in 0..outer {
        let base: usize = (0..rank - 1).map(|d| idx[d] * strides[d]).sum();
        for j in 0..inner {
            out.push(src[base + j * inner_stride]);
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn transpose_forward<T: Scalar>(x: &Tensor<T>, a: usize, b: usize) -> Result<Tensor<T>> {
    check_axis("transpose", &x.shape, a)?;
    check_axis("transpose", &x.shape, b)?;
    let (data, shape) = swap_axes(&x.data, &x.shape, a, b);
    Tensor::new(&shape, data)
}

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn concat_forward<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Argument("concat of zero tensors".into()))?;
    check_axis("concat", &first.shape, axis)?;
    let mut total = 0;
    for p in parts {
        let same_rank = p.rank() == first.rank();
        let same_other = same_rank
            && p.shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !same_other {
            return Err(shape_err("concat", &first.shape, &p.shape));
        }
        total += p.shape[axis];
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    let (outer, _, inner) = axis_split(&shape, axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let block = p.shape[axis] * inner;
            out.extend_from_slice(&p.data[o * block..(o + 1) * block]);
        }
    }
    Tensor::new(&shape, out)
}

pub(crate) fn slice_forward<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    check_axis("slice", &x.shape, axis)?;
    if len == 0 || start + len > x.shape[axis] {
        return Err(Error::Argument(format!(
            "slice [{start}, {}) out of range for axis {axis} of {:?}",
            start + len,
            x.shape
        )));
    }
    let (outer, full, inner) = axis_split(&x.shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * full * inner + start * inner;
        out.extend_from_slice(&x.data[base..base + len * inner]);
    }
    let mut shape = x.shape.clone();
    shape[axis] = len;
    Tensor::new(&shape, out)
}

// ---------------------------------------------------------------------------
// softmax

pub(crate) fn softmax_forward<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_axis("softmax", &x.shape, axis)?;
    if !x.is_finite() {
        return Err(Error::NonFinite("softmax input"));
    }
    let (outer, len, inner) = axis_split(&x.shape, axis);
    let mut out = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x.data[at(j)]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (x.data[at(j)] - max).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[at(j)] /= sum;
            }
        }
    }
    Tensor::new(&x.shape, out)?.ensure_finite("softmax")
}

pub(crate) fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &[T], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(&y.shape, axis);
    let mut dx = vec![T::zero(); y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut s = T::zero();
            for j in 0..len {
                s += g[at(j)] * y.data[at(j)];
            }
            for j in 0..len {
                dx[at(j)] = y.data[at(j)] * (g[at(j)] - s);
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// layer norm over the last axis

/// Per-row statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct NormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let d = *x.shape.last().expect("non-empty shape");
    if gain.numel() != d || gain.rank() != 1 {
        return Err(shape_err("layer_norm gain", &x.shape, &gain.shape));
    }
    if bias.numel() != d || bias.rank() != 1 {
        return Err(shape_err("layer_norm bias", &x.shape, &bias.shape));
    }
    let rows = x.numel() / d;
    let inv_d = T::one() / T::of(d as f64);
    let mut out = vec![T::zero(); x.numel()];
    let mut xhat = vec![T::zero(); x.numel()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x.data[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain.data[j] + bias.data[j];
        }
    }
    let y = Tensor::new(&x.shape, out)?.ensure_finite("layer_norm")?;
    Ok((y, NormCache { xhat, rstd }))
}

/// Returns `(dx, dgain, dbias)`.
pub(crate) fn layer_norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    gain: &Tensor<T>,
    g: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = gain.numel();
    let rows = g.len() / d;
    let inv_d = T::one() / T::of(d as f64);
    let mut dx = vec![T::zero(); g.len()];
    let mut dgain = vec![T::zero(); d];
    let mut dbias = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let gr = &g[r * d..(r + 1) * d];
        let hr = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dh = T::zero();
        let mut mean_dh_h = T::zero();
        for j in 0..d {
            dgain[j] += gr[j] * hr[j];
            dbias[j] += gr[j];
            dxhat[j] = gr[j] * gain.data[j];
            mean_dh += dxhat[j];
            mean_dh_h += dxhat[j] * hr[j];
        }
        mean_dh *= inv_d;
        mean_dh_h *= inv_d;
        let rs = cache.rstd[r];
        for j in 0..d {
            dx[r * d + j] = rs * (dxhat[j] - mean_dh - hr[j] * mean_dh_h);
        }
    }
    (dx, dgain, dbias)
}

// ---------------------------------------------------------------------------
// GELU (tanh approximation)

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

// ---------------------------------------------------------------------------
// cross-entropy with logits

/// Mean negative log-likelihood over rows of `logits[B×C]`; also returns the
/// row softmax for the backward pass.
pub(crate) fn cross_entropy_forward<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Vec<T>)> {
    if logits.rank() != 2 || logits.shape[0] != labels.len() {
        return Err(shape_err("cross_entropy", &logits.shape, &[labels.len()]));
    }
    let (b, c) = (logits.shape[0], logits.shape[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Argument(format!("label {bad} out of range for {c} classes")));
    }
    let probs = softmax_forward(logits, 1)?;
    let mut loss = T::zero();
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits.data[r * c..(r + 1) * c];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        loss += lse - row[label];
    }
    let loss = loss / T::of(b as f64);
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross_entropy"));
    }
    Ok((loss, probs.data))
}

pub(crate) fn cross_entropy_backward<T: Scalar>(probs: &[T], labels: &[usize], classes: usize, g: T) -> Vec<T> {
    let scale = g / T::of(labels.len() as f64);
    let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
    for (r, &label) in labels.iter().enumerate() {
        dx[r * classes + label] -= scale;
    }
    dx
}
