//! Central-difference gradient verification.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Relative error floor used in the denominator.
const FLOOR: f64 = 1e-8;

/// Worst coordinate of a gradient check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Checks every coordinate of `x`. See [`grad_check_coords`].
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, h, &coords)
}

/// Compares the tape gradient of the scalar `f(x)` against
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` on the listed coordinates, returning the
/// maximum of `|analytic − numeric| / (|analytic| + |numeric| + 1e-8)`.
pub fn grad_check_coords<T, F>(f: F, x: &Tensor<T>, h: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Argument(format!("step h must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&mut tape, xv)?;
    check_scalar(&tape, loss)?;
    let grads = tape.backward(loss)?;
    let zeros;
    let analytic = match grads.get(xv) {
        Some(g) => g,
        None => {
            zeros = Tensor::zeros(x.shape())?;
            &zeros
        }
    };

    let eval = |point: Tensor<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.param(point);
        let out = f(&mut tape, v)?;
        check_scalar(&tape, out)
    };

    let mut worst: Option<GradCheckReport> = None;
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += T::of(h);
        let mut minus = x.clone();
        minus.data_mut()[i] -= T::of(h);
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i].as_f64();
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + FLOOR);
        if worst.is_none_or(|w| rel > w.max_rel_error) {
            worst = Some(GradCheckReport {
                max_rel_error: rel,
                worst_index: i,
                analytic: a,
                numeric,
            });
        }
    }
    worst.ok_or_else(|| Error::Argument("grad_check needs at least one coordinate".into()))
}

fn check_scalar<T: Scalar>(tape: &Tape<T>, v: Var) -> Result<f64> {
    let value = tape.value(v);
    if value.numel() != 1 {
        return Err(Error::Argument(format!("grad_check needs a scalar function, got shape {:?}", value.shape())));
    }
    let s = value.data()[0].as_f64();
    if !s.is_finite() {
        return Err(Error::NonFinite("grad_check evaluation"));
    }
    Ok(s)
}
