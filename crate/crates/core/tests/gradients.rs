use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitsteer_core::autograd::{Tape, Var};
use vitsteer_core::gradcheck::{grad_check, grad_check_coords};
use vitsteer_core::tensor::Tensor;
use vitsteer_core::Result;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const TOL: f64 = 1e-4;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng).unwrap()
}

/// Contracts `y` with a fixed random tensor so every output coordinate
/// contributes to the scalar.
fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = t.constant(randn(t.value(y).shape(), seed ^ 0xabc));
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn check<F>(name: &str, shape: &[usize], f: F)
where
    F: Fn(&mut Tape<f64>, Var, u64) -> Result<Var>,
{
    for seed in SEEDS {
        let x = randn(shape, seed);
        let r = grad_check(|t, v| f(t, v, seed), &x, 1e-5).unwrap();
        assert!(r.max_rel_error < TOL, "{name} seed {seed}: {r:?}");
    }
}

#[test]
fn matmul_both_sides() {
    check("matmul lhs", &[3, 4], |t, x, s| {
        let b = t.constant(randn(&[4, 5], s + 10));
        let y = t.matmul(x, b)?;
        project(t, y, s)
    });
    check("matmul rhs", &[4, 5], |t, x, s| {
        let a = t.constant(randn(&[3, 4], s + 10));
        let y = t.matmul(a, x)?;
        project(t, y, s)
    });
    check("batched matmul", &[2, 3, 4], |t, x, s| {
        let b = t.constant(randn(&[2, 4, 2], s + 10));
        let y = t.matmul(x, b)?;
        project(t, y, s)
    });
    check("shared rhs", &[4, 2], |t, x, s| {
        let a = t.constant(randn(&[2, 3, 4], s + 10));
        let y = t.matmul(a, x)?;
        project(t, y, s)
    });
}

#[test]
fn broadcasting_add_and_mul() {
    check("add", &[3, 4], |t, x, s| {
        let b = t.constant(randn(&[4], s + 1));
        let y = t.add(x, b)?;
        let y = t.mul(y, y)?;
        project(t, y, s)
    });
    check("add broadcast operand", &[4], |t, x, s| {
        let a = t.constant(randn(&[2, 3, 4], s + 1));
        let y = t.add(a, x)?;
        let y = t.mul(y, y)?;
        project(t, y, s)
    });
    check("mul broadcast operand", &[3, 1], |t, x, s| {
        let a = t.constant(randn(&[3, 5], s + 1));
        let y = t.mul(a, x)?;
        project(t, y, s)
    });
}

#[test]
fn scale_transpose_reshape() {
    check("scale", &[5], |t, x, s| {
        let y = t.scale(x, -2.5)?;
        let y = t.mul(y, x)?;
        project(t, y, s)
    });
    check("transpose", &[2, 3, 4], |t, x, s| {
        let y = t.transpose(x, 0, 2)?;
        let w = t.constant(randn(&[4, 3, 2], s));
        let y = t.mul(y, w)?;
        let y = t.mul(y, y)?;
        t.sum(y)
    });
    check("reshape", &[2, 6], |t, x, s| {
        let y = t.reshape(x, &[3, 4])?;
        let b = t.constant(randn(&[4, 2], s + 3));
        let y = t.matmul(y, b)?;
        project(t, y, s)
    });
}

#[test]
fn concat_and_slice() {
    check("concat", &[2, 3], |t, x, s| {
        let other = t.constant(randn(&[2, 2], s + 5));
        let y = t.concat(&[x, other, x], 1)?;
        let y = t.mul(y, y)?;
        project(t, y, s)
    });
    check("slice", &[4, 3], |t, x, s| {
        let y = t.slice(x, 0, 1, 2)?;
        let y = t.mul(y, y)?;
        project(t, y, s)
    });
}

#[test]
fn softmax_each_axis() {
    for axis in 0..3 {
        check("softmax", &[3, 4, 2], move |t, x, s| {
            let y = t.softmax(x, axis)?;
            project(t, y, s)
        });
    }
    check("sigmoid", &[6], |t, x, s| {
        let y = t.sigmoid(x)?;
        project(t, y, s)
    });
}

#[test]
fn layer_norm_all_inputs() {
    check("layer_norm x", &[3, 8], |t, x, s| {
        let g = t.constant(randn(&[8], s + 1));
        let b = t.constant(randn(&[8], s + 2));
        let y = t.layer_norm(x, g, b, 1e-5)?;
        project(t, y, s)
    });
    check("layer_norm gain", &[8], |t, g, s| {
        let x = t.constant(randn(&[3, 8], s + 1));
        let b = t.constant(randn(&[8], s + 2));
        let y = t.layer_norm(x, g, b, 1e-5)?;
        project(t, y, s)
    });
    check("layer_norm bias", &[8], |t, b, s| {
        let x = t.constant(randn(&[3, 8], s + 1));
        let g = t.constant(randn(&[8], s + 2));
        let y = t.layer_norm(x, g, b, 1e-5)?;
        let y = t.mul(y, y)?;
        project(t, y, s)
    });
}

#[test]
fn gelu_and_reductions() {
    check("gelu", &[10], |t, x, s| {
        let y = t.gelu(x)?;
        project(t, y, s)
    });
    check("mean", &[3, 3], |t, x, _| {
        let y = t.mul(x, x)?;
        t.mean(y)
    });
    check("sum_axis", &[3, 4], |t, x, s| {
        let y = t.sum_axis(x, 1)?;
        let y = t.mul(y, y)?;
        project(t, y, s)
    });
}

#[test]
fn cross_entropy_logits() {
    check("cross_entropy", &[4, 5], |t, x, s| {
        let labels: Vec<usize> = (0..4).map(|i| (i + s as usize) % 5).collect();
        t.cross_entropy(x, &labels)
    });
}

#[test]
fn two_layer_mlp_with_cross_entropy() {
    // 4 samples, 3 features, 5 hidden units, 3 classes. Checked at h = 1e-3.
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng).unwrap();
        let w2 = Tensor::<f64>::randn(&[5, 3], 0.5, &mut rng).unwrap();
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        let w1 = Tensor::<f64>::randn(&[3, 5], 0.5, &mut rng).unwrap();
        let f = |t: &mut Tape<f64>, w1: Var| {
            let x = t.constant(inputs.clone());
            let w2 = t.constant(w2.clone());
            let h = t.matmul(x, w1)?;
            let h = t.gelu(h)?;
            let logits = t.matmul(h, w2)?;
            t.cross_entropy(logits, &labels)
        };
        let r = grad_check(f, &w1, 1e-3).unwrap();
        assert!(r.max_rel_error < TOL, "seed {seed}: {r:?}");
    }
}

#[test]
fn sampled_coordinates_only() {
    let x = randn(&[50], 9);
    let r = grad_check_coords(|t, v| t.sum(v), &x, 1e-3, &[3, 17, 42]).unwrap();
    assert!([3, 17, 42].contains(&r.worst_index));
}

#[test]
fn fan_out_accumulates() {
    let x = randn(&[6], 11);
    let f = |t: &mut Tape<f64>, v: Var| {
        let y = t.gelu(v)?;
        t.sum(y)
    };
    let single = {
        let mut t = Tape::new();
        let v = t.param(x.clone());
        let l = f(&mut t, v).unwrap();
        t.backward(l).unwrap().take(v).unwrap()
    };
    let double = {
        let mut t = Tape::new();
        let v = t.param(x.clone());
        let a = f(&mut t, v).unwrap();
        let b = f(&mut t, v).unwrap();
        let l = t.add(a, b).unwrap();
        t.backward(l).unwrap().take(v).unwrap()
    };
    for (s, d) in single.data().iter().zip(double.data()) {
        assert_eq!(2.0 * s, *d);
    }
}
