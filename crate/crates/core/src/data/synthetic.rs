//! Deterministic synthetic image classes.
//!
//! Class `c` of `C` is an oriented sinusoidal grating with its own spatial
//! frequency, orientation and colour, plus Gaussian pixel noise:
//!
//! ```text
//! pixel(y, x, ch) = clamp(0.15 + 0.7 · colour_c[ch] · (0.5 + 0.5 · sin(φ)) + ε, 0, 1)
//! φ = 2π · f_c · (x cos θ_c + y sin θ_c) / size
//! f_c = 1 + 3c / C,  θ_c = πc / C,  colour_c = hsv(c / C, 0.8, 1),  ε ~ N(0, 0.1²)
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ClassTable, Dataset, LabeledImage};
use crate::error::{Error, Result};

/// Standard deviation of the per-pixel noise.
pub const SYNTHETIC_NOISE: f64 = 0.1;

/// `per_class` images for each of `num_classes` classes, interleaved by class.
/// The same seed yields a bitwise-identical dataset.
pub fn gen_synthetic(num_classes: usize, per_class: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::Argument(format!("need at least 2 classes, got {num_classes}")));
    }
    if image_size == 0 {
        return Err(Error::Argument("image size must be positive".into()));
    }
    let classes = ClassTable::new((0..num_classes).map(|c| format!("pattern_{c}")).collect())?;
    let templates: Vec<Vec<f32>> = (0..num_classes)
        .map(|c| template(c, num_classes, image_size))
        .collect();
    let noise = Normal::new(0.0, SYNTHETIC_NOISE).expect("valid sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(num_classes * per_class);
    for _ in 0..per_class {
        for (label, tpl) in templates.iter().enumerate() {
            let pixels = tpl
                .iter()
                .map(|&v| (v as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32)
                .collect();
            images.push(LabeledImage {
                size: image_size,
                pixels,
                label,
            });
        }
    }
    Ok(Dataset {
        images,
        classes,
        image_size,
    })
}

/// Noise-free pattern of class `c`.
fn template(c: usize, num_classes: usize, size: usize) -> Vec<f32> {
    let frac = c as f64 / num_classes as f64;
    let freq = 1.0 + 3.0 * frac;
    let theta = std::f64::consts::PI * frac;
    let colour = hsv(frac, 0.8, 1.0);
    let mut px = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let phase = 2.0 * std::f64::consts::PI * freq * (x as f64 * theta.cos() + y as f64 * theta.sin()) / size as f64;
            let wave = 0.5 + 0.5 * phase.sin();
            for ch in colour {
                px.push((0.15 + 0.7 * ch * wave) as f32);
            }
        }
    }
    px
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() * 6.0).rem_euclid(6.0);
    let sector = h6.floor() as usize;
    let f = h6 - sector as f64;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}
