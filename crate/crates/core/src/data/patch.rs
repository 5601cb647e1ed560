//! Splitting images into flattened patches.
//!
//! Patches are taken row-major over the patch grid. Inside a patch, pixels are
//! row-major with the three channels innermost, so element
//! `(py · ps + px) · 3 + ch` of a patch vector is pixel `(py, px)`, channel `ch`.

use super::LabeledImage;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// CLS token followed by `P` patch embeddings: a `(1 + P) × d` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence<T> {
    pub tokens: Tensor<T>,
}

impl<T: Scalar> PatchSequence<T> {
    pub fn num_patches(&self) -> usize {
        self.tokens.shape()[0] - 1
    }
}

/// Flattened patches of `img` as a `P × (3·ps²)` buffer.
pub fn extract_patches<T: Scalar>(img: &LabeledImage, patch_size: usize) -> Result<Vec<T>> {
    let s = img.size;
    if patch_size == 0 || s % patch_size != 0 {
        return Err(Error::Config(format!(
            "image size {s} is not divisible by patch size {patch_size}"
        )));
    }
    let grid = s / patch_size;
    let mut out = Vec::with_capacity(s * s * 3);
    for gy in 0..grid {
        for gx in 0..grid {
            for py in 0..patch_size {
                for px in 0..patch_size {
                    let (y, x) = (gy * patch_size + py, gx * patch_size + px);
                    for ch in 0..3 {
                        out.push(T::of(img.pixel(y, x, ch) as f64));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Embeds non-overlapping patches with `embed[d × 3ps²]`, prepends `cls`, and
/// adds `pos[(1+P) × d]`.
pub fn patchify<T: Scalar>(
    img: &LabeledImage,
    patch_size: usize,
    embed: &Tensor<T>,
    cls: &Tensor<T>,
    pos: &Tensor<T>,
) -> Result<PatchSequence<T>> {
    let flat = extract_patches::<T>(img, patch_size)?;
    let feat = 3 * patch_size * patch_size;
    let p = flat.len() / feat;
    let d = cls.numel();
    if embed.shape() != [d, feat] {
        return Err(Error::Config(format!(
            "patch embedding has shape {:?}, expected [{d}, {feat}]",
            embed.shape()
        )));
    }
    if pos.shape() != [1 + p, d] {
        return Err(Error::Config(format!(
            "positional embedding has shape {:?}, expected [{}, {d}]",
            pos.shape(),
            1 + p
        )));
    }
    let patches = Tensor::new(&[p, feat], flat)?;
    let embedded = patches.matmul(&embed.transpose(0, 1)?)?;
    let mut tokens = Vec::with_capacity((1 + p) * d);
    tokens.extend_from_slice(cls.data());
    tokens.extend_from_slice(embedded.data());
    let tokens = Tensor::new(&[1 + p, d], tokens)?.add(pos)?;
    Ok(PatchSequence { tokens })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(size: usize, f: impl Fn(usize, usize, usize) -> f32) -> LabeledImage {
        let mut pixels = Vec::new();
        for y in 0..size {
            for x in 0..size {
                for c in 0..3 {
                    pixels.push(f(y, x, c));
                }
            }
        }
        LabeledImage { size, pixels, label: 0 }
    }

    #[test]
    fn token_count() {
        let img = image(8, |_, _, _| 0.5);
        let d = 5;
        let embed = Tensor::<f32>::ones(&[d, 48]).unwrap();
        let cls = Tensor::<f32>::zeros(&[d]).unwrap();
        let pos = Tensor::<f32>::zeros(&[5, d]).unwrap();
        let seq = patchify(&img, 4, &embed, &cls, &pos).unwrap();
        assert_eq!(seq.num_patches(), 4);
        assert_eq!(seq.tokens.shape(), &[5, d]);
    }

    #[test]
    fn zero_image_zero_tokens() {
        let img = image(8, |_, _, _| 0.0);
        let embed = Tensor::<f32>::from_fn(&[3, 48], |i| i as f32).unwrap();
        let cls = Tensor::<f32>::zeros(&[3]).unwrap();
        let pos = Tensor::<f32>::zeros(&[5, 3]).unwrap();
        let seq = patchify(&img, 4, &embed, &cls, &pos).unwrap();
        assert!(seq.tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_embed_reproduces_flattening() {
        // Single 2×2 patch; identity embedding exposes the flattening order.
        let img = image(2, |y, x, c| (100 * y + 10 * x + c) as f32 / 1000.0);
        let embed = Tensor::<f64>::identity(12).unwrap();
        let cls = Tensor::<f64>::zeros(&[12]).unwrap();
        let pos = Tensor::<f64>::zeros(&[2, 12]).unwrap();
        let seq = patchify(&img, 2, &embed, &cls, &pos).unwrap();
        let want = [0, 1, 2, 10, 11, 12, 100, 101, 102, 110, 111, 112];
        for (j, w) in want.iter().enumerate() {
            assert!((seq.tokens.at(&[1, j]) - *w as f64 / 1000.0).abs() < 1e-7);
        }
    }

    #[test]
    fn patch_grid_is_row_major() {
        let img = image(4, |y, x, _| (y * 4 + x) as f32);
        let flat = extract_patches::<f32>(&img, 2).unwrap();
        // patch 1 is the top-right block; its first pixel is (0, 2)
        assert_eq!(flat[12], 2.0);
        // patch 2 is bottom-left; its first pixel is (2, 0)
        assert_eq!(flat[24], 8.0);
    }

    #[test]
    fn indivisible_size_is_config_error() {
        let img = image(6, |_, _, _| 0.0);
        assert!(matches!(extract_patches::<f32>(&img, 4), Err(Error::Config(_))));
    }
}
