//! Labelled images, class tables and the ViT patch front end.

mod cifar;
mod patch;
mod synthetic;

pub use cifar::{load_cifar100, load_class_names, Split, CIFAR_CLASSES, CIFAR_RECORD_LEN};
pub use patch::{extract_patches, patchify, PatchSequence};
pub use synthetic::{gen_synthetic, SYNTHETIC_NOISE};

use crate::error::{Error, Result};

/// An `H×W×3` image with values in `[0, 1]`, stored channel-last row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub size: usize,
    pub pixels: Vec<f32>,
    pub label: usize,
}

impl LabeledImage {
    pub fn pixel(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.pixels[(row * self.size + col) * 3 + channel]
    }
}

/// Ordered class names; the index is the label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassTable {
    names: Vec<String>,
}

impl ClassTable {
    pub fn new(names: Vec<String>) -> Result<Self> {
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Argument(format!("duplicate class name {n:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Images sharing one class table and image size.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<LabeledImage>,
    pub classes: ClassTable,
    pub image_size: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.images.iter().map(|i| i.label).collect()
    }

    /// Images of one class, in dataset order, at most `cap` of them.
    pub fn class_subset(&self, class: usize, cap: Option<usize>) -> Vec<&LabeledImage> {
        self.images
            .iter()
            .filter(|i| i.label == class)
            .take(cap.unwrap_or(usize::MAX))
            .collect()
    }

    /// Keeps at most `cap` images per class, preserving order.
    pub fn cap_per_class(&self, cap: usize) -> Dataset {
        let mut seen = vec![0usize; self.classes.len()];
        let images = self
            .images
            .iter()
            .filter(|img| {
                seen[img.label] += 1;
                seen[img.label] <= cap
            })
            .cloned()
            .collect();
        Dataset {
            images,
            classes: self.classes.clone(),
            image_size: self.image_size,
        }
    }

    /// Order-sensitive FNV-1a digest of labels and pixel bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        };
        for img in &self.images {
            eat(&(img.label as u64).to_le_bytes());
            for p in &img.pixels {
                eat(&p.to_bits().to_le_bytes());
            }
        }
        h
    }
}
