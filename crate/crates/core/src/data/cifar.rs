//! CIFAR-100 binary reader.
//!
//! Each record is 1 coarse-label byte, 1 fine-label byte and 3072 pixel bytes:
//! a 32×32 red plane, then green, then blue, each row-major.

use std::path::Path;

use super::{ClassTable, Dataset, LabeledImage};
use crate::error::{Error, Result};

pub const CIFAR_RECORD_LEN: usize = 3074;
pub const CIFAR_CLASSES: usize = 100;
const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.bin",
            Split::Test => "test.bin",
        }
    }
}

/// Reads `<root>/train.bin` or `<root>/test.bin`, keeping at most
/// `max_per_class` images per fine label in file order.
pub fn load_cifar100(root: &Path, split: Split, max_per_class: Option<usize>) -> Result<Dataset> {
    let path = root.join(split.file_name());
    let bytes = std::fs::read(&path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    let images = decode_records(&bytes, max_per_class)?;
    Ok(Dataset {
        images,
        classes: load_class_names(root)?,
        image_size: SIDE,
    })
}

/// `<root>/fine_label_names.txt`, one name per line; numbered names when absent.
pub fn load_class_names(root: &Path) -> Result<ClassTable> {
    let path = root.join("fine_label_names.txt");
    if !path.exists() {
        return ClassTable::new((0..CIFAR_CLASSES).map(|i| format!("class_{i:02}")).collect());
    }
    let text = std::fs::read_to_string(&path)?;
    let names: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    if names.len() != CIFAR_CLASSES {
        return Err(Error::Format(format!(
            "{} lists {} names, expected {CIFAR_CLASSES}",
            path.display(),
            names.len()
        )));
    }
    ClassTable::new(names)
}

pub(crate) fn decode_records(bytes: &[u8], max_per_class: Option<usize>) -> Result<Vec<LabeledImage>> {
    if bytes.len() % CIFAR_RECORD_LEN != 0 {
        return Err(Error::Format(format!(
            "file length {} is not a multiple of the {CIFAR_RECORD_LEN}-byte record size",
            bytes.len()
        )));
    }
    let cap = max_per_class.unwrap_or(usize::MAX);
    let mut counts = vec![0usize; CIFAR_CLASSES];
    let mut images = Vec::new();
    for (index, rec) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
        let fine = rec[1] as usize;
        if fine >= CIFAR_CLASSES {
            return Err(Error::CorruptRecord {
                index,
                reason: format!("fine label {fine} >= {CIFAR_CLASSES}"),
            });
        }
        if counts[fine] >= cap {
            continue;
        }
        counts[fine] += 1;
        let planes = &rec[2..];
        let mut pixels = Vec::with_capacity(3 * PLANE);
        for p in 0..PLANE {
            for c in 0..3 {
                pixels.push(planes[c * PLANE + p] as f32 / 255.0);
            }
        }
        images.push(LabeledImage {
            size: SIDE,
            pixels,
            label: fine,
        });
    }
    Ok(images)
}
