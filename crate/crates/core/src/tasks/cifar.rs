//! CIFAR binary batches: one label byte (two for CIFAR-100: coarse, fine)
//! followed by 3072 channel-major pixel bytes per record.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Targets};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PIXELS: usize = 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarVariant {
    Cifar10,
    /// Uses the fine label.
    Cifar100,
}

impl CifarVariant {
    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }
}

pub fn parse_cifar(bytes: &[u8], variant: CifarVariant) -> Result<Dataset> {
    let record = variant.label_bytes() + PIXELS;
    if bytes.is_empty() || !bytes.len().is_multiple_of(record) {
        return Err(Error::Format {
            offset: (bytes.len() - bytes.len() % record) as u64,
            detail: format!(
                "size {} is not a positive multiple of the {record}-byte record",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / record;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * PIXELS);
    for rec in bytes.chunks_exact(record) {
        labels.push(usize::from(rec[variant.label_bytes() - 1]));
        pixels.extend(rec[variant.label_bytes()..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], pixels)?, Targets::Classes(labels))
}

pub fn load_cifar_bin(path: &Path, variant: CifarVariant) -> Result<Dataset> {
    parse_cifar(&fs::read(path)?, variant)
}
