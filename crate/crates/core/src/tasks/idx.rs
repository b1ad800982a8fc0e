//! IDX (MNIST-style) binary arrays.
//!
//! Header: two zero bytes, a type code, the number of dimensions, then one
//! big-endian `u32` per dimension. Payload values are big-endian.

use std::fs;
use std::path::Path;

use super::{Dataset, Targets};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const TYPE_U8: u8 = 0x08;
const TYPE_F32: u8 = 0x0D;
const TYPE_F64: u8 = 0x0E;

#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    U8(Vec<u8>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: IdxData,
}

fn fmt_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        detail: detail.into(),
    }
}

pub fn read_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(fmt_err(bytes.len(), "truncated header"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(fmt_err(0, "bad magic: leading bytes must be zero"));
    }
    let (ty, rank) = (bytes[2], bytes[3] as usize);
    let width = match ty {
        TYPE_U8 => 1,
        TYPE_F32 => 4,
        TYPE_F64 => 8,
        other => return Err(fmt_err(2, format!("unsupported element type 0x{other:02x}"))),
    };
    if rank == 0 {
        return Err(fmt_err(3, "zero dimensions"));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(fmt_err(bytes.len(), "truncated dimension list"));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let count = dims.iter().product::<usize>();
    let need = header + count * width;
    if bytes.len() < need {
        return Err(fmt_err(
            bytes.len(),
            format!("truncated payload: expected {need} bytes"),
        ));
    }
    if bytes.len() > need {
        return Err(fmt_err(need, "trailing bytes after payload"));
    }
    let body = &bytes[header..];
    let data = match ty {
        TYPE_U8 => IdxData::U8(body.to_vec()),
        TYPE_F32 => IdxData::F32(
            body.chunks_exact(4)
                .map(|c| f32::from_be_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        ),
        _ => IdxData::F64(
            body.chunks_exact(8)
                .map(|c| f64::from_be_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        ),
    };
    Ok(IdxArray { dims, data })
}

pub fn write_idx(arr: &IdxArray) -> Vec<u8> {
    let ty = match arr.data {
        IdxData::U8(_) => TYPE_U8,
        IdxData::F32(_) => TYPE_F32,
        IdxData::F64(_) => TYPE_F64,
    };
    let mut out = vec![0, 0, ty, arr.dims.len() as u8];
    for d in &arr.dims {
        out.extend((*d as u32).to_be_bytes());
    }
    match &arr.data {
        IdxData::U8(v) => out.extend(v),
        IdxData::F32(v) => v.iter().for_each(|x| out.extend(x.to_be_bytes())),
        IdxData::F64(v) => v.iter().for_each(|x| out.extend(x.to_be_bytes())),
    }
    out
}

pub fn write_idx_file(path: &Path, arr: &IdxArray) -> Result<()> {
    fs::write(path, write_idx(arr))?;
    Ok(())
}

impl IdxArray {
    /// Values as floats; bytes are scaled into `[0, 1]`.
    fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            IdxData::U8(v) => v.iter().map(|&b| f64::from(b) / 255.0).collect(),
            IdxData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            IdxData::F64(v) => v.clone(),
        }
    }

    /// Exports a dataset as an `f64` input array and a label array (`u8` for
    /// classes, `f64` for regression targets).
    pub fn from_dataset(d: &Dataset) -> Result<(IdxArray, IdxArray)> {
        let inputs = IdxArray {
            dims: d.inputs().shape().to_vec(),
            data: IdxData::F64(d.inputs().data().to_vec()),
        };
        let labels = match d.targets() {
            Targets::Classes(c) => IdxArray {
                dims: vec![c.len()],
                data: IdxData::U8(
                    c.iter()
                        .map(|&y| u8::try_from(y).map_err(|_| Error::Task(format!("label {y} does not fit a byte"))))
                        .collect::<Result<_>>()?,
                ),
            },
            Targets::Values(t) => IdxArray {
                dims: t.shape().to_vec(),
                data: IdxData::F64(t.data().to_vec()),
            },
        };
        Ok((inputs, labels))
    }
}

/// Loads an image (or feature) file and its label file.
///
/// 3-D image arrays become `N×1×H×W`; byte pixels are scaled into `[0, 1]`.
/// A 1-D byte label array yields class labels, a float array regression targets.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = read_idx(&fs::read(images)?)?;
    let lab = read_idx(&fs::read(labels)?)?;
    let n = img.dims[0];
    let mut shape = img.dims.clone();
    if shape.len() == 3 {
        shape.insert(1, 1);
    }
    if shape.len() == 1 {
        shape.push(1);
    }
    let inputs = Tensor::new(shape, img.to_f64()).map_err(|e| fmt_err(0, e.to_string()))?;
    let targets = match (&lab.data, lab.dims.len()) {
        (IdxData::U8(v), 1) => Targets::Classes(v.iter().map(|&b| usize::from(b)).collect()),
        (IdxData::U8(_), _) => return Err(fmt_err(3, "byte labels must be one-dimensional")),
        _ => {
            let mut dims = lab.dims.clone();
            if dims.len() == 1 {
                dims.push(1);
            }
            Targets::Values(Tensor::new(dims, lab.to_f64()).map_err(|e| fmt_err(0, e.to_string()))?)
        }
    };
    if targets.len() != n {
        return Err(Error::Format {
            offset: 4,
            detail: format!("{n} images but {} labels", targets.len()),
        });
    }
    Dataset::new(inputs, targets)
}
