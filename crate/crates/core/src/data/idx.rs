//! The IDX byte format used by the MNIST distribution.
//!
//! Header: two zero bytes, a type byte (0x08 = unsigned byte), a dimension
//! count, then one big-endian `u32` per dimension. Images are `0x00000803`
//! (count, rows, cols) and labels `0x00000801` (count).

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::Data("IDX file shorter than its magic".into()));
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if magic != IMAGES_MAGIC && magic != LABELS_MAGIC {
        return Err(Error::Data(format!("unsupported IDX magic {magic:#010x}")));
    }
    let ndim = (magic & 0xff) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Data("truncated IDX header".into()));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let count: usize = dims.iter().product();
    if bytes.len() != header + count {
        return Err(Error::Data(format!(
            "IDX body has {} bytes, dims {dims:?} need {count}",
            bytes.len() - header
        )));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn encode_idx(dims: &[usize], data: &[u8]) -> Result<Vec<u8>> {
    let magic = match dims.len() {
        1 => LABELS_MAGIC,
        3 => IMAGES_MAGIC,
        n => return Err(Error::Data(format!("IDX writer supports 1 or 3 dims, got {n}"))),
    };
    if dims.iter().product::<usize>() != data.len() {
        return Err(Error::Data("IDX dims do not match data length".into()));
    }
    let mut out = magic.to_be_bytes().to_vec();
    for &d in dims {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    Ok(out)
}

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";

/// Digits below 5 form the positive class.
pub const MNIST_POSITIVE_BELOW: u8 = 5;

/// Loads up to `limit` MNIST training digits as `[0, 1]` pixel features with
/// a binary label (`digit < 5`). Pixels are not z-scored.
pub fn load_mnist(dir: &Path, limit: Option<usize>) -> Result<Dataset> {
    let read = |name: &str| {
        std::fs::read(dir.join(name)).map_err(|e| {
            Error::Data(format!(
                "cannot read {}: {e}; download the four MNIST IDX files \
                 (http://yann.lecun.com/exdb/mnist/), gunzip them into this directory, \
                 or generate a stand-in with `p2n2 synth digits`",
                dir.join(name).display()
            ))
        })
    };
    let images = parse_idx(&read(TRAIN_IMAGES)?)?;
    let labels = parse_idx(&read(TRAIN_LABELS)?)?;
    if images.dims.len() != 3 || labels.dims.len() != 1 || images.dims[0] != labels.dims[0] {
        return Err(Error::Data(format!(
            "image dims {:?} do not match label dims {:?}",
            images.dims, labels.dims
        )));
    }
    let n = limit.map_or(images.dims[0], |l| l.min(images.dims[0]));
    let d = images.dims[1] * images.dims[2];
    let features = Tensor::from_vec(n, d, images.data[..n * d].iter().map(|&p| p as f64 / 255.0).collect())?;
    let y = labels.data[..n]
        .iter()
        .map(|&l| if l < MNIST_POSITIVE_BELOW { 1.0 } else { 0.0 })
        .collect();
    let names = (0..d).map(|i| format!("px{i}")).collect();
    Dataset::new(features, y, names, vec![false; d])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_guards() {
        let bytes = encode_idx(&[2, 2, 3], &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 255]).unwrap();
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        let a = parse_idx(&bytes).unwrap();
        assert_eq!(a.dims, [2, 2, 3]);
        assert_eq!(a.data[11], 255);
        assert!(parse_idx(&bytes[..bytes.len() - 1]).is_err());
        assert!(parse_idx(&[0, 0, 9, 1, 0, 0, 0, 0]).is_err());
    }
}
