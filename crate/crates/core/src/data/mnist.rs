//! IDX binary files (the MNIST distribution format).

use std::path::Path;

use super::Dataset;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw contents of an image file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MnistSplit {
    Train,
    Test,
}

impl MnistSplit {
    fn files(self) -> (&'static str, &'static str) {
        match self {
            MnistSplit::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            MnistSplit::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("file ends inside the header field at byte {offset}"),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = be_u32(bytes, 0)?;
    if magic != expected {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic 0x{magic:08x}, expected 0x{expected:08x}"),
        });
    }
    Ok(())
}

fn check_payload(bytes: &[u8], header: usize, expected: usize) -> Result<()> {
    let have = bytes.len() - header;
    if have < expected {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("truncated payload: header promises {expected} bytes, found {have}"),
        });
    }
    if have > expected {
        return Err(Error::Format {
            offset: (header + expected) as u64,
            msg: format!("{} trailing bytes after the payload", have - expected),
        });
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if count == 0 || rows == 0 || cols == 0 {
        return Err(Error::Format {
            offset: 4,
            msg: format!("empty dimensions {count}x{rows}x{cols}"),
        });
    }
    check_payload(bytes, 16, count * rows * cols)?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    check_payload(bytes, 8, count)?;
    Ok(bytes[8..].to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Builds a dataset with pixels scaled to `[0, 1]`.
pub fn dataset_from_idx(images: &IdxImages, labels: &[u8], name: &str) -> Result<Dataset> {
    if labels.len() != images.count {
        return Err(Error::Data(format!(
            "{} images but {} labels",
            images.count,
            labels.len()
        )));
    }
    let data = images.pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    Dataset::new(
        Tensor::new(vec![images.count, 1, images.rows, images.cols], data)?,
        labels.iter().map(|&l| l as usize).collect(),
        name,
    )
}

/// Inverse of [`dataset_from_idx`] for round-trip checks.
pub fn dataset_to_idx(ds: &Dataset) -> (IdxImages, Vec<u8>) {
    let s = ds.images.shape();
    let pixels = ds
        .images
        .data()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    (
        IdxImages {
            count: s[0],
            rows: s[2],
            cols: s[3],
            pixels,
        },
        ds.labels.iter().map(|&l| l as u8).collect(),
    )
}

pub fn load_mnist_files(images: &Path, labels: &Path, name: &str) -> Result<Dataset> {
    let read = |p: &Path| {
        std::fs::read(p).map_err(|e| Error::Data(format!("cannot read {}: {e}", p.display())))
    };
    let imgs = parse_idx_images(&read(images)?)?;
    let labs = parse_idx_labels(&read(labels)?)?;
    dataset_from_idx(&imgs, &labs, name)
}

/// Loads one split from a directory holding the four standard files.
pub fn load_mnist(dir: &Path, split: MnistSplit) -> Result<Dataset> {
    let (images, labels) = split.files();
    let name = match split {
        MnistSplit::Train => "mnist-train",
        MnistSplit::Test => "mnist-test",
    };
    load_mnist_files(&dir.join(images), &dir.join(labels), name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Vec<u8> {
        encode_idx_images(&IdxImages {
            count: 2,
            rows: 2,
            cols: 3,
            pixels: vec![0, 255, 128, 1, 2, 3, 4, 5, 6, 7, 8, 9],
        })
    }

    #[test]
    fn parses_and_round_trips() {
        let bytes = tiny();
        let imgs = parse_idx_images(&bytes).unwrap();
        assert_eq!((imgs.count, imgs.rows, imgs.cols), (2, 2, 3));
        assert_eq!(encode_idx_images(&imgs), bytes);
        let labels = encode_idx_labels(&[3, 9]);
        let ds = dataset_from_idx(&imgs, &parse_idx_labels(&labels).unwrap(), "t").unwrap();
        assert_eq!(ds.images.data()[1], 1.0);
        let (back, back_labels) = dataset_to_idx(&ds);
        assert_eq!(encode_idx_images(&back), bytes);
        assert_eq!(encode_idx_labels(&back_labels), labels);
    }

    #[test]
    fn format_errors() {
        let bytes = tiny();
        match parse_idx_images(&bytes[..bytes.len() - 1]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, bytes.len() as u64 - 1),
            other => panic!("unexpected {other:?}"),
        }
        let mut bad = bytes.clone();
        bad[3] = 0x01;
        assert!(matches!(parse_idx_images(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(parse_idx_images(&bytes[..6]), Err(Error::Format { .. })));
        assert!(matches!(parse_idx_labels(&bytes), Err(Error::Format { offset: 0, .. })));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(parse_idx_images(&long), Err(Error::Format { offset: 28, .. })));
    }
}
