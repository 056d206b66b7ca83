//! IDX image/label files (big-endian header, raw `u8` payload).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::zoo::model::{InputShape, Normalization};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Classes assumed when labels are read from IDX files.
pub const DEFAULT_CLASSES: usize = 10;

/// Grayscale images with integer labels, immutable once loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<u8>,
    labels: Vec<u8>,
    rows: usize,
    cols: usize,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<u8>, labels: Vec<u8>, rows: usize, cols: usize, classes: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Format("image extents must be positive".into()));
        }
        if images.len() != labels.len() * rows * cols {
            return Err(Error::Format(format!(
                "{} labels but {} bytes of {rows}x{cols} images",
                labels.len(),
                images.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Format(format!("label {l} outside {classes} classes")));
        }
        Ok(Self { images, labels, rows, cols, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.images[i * n..(i + 1) * n]
    }

    pub fn input_shape(&self) -> InputShape {
        InputShape { channels: 1, height: self.rows, width: self.cols }
    }

    /// Pixel mean and standard deviation on the `[0, 1]` scale.
    pub fn pixel_statistics(&self) -> Normalization {
        let n = self.images.len().max(1) as f64;
        let mean = self.images.iter().map(|&p| p as f64 / 255.0).sum::<f64>() / n;
        let var = self.images.iter().map(|&p| (p as f64 / 255.0 - mean).powi(2)).sum::<f64>() / n;
        Normalization { mean, std: if var > 0.0 { var.sqrt() } else { 1.0 } }
    }

    /// Normalized `B × (rows·cols)` batch of the given samples.
    pub fn batch(&self, indices: &[usize], norm: Normalization) -> Tensor {
        let n = self.rows * self.cols;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&p| (p as f64 / 255.0 - norm.mean) / norm.std));
        }
        Tensor::from_parts(vec![indices.len(), n], data)
    }

    /// The first `n` samples (all of them if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        self.subset(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.rows * self.cols);
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            rows: self.rows,
            cols: self.cols,
            classes: self.classes,
        }
    }

    pub fn images_bytes(&self) -> &[u8] {
        &self.images
    }
}

fn read_be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Parses an image file: magic, count, rows, cols, then `count·rows·cols` bytes.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!("bad IDX image magic {magic:#010x}")));
    }
    let count = read_be_u32(bytes, 4)? as usize;
    let rows = read_be_u32(bytes, 8)? as usize;
    let cols = read_be_u32(bytes, 12)? as usize;
    let payload = &bytes[16..];
    let expected = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Format("IDX extent overflow".into()))?;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "IDX image payload has {} bytes, header promises {expected}",
            payload.len()
        )));
    }
    Ok((count, rows, cols, payload.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!("bad IDX label magic {magic:#010x}")));
    }
    let count = read_be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(Error::Format(format!(
            "IDX label payload has {} bytes, header promises {count}",
            payload.len()
        )));
    }
    Ok(payload.to_vec())
}

pub fn load_idx_dataset(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (count, rows, cols, images) = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if labels.len() != count {
        return Err(Error::Format(format!(
            "{count} images but {} labels",
            labels.len()
        )));
    }
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0).max(DEFAULT_CLASSES);
    Dataset::new(images, labels, rows, cols, classes)
}

pub fn encode_idx_images(data: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + data.images.len());
    for v in [IMAGES_MAGIC, data.len() as u32, data.rows as u32, data.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&data.images);
    out
}

pub fn encode_idx_labels(data: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + data.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(data.len() as u32).to_be_bytes());
    out.extend_from_slice(&data.labels);
    out
}

pub fn save_idx_dataset(data: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    fs::write(images_path, encode_idx_images(data))?;
    fs::write(labels_path, encode_idx_labels(data))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        Dataset::new((0..24).collect(), vec![0, 3, 9], 2, 4, 10).unwrap()
    }

    #[test]
    fn header_fields_by_hand() {
        let bytes = encode_idx_images(&tiny());
        assert_eq!(&bytes[..16], &[0, 0, 8, 3, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0, 4]);
        let labels = encode_idx_labels(&tiny());
        assert_eq!(&labels[..8], &[0, 0, 8, 1, 0, 0, 0, 3]);
        assert_eq!(parse_idx_labels(&labels).unwrap(), vec![0, 3, 9]);
    }

    #[test]
    fn ten_labels() {
        let mut bytes = vec![0, 0, 8, 1, 0, 0, 0, 10];
        bytes.extend(0..10u8);
        assert_eq!(parse_idx_labels(&bytes).unwrap().len(), 10);
    }

    #[test]
    fn round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        save_idx_dataset(&tiny(), &ip, &lp).unwrap();
        assert_eq!(load_idx_dataset(&ip, &lp).unwrap(), tiny());
    }

    #[test]
    fn malformed_files_rejected() {
        let mut img = encode_idx_images(&tiny());
        assert!(parse_idx_images(&img[..img.len() - 1]).is_err());
        assert!(parse_idx_images(&img[..10]).is_err());
        img[3] = 1;
        assert!(matches!(parse_idx_images(&img), Err(Error::Format(_))));
        let mut lab = encode_idx_labels(&tiny());
        lab[3] = 3;
        assert!(parse_idx_labels(&lab).is_err());
    }

    #[test]
    fn count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        let d = tiny();
        std::fs::write(&ip, encode_idx_images(&d)).unwrap();
        std::fs::write(&lp, encode_idx_labels(&d.head(2))).unwrap();
        assert!(matches!(load_idx_dataset(&ip, &lp), Err(Error::Format(_))));
    }
}
