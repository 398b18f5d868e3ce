use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn parse_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| parse_err(path, "truncated header"))
}

/// Reads an IDX image/label pair. Pixels are scaled to `[0, 1]`; with
/// `normalize`, features are then shifted and scaled to mean 0, std 1.
pub fn load_idx(images_path: &Path, labels_path: &Path, normalize: bool) -> Result<Dataset> {
    let img = std::fs::read(images_path)?;
    let lab = std::fs::read(labels_path)?;

    let magic = be_u32(&img, 0, images_path)?;
    if magic != IMAGES_MAGIC {
        return Err(parse_err(
            images_path,
            format!("bad magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let d = rows * cols;
    let payload = &img[16..];
    if payload.len() != n * d {
        return Err(parse_err(
            images_path,
            format!("expected {} pixel bytes, found {}", n * d, payload.len()),
        ));
    }

    let magic = be_u32(&lab, 0, labels_path)?;
    if magic != LABELS_MAGIC {
        return Err(parse_err(
            labels_path,
            format!("bad magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        ));
    }
    let n_labels = be_u32(&lab, 4, labels_path)? as usize;
    if n_labels != n {
        return Err(parse_err(
            labels_path,
            format!("{n_labels} labels for {n} images"),
        ));
    }
    let labels: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    if labels.len() != n {
        return Err(parse_err(
            labels_path,
            format!("expected {n} label bytes, found {}", labels.len()),
        ));
    }

    let x: Vec<f64> = payload.iter().map(|&p| p as f64 / 255.0).collect();
    let n_classes = labels.iter().max().map_or(1, |m| m + 1).max(2);
    let x = Tensor::from_parts(vec![n, d], x);
    let mut ds = Dataset::classification(x, labels, n_classes, "idx")?;
    if normalize {
        ds = normalize_features(&ds)?;
    }
    Ok(ds)
}

/// Global standardization: one mean and one std over all feature entries.
pub fn normalize_features(data: &Dataset) -> Result<Dataset> {
    let v = data.x().data();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    data.map_features(|row| row.iter().map(|x| (x - mean) / sd).collect())
}

pub fn write_idx_images(path: &Path, images: &[Vec<u8>], rows: usize, cols: usize) -> Result<()> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for v in [images.len(), rows, cols] {
        out.extend_from_slice(&(v as u32).to_be_bytes());
    }
    for im in images {
        if im.len() != rows * cols {
            return Err(Error::Dimension {
                context: "write_idx_images",
                expected: vec![rows * cols],
                actual: vec![im.len()],
            });
        }
        out.extend_from_slice(im);
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    std::fs::write(path, out)?;
    Ok(())
}
