//! IDX containers as used by MNIST-style datasets.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn format_err(path: &Path, offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        reason: reason.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            format_err(
                path,
                bytes.len(),
                format!("truncated header: missing {what}"),
            )
        })
}

/// Parses an IDX image container; pixels are scaled to `[0, 1]`.
/// `path` is only used in error messages.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Tensor4> {
    let magic = be_u32(bytes, 0, path, "magic number")?;
    if magic != IMAGES_MAGIC {
        return Err(format_err(
            path,
            0,
            format!(
                "magic {magic:#010x} is not an unsigned-byte 3-d container ({IMAGES_MAGIC:#010x})"
            ),
        ));
    }
    let count = be_u32(bytes, 4, path, "item count")? as usize;
    let rows = be_u32(bytes, 8, path, "row count")? as usize;
    let cols = be_u32(bytes, 12, path, "column count")? as usize;
    let per = rows
        .checked_mul(cols)
        .ok_or_else(|| format_err(path, 8, "image size overflows"))?;
    let expected = count
        .checked_mul(per)
        .and_then(|v| v.checked_add(16))
        .ok_or_else(|| format_err(path, 4, "dataset size overflows"))?;
    if bytes.len() < expected {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated pixel data: expected {expected} bytes"),
        ));
    }
    if bytes.len() > expected {
        return Err(format_err(
            path,
            expected,
            "trailing bytes after pixel data",
        ));
    }
    let data = bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor4::from_vec(Dims::new(count, rows, cols, 1), data)
}

/// Parses an IDX label container; labels must lie in `0..=9`.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path, "magic number")?;
    if magic != LABELS_MAGIC {
        return Err(format_err(
            path,
            0,
            format!(
                "magic {magic:#010x} is not an unsigned-byte 1-d container ({LABELS_MAGIC:#010x})"
            ),
        ));
    }
    let count = be_u32(bytes, 4, path, "item count")? as usize;
    let expected = count
        .checked_add(8)
        .ok_or_else(|| format_err(path, 4, "dataset size overflows"))?;
    if bytes.len() < expected {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated label data: expected {expected} bytes"),
        ));
    }
    if bytes.len() > expected {
        return Err(format_err(
            path,
            expected,
            "trailing bytes after label data",
        ));
    }
    bytes[8..]
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            if b <= 9 {
                Ok(b as usize)
            } else {
                Err(format_err(path, 8 + i, format!("label {b} outside 0..=9")))
            }
        })
        .collect()
}

pub fn read_idx_images(path: impl AsRef<Path>) -> Result<Tensor4> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx_images(&bytes, path)
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx_labels(&bytes, path)
}

/// Images plus their labels, checking that the counts agree.
pub fn read_idx_dataset(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
) -> Result<(Tensor4, Vec<usize>)> {
    let x = read_idx_images(images.as_ref())?;
    let y = read_idx_labels(labels.as_ref())?;
    if x.dims().n != y.len() {
        return Err(Error::Shape(format!(
            "{} holds {} images but {} holds {} labels",
            images.as_ref().display(),
            x.dims().n,
            labels.as_ref().display(),
            y.len()
        )));
    }
    Ok((x, y))
}

/// Keeps the samples whose label is in `classes`.
pub fn filter_classes(x: &Tensor4, y: &[usize], classes: &[usize]) -> (Tensor4, Vec<usize>) {
    let keep: Vec<usize> = (0..y.len()).filter(|&i| classes.contains(&y[i])).collect();
    (
        x.select_samples(&keep),
        keep.iter().map(|&i| y[i]).collect(),
    )
}
