//! Binary PGM (P5) output of sample grids.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor4;

const SEPARATOR: u8 = 128;

/// Clamps to `[0, 1]` and scales to a byte, rounding halves up.
pub fn to_byte(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

/// Encodes single-channel samples as a P5 grid with `columns` cells per
/// row and one-pixel separators between cells.
pub fn encode_image_grid(samples: &Tensor4, columns: usize) -> Result<Vec<u8>> {
    let d = samples.dims();
    if d.c != 1 {
        return Err(Error::Shape(format!(
            "image grids need one channel, got {d}"
        )));
    }
    if d.n == 0 || columns == 0 {
        return Err(Error::Config(
            "an image grid needs samples and columns".into(),
        ));
    }
    let cols = columns.min(d.n);
    let rows = d.n.div_ceil(cols);
    let width = cols * d.w + cols - 1;
    let height = rows * d.h + rows - 1;
    let mut pixels = vec![SEPARATOR; width * height];
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            let (y0, x0) = (r * (d.h + 1), c * (d.w + 1));
            for y in 0..d.h {
                for x in 0..d.w {
                    pixels[(y0 + y) * width + x0 + x] = if i < d.n {
                        to_byte(samples.get(i, y, x, 0))
                    } else {
                        0
                    };
                }
            }
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels);
    Ok(out)
}

pub fn write_image_grid(samples: &Tensor4, columns: usize, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_image_grid(samples, columns)?)
}
