//! Folding: every sliding window of the input is dumped into the channel
//! dimension of one output position (an im2col without the matrix product).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4};

/// Output extent of a valid sliding window along one axis, or `None` when the
/// window does not tile the input exactly.
pub(crate) fn window_extent(input: usize, size: usize, stride: usize) -> Option<usize> {
    if size == 0 || stride == 0 || input < size || !(input - size).is_multiple_of(stride) {
        None
    } else {
        Some(1 + (input - size) / stride)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldingParams {
    pub fy: usize,
    pub fx: usize,
    pub dy: usize,
    pub dx: usize,
}

impl FoldingParams {
    pub fn new(fy: usize, fx: usize, dy: usize, dx: usize) -> Result<Self> {
        if fy == 0 || fx == 0 || dy == 0 || dx == 0 {
            return Err(Error::Config(format!(
                "folding F({fy},{fx},{dy},{dx}) needs positive sizes and strides"
            )));
        }
        Ok(FoldingParams { fy, fx, dy, dx })
    }

    pub fn output_dims(&self, input: Dims) -> Result<Dims> {
        let h = window_extent(input.h, self.fy, self.dy);
        let w = window_extent(input.w, self.fx, self.dx);
        match (h, w) {
            (Some(h), Some(w)) => Ok(Dims::new(input.n, h, w, input.c * self.fy * self.fx)),
            _ => Err(Error::Config(format!(
                "F({},{},{},{}) does not tile a {}x{} input",
                self.fy, self.fx, self.dy, self.dx, input.h, input.w
            ))),
        }
    }

    /// Estimation mode. Output channel `(wy * fx + wx) * C_in + c` at `(h, w)`
    /// holds input `(h * dy + wy, w * dx + wx, c)`.
    pub fn forward(&self, input: &Tensor4) -> Result<Tensor4> {
        let din = input.dims();
        let dout = self.output_dims(din)?;
        let mut out = Tensor4::zeros(dout);
        let row = self.fx * din.c;
        let src = input.data();
        let dst = out.data_mut();
        for n in 0..din.n {
            for h in 0..dout.h {
                for w in 0..dout.w {
                    let base = dout.offset(n, h, w, 0);
                    for wy in 0..self.fy {
                        let s = din.offset(n, h * self.dy + wy, w * self.dx, 0);
                        let d = base + wy * row;
                        dst[d..d + row].copy_from_slice(&src[s..s + row]);
                    }
                }
            }
        }
        Ok(out)
    }

    fn check_adjoint_dims(&self, upstream: &Tensor4, input_dims: Dims) -> Result<()> {
        let expected = self.output_dims(input_dims)?;
        if upstream.dims() != expected {
            return Err(Error::Shape(format!(
                "folding expects a {expected} signal for a {input_dims} input, got {}",
                upstream.dims()
            )));
        }
        Ok(())
    }

    /// Scatter-add of an output-shaped tensor back onto the input grid.
    fn scatter_sum(&self, upstream: &Tensor4, input_dims: Dims) -> Tensor4 {
        let dout = upstream.dims();
        let row = self.fx * input_dims.c;
        let mut acc = Tensor4::zeros(input_dims);
        let src = upstream.data();
        let dst = acc.data_mut();
        for n in 0..dout.n {
            for h in 0..dout.h {
                for w in 0..dout.w {
                    let base = dout.offset(n, h, w, 0);
                    for wy in 0..self.fy {
                        let d = input_dims.offset(n, h * self.dy + wy, w * self.dx, 0);
                        let s = base + wy * row;
                        for (a, v) in dst[d..d + row].iter_mut().zip(&src[s..s + row]) {
                            *a += v;
                        }
                    }
                }
            }
        }
        acc
    }

    /// Sampling mode: every input element becomes the mean of all control
    /// entries that the forward map would have copied it to.
    pub fn backward_control(&self, control: &Tensor4, input_dims: Dims) -> Result<Tensor4> {
        self.check_adjoint_dims(control, input_dims)?;
        let mut out = self.scatter_sum(control, input_dims);
        let dout = control.dims();
        let count_y = coverage(input_dims.h, dout.h, self.fy, self.dy);
        let count_x = coverage(input_dims.w, dout.w, self.fx, self.dx);
        let c = input_dims.c;
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let pos = i / c;
            let x = pos % input_dims.w;
            let y = (pos / input_dims.w) % input_dims.h;
            let count = count_y[y] * count_x[x];
            // strides wider than the filter leave some input elements uncovered
            if count > 0 {
                *v /= count as f64;
            }
        }
        Ok(out)
    }

    /// Adjoint of [`forward`](Self::forward): gradient with respect to the
    /// input given a gradient with respect to the output.
    pub fn backward_grad(&self, grad_out: &Tensor4, input_dims: Dims) -> Result<Tensor4> {
        self.check_adjoint_dims(grad_out, input_dims)?;
        Ok(self.scatter_sum(grad_out, input_dims))
    }
}

/// How many windows cover each input coordinate along one axis.
fn coverage(input: usize, windows: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut counts = vec![0usize; input];
    for i in 0..windows {
        for c in &mut counts[i * stride..i * stride + size] {
            *c += 1;
        }
    }
    counts
}
