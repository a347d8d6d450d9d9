//! Max-pooling in estimation mode, nearest-neighbour up-sampling in sampling
//! mode. Kernel and stride must coincide so that up-sampling is well defined.

use serde::{Deserialize, Serialize};

use super::folding::window_extent;
use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolingParams {
    pub ky: usize,
    pub kx: usize,
    pub dy: usize,
    pub dx: usize,
}

impl PoolingParams {
    pub fn new(ky: usize, kx: usize, dy: usize, dx: usize) -> Result<Self> {
        if ky == 0 || kx == 0 || dy == 0 || dx == 0 {
            return Err(Error::Config(format!(
                "pooling P({ky},{kx},{dy},{dx}) needs positive kernel sizes and strides"
            )));
        }
        if ky != dy || kx != dx {
            return Err(Error::Config(format!(
                "pooling P({ky},{kx},{dy},{dx}): kernel size must equal stride"
            )));
        }
        Ok(PoolingParams { ky, kx, dy, dx })
    }

    pub fn output_dims(&self, input: Dims) -> Result<Dims> {
        let h = window_extent(input.h, self.ky, self.dy);
        let w = window_extent(input.w, self.kx, self.dx);
        match (h, w) {
            (Some(h), Some(w)) => Ok(Dims::new(input.n, h, w, input.c)),
            _ => Err(Error::Config(format!(
                "P({},{},{},{}) does not tile a {}x{} input",
                self.ky, self.kx, self.dy, self.dx, input.h, input.w
            ))),
        }
    }

    pub fn forward(&self, input: &Tensor4) -> Result<Tensor4> {
        Ok(self.forward_with_argmax(input)?.0)
    }

    /// Max-pooling plus the flat input offset of every selected maximum
    /// (first occurrence in row-major window order on ties).
    pub fn forward_with_argmax(&self, input: &Tensor4) -> Result<(Tensor4, Vec<usize>)> {
        let din = input.dims();
        let dout = self.output_dims(din)?;
        let mut out = Tensor4::zeros(dout);
        let mut argmax = vec![0usize; dout.len()];
        let src = input.data();
        for n in 0..dout.n {
            for h in 0..dout.h {
                for w in 0..dout.w {
                    for c in 0..dout.c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_at = din.offset(n, h * self.dy, w * self.dx, c);
                        for wy in 0..self.ky {
                            for wx in 0..self.kx {
                                let at = din.offset(n, h * self.dy + wy, w * self.dx + wx, c);
                                if src[at] > best {
                                    best = src[at];
                                    best_at = at;
                                }
                            }
                        }
                        let o = dout.offset(n, h, w, c);
                        out.data_mut()[o] = src[best_at];
                        argmax[o] = best_at;
                    }
                }
            }
        }
        Ok((out, argmax))
    }

    fn check_adjoint_dims(&self, upstream: &Tensor4, input_dims: Dims) -> Result<()> {
        let expected = self.output_dims(input_dims)?;
        if upstream.dims() != expected {
            return Err(Error::Shape(format!(
                "pooling expects a {expected} signal for a {input_dims} input, got {}",
                upstream.dims()
            )));
        }
        Ok(())
    }

    /// Sampling mode: nearest-neighbour up-sampling.
    pub fn backward_control(&self, control: &Tensor4, input_dims: Dims) -> Result<Tensor4> {
        self.check_adjoint_dims(control, input_dims)?;
        let mut out = Tensor4::zeros(input_dims);
        let c = input_dims.c;
        for n in 0..input_dims.n {
            for y in 0..input_dims.h {
                for x in 0..input_dims.w {
                    let src = control.slice_channel_vector(n, y / self.dy, x / self.dx);
                    let o = input_dims.offset(n, y, x, 0);
                    out.data_mut()[o..o + c].copy_from_slice(src);
                }
            }
        }
        Ok(out)
    }

    /// Routes an output gradient to the window maxima recorded by
    /// [`forward_with_argmax`](Self::forward_with_argmax).
    pub fn backward_grad(
        &self,
        grad_out: &Tensor4,
        argmax: &[usize],
        input_dims: Dims,
    ) -> Result<Tensor4> {
        self.check_adjoint_dims(grad_out, input_dims)?;
        if argmax.len() != grad_out.dims().len() {
            return Err(Error::Shape("argmax record does not match gradient".into()));
        }
        let mut out = Tensor4::zeros(input_dims);
        for (g, &at) in grad_out.data().iter().zip(argmax) {
            out.data_mut()[at] += g;
        }
        Ok(out)
    }
}
