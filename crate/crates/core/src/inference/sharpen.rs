//! Gradient ascent on a control signal against the likelihood assigned by
//! the GMM layer above it.

use crate::error::{Error, Result};
use crate::layers::{gmm_pass, LossMode, Smoothing};
use crate::model::{Layer, Model};
use crate::tensor::Tensor4;

const MAX_HALVINGS: usize = 20;

/// Zero-based index of the first GMM layer above `layer`.
fn gmm_above(model: &Model, layer: usize) -> Result<usize> {
    model
        .layers()
        .iter()
        .enumerate()
        .skip(layer + 1)
        .find(|(_, l)| matches!(l, Layer::Gmm(_)))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Config(format!("no GMM layer above layer {}", layer + 1)))
}

/// Per-sample mean log-likelihood at the GMM layer above `layer` for inputs
/// `x` of `layer`, plus its gradient with respect to `x` when requested.
pub fn sharpen_objective(
    model: &Model,
    layer: usize,
    x: &Tensor4,
    with_grad: bool,
) -> Result<(Vec<f64>, Option<Tensor4>)> {
    let target = gmm_above(model, layer)?;
    let mut inputs = Vec::new();
    let mut argmaxes = Vec::new();
    let mut cur = x.clone();
    for l in &model.layers()[layer..target] {
        let next = match l {
            Layer::Folding(p) => p.forward(&cur)?,
            Layer::Pooling(p) => {
                let (out, idx) = p.forward_with_argmax(&cur)?;
                argmaxes.push(idx);
                out
            }
            _ => {
                return Err(Error::Config(
                    "only folding and pooling layers can be sharpened through".into(),
                ))
            }
        };
        inputs.push(cur);
        cur = next;
    }
    let g = model.gmm(target).expect("GMM layer");
    let pass = gmm_pass(&cur, g, LossMode::Full, Smoothing::point())?;
    let per = pass.loglik.dims().positions();
    let objective = pass
        .loglik
        .data()
        .chunks(per)
        .map(|c| c.iter().sum::<f64>() / per as f64)
        .collect();
    if !with_grad {
        return Ok((objective, None));
    }
    let mut grad = pass.d_input;
    for (l, input) in model.layers()[layer..target].iter().zip(&inputs).rev() {
        grad = match l {
            Layer::Folding(p) => p.backward_grad(&grad, input.dims())?,
            Layer::Pooling(p) => {
                let idx = argmaxes.pop().expect("argmax per pooling layer");
                p.backward_grad(&grad, &idx, input.dims())?
            }
            _ => unreachable!(),
        };
    }
    Ok((objective, Some(grad)))
}

/// `iters` ascent steps of size `step` on `control`, the sampling-mode output
/// of folding/pooling layer `layer`. A step that would lower a sample's
/// objective is halved (up to 20 times, and the smaller step is kept);
/// a sample stops once no halving helps.
pub fn sharpen(
    model: &Model,
    layer: usize,
    control: &Tensor4,
    iters: usize,
    step: f64,
) -> Result<Tensor4> {
    let expected = model.shapes()[layer].with_batch(control.dims().n);
    if control.dims() != expected {
        return Err(Error::Shape(format!(
            "control {} does not match layer {} input {expected}",
            control.dims(),
            layer + 1
        )));
    }
    if iters == 0 || step == 0.0 {
        return Ok(control.clone());
    }
    let n = control.dims().n;
    let mut x = control.clone();
    let (mut objective, _) = sharpen_objective(model, layer, &x, false)?;
    let mut steps = vec![step; n];
    let mut active: Vec<usize> = (0..n).collect();
    for _ in 0..iters {
        if active.is_empty() {
            break;
        }
        let sub = x.select_samples(&active);
        let (_, grad) = sharpen_objective(model, layer, &sub, true)?;
        let grad = grad.expect("gradient requested");
        if !grad.all_finite() {
            return Err(Error::SharpeningDivergence);
        }
        let mut pending: Vec<usize> = (0..active.len()).collect();
        let mut still_active = Vec::with_capacity(active.len());
        for _ in 0..=MAX_HALVINGS {
            if pending.is_empty() {
                break;
            }
            let mut cand = sub.select_samples(&pending);
            for (row, &p) in pending.iter().enumerate() {
                let s = steps[active[p]];
                for (c, g) in cand.sample_mut(row).iter_mut().zip(grad.sample(p)) {
                    *c += s * g;
                }
            }
            let (values, _) = sharpen_objective(model, layer, &cand, false)?;
            let mut retry = Vec::new();
            for (row, &p) in pending.iter().enumerate() {
                let idx = active[p];
                if values[row].is_finite() && values[row] >= objective[idx] {
                    let improved = values[row] > objective[idx];
                    objective[idx] = values[row];
                    x.sample_mut(idx).copy_from_slice(cand.sample(row));
                    if improved {
                        still_active.push(idx);
                    }
                } else {
                    steps[idx] *= 0.5;
                    retry.push(p);
                }
            }
            pending = retry;
        }
        still_active.sort_unstable();
        active = still_active;
    }
    Ok(x)
}
