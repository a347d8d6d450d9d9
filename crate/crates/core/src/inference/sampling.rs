//! Top-down generation: unconditional and class-conditional sampling,
//! variants of a template and in-painting.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::sharpen::sharpen;
use crate::inference::stats::{inlier_masks_from_trace, InlierVerdicts, OutlierStats};
use crate::layers::gmm_sample_control;
use crate::model::{ForwardTrace, Layer, Model};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// Selection width for control-driven component choice.
    pub top_s: usize,
    pub sharpen_iters: usize,
    pub sharpen_step: f64,
    /// Emit a draw from the selected component instead of its centroid.
    pub stochastic: bool,
    pub seed: u64,
    /// Worker threads; images are independent, so output does not depend on it.
    pub threads: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            top_s: 1,
            sharpen_iters: 1000,
            sharpen_step: 0.1,
            stochastic: false,
            seed: 0,
            threads: 1,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self, model: &Model) -> Result<()> {
        let max_k = model
            .gmm_indices()
            .iter()
            .map(|&i| model.gmm(i).expect("gmm").components())
            .max()
            .ok_or_else(|| Error::Config("model has no GMM layer".into()))?;
        if self.top_s == 0 || self.top_s > max_k {
            return Err(Error::Config(format!(
                "top-S must lie in [1, {max_k}], got {}",
                self.top_s
            )));
        }
        if !(self.sharpen_step >= 0.0 && self.sharpen_step.is_finite()) {
            return Err(Error::Config("sharpening step must be non-negative".into()));
        }
        Ok(())
    }

    /// Independent stream for image `index`.
    fn rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }
}

/// Generated images and the component chosen at every GMM position.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub images: Tensor4,
    /// Per image: `(layer, selections in (h, w) order)` for each GMM layer that
    /// sampled, top to bottom.
    pub selections: Vec<Vec<(usize, Vec<usize>)>>,
}

/// How one top-down pass deviates from plain sampling.
#[derive(Default)]
struct Guide<'a> {
    /// Forward trace of a reference input (one image).
    trace: Option<&'a ForwardTrace>,
    /// Layers with zero-based index at or above this copy the activities
    /// they receive in the reference trace as their control output.
    copy_from: Option<usize>,
    /// Inlier positions of each GMM layer take the reference activities as
    /// selector.
    verdicts: Option<&'a InlierVerdicts>,
    /// Selector for the top GMM layer.
    top_selector: Option<Tensor4>,
    /// Top GMM layer draws from its whole selector row.
    top_unrestricted: bool,
}

fn top_gmm(model: &Model) -> Result<usize> {
    model
        .top_gmm()
        .ok_or_else(|| Error::Config("sampling needs a GMM layer".into()))
}

/// One top-down pass for a single image.
fn descend(
    model: &Model,
    cfg: &SamplingConfig,
    guide: &Guide<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor4, Vec<(usize, Vec<usize>)>)> {
    let top = top_gmm(model)?;
    let shapes = model.shapes();
    let mut control: Option<Tensor4> = guide.top_selector.clone();
    let mut selections = Vec::new();
    for i in (0..=top).rev() {
        if let Some(c) = &control {
            if c.dims() != shapes[i + 1] {
                return Err(Error::Shape(format!(
                    "control {} entering layer {} does not match {}",
                    c.dims(),
                    i + 1,
                    shapes[i + 1]
                )));
            }
        }
        if let (Some(trace), Some(cut)) = (guide.trace, guide.copy_from) {
            if i >= cut {
                control = Some(trace.activities[i].clone());
                continue;
            }
        }
        let out = match &model.layers()[i] {
            Layer::Gmm(g) => {
                let mut selector = control.take();
                if let (Some(v), Some(trace), Some(sel)) =
                    (guide.verdicts, guide.trace, selector.as_mut())
                {
                    if let Some(mask) = v.mask(i) {
                        let act = &trace.activities[i + 1];
                        let k = g.components();
                        for (pos, &inlier) in mask.iter().enumerate() {
                            if inlier {
                                sel.data_mut()[pos * k..(pos + 1) * k]
                                    .copy_from_slice(&act.data()[pos * k..(pos + 1) * k]);
                            }
                        }
                    }
                }
                let top_s = if i == top && (selector.is_none() || guide.top_unrestricted) {
                    g.components()
                } else {
                    cfg.top_s
                };
                let sampled = gmm_sample_control(
                    selector.as_ref(),
                    g,
                    shapes[i],
                    top_s,
                    cfg.stochastic,
                    rng,
                )?;
                selections.push((i, sampled.selected));
                sampled.control
            }
            Layer::Folding(p) => {
                let t =
                    p.backward_control(control.as_ref().expect("control from above"), shapes[i])?;
                sharpen_or_keep(model, i, t, cfg)?
            }
            Layer::Pooling(p) => {
                let t =
                    p.backward_control(control.as_ref().expect("control from above"), shapes[i])?;
                sharpen_or_keep(model, i, t, cfg)?
            }
            Layer::Classifier(_) => unreachable!("classifier is above the top GMM layer"),
        };
        control = Some(out);
    }
    let image = control.expect("image-level control");
    if image.dims() != shapes[0] {
        return Err(Error::Shape(format!(
            "generated {} instead of {}",
            image.dims(),
            shapes[0]
        )));
    }
    Ok((image, selections))
}

fn sharpen_or_keep(
    model: &Model,
    layer: usize,
    t: Tensor4,
    cfg: &SamplingConfig,
) -> Result<Tensor4> {
    match sharpen(model, layer, &t, cfg.sharpen_iters, cfg.sharpen_step) {
        Ok(s) => Ok(s),
        Err(Error::SharpeningDivergence) => Ok(t),
        Err(e) => Err(e),
    }
}

/// Runs `job(index, rng)` for every image, spread over `cfg.threads` workers,
/// and stacks the results in index order.
fn run_images<F>(cfg: &SamplingConfig, count: usize, job: F) -> Result<SampleOutput>
where
    F: Fn(usize, &mut ChaCha8Rng) -> Result<(Tensor4, Vec<(usize, Vec<usize>)>)> + Sync,
{
    if count == 0 {
        return Err(Error::Config("image count must be at least 1".into()));
    }
    let threads = cfg.threads.clamp(1, count);
    let results: Vec<Result<(Tensor4, Vec<(usize, Vec<usize>)>)>> = if threads == 1 {
        (0..count).map(|i| job(i, &mut cfg.rng(i))).collect()
    } else {
        let chunk = count.div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..count)
                .step_by(chunk)
                .map(|start| {
                    let job = &job;
                    scope.spawn(move || {
                        (start..(start + chunk).min(count))
                            .map(|i| job(i, &mut cfg.rng(i)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("sampling worker panicked"))
                .collect()
        })
    };
    let mut images = Vec::with_capacity(count);
    let mut selections = Vec::with_capacity(count);
    for r in results {
        let (img, sel) = r?;
        images.push(img);
        selections.push(sel);
    }
    Ok(SampleOutput {
        images: Tensor4::concat(&images)?,
        selections,
    })
}

/// Unconditional samples. The top GMM layer draws from its mixing weights;
/// lower GMM layers select per position from the control they receive.
pub fn sample(model: &Model, cfg: &SamplingConfig, count: usize) -> Result<SampleOutput> {
    cfg.validate(model)?;
    run_images(cfg, count, |_, rng| {
        descend(model, cfg, &Guide::default(), rng)
    })
}

/// Samples whose top-layer selector is the classifier's inversion of the
/// one-hot target for `label`.
pub fn conditional_sample(
    model: &Model,
    label: usize,
    cfg: &SamplingConfig,
    count: usize,
) -> Result<SampleOutput> {
    cfg.validate(model)?;
    let classifier = model
        .classifier()
        .ok_or_else(|| Error::Config("conditional sampling needs a classifier layer".into()))?;
    let top = top_gmm(model)?;
    let onehot = classifier.one_hot(&[label])?;
    let selector = classifier.invert(&onehot, model.shapes()[top + 1])?;
    let guide = Guide {
        top_selector: Some(selector),
        ..Default::default()
    };
    run_images(cfg, count, |_, rng| descend(model, cfg, &guide, rng))
}

/// Variants of each template: layers numbered `cutoff` and above (from 1)
/// pass the template's own activities down as control; the layers below
/// sample. `cutoff = 0` returns the templates; `cutoff` beyond the top GMM
/// layer samples unconditionally.
pub fn generate_variants(
    model: &Model,
    templates: &Tensor4,
    cutoff: usize,
    cfg: &SamplingConfig,
) -> Result<SampleOutput> {
    cfg.validate(model)?;
    let top = top_gmm(model)?;
    if cutoff > top + 2 {
        return Err(Error::Config(format!(
            "variant cutoff {cutoff} exceeds {}",
            top + 2
        )));
    }
    let traces = (0..templates.dims().n)
        .map(|i| model.forward_upto(&templates.batch_range(i, i + 1), top + 1))
        .collect::<Result<Vec<_>>>()?;
    run_images(cfg, traces.len(), |i, rng| {
        let guide = Guide {
            trace: Some(&traces[i]),
            copy_from: Some(cutoff.saturating_sub(1)),
            ..Default::default()
        };
        descend(model, cfg, &guide, rng)
    })
}

/// Completes each corrupted image. The top GMM layer draws from its
/// responsibilities; below it, positions that pass the threshold test at
/// cutoff `c` select from their own activities and the rest from the
/// sampled control. Pixels whose lowest-layer positions all pass keep their
/// input values.
pub fn inpaint(
    model: &Model,
    stats: &OutlierStats,
    corrupted: &Tensor4,
    c: f64,
    cfg: &SamplingConfig,
) -> Result<SampleOutput> {
    cfg.validate(model)?;
    stats.check_model(model)?;
    if stats.count() == 0 {
        return Err(Error::Config(
            "in-painting needs collected outlier statistics".into(),
        ));
    }
    let top = top_gmm(model)?;
    let n = corrupted.dims().n;
    let mut traces = Vec::with_capacity(n);
    let mut verdicts = Vec::with_capacity(n);
    for i in 0..n {
        let trace = model.forward_upto(&corrupted.batch_range(i, i + 1), top + 1)?;
        verdicts.push(inlier_masks_from_trace(stats, &trace, c)?);
        traces.push(trace);
    }
    let mut out = run_images(cfg, n, |i, rng| {
        let guide = Guide {
            trace: Some(&traces[i]),
            verdicts: Some(&verdicts[i]),
            top_selector: Some(traces[i].activities[top + 1].clone()),
            top_unrestricted: true,
            ..Default::default()
        };
        descend(model, cfg, &guide, rng)
    })?;
    for (i, v) in verdicts.iter().enumerate() {
        let keep = preserved_pixels(model, v)?;
        let src = corrupted.sample(i);
        for ((o, &s), &k) in out.images.sample_mut(i).iter_mut().zip(src).zip(&keep) {
            if k {
                *o = s;
            }
        }
    }
    Ok(out)
}

/// Input pixels none of whose covering lowest-GMM positions is an outlier.
pub fn preserved_pixels(model: &Model, verdicts: &InlierVerdicts) -> Result<Vec<bool>> {
    let lowest = *model
        .gmm_indices()
        .first()
        .ok_or_else(|| Error::Config("model has no GMM layer".into()))?;
    let mask = verdicts
        .mask(lowest)
        .ok_or_else(|| Error::Config("verdicts lack the lowest GMM layer".into()))?;
    let shapes = model.shapes();
    let below = shapes[lowest];
    let mut signal = Tensor4::zeros(below);
    for (pos, &inlier) in mask.iter().enumerate().take(below.positions()) {
        if !inlier {
            signal.data_mut()[pos * below.c..(pos + 1) * below.c].fill(1.0);
        }
    }
    for i in (0..lowest).rev() {
        signal = match &model.layers()[i] {
            Layer::Folding(p) => p.backward_control(&signal, shapes[i])?,
            Layer::Pooling(p) => p.backward_control(&signal, shapes[i])?,
            _ => unreachable!("only folding and pooling below the lowest GMM layer"),
        };
    }
    Ok(signal.data().iter().map(|&v| v == 0.0).collect())
}

/// Number of distinct selection patterns (all GMM layers jointly).
pub fn distinct_patterns(out: &SampleOutput) -> usize {
    let mut seen: Vec<&Vec<(usize, Vec<usize>)>> = out.selections.iter().collect();
    seen.sort();
    seen.dedup();
    seen.len()
}
