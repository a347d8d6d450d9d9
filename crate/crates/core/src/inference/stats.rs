//! Long-term log-likelihood statistics and the inlier test built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardTrace, Model};
use crate::tensor::{Dims, Tensor4};

/// Running mean and sum of squared deviations of one GMM layer's
/// log-likelihood map, per position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    /// Zero-based model layer index.
    pub layer: usize,
    pub h: usize,
    pub w: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl LayerStats {
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn m2(&self) -> &[f64] {
        &self.m2
    }
}

/// Per-layer, per-position statistics of the log-likelihood maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierStats {
    count: u64,
    layers: Vec<LayerStats>,
}

impl OutlierStats {
    /// Zero-sample statistics shaped for every GMM layer of `model`.
    pub fn empty(model: &Model) -> Self {
        let layers = model
            .gmm_indices()
            .into_iter()
            .map(|i| {
                let d = model.shapes()[i + 1];
                LayerStats {
                    layer: i,
                    h: d.h,
                    w: d.w,
                    mean: vec![0.0; d.h * d.w],
                    m2: vec![0.0; d.h * d.w],
                }
            })
            .collect();
        OutlierStats { count: 0, layers }
    }

    /// Rebuilds statistics from stored blocks.
    pub fn from_parts(count: u64, layers: Vec<LayerStats>) -> Result<Self> {
        Ok(OutlierStats { count, layers })
    }

    pub fn layer_stats(&self) -> &[LayerStats] {
        &self.layers
    }

    /// Builds one layer's block from a mean and sum of squared deviations.
    pub fn layer_from_parts(
        layer: usize,
        h: usize,
        w: usize,
        mean: Vec<f64>,
        m2: Vec<f64>,
    ) -> Result<LayerStats> {
        if mean.len() != h * w || m2.len() != h * w {
            return Err(Error::Shape(format!(
                "statistics blocks for layer {} do not match {h}x{w}",
                layer + 1
            )));
        }
        Ok(LayerStats {
            layer,
            h,
            w,
            mean,
            m2,
        })
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    fn find(&self, layer: usize) -> Result<&LayerStats> {
        self.layers
            .iter()
            .find(|s| s.layer == layer)
            .ok_or_else(|| Error::Config(format!("no statistics for layer {}", layer + 1)))
    }

    /// Mean log-likelihood map `(1, h, w, 1)` of a GMM layer (zero-based index).
    pub fn mean_map(&self, layer: usize) -> Result<Tensor4> {
        let s = self.find(layer)?;
        Tensor4::from_vec(Dims::new(1, s.h, s.w, 1), s.mean.clone())
    }

    /// Population variance map `(1, h, w, 1)`.
    pub fn var_map(&self, layer: usize) -> Result<Tensor4> {
        let s = self.find(layer)?;
        let n = self.count.max(1) as f64;
        Tensor4::from_vec(
            Dims::new(1, s.h, s.w, 1),
            s.m2.iter().map(|v| (v / n).max(0.0)).collect(),
        )
    }

    /// Per-position thresholds `mean − c·std`.
    pub fn thresholds(&self, layer: usize, c: f64) -> Result<Vec<f64>> {
        let s = self.find(layer)?;
        let var = self.var_map(layer)?;
        Ok(s.mean
            .iter()
            .zip(var.data())
            .map(|(m, v)| m - c * v.sqrt())
            .collect())
    }

    /// Adds every sample of a batch trace, one sample at a time.
    pub fn accumulate(&mut self, trace: &ForwardTrace) -> Result<()> {
        let mut batch = None;
        for s in &self.layers {
            let ll = trace
                .loglik
                .get(s.layer + 1)
                .and_then(Option::as_ref)
                .ok_or_else(|| Error::Config(format!("trace lacks layer {}", s.layer + 1)))?;
            let d = ll.dims();
            if (d.h, d.w, d.c) != (s.h, s.w, 1) {
                return Err(Error::Shape(format!(
                    "log-likelihood map {d} does not match statistics {}x{}",
                    s.h, s.w
                )));
            }
            match batch {
                None => batch = Some(d.n),
                Some(n) if n != d.n => {
                    return Err(Error::Shape("trace layers disagree on batch size".into()))
                }
                _ => {}
            }
        }
        let n = batch.unwrap_or(0);
        for i in 0..n {
            self.count += 1;
            let count = self.count as f64;
            for s in &mut self.layers {
                let ll = trace.loglik[s.layer + 1].as_ref().expect("checked");
                for ((m, m2), &x) in s.mean.iter_mut().zip(&mut s.m2).zip(ll.sample(i)) {
                    let delta = x - *m;
                    *m += delta / count;
                    *m2 += delta * (x - *m);
                }
            }
        }
        Ok(())
    }

    /// Folds another set of statistics into this one.
    pub fn merge(&mut self, other: &OutlierStats) -> Result<()> {
        if self.layers.len() != other.layers.len()
            || self
                .layers
                .iter()
                .zip(&other.layers)
                .any(|(a, b)| (a.layer, a.h, a.w) != (b.layer, b.h, b.w))
        {
            return Err(Error::Shape("statistics layouts differ".into()));
        }
        if other.count == 0 {
            return Ok(());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for i in 0..a.mean.len() {
                let delta = b.mean[i] - a.mean[i];
                a.mean[i] += delta * nb / n;
                a.m2[i] += b.m2[i] + delta * delta * na * nb / n;
            }
        }
        self.count += other.count;
        Ok(())
    }

    /// Checks the statistics were collected for `model`'s geometry.
    pub fn check_model(&self, model: &Model) -> Result<()> {
        let expected = OutlierStats::empty(model);
        let same = self.layers.len() == expected.layers.len()
            && self
                .layers
                .iter()
                .zip(&expected.layers)
                .all(|(a, b)| (a.layer, a.h, a.w) == (b.layer, b.h, b.w));
        if !same {
            return Err(Error::Shape(
                "statistics do not match the model's GMM layers".into(),
            ));
        }
        Ok(())
    }
}

/// Single pass over `data` in batches.
pub fn collect_outlier_stats(model: &Model, data: &Tensor4, batch: usize) -> Result<OutlierStats> {
    let n = data.dims().n;
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let top = model
        .top_gmm()
        .ok_or_else(|| Error::Config("model has no GMM layer".into()))?;
    let mut stats = OutlierStats::empty(model);
    let batch = batch.max(1);
    for start in (0..n).step_by(batch) {
        let trace =
            model.forward_upto(&data.batch_range(start, (start + batch).min(n)), top + 1)?;
        stats.accumulate(&trace)?;
    }
    Ok(stats)
}

/// Verdicts of the threshold test for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct InlierVerdicts {
    /// One flag per sample, taken from the topmost GMM layer (all of its
    /// positions must pass).
    pub global: Vec<bool>,
    /// Per GMM layer (zero-based index), flags in `(n, h, w)` order.
    pub masks: Vec<(usize, Vec<bool>)>,
    /// Per-sample score: top-layer log-likelihood averaged over positions.
    pub scores: Vec<f64>,
}

impl InlierVerdicts {
    pub fn mask(&self, layer: usize) -> Option<&[bool]> {
        self.masks
            .iter()
            .find(|(l, _)| *l == layer)
            .map(|(_, m)| m.as_slice())
    }
}

/// Inliers satisfy `loglik ≥ mean − c·std` at a position.
pub fn inlier_masks_from_trace(
    stats: &OutlierStats,
    trace: &ForwardTrace,
    c: f64,
) -> Result<InlierVerdicts> {
    let mut masks = Vec::with_capacity(stats.layers.len());
    let mut top = None;
    for s in &stats.layers {
        let ll = trace
            .loglik
            .get(s.layer + 1)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Config(format!("trace lacks layer {}", s.layer + 1)))?;
        let d = ll.dims();
        if (d.h, d.w) != (s.h, s.w) {
            return Err(Error::Shape(format!(
                "log-likelihood map {d} does not match statistics {}x{}",
                s.h, s.w
            )));
        }
        let thr = stats.thresholds(s.layer, c)?;
        let mask: Vec<bool> = ll
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v >= thr[i % thr.len()])
            .collect();
        top = Some((s.layer, ll));
        masks.push((s.layer, mask));
    }
    let (top_layer, top_ll) = top.ok_or_else(|| Error::Config("no GMM layers".into()))?;
    let top_mask = &masks
        .iter()
        .find(|(l, _)| *l == top_layer)
        .expect("present")
        .1;
    let per = top_ll.dims().positions();
    let global = top_mask.chunks(per).map(|c| c.iter().all(|&b| b)).collect();
    let scores = top_ll
        .data()
        .chunks(per)
        .map(|c| c.iter().sum::<f64>() / per as f64)
        .collect();
    Ok(InlierVerdicts {
        global,
        masks,
        scores,
    })
}

/// Evaluates the threshold test at every GMM layer and position.
pub fn is_inlier(
    model: &Model,
    stats: &OutlierStats,
    x: &Tensor4,
    c: f64,
) -> Result<InlierVerdicts> {
    stats.check_model(model)?;
    let top = model
        .top_gmm()
        .ok_or_else(|| Error::Config("model has no GMM layer".into()))?;
    let trace = model.forward_upto(x, top + 1)?;
    inlier_masks_from_trace(stats, &trace, c)
}
