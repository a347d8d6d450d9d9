//! Convolutional GMM layer.
//!
//! One set of `K` diagonal Gaussians is shared by all spatial positions of the
//! input. The channel vector at each position `(n, h, w)` is treated as a data
//! point. All density arithmetic happens in log space.
//!
//! Squared Mahalanobis distances for all `(position, component)` pairs are
//! expanded as `x²·Pᵀ − 2x·(P⊙μ)ᵀ + Σ Pμ²` so that both forward and gradient
//! passes reduce to a handful of matrix products.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Mixture parameters: weight logits, centroids and diagonal precisions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    k: usize,
    d: usize,
    pi_logits: Vec<f64>,
    /// `k x d`, row-major.
    centroids: Vec<f64>,
    /// `k x d`, row-major, units of 1/variance.
    precisions: Vec<f64>,
}

impl GmmParams {
    pub fn new(
        k: usize,
        d: usize,
        pi_logits: Vec<f64>,
        centroids: Vec<f64>,
        precisions: Vec<f64>,
    ) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::Config("GMM layer needs K >= 1 and D >= 1".into()));
        }
        if pi_logits.len() != k || centroids.len() != k * d || precisions.len() != k * d {
            return Err(Error::Shape(format!(
                "GMM parameter blocks do not match K={k}, D={d}"
            )));
        }
        let finite = pi_logits
            .iter()
            .chain(&centroids)
            .chain(&precisions)
            .all(|v| v.is_finite());
        if !finite || precisions.iter().any(|&p| p <= 0.0) {
            return Err(Error::Config(
                "GMM parameters must be finite with positive precisions".into(),
            ));
        }
        Ok(GmmParams {
            k,
            d,
            pi_logits,
            centroids,
            precisions,
        })
    }

    /// Uniform weights, centroids uniform in [-0.01, 0.01], unit precisions.
    pub fn init<R: Rng + ?Sized>(k: usize, d: usize, rng: &mut R) -> Result<Self> {
        let centroids = (0..k * d).map(|_| rng.random_range(-0.01..=0.01)).collect();
        Self::new(k, d, vec![0.0; k], centroids, vec![1.0; k * d])
    }

    pub fn components(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn pi_logits(&self) -> &[f64] {
        &self.pi_logits
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    pub fn precisions(&self) -> &[f64] {
        &self.precisions
    }

    pub fn centroid(&self, k: usize) -> &[f64] {
        &self.centroids[k * self.d..(k + 1) * self.d]
    }

    pub fn precision(&self, k: usize) -> &[f64] {
        &self.precisions[k * self.d..(k + 1) * self.d]
    }

    pub fn centroids_mut(&mut self) -> &mut [f64] {
        &mut self.centroids
    }

    pub fn precisions_mut(&mut self) -> &mut [f64] {
        &mut self.precisions
    }

    pub fn pi_logits_mut(&mut self) -> &mut [f64] {
        &mut self.pi_logits
    }

    /// Mixing weights `softmax(pi_logits)`.
    pub fn weights(&self) -> Vec<f64> {
        self.log_weights().into_iter().map(f64::exp).collect()
    }

    pub fn log_weights(&self) -> Vec<f64> {
        let lse = log_sum_exp(&self.pi_logits);
        self.pi_logits.iter().map(|l| l - lse).collect()
    }

    pub fn clip_precisions(&mut self, p_min: f64, p_max: f64) {
        for p in &mut self.precisions {
            if *p < p_min || p.is_nan() {
                *p = p_min;
            } else if *p > p_max {
                *p = p_max;
            }
        }
    }

    /// Reorders components so that new component `i` is old component `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> GmmParams {
        let d = self.d;
        let mut out = self.clone();
        for (i, &j) in perm.iter().enumerate() {
            out.pi_logits[i] = self.pi_logits[j];
            out.centroids[i * d..(i + 1) * d].copy_from_slice(self.centroid(j));
            out.precisions[i * d..(i + 1) * d].copy_from_slice(self.precision(j));
        }
        out
    }

    /// Log-density of `x` under component `k` alone.
    pub fn component_log_density(&self, k: usize, x: &[f64]) -> f64 {
        let mu = self.centroid(k);
        let prec = self.precision(k);
        let mut acc = -0.5 * self.d as f64 * LN_2PI;
        for ((&xv, &m), &p) in x.iter().zip(mu).zip(prec) {
            acc += 0.5 * p.ln() - 0.5 * p * (xv - m) * (xv - m);
        }
        acc
    }

    fn check_input(&self, input: &Tensor4) -> Result<()> {
        if input.dims().c != self.d {
            return Err(Error::Shape(format!(
                "GMM layer with D={} received {} channels",
                self.d,
                input.dims().c
            )));
        }
        if input.dims().positions() == 0 {
            return Err(Error::EmptySpatialExtent);
        }
        Ok(())
    }
}

/// Gradients of a layer loss with respect to the three parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmGrads {
    pub d_pi_logits: Vec<f64>,
    pub d_centroids: Vec<f64>,
    pub d_precisions: Vec<f64>,
}

impl GmmGrads {
    pub fn zeros(k: usize, d: usize) -> Self {
        GmmGrads {
            d_pi_logits: vec![0.0; k],
            d_centroids: vec![0.0; k * d],
            d_precisions: vec![0.0; k * d],
        }
    }

    pub fn add_assign(&mut self, other: &GmmGrads) {
        for (a, b) in self.d_pi_logits.iter_mut().zip(&other.d_pi_logits) {
            *a += b;
        }
        for (a, b) in self.d_centroids.iter_mut().zip(&other.d_centroids) {
            *a += b;
        }
        for (a, b) in self.d_precisions.iter_mut().zip(&other.d_precisions) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.d_pi_logits
            .iter()
            .chain(&self.d_centroids)
            .chain(&self.d_precisions)
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    /// `log Σ_k π_k p_k` at every position.
    Full,
    /// Smoothed `max_k log(π_k p_k)`; see [`Smoothing`].
    MaxComponent,
}

/// Annealing state of the max-component loss.
///
/// Components live on a `ceil(√K) x ceil(√K)` grid. The winning component's
/// term is replaced by a Gaussian-weighted average (radius `sigma`, grid
/// units) of `log(π_k p_k)` over its grid neighbourhood. `sigma = 0` is the
/// pure max-component loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Smoothing {
    pub sigma: f64,
}

impl Smoothing {
    pub fn point() -> Self {
        Smoothing { sigma: 0.0 }
    }

    pub fn new(sigma: f64) -> Self {
        Smoothing { sigma }
    }

    /// Row `k*` holds the normalized neighbourhood weights around winner `k*`.
    pub fn neighbourhood(&self, k: usize) -> Array2<f64> {
        let side = (k as f64).sqrt().ceil() as usize;
        let mut table = Array2::zeros((k, k));
        for centre in 0..k {
            if self.sigma <= 0.0 {
                table[[centre, centre]] = 1.0;
                continue;
            }
            let (cy, cx) = ((centre / side) as f64, (centre % side) as f64);
            let mut row: Vec<f64> = (0..k)
                .map(|j| {
                    let (y, x) = ((j / side) as f64, (j % side) as f64);
                    let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                    (-d2 / (2.0 * self.sigma * self.sigma)).exp()
                })
                .collect();
            let total: f64 = row.iter().sum();
            for (j, v) in row.iter_mut().enumerate() {
                *v /= total;
                table[[centre, j]] = *v;
            }
        }
        table
    }
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-row argmax with ties broken towards the lower index.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn rows(input: &Tensor4) -> ArrayView2<'_, f64> {
    let d = input.dims();
    ArrayView2::from_shape((d.n * d.h * d.w, d.c), input.data()).expect("contiguous tensor")
}

/// `log N_k(x_m)` for every row `m` of `x` and component `k`.
fn log_densities(x: ArrayView2<'_, f64>, g: &GmmParams) -> Array2<f64> {
    let (k, d) = (g.k, g.d);
    let prec = ArrayView2::from_shape((k, d), &g.precisions).expect("k x d");
    let mu = ArrayView2::from_shape((k, d), &g.centroids).expect("k x d");
    let prec_mu = &prec * &mu;
    let consts: Array1<f64> = (0..k)
        .map(|j| {
            let p = g.precision(j);
            let m = g.centroid(j);
            let log_det: f64 = p.iter().map(|v| v.ln()).sum();
            let quad: f64 = p.iter().zip(m).map(|(p, m)| p * m * m).sum();
            0.5 * log_det - 0.5 * d as f64 * LN_2PI - 0.5 * quad
        })
        .collect();
    let x2 = x.mapv(|v| v * v);
    let mut out = x2.dot(&prec.t());
    out *= -0.5;
    out += &x.dot(&prec_mu.t());
    out += &consts.view().insert_axis(Axis(0));
    // GEMM may hand back a column-major result for degenerate shapes.
    if out.is_standard_layout() {
        out
    } else {
        out.as_standard_layout().into_owned()
    }
}

/// Everything one estimation-mode pass of a GMM layer produces.
struct Evaluation {
    log_p: Array2<f64>,
    log_pi: Vec<f64>,
}

impl Evaluation {
    fn new(input: &Tensor4, g: &GmmParams) -> Result<Self> {
        g.check_input(input)?;
        Ok(Evaluation {
            log_p: log_densities(rows(input), g),
            log_pi: g.log_weights(),
        })
    }

    fn activities(&self, dims: Dims) -> Tensor4 {
        let k = self.log_p.ncols();
        let mut data = Vec::with_capacity(self.log_p.len());
        for row in self.log_p.rows() {
            let row = row.as_slice().expect("row-major");
            let lse = log_sum_exp(row);
            data.extend(row.iter().map(|v| (v - lse).exp()));
        }
        Tensor4::from_vec(Dims::new(dims.n, dims.h, dims.w, k), data).expect("activity dims")
    }

    fn log_joint_row(&self, m: usize, buf: &mut [f64]) {
        for ((b, lp), lpi) in buf.iter_mut().zip(self.log_p.row(m)).zip(&self.log_pi) {
            *b = lp + lpi;
        }
    }

    fn loglik(&self, dims: Dims) -> Tensor4 {
        let k = self.log_p.ncols();
        let mut buf = vec![0.0; k];
        let data = (0..self.log_p.nrows())
            .map(|m| {
                self.log_joint_row(m, &mut buf);
                log_sum_exp(&buf)
            })
            .collect();
        Tensor4::from_vec(Dims::new(dims.n, dims.h, dims.w, 1), data).expect("loglik dims")
    }

    /// Per-row weights over components that define the loss, plus the loss
    /// value summed over rows.
    fn loss_weights(&self, mode: LossMode, smoothing: Smoothing) -> (Array2<f64>, f64) {
        let (m_rows, k) = self.log_p.dim();
        let mut weights = Array2::zeros((m_rows, k));
        let mut buf = vec![0.0; k];
        let mut total = 0.0;
        let table = match mode {
            LossMode::MaxComponent => Some(smoothing.neighbourhood(k)),
            LossMode::Full => None,
        };
        for m in 0..m_rows {
            self.log_joint_row(m, &mut buf);
            let mut wrow = weights.row_mut(m);
            match &table {
                None => {
                    let lse = log_sum_exp(&buf);
                    total += lse;
                    for (w, v) in wrow.iter_mut().zip(&buf) {
                        *w = (v - lse).exp();
                    }
                }
                Some(table) => {
                    let best = argmax(&buf);
                    let nb = table.row(best);
                    for ((w, &t), v) in wrow.iter_mut().zip(nb).zip(&buf) {
                        *w = t;
                        if t != 0.0 {
                            total += t * v;
                        }
                    }
                }
            }
        }
        (weights, total)
    }
}

/// Estimation mode: responsibilities `p_k / Σ_k' p_k'` at every position and
/// the per-position log-likelihood `log Σ_k π_k p_k` (one channel).
pub fn gmm_forward(input: &Tensor4, g: &GmmParams) -> Result<(Tensor4, Tensor4)> {
    let eval = Evaluation::new(input, g)?;
    Ok((eval.activities(input.dims()), eval.loglik(input.dims())))
}

/// Layer loss: sum over the batch, mean over positions.
pub fn gmm_loss(
    input: &Tensor4,
    g: &GmmParams,
    mode: LossMode,
    smoothing: Smoothing,
) -> Result<f64> {
    let eval = Evaluation::new(input, g)?;
    let (_, total) = eval.loss_weights(mode, smoothing);
    Ok(total / input.dims().positions() as f64)
}

/// Result of a full estimation + gradient pass.
#[derive(Debug, Clone)]
pub struct GmmPass {
    pub activities: Tensor4,
    pub loglik: Tensor4,
    pub loss: f64,
    pub grads: GmmGrads,
    pub d_input: Tensor4,
}

/// Analytic gradients of [`gmm_loss`] with respect to parameters and input.
pub fn gmm_grad(
    input: &Tensor4,
    g: &GmmParams,
    mode: LossMode,
    smoothing: Smoothing,
) -> Result<(GmmGrads, Tensor4)> {
    let pass = gmm_pass(input, g, mode, smoothing)?;
    Ok((pass.grads, pass.d_input))
}

/// Forward, loss and gradients in one pass.
pub fn gmm_pass(
    input: &Tensor4,
    g: &GmmParams,
    mode: LossMode,
    smoothing: Smoothing,
) -> Result<GmmPass> {
    let eval = Evaluation::new(input, g)?;
    let dims = input.dims();
    let scale = 1.0 / dims.positions() as f64;
    let (weights, total) = eval.loss_weights(mode, smoothing);
    let x = rows(input);
    let (k, d) = (g.k, g.d);
    let prec = ArrayView2::from_shape((k, d), &g.precisions).expect("k x d");
    let mu = ArrayView2::from_shape((k, d), &g.centroids).expect("k x d");

    let mass = weights.sum_axis(Axis(0));
    let wx = weights.t().dot(&x);
    let wx2 = weights.t().dot(&x.mapv(|v| v * v));
    let pi = eval.log_pi.iter().map(|v| v.exp());
    let rows_total = x.nrows() as f64;

    let mut grads = GmmGrads::zeros(k, d);
    for (j, (dl, p)) in grads.d_pi_logits.iter_mut().zip(pi).enumerate() {
        *dl = scale * (mass[j] - rows_total * p);
    }
    for j in 0..k {
        for e in 0..d {
            let (p, m, s) = (prec[[j, e]], mu[[j, e]], mass[j]);
            let i = j * d + e;
            grads.d_centroids[i] = scale * p * (wx[[j, e]] - s * m);
            let sq = wx2[[j, e]] - 2.0 * m * wx[[j, e]] + s * m * m;
            grads.d_precisions[i] = scale * 0.5 * (s / p - sq);
        }
    }

    let prec_mu = &prec * &mu;
    let wp = weights.dot(&prec);
    let wpm = weights.dot(&prec_mu);
    let mut d_input = Tensor4::zeros(dims);
    for ((o, (xv, a)), b) in d_input
        .data_mut()
        .iter_mut()
        .zip(x.iter().zip(wp.iter()))
        .zip(wpm.iter())
    {
        *o = scale * (b - xv * a);
    }

    Ok(GmmPass {
        activities: eval.activities(dims),
        loglik: eval.loglik(dims),
        loss: total * scale,
        grads,
        d_input,
    })
}

/// [`gmm_pass`] sharded over the batch on `threads` workers. Shard results are
/// reduced in shard order, so output is deterministic for a fixed thread count.
pub fn gmm_pass_sharded(
    input: &Tensor4,
    g: &GmmParams,
    mode: LossMode,
    smoothing: Smoothing,
    threads: usize,
) -> Result<GmmPass> {
    let n = input.dims().n;
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return gmm_pass(input, g, mode, smoothing);
    }
    let chunk = n.div_ceil(threads);
    let shards: Vec<Tensor4> = (0..n)
        .step_by(chunk)
        .map(|s| input.batch_range(s, (s + chunk).min(n)))
        .collect();
    let results: Vec<Result<GmmPass>> = std::thread::scope(|scope| {
        let handles: Vec<_> = shards
            .iter()
            .map(|shard| scope.spawn(move || gmm_pass(shard, g, mode, smoothing)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut parts = Vec::with_capacity(results.len());
    for r in results {
        parts.push(r?);
    }
    let mut grads = GmmGrads::zeros(g.k, g.d);
    let mut loss = 0.0;
    for p in &parts {
        grads.add_assign(&p.grads);
        loss += p.loss;
    }
    let cat = |f: fn(&GmmPass) -> &Tensor4| -> Result<Tensor4> {
        Tensor4::concat(&parts.iter().map(|p| f(p).clone()).collect::<Vec<_>>())
    };
    Ok(GmmPass {
        activities: cat(|p| &p.activities)?,
        loglik: cat(|p| &p.loglik)?,
        d_input: cat(|p| &p.d_input)?,
        loss,
        grads,
    })
}

/// Distribution over components after restricting a selector row to its `top_s`
/// largest entries. Negative entries carry no mass.
pub fn top_s_distribution(row: &[f64], top_s: usize) -> Result<Vec<f64>> {
    if row.is_empty() || row.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidControl(
            "selector row is empty or not finite".into(),
        ));
    }
    if row.iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidControl("selector row is all zero".into()));
    }
    let s = top_s.clamp(1, row.len());
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let mut dist = vec![0.0; row.len()];
    if s == 1 {
        dist[order[0]] = 1.0;
        return Ok(dist);
    }
    let mut total = 0.0;
    for &i in &order[..s] {
        dist[i] = row[i].max(0.0);
        total += dist[i];
    }
    if total <= 0.0 {
        return Err(Error::InvalidControl(
            "selector row has no positive mass among its top entries".into(),
        ));
    }
    for v in &mut dist {
        *v /= total;
    }
    Ok(dist)
}

pub(crate) fn draw_index<R: Rng + ?Sized>(dist: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Sampling-mode output of a GMM layer.
#[derive(Debug, Clone)]
pub struct SampledControl {
    /// `(n, h, w, D)` control signal for the layer below.
    pub control: Tensor4,
    /// Selected component per position, in `(n, h, w)` order.
    pub selected: Vec<usize>,
}

/// Component selection and emission at every position.
///
/// With a selector `(n, h, w, K)` each position draws from its top-S
/// restricted row; without one, every position draws from the top-S
/// restricted mixing weights. The emitted value is the centroid, or a draw
/// from the component when `stochastic` is set.
pub fn gmm_sample_control<R: Rng + ?Sized>(
    selector: Option<&Tensor4>,
    g: &GmmParams,
    out: Dims,
    top_s: usize,
    stochastic: bool,
    rng: &mut R,
) -> Result<SampledControl> {
    let positions = out.n * out.h * out.w;
    if let Some(sel) = selector {
        let sd = sel.dims();
        if sd != Dims::new(out.n, out.h, out.w, g.k) {
            return Err(Error::Shape(format!(
                "selector {sd} does not match {}x{}x{}x{}",
                out.n, out.h, out.w, g.k
            )));
        }
    }
    let prior = match selector {
        None => Some(top_s_distribution(&g.weights(), top_s)?),
        Some(_) => None,
    };
    let mut control = Tensor4::zeros(Dims::new(out.n, out.h, out.w, g.d));
    let mut selected = Vec::with_capacity(positions);
    for pos in 0..positions {
        let k = match (selector, &prior) {
            (Some(sel), _) => {
                let row = &sel.data()[pos * g.k..(pos + 1) * g.k];
                draw_index(&top_s_distribution(row, top_s)?, rng)
            }
            (None, Some(dist)) => draw_index(dist, rng),
            (None, None) => unreachable!(),
        };
        selected.push(k);
        let dst = &mut control.data_mut()[pos * g.d..(pos + 1) * g.d];
        if stochastic {
            for ((o, &m), &p) in dst.iter_mut().zip(g.centroid(k)).zip(g.precision(k)) {
                let z: f64 = rng.sample(StandardNormal);
                *o = m + z / p.sqrt();
            }
        } else {
            dst.copy_from_slice(g.centroid(k));
        }
    }
    Ok(SampledControl { control, selected })
}
