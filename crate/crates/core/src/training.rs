//! Mini-batch SGD for all layers at once.
//!
//! Every GMM layer maximizes its own log-likelihood objective on the
//! activities it receives; no gradient crosses layer boundaries. A
//! classifier on top minimizes cross-entropy on the same pass.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::OutlierStats;
use crate::layers::{gmm_pass_sharded, LossMode, Smoothing};
use crate::model::{ForwardTrace, Layer, Model};
use crate::tensor::Tensor4;

/// Schedule of the max-component smoothing radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annealing {
    /// Starting radius; `None` uses `2·√K/6` per layer.
    pub sigma0: Option<f64>,
    pub sigma_min: f64,
    pub decay: f64,
    /// Relative loss improvement below which the radius decays.
    pub stagnation: f64,
    /// Mini-batches per stagnation check; `None` checks once per epoch.
    pub window: Option<usize>,
}

impl Default for Annealing {
    fn default() -> Self {
        Annealing {
            sigma0: None,
            sigma_min: 0.01,
            decay: 0.9,
            stagnation: 0.05,
            window: None,
        }
    }
}

impl Annealing {
    pub fn initial_sigma(&self, k: usize) -> f64 {
        self.sigma0
            .unwrap_or(2.0 * (k as f64).sqrt() / 6.0)
            .max(self.sigma_min)
    }

    /// Radius for the next window given the mean losses of the last two.
    pub fn next_sigma(&self, sigma: f64, previous: Option<f64>, current: f64) -> f64 {
        let Some(prev) = previous else { return sigma };
        let improvement = (current - prev) / prev.abs().max(f64::MIN_POSITIVE);
        if improvement < self.stagnation {
            (sigma * self.decay).max(self.sigma_min)
        } else {
            sigma
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Per-sample step size for every GMM layer unless overridden; a batch
    /// step applies it to the gradient summed over the batch.
    pub gmm_learning_rate: f64,
    /// `(layer, rate)` overrides, layers numbered from 1.
    pub layer_learning_rates: Vec<(usize, f64)>,
    pub classifier_learning_rate: f64,
    /// Fraction of epochs during which only centroids move.
    pub phase1_fraction: f64,
    pub loss_mode: LossMode,
    pub annealing: Annealing,
    /// Fraction of final epochs whose log-likelihoods feed the outlier statistics.
    pub stats_fraction: f64,
    pub p_min: f64,
    /// Upper precision bound; keeps near-constant inputs from driving one
    /// component's log-determinant up until it wins every sample.
    pub p_max: f64,
    pub seed: u64,
    pub threads: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 25,
            batch_size: 100,
            gmm_learning_rate: 0.011,
            layer_learning_rates: Vec::new(),
            classifier_learning_rate: 0.05,
            phase1_fraction: 0.4,
            loss_mode: LossMode::MaxComponent,
            annealing: Annealing::default(),
            stats_fraction: 0.2,
            p_min: 1e-3,
            p_max: 3.0,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        let rates = [self.gmm_learning_rate, self.classifier_learning_rate];
        if rates
            .iter()
            .chain(self.layer_learning_rates.iter().map(|(_, r)| r))
            .any(|&r| !(r > 0.0 && r.is_finite()))
        {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.phase1_fraction) {
            return bad("phase-1 fraction must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.stats_fraction) {
            return bad("statistics fraction must lie in [0, 1]");
        }
        if !(self.p_min > 0.0 && self.p_max >= self.p_min) {
            return bad("precision bounds need 0 < p_min <= p_max");
        }
        let a = &self.annealing;
        if !(a.sigma_min >= 0.0 && a.decay > 0.0 && a.decay <= 1.0) {
            return bad("annealing needs sigma_min >= 0 and decay in (0, 1]");
        }
        if a.window == Some(0) {
            return bad("annealing window must be at least one batch");
        }
        if a.sigma0.is_some_and(|s| s < 0.0) {
            return bad("sigma0 must be non-negative");
        }
        Ok(())
    }

    /// Number of leading epochs that adapt centroids only.
    pub fn phase1_epochs(&self) -> usize {
        (self.phase1_fraction * self.epochs as f64).floor() as usize
    }

    /// First (zero-based) epoch whose log-likelihoods enter the statistics.
    pub fn stats_start(&self) -> usize {
        let window = (self.stats_fraction * self.epochs as f64).round() as usize;
        self.epochs - window.clamp(1, self.epochs)
    }

    fn learning_rate(&self, layer: usize) -> f64 {
        self.layer_learning_rates
            .iter()
            .rev()
            .find(|(l, _)| *l == layer + 1)
            .map(|&(_, r)| r)
            .unwrap_or(self.gmm_learning_rate)
    }
}

/// One row per epoch and GMM layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    /// 1-based.
    pub epoch: usize,
    /// 1-based model layer index.
    pub layer: usize,
    /// Mean per-sample layer loss over the epoch.
    pub loss: f64,
    /// Smoothing radius at the start of the epoch.
    pub sigma: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub records: Vec<HistoryRecord>,
    /// Mean classifier cross-entropy per epoch, when a classifier is present.
    pub classifier_loss: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    /// Position of the shuffling stream after the last epoch.
    pub rng_word_pos: u128,
}

impl TrainingHistory {
    /// Loss curve of one GMM layer (1-based index).
    pub fn layer_losses(&self, layer: usize) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.layer == layer)
            .map(|r| r.loss)
            .collect()
    }
}

/// Per-layer loss sums over the current stagnation window.
struct LossWindow {
    sums: Vec<f64>,
    samples: usize,
    batches: usize,
}

impl LossWindow {
    fn new(layers: usize) -> Self {
        LossWindow {
            sums: vec![0.0; layers],
            samples: 0,
            batches: 0,
        }
    }

    fn push(&mut self, losses: &[f64], samples: usize) {
        for (s, l) in self.sums.iter_mut().zip(losses) {
            *s += l;
        }
        self.samples += samples;
        self.batches += 1;
    }

    /// Mean per-sample losses, resetting the window.
    fn take(&mut self) -> Vec<f64> {
        let n = self.samples as f64;
        let means = self.sums.iter().map(|s| s / n).collect();
        *self = LossWindow::new(self.sums.len());
        means
    }
}

struct Step<'a> {
    cfg: &'a TrainingConfig,
    phase2: bool,
    sigmas: &'a [f64],
}

/// Trains `model` in place and returns the loss history plus outlier
/// statistics gathered over the final epochs.
///
/// `labels` are required when the model ends in a classifier.
pub fn train(
    model: &mut Model,
    data: &Tensor4,
    labels: Option<&[usize]>,
    cfg: &TrainingConfig,
) -> Result<(TrainingHistory, OutlierStats)> {
    cfg.validate()?;
    model
        .check_input(data)
        .map_err(|e| Error::Config(e.to_string()))?;
    let n = data.dims().n;
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if model.classifier().is_some() {
        match labels {
            None => return Err(Error::Config("a classifier layer needs labels".into())),
            Some(l) if l.len() != n => {
                return Err(Error::Config(format!("{} labels for {n} samples", l.len())))
            }
            _ => {}
        }
    }
    let gmm_layers = model.gmm_indices();
    let mut sigmas: Vec<f64> = gmm_layers
        .iter()
        .map(|&i| {
            let k = model.gmm(i).expect("gmm").components();
            cfg.annealing.initial_sigma(k)
        })
        .collect();
    let mut previous: Vec<Option<f64>> = vec![None; gmm_layers.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = TrainingHistory::default();
    let mut stats = OutlierStats::empty(model);
    let phase1 = cfg.phase1_epochs();
    let stats_start = cfg.stats_start();

    let mut window = LossWindow::new(gmm_layers.len());
    let anneal = |sigma: &mut f64, previous: &mut Option<f64>, loss: f64| {
        if cfg.loss_mode == LossMode::MaxComponent {
            *sigma = cfg.annealing.next_sigma(*sigma, *previous, loss);
        }
        *previous = Some(loss);
    };

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = vec![0.0; gmm_layers.len()];
        let mut ce_sum = 0.0;
        let epoch_sigmas = sigmas.clone();
        for chunk in order.chunks(cfg.batch_size) {
            let step = Step {
                cfg,
                phase2: epoch >= phase1,
                sigmas: &sigmas,
            };
            let x = data.select_samples(chunk);
            let y: Option<Vec<usize>> = labels.map(|l| chunk.iter().map(|&i| l[i]).collect());
            let (losses, ce, trace) = train_batch(model, &x, y.as_deref(), &step)?;
            for (s, l) in sums.iter_mut().zip(&losses) {
                *s += l;
            }
            ce_sum += ce * chunk.len() as f64;
            if epoch >= stats_start {
                stats.accumulate(&trace)?;
            }
            if let Some(w) = cfg.annealing.window {
                window.push(&losses, chunk.len());
                if window.batches == w {
                    for (j, loss) in window.take().into_iter().enumerate() {
                        anneal(&mut sigmas[j], &mut previous[j], loss);
                    }
                }
            }
        }
        for (j, &layer) in gmm_layers.iter().enumerate() {
            let loss = sums[j] / n as f64;
            history.records.push(HistoryRecord {
                epoch: epoch + 1,
                layer: layer + 1,
                loss,
                sigma: epoch_sigmas[j],
            });
            if cfg.annealing.window.is_none() {
                anneal(&mut sigmas[j], &mut previous[j], loss);
            }
        }
        if model.classifier().is_some() {
            history.classifier_loss.push(ce_sum / n as f64);
        }
        history.epoch_seconds.push(started.elapsed().as_secs_f64());
    }
    history.rng_word_pos = rng.get_word_pos();
    Ok((history, stats))
}

/// One forward pass and one SGD step on every layer. Returns the summed GMM
/// layer losses, the classifier's mean cross-entropy and the trace of
/// pre-update activities.
fn train_batch(
    model: &mut Model,
    x: &Tensor4,
    labels: Option<&[usize]>,
    step: &Step<'_>,
) -> Result<(Vec<f64>, f64, ForwardTrace)> {
    let cfg = step.cfg;
    let mut activities = vec![x.clone()];
    let mut loglik = vec![None];
    let mut losses = Vec::new();
    let mut ce = 0.0;
    let mut gmm_seen = 0;
    for (i, layer) in model.layers_mut().iter_mut().enumerate() {
        let input = activities.last().expect("non-empty");
        let (out, ll) = match layer {
            Layer::Folding(p) => (p.forward(input)?, None),
            Layer::Pooling(p) => (p.forward(input)?, None),
            Layer::Gmm(g) => {
                let smoothing = Smoothing::new(step.sigmas[gmm_seen]);
                gmm_seen += 1;
                let pass = gmm_pass_sharded(input, g, cfg.loss_mode, smoothing, cfg.threads)?;
                if !pass.loss.is_finite() || !pass.grads.all_finite() {
                    return Err(Error::Divergence { layer: i + 1 });
                }
                let lr = cfg.learning_rate(i);
                for (p, d) in g.centroids_mut().iter_mut().zip(&pass.grads.d_centroids) {
                    *p += lr * d;
                }
                if step.phase2 {
                    for (p, d) in g.precisions_mut().iter_mut().zip(&pass.grads.d_precisions) {
                        *p += lr * d;
                    }
                    g.clip_precisions(cfg.p_min, cfg.p_max);
                    for (p, d) in g.pi_logits_mut().iter_mut().zip(&pass.grads.d_pi_logits) {
                        *p += lr * d;
                    }
                }
                losses.push(pass.loss);
                (pass.activities, Some(pass.loglik))
            }
            Layer::Classifier(c) => {
                let y = labels.ok_or_else(|| Error::Config("classifier needs labels".into()))?;
                let (loss, grads, _) = c.loss_and_grad(input, y)?;
                if !loss.is_finite() {
                    return Err(Error::Divergence { layer: i + 1 });
                }
                let lr = cfg.classifier_learning_rate;
                for (p, d) in c.weights_mut().iter_mut().zip(&grads.d_weights) {
                    *p -= lr * d;
                }
                for (p, d) in c.bias_mut().iter_mut().zip(&grads.d_bias) {
                    *p -= lr * d;
                }
                ce = loss;
                (c.forward(input)?, None)
            }
        };
        activities.push(out);
        loglik.push(ll);
    }
    Ok((losses, ce, ForwardTrace { activities, loglik }))
}
