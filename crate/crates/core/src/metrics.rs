//! Cluster assignment, Dunn and Davies-Bouldin indices, ROC sweeps.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::inference::OutlierStats;
use crate::layers::gmm::argmax;
use crate::model::Model;
use crate::tensor::Tensor4;

/// Component index per sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub k: usize,
}

impl ClusterAssignment {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Config(format!("cluster label {l} outside [0, {k})")));
        }
        Ok(ClusterAssignment { labels, k })
    }

    /// Members of every non-empty cluster, in label order.
    fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.k];
        for (i, &l) in self.labels.iter().enumerate() {
            groups[l].push(i);
        }
        groups.retain(|g| !g.is_empty());
        groups
    }
}

/// Argmax of the topmost GMM layer's responsibilities, which must be a
/// single position.
pub fn assign_clusters(model: &Model, data: &Tensor4, batch: usize) -> Result<ClusterAssignment> {
    let top = model
        .top_gmm()
        .ok_or_else(|| Error::Config("model has no GMM layer".into()))?;
    let out = model.shapes()[top + 1];
    if out.h != 1 || out.w != 1 {
        return Err(Error::Config(format!(
            "top GMM layer has {}x{} positions; cluster assignment needs 1x1",
            out.h, out.w
        )));
    }
    let act = model.top_activities(data, batch)?;
    let labels = act.data().chunks(out.c).map(argmax).collect();
    ClusterAssignment::new(labels, out.c)
}

fn flat<'a>(data: &'a Tensor4, a: &ClusterAssignment) -> Result<ArrayView2<'a, f64>> {
    let d = data.dims();
    if d.n != a.labels.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} samples",
            a.labels.len(),
            d.n
        )));
    }
    Ok(ArrayView2::from_shape((d.n, d.per_sample()), data.data()).expect("contiguous"))
}

const BLOCK: usize = 1024;

/// Euclidean distances between all rows of `x[rows_a]` and `x[rows_b]` via
/// the expansion `|a|² + |b|² − 2a·b`, visited block by block.
fn for_each_distance_block<F>(x: ArrayView2<'_, f64>, norms: &Array1<f64>, mut f: F)
where
    F: FnMut(usize, usize, &Array2<f64>),
{
    let n = x.nrows();
    for a0 in (0..n).step_by(BLOCK) {
        let a1 = (a0 + BLOCK).min(n);
        let xa = x.slice(s![a0..a1, ..]);
        for b0 in (a0..n).step_by(BLOCK) {
            let b1 = (b0 + BLOCK).min(n);
            let xb = x.slice(s![b0..b1, ..]);
            let mut d = xa.dot(&xb.t());
            for ((i, j), v) in d.indexed_iter_mut() {
                let sq = norms[a0 + i] + norms[b0 + j] - 2.0 * *v;
                *v = sq.max(0.0).sqrt();
            }
            f(a0, b0, &d);
        }
    }
}

/// Smallest single-linkage distance between two clusters divided by the
/// largest cluster diameter. Empty clusters are ignored.
pub fn dunn_index(data: &Tensor4, a: &ClusterAssignment) -> Result<f64> {
    let x = flat(data, a)?;
    let groups = a.groups();
    if groups.len() < 2 {
        return Err(Error::Degenerate(
            "Dunn index needs two non-empty clusters".into(),
        ));
    }
    let centred = &x
        - &x.mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
    let norms = centred.map_axis(Axis(1), |r| r.dot(&r));
    let mut widest = (f64::NEG_INFINITY, 0, 0);
    let mut closest = (f64::INFINITY, 0, 0);
    for_each_distance_block(centred.view(), &norms, |a0, b0, d| {
        for ((i, j), &v) in d.indexed_iter() {
            let (p, q) = (a0 + i, b0 + j);
            if q <= p {
                continue;
            }
            if a.labels[p] == a.labels[q] {
                if v > widest.0 {
                    widest = (v, p, q);
                }
            } else if v < closest.0 {
                closest = (v, p, q);
            }
        }
    });
    // The expansion loses precision for close pairs; recompute the winners.
    let exact = |p: usize, q: usize| {
        x.row(p)
            .iter()
            .zip(x.row(q))
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let diameter = if widest.0.is_finite() {
        exact(widest.1, widest.2)
    } else {
        0.0
    };
    let separation = exact(closest.1, closest.2);
    if diameter <= 0.0 {
        return Err(Error::Degenerate("every cluster has zero diameter".into()));
    }
    Ok(separation / diameter)
}

/// Mean over clusters of the worst `(s_i + s_j) / d(c_i, c_j)`, with `s` the
/// mean distance to the cluster centroid. Empty clusters are ignored.
pub fn davies_bouldin(data: &Tensor4, a: &ClusterAssignment) -> Result<f64> {
    let x = flat(data, a)?;
    let groups = a.groups();
    if groups.len() < 2 {
        return Err(Error::Degenerate(
            "Davies-Bouldin score needs two non-empty clusters".into(),
        ));
    }
    let dim = x.ncols();
    let mut centroids = Array2::<f64>::zeros((groups.len(), dim));
    let mut scatter = vec![0.0; groups.len()];
    for (g, members) in groups.iter().enumerate() {
        let mut c = centroids.row_mut(g);
        for &m in members {
            c += &x.row(m);
        }
        c /= members.len() as f64;
        let c = centroids.row(g);
        scatter[g] = members
            .iter()
            .map(|&m| {
                x.row(m)
                    .iter()
                    .zip(c)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / members.len() as f64;
    }
    let mut total = 0.0;
    for i in 0..groups.len() {
        let mut worst: f64 = 0.0;
        for j in 0..groups.len() {
            if i == j {
                continue;
            }
            let d = centroids
                .row(i)
                .iter()
                .zip(centroids.row(j))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            if d == 0.0 {
                return Err(Error::Degenerate(format!(
                    "clusters {i} and {j} have coincident centroids"
                )));
            }
            worst = worst.max((scatter[i] + scatter[j]) / d);
        }
        total += worst;
    }
    Ok(total / groups.len() as f64)
}

/// One operating point: fractions of each score set at or above `threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    /// Cutoff that produced the threshold, for the `mean − c·std` sweep.
    pub c: Option<f64>,
    pub threshold: f64,
    /// Fraction of inlier scores accepted.
    pub true_inlier_rate: f64,
    /// Fraction of outlier scores accepted.
    pub false_inlier_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// The `c` sweep first (ascending `c`), then one point per distinct
    /// score (ascending).
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Cutoffs `−2, −1.95, …, 2`.
pub fn cutoff_sweep() -> Vec<f64> {
    (0..=80).map(|i| -2.0 + 0.05 * i as f64).collect()
}

fn rate(scores: &[f64], threshold: f64) -> f64 {
    scores.iter().filter(|&&s| s >= threshold).count() as f64 / scores.len() as f64
}

/// ROC operating points for thresholds `mean − c·std` over the cutoff sweep
/// plus every distinct score, and the trapezoid area under the curve.
pub fn roc_points(inliers: &[f64], outliers: &[f64], mean: f64, std: f64) -> Result<RocCurve> {
    if inliers.is_empty() || outliers.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if inliers.iter().chain(outliers).any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("scores must be finite".into()));
    }
    let point = |c: Option<f64>, threshold: f64| RocPoint {
        c,
        threshold,
        true_inlier_rate: rate(inliers, threshold),
        false_inlier_rate: rate(outliers, threshold),
    };
    let mut points: Vec<RocPoint> = cutoff_sweep()
        .into_iter()
        .map(|c| point(Some(c), mean - c * std))
        .collect();
    let mut distinct: Vec<f64> = inliers.iter().chain(outliers).copied().collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    points.extend(distinct.iter().map(|&t| point(None, t)));

    let mut curve: Vec<(f64, f64)> = points
        .iter()
        .map(|p| (p.false_inlier_rate, p.true_inlier_rate))
        .chain([(0.0, 0.0), (1.0, 1.0)])
        .collect();
    curve.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let auc = curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum();
    Ok(RocCurve { points, auc })
}

/// Per-sample outlier score: top GMM log-likelihood averaged over positions.
pub fn outlier_scores(model: &Model, data: &Tensor4, batch: usize) -> Result<Vec<f64>> {
    model.top_loglik(data, batch)?.reduce_mean_over_positions()
}

/// Mean and standard deviation of the score implied by the training
/// statistics of the top GMM layer: the position-averaged mean and the
/// root of the position-averaged variance.
pub fn score_moments(model: &Model, stats: &OutlierStats) -> Result<(f64, f64)> {
    stats.check_model(model)?;
    if stats.count() == 0 {
        return Err(Error::Config("outlier statistics are empty".into()));
    }
    let top = model
        .top_gmm()
        .ok_or_else(|| Error::Config("model has no GMM layer".into()))?;
    let mean = stats.mean_map(top)?;
    let var = stats.var_map(top)?;
    let p = mean.data().len() as f64;
    Ok((
        mean.data().iter().sum::<f64>() / p,
        (var.data().iter().sum::<f64>() / p).sqrt(),
    ))
}

/// ROC of inlier against outlier data, thresholds from the training statistics.
pub fn outlier_roc(
    model: &Model,
    stats: &OutlierStats,
    inliers: &Tensor4,
    outliers: &Tensor4,
    batch: usize,
) -> Result<RocCurve> {
    let (mean, std) = score_moments(model, stats)?;
    roc_points(
        &outlier_scores(model, inliers, batch)?,
        &outlier_scores(model, outliers, batch)?,
        mean,
        std,
    )
}
