//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::path::PathBuf;

use dcgmm::layers::{gmm_grad, gmm_loss, ClassifierParams, GmmParams, LossMode, Smoothing};
use dcgmm::{Dims, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Gradients below this magnitude are compared on an absolute scale, since
/// central differences carry roughly `ε·|loss|/step` of rounding noise.
pub const FD_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

fn central<F: FnMut(f64) -> f64>(x: f64, mut f: F) -> f64 {
    (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
}

#[derive(Debug, Default, Clone)]
pub struct GradReport {
    pub instances: usize,
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst: String,
}

impl GradReport {
    fn record(&mut self, what: &str, analytic: f64, numeric: f64) {
        self.checked += 1;
        let e = relative_error(analytic, numeric);
        if e > self.max_relative_error || e.is_nan() {
            self.max_relative_error = e;
            self.worst = format!("{what}: analytic {analytic:e}, numeric {numeric:e}");
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Finite-difference check of GMM layer gradients (mixing logits, centroids,
/// precisions and input) on random instances with `K ≤ 5`, `D ≤ 8`.
pub fn check_gmm_gradients(instances: usize, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::default();
    for inst in 0..instances {
        let k = rng.random_range(1..=5);
        let d = rng.random_range(1..=8);
        let dims = Dims::new(
            rng.random_range(1..=3),
            rng.random_range(1..=3),
            rng.random_range(1..=3),
            d,
        );
        let input = Tensor4::from_vec(dims, uniform(&mut rng, dims.len(), 0.0, 1.0)).unwrap();
        let g = GmmParams::new(
            k,
            d,
            uniform(&mut rng, k, -1.0, 1.0),
            uniform(&mut rng, k * d, 0.0, 1.0),
            uniform(&mut rng, k * d, 0.5, 2.0),
        )
        .unwrap();
        let (mode, smoothing) = match inst % 3 {
            0 => (LossMode::Full, Smoothing::point()),
            1 => (LossMode::MaxComponent, Smoothing::point()),
            _ => (
                LossMode::MaxComponent,
                Smoothing::new(rng.random_range(0.3..1.5)),
            ),
        };
        let (grads, d_input) = gmm_grad(&input, &g, mode, smoothing).unwrap();
        let loss = |g: &GmmParams, x: &Tensor4| gmm_loss(x, g, mode, smoothing).unwrap();

        for j in 0..k {
            let numeric = central(g.pi_logits()[j], |v| {
                let mut h = g.clone();
                h.pi_logits_mut()[j] = v;
                loss(&h, &input)
            });
            report.record("mixing logit", grads.d_pi_logits[j], numeric);
        }
        for i in 0..k * d {
            let numeric = central(g.centroids()[i], |v| {
                let mut h = g.clone();
                h.centroids_mut()[i] = v;
                loss(&h, &input)
            });
            report.record("centroid", grads.d_centroids[i], numeric);
            let numeric = central(g.precisions()[i], |v| {
                let mut h = g.clone();
                h.precisions_mut()[i] = v;
                loss(&h, &input)
            });
            report.record("precision", grads.d_precisions[i], numeric);
        }
        for i in 0..dims.len() {
            let numeric = central(input.data()[i], |v| {
                let mut x = input.clone();
                x.data_mut()[i] = v;
                loss(&g, &x)
            });
            report.record("input", d_input.data()[i], numeric);
        }
        report.instances += 1;
    }
    report
}

/// Finite-difference check of the classifier's cross-entropy gradients
/// (weights, bias and input).
pub fn check_classifier_gradients(instances: usize, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::default();
    for _ in 0..instances {
        let d = rng.random_range(1..=8);
        let m = rng.random_range(2..=5);
        let n = rng.random_range(1..=4);
        let c = ClassifierParams::new(
            d,
            m,
            uniform(&mut rng, d * m, -1.0, 1.0),
            uniform(&mut rng, m, -0.5, 0.5),
        )
        .unwrap();
        let input =
            Tensor4::from_vec(Dims::new(n, 1, 1, d), uniform(&mut rng, n * d, 0.0, 1.0)).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
        let (_, grads, d_input) = c.loss_and_grad(&input, &labels).unwrap();
        let loss = |c: &ClassifierParams, x: &Tensor4| c.loss_and_grad(x, &labels).unwrap().0;

        for i in 0..d * m {
            let numeric = central(c.weights()[i], |v| {
                let mut h = c.clone();
                h.weights_mut()[i] = v;
                loss(&h, &input)
            });
            report.record("classifier weight", grads.d_weights[i], numeric);
        }
        for i in 0..m {
            let numeric = central(c.bias()[i], |v| {
                let mut h = c.clone();
                h.bias_mut()[i] = v;
                loss(&h, &input)
            });
            report.record("classifier bias", grads.d_bias[i], numeric);
        }
        for i in 0..n * d {
            let numeric = central(input.data()[i], |v| {
                let mut x = input.clone();
                x.data_mut()[i] = v;
                loss(&c, &x)
            });
            report.record("classifier input", d_input.data()[i], numeric);
        }
        report.instances += 1;
    }
    report
}

/// Three well-separated isotropic 2-D clusters; returns the points as a
/// `(n, 1, 1, 2)` tensor and the generating means.
pub fn three_cluster_mixture(n: usize, seed: u64) -> (Tensor4, Vec<[f64; 2]>) {
    use rand_distr::{Distribution, Normal};
    let means = vec![[-2.0, -1.0], [2.0, -1.0], [0.0, 2.5]];
    let weights = [0.3, 0.3, 0.4];
    let sd = 0.25;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sd).unwrap();
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let u: f64 = rng.random();
        let j = if u < weights[0] {
            0
        } else if u < weights[0] + weights[1] {
            1
        } else {
            2
        };
        data.push(means[j][0] + noise.sample(&mut rng));
        data.push(means[j][1] + noise.sample(&mut rng));
    }
    (
        Tensor4::from_vec(Dims::new(n, 1, 1, 2), data).unwrap(),
        means,
    )
}

/// Expectation-maximization for a diagonal-covariance mixture, written
/// directly from the textbook updates in plain loops.
pub fn textbook_em(points: &[[f64; 2]], init_means: &[[f64; 2]], iters: usize) -> Vec<[f64; 2]> {
    let k = init_means.len();
    let n = points.len() as f64;
    let mut means = init_means.to_vec();
    let mut vars = vec![[1.0, 1.0]; k];
    let mut weights = vec![1.0 / k as f64; k];
    let mut resp = vec![vec![0.0; k]; points.len()];
    for _ in 0..iters {
        for (p, r) in points.iter().zip(resp.iter_mut()) {
            let mut total = 0.0;
            for j in 0..k {
                let mut dens = weights[j];
                for e in 0..2 {
                    let diff = p[e] - means[j][e];
                    dens *= (-diff * diff / (2.0 * vars[j][e])).exp()
                        / (2.0 * std::f64::consts::PI * vars[j][e]).sqrt();
                }
                r[j] = dens;
                total += dens;
            }
            for v in r.iter_mut() {
                *v /= total;
            }
        }
        for j in 0..k {
            let nj: f64 = resp.iter().map(|r| r[j]).sum();
            weights[j] = nj / n;
            for e in 0..2 {
                let m = points
                    .iter()
                    .zip(&resp)
                    .map(|(p, r)| r[j] * p[e])
                    .sum::<f64>()
                    / nj;
                let v = points
                    .iter()
                    .zip(&resp)
                    .map(|(p, r)| r[j] * (p[e] - m).powi(2))
                    .sum::<f64>()
                    / nj;
                means[j][e] = m;
                vars[j][e] = v.max(1e-6);
            }
        }
    }
    means
}

/// Farthest-first choice of `k` starting means: the first point, then
/// repeatedly the point farthest from all chosen ones.
pub fn farthest_first(points: &[[f64; 2]], k: usize) -> Vec<[f64; 2]> {
    let dist = |a: &[f64; 2], b: &[f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let mut chosen = vec![points[0]];
    while chosen.len() < k {
        let next = points
            .iter()
            .max_by(|a, b| {
                let da = chosen
                    .iter()
                    .map(|c| dist(a, c))
                    .fold(f64::INFINITY, f64::min);
                let db = chosen
                    .iter()
                    .map(|c| dist(b, c))
                    .fold(f64::INFINITY, f64::min);
                da.total_cmp(&db)
            })
            .expect("non-empty");
        chosen.push(*next);
    }
    chosen
}

/// Largest per-coordinate deviation between two sets of means under the
/// best matching of their elements.
pub fn best_permutation_error(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    fn permutations(items: Vec<usize>) -> Vec<Vec<usize>> {
        if items.len() <= 1 {
            return vec![items];
        }
        let mut out = Vec::new();
        for i in 0..items.len() {
            let mut rest = items.clone();
            let head = rest.remove(i);
            for mut p in permutations(rest) {
                p.insert(0, head);
                out.push(p);
            }
        }
        out
    }
    assert_eq!(a.len(), b.len());
    permutations((0..a.len()).collect())
        .into_iter()
        .map(|perm| {
            perm.iter()
                .enumerate()
                .flat_map(|(i, &j)| (0..2).map(move |e| (a[i][e] - b[j][e]).abs()))
                .fold(0.0, f64::max)
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn as_points(t: &Tensor4) -> Vec<[f64; 2]> {
    t.data().chunks(2).map(|c| [c[0], c[1]]).collect()
}

pub fn centroids(g: &GmmParams) -> Vec<[f64; 2]> {
    (0..g.components())
        .map(|j| [g.centroid(j)[0], g.centroid(j)[1]])
        .collect()
}

#[derive(Debug, serde::Deserialize)]
pub struct ShapeCase {
    pub name: String,
    pub arch: String,
    #[serde(default)]
    pub dims: Option<Vec<(usize, usize, usize)>>,
    #[serde(default)]
    pub error_layer: Option<usize>,
}

pub fn shape_cases() -> Vec<ShapeCase> {
    let path =
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/architecture_shapes.json");
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

/// Checks every fixture architecture; returns a description of each mismatch.
pub fn shape_mismatches() -> Vec<String> {
    use dcgmm::io::parse_architecture;
    use dcgmm::Error;
    let mut bad = Vec::new();
    for case in shape_cases() {
        let text = format!("input 28 28 1 / {}", case.arch);
        match (parse_architecture(&text), &case.dims, case.error_layer) {
            (Ok(cfg), Some(want), None) => {
                let got: Vec<_> = cfg
                    .shapes()
                    .unwrap()
                    .iter()
                    .map(|d| (d.h, d.w, d.c))
                    .collect();
                if &got != want {
                    bad.push(format!("{}: got {got:?}, want {want:?}", case.name));
                }
            }
            (Err(Error::LayerConfig { layer, .. }), None, Some(want)) if layer == want => {}
            (other, _, _) => bad.push(format!("{}: unexpected {:?}", case.name, other.map(|_| ()))),
        }
    }
    bad
}

/// Directory holding the MNIST IDX files: `DCGMM_MNIST_DIR`, else
/// `<workspace>/data/mnist`.
pub fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("DCGMM_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.join("train-images-idx3-ubyte").exists().then_some(dir)
}

pub mod properties;
