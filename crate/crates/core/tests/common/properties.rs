//! Property suites that need no trained model. Each returns a description
//! of the first counterexample.

use std::path::Path;

use dcgmm::inference::{collect_outlier_stats, is_inlier};
use dcgmm::io::{
    decode_checkpoint, encode_checkpoint, encode_image_grid, parse_architecture, parse_idx_images,
    to_byte, Checkpoint, RngState,
};
use dcgmm::layers::{gmm_forward, top_s_distribution, FoldingParams, GmmParams, PoolingParams};
use dcgmm::metrics::roc_points;
use dcgmm::{Dims, Model, Tensor4};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

pub type Suite = (&'static str, fn() -> Result<(), String>);

pub const SUITES: &[Suite] = &[
    ("responsibilities sum to one", responsibilities_normalized),
    ("folding roundtrip and adjoint", folding_laws),
    ("pooling laws", pooling_laws),
    ("top-S limit cases", top_s_limits),
    ("inlier test monotone in c", inlier_monotone),
    ("checkpoint byte roundtrip", checkpoint_roundtrip),
    ("IDX and PGM fixtures", idx_pgm_fixtures),
    ("AUC equals pairwise oracle", auc_pairwise),
];

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

fn run<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    runner(cases)
        .run(&strategy, test)
        .map_err(|e| e.to_string())
}

fn tensor(dims: Dims, lo: f64, hi: f64) -> impl Strategy<Value = Tensor4> {
    prop::collection::vec(lo..hi, dims.len()).prop_map(move |v| Tensor4::from_vec(dims, v).unwrap())
}

fn small_dims(max_hw: usize, max_c: usize) -> impl Strategy<Value = Dims> {
    (1..=2usize, 1..=max_hw, 1..=max_hw, 1..=max_c).prop_map(|(n, h, w, c)| Dims::new(n, h, w, c))
}

pub fn responsibilities_normalized() -> Result<(), String> {
    let case = (small_dims(4, 6), 1..=6usize).prop_flat_map(|(dims, k)| {
        let d = dims.c;
        (
            tensor(dims, -3.0, 3.0),
            prop::collection::vec(-2.0..2.0f64, k),
            prop::collection::vec(-2.0..2.0f64, k * d),
            prop::collection::vec(0.05..20.0f64, k * d),
        )
    });
    run(200, case, |(x, logits, mu, prec)| {
        let k = logits.len();
        let g = GmmParams::new(k, x.dims().c, logits, mu, prec).unwrap();
        let (act, loglik) = gmm_forward(&x, &g).unwrap();
        for row in act.data().chunks(k) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9, "row sums to {s}");
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        prop_assert!(loglik.all_finite());
        Ok(())
    })
}

pub fn folding_laws() -> Result<(), String> {
    let case = (
        1..=3usize,
        1..=3usize,
        1..=3usize,
        1..=3usize,
        0..=3usize,
        0..=3usize,
        1..=3usize,
    )
        .prop_flat_map(|(fy, fx, dy, dx, wy, wx, c)| {
            let (dy, dx) = (dy.min(fy), dx.min(fx));
            let dims = Dims::new(2, fy + wy * dy, fx + wx * dx, c);
            let out = Dims::new(2, wy + 1, wx + 1, fy * fx * c);
            (
                Just((fy, fx, dy, dx)),
                tensor(dims, -1.0, 1.0),
                tensor(out, -1.0, 1.0),
            )
        });
    run(200, case, |((fy, fx, dy, dx), x, y)| {
        let f = FoldingParams::new(fy, fx, dy, dx).unwrap();
        let folded = f.forward(&x).unwrap();
        prop_assert_eq!(folded.dims(), y.dims());
        let back = f.backward_control(&folded, x.dims()).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            prop_assert!((a - b).abs() < 1e-12, "roundtrip {a} vs {b}");
        }
        let lhs: f64 = folded.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let adj = f.backward_grad(&y, x.dims()).unwrap();
        let rhs: f64 = x.data().iter().zip(adj.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-10, "adjoint {lhs} vs {rhs}");
        Ok(())
    })
}

pub fn pooling_laws() -> Result<(), String> {
    let case = (1..=3usize, 1..=3usize, 1..=3usize, 1..=3usize, 1..=3usize).prop_flat_map(
        |(k, oh, ow, c, n)| {
            let dims = Dims::new(n, k * oh, k * ow, c);
            (
                Just(k),
                tensor(dims, -1.0, 1.0),
                tensor(Dims::new(n, oh, ow, c), -1.0, 1.0),
            )
        },
    );
    run(200, case, |(k, x, g)| {
        let p = PoolingParams::new(k, k, k, k).unwrap();
        let (y, argmax) = p.forward_with_argmax(&x).unwrap();
        prop_assert_eq!(y.dims(), g.dims());
        // every output is the largest element of its window
        let up = p.backward_control(&y, x.dims()).unwrap();
        for (u, v) in up.data().iter().zip(x.data()) {
            prop_assert!(u >= v);
        }
        for (&at, &v) in argmax.iter().zip(y.data()) {
            prop_assert_eq!(x.data()[at], v);
        }
        // up-sampling then pooling is the identity
        let again = p
            .forward(&p.backward_control(&g, x.dims()).unwrap())
            .unwrap();
        prop_assert_eq!(&again, &g);
        // gradient routing is the adjoint of selecting the maxima
        let routed = p.backward_grad(&g, &argmax, x.dims()).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(routed.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-12);
        // constants pass through unchanged
        let flat = Tensor4::new_filled(x.dims(), 0.3);
        prop_assert!(p.forward(&flat).unwrap().data().iter().all(|&v| v == 0.3));
        Ok(())
    })
}

pub fn top_s_limits() -> Result<(), String> {
    let case = prop::collection::vec(0.0..1.0f64, 1..12)
        .prop_filter("non-zero", |r| r.iter().any(|&v| v > 0.0));
    run(300, (case, 1..12usize), |(row, s)| {
        let k = row.len();
        let one = top_s_distribution(&row, 1).unwrap();
        let best = (0..k).fold(0, |b, i| if row[i] > row[b] { i } else { b });
        prop_assert_eq!(one[best], 1.0);
        prop_assert_eq!(one.iter().filter(|&&v| v > 0.0).count(), 1);

        let total: f64 = row.iter().sum();
        let all = top_s_distribution(&row, k).unwrap();
        for (a, r) in all.iter().zip(&row) {
            prop_assert!((a - r / total).abs() < 1e-12);
        }

        let some = top_s_distribution(&row, s).unwrap();
        prop_assert!((some.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(some.iter().filter(|&&v| v > 0.0).count() <= s.min(k));
        // kept entries are never smaller than dropped ones
        let kept_min = (0..k)
            .filter(|&i| some[i] > 0.0)
            .map(|i| row[i])
            .fold(f64::INFINITY, f64::min);
        let dropped_max = (0..k)
            .filter(|&i| some[i] == 0.0 && row[i] > 0.0)
            .map(|i| row[i])
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(kept_min >= dropped_max);
        Ok(())
    })
}

pub fn inlier_monotone() -> Result<(), String> {
    let arch = parse_architecture("input 4 4 1 / F(2,2,2,2) / G(3) / F(2,2,1,1) / G(4)").unwrap();
    let case = (
        0..1000u64,
        tensor(Dims::new(12, 4, 4, 1), 0.0, 1.0),
        tensor(Dims::new(5, 4, 4, 1), -0.5, 1.5),
        prop::collection::vec(-3.0..3.0f64, 2..6),
    );
    run(40, case, |(seed, train, probe, mut cs)| {
        let model = Model::init(&arch, seed).unwrap();
        let stats = collect_outlier_stats(&model, &train, 5).unwrap();
        cs.sort_by(f64::total_cmp);
        let verdicts: Vec<_> = cs
            .iter()
            .map(|&c| is_inlier(&model, &stats, &probe, c).unwrap())
            .collect();
        for pair in verdicts.windows(2) {
            for ((_, lo), (_, hi)) in pair[0].masks.iter().zip(&pair[1].masks) {
                prop_assert!(lo.iter().zip(hi).all(|(&a, &b)| !a || b));
            }
            prop_assert!(pair[0]
                .global
                .iter()
                .zip(&pair[1].global)
                .all(|(&a, &b)| !a || b));
        }
        Ok(())
    })
}

pub fn checkpoint_roundtrip() -> Result<(), String> {
    let archs = [
        "input 6 6 1 / F(3,3,1,1) / G(4) / P(2,2) / F(2,2,1,1) / G(3) / C(2)",
        "input 4 4 2 / F(4,4,1,1) / G(5)",
    ];
    let case = (
        0..archs.len(),
        any::<u64>(),
        any::<u64>(),
        any::<u128>(),
        any::<bool>(),
    );
    run(40, case, |(a, seed, rng_seed, word_pos, with_stats)| {
        let arch = parse_architecture(archs[a]).unwrap();
        let model = Model::init(&arch, seed).unwrap();
        let stats = with_stats.then(|| {
            let d = model.input_dims().with_batch(3);
            let x =
                Tensor4::from_vec(d, (0..d.len()).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
            collect_outlier_stats(&model, &x, 2).unwrap()
        });
        let ck = Checkpoint {
            model,
            stats,
            training: None,
            rng: RngState {
                seed: rng_seed,
                word_pos,
            },
        };
        let bytes = encode_checkpoint(&ck).unwrap();
        let back = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        Ok(())
    })
}

pub fn idx_pgm_fixtures() -> Result<(), String> {
    let case = (1..4u32, 1..6u32, 1..6u32).prop_flat_map(|(n, h, w)| {
        (
            Just((n, h, w)),
            prop::collection::vec(any::<u8>(), (n * h * w) as usize),
        )
    });
    run(100, case, |((n, h, w), pixels)| {
        let mut bytes = Vec::new();
        for v in [0x803, n, h, w] {
            bytes.extend(v.to_be_bytes());
        }
        bytes.extend(&pixels);
        let x = parse_idx_images(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(x.dims(), Dims::new(n as usize, h as usize, w as usize, 1));
        for (v, &b) in x.data().iter().zip(&pixels) {
            prop_assert_eq!(*v, b as f64 / 255.0);
            prop_assert_eq!(to_byte(*v), b);
        }
        // a one-column grid holds the pixels row by row with separator rows
        let pgm = encode_image_grid(&x, 1).unwrap();
        let header = format!("P5\n{} {}\n255\n", w, n * h + n - 1);
        prop_assert_eq!(&pgm[..header.len()], header.as_bytes());
        let body = &pgm[header.len()..];
        let (h, w) = (h as usize, w as usize);
        for i in 0..n as usize {
            let cell = &body[i * (h + 1) * w..i * (h + 1) * w + h * w];
            prop_assert_eq!(cell, &pixels[i * h * w..(i + 1) * h * w]);
        }
        Ok(())
    })
}

/// Probability that a random inlier outscores a random outlier, ties
/// counting one half.
pub fn pairwise_auc(inliers: &[f64], outliers: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &a in inliers {
        for &b in outliers {
            wins += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (inliers.len() * outliers.len()) as f64
}

pub fn auc_pairwise() -> Result<(), String> {
    // coarse values so that ties occur
    let scores = |n| prop::collection::vec((-20i32..20).prop_map(|v| v as f64 / 4.0), 1..n);
    run(
        300,
        (scores(40), scores(40), -3.0..3.0f64, 0.0..3.0f64),
        |(a, b, mean, std)| {
            let roc = roc_points(&a, &b, mean, std).unwrap();
            let oracle = pairwise_auc(&a, &b);
            prop_assert!((roc.auc - oracle).abs() < 1e-6, "{} vs {oracle}", roc.auc);
            Ok(())
        },
    )
}
