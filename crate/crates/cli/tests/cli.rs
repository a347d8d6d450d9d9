use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dcgmm::io::{encode_image_grid, load_checkpoint, read_idx_images};
use dcgmm::metrics::{assign_clusters, davies_bouldin, dunn_index};

const ARCH_1L: &str = "input 6 6 1\nF(6,6,1,1) / G(4)\n";
const ARCH_CLS: &str = "input 6 6 1 / F(6,6,1,1) / G(4) / C(3)";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dcgmm"));
    c.env_remove("DCGMM_SEED");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn ok(cmd: &mut Command) -> Output {
    let out = run(cmd);
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Three classes of 6x6 images: bright left column band, bright right band,
/// bright middle rows, each with a little deterministic jitter.
fn blobs(n: usize) -> (Vec<u8>, Vec<u8>) {
    let mut images = Vec::with_capacity(16 + n * 36);
    images.extend(0x803u32.to_be_bytes());
    images.extend((n as u32).to_be_bytes());
    images.extend(6u32.to_be_bytes());
    images.extend(6u32.to_be_bytes());
    let mut labels = Vec::with_capacity(8 + n);
    labels.extend(0x801u32.to_be_bytes());
    labels.extend((n as u32).to_be_bytes());
    for i in 0..n {
        let class = i % 3;
        labels.push(class as u8);
        for h in 0..6 {
            for w in 0..6 {
                let on = match class {
                    0 => w < 2,
                    1 => w >= 4,
                    _ => (2..4).contains(&h),
                };
                let jitter = ((i * 7 + h * 5 + w * 3) % 11) as u8 * 3;
                images.push(if on { 220 - jitter } else { 10 + jitter });
            }
        }
    }
    (images, labels)
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new(n: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let (x, y) = blobs(n);
        std::fs::write(dir.path().join("x.idx"), x).unwrap();
        std::fs::write(dir.path().join("y.idx"), y).unwrap();
        std::fs::write(dir.path().join("1l.arch"), ARCH_1L).unwrap();
        std::fs::write(dir.path().join("cls.arch"), ARCH_CLS).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, arch: &str, out: &str, epochs: usize) -> PathBuf {
        let ck = self.path(out);
        ok(bin()
            .args(["train", "--arch"])
            .arg(self.path(arch))
            .arg("--images")
            .arg(self.path("x.idx"))
            .arg("--labels")
            .arg(self.path("y.idx"))
            .args([
                "--epochs",
                &epochs.to_string(),
                "--batch-size",
                "10",
                "--seed",
                "1",
            ])
            .arg("--out")
            .arg(&ck));
        ck
    }
}

fn pgm_dims(bytes: &[u8]) -> (usize, usize) {
    let text = String::from_utf8_lossy(&bytes[..bytes.len().min(32)]).into_owned();
    let mut parts = text.split_whitespace();
    assert_eq!(parts.next(), Some("P5"));
    let w = parts.next().unwrap().parse().unwrap();
    let h = parts.next().unwrap().parse().unwrap();
    (w, h)
}

fn history_rows(path: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(path).unwrap();
    assert_eq!(
        r.headers().unwrap(),
        &csv::StringRecord::from(vec!["epoch", "layer", "loss", "sigma"])
    );
    r.records().map(Result::unwrap).collect()
}

#[test]
fn train_writes_checkpoint_history_and_manifest() {
    let f = Fixture::new(60);
    let ck = f.train("1l.arch", "m.ck", 25);
    let rows = history_rows(&f.path("m.ck.history.csv"));
    assert_eq!(rows.len(), 25);
    assert!(rows.iter().all(|r| &r[1] == "2"));
    assert!(rows
        .iter()
        .all(|r| r[2].parse::<f64>().unwrap().is_finite()));

    let loaded = load_checkpoint(&ck).unwrap();
    assert!(loaded.stats.is_some());
    assert_eq!(loaded.training.unwrap().epochs, 25);

    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(f.path("m.ck.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seed"], 1);
    let outputs = manifest["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), 2);
    assert!(outputs[0]["sha256"].as_str().unwrap().len() == 64);
    assert!(manifest["wall_clock_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn one_epoch_smoke_run_has_finite_losses() {
    let f = Fixture::new(30);
    f.train("cls.arch", "c.ck", 1);
    let rows = history_rows(&f.path("c.ck.history.csv"));
    assert_eq!(rows.len(), 1);
    assert!(rows[0][2].parse::<f64>().unwrap().is_finite());
}

#[test]
fn missing_dataset_is_a_usage_error_naming_the_path() {
    let f = Fixture::new(3);
    let missing = f.path("nope.idx");
    let out = run(bin()
        .args(["train", "--arch"])
        .arg(f.path("1l.arch"))
        .arg("--images")
        .arg(&missing)
        .arg("--out")
        .arg(f.path("m.ck")));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(missing.to_str().unwrap()));
    assert!(!f.path("m.ck").exists());
    assert!(!f.path("m.ck.manifest.json").exists());
}

#[test]
fn bad_architecture_is_a_usage_error() {
    let f = Fixture::new(3);
    std::fs::write(f.path("bad.arch"), "F(6,6,1,1) / G(").unwrap();
    let out = run(bin()
        .args(["train", "--arch"])
        .arg(f.path("bad.arch"))
        .arg("--images")
        .arg(f.path("x.idx"))
        .arg("--out")
        .arg(f.path("m.ck")));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

#[test]
fn sample_grid_and_determinism() {
    let f = Fixture::new(30);
    let ck = f.train("1l.arch", "m.ck", 3);
    let draw = |name: &str, extra: &[&str]| {
        let out = f.path(name);
        ok(bin()
            .args(["sample", "--checkpoint"])
            .arg(&ck)
            .args(["--top-s", "1", "--count", "25", "--seed", "4"])
            .args(extra)
            .arg("--out")
            .arg(&out));
        std::fs::read(out).unwrap()
    };
    let a = draw("a.pgm", &[]);
    assert_eq!(pgm_dims(&a), (5 * 6 + 4, 5 * 6 + 4));
    assert_eq!(draw("b.pgm", &[]), a);
    assert_eq!(draw("c.pgm", &["--threads", "2"]), a);
    assert!(f.path("a.pgm.manifest.json").exists());
}

#[test]
fn seed_falls_back_to_environment() {
    let f = Fixture::new(30);
    let ck = f.train("1l.arch", "m.ck", 2);
    let draw = |name: &str, seed: Option<&str>| {
        let out = f.path(name);
        let mut c = bin();
        c.args([
            "sample",
            "--stochastic",
            "--sharpen-iters",
            "0",
            "--checkpoint",
        ])
        .arg(&ck)
        .arg("--out")
        .arg(&out);
        match seed {
            Some(s) => c.env("DCGMM_SEED", s),
            None => c.args(["--seed", "9"]),
        };
        ok(&mut c);
        std::fs::read(out).unwrap()
    };
    assert_eq!(draw("env.pgm", Some("9")), draw("flag.pgm", None));
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(f.path("env.pgm.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 9);
}

#[test]
fn cond_sample_without_classifier_is_a_usage_error() {
    let f = Fixture::new(30);
    let ck = f.train("1l.arch", "m.ck", 1);
    let out = run(bin()
        .args(["cond-sample", "--label", "1", "--checkpoint"])
        .arg(&ck)
        .arg("--out")
        .arg(f.path("c.pgm")));
    assert_eq!(out.status.code(), Some(2));
    assert!(!f.path("c.pgm").exists());
}

#[test]
fn cond_sample_with_classifier() {
    let f = Fixture::new(30);
    let ck = f.train("cls.arch", "c.ck", 2);
    ok(bin()
        .args([
            "cond-sample",
            "--label",
            "2",
            "--count",
            "4",
            "--checkpoint",
        ])
        .arg(&ck)
        .arg("--out")
        .arg(f.path("c.pgm")));
    assert_eq!(pgm_dims(&std::fs::read(f.path("c.pgm")).unwrap()), (13, 13));
}

#[test]
fn variants_at_cutoff_zero_reproduce_templates() {
    let f = Fixture::new(30);
    let ck = f.train("1l.arch", "m.ck", 2);
    ok(bin()
        .args([
            "variants", "--cutoff", "0", "--top-s", "1", "--count", "3", "--limit", "4",
        ])
        .arg("--checkpoint")
        .arg(&ck)
        .arg("--images")
        .arg(f.path("x.idx"))
        .arg("--out")
        .arg(f.path("v.pgm")));
    let x = read_idx_images(f.path("x.idx")).unwrap();
    let repeated: Vec<usize> = (0..4).flat_map(|i| [i, i, i]).collect();
    let expected = encode_image_grid(&x.select_samples(&repeated), 3).unwrap();
    assert_eq!(std::fs::read(f.path("v.pgm")).unwrap(), expected);
}

#[test]
fn inpaint_writes_both_grids() {
    let f = Fixture::new(30);
    let ck = f.train("1l.arch", "m.ck", 2);
    ok(bin()
        .args([
            "inpaint", "--blank", "top-left", "--limit", "4", "--c", "-0.5",
        ])
        .arg("--checkpoint")
        .arg(&ck)
        .arg("--images")
        .arg(f.path("x.idx"))
        .arg("--corrupted-out")
        .arg(f.path("in.pgm"))
        .arg("--out")
        .arg(f.path("out.pgm")));
    assert_eq!(
        pgm_dims(&std::fs::read(f.path("out.pgm")).unwrap()),
        (13, 13)
    );
    assert_eq!(
        pgm_dims(&std::fs::read(f.path("in.pgm")).unwrap()),
        (13, 13)
    );
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(f.path("out.pgm.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["outputs"].as_array().unwrap().len(), 2);
}

#[test]
fn outliers_against_identical_data_give_chance_auc() {
    let f = Fixture::new(30);
    let ck = f.train("1l.arch", "m.ck", 3);
    let out = ok(bin()
        .args([
            "outliers",
            "--inlier-classes",
            "0-2",
            "--outlier-classes",
            "0-2",
        ])
        .arg("--checkpoint")
        .arg(&ck)
        .arg("--images")
        .arg(f.path("x.idx"))
        .arg("--labels")
        .arg(f.path("y.idx"))
        .arg("--out")
        .arg(f.path("roc.csv")));
    let text = std::fs::read_to_string(f.path("roc.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "c,threshold,true_inlier_rate,false_inlier_rate");
    let auc_line = lines.last().unwrap();
    let auc: f64 = auc_line.split(',').nth(1).unwrap().parse().unwrap();
    assert!((auc - 0.5).abs() < 1e-12, "{auc}");
    assert!(String::from_utf8_lossy(&out.stdout).contains("auc,"));

    let ck = load_checkpoint(&ck).unwrap();
    let x = read_idx_images(f.path("x.idx")).unwrap();
    let mut scores = dcgmm::metrics::outlier_scores(&ck.model, &x, 100).unwrap();
    scores.sort_by(f64::total_cmp);
    scores.dedup();
    assert_eq!(lines.len(), 1 + 81 + scores.len() + 1);
    assert_eq!(lines[1].split(',').next(), Some("-2.00"));
    assert_eq!(lines[81].split(',').next(), Some("2.00"));
}

#[test]
fn outliers_need_statistics_and_data() {
    let f = Fixture::new(30);
    let ck = f.train("1l.arch", "m.ck", 1);
    let out = run(bin()
        .args([
            "outliers",
            "--inlier-classes",
            "0",
            "--outlier-classes",
            "7",
        ])
        .arg("--checkpoint")
        .arg(&ck)
        .arg("--images")
        .arg(f.path("x.idx"))
        .arg("--labels")
        .arg(f.path("y.idx"))
        .arg("--out")
        .arg(f.path("roc.csv")));
    assert_eq!(out.status.code(), Some(2));
    assert!(!f.path("roc.csv").exists());
}

#[test]
fn cluster_metrics_match_library() {
    let f = Fixture::new(60);
    let ck = f.train("1l.arch", "m.ck", 5);
    let out = ok(bin()
        .args(["cluster-metrics", "--checkpoint"])
        .arg(&ck)
        .arg("--images")
        .arg(f.path("x.idx"))
        .arg("--out")
        .arg(f.path("cm.csv")));
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert_eq!(std::fs::read_to_string(f.path("cm.csv")).unwrap(), stdout);
    let row: Vec<f64> = stdout
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();

    let model = load_checkpoint(&ck).unwrap().model;
    let x = read_idx_images(f.path("x.idx")).unwrap();
    let a = assign_clusters(&model, &x, 100).unwrap();
    assert_eq!(row[0], dunn_index(&x, &a).unwrap());
    assert_eq!(row[1], davies_bouldin(&x, &a).unwrap());
}

#[test]
fn cluster_metrics_on_empty_dataset_fail() {
    let f = Fixture::new(30);
    let ck = f.train("1l.arch", "m.ck", 1);
    let out = run(bin()
        .args(["cluster-metrics", "--classes", "8", "--checkpoint"])
        .arg(&ck)
        .arg("--images")
        .arg(f.path("x.idx"))
        .arg("--labels")
        .arg(f.path("y.idx")));
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty dataset"));
}

#[test]
fn corrupted_checkpoint_is_a_runtime_error() {
    let f = Fixture::new(30);
    let ck = f.train("1l.arch", "m.ck", 1);
    let mut bytes = std::fs::read(&ck).unwrap();
    let last = bytes.len() - 10;
    bytes[last] ^= 0xff;
    std::fs::write(&ck, bytes).unwrap();
    let out = run(bin()
        .args(["sample", "--checkpoint"])
        .arg(&ck)
        .arg("--out")
        .arg(f.path("s.pgm")));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("integrity"));
}
