use std::path::{Path, PathBuf};

use dcgmm::inference::{
    conditional_sample, generate_variants, inpaint as inpaint_images, sample as sample_images,
    SampleOutput, SamplingConfig,
};
use dcgmm::io::{
    encode_image_grid, filter_classes, load_checkpoint, parse_architecture, read_idx_dataset,
    read_idx_images, Checkpoint, RngState,
};
use dcgmm::layers::LossMode;
use dcgmm::metrics::{assign_clusters, davies_bouldin, dunn_index, outlier_roc};
use dcgmm::{train as train_model, Error, Model, Result, Tensor4, TrainingConfig};
use serde_json::{json, Value};

use crate::manifest::{manifest_path, sibling, Outputs};
use crate::{
    ClusterArgs, Common, CondSampleArgs, Dataset, Generation, InpaintArgs, LossArg, OutliersArgs,
    Quadrant, SampleArgs, TrainArgs, VariantsArgs,
};

/// Parses `0-4`, `1,3,7` or combinations such as `0-2,7`.
pub fn parse_classes(spec: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("invalid class list {spec:?}"));
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim) {
        let (lo, hi) = match part.split_once('-') {
            Some((a, b)) => (a.trim(), b.trim()),
            None => (part, part),
        };
        let lo: usize = lo.parse().map_err(|_| bad())?;
        let hi: usize = hi.parse().map_err(|_| bad())?;
        if lo > hi || hi > 9 {
            return Err(bad());
        }
        out.extend(lo..=hi);
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

fn limit(x: Tensor4, y: Option<Vec<usize>>, n: Option<usize>) -> (Tensor4, Option<Vec<usize>>) {
    match n {
        Some(n) if n < x.dims().n => (
            x.batch_range(0, n),
            y.map(|mut y| {
                y.truncate(n);
                y
            }),
        ),
        _ => (x, y),
    }
}

fn load_images(
    images: &Path,
    labels: Option<&Path>,
    classes: Option<&str>,
) -> Result<(Tensor4, Option<Vec<usize>>)> {
    match (labels, classes) {
        (Some(l), classes) => {
            let (x, y) = read_idx_dataset(images, l)?;
            match classes {
                Some(c) => {
                    let (x, y) = filter_classes(&x, &y, &parse_classes(c)?);
                    Ok((x, Some(y)))
                }
                None => Ok((x, Some(y))),
            }
        }
        (None, Some(_)) => Err(Error::Config("a class filter needs --labels".into())),
        (None, None) => Ok((read_idx_images(images)?, None)),
    }
}

fn load_dataset(d: &Dataset) -> Result<(Tensor4, Option<Vec<usize>>)> {
    let (x, y) = load_images(&d.images, d.labels.as_deref(), d.classes.as_deref())?;
    let (x, y) = limit(x, y, d.limit);
    if x.dims().n == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok((x, y))
}

fn dataset_inputs(d: &Dataset) -> Vec<PathBuf> {
    std::iter::once(d.images.clone())
        .chain(d.labels.clone())
        .collect()
}

fn config_json<T: serde::Serialize>(args: &T) -> Value {
    serde_json::to_value(args).unwrap_or(Value::Null)
}

fn check_threads(c: &Common) -> Result<()> {
    if c.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    check_threads(&a.common)?;
    let text = std::fs::read_to_string(&a.arch).map_err(|e| Error::Io {
        path: a.arch.clone(),
        source: e,
    })?;
    let arch = parse_architecture(&text)?;
    let (x, y) = load_dataset(&a.data)?;
    let cfg = TrainingConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        gmm_learning_rate: a.lr,
        classifier_learning_rate: a.classifier_lr,
        p_max: a.p_max,
        loss_mode: match a.loss {
            LossArg::Max => LossMode::MaxComponent,
            LossArg::Full => LossMode::Full,
        },
        seed: a.common.seed,
        threads: a.common.threads,
        ..TrainingConfig::default()
    };
    cfg.validate()?;
    if arch.has_classifier() && y.is_none() {
        return Err(Error::Config("a classifier layer needs --labels".into()));
    }
    let mut model = Model::init(&arch, a.common.seed)?;
    let (history, stats) = train_model(&mut model, &x, y.as_deref(), &cfg)?;

    let mut csv = csv::Writer::from_writer(Vec::new());
    let io_err = |e: csv::Error| Error::Config(format!("history CSV: {e}"));
    csv.write_record(["epoch", "layer", "loss", "sigma"])
        .map_err(io_err)?;
    for r in &history.records {
        csv.write_record([
            r.epoch.to_string(),
            r.layer.to_string(),
            r.loss.to_string(),
            r.sigma.to_string(),
        ])
        .map_err(io_err)?;
    }
    let history_bytes = csv
        .into_inner()
        .map_err(|e| Error::Config(format!("history CSV: {e}")))?;

    let ck = Checkpoint {
        model,
        stats: Some(stats),
        training: Some(cfg.clone()),
        rng: RngState {
            seed: cfg.seed,
            word_pos: history.rng_word_pos,
        },
    };
    let history_path = a
        .history
        .clone()
        .unwrap_or_else(|| sibling(&a.out, "history.csv"));
    let mut outputs = Outputs::new();
    outputs.add(&a.out, dcgmm::io::encode_checkpoint(&ck)?);
    outputs.add(&history_path, history_bytes);
    let mut inputs = vec![a.arch.clone()];
    inputs.extend(dataset_inputs(&a.data));
    let config = json!({ "args": config_json(a), "training": config_json(&cfg) });
    outputs.commit(
        &manifest_path(a.common.manifest.as_deref(), &a.out),
        "train",
        config,
        a.common.seed,
        inputs,
    )?;
    for &l in &ck.model.gmm_indices() {
        if let Some(last) = history.layer_losses(l + 1).last() {
            eprintln!("layer {}: final loss {last:.6}", l + 1);
        }
    }
    Ok(())
}

fn sampling_config(g: &Generation) -> Result<SamplingConfig> {
    check_threads(&g.common)?;
    Ok(SamplingConfig {
        top_s: g.top_s,
        sharpen_iters: g.sharpen_iters,
        sharpen_step: g.sharpen_step,
        stochastic: g.stochastic,
        seed: g.common.seed,
        threads: g.common.threads,
    })
}

fn default_columns(n: usize) -> usize {
    ((n as f64).sqrt().ceil() as usize).max(1)
}

fn write_grid<T: serde::Serialize>(
    command: &str,
    args: &T,
    g: &Generation,
    out: &SampleOutput,
    columns: usize,
    extra: Vec<(PathBuf, Vec<u8>)>,
    mut inputs: Vec<PathBuf>,
) -> Result<()> {
    let mut outputs = Outputs::new();
    outputs.add(
        &g.out,
        encode_image_grid(&out.images, g.columns.unwrap_or(columns))?,
    );
    for (p, b) in extra {
        outputs.add(p, b);
    }
    inputs.insert(0, g.checkpoint.clone());
    outputs.commit(
        &manifest_path(g.common.manifest.as_deref(), &g.out),
        command,
        config_json(args),
        g.common.seed,
        inputs,
    )
}

fn require_count(count: usize) -> Result<()> {
    if count == 0 {
        return Err(Error::Config("--count must be at least 1".into()));
    }
    Ok(())
}

pub fn sample(a: &SampleArgs) -> Result<()> {
    require_count(a.count)?;
    let cfg = sampling_config(&a.gen)?;
    let ck = load_checkpoint(&a.gen.checkpoint)?;
    let out = sample_images(&ck.model, &cfg, a.count)?;
    write_grid(
        "sample",
        a,
        &a.gen,
        &out,
        default_columns(a.count),
        vec![],
        vec![],
    )
}

pub fn cond_sample(a: &CondSampleArgs) -> Result<()> {
    require_count(a.count)?;
    let cfg = sampling_config(&a.gen)?;
    let ck = load_checkpoint(&a.gen.checkpoint)?;
    let out = conditional_sample(&ck.model, a.label, &cfg, a.count)?;
    write_grid(
        "cond-sample",
        a,
        &a.gen,
        &out,
        default_columns(a.count),
        vec![],
        vec![],
    )
}

pub fn variants(a: &VariantsArgs) -> Result<()> {
    require_count(a.count)?;
    let cfg = sampling_config(&a.gen)?;
    let ck = load_checkpoint(&a.gen.checkpoint)?;
    let (templates, _) = load_dataset(&a.templates)?;
    let repeated: Vec<usize> = (0..templates.dims().n)
        .flat_map(|i| std::iter::repeat_n(i, a.count))
        .collect();
    let out = generate_variants(
        &ck.model,
        &templates.select_samples(&repeated),
        a.cutoff,
        &cfg,
    )?;
    write_grid(
        "variants",
        a,
        &a.gen,
        &out,
        a.count,
        vec![],
        dataset_inputs(&a.templates),
    )
}

/// Overwrites one quadrant of every image with `fill`.
pub fn blank_quadrant(x: &mut Tensor4, q: Quadrant, fill: f64) {
    let d = x.dims();
    let (rows, cols) = match q {
        Quadrant::None => return,
        Quadrant::TopLeft => (0..d.h / 2, 0..d.w / 2),
        Quadrant::TopRight => (0..d.h / 2, d.w / 2..d.w),
        Quadrant::BottomLeft => (d.h / 2..d.h, 0..d.w / 2),
        Quadrant::BottomRight => (d.h / 2..d.h, d.w / 2..d.w),
    };
    for n in 0..d.n {
        for h in rows.clone() {
            for w in cols.clone() {
                for c in 0..d.c {
                    x.set(n, h, w, c, fill);
                }
            }
        }
    }
}

pub fn inpaint(a: &InpaintArgs) -> Result<()> {
    let cfg = sampling_config(&a.gen)?;
    let ck = load_checkpoint(&a.gen.checkpoint)?;
    let stats = ck
        .stats
        .as_ref()
        .ok_or_else(|| Error::Config("checkpoint holds no outlier statistics".into()))?;
    let (mut x, _) = load_dataset(&a.data)?;
    if !(0.0..=1.0).contains(&a.fill) {
        return Err(Error::Config(format!(
            "fill {} lies outside [0, 1]",
            a.fill
        )));
    }
    blank_quadrant(&mut x, a.blank, a.fill);
    let out = inpaint_images(&ck.model, stats, &x, a.c, &cfg)?;
    let columns = default_columns(x.dims().n);
    let extra = match &a.corrupted_out {
        Some(p) => vec![(
            p.clone(),
            encode_image_grid(&x, a.gen.columns.unwrap_or(columns))?,
        )],
        None => vec![],
    };
    write_grid(
        "inpaint",
        a,
        &a.gen,
        &out,
        columns,
        extra,
        dataset_inputs(&a.data),
    )
}

pub fn outliers(a: &OutliersArgs) -> Result<()> {
    check_threads(&a.common)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let stats = ck
        .stats
        .as_ref()
        .ok_or_else(|| Error::Config("checkpoint holds no outlier statistics".into()))?;
    let (inliers, _) = load_images(&a.images, a.labels.as_deref(), a.inlier_classes.as_deref())?;
    let (outliers, _) = match &a.outlier_images {
        Some(p) => load_images(p, a.outlier_labels.as_deref(), a.outlier_classes.as_deref())?,
        None => load_images(&a.images, a.labels.as_deref(), a.outlier_classes.as_deref())?,
    };
    if inliers.dims().n == 0 || outliers.dims().n == 0 {
        return Err(Error::EmptyDataset);
    }
    let roc = outlier_roc(&ck.model, stats, &inliers, &outliers, a.batch_size)?;

    let mut csv = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Config(format!("ROC CSV: {e}"));
    csv.write_record(["c", "threshold", "true_inlier_rate", "false_inlier_rate"])
        .map_err(err)?;
    for p in &roc.points {
        csv.write_record([
            p.c.map(|c| format!("{c:.2}")).unwrap_or_default(),
            p.threshold.to_string(),
            p.true_inlier_rate.to_string(),
            p.false_inlier_rate.to_string(),
        ])
        .map_err(err)?;
    }
    csv.write_record(["auc", &roc.auc.to_string(), "", ""])
        .map_err(err)?;
    let bytes = csv
        .into_inner()
        .map_err(|e| Error::Config(format!("ROC CSV: {e}")))?;

    let mut inputs = vec![a.checkpoint.clone(), a.images.clone()];
    inputs.extend(a.labels.clone());
    inputs.extend(a.outlier_images.clone());
    inputs.extend(a.outlier_labels.clone());
    let mut outputs = Outputs::new();
    outputs.add(&a.out, bytes);
    outputs.commit(
        &manifest_path(a.common.manifest.as_deref(), &a.out),
        "outliers",
        config_json(a),
        a.common.seed,
        inputs,
    )?;
    println!("auc,{}", roc.auc);
    Ok(())
}

pub fn cluster_metrics(a: &ClusterArgs) -> Result<()> {
    check_threads(&a.common)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let (x, _) = load_dataset(&a.data)?;
    let assignment = assign_clusters(&ck.model, &x, a.batch_size)?;
    let dunn = dunn_index(&x, &assignment)?;
    let db = davies_bouldin(&x, &assignment)?;
    let row = format!("dunn,db\n{dunn},{db}\n");
    print!("{row}");
    if let Some(out) = &a.out {
        let mut outputs = Outputs::new();
        outputs.add(out, row.into_bytes());
        let mut inputs = vec![a.checkpoint.clone()];
        inputs.extend(dataset_inputs(&a.data));
        outputs.commit(
            &manifest_path(a.common.manifest.as_deref(), out),
            "cluster-metrics",
            config_json(a),
            a.common.seed,
            inputs,
        )?;
    }
    Ok(())
}
