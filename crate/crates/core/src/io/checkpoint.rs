//! Checkpoint container.
//!
//! Layout: the 8-byte magic `DCGMMCK1`, a little-endian `u64` header length,
//! a UTF-8 JSON header, the parameter blocks as little-endian `f64` in the
//! order the header lists them, and a little-endian CRC32 of everything
//! before it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::LayerSpec;
use crate::error::{Error, Result};
use crate::inference::OutlierStats;
use crate::io::{parse_architecture, write_atomic};
use crate::layers::{ClassifierParams, GmmParams};
use crate::model::{Layer, Model};
use crate::training::TrainingConfig;

pub const MAGIC: &[u8; 8] = b"DCGMMCK1";
pub const VERSION: u32 = 1;

/// State of the training shuffle stream.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub stats: Option<OutlierStats>,
    pub training: Option<TrainingConfig>,
    pub rng: RngState,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockInfo {
    name: String,
    /// 1-based model layer.
    layer: usize,
    /// Offset in values from the start of the block section.
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct StatsHeader {
    count: u64,
    /// `(layer, h, w)` per GMM layer, layers numbered from 1.
    layers: Vec<(usize, usize, usize)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RngHeader {
    seed: u64,
    word_pos: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    architecture: String,
    /// Per-sample dims `(h, w, c)` of every layer output; entry 0 is the input.
    dims: Vec<(usize, usize, usize)>,
    blocks: Vec<BlockInfo>,
    stats: Option<StatsHeader>,
    training: Option<TrainingConfig>,
    rng: RngHeader,
}

fn blocks_of(model: &Model, stats: Option<&OutlierStats>) -> Vec<(String, usize, Vec<f64>)> {
    let mut blocks = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        match layer {
            Layer::Gmm(g) => {
                blocks.push(("pi_logits".into(), i + 1, g.pi_logits().to_vec()));
                blocks.push(("centroids".into(), i + 1, g.centroids().to_vec()));
                blocks.push(("precisions".into(), i + 1, g.precisions().to_vec()));
            }
            Layer::Classifier(c) => {
                blocks.push(("weights".into(), i + 1, c.weights().to_vec()));
                blocks.push(("bias".into(), i + 1, c.bias().to_vec()));
            }
            Layer::Folding(_) | Layer::Pooling(_) => {}
        }
    }
    if let Some(s) = stats {
        for l in s.layer_stats() {
            blocks.push(("stats_mean".into(), l.layer + 1, l.mean().to_vec()));
            blocks.push(("stats_m2".into(), l.layer + 1, l.m2().to_vec()));
        }
    }
    blocks
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    if let Some(s) = &ck.stats {
        s.check_model(&ck.model)?;
    }
    let blocks = blocks_of(&ck.model, ck.stats.as_ref());
    let mut offset = 0u64;
    let infos = blocks
        .iter()
        .map(|(name, layer, values)| {
            let info = BlockInfo {
                name: name.clone(),
                layer: *layer,
                offset,
                len: values.len() as u64,
            };
            offset += values.len() as u64;
            info
        })
        .collect();
    let header = Header {
        version: VERSION,
        architecture: ck.model.arch().to_text(),
        dims: ck.model.shapes().iter().map(|d| (d.h, d.w, d.c)).collect(),
        blocks: infos,
        stats: ck.stats.as_ref().map(|s| StatsHeader {
            count: s.count(),
            layers: s
                .layer_stats()
                .iter()
                .map(|l| (l.layer + 1, l.h, l.w))
                .collect(),
        }),
        training: ck.training.clone(),
        rng: RngHeader {
            seed: ck.rng.seed,
            word_pos: ck.rng.word_pos.to_string(),
        },
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + offset as usize * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, values) in &blocks {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let fmt = |offset: usize, reason: &str| Error::Format {
        path: path.to_path_buf(),
        offset,
        reason: reason.into(),
    };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(fmt(0, "missing DCGMMCK1 magic"));
    }
    if bytes.len() < 20 {
        return Err(fmt(bytes.len(), "truncated checkpoint"));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Integrity(format!(
            "{}: stored CRC32 {stored:#010x}, computed {actual:#010x}",
            path.display()
        )));
    }
    let header_len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|l| l.checked_add(16))
        .filter(|&end| end <= body.len())
        .ok_or_else(|| fmt(8, "header length exceeds file size"))?;
    let header: Header = serde_json::from_slice(&body[16..header_end])
        .map_err(|e| fmt(16, &format!("malformed header: {e}")))?;
    if header.version != VERSION {
        return Err(Error::Version {
            found: header.version,
            expected: VERSION,
        });
    }
    let data = &body[header_end..];
    if !data.len().is_multiple_of(8) {
        return Err(fmt(
            header_end,
            "parameter section is not a whole number of f64 values",
        ));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut next = 0u64;
    let mut take = |info: &BlockInfo, name: &str, layer: usize, len: usize| -> Result<Vec<f64>> {
        if info.name != name || info.layer != layer || info.len != len as u64 || info.offset != next
        {
            return Err(fmt(
                header_end,
                &format!(
                    "block {} of layer {} does not match the architecture",
                    info.name, info.layer
                ),
            ));
        }
        let start = info.offset as usize;
        let block = values
            .get(start..start + len)
            .ok_or_else(|| fmt(header_end + start * 8, "parameter block out of range"))?;
        next += len as u64;
        Ok(block.to_vec())
    };

    let arch = parse_architecture(&header.architecture)?;
    let shapes = arch.shapes()?;
    let dims: Vec<_> = shapes.iter().map(|d| (d.h, d.w, d.c)).collect();
    if dims != header.dims {
        return Err(fmt(16, "recorded dims disagree with the architecture"));
    }
    let mut infos = header.blocks.iter();
    let mut missing = || {
        infos
            .next()
            .ok_or_else(|| fmt(16, "header lists too few blocks"))
    };
    let mut layers = Vec::with_capacity(arch.layers.len());
    for (i, spec) in arch.layers.iter().enumerate() {
        let input = shapes[i];
        layers.push(match *spec {
            LayerSpec::Folding(p) => Layer::Folding(p),
            LayerSpec::Pooling(p) => Layer::Pooling(p),
            LayerSpec::Gmm { k } => {
                let d = input.c;
                let logits = take(missing()?, "pi_logits", i + 1, k)?;
                let mu = take(missing()?, "centroids", i + 1, k * d)?;
                let prec = take(missing()?, "precisions", i + 1, k * d)?;
                Layer::Gmm(GmmParams::new(k, d, logits, mu, prec)?)
            }
            LayerSpec::Classifier { classes } => {
                let d = input.per_sample();
                let w = take(missing()?, "weights", i + 1, d * classes)?;
                let b = take(missing()?, "bias", i + 1, classes)?;
                Layer::Classifier(ClassifierParams::new(d, classes, w, b)?)
            }
        });
    }
    let model = Model::from_layers(arch, layers)?;
    let stats = match &header.stats {
        None => None,
        Some(sh) => {
            let mut blocks = Vec::with_capacity(sh.layers.len());
            for &(layer, h, w) in &sh.layers {
                let zero_based = layer
                    .checked_sub(1)
                    .ok_or_else(|| fmt(16, "statistics layer numbers start at 1"))?;
                let mean = take(missing()?, "stats_mean", layer, h * w)?;
                let m2 = take(missing()?, "stats_m2", layer, h * w)?;
                blocks.push(OutlierStats::layer_from_parts(zero_based, h, w, mean, m2)?);
            }
            let stats = OutlierStats::from_parts(sh.count, blocks)?;
            stats.check_model(&model)?;
            Some(stats)
        }
    };
    if missing().is_ok() || next as usize != values.len() {
        return Err(fmt(header_end, "unreferenced parameter data"));
    }
    let word_pos = header
        .rng
        .word_pos
        .parse()
        .map_err(|_| fmt(16, "rng word position is not an integer"))?;
    Ok(Checkpoint {
        model,
        stats,
        training: header.training,
        rng: RngState {
            seed: header.rng.seed,
            word_pos,
        },
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(ck)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
