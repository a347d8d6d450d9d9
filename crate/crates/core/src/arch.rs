//! Architecture descriptors and shape propagation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{FoldingParams, PoolingParams};
use crate::tensor::Dims;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Folding(FoldingParams),
    Pooling(PoolingParams),
    Gmm { k: usize },
    Classifier { classes: usize },
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Folding(p) => write!(f, "F({},{},{},{})", p.fy, p.fx, p.dy, p.dx),
            LayerSpec::Pooling(p) => write!(f, "P({},{},{},{})", p.ky, p.kx, p.dy, p.dx),
            LayerSpec::Gmm { k } => write!(f, "G({k})"),
            LayerSpec::Classifier { classes } => write!(f, "C({classes})"),
        }
    }
}

impl LayerSpec {
    /// Per-sample output dims for a per-sample input, or a reason why the
    /// layer cannot consume that input.
    pub fn output_dims(&self, input: Dims) -> Result<Dims> {
        match self {
            LayerSpec::Folding(p) => p.output_dims(input),
            LayerSpec::Pooling(p) => p.output_dims(input),
            LayerSpec::Gmm { k } => {
                if *k == 0 {
                    return Err(Error::Config("G(0) has no components".into()));
                }
                if input.positions() == 0 || input.c == 0 {
                    return Err(Error::Config(format!("G({k}) received an empty input")));
                }
                Ok(Dims::new(input.n, input.h, input.w, *k))
            }
            LayerSpec::Classifier { classes } => {
                if *classes == 0 {
                    return Err(Error::Config("C(0) has no classes".into()));
                }
                Ok(Dims::new(input.n, 1, 1, *classes))
            }
        }
    }
}

/// Ordered layer list plus the per-sample input extent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub input: Dims,
    pub layers: Vec<LayerSpec>,
}

impl ArchitectureConfig {
    /// Builds and validates an architecture for `h x w x c` inputs.
    pub fn new(h: usize, w: usize, c: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        let arch = ArchitectureConfig {
            input: Dims::new(1, h, w, c),
            layers,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("architecture has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if matches!(l, LayerSpec::Classifier { .. }) && i + 1 != self.layers.len() {
                return Err(Error::LayerConfig {
                    layer: i + 1,
                    reason: "a classifier may only be the last layer".into(),
                });
            }
        }
        propagate_shapes(&self.layers, self.input)?;
        Ok(())
    }

    /// Per-sample dims: entry 0 is the input, entry `i` the output of layer `i`
    /// (layers are numbered from 1).
    pub fn shapes(&self) -> Result<Vec<Dims>> {
        propagate_shapes(&self.layers, self.input)
    }

    /// Zero-based index of the topmost GMM layer.
    pub fn top_gmm(&self) -> Option<usize> {
        self.layers
            .iter()
            .rposition(|l| matches!(l, LayerSpec::Gmm { .. }))
    }

    pub fn has_classifier(&self) -> bool {
        matches!(self.layers.last(), Some(LayerSpec::Classifier { .. }))
    }

    /// Text form accepted by [`crate::io::parse_architecture`].
    pub fn to_text(&self) -> String {
        let mut parts = vec![format!(
            "input {} {} {}",
            self.input.h, self.input.w, self.input.c
        )];
        parts.extend(self.layers.iter().map(|l| l.to_string()));
        parts.join(" / ")
    }
}

impl fmt::Display for ArchitectureConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Output dims of every layer for a per-sample input; entry 0 is the input
/// itself. Errors name the first layer (1-based) that cannot be applied.
pub fn propagate_shapes(layers: &[LayerSpec], input: Dims) -> Result<Vec<Dims>> {
    if input.h == 0 || input.w == 0 || input.c == 0 {
        return Err(Error::Config(format!(
            "input dims {input} must be positive"
        )));
    }
    let mut dims = vec![input];
    let mut seen_classifier = false;
    for (i, layer) in layers.iter().enumerate() {
        if seen_classifier {
            return Err(Error::LayerConfig {
                layer: i + 1,
                reason: "no layer may follow a classifier".into(),
            });
        }
        seen_classifier = matches!(layer, LayerSpec::Classifier { .. });
        let prev = *dims.last().expect("non-empty");
        let out = layer.output_dims(prev).map_err(|e| Error::LayerConfig {
            layer: i + 1,
            reason: match e {
                Error::Config(s) => s,
                other => other.to_string(),
            },
        })?;
        dims.push(out);
    }
    Ok(dims)
}
