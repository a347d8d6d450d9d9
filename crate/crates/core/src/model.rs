//! A DCGMM instance: architecture plus the parameters of every layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{ArchitectureConfig, LayerSpec};
use crate::error::{Error, Result};
use crate::layers::{gmm_forward, ClassifierParams, FoldingParams, GmmParams, PoolingParams};
use crate::tensor::{Dims, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Folding(FoldingParams),
    Pooling(PoolingParams),
    Gmm(GmmParams),
    Classifier(ClassifierParams),
}

impl Layer {
    pub fn as_gmm(&self) -> Option<&GmmParams> {
        match self {
            Layer::Gmm(g) => Some(g),
            _ => None,
        }
    }

    /// Estimation-mode transform of a non-GMM layer, or the responsibilities of
    /// a GMM layer.
    pub fn forward(&self, input: &Tensor4) -> Result<Tensor4> {
        match self {
            Layer::Folding(p) => p.forward(input),
            Layer::Pooling(p) => p.forward(input),
            Layer::Gmm(g) => Ok(gmm_forward(input, g)?.0),
            Layer::Classifier(c) => c.forward(input),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: ArchitectureConfig,
    layers: Vec<Layer>,
    shapes: Vec<Dims>,
}

/// Activities of every layer for one batch.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Entry 0 is the input; entry `i` is the output of layer `i` (1-based).
    pub activities: Vec<Tensor4>,
    /// Per-position log-likelihood maps, `Some` exactly for GMM layers
    /// (same 1-based numbering; entry 0 is always `None`).
    pub loglik: Vec<Option<Tensor4>>,
}

impl Model {
    /// Fresh parameters: uniform mixing weights, centroids in [-0.01, 0.01],
    /// unit precisions; classifier weights in [-0.05, 0.05] with zero bias.
    pub fn init(arch: &ArchitectureConfig, seed: u64) -> Result<Model> {
        arch.validate()?;
        let shapes = arch.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(arch.layers.len());
        for (i, spec) in arch.layers.iter().enumerate() {
            let input = shapes[i];
            layers.push(match *spec {
                LayerSpec::Folding(p) => Layer::Folding(p),
                LayerSpec::Pooling(p) => Layer::Pooling(p),
                LayerSpec::Gmm { k } => Layer::Gmm(GmmParams::init(k, input.c, &mut rng)?),
                LayerSpec::Classifier { classes } => Layer::Classifier(ClassifierParams::init(
                    input.per_sample(),
                    classes,
                    &mut rng,
                )?),
            });
        }
        Ok(Model {
            arch: arch.clone(),
            layers,
            shapes,
        })
    }

    /// Assembles a model from explicit layers, checking them against `arch`.
    pub fn from_layers(arch: ArchitectureConfig, layers: Vec<Layer>) -> Result<Model> {
        arch.validate()?;
        let shapes = arch.shapes()?;
        if layers.len() != arch.layers.len() {
            return Err(Error::Config(format!(
                "{} layers supplied for a {}-layer architecture",
                layers.len(),
                arch.layers.len()
            )));
        }
        for (i, (spec, layer)) in arch.layers.iter().zip(&layers).enumerate() {
            let input = shapes[i];
            let ok = match (spec, layer) {
                (LayerSpec::Folding(a), Layer::Folding(b)) => a == b,
                (LayerSpec::Pooling(a), Layer::Pooling(b)) => a == b,
                (LayerSpec::Gmm { k }, Layer::Gmm(g)) => g.components() == *k && g.dim() == input.c,
                (LayerSpec::Classifier { classes }, Layer::Classifier(c)) => {
                    c.classes() == *classes && c.input_len() == input.per_sample()
                }
                _ => false,
            };
            if !ok {
                return Err(Error::LayerConfig {
                    layer: i + 1,
                    reason: format!("parameters do not match {spec}"),
                });
            }
        }
        Ok(Model {
            arch,
            layers,
            shapes,
        })
    }

    pub fn arch(&self) -> &ArchitectureConfig {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Per-sample dims; entry 0 is the input, entry `i` the output of layer `i`.
    pub fn shapes(&self) -> &[Dims] {
        &self.shapes
    }

    pub fn input_dims(&self) -> Dims {
        self.shapes[0]
    }

    /// Zero-based indices of the GMM layers, bottom to top.
    pub fn gmm_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.as_gmm().map(|_| i))
            .collect()
    }

    /// Zero-based index of the topmost GMM layer.
    pub fn top_gmm(&self) -> Option<usize> {
        self.arch.top_gmm()
    }

    pub fn gmm(&self, index: usize) -> Option<&GmmParams> {
        self.layers.get(index).and_then(Layer::as_gmm)
    }

    pub fn classifier(&self) -> Option<&ClassifierParams> {
        match self.layers.last() {
            Some(Layer::Classifier(c)) => Some(c),
            _ => None,
        }
    }

    pub fn check_input(&self, x: &Tensor4) -> Result<()> {
        let d = x.dims();
        if d.with_batch(1) != self.input_dims() {
            return Err(Error::Shape(format!(
                "model expects {}x{}x{} inputs, got {d}",
                self.input_dims().h,
                self.input_dims().w,
                self.input_dims().c
            )));
        }
        Ok(())
    }

    /// Estimation-mode pass through layers `0..upto` (zero-based, exclusive).
    pub fn forward_upto(&self, x: &Tensor4, upto: usize) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let mut activities = vec![x.clone()];
        let mut loglik = vec![None];
        for layer in &self.layers[..upto.min(self.layers.len())] {
            let input = activities.last().expect("non-empty");
            let (out, ll) = match layer {
                Layer::Gmm(g) => {
                    let (a, l) = gmm_forward(input, g)?;
                    (a, Some(l))
                }
                other => (other.forward(input)?, None),
            };
            activities.push(out);
            loglik.push(ll);
        }
        Ok(ForwardTrace { activities, loglik })
    }

    pub fn forward(&self, x: &Tensor4) -> Result<ForwardTrace> {
        self.forward_upto(x, self.layers.len())
    }

    /// Log-likelihood map of the topmost GMM layer, evaluated batch-wise.
    pub fn top_loglik(&self, x: &Tensor4, batch: usize) -> Result<Tensor4> {
        let top = self
            .top_gmm()
            .ok_or_else(|| Error::Config("model has no GMM layer".into()))?;
        self.map_batches(x, batch, |m, b| {
            let mut trace = m.forward_upto(b, top + 1)?;
            Ok(trace.loglik[top + 1].take().expect("GMM layer loglik"))
        })
    }

    /// Activities of the topmost GMM layer, evaluated batch-wise.
    pub fn top_activities(&self, x: &Tensor4, batch: usize) -> Result<Tensor4> {
        let top = self
            .top_gmm()
            .ok_or_else(|| Error::Config("model has no GMM layer".into()))?;
        self.map_batches(x, batch, |m, b| {
            let mut trace = m.forward_upto(b, top + 1)?;
            Ok(trace.activities.swap_remove(top + 1))
        })
    }

    /// Applies `f` to consecutive batches of `x` and concatenates the results.
    pub fn map_batches<F>(&self, x: &Tensor4, batch: usize, f: F) -> Result<Tensor4>
    where
        F: Fn(&Model, &Tensor4) -> Result<Tensor4>,
    {
        let n = x.dims().n;
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let batch = batch.max(1);
        let mut parts = Vec::with_capacity(n.div_ceil(batch));
        for start in (0..n).step_by(batch) {
            parts.push(f(self, &x.batch_range(start, (start + batch).min(n)))?);
        }
        Tensor4::concat(&parts)
    }
}
