//! Linear read-out on the flattened activities of the layer below.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    d: usize,
    m: usize,
    /// `d x m`, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierGrads {
    pub d_weights: Vec<f64>,
    pub d_bias: Vec<f64>,
}

impl ClassifierParams {
    pub fn new(d: usize, m: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if d == 0 || m == 0 {
            return Err(Error::Config("classifier needs D >= 1 and M >= 1".into()));
        }
        if weights.len() != d * m || bias.len() != m {
            return Err(Error::Shape(format!(
                "classifier blocks do not match D={d}, M={m}"
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Config("classifier parameters must be finite".into()));
        }
        Ok(ClassifierParams {
            d,
            m,
            weights,
            bias,
        })
    }

    /// Weights uniform in [-0.05, 0.05], zero bias.
    pub fn init<R: Rng + ?Sized>(d: usize, m: usize, rng: &mut R) -> Result<Self> {
        let weights = (0..d * m).map(|_| rng.random_range(-0.05..=0.05)).collect();
        Self::new(d, m, weights, vec![0.0; m])
    }

    pub fn input_len(&self) -> usize {
        self.d
    }

    pub fn classes(&self) -> usize {
        self.m
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    fn w(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.d, self.m), &self.weights).expect("d x m")
    }

    fn flat<'a>(&self, input: &'a Tensor4) -> Result<ArrayView2<'a, f64>> {
        let dims = input.dims();
        if dims.per_sample() != self.d {
            return Err(Error::Shape(format!(
                "classifier expects {} inputs per sample, got {dims}",
                self.d
            )));
        }
        Ok(ArrayView2::from_shape((dims.n, self.d), input.data()).expect("n x d"))
    }

    /// Logits `flatten(input) · W + b`, shaped `(n, 1, 1, M)`.
    pub fn forward(&self, input: &Tensor4) -> Result<Tensor4> {
        let x = self.flat(input)?;
        let mut z = x.dot(&self.w());
        for mut row in z.rows_mut() {
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        let n = input.dims().n;
        Tensor4::from_vec(Dims::new(n, 1, 1, self.m), z.into_raw_vec_and_offset().0)
    }

    /// Approximate inversion of the affine map for one-hot targets:
    /// `(t − b) · Wᵀ`, reshaped to `below` (batch taken from `onehot`).
    pub fn invert(&self, onehot: &Tensor4, below: Dims) -> Result<Tensor4> {
        let od = onehot.dims();
        if od.per_sample() != self.m {
            return Err(Error::Shape(format!(
                "one-hot targets must have {} classes, got {od}",
                self.m
            )));
        }
        if below.per_sample() != self.d {
            return Err(Error::Shape(format!(
                "classifier input dims {below} do not have {} elements",
                self.d
            )));
        }
        for row in onehot.data().chunks(self.m) {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != self.m {
                return Err(Error::InvalidLabel(format!("{row:?} is not one-hot")));
            }
        }
        let t = ArrayView2::from_shape((od.n, self.m), onehot.data()).expect("n x m");
        let shifted = &t - &ArrayView2::from_shape((1, self.m), &self.bias).expect("1 x m");
        let control = shifted.dot(&self.w().t());
        Tensor4::from_vec(below.with_batch(od.n), control.into_raw_vec_and_offset().0)
    }

    /// One-hot `(n, 1, 1, M)` targets for the given labels.
    pub fn one_hot(&self, labels: &[usize]) -> Result<Tensor4> {
        let mut t = Tensor4::zeros(Dims::new(labels.len(), 1, 1, self.m));
        for (n, &l) in labels.iter().enumerate() {
            if l >= self.m {
                return Err(Error::InvalidLabel(format!(
                    "label {l} outside [0, {})",
                    self.m
                )));
            }
            t.set(n, 0, 0, l, 1.0);
        }
        Ok(t)
    }

    /// Batch-mean softmax cross-entropy, its parameter gradients and the
    /// gradient with respect to the input (all for minimization).
    pub fn loss_and_grad(
        &self,
        input: &Tensor4,
        labels: &[usize],
    ) -> Result<(f64, ClassifierGrads, Tensor4)> {
        let x = self.flat(input)?;
        let n = x.nrows();
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "{} labels for a batch of {n}",
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= self.m) {
            return Err(Error::InvalidLabel(format!(
                "label {l} outside [0, {})",
                self.m
            )));
        }
        let logits = self.forward(input)?;
        let mut dz = Array2::zeros((n, self.m));
        let mut loss = 0.0;
        for (i, (row, &label)) in logits.data().chunks(self.m).zip(labels).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            for (j, v) in row.iter().enumerate() {
                let p = (v - lse).exp();
                dz[[i, j]] = (p - if j == label { 1.0 } else { 0.0 }) / n as f64;
            }
        }
        let d_weights = x.t().dot(&dz);
        let d_bias = dz.sum_axis(Axis(0));
        let d_input = dz.dot(&self.w().t());
        Ok((
            loss / n as f64,
            ClassifierGrads {
                d_weights: d_weights.into_raw_vec_and_offset().0,
                d_bias: d_bias.to_vec(),
            },
            Tensor4::from_vec(input.dims(), d_input.into_raw_vec_and_offset().0)?,
        ))
    }
}
