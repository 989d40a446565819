//! Bias-free feed-forward ReLU network `f(x) = W^L ρ(W^{L-1} … ρ(W^1 x))`.
//!
//! Layer indices in the public API are 1-based to match the usual `W^1..W^L`
//! numbering: `layer_output(x, k)` is the k-th hidden activation, `k ∈ 1..L`.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{argmax, DenseMatrix, DenseVector};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseMatrix>,
}

/// On-disk checkpoint: `{"layers": [[[row...]...]...], "format_version": 1}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub layers: Vec<Vec<Vec<f64>>>,
    pub format_version: u32,
}

/// Activations recorded during a forward pass. `activations[0]` is the input,
/// `activations[k]` the k-th hidden output.
#[derive(Debug, Clone)]
pub(crate) struct ForwardTrace {
    pub activations: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

impl Mlp {
    pub fn new(layers: Vec<DenseMatrix>) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::InvalidNetwork(format!(
                "need at least 2 layers, got {}",
                layers.len()
            )));
        }
        for (m, pair) in layers.windows(2).enumerate() {
            if pair[1].cols() != pair[0].rows() {
                return Err(Error::InvalidNetwork(format!(
                    "layer {} has {} columns but layer {} has {} rows",
                    m + 2,
                    pair[1].cols(),
                    m + 1,
                    pair[0].rows()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Glorot-uniform initialization, `dims = [d_0, d_1, …, K]`.
    pub fn glorot<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 3 || dims.contains(&0) {
            return Err(Error::InvalidNetwork(format!(
                "dims {dims:?} must list d_0, at least one hidden width and K, all positive"
            )));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.gen_range(-limit..=limit))
                    .collect();
                DenseMatrix::from_raw(fan_out, fan_in, data)
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseMatrix] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [DenseMatrix] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<DenseMatrix> {
        self.layers
    }

    /// `W^m`, 1-based.
    pub fn layer(&self, m: usize) -> &DenseMatrix {
        &self.layers[m - 1]
    }

    /// Number of weight matrices, `L`.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols()
    }

    pub fn class_count(&self) -> usize {
        self.layers[self.layers.len() - 1].rows()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|w| w.rows() * w.cols()).sum()
    }

    /// Same architecture check used before swapping in perturbed weights.
    pub fn same_shape(&self, layers: &[DenseMatrix]) -> bool {
        layers.len() == self.layers.len()
            && layers
                .iter()
                .zip(&self.layers)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub(crate) fn check_input(&self, x: &DenseVector) -> Result<()> {
        if x.dim() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "network input",
                expected: self.input_dim(),
                found: x.dim(),
            });
        }
        Ok(())
    }

    pub(crate) fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.class_count() {
            return Err(Error::IndexOutOfRange {
                what: "class",
                index: class,
                bound: self.class_count(),
            });
        }
        Ok(())
    }

    pub(crate) fn forward_trace(&self, x: &[f64]) -> ForwardTrace {
        let l = self.layers.len();
        let mut activations = Vec::with_capacity(l);
        activations.push(x.to_vec());
        for w in &self.layers[..l - 1] {
            let mut h = w.mat_vec_raw(activations.last().unwrap());
            h.iter_mut().for_each(|v| *v = v.max(0.0));
            activations.push(h);
        }
        let logits = self.layers[l - 1].mat_vec_raw(activations.last().unwrap());
        ForwardTrace {
            activations,
            logits,
        }
    }

    pub(crate) fn logits_raw(&self, x: &[f64]) -> Vec<f64> {
        let l = self.layers.len();
        let mut h = x.to_vec();
        for w in &self.layers[..l - 1] {
            h = w.mat_vec_raw(&h);
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        self.layers[l - 1].mat_vec_raw(&h)
    }

    /// Logits `f_W(x)`; no activation after the last layer.
    pub fn forward(&self, x: &DenseVector) -> Result<DenseVector> {
        self.check_input(x)?;
        Ok(DenseVector::from_raw(self.logits_raw(x.as_slice())))
    }

    /// Hidden output `z^k = ρ(W^k … ρ(W^1 x))` for `k ∈ 1..L`; `k = 0` gives `x`.
    pub fn layer_output(&self, x: &DenseVector, k: usize) -> Result<DenseVector> {
        self.check_input(x)?;
        if k >= self.depth() {
            return Err(Error::IndexOutOfRange {
                what: "hidden layer",
                index: k,
                bound: self.depth(),
            });
        }
        let mut h = x.as_slice().to_vec();
        for w in &self.layers[..k] {
            h = w.mat_vec_raw(&h);
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        Ok(DenseVector::from_raw(h))
    }

    /// `f^{ij}(x) = [f(x)]_i − [f(x)]_j`.
    pub fn pairwise_margin(&self, x: &DenseVector, i: usize, j: usize) -> Result<f64> {
        self.check_class(i)?;
        self.check_class(j)?;
        let logits = self.forward(x)?;
        Ok(logits[i] - logits[j])
    }

    /// Argmax of the logits, smallest index on ties.
    pub fn predict(&self, x: &DenseVector) -> Result<usize> {
        Ok(argmax(self.forward(x)?.as_slice()))
    }

    pub(crate) fn predict_raw(&self, x: &[f64]) -> usize {
        argmax(&self.logits_raw(x))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            layers: self.layers.iter().map(DenseMatrix::to_rows).collect(),
            format_version: CHECKPOINT_FORMAT_VERSION,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::UnsupportedFormat(ckpt.format_version));
        }
        let layers = ckpt
            .layers
            .iter()
            .map(|rows| DenseMatrix::from_rows(rows))
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_checkpoint())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_checkpoint(&serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
