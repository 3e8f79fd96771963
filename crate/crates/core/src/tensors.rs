//! Parameter-shaped storage shared by weights, gradients and search directions.

use ndarray::{Array1, Array2, Zip};

use crate::error::{shape, Result};

/// Weight matrix and bias vector of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTensors {
    /// Shape `d_l x d_{l-1}`.
    pub weights: Array2<f64>,
    /// Length `d_l`.
    pub bias: Array1<f64>,
}

impl LayerTensors {
    pub fn zeros(fan_out: usize, fan_in: usize) -> Self {
        Self {
            weights: Array2::zeros((fan_out, fan_in)),
            bias: Array1::zeros(fan_out),
        }
    }
}

/// A list of per-layer `(W, b)` blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensors {
    pub layers: Vec<LayerTensors>,
}

impl Tensors {
    /// Zero tensors for `layer_dims = [d_0, ..., d_L]`.
    pub fn zeros(layer_dims: &[usize]) -> Self {
        Self {
            layers: layer_dims
                .windows(2)
                .map(|w| LayerTensors::zeros(w[1], w[0]))
                .collect(),
        }
    }

    /// Layer dimensions implied by the stored shapes.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.layers.len() + 1);
        if let Some(first) = self.layers.first() {
            dims.push(first.weights.ncols());
        }
        dims.extend(self.layers.iter().map(|l| l.weights.nrows()));
        dims
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn same_shape(&self, other: &Tensors) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weights.dim() == b.weights.dim() && a.bias.len() == b.bias.len())
    }

    pub(crate) fn check_same_shape(&self, other: &Tensors, context: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(shape(
                context,
                format!("{:?}", self.layer_dims()),
                format!("{:?}", other.layer_dims()),
            ))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }

    /// Iterates over all entries: for each layer, the row-major weights then
    /// the bias.
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().collect()
    }

    /// Overwrites every entry from a flat vector in [`Tensors::iter`] order.
    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(shape("set_flat", self.num_params(), values.len()));
        }
        for (dst, &src) in self.iter_mut().zip(values) {
            *dst = src;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensors) -> f64 {
        self.iter().zip(other.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.iter_mut() {
            *v *= factor;
        }
    }

    pub fn scaled(&self, factor: f64) -> Tensors {
        let mut out = self.clone();
        out.scale(factor);
        out
    }

    /// `self += alpha * x`. Shapes must agree.
    pub fn axpy(&mut self, alpha: f64, x: &Tensors) {
        for (dst, src) in self.layers.iter_mut().zip(&x.layers) {
            Zip::from(&mut dst.weights)
                .and(&src.weights)
                .for_each(|d, &s| *d += alpha * s);
            Zip::from(&mut dst.bias)
                .and(&src.bias)
                .for_each(|d, &s| *d += alpha * s);
        }
    }

    /// `self - other`, entrywise.
    pub fn sub(&self, other: &Tensors) -> Tensors {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }
}
