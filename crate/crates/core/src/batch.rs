//! Row-batched forward and backward passes.
//!
//! Rows are independent samples, each with its own noise realization drawn
//! from its own stream. Row `i` reproduces the single-sample path exactly up
//! to floating-point reassociation inside the matrix products.

use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{shape, Result};
use crate::model::{Architecture, Params};
use crate::noise::{noise_sites, Injection, NoiseModel};
use crate::rng::RngStream;
use crate::tensors::Tensors;

/// Rows processed per work item. Fixed, so reductions do not depend on the
/// number of worker threads.
pub(crate) const CHUNK_ROWS: usize = 256;

/// Noise for a batch: one `n x d` matrix per injection site.
#[derive(Debug, Clone)]
pub(crate) struct BatchNoise {
    pub injection: Injection,
    pub sites: Vec<Array2<f64>>,
}

impl BatchNoise {
    /// Row `i` is the draw `sample_noise(arch, model, streams[i])`.
    pub fn sample(arch: &Architecture, model: &NoiseModel, streams: &[RngStream]) -> Result<Self> {
        model.validate()?;
        let sites = noise_sites(arch);
        let mut mats: Vec<Array2<f64>> = sites.iter().map(|s| Array2::zeros((streams.len(), s.dim))).collect();
        for (row, stream) in streams.iter().enumerate() {
            let mut rng = stream.rng();
            for m in mats.iter_mut() {
                for v in m.row_mut(row) {
                    *v = model.family.draw(model.level, &mut rng);
                }
            }
        }
        Ok(Self {
            injection: model.injection(),
            sites: mats,
        })
    }

    /// Standard-normal draws, to be rescaled to any Gaussian level.
    pub fn standard(arch: &Architecture, streams: &[RngStream]) -> Self {
        let sites = noise_sites(arch);
        let mut mats: Vec<Array2<f64>> = sites.iter().map(|s| Array2::zeros((streams.len(), s.dim))).collect();
        for (row, stream) in streams.iter().enumerate() {
            let mut rng = stream.rng();
            for m in mats.iter_mut() {
                for v in m.row_mut(row) {
                    *v = rand::Rng::sample(&mut rng, StandardNormal);
                }
            }
        }
        Self {
            injection: Injection::Additive,
            sites: mats,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            injection: self.injection,
            sites: self.sites.iter().map(|m| m * factor).collect(),
        }
    }

    /// Per-row `sum_alpha (s^-2 |N^alpha|^2 - d_alpha)`.
    pub fn weight_factors(&self, s: f64) -> Array1<f64> {
        let n = self.sites.first().map_or(0, |m| m.nrows());
        let mut out = Array1::zeros(n);
        let inv = 1.0 / (s * s);
        for m in &self.sites {
            let d = m.ncols() as f64;
            for (o, row) in out.iter_mut().zip(m.rows()) {
                *o += inv * row.dot(&row) - d;
            }
        }
        out
    }
}

/// Per-layer caches for a batch. Index `0` of `activations` is `A^(0)`.
pub(crate) struct BatchTrace {
    pub activations: Vec<Array2<f64>>,
    pub pre_activations: Vec<Array2<f64>>,
}

impl BatchTrace {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().unwrap()
    }
}

fn perturb(value: &mut Array2<f64>, noise: Option<(&BatchNoise, usize)>, rows: &Range<usize>) {
    if let Some((noise, site)) = noise {
        let n = noise.sites[site].slice(s![rows.clone(), ..]);
        match noise.injection {
            Injection::Additive => *value += &n,
            Injection::Multiplicative { level } => {
                Zip::from(value).and(&n).for_each(|v, &g| *v *= 1.0 + level * g);
            }
        }
    }
}

/// Forward pass over rows `rows` of `x` (and the same rows of `noise`).
pub(crate) fn forward_rows(
    params: &Params,
    x: ArrayView2<f64>,
    noise: Option<&BatchNoise>,
    rows: Range<usize>,
) -> BatchTrace {
    let depth = params.arch().depth();
    let act = params.arch().activation();
    let mut activations = Vec::with_capacity(depth + 1);
    let mut pre_activations = Vec::with_capacity(depth);
    let mut a0 = x.slice(s![rows.clone(), ..]).to_owned();
    perturb(&mut a0, noise.map(|n| (n, 0)), &rows);
    activations.push(a0);
    for layer in 1..=depth {
        let lt = &params.layers[layer - 1];
        let mut z = activations[layer - 1].dot(&lt.weights.t());
        z += &lt.bias;
        perturb(&mut z, noise.map(|n| (n, 2 * layer - 1)), &rows);
        if layer < depth {
            let mut a = z.mapv(|v| act.apply(v));
            perturb(&mut a, noise.map(|n| (n, 2 * layer)), &rows);
            activations.push(a);
        } else {
            activations.push(z.clone());
        }
        pre_activations.push(z);
    }
    BatchTrace {
        activations,
        pre_activations,
    }
}

/// Backpropagated residuals `R^(l)` (row form, `n x d_l`) for `l = 1..L`.
pub(crate) fn backprop_rows(params: &Params, trace: &BatchTrace, y: ArrayView2<f64>) -> Vec<Array2<f64>> {
    let depth = params.arch().depth();
    let act = params.arch().activation();
    let mut rs: Vec<Array2<f64>> = Vec::with_capacity(depth);
    let mut r = &y - trace.output();
    for layer in (1..=depth).rev() {
        if layer < depth {
            let w_next = &params.layers[layer].weights;
            let mut back = r.dot(w_next);
            Zip::from(&mut back)
                .and(&trace.pre_activations[layer - 1])
                .for_each(|b, &z| *b *= act.derivative(z));
            r = back;
        }
        rs.push(r.clone());
    }
    rs.reverse();
    rs
}

/// `sum_i weight_i * (R^(l)_i (A^(l-1)_i)^T, R^(l)_i)` per layer.
pub(crate) fn weighted_outer(trace: &BatchTrace, rs: &[Array2<f64>], weights: Option<&Array1<f64>>) -> Tensors {
    let layers = rs
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let weighted;
            let r = match weights {
                Some(w) => {
                    weighted = r * &w.view().insert_axis(Axis(1));
                    &weighted
                }
                None => r,
            };
            crate::tensors::LayerTensors {
                weights: r.t().dot(&trace.activations[i]),
                bias: r.sum_axis(Axis(0)),
            }
        })
        .collect();
    Tensors { layers }
}

pub(crate) fn check_batch(params: &Params, x: ArrayView2<f64>, y: Option<ArrayView2<f64>>) -> Result<()> {
    let arch = params.arch();
    if x.ncols() != arch.input_dim() {
        return Err(shape("batch inputs", arch.input_dim(), x.ncols()));
    }
    if let Some(y) = y {
        if y.ncols() != arch.output_dim() {
            return Err(shape("batch targets", arch.output_dim(), y.ncols()));
        }
        if y.nrows() != x.nrows() {
            return Err(shape("batch rows", x.nrows(), y.nrows()));
        }
    }
    Ok(())
}

/// Maps every fixed-size chunk of `0..n` in parallel and folds the results
/// in chunk order.
pub(crate) fn chunked_reduce<T, M, F>(n: usize, map: M, mut fold: F) -> Option<T>
where
    T: Send,
    M: Fn(Range<usize>) -> T + Sync,
    F: FnMut(T, T) -> T,
{
    let chunks: Vec<Range<usize>> = (0..n.div_ceil(CHUNK_ROWS))
        .map(|c| c * CHUNK_ROWS..((c + 1) * CHUNK_ROWS).min(n))
        .collect();
    let parts: Vec<T> = chunks.into_par_iter().map(&map).collect();
    let mut it = parts.into_iter();
    let first = it.next()?;
    Some(it.fold(first, &mut fold))
}

pub(crate) fn add_tensors(mut a: Tensors, b: Tensors) -> Tensors {
    a.axpy(1.0, &b);
    a
}
