//! Numerical checks of the method's mathematical claims.
//!
//! Everything here is Monte-Carlo with explicit standard errors. Finite
//! differences in the noise level reuse one set of standard-normal draws,
//! rescaled to each level, so differences are not swamped by sampling noise.

use ndarray::{Array1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::batch::{backprop_rows, chunked_reduce, forward_rows, weighted_outer, BatchNoise};
use crate::data::{sample_indices, Dataset};
use crate::device::Device;
use crate::error::{domain, Error, Result};
use crate::gift::{estimate_direction, gift_run, GiftConfig};
use crate::model::{Activation, Architecture, Params};
use crate::noise::NoiseModel;
use crate::rng::{tags, RngStream};
use crate::stats::{Estimate, Running};
use crate::tensors::Tensors;
use crate::trainer::{train, TrainConfig};

/// Independent blocks used to attach standard errors to vector estimates.
const BLOCKS: usize = 50;
/// Interior points sampled from the open interval between `s0` and `s_t`.
pub const ZETA_GRID: usize = 9;

/// Componentwise Monte-Carlo estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorEstimate {
    pub value: Tensors,
    pub std_error: Tensors,
}

impl VectorEstimate {
    fn from_blocks(blocks: &[Tensors]) -> Self {
        let n = blocks.len() as f64;
        let mut mean = blocks[0].scaled(0.0);
        for b in blocks {
            mean.axpy(1.0 / n, b);
        }
        let mut var = mean.scaled(0.0);
        for b in blocks {
            for ((v, x), m) in var.iter_mut().zip(b.iter()).zip(mean.iter()) {
                *v += (x - m).powi(2);
            }
        }
        let denom = (n - 1.0).max(1.0) * n;
        for v in var.iter_mut() {
            *v = (*v / denom).sqrt();
        }
        Self {
            value: mean,
            std_error: var,
        }
    }

    /// Largest `|value - target| / std_error` over components.
    pub fn max_z(&self, target: &Tensors) -> f64 {
        self.value
            .iter()
            .zip(self.std_error.iter())
            .zip(target.iter())
            .map(|((v, se), t)| {
                let d = (v - t).abs();
                if d == 0.0 { 0.0 } else { d / se }
            })
            .fold(0.0, f64::max)
    }
}

/// Per-level gradients of `J_s`, one mean per block, for every level in
/// `levels`. All levels see the same data pairs and rescaled noise.
fn block_gradients(
    params: &Params,
    data: &Dataset,
    levels: &[f64],
    samples: usize,
    stream: RngStream,
) -> Result<Vec<Vec<Tensors>>> {
    if samples < 2 {
        return Err(domain("need at least 2 Monte-Carlo samples"));
    }
    if let Some(&bad) = levels.iter().find(|&&s| !(s >= 0.0 && s.is_finite())) {
        return Err(domain(format!("noise level must be finite and >= 0, got {bad}")));
    }
    check_dims(params, data)?;
    let blocks = BLOCKS.min(samples);
    let pairs = sample_indices(data.len(), samples, stream.child(0));
    let noise_root = stream.child(1);
    let arch = params.arch();
    let mut out = vec![Vec::with_capacity(blocks); levels.len()];
    for b in 0..blocks {
        let start = b * samples / blocks;
        let end = (b + 1) * samples / blocks;
        let sums = chunked_reduce(
            end - start,
            |rows| {
                let rows = rows.start + start..rows.end + start;
                let idx = &pairs[rows.clone()];
                let streams: Vec<RngStream> = rows.map(|r| noise_root.child(r as u64)).collect();
                let standard = BatchNoise::standard(arch, &streams);
                let x = data.inputs().select(Axis(0), idx);
                let y = data.targets().select(Axis(0), idx);
                levels
                    .iter()
                    .map(|&s| {
                        let noise = standard.scaled(s);
                        let trace = forward_rows(params, x.view(), Some(&noise), 0..idx.len());
                        let rs = backprop_rows(params, &trace, y.view());
                        weighted_outer(&trace, &rs, None)
                    })
                    .collect::<Vec<_>>()
            },
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(&b) {
                    x.axpy(1.0, y);
                }
                a
            },
        )
        .expect("non-empty block");
        let scale = -2.0 / (end - start) as f64;
        for (level, sum) in sums.into_iter().enumerate() {
            out[level].push(sum.scaled(scale));
        }
    }
    Ok(out)
}

fn check_dims(params: &Params, data: &Dataset) -> Result<()> {
    let arch = params.arch();
    if data.input_dim() != arch.input_dim() || data.output_dim() != arch.output_dim() {
        return Err(crate::error::shape(
            "dataset vs network",
            format!("{} -> {}", arch.input_dim(), arch.output_dim()),
            format!("{} -> {}", data.input_dim(), data.output_dim()),
        ));
    }
    Ok(())
}

/// Common-seed Monte-Carlo estimate of `grad_w J_s`.
pub fn mc_gradient(params: &Params, data: &Dataset, s: f64, samples: usize, stream: RngStream) -> Result<VectorEstimate> {
    let blocks = block_gradients(params, data, &[s], samples, stream)?;
    Ok(VectorEstimate::from_blocks(&blocks[0]))
}

/// Central difference in `s` of the common-seed estimate of `grad_w J_s`:
/// an oracle for `d/ds grad_w J_s`.
pub fn d_ds_grad_fd(
    params: &Params,
    data: &Dataset,
    s: f64,
    h: f64,
    samples: usize,
    stream: RngStream,
) -> Result<VectorEstimate> {
    if !(h > 0.0 && h < s) {
        return Err(domain(format!("finite-difference step must satisfy 0 < h < s, got h={h}, s={s}")));
    }
    let g = block_gradients(params, data, &[s - h, s + h], samples, stream)?;
    let fd: Vec<Tensors> = g[1]
        .iter()
        .zip(&g[0])
        .map(|(p, m)| p.sub(m).scaled(0.5 / h))
        .collect();
    Ok(VectorEstimate::from_blocks(&fd))
}

/// Three-point stencil in `s` for `d^2/ds^2 grad_w J_s`.
pub fn d2_ds2_grad_fd(
    params: &Params,
    data: &Dataset,
    s: f64,
    h: f64,
    samples: usize,
    stream: RngStream,
) -> Result<VectorEstimate> {
    if !(h > 0.0 && h < s) {
        return Err(domain(format!("finite-difference step must satisfy 0 < h < s, got h={h}, s={s}")));
    }
    let g = block_gradients(params, data, &[s - h, s, s + h], samples, stream)?;
    let fd: Vec<Tensors> = (0..g[0].len())
        .map(|b| {
            let mut t = g[0][b].clone();
            t.axpy(-2.0, &g[1][b]);
            t.axpy(1.0, &g[2][b]);
            t.scale(1.0 / (h * h));
            t
        })
        .collect();
    Ok(VectorEstimate::from_blocks(&fd))
}

/// Per-sample squared errors `|y - M_s(x, w)|^2` for `samples` (pair, noise)
/// draws. The same stream gives the same pairs and noise for any weights.
pub fn sample_losses(
    params: &Params,
    data: &Dataset,
    model: &NoiseModel,
    samples: usize,
    stream: RngStream,
) -> Result<Array1<f64>> {
    model.validate()?;
    check_dims(params, data)?;
    if samples == 0 {
        return Err(domain("need at least 1 Monte-Carlo sample"));
    }
    let pairs = sample_indices(data.len(), samples, stream.child(0));
    let noise_root = stream.child(1);
    let arch = params.arch();
    let parts = chunked_reduce(
        samples,
        |rows| {
            let idx = &pairs[rows.clone()];
            let streams: Vec<RngStream> = rows.map(|r| noise_root.child(r as u64)).collect();
            let noise = BatchNoise::sample(arch, model, &streams).expect("validated noise model");
            let x = data.inputs().select(Axis(0), idx);
            let y = data.targets().select(Axis(0), idx);
            let trace = forward_rows(params, x.view(), Some(&noise), 0..idx.len());
            vec![(&y - trace.output()).mapv(|v| v * v).sum_axis(Axis(1))]
        },
        |mut a, b| {
            a.extend(b);
            a
        },
    )
    .expect("non-empty");
    let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("1-d parts"))
}

/// Monte-Carlo estimate of `J_s(w)` under `model`.
pub fn mc_objective(params: &Params, data: &Dataset, model: &NoiseModel, samples: usize, stream: RngStream) -> Result<Estimate> {
    Ok(sample_losses(params, data, model, samples, stream)?.iter().copied().collect::<Running>().estimate())
}

/// Monte-Carlo estimate of `J(a) - J(b)` under common random numbers.
pub fn mc_objective_gap(
    a: &Params,
    b: &Params,
    data: &Dataset,
    model: &NoiseModel,
    samples: usize,
    stream: RngStream,
) -> Result<Estimate> {
    let la = sample_losses(a, data, model, samples, stream)?;
    let lb = sample_losses(b, data, model, samples, stream)?;
    Ok(la.iter().zip(lb.iter()).map(|(x, y)| x - y).collect::<Running>().estimate())
}

/// Outcome of [`check_backprop_fd`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackpropCheck {
    pub nets: usize,
    pub components: usize,
    /// Worst `|a - b| / max(|a|, |b|, 1e-3)` over all components.
    pub worst_rel_error: f64,
}

/// Compares backpropagated gradients of `|y - M(x, w, N)|^2` (noise draw
/// held fixed) with central differences of step `1e-6` on `n_nets` random
/// tanh networks whose layer widths are drawn from `1..=max_dims[i]`.
pub fn check_backprop_fd(n_nets: usize, max_dims: &[usize], stream: RngStream) -> Result<BackpropCheck> {
    if max_dims.len() < 2 || max_dims.contains(&0) {
        return Err(domain("max_dims needs at least two positive widths"));
    }
    const STEP: f64 = 1e-6;
    let mut worst: f64 = 0.0;
    let mut components = 0;
    for net in 0..n_nets as u64 {
        let case = stream.child(net);
        let mut rng = case.rng();
        let dims: Vec<usize> = max_dims.iter().map(|&m| rng.random_range(1..=m)).collect();
        let arch = Architecture::tanh(&dims)?;
        let mut params = Params::zeros(&arch);
        for v in params.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let x = Array1::from_shape_fn(dims[0], |_| rng.random_range(-1.0..1.0));
        let y = Array1::from_shape_fn(*dims.last().unwrap(), |_| rng.random_range(-1.0..1.0));
        let level = rng.random_range(0.05..0.5);
        let noise = crate::noise::sample_noise(&arch, &NoiseModel::gaussian(level)?, case.child(1))?;
        let loss = |p: &Params| -> Result<f64> {
            let out = crate::model::forward_noisy(p, x.view(), &noise)?;
            Ok((&y - out.output()).mapv(|v| v * v).sum())
        };
        let trace = crate::model::forward_noisy(&params, x.view(), &noise)?;
        let grad = crate::gradients::backward(&trace, y.view(), &params)?.gradient;
        let analytic = grad.to_flat();
        let flat = params.to_flat();
        for (i, &a) in analytic.iter().enumerate() {
            let mut up = flat.clone();
            up[i] += STEP;
            let mut down = flat.clone();
            down[i] -= STEP;
            let mut p_up = params.clone();
            p_up.set_flat(&up)?;
            let mut p_down = params.clone();
            p_down.set_flat(&down)?;
            let fd = (loss(&p_up)? - loss(&p_down)?) / (2.0 * STEP);
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-3));
            components += 1;
        }
    }
    Ok(BackpropCheck {
        nets: n_nets,
        components,
        worst_rel_error: worst,
    })
}

/// `log prod_i phi_s(n_i)` for isotropic centered Gaussians of std `s`.
pub fn gaussian_product_log_density(points: &[Array1<f64>], s: f64) -> f64 {
    points
        .iter()
        .map(|n| -0.5 * n.len() as f64 * (2.0 * std::f64::consts::PI * s * s).ln() - n.dot(n) / (2.0 * s * s))
        .sum()
}

/// `d/ds log prod_i phi_s(n_i) = (1/s) sum_i (|n_i|^2/s^2 - d_i)`.
pub fn gaussian_product_log_derivative(points: &[Array1<f64>], s: f64) -> f64 {
    points
        .iter()
        .map(|n| n.dot(n) / (s * s) - n.len() as f64)
        .sum::<f64>()
        / s
}

/// `d/ds prod_i phi_s(n_i)`.
pub fn gaussian_product_derivative(points: &[Array1<f64>], s: f64) -> f64 {
    gaussian_product_log_derivative(points, s) * gaussian_product_log_density(points, s).exp()
}

/// Worst relative error of the analytic log-derivative against a central
/// difference of the log-density, step `1e-4 * s`.
///
/// Errors are relative to `(1/s) sum_i (|n_i|^2/s^2 + d_i)`, the magnitude
/// of the summed terms, so cases where they cancel to zero stay meaningful.
pub fn check_gaussian_product_derivative(cases: &[(Vec<Array1<f64>>, f64)]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (points, s) in cases {
        let s = *s;
        if !(s > 0.0 && s.is_finite()) {
            return Err(domain(format!("s must be > 0, got {s}")));
        }
        let h = 1e-4 * s;
        let fd = (gaussian_product_log_density(points, s + h) - gaussian_product_log_density(points, s - h)) / (2.0 * h);
        let analytic = gaussian_product_log_derivative(points, s);
        let scale = points.iter().map(|n| n.dot(n) / (s * s) + n.len() as f64).sum::<f64>() / s;
        worst = worst.max((fd - analytic).abs() / scale);
    }
    Ok(worst)
}

/// Random Gaussian-product cases: 1 to 4 blocks of dimension 1 to 5, `s` in `[0.05, 2]`,
/// points at up to three standard deviations per coordinate.
pub fn gaussian_product_cases(count: usize, stream: RngStream) -> Vec<(Vec<Array1<f64>>, f64)> {
    let mut rng = stream.rng();
    (0..count)
        .map(|_| {
            let s = rng.random_range(0.05..2.0);
            let blocks = rng.random_range(1..=4);
            let points = (0..blocks)
                .map(|_| {
                    let d = rng.random_range(1..=5);
                    Array1::from_shape_fn(d, |_| 3.0 * s * rng.random_range(-1.0..1.0))
                })
                .collect();
            (points, s)
        })
        .collect()
}

/// `(1 + s0^2 / E[x_i^2]) / (2 |V|)`: the admissible `|s_t - s0|` for the
/// linear example.
pub fn linear_condition_bound(v: &[f64], s0: f64, ex2: f64) -> Result<f64> {
    if !(s0 > 0.0 && s0.is_finite()) {
        return Err(domain(format!("s0 must be > 0, got {s0}")));
    }
    if !(ex2 > 0.0 && ex2.is_finite()) {
        return Err(domain(format!("E[x^2] must be > 0, got {ex2}")));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(domain("V must be nonzero"));
    }
    Ok((1.0 + s0 * s0 / ex2) / (2.0 * norm))
}

/// `|first| / (|second . first| / 2)`: the admissible `|s_t - s0|` given the
/// first and second noise-level derivatives of the gradient.
pub fn condition_quotient(first: &Tensors, second: &Tensors) -> f64 {
    let denom = 0.5 * second.dot(first).abs();
    if denom == 0.0 { f64::INFINITY } else { first.norm() / denom }
}

/// Linear single-output task `y = V x`, `x ~ N(0, sigma_x^2 I)`, fit by a
/// one-layer identity network with Gaussian noise at its input and output.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearExample {
    pub v: Array1<f64>,
    pub sigma_x: f64,
}

impl LinearExample {
    pub fn new(v: &[f64], sigma_x: f64) -> Result<Self> {
        if v.is_empty() || !(sigma_x > 0.0) {
            return Err(domain("linear example needs a nonempty V and sigma_x > 0"));
        }
        Ok(Self { v: Array1::from(v.to_vec()), sigma_x })
    }

    pub fn arch(&self) -> Architecture {
        Architecture::new(vec![self.v.len(), 1], Activation::Identity).expect("valid dims")
    }

    fn ex2(&self) -> f64 {
        self.sigma_x * self.sigma_x
    }

    fn weights(params: &Params) -> (Array1<f64>, f64) {
        (params.layers[0].weights.row(0).to_owned(), params.layers[0].bias[0])
    }

    /// `J_s(W, b) = sigma^2 |V - W|^2 + s^2 |W|^2 + b^2 + s^2`.
    pub fn objective(&self, params: &Params, s: f64) -> f64 {
        let (w, b) = Self::weights(params);
        let d = &self.v - &w;
        self.ex2() * d.dot(&d) + s * s * w.dot(&w) + b * b + s * s
    }

    /// Minimizer of `J_s`: `W = sigma^2 / (sigma^2 + s^2) V`, `b = 0`.
    pub fn optimum(&self, s: f64) -> Params {
        let w = &self.v * (self.ex2() / (self.ex2() + s * s));
        Params::single_layer(w.insert_axis(Axis(0)), Array1::zeros(1), Activation::Identity).expect("finite")
    }

    /// `d/ds grad J_s = (4 s W, 0)`.
    pub fn sensitivity(&self, params: &Params, s: f64) -> Tensors {
        let mut t = params.tensors().scaled(4.0 * s);
        t.layers[0].bias.fill(0.0);
        t
    }

    /// `d^2/ds^2 grad J_s = (4 W, 0)`, independent of `s`.
    pub fn second_sensitivity(&self, params: &Params) -> Tensors {
        self.sensitivity(params, 1.0)
    }

    pub fn condition_bound(&self, s0: f64) -> Result<f64> {
        linear_condition_bound(self.v.as_slice().expect("contiguous"), s0, self.ex2())
    }

    /// `J_{s_t}(W*_{s0}) - J_{s_t}(W*_{s_t}) = (sigma^2 + s_t^2) |W*_{s_t} - W*_{s0}|^2`.
    pub fn exact_gap(&self, s0: f64, s_t: f64) -> f64 {
        let d = self.optimum(s_t).tensors().sub(self.optimum(s0).tensors());
        (self.ex2() + s_t * s_t) * d.dot(&d)
    }

    pub fn dataset(&self, n: usize, stream: RngStream) -> Result<Dataset> {
        crate::data::synthetic_linear(self.v.as_slice().expect("contiguous"), self.sigma_x, n, stream)
    }
}

/// Finite-difference settings for noise-level derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdConfig {
    pub h: f64,
    pub samples: usize,
}

/// Whether `|s_t - s0|` lies inside the admissible range at `w0`.
///
/// The condition quantifies over every `zeta` strictly between `s0` and
/// `s_t`; only [`ZETA_GRID`] equally spaced interior points are checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub s0: f64,
    pub s_t: f64,
    /// `|d/ds grad J_{s0}(w0)|`.
    pub first_norm: f64,
    pub first_norm_se: f64,
    pub zetas: Vec<f64>,
    /// `(d^2/ds^2 grad J_zeta(w0)) . (d/ds grad J_{s0}(w0))` per grid point.
    pub inner_products: Vec<f64>,
    pub inner_product_se: Vec<f64>,
    /// Admissible `|s_t - s0|`, minimized over the grid.
    pub bound: f64,
    pub satisfied: bool,
}

fn zeta_grid(s0: f64, s_t: f64) -> Vec<f64> {
    let (lo, hi) = (s0.min(s_t), s0.max(s_t));
    (1..=ZETA_GRID)
        .map(|j| lo + (hi - lo) * j as f64 / (ZETA_GRID + 1) as f64)
        .collect()
}

pub fn condition_report(
    params: &Params,
    data: &Dataset,
    s0: f64,
    s_t: f64,
    fd: &FdConfig,
    stream: RngStream,
) -> Result<ConditionReport> {
    if s0 == s_t {
        return Err(domain("condition check needs s0 != s_t"));
    }
    let first = d_ds_grad_fd(params, data, s0, fd.h, fd.samples, stream.child(0))?;
    let first_norm = first.value.norm();
    let first_norm_se = if first_norm > 0.0 {
        first
            .value
            .iter()
            .zip(first.std_error.iter())
            .map(|(v, se)| (v * se / first_norm).powi(2))
            .sum::<f64>()
            .sqrt()
    } else {
        0.0
    };
    let zetas = zeta_grid(s0, s_t);
    let mut inner_products = Vec::with_capacity(zetas.len());
    let mut inner_product_se = Vec::with_capacity(zetas.len());
    let mut bound = f64::INFINITY;
    for (j, &zeta) in zetas.iter().enumerate() {
        let h = fd.h.min(0.5 * zeta);
        let second = d2_ds2_grad_fd(params, data, zeta, h, fd.samples, stream.child(1).child(j as u64))?;
        let ip = second.value.dot(&first.value);
        let se = second
            .value
            .iter()
            .zip(second.std_error.iter())
            .zip(first.value.iter().zip(first.std_error.iter()))
            .map(|((s, sse), (f, fse))| (f * sse).powi(2) + (s * fse).powi(2))
            .sum::<f64>()
            .sqrt();
        bound = bound.min(condition_quotient(&first.value, &second.value));
        inner_products.push(ip);
        inner_product_se.push(se);
    }
    let gap = (s_t - s0).abs();
    Ok(ConditionReport {
        s0,
        s_t,
        first_norm,
        first_norm_se,
        zetas,
        inner_products,
        inner_product_se,
        bound,
        satisfied: gap > 0.0 && gap < bound,
    })
}

/// Settings for the repeated-seed check of the improvement claims.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Config {
    pub s0: f64,
    pub s_t: f64,
    /// Training settings; `seed` is replaced per repetition.
    pub train: TrainConfig,
    pub gift: GiftConfig,
    pub direction_k1: usize,
    pub direction_k2: usize,
    /// Monte-Carlo samples for each objective comparison.
    pub eval_samples: usize,
    /// Estimate the admissible range at each `w0` when set.
    pub condition: Option<FdConfig>,
    pub n_seeds: usize,
    pub base_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    /// `J_{s_t}(w0) - J_{s_t}(w_t)`.
    pub retrain_gap: Estimate,
    /// `J_{s_t}(w0) - J_{s_t}(w_f)` from samples independent of the search.
    pub gift_improvement: Estimate,
    /// Improvement as scored by the search itself; never negative.
    pub search_improvement: f64,
    pub condition: Option<ConditionReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub s0: f64,
    pub s_t: f64,
    pub seeds: Vec<SeedOutcome>,
    /// Seeds whose training diverged, with the error message.
    pub excluded: Vec<(u64, String)>,
    /// Mean over seeds of the independent GIFT improvement estimates.
    pub mean_gift_improvement: Estimate,
    pub mean_retrain_gap: Estimate,
}

impl Theorem1Report {
    /// Fraction of seeds where `w_t` beats `w0` by more than 3 standard errors.
    pub fn retrain_win_fraction(&self) -> f64 {
        let wins = self.seeds.iter().filter(|s| s.retrain_gap.mean > 3.0 * s.retrain_gap.std_error).count();
        wins as f64 / self.seeds.len().max(1) as f64
    }
}

/// Trains `w0` at `s0` and `w_t` at `s_t` from the same initialization for
/// each seed, runs GIFT from `w0` on a Gaussian device at `s_t`, and compares
/// all three with common-random-number estimates of `J_{s_t}`.
pub fn check_theorem1_empirically(arch: &Architecture, data: &Dataset, cfg: &Theorem1Config) -> Result<Theorem1Report> {
    if cfg.s0 == cfg.s_t {
        return Err(domain("theorem check needs s0 != s_t"));
    }
    if cfg.n_seeds == 0 {
        return Err(domain("theorem check needs n_seeds >= 1"));
    }
    let device_model = NoiseModel::gaussian(cfg.s_t)?;
    let mut seeds = Vec::with_capacity(cfg.n_seeds);
    let mut excluded = Vec::new();
    for i in 0..cfg.n_seeds as u64 {
        let seed = cfg.base_seed + i;
        let root = RngStream::root(seed);
        let trained = |s: f64| {
            let tc = TrainConfig { s0: s, seed, ..cfg.train.clone() };
            train(arch, &tc, data, None)
        };
        let (w0, wt) = match (trained(cfg.s0), trained(cfg.s_t)) {
            (Ok(a), Ok(b)) => (a.params, b.params),
            (Err(e @ Error::Diverged { .. }), _) | (_, Err(e @ Error::Diverged { .. })) => {
                excluded.push((seed, e.to_string()));
                continue;
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        let direction = estimate_direction(&w0, data, cfg.s0, cfg.direction_k1, cfg.direction_k2, root.child(tags::DIRECTION))?;
        let mut device = Device::new(w0.clone(), device_model, root.child(tags::DEVICE).rng().random())?;
        let outcome = gift_run(&mut device, &w0, &direction, &cfg.gift, data, root.child(tags::EVAL))?;
        let eval = root.child(tags::TEST_EVAL);
        let retrain_gap = mc_objective_gap(&w0, &wt, data, &device_model, cfg.eval_samples, eval)?;
        let gift_improvement = mc_objective_gap(&w0, &outcome.params, data, &device_model, cfg.eval_samples, eval)?;
        let condition = match &cfg.condition {
            Some(fd) => Some(condition_report(&w0, data, cfg.s0, cfg.s_t, fd, root.child(tags::ORACLE))?),
            None => None,
        };
        seeds.push(SeedOutcome {
            seed,
            retrain_gap,
            gift_improvement,
            search_improvement: outcome.trace.loss_improvement(),
            condition,
        });
    }
    if seeds.is_empty() {
        return Err(domain("every seed diverged"));
    }
    let mean_gift_improvement = seeds.iter().map(|s| s.gift_improvement.mean).collect::<Running>().estimate();
    let mean_retrain_gap = seeds.iter().map(|s| s.retrain_gap.mean).collect::<Running>().estimate();
    Ok(Theorem1Report {
        s0: cfg.s0,
        s_t: cfg.s_t,
        seeds,
        excluded,
        mean_gift_improvement,
        mean_retrain_gap,
    })
}

/// Test functions `f(A, B)` with a known nested expectation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HierarchicalSpec {
    /// `f = c`.
    Constant(f64),
    /// `A ~ U(0, 1)`, `B | A ~ N(0, A)` (variance `A`), `f = A B^2`; `E f = 1/3`.
    UniformGaussianProduct,
}

impl HierarchicalSpec {
    pub fn exact_mean(&self) -> f64 {
        match self {
            Self::Constant(c) => *c,
            Self::UniformGaussianProduct => 1.0 / 3.0,
        }
    }
}

/// Draws `k1` outer samples and `k2` inner samples per outer sample;
/// returns the grand mean and its standard error from the `k1` group means.
pub fn hierarchical_estimate(spec: &HierarchicalSpec, k1: usize, k2: usize, stream: RngStream) -> Result<Estimate> {
    if k1 == 0 || k2 == 0 {
        return Err(domain("hierarchical sampling needs k1, k2 >= 1"));
    }
    let groups: Running = (0..k1 as u64)
        .map(|k| {
            let mut rng = stream.child(k).rng();
            let mut inner = Running::default();
            match spec {
                HierarchicalSpec::Constant(c) => (0..k2).for_each(|_| inner.push(*c)),
                HierarchicalSpec::UniformGaussianProduct => {
                    let a: f64 = rng.random();
                    for _ in 0..k2 {
                        let z: f64 = rng.sample(StandardNormal);
                        inner.push(a * a * z * z);
                    }
                }
            }
            inner.mean()
        })
        .collect();
    Ok(groups.estimate())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalRow {
    pub k1: usize,
    pub k2: usize,
    /// Root-mean-square error over repetitions.
    pub rmse: f64,
    /// Mean of the per-repetition standard errors.
    pub mean_std_error: f64,
    /// Largest `|estimate - E f| / std_error` over repetitions.
    pub max_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalReport {
    pub exact: f64,
    pub rows: Vec<HierarchicalRow>,
    /// RMSE strictly decreases along `rows` (sorted by `k1 * k2`).
    pub error_decreases: bool,
    /// Every estimate lies within 4 standard errors.
    pub within_4_se: bool,
}

pub fn check_hierarchical_sampler(
    spec: &HierarchicalSpec,
    sizes: &[(usize, usize)],
    n_reps: usize,
    stream: RngStream,
) -> Result<HierarchicalReport> {
    if n_reps == 0 {
        return Err(domain("need at least one repetition"));
    }
    let exact = spec.exact_mean();
    let mut sizes = sizes.to_vec();
    sizes.sort_by_key(|&(a, b)| a * b);
    let mut rows = Vec::with_capacity(sizes.len());
    for (i, &(k1, k2)) in sizes.iter().enumerate() {
        let mut sq = 0.0;
        let mut se = 0.0;
        let mut max_z: f64 = 0.0;
        for r in 0..n_reps as u64 {
            let est = hierarchical_estimate(spec, k1, k2, stream.child(i as u64).child(r))?;
            let err = est.mean - exact;
            sq += err * err;
            se += est.std_error;
            if err != 0.0 {
                max_z = max_z.max(err.abs() / est.std_error);
            }
        }
        rows.push(HierarchicalRow {
            k1,
            k2,
            rmse: (sq / n_reps as f64).sqrt(),
            mean_std_error: se / n_reps as f64,
            max_z,
        });
    }
    let error_decreases = rows.windows(2).all(|w| w[1].rmse < w[0].rmse);
    let within_4_se = rows.iter().all(|r| r.max_z < 4.0);
    Ok(HierarchicalReport {
        exact,
        rows,
        error_decreases,
        within_4_se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn example() -> LinearExample {
        LinearExample::new(&[0.6, -0.3, 0.2], 1.0).unwrap()
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let r = check_backprop_fd(20, &[5, 7, 4, 3], RngStream::root(1)).unwrap();
        assert!(r.worst_rel_error < 1e-5, "{r:?}");
        assert!(r.components > 20);
        assert!(check_backprop_fd(1, &[3], RngStream::root(1)).is_err());
    }

    #[test]
    fn gaussian_product_examples() {
        let s = 0.8;
        let zero = vec![array![0.0]];
        let phi = (1.0 / (2.0 * std::f64::consts::PI * s * s)).sqrt();
        assert!((gaussian_product_derivative(&zero, s) + phi / s).abs() < 1e-15);
        assert!(check_gaussian_product_derivative(&[(zero, s)]).unwrap() < 1e-6);
        // |n|^2 = s^2 d zeroes the factor.
        let flat = vec![array![s, -s]];
        assert!(gaussian_product_log_derivative(&flat, s).abs() < 1e-15);
        let mut rng = RngStream::root(3).rng();
        let pts = vec![
            Array1::from_shape_fn(2, |_| rng.random_range(-1.0..1.0)),
            Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0)),
        ];
        assert!(check_gaussian_product_derivative(&[(pts, 0.7)]).unwrap() < 1e-6);
        assert!(check_gaussian_product_derivative(&[(flat, 0.0)]).is_err());
    }

    #[test]
    fn gaussian_product_random_cases() {
        let cases = gaussian_product_cases(200, RngStream::root(9));
        assert!(check_gaussian_product_derivative(&cases).unwrap() < 1e-6);
    }

    #[test]
    fn linear_bound_arithmetic() {
        assert!((linear_condition_bound(&[0.5], 1e-9, 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(linear_condition_bound(&[0.6, 0.8], 1.0, 1.0).unwrap(), 1.0);
        let a = linear_condition_bound(&[0.3, 0.4], 0.2, 2.0).unwrap();
        let b = linear_condition_bound(&[0.6, 0.8], 0.2, 2.0).unwrap();
        assert!((a - 2.0 * b).abs() < 1e-15);
        assert!(linear_condition_bound(&[0.0, 0.0], 0.2, 1.0).is_err());
        assert!(linear_condition_bound(&[1.0], 0.0, 1.0).is_err());
    }

    #[test]
    fn analytic_quotient_matches_linear_bound() {
        let ex = example();
        for s0 in [0.1, 0.5, 1.3] {
            let w0 = ex.optimum(s0);
            let q = condition_quotient(&ex.sensitivity(&w0, s0), &ex.second_sensitivity(&w0));
            let bound = ex.condition_bound(s0).unwrap();
            assert!((q - bound).abs() < 1e-12 * bound, "{q} vs {bound}");
        }
    }

    #[test]
    fn mc_objective_matches_closed_form() {
        let ex = example();
        let data = ex.dataset(50_000, RngStream::root(1)).unwrap();
        let mut rng = RngStream::root(2).rng();
        for (i, s) in [0.1, 0.4, 0.9].into_iter().enumerate() {
            let w = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
            let p = Params::single_layer(w.insert_axis(Axis(0)), array![0.2], Activation::Identity).unwrap();
            let est = mc_objective(&p, &data, &NoiseModel::gaussian(s).unwrap(), 200_000, RngStream::root(10 + i as u64)).unwrap();
            // The data set is a finite sample, so allow for its own deviation
            // from the population objective.
            let exact = ex.objective(&p, s);
            assert!(est.z_score(exact).abs() < 3.0 || (est.mean - exact).abs() < 0.01 * exact, "{est:?} vs {exact}");
        }
    }

    #[test]
    fn fd_sensitivity_on_linear_example() {
        let ex = example();
        let data = ex.dataset(100_000, RngStream::root(1)).unwrap();
        let w = ex.optimum(0.5);
        let s = 0.5;
        let est = d_ds_grad_fd(&w, &data, s, 0.05, 200_000, RngStream::root(5)).unwrap();
        let z = est.max_z(&ex.sensitivity(&w, s));
        assert!(z < 3.5, "z = {z}, {est:?}");
        // Exactly quadratic in s per sample: the central difference does not
        // depend on h beyond rounding.
        let half = d_ds_grad_fd(&w, &data, s, 0.025, 200_000, RngStream::root(5)).unwrap();
        for (a, b) in est.value.iter().zip(half.value.iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert!(d_ds_grad_fd(&w, &data, s, 0.5, 10, RngStream::root(5)).is_err());
    }

    #[test]
    fn fd_vanishes_at_noiseless_optimum() {
        let ex = example();
        let data = ex.dataset(1000, RngStream::root(1)).unwrap();
        let w = ex.optimum(0.0);
        let est = d_ds_grad_fd(&w, &data, 1e-4, 5e-5, 200_000, RngStream::root(5)).unwrap();
        // The mean vanishes; the per-sample spread does not, since the
        // residual's slope in s is O(1).
        assert!(est.max_z(&w.tensors().scaled(0.0)) < 4.0, "{est:?}");
        assert!(est.value.max_abs() < 0.02, "{:?}", est.value);
    }

    #[test]
    fn second_derivative_on_linear_example() {
        let ex = example();
        let data = ex.dataset(100_000, RngStream::root(1)).unwrap();
        let w = ex.optimum(0.3);
        let est = d2_ds2_grad_fd(&w, &data, 0.4, 0.05, 100_000, RngStream::root(6)).unwrap();
        assert!(est.max_z(&ex.second_sensitivity(&w)) < 3.5, "{est:?}");
    }

    #[test]
    fn condition_report_on_linear_example() {
        let ex = example();
        let data = ex.dataset(100_000, RngStream::root(1)).unwrap();
        let s0 = 0.3;
        let w0 = ex.optimum(s0);
        let fd = FdConfig { h: 0.05, samples: 100_000 };
        let r = condition_report(&w0, &data, s0, 0.5, &fd, RngStream::root(7)).unwrap();
        let bound = ex.condition_bound(s0).unwrap();
        assert_eq!(r.zetas.len(), ZETA_GRID);
        assert!(r.zetas.iter().all(|&z| z > 0.3 && z < 0.5));
        assert!((r.bound - bound).abs() < 0.1 * bound, "{} vs {bound}", r.bound);
        assert!(r.satisfied);
        let far = condition_report(&w0, &data, s0, s0 + 2.0 * bound, &fd, RngStream::root(7)).unwrap();
        assert!(!far.satisfied);
        assert!(condition_report(&w0, &data, s0, s0, &fd, RngStream::root(7)).is_err());
    }

    #[test]
    fn exact_gap_matches_objectives() {
        let ex = example();
        let (s0, st) = (0.2, 0.6);
        let direct = ex.objective(&ex.optimum(s0), st) - ex.objective(&ex.optimum(st), st);
        assert!((direct - ex.exact_gap(s0, st)).abs() < 1e-12);
        assert_eq!(ex.exact_gap(st, st), 0.0);
    }

    #[test]
    fn hierarchical_sampler_examples() {
        let c = hierarchical_estimate(&HierarchicalSpec::Constant(0.7), 13, 9, RngStream::root(1)).unwrap();
        assert_eq!(c.mean, 0.7);
        let spec = HierarchicalSpec::UniformGaussianProduct;
        let est = hierarchical_estimate(&spec, 1000, 100, RngStream::root(2)).unwrap();
        assert!(est.z_score(1.0 / 3.0).abs() < 4.0);
        // K2 = 1 is the plain mean over K1 draws.
        let one = hierarchical_estimate(&spec, 50, 1, RngStream::root(3)).unwrap();
        let plain: Running = (0..50u64)
            .map(|k| {
                let mut rng = RngStream::root(3).child(k).rng();
                let a: f64 = rng.random();
                let z: f64 = rng.sample(StandardNormal);
                a * a * z * z
            })
            .collect();
        assert_eq!(one.mean, plain.mean());
        let report = check_hierarchical_sampler(&spec, &[(100, 10), (100, 100), (400, 100)], 10, RngStream::root(4)).unwrap();
        assert!(report.error_decreases && report.within_4_se, "{report:?}");
    }

    #[test]
    fn theorem_check_on_linear_task() {
        use crate::gift::StopRule;
        use crate::trainer::{InitScheme, StepSchedule, TrainLength};
        let ex = LinearExample::new(&[0.5, -0.5], 1.0).unwrap();
        let data = ex.dataset(20_000, RngStream::root(1)).unwrap();
        let cfg = Theorem1Config {
            s0: 0.2,
            s_t: 0.6,
            train: TrainConfig {
                s0: 0.2,
                batch_size: 64,
                length: TrainLength::Steps(4000),
                schedule: StepSchedule { eps0: 0.05, decay: 1.0, tau: 500.0 },
                projection: None,
                seed: 0,
                init: InitScheme::ZerosBias,
            },
            gift: GiftConfig { eta: 0.05, k1: 200, k2: 10, max_steps: 20, stop_rule: StopRule::EitherWorse },
            direction_k1: 200,
            direction_k2: 50,
            eval_samples: 200_000,
            condition: None,
            n_seeds: 3,
            base_seed: 100,
        };
        let r = check_theorem1_empirically(&ex.arch(), &data, &cfg).unwrap();
        assert_eq!(r.seeds.len(), 3);
        assert!(r.excluded.is_empty());
        assert!(r.retrain_win_fraction() >= 0.9, "{r:?}");
        assert!(r.seeds.iter().all(|s| s.search_improvement >= 0.0));
    }
}
