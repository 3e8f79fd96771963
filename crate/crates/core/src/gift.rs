//! Gradient-informed fine-tuning.
//!
//! Three steps: estimate how the loss gradient moves with the noise level
//! (in silico), score candidates along that direction on the device (in
//! situ), and keep the best point seen, the starting weights included.

use std::ops::{Deref, DerefMut};

use ndarray::{Array1, Axis};
use serde::{Deserialize, Serialize};

use crate::batch::{add_tensors, backprop_rows, chunked_reduce, forward_rows, weighted_outer, BatchNoise};
use crate::data::{argmax, sample_indices, Dataset};
use crate::device::Device;
use crate::error::{domain, shape, Result};
use crate::model::Params;
use crate::noise::{NoiseDraw, NoiseModel};
use crate::rng::RngStream;
use crate::stats::Running;
use crate::tensors::Tensors;

/// Search direction `D^[0]`, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction(pub Tensors);

impl Deref for Direction {
    type Target = Tensors;
    fn deref(&self) -> &Tensors {
        &self.0
    }
}

impl DerefMut for Direction {
    fn deref_mut(&mut self) -> &mut Tensors {
        &mut self.0
    }
}

impl Direction {
    /// Converts the raw estimator into an estimate of `d/ds grad_w J_s` at
    /// `s0`.
    ///
    /// The raw estimator weights `R (A)^T` by `sum(|N|^2/s0^2 - d)`. Since
    /// `d/ds log phi_s(n) = (|n|^2/s^2 - d)/s` and `grad_W (y - M)^2 = -2 R A^T`,
    /// its mean equals `-(s0/2) d/ds grad_w J`. The line search explores both
    /// signs and any step length, so it uses the raw form.
    pub fn to_sensitivity(&self, s0: f64) -> Tensors {
        self.0.scaled(-2.0 / s0)
    }
}

/// Termination of the line search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Stop as soon as either candidate of a step is no better than the start.
    #[default]
    EitherWorse,
    /// Stop once both candidates of a step are no better than the start.
    BothWorse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GiftConfig {
    /// Step length `eta` along the direction.
    pub eta: f64,
    /// Data pairs per evaluation (and per direction estimate).
    pub k1: usize,
    /// Noise draws / device queries per data pair.
    pub k2: usize,
    pub max_steps: usize,
    #[serde(default)]
    pub stop_rule: StopRule,
}

impl GiftConfig {
    pub fn validate(&self) -> Result<()> {
        // eta = 0 is accepted: it degenerates to re-evaluating w0.
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(domain(format!("gift.eta must be finite and >= 0, got {}", self.eta)));
        }
        if self.k1 == 0 || self.k2 == 0 {
            return Err(domain("gift.k1 and gift.k2 must be >= 1"));
        }
        if self.max_steps == 0 {
            return Err(domain("gift.max_steps must be >= 1"));
        }
        Ok(())
    }
}

/// `sum_alpha (s0^-2 |N^alpha|^2 - d_alpha)` over the noise vectors of a draw.
pub fn noise_weight_factor(noise: &NoiseDraw, s0: f64) -> Result<f64> {
    if !(s0 > 0.0) {
        return Err(domain(format!("s0 must be > 0, got {s0}")));
    }
    let inv = 1.0 / (s0 * s0);
    Ok(noise.sites.iter().map(|n| inv * n.dot(n) - n.len() as f64).sum())
}

/// Hierarchical Monte-Carlo estimate of the noise-sensitivity direction.
///
/// Draws `k1` data pairs, and for each `k2` Gaussian noise draws at level
/// `s0`; every `(k, m)` term contributes `factor(N) * (R^(l) (A^(l-1))^T, R^(l))`
/// and the result is the mean over all `k1 * k2` terms.
pub fn estimate_direction(
    params: &Params,
    data: &Dataset,
    s0: f64,
    k1: usize,
    k2: usize,
    stream: RngStream,
) -> Result<Direction> {
    if k1 == 0 || k2 == 0 {
        return Err(domain("estimate_direction needs k1, k2 >= 1"));
    }
    if data.is_empty() {
        return Err(domain("estimate_direction needs a non-empty dataset"));
    }
    check_data(params, data)?;
    let model = NoiseModel::gaussian(s0)?;
    let pairs = sample_indices(data.len(), k1, stream.child(0));
    let noise_root = stream.child(1);
    let total = k1 * k2;
    let arch = params.arch();
    let sum = chunked_reduce(
        total,
        |rows| {
            let idx: Vec<usize> = rows.clone().map(|r| pairs[r / k2]).collect();
            let streams: Vec<RngStream> = rows.clone().map(|r| noise_root.child(r as u64)).collect();
            let noise = BatchNoise::sample(arch, &model, &streams).expect("validated noise model");
            let x = data.inputs().select(Axis(0), &idx);
            let y = data.targets().select(Axis(0), &idx);
            let trace = forward_rows(params, x.view(), Some(&noise), 0..idx.len());
            let rs = backprop_rows(params, &trace, y.view());
            let factors = noise.weight_factors(s0);
            weighted_outer(&trace, &rs, Some(&factors))
        },
        add_tensors,
    )
    .expect("at least one term");
    let mut d = Direction(sum);
    d.scale(1.0 / total as f64);
    Ok(d)
}

/// How the in-silico direction is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DirectionMethod {
    /// The weighted score-function sum of [`estimate_direction`].
    #[default]
    ScoreFunction,
    /// Central difference of the noisy gradient in `s` with the same
    /// standard-normal draws rescaled to `s0 (1 +- rel_step)`, converted to
    /// the score-function scale. Same expectation up to `O(rel_step^2)`, far
    /// lower variance on wide networks.
    CommonNoiseFd { rel_step: f64 },
}

/// Estimates the direction at `params` with `method`.
pub fn estimate_direction_with(
    method: DirectionMethod,
    params: &Params,
    data: &Dataset,
    s0: f64,
    k1: usize,
    k2: usize,
    stream: RngStream,
) -> Result<Direction> {
    match method {
        DirectionMethod::ScoreFunction => estimate_direction(params, data, s0, k1, k2, stream),
        DirectionMethod::CommonNoiseFd { rel_step } => {
            estimate_direction_fd(params, data, s0, rel_step * s0, k1, k2, stream)
        }
    }
}

/// `-(s0/2) * [g(s0+h) - g(s0-h)] / (2h)` where `g(s)` is the Monte-Carlo
/// gradient of `J_s` over `k1 x k2` (pair, noise) draws shared by both
/// levels. Its mean matches [`estimate_direction`]'s up to `O(h^2)`.
pub fn estimate_direction_fd(
    params: &Params,
    data: &Dataset,
    s0: f64,
    h: f64,
    k1: usize,
    k2: usize,
    stream: RngStream,
) -> Result<Direction> {
    if k1 == 0 || k2 == 0 {
        return Err(domain("estimate_direction needs k1, k2 >= 1"));
    }
    if data.is_empty() {
        return Err(domain("estimate_direction needs a non-empty dataset"));
    }
    if !(s0 > 0.0) || !(h > 0.0 && h < s0) {
        return Err(domain(format!("need s0 > 0 and 0 < h < s0, got s0={s0}, h={h}")));
    }
    check_data(params, data)?;
    let pairs = sample_indices(data.len(), k1, stream.child(0));
    let noise_root = stream.child(1);
    let total = k1 * k2;
    let arch = params.arch();
    let sum = chunked_reduce(
        total,
        |rows| {
            let idx: Vec<usize> = rows.clone().map(|r| pairs[r / k2]).collect();
            let streams: Vec<RngStream> = rows.clone().map(|r| noise_root.child(r as u64)).collect();
            let standard = BatchNoise::standard(arch, &streams);
            let x = data.inputs().select(Axis(0), &idx);
            let y = data.targets().select(Axis(0), &idx);
            let outer = |s: f64| {
                let noise = standard.scaled(s);
                let trace = forward_rows(params, x.view(), Some(&noise), 0..idx.len());
                let rs = backprop_rows(params, &trace, y.view());
                weighted_outer(&trace, &rs, None)
            };
            let mut up = outer(s0 + h);
            up.axpy(-1.0, &outer(s0 - h));
            up
        },
        add_tensors,
    )
    .expect("at least one term");
    // gradient = -2 * mean(R A^T), so -(s0/2) * d/ds gradient = s0 * d/ds mean(R A^T).
    let mut d = Direction(sum);
    d.scale(s0 / (2.0 * h * total as f64));
    Ok(d)
}

fn check_data(params: &Params, data: &Dataset) -> Result<()> {
    let arch = params.arch();
    if data.input_dim() != arch.input_dim() || data.output_dim() != arch.output_dim() {
        return Err(shape(
            "dataset vs network",
            format!("{} -> {}", arch.input_dim(), arch.output_dim()),
            format!("{} -> {}", data.input_dim(), data.output_dim()),
        ));
    }
    Ok(())
}

/// In-situ performance estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean of `|y - Phi(x, w)|^2` over all `k1 * k2` queries.
    pub loss: f64,
    /// Standard error of `loss`, from the spread of the per-pair means.
    pub loss_se: f64,
    /// Fraction of queries whose output argmax matches the target argmax
    /// (classification data only).
    pub accuracy: Option<f64>,
    pub accuracy_se: Option<f64>,
    pub samples: usize,
    pub queries: u64,
}

/// The data pairs and device noise keys shared by every evaluation of one
/// search, so candidates are compared under common random numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPlan {
    pub k1: usize,
    pub k2: usize,
    pub indices: Vec<usize>,
    pub tags: Vec<u64>,
}

impl EvalPlan {
    pub fn new(data_len: usize, k1: usize, k2: usize, stream: RngStream) -> Result<Self> {
        if k1 == 0 || k2 == 0 {
            return Err(domain("evaluation needs k1, k2 >= 1"));
        }
        if data_len == 0 {
            return Err(domain("evaluation needs a non-empty dataset"));
        }
        let pairs = sample_indices(data_len, k1, stream.child(0));
        let base = rand::Rng::random::<u64>(&mut stream.child(1).rng()) & !((1u64 << 40) - 1);
        Ok(Self {
            k1,
            k2,
            indices: pairs.iter().flat_map(|&p| std::iter::repeat_n(p, k2)).collect(),
            tags: (0..(k1 * k2) as u64).map(|i| base | i).collect(),
        })
    }
}

/// Scores `params` on the device under `plan`.
pub fn eval_with_plan(device: &mut Device, params: &Params, data: &Dataset, plan: &EvalPlan) -> Result<EvalReport> {
    check_data(params, data)?;
    device.set_params(params)?;
    let before = device.query_count();
    let x = data.inputs().select(Axis(0), &plan.indices);
    let y = data.targets().select(Axis(0), &plan.indices);
    let out = device.forward_batch_coupled(x.view(), &plan.tags)?;
    let queries = device.query_count() - before;
    let sq: Array1<f64> = (&y - &out).mapv(|v| v * v).sum_axis(Axis(1));
    let hits: Option<Array1<f64>> = data.meta.classification.then(|| {
        Array1::from_iter(
            out.rows()
                .into_iter()
                .zip(y.rows())
                .map(|(o, t)| if argmax(o) == argmax(t) { 1.0 } else { 0.0 }),
        )
    });
    let summarize = |v: &Array1<f64>| -> (f64, f64) {
        let mean = v.mean().unwrap_or(f64::NAN);
        let se = if plan.k1 > 1 {
            v.exact_chunks(plan.k2)
                .into_iter()
                .map(|c| c.mean().unwrap())
                .collect::<Running>()
                .std_error()
        } else {
            v.iter().copied().collect::<Running>().std_error()
        };
        (mean, se)
    };
    let (loss, loss_se) = summarize(&sq);
    let (accuracy, accuracy_se) = match hits.as_ref().map(summarize) {
        Some((a, s)) => (Some(a), Some(s)),
        None => (None, None),
    };
    Ok(EvalReport {
        loss,
        loss_se,
        accuracy,
        accuracy_se,
        samples: plan.indices.len(),
        queries,
    })
}

/// Mean squared device error over `k1` data pairs and `k2` queries each.
pub fn eval_in_situ(
    device: &mut Device,
    params: &Params,
    data: &Dataset,
    k1: usize,
    k2: usize,
    stream: RngStream,
) -> Result<EvalReport> {
    let plan = EvalPlan::new(data.len(), k1, k2, stream)?;
    eval_with_plan(device, params, data, &plan)
}

/// Anything that can score weights in situ.
pub trait InSituEvaluator {
    fn evaluate(&mut self, params: &Params) -> Result<EvalReport>;
}

/// Scores candidates on a [`Device`] with one fixed [`EvalPlan`].
pub struct DeviceEvaluator<'a> {
    pub device: &'a mut Device,
    pub data: &'a Dataset,
    pub plan: EvalPlan,
}

impl InSituEvaluator for DeviceEvaluator<'_> {
    fn evaluate(&mut self, params: &Params) -> Result<EvalReport> {
        eval_with_plan(self.device, params, self.data, &self.plan)
    }
}

/// One scored point `w0 + sign * step * eta * D`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub step: usize,
    pub sign: i8,
    pub report: EvalReport,
}

impl Candidate {
    pub fn offset(&self, eta: f64) -> f64 {
        self.sign as f64 * self.step as f64 * eta
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GiftTrace {
    pub eta: f64,
    pub stop_rule: StopRule,
    pub baseline: EvalReport,
    /// In visiting order: `+` then `-` for each step.
    pub candidates: Vec<Candidate>,
    /// Index into `candidates`; `None` keeps the starting weights.
    pub selected: Option<usize>,
    pub steps: usize,
    pub queries: u64,
}

impl GiftTrace {
    pub fn selected_report(&self) -> &EvalReport {
        match self.selected {
            Some(i) => &self.candidates[i].report,
            None => &self.baseline,
        }
    }

    /// Offset of `w_f` from `w0` in units of the direction.
    pub fn selected_offset(&self) -> f64 {
        self.selected.map_or(0.0, |i| self.candidates[i].offset(self.eta))
    }

    /// `L^[0] - Eval(w_f)`; never negative.
    pub fn loss_improvement(&self) -> f64 {
        self.baseline.loss - self.selected_report().loss
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per scored point, the baseline first (`step = 0`).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,sign,offset,loss,loss_se,accuracy,accuracy_se,selected\n");
        let fmt_opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:e}"));
        let mut row = |step: usize, sign: i8, offset: f64, r: &EvalReport, sel: bool| {
            out.push_str(&format!(
                "{step},{sign},{offset:e},{:e},{:e},{},{},{}\n",
                r.loss,
                r.loss_se,
                fmt_opt(r.accuracy),
                fmt_opt(r.accuracy_se),
                sel as u8
            ));
        };
        row(0, 0, 0.0, &self.baseline, self.selected.is_none());
        for (i, c) in self.candidates.iter().enumerate() {
            row(c.step, c.sign, c.offset(self.eta), &c.report, self.selected == Some(i));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct GiftOutcome {
    pub trace: GiftTrace,
    /// The selected weights `w_f`.
    pub params: Params,
}

/// Symmetric line search from `w0` along `direction`.
///
/// Step `i` scores `w0 + i*eta*D` and `w0 - i*eta*D`; the loop ends per
/// `config.stop_rule` or after `config.max_steps`. The returned weights
/// minimize the recorded scores over all candidates and `w0`, ties going to
/// the earlier point.
pub fn gift_search<E: InSituEvaluator>(
    evaluator: &mut E,
    w0: &Params,
    direction: &Direction,
    config: &GiftConfig,
) -> Result<GiftOutcome> {
    config.validate()?;
    w0.check_same_shape(direction, "gift direction")?;
    if !direction.is_finite() || direction.max_abs() == 0.0 {
        return Err(domain("gift direction must be finite and nonzero"));
    }
    let baseline = evaluator.evaluate(w0)?;
    let mut queries = baseline.queries;
    let mut candidates = Vec::with_capacity(2 * config.max_steps);
    let mut steps = 0;
    for step in 1..=config.max_steps {
        steps = step;
        let mut losses = [0.0; 2];
        for (slot, sign) in [1i8, -1].into_iter().enumerate() {
            let w = w0.offset(sign as f64 * step as f64 * config.eta, direction)?;
            let report = evaluator.evaluate(&w)?;
            queries += report.queries;
            losses[slot] = report.loss;
            candidates.push(Candidate { step, sign, report });
        }
        let worse = losses.map(|l| l >= baseline.loss);
        let stop = match config.stop_rule {
            StopRule::EitherWorse => worse[0] || worse[1],
            StopRule::BothWorse => worse[0] && worse[1],
        };
        if stop {
            break;
        }
    }
    let mut selected = None;
    let mut best = baseline.loss;
    for (i, c) in candidates.iter().enumerate() {
        if c.report.loss < best {
            best = c.report.loss;
            selected = Some(i);
        }
    }
    let trace = GiftTrace {
        eta: config.eta,
        stop_rule: config.stop_rule,
        baseline,
        candidates,
        selected,
        steps,
        queries,
    };
    let params = w0.offset(trace.selected_offset(), direction)?;
    Ok(GiftOutcome { trace, params })
}

/// Line search scored on `device` with `config.k1 x config.k2` queries per
/// point, all points sharing one evaluation plan drawn from `stream`.
pub fn gift_run(
    device: &mut Device,
    w0: &Params,
    direction: &Direction,
    config: &GiftConfig,
    data: &Dataset,
    stream: RngStream,
) -> Result<GiftOutcome> {
    config.validate()?;
    let plan = EvalPlan::new(data.len(), config.k1, config.k2, stream)?;
    let mut evaluator = DeviceEvaluator { device, data, plan };
    gift_search(&mut evaluator, w0, direction, config)
}
