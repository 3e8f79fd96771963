//! In-silico training: mini-batch projected SGD at the presumed level `s0`.

use ndarray::Axis;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{domain, shape, Error, Result};
use crate::gradients::batch_gradient;
use crate::model::{project_in_place, Architecture, Hyperrectangle, Params};
use crate::rng::{tags, RngStream};

/// Step sizes `eps_k = eps0 / (1 + k/tau)^p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub eps0: f64,
    /// Decay exponent `p` in `(0.5, 1]`.
    pub decay: f64,
    pub tau: f64,
}

impl StepSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps0 > 0.0 && self.eps0.is_finite()) {
            return Err(domain(format!("schedule.eps0 must be > 0, got {}", self.eps0)));
        }
        if !(self.decay > 0.5 && self.decay <= 1.0) {
            return Err(domain(format!("schedule.decay must lie in (0.5, 1], got {}", self.decay)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(domain(format!("schedule.tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }

    pub fn step_size(&self, k: usize) -> f64 {
        self.eps0 / (1.0 + k as f64 / self.tau).powf(self.decay)
    }
}

/// How long to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainLength {
    Epochs(usize),
    Steps(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Weights and biases `Uniform(-a, a)`, `a = 1/sqrt(fan_in)`.
    UniformScaled,
    /// Weights `Uniform(-a, a)`, biases zero.
    #[default]
    ZerosBias,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub s0: f64,
    pub batch_size: usize,
    pub length: TrainLength,
    pub schedule: StepSchedule,
    #[serde(default)]
    pub projection: Option<Hyperrectangle>,
    pub seed: u64,
    #[serde(default)]
    pub init: InitScheme,
}

/// Losses above this abort training.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// Weight of the newest batch in the smoothed loss.
const SMOOTHING: f64 = 0.05;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s0 > 0.0 && self.s0.is_finite()) {
            return Err(domain(format!("train.s0 must be > 0, got {}", self.s0)));
        }
        if self.batch_size == 0 {
            return Err(domain("train.batch_size must be >= 1"));
        }
        match self.length {
            TrainLength::Epochs(0) | TrainLength::Steps(0) => {
                return Err(domain("train.length must be >= 1"));
            }
            _ => {}
        }
        self.schedule.validate()?;
        if let Some(h) = &self.projection {
            h.validate()?;
        }
        Ok(())
    }
}

/// One recorded optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub epoch: usize,
    pub step_size: f64,
    /// Mean squared loss of the batch under its noise draws.
    pub batch_loss: f64,
    /// Exponentially smoothed `batch_loss`.
    pub smoothed_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Params,
    pub history: Vec<LossPoint>,
}

impl TrainOutcome {
    pub fn steps(&self) -> usize {
        self.history.len()
    }

    /// CSV with one row per step.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("step,epoch,step_size,batch_loss,smoothed_loss\n");
        for p in &self.history {
            out.push_str(&format!(
                "{},{},{:e},{:e},{:e}\n",
                p.step, p.epoch, p.step_size, p.batch_loss, p.smoothed_loss
            ));
        }
        out
    }
}

/// Draws initial weights `Uniform(-a, a)` with `a = 1/sqrt(d_{l-1})`.
pub fn init_params(arch: &Architecture, scheme: InitScheme, stream: RngStream) -> Params {
    let mut params = Params::zeros(arch);
    let mut rng = stream.rng();
    for layer in params.layers.iter_mut() {
        let a = 1.0 / (layer.weights.ncols() as f64).sqrt();
        layer.weights.mapv_inplace(|_| rng.random_range(-a..a));
        if scheme == InitScheme::UniformScaled {
            layer.bias.mapv_inplace(|_| rng.random_range(-a..a));
        }
    }
    params
}

/// Runs `w <- p_H(w - eps_k * g_k)` where `g_k` is the mean gradient of a
/// mini-batch, each example under its own Gaussian draw at level `s0`.
/// The projection is skipped when `config.projection` is `None`.
pub fn train(arch: &Architecture, config: &TrainConfig, data: &Dataset, init: Option<Params>) -> Result<TrainOutcome> {
    config.validate()?;
    if data.input_dim() != arch.input_dim() || data.output_dim() != arch.output_dim() {
        return Err(shape(
            "training data",
            format!("{} -> {}", arch.input_dim(), arch.output_dim()),
            format!("{} -> {}", data.input_dim(), data.output_dim()),
        ));
    }
    let root = RngStream::root(config.seed);
    let mut params = match init {
        Some(p) => {
            if p.arch() != arch {
                return Err(shape("initial params", format!("{:?}", arch.layer_dims()), format!("{:?}", p.arch().layer_dims())));
            }
            p
        }
        None => init_params(arch, config.init, root.child(tags::INIT)),
    };
    if let Some(h) = &config.projection {
        project_in_place(&mut params, h);
    }

    let batches_per_epoch = data.len().div_ceil(config.batch_size);
    let total_steps = match config.length {
        TrainLength::Epochs(e) => e * batches_per_epoch,
        TrainLength::Steps(s) => s,
    };
    let mut history = Vec::with_capacity(total_steps);
    let noise_root = root.child(tags::TRAIN_NOISE);
    let order_root = root.child(tags::TRAIN_ORDER);
    let mut smoothed = f64::NAN;
    let mut step = 0;
    let mut epoch = 0;
    'outer: loop {
        for batch in data.batches(config.batch_size, order_root.child(epoch as u64))? {
            if step == total_steps {
                break 'outer;
            }
            let x = data.inputs().select(Axis(0), &batch);
            let y = data.targets().select(Axis(0), &batch);
            let g = batch_gradient(&params, x.view(), y.view(), config.s0, noise_root.child(step as u64))?;
            if !g.loss.is_finite() || g.loss > DIVERGENCE_LOSS || !g.gradient.is_finite() {
                return Err(Error::Diverged { step, loss: g.loss });
            }
            let eps = config.schedule.step_size(step);
            params.axpy(-eps, &g.gradient);
            if let Some(h) = &config.projection {
                project_in_place(&mut params, h);
            }
            smoothed = if smoothed.is_nan() {
                g.loss
            } else {
                (1.0 - SMOOTHING) * smoothed + SMOOTHING * g.loss
            };
            history.push(LossPoint {
                step,
                epoch,
                step_size: eps,
                batch_loss: g.loss,
                smoothed_loss: smoothed,
            });
            step += 1;
        }
        epoch += 1;
    }
    Ok(TrainOutcome { params, history })
}
