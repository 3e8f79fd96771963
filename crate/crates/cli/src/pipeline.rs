//! The experiment pipeline shared by the commands: data, training (with an
//! on-disk cache), the in-silico direction, and one fine-tuning cell.

use std::path::{Path, PathBuf};

use gift_core::data::{load_mnist_subsets, synthetic_blobs, synthetic_linear, Dataset};
use gift_core::gift::{estimate_direction_with, eval_in_situ, gift_run, GiftOutcome};
use gift_core::rng::tags;
use gift_core::trainer::train;
use gift_core::{Architecture, Device, Direction, EvalReport, NoiseFamily, NoiseModel, Params, RngStream};
use rand::RngCore;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::artifacts::{Checkpoint, CORE_HASH};
use crate::config::{ArchitectureSpec, DatasetSpec, ExperimentConfig};
use crate::error::{CliError, CliResult};

pub struct Data {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_data(cfg: &ExperimentConfig) -> CliResult<Data> {
    let (train, test) = match &cfg.dataset {
        DatasetSpec::Mnist {
            data_dir,
            train_size,
            test_size,
            seed,
        } => {
            let dir = data_dir.as_deref().expect("resolved during validation");
            load_mnist_subsets(dir, *train_size, *test_size, RngStream::root(*seed).child(tags::DATA))?
        }
        DatasetSpec::SyntheticBlobs {
            dim,
            classes,
            spread,
            train_size,
            test_size,
            seed,
        } => {
            let all = synthetic_blobs(
                *dim,
                *classes,
                train_size + test_size,
                *spread,
                RngStream::root(*seed).child(tags::DATA),
            )?;
            all.split(*test_size, RngStream::root(*seed).child(tags::SPLIT))?
        }
        DatasetSpec::SyntheticLinear {
            v,
            sigma_x,
            train_size,
            test_size,
            seed,
        } => {
            let all = synthetic_linear(v, *sigma_x, train_size + test_size, RngStream::root(*seed).child(tags::DATA))?;
            all.split(*test_size, RngStream::root(*seed).child(tags::SPLIT))?
        }
    };
    Ok(Data { train, test })
}

/// One network to train: architecture, presumed level and seed.
#[derive(Debug, Clone)]
pub struct TrainJob {
    pub arch: ArchitectureSpec,
    pub s0: f64,
    pub seed: u64,
}

impl TrainJob {
    pub fn arch_name(&self) -> &'static str {
        self.arch.preset.name()
    }
}

pub struct Trained {
    pub params: Params,
    pub steps: usize,
    pub first_smoothed_loss: f64,
    pub final_smoothed_loss: f64,
    /// Per-step losses; absent when the weights came from the cache.
    pub history_csv: Option<String>,
}

/// Hash of everything training depends on. The data directory is left out:
/// the files themselves are fixed.
fn cache_key(cfg: &ExperimentConfig, job: &TrainJob, arch: &Architecture) -> CliResult<String> {
    let mut dataset = cfg.dataset.clone();
    if let DatasetSpec::Mnist { data_dir, .. } = &mut dataset {
        *data_dir = None;
    }
    let doc = json!({
        "core": CORE_HASH,
        "layer_dims": arch.layer_dims(),
        "activation": arch.activation(),
        "dataset": dataset,
        "train": cfg.train.to_config(job.s0, job.seed),
    });
    let digest = Sha256::digest(serde_json::to_string(&doc)?.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn cache_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("{key}.json"))
}

/// Trains `job`, or loads its weights from `cfg.checkpoint_cache` when a
/// run with identical inputs is stored there.
pub fn train_job(cfg: &ExperimentConfig, job: &TrainJob, data: &Data, use_cache: bool) -> CliResult<Trained> {
    let arch = job.arch.build()?;
    let cache = cfg.checkpoint_cache.as_deref().map(|d| -> CliResult<PathBuf> {
        Ok(cache_path(d, &cache_key(cfg, job, &arch)?))
    });
    let cache = cache.transpose()?;
    if use_cache {
        if let Some(path) = cache.as_deref().filter(|p| p.is_file()) {
            if let Ok(ck) = Checkpoint::load(path) {
                let params = ck.params()?;
                if params.arch() == &arch {
                    return Ok(Trained {
                        params,
                        steps: ck.steps,
                        first_smoothed_loss: f64::NAN,
                        final_smoothed_loss: ck.final_smoothed_loss,
                        history_csv: None,
                    });
                }
            }
        }
    }
    let out = train(&arch, &cfg.train.to_config(job.s0, job.seed), &data.train, None)?;
    let first = out.history.first().map_or(f64::NAN, |p| p.smoothed_loss);
    let last = out.history.last().map_or(f64::NAN, |p| p.smoothed_loss);
    let trained = Trained {
        steps: out.steps(),
        first_smoothed_loss: first,
        final_smoothed_loss: last,
        history_csv: Some(out.history_csv()),
        params: out.params,
    };
    if let Some(path) = cache {
        let ck = Checkpoint::new(cfg, job.arch_name(), job.seed, job.s0, trained.steps, last, &trained.params)?;
        // A failed cache write only costs a retrain later.
        if let Err(e) = ck.save(&path) {
            eprintln!("warning: could not cache weights: {e}");
        }
    }
    Ok(trained)
}

/// In-silico direction at `w0`, from the seed's direction stream.
pub fn direction(cfg: &ExperimentConfig, w0: &Params, s0: f64, seed: u64, data: &Data) -> CliResult<Direction> {
    let d = &cfg.direction;
    let mut dir = estimate_direction_with(
        d.method,
        w0,
        &data.train,
        s0,
        d.k1,
        d.k2,
        RngStream::root(seed).child(tags::DIRECTION),
    )?;
    if d.normalize {
        let norm = dir.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(CliError::Runtime(format!("cannot normalize a direction of norm {norm}")));
        }
        dir.scale(1.0 / norm);
    }
    Ok(dir)
}

/// Device noise seed for experiment seed `seed`.
pub fn device_seed(seed: u64) -> u64 {
    RngStream::root(seed).child(tags::DEVICE).rng().next_u64()
}

pub fn build_device(w0: &Params, family: NoiseFamily, s_t: f64, seed: u64) -> CliResult<Device> {
    Ok(Device::new(w0.clone(), NoiseModel::new(family, s_t)?, device_seed(seed))?)
}

/// Fresh-noise evaluation of `params` on the training and test sets.
pub struct Evaluation {
    pub train: EvalReport,
    pub test: EvalReport,
}

/// Both splits are scored with their own fixed plans, so two parameter sets
/// evaluated for the same seed see identical data and device noise.
pub fn evaluate(cfg: &ExperimentConfig, device: &mut Device, params: &Params, seed: u64, data: &Data) -> CliResult<Evaluation> {
    let e = &cfg.eval;
    let root = RngStream::root(seed).child(tags::TEST_EVAL);
    let train = eval_in_situ(device, params, &data.train, e.train_k1, e.train_k2, root.child(0))?;
    let test = eval_in_situ(device, params, &data.test, e.test_k1, e.test_k2, root.child(1))?;
    Ok(Evaluation { train, test })
}

/// One `(architecture, family, s0, s_t, seed)` row of results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellRow {
    pub arch: String,
    pub family: String,
    pub s0: f64,
    pub s_t: f64,
    pub seed: u64,
    pub status: String,
    pub direction_norm: Option<f64>,
    pub baseline_loss: Option<f64>,
    pub gift_loss: Option<f64>,
    pub loss_improvement: Option<f64>,
    pub rel_loss_improvement: Option<f64>,
    pub baseline_acc: Option<f64>,
    pub gift_acc: Option<f64>,
    pub eval_baseline_loss: Option<f64>,
    pub eval_gift_loss: Option<f64>,
    pub eval_rel_loss_improvement: Option<f64>,
    pub eval_baseline_acc: Option<f64>,
    pub eval_gift_acc: Option<f64>,
    pub rel_acc_improvement: Option<f64>,
    pub abs_acc_improvement: Option<f64>,
    pub test_baseline_loss: Option<f64>,
    pub test_gift_loss: Option<f64>,
    pub test_baseline_acc: Option<f64>,
    pub test_gift_acc: Option<f64>,
    pub test_rel_acc_improvement: Option<f64>,
    pub steps: Option<f64>,
    pub offset: Option<f64>,
    pub queries: Option<f64>,
}

pub const ROW_COLUMNS: [&str; 28] = [
    "arch",
    "family",
    "s0",
    "s_t",
    "seed",
    "status",
    "direction_norm",
    "baseline_loss",
    "gift_loss",
    "loss_improvement",
    "rel_loss_improvement",
    "baseline_acc",
    "gift_acc",
    "eval_baseline_loss",
    "eval_gift_loss",
    "eval_rel_loss_improvement",
    "eval_baseline_acc",
    "eval_gift_acc",
    "rel_acc_improvement",
    "abs_acc_improvement",
    "test_baseline_loss",
    "test_gift_loss",
    "test_baseline_acc",
    "test_gift_acc",
    "test_rel_acc_improvement",
    "steps",
    "offset",
    "queries",
];

fn rel_decrease(base: f64, new: f64) -> f64 {
    (base - new) / base
}

fn rel_increase(base: Option<f64>, new: Option<f64>) -> Option<f64> {
    Some((new? - base?) / base?)
}

impl CellRow {
    pub fn failed(arch: &str, family: NoiseFamily, s0: f64, s_t: f64, seed: u64, err: &CliError) -> Self {
        let msg = err.to_string().replace([',', '\n', '"'], " ");
        Self {
            arch: arch.to_string(),
            family: family.name().to_string(),
            s0,
            s_t,
            seed,
            status: format!("failed: {msg}"),
            direction_norm: None,
            baseline_loss: None,
            gift_loss: None,
            loss_improvement: None,
            rel_loss_improvement: None,
            baseline_acc: None,
            gift_acc: None,
            eval_baseline_loss: None,
            eval_gift_loss: None,
            eval_rel_loss_improvement: None,
            eval_baseline_acc: None,
            eval_gift_acc: None,
            rel_acc_improvement: None,
            abs_acc_improvement: None,
            test_baseline_loss: None,
            test_gift_loss: None,
            test_baseline_acc: None,
            test_gift_acc: None,
            test_rel_acc_improvement: None,
            steps: None,
            offset: None,
            queries: None,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn csv_header() -> String {
        ROW_COLUMNS.join(",") + "\n"
    }

    pub fn csv_line(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        let fields = [
            self.arch.clone(),
            self.family.clone(),
            self.s0.to_string(),
            self.s_t.to_string(),
            self.seed.to_string(),
            self.status.clone(),
            f(self.direction_norm),
            f(self.baseline_loss),
            f(self.gift_loss),
            f(self.loss_improvement),
            f(self.rel_loss_improvement),
            f(self.baseline_acc),
            f(self.gift_acc),
            f(self.eval_baseline_loss),
            f(self.eval_gift_loss),
            f(self.eval_rel_loss_improvement),
            f(self.eval_baseline_acc),
            f(self.eval_gift_acc),
            f(self.rel_acc_improvement),
            f(self.abs_acc_improvement),
            f(self.test_baseline_loss),
            f(self.test_gift_loss),
            f(self.test_baseline_acc),
            f(self.test_gift_acc),
            f(self.test_rel_acc_improvement),
            f(self.steps),
            f(self.offset),
            f(self.queries),
        ];
        fields.join(",") + "\n"
    }

    /// Looks a numeric column up by name.
    pub fn metric(&self, column: &str) -> Option<f64> {
        match column {
            "direction_norm" => self.direction_norm,
            "baseline_loss" => self.baseline_loss,
            "gift_loss" => self.gift_loss,
            "loss_improvement" => self.loss_improvement,
            "rel_loss_improvement" => self.rel_loss_improvement,
            "baseline_acc" => self.baseline_acc,
            "gift_acc" => self.gift_acc,
            "eval_baseline_loss" => self.eval_baseline_loss,
            "eval_gift_loss" => self.eval_gift_loss,
            "eval_rel_loss_improvement" => self.eval_rel_loss_improvement,
            "eval_baseline_acc" => self.eval_baseline_acc,
            "eval_gift_acc" => self.eval_gift_acc,
            "rel_acc_improvement" => self.rel_acc_improvement,
            "abs_acc_improvement" => self.abs_acc_improvement,
            "test_baseline_loss" => self.test_baseline_loss,
            "test_gift_loss" => self.test_gift_loss,
            "test_baseline_acc" => self.test_baseline_acc,
            "test_gift_acc" => self.test_gift_acc,
            "test_rel_acc_improvement" => self.test_rel_acc_improvement,
            "steps" => self.steps,
            "offset" => self.offset,
            "queries" => self.queries,
            _ => None,
        }
    }
}

/// A finished cell: its row plus the search trace and fine-tuned weights.
pub struct Cell {
    pub row: CellRow,
    pub outcome: GiftOutcome,
}

/// Runs the line search for one device and scores `w0` and `w_f` again on
/// fresh noise. The search's own plan comes from the seed's eval stream, so
/// all cells of a seed share data pairs and coupling tags.
#[allow(clippy::too_many_arguments)]
pub fn run_cell(
    cfg: &ExperimentConfig,
    arch: &str,
    w0: &Params,
    dir: &Direction,
    family: NoiseFamily,
    s0: f64,
    s_t: f64,
    seed: u64,
    data: &Data,
) -> CliResult<Cell> {
    let mut device = build_device(w0, family, s_t, seed)?;
    let outcome = gift_run(
        &mut device,
        w0,
        dir,
        &cfg.gift,
        &data.train,
        RngStream::root(seed).child(tags::EVAL),
    )?;
    let trace = &outcome.trace;
    let base = evaluate(cfg, &mut device, w0, seed, data)?;
    let tuned = evaluate(cfg, &mut device, &outcome.params, seed, data)?;
    let sel = trace.selected_report();
    let row = CellRow {
        arch: arch.to_string(),
        family: family.name().to_string(),
        s0,
        s_t,
        seed,
        status: "ok".to_string(),
        direction_norm: Some(dir.norm()),
        baseline_loss: Some(trace.baseline.loss),
        gift_loss: Some(sel.loss),
        loss_improvement: Some(trace.loss_improvement()),
        rel_loss_improvement: Some(rel_decrease(trace.baseline.loss, sel.loss)),
        baseline_acc: trace.baseline.accuracy,
        gift_acc: sel.accuracy,
        eval_baseline_loss: Some(base.train.loss),
        eval_gift_loss: Some(tuned.train.loss),
        eval_rel_loss_improvement: Some(rel_decrease(base.train.loss, tuned.train.loss)),
        eval_baseline_acc: base.train.accuracy,
        eval_gift_acc: tuned.train.accuracy,
        rel_acc_improvement: rel_increase(base.train.accuracy, tuned.train.accuracy),
        abs_acc_improvement: tuned.train.accuracy.zip(base.train.accuracy).map(|(t, b)| t - b),
        test_baseline_loss: Some(base.test.loss),
        test_gift_loss: Some(tuned.test.loss),
        test_baseline_acc: base.test.accuracy,
        test_gift_acc: tuned.test.accuracy,
        test_rel_acc_improvement: rel_increase(base.test.accuracy, tuned.test.accuracy),
        steps: Some(trace.steps as f64),
        offset: Some(trace.selected_offset()),
        queries: Some(trace.queries as f64),
    };
    Ok(Cell { row, outcome })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_match_fields() {
        let err = CliError::Runtime("x, y".into());
        let row = CellRow::failed("custom", NoiseFamily::Laplace, 0.1, 0.2, 3, &err);
        let line = row.csv_line();
        assert_eq!(line.trim_end().split(',').count(), ROW_COLUMNS.len());
        assert!(!row.is_ok());
        for c in &ROW_COLUMNS[6..] {
            assert!(row.metric(c).is_none(), "{c}");
        }
    }

    #[test]
    fn relative_changes() {
        assert_eq!(rel_decrease(2.0, 1.5), 0.25);
        assert_eq!(rel_increase(Some(0.5), Some(0.6)).map(|v| (v * 1e12).round()), Some(0.2e12));
        assert_eq!(rel_increase(None, Some(0.6)), None);
    }

    #[test]
    fn device_seeds_differ_per_seed() {
        assert_ne!(device_seed(1), device_seed(2));
        assert_eq!(device_seed(1), device_seed(1));
    }
}
