//! The five subcommands. Each returns its results as well as writing them,
//! so the experiment harness can drive them in-process.

use std::path::{Path, PathBuf};
use std::time::Instant;

use gift_core::gift::EvalReport;
use gift_core::theory::{
    check_backprop_fd, check_gaussian_product_derivative, check_hierarchical_sampler, gaussian_product_cases,
    linear_condition_bound, condition_quotient, HierarchicalSpec, LinearExample,
};
use gift_core::{NoiseFamily, Params, RngStream};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::artifacts::{checkpoint_path, opt, write_csv, write_json, Checkpoint};
use crate::config::{ArchitectureSpec, ExperimentConfig};
use crate::error::{validation, CliError, CliResult};
use crate::pipeline::{build_device, direction, evaluate, load_data, run_cell, train_job, CellRow, Data, TrainJob};
use crate::stats::{mean_ci95, MeanCi};

fn jobs(cfg: &ExperimentConfig, archs: &[ArchitectureSpec], s0s: &[f64]) -> Vec<TrainJob> {
    let mut out = Vec::new();
    for arch in archs {
        for &s0 in s0s {
            for &seed in &cfg.seeds {
                out.push(TrainJob {
                    arch: arch.clone(),
                    s0,
                    seed,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummaryRow {
    pub arch: String,
    pub s0: f64,
    pub seed: u64,
    pub steps: usize,
    pub first_smoothed_loss: f64,
    pub final_smoothed_loss: f64,
    pub checkpoint: PathBuf,
}

/// Trains one network per seed at `train.s0` and writes a checkpoint and a
/// per-step loss CSV for each.
pub fn cmd_train(cfg: &ExperimentConfig) -> CliResult<Vec<TrainSummaryRow>> {
    let data = load_data(cfg)?;
    let todo = jobs(cfg, std::slice::from_ref(&cfg.architecture), &[cfg.train.s0]);
    let results: Vec<CliResult<TrainSummaryRow>> = todo
        .par_iter()
        .map(|job| {
            let t = train_job(cfg, job, &data, false)?;
            let path = checkpoint_path(&cfg.output_dir, job.arch_name(), job.s0, job.seed);
            Checkpoint::new(cfg, job.arch_name(), job.seed, job.s0, t.steps, t.final_smoothed_loss, &t.params)?
                .save(&path)?;
            let loss_path = cfg
                .output_dir
                .join("train")
                .join(format!("loss_{}_s0-{}_seed-{}.csv", job.arch_name(), job.s0, job.seed));
            write_csv(&loss_path, cfg, t.history_csv.as_deref().unwrap_or_default())?;
            Ok(TrainSummaryRow {
                arch: job.arch_name().to_string(),
                s0: job.s0,
                seed: job.seed,
                steps: t.steps,
                first_smoothed_loss: t.first_smoothed_loss,
                final_smoothed_loss: t.final_smoothed_loss,
                checkpoint: path,
            })
        })
        .collect();
    let rows = results.into_iter().collect::<CliResult<Vec<_>>>()?;
    let mut body = String::from("arch,s0,seed,steps,first_smoothed_loss,final_smoothed_loss\n");
    for r in &rows {
        body.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.arch, r.s0, r.seed, r.steps, r.first_smoothed_loss, r.final_smoothed_loss
        ));
    }
    write_csv(&cfg.output_dir.join("train_summary.csv"), cfg, &body)?;
    Ok(rows)
}

/// Starting weights for one seed: from a checkpoint, or trained (cached).
struct Start {
    arch: String,
    s0: f64,
    seed: u64,
    w0: Params,
}

fn starts(cfg: &ExperimentConfig, checkpoint: Option<&Path>, data: &Data) -> CliResult<Vec<Start>> {
    if let Some(path) = checkpoint {
        let ck = Checkpoint::load(path)?;
        let w0 = ck.params()?;
        let expected = cfg.architecture.build()?;
        if w0.arch() != &expected {
            return Err(validation(
                "architecture",
                format!(
                    "checkpoint {} holds a {:?} network, the configured device is {:?}",
                    path.display(),
                    w0.arch().layer_dims(),
                    expected.layer_dims()
                ),
            ));
        }
        return Ok(vec![Start {
            arch: ck.architecture,
            s0: ck.s0,
            seed: ck.seed,
            w0,
        }]);
    }
    jobs(cfg, std::slice::from_ref(&cfg.architecture), &[cfg.train.s0])
        .par_iter()
        .map(|job| {
            Ok(Start {
                arch: job.arch_name().to_string(),
                s0: job.s0,
                seed: job.seed,
                w0: train_job(cfg, job, data, true)?.params,
            })
        })
        .collect()
}

/// Fine-tunes each seed's weights against the configured device. Writes one
/// trace (JSON and CSV) per seed and a summary CSV.
pub fn cmd_gift(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> CliResult<Vec<CellRow>> {
    let data = load_data(cfg)?;
    let starts = starts(cfg, checkpoint, &data)?;
    let (family, s_t) = (cfg.device.family, cfg.device.s_t);
    let rows: Vec<CliResult<CellRow>> = starts
        .par_iter()
        .map(|st| {
            let dir = direction(cfg, &st.w0, st.s0, st.seed, &data)?;
            let cell = run_cell(cfg, &st.arch, &st.w0, &dir, family, st.s0, s_t, st.seed, &data)?;
            let stem = format!("trace_{}_s0-{}_st-{}_seed-{}", st.arch, st.s0, s_t, st.seed);
            let dir_out = cfg.output_dir.join("gift");
            write_json(&dir_out.join(format!("{stem}.json")), cfg, serde_json::to_value(&cell.outcome.trace)?)?;
            write_csv(&dir_out.join(format!("{stem}.csv")), cfg, &cell.outcome.trace.to_csv())?;
            Ok(cell.row)
        })
        .collect();
    let rows = rows.into_iter().collect::<CliResult<Vec<_>>>()?;
    let mut body = CellRow::csv_header();
    for r in &rows {
        body.push_str(&r.csv_line());
    }
    write_csv(&cfg.output_dir.join("gift_summary.csv"), cfg, &body)?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub seed: u64,
    pub split: &'static str,
    pub report: EvalReport,
}

/// Scores each seed's weights on the configured device.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> CliResult<Vec<EvalRow>> {
    let data = load_data(cfg)?;
    let starts = starts(cfg, checkpoint, &data)?;
    let per_seed: Vec<CliResult<Vec<EvalRow>>> = starts
        .par_iter()
        .map(|st| {
            let mut device = build_device(&st.w0, cfg.device.family, cfg.device.s_t, st.seed)?;
            let ev = evaluate(cfg, &mut device, &st.w0, st.seed, &data)?;
            Ok(vec![
                EvalRow {
                    seed: st.seed,
                    split: "train",
                    report: ev.train,
                },
                EvalRow {
                    seed: st.seed,
                    split: "test",
                    report: ev.test,
                },
            ])
        })
        .collect();
    let rows: Vec<EvalRow> = per_seed.into_iter().collect::<CliResult<Vec<_>>>()?.into_iter().flatten().collect();
    let mut body = String::from("seed,split,loss,loss_se,accuracy,accuracy_se,samples,queries\n");
    for r in &rows {
        let e = &r.report;
        body.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.seed,
            r.split,
            e.loss,
            e.loss_se,
            opt(e.accuracy),
            opt(e.accuracy_se),
            e.samples,
            e.queries
        ));
    }
    write_csv(&cfg.output_dir.join("eval.csv"), cfg, &body)?;
    Ok(rows)
}

/// Columns summarized per cell in the aggregate table.
pub const AGGREGATE_METRICS: [&str; 7] = [
    "rel_loss_improvement",
    "loss_improvement",
    "eval_rel_loss_improvement",
    "rel_acc_improvement",
    "abs_acc_improvement",
    "test_rel_acc_improvement",
    "steps",
];

#[derive(Debug, Clone, Serialize)]
pub struct AggregateRow {
    pub arch: String,
    pub family: String,
    pub s0: f64,
    pub s_t: f64,
    pub n_ok: usize,
    pub n_failed: usize,
    /// `(mean, 95% half-width)` per entry of [`AGGREGATE_METRICS`].
    pub metrics: Vec<(f64, f64)>,
}

impl AggregateRow {
    pub fn metric(&self, name: &str) -> Option<MeanCi> {
        let i = AGGREGATE_METRICS.iter().position(|m| *m == name)?;
        let (mean, half_width) = self.metrics[i];
        Some(MeanCi {
            n: self.n_ok,
            mean,
            half_width,
        })
    }

    fn csv_header() -> String {
        let mut cols = vec!["arch", "family", "s0", "s_t", "n_ok", "n_failed"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        for m in AGGREGATE_METRICS {
            cols.push(format!("{m}_mean"));
            cols.push(format!("{m}_ci95"));
        }
        cols.join(",") + "\n"
    }

    fn csv_line(&self) -> String {
        let mut fields = vec![
            self.arch.clone(),
            self.family.clone(),
            self.s0.to_string(),
            self.s_t.to_string(),
            self.n_ok.to_string(),
            self.n_failed.to_string(),
        ];
        for (m, h) in &self.metrics {
            fields.push(m.to_string());
            fields.push(h.to_string());
        }
        fields.join(",") + "\n"
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub rows: Vec<CellRow>,
    pub aggregate: Vec<AggregateRow>,
}

/// Groups rows by `(arch, family, s0, s_t)` in first-appearance order.
pub fn aggregate(rows: &[CellRow]) -> Vec<AggregateRow> {
    let mut keys: Vec<(String, String, f64, f64)> = Vec::new();
    for r in rows {
        let k = (r.arch.clone(), r.family.clone(), r.s0, r.s_t);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(arch, family, s0, s_t)| {
            let group: Vec<&CellRow> = rows
                .iter()
                .filter(|r| r.arch == arch && r.family == family && r.s0 == s0 && r.s_t == s_t)
                .collect();
            let ok: Vec<&&CellRow> = group.iter().filter(|r| r.is_ok()).collect();
            let metrics = AGGREGATE_METRICS
                .iter()
                .map(|m| {
                    let vals: Vec<f64> = ok.iter().map(|r| r.metric(m).unwrap_or(f64::NAN)).collect();
                    let ci = mean_ci95(&vals);
                    (ci.mean, ci.half_width)
                })
                .collect();
            AggregateRow {
                arch,
                family,
                s0,
                s_t,
                n_ok: ok.len(),
                n_failed: group.len() - ok.len(),
                metrics,
            }
        })
        .collect()
}

/// The full `architecture x s0 x seed x family x s_t` grid. Each trained
/// network is shared by all of its device cells; a failure marks the
/// affected cells and the sweep moves on.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> CliResult<SweepResult> {
    let data = load_data(cfg)?;
    let families = cfg.sweep_families();
    let s_ts = cfg.sweep_s_t();
    let todo = jobs(cfg, &cfg.sweep_architectures(), &cfg.sweep_s0());
    let total = todo.len();
    let started = Instant::now();
    let per_job: Vec<Vec<CellRow>> = todo
        .par_iter()
        .enumerate()
        .map(|(i, job)| {
            let cells = sweep_job(cfg, job, &families, &s_ts, &data);
            eprintln!(
                "[{}/{}] {} s0={} seed={} done ({:.0} s elapsed)",
                i + 1,
                total,
                job.arch_name(),
                job.s0,
                job.seed,
                started.elapsed().as_secs_f64()
            );
            cells
        })
        .collect();
    // Config order: architecture, family, s0, s_t, seed.
    let mut rows: Vec<CellRow> = per_job.into_iter().flatten().collect();
    let arch_order: Vec<String> = cfg.sweep_architectures().iter().map(|a| a.preset.name().to_string()).collect();
    let pos = |list: &[f64], v: f64| list.iter().position(|x| *x == v).unwrap_or(usize::MAX);
    let s0s = cfg.sweep_s0();
    let seed_pos = |s: u64| cfg.seeds.iter().position(|x| *x == s).unwrap_or(usize::MAX);
    let fam_pos = |f: &str| families.iter().position(|x| x.name() == f).unwrap_or(usize::MAX);
    rows.sort_by_key(|r| {
        (
            arch_order.iter().position(|a| *a == r.arch).unwrap_or(usize::MAX),
            fam_pos(&r.family),
            pos(&s0s, r.s0),
            pos(&s_ts, r.s_t),
            seed_pos(r.seed),
        )
    });
    let agg = aggregate(&rows);

    let mut body = CellRow::csv_header();
    for r in &rows {
        body.push_str(&r.csv_line());
    }
    write_csv(&cfg.output_dir.join("sweep_rows.csv"), cfg, &body)?;
    let mut body = AggregateRow::csv_header();
    for a in &agg {
        body.push_str(&a.csv_line());
    }
    write_csv(&cfg.output_dir.join("sweep_aggregate.csv"), cfg, &body)?;
    let result = SweepResult { rows, aggregate: agg };
    write_json(&cfg.output_dir.join("sweep.json"), cfg, serde_json::to_value(&result)?)?;
    Ok(result)
}

fn sweep_job(cfg: &ExperimentConfig, job: &TrainJob, families: &[NoiseFamily], s_ts: &[f64], data: &Data) -> Vec<CellRow> {
    let arch = job.arch_name();
    let prepared = train_job(cfg, job, data, true).and_then(|t| {
        let dir = direction(cfg, &t.params, job.s0, job.seed, data)?;
        Ok((t.params, dir))
    });
    let mut rows = Vec::new();
    for &family in families {
        for &s_t in s_ts {
            let row = match &prepared {
                Ok((w0, dir)) => run_cell(cfg, arch, w0, dir, family, job.s0, s_t, job.seed, data)
                    .map(|c| c.row)
                    .unwrap_or_else(|e| CellRow::failed(arch, family, job.s0, s_t, job.seed, &e)),
                Err(e) => CellRow::failed(arch, family, job.s0, s_t, job.seed, e),
            };
            rows.push(row);
        }
    }
    rows
}

/// One self-check with its numbers.
#[derive(Debug, Clone, Serialize)]
pub struct CheckItem {
    pub name: &'static str,
    pub passed: bool,
    pub tolerance: String,
    pub details: Value,
    pub seconds: f64,
}

fn timed(name: &'static str, tolerance: &str, f: impl FnOnce() -> CliResult<(bool, Value)>) -> CheckItem {
    let t = Instant::now();
    let (passed, details) = match f() {
        Ok(v) => v,
        Err(e) => (false, json!({ "error": e.to_string() })),
    };
    CheckItem {
        name,
        passed,
        tolerance: tolerance.to_string(),
        details,
        seconds: t.elapsed().as_secs_f64(),
    }
}

/// Runs [`run_checks`] and turns any failed check into an error.
pub fn cmd_check(out: &Path, seed: u64) -> CliResult<Vec<CheckItem>> {
    let items = run_checks(out, seed)?;
    let failed = items.iter().filter(|i| !i.passed).count();
    if failed > 0 {
        return Err(CliError::CheckFailed { failed });
    }
    Ok(items)
}

/// Numerical checks of the supporting identities. Every check runs and the
/// report `check.json` is written whatever the outcome.
pub fn run_checks(out: &Path, seed: u64) -> CliResult<Vec<CheckItem>> {
    let root = RngStream::root(seed);
    let mut items = Vec::new();

    items.push(timed("backprop_vs_finite_differences", "max relative error < 1e-5", || {
        let r = check_backprop_fd(100, &[5, 7, 4, 3], root.child(1))?;
        Ok((r.worst_rel_error < 1e-5, serde_json::to_value(r)?))
    }));

    items.push(timed("gaussian_product_derivative", "max relative error < 1e-6", || {
        let cases = gaussian_product_cases(50, root.child(2));
        let err = check_gaussian_product_derivative(&cases)?;
        Ok((err < 1e-6, json!({ "cases": cases.len(), "max_rel_error": err })))
    }));

    items.push(timed("hierarchical_sampler", "every size within 4 SE, error decreasing", || {
        let r = check_hierarchical_sampler(&HierarchicalSpec::UniformGaussianProduct, &[(100, 100), (1000, 100)], 20, root.child(3))?;
        Ok((r.within_4_se && r.error_decreases, serde_json::to_value(&r)?))
    }));

    items.push(timed("linear_bound_arithmetic", "exact to 1e-12", || {
        // (V, s0, E[x^2], expected (1 + s0^2/E[x^2]) / (2|V|)).
        let cases: [(&[f64], f64, f64, f64); 3] = [
            (&[0.3, 0.4], 1.0, 1.0, 2.0),
            (&[0.5], 0.5, 1.0, 1.25),
            (&[1.0, 0.0, 0.0], 0.2, 4.0, 0.505),
        ];
        let mut worst: f64 = 0.0;
        let mut out = Vec::new();
        for (v, s0, ex2, expected) in cases {
            let got = linear_condition_bound(v, s0, ex2)?;
            worst = worst.max((got - expected).abs());
            out.push(json!({ "v": v, "s0": s0, "ex2": ex2, "expected": expected, "got": got }));
        }
        Ok((worst < 1e-12, json!({ "cases": out, "max_abs_error": worst })))
    }));

    items.push(timed("linear_bound_vs_quotient", "relative difference < 1e-9", || {
        let ex = LinearExample::new(&[0.3, -0.4], 1.3)?;
        let mut worst: f64 = 0.0;
        let mut out = Vec::new();
        for s0 in [0.05, 0.1, 0.3, 0.7] {
            let w = ex.optimum(s0);
            let q = condition_quotient(&ex.sensitivity(&w, s0), &ex.second_sensitivity(&w));
            let b = ex.condition_bound(s0)?;
            worst = worst.max((q - b).abs() / b);
            out.push(json!({ "s0": s0, "quotient": q, "bound": b }));
        }
        Ok((worst < 1e-9, json!({ "cases": out, "max_rel_error": worst })))
    }));

    items.push(timed("linear_direction_unbiased", "max |z| < 4 over 20 runs", || {
        let ex = LinearExample::new(&[0.3, -0.4], 1.0)?;
        let s0 = 0.3;
        let data = ex.dataset(4000, root.child(4))?;
        let w = ex.optimum(s0);
        let target = ex.sensitivity(&w, s0);
        let runs: Vec<Vec<f64>> = (0..20)
            .map(|r| {
                let d = gift_core::gift::estimate_direction(&w, &data, s0, 200, 50, root.child(5).child(r))?;
                Ok(d.to_sensitivity(s0).to_flat())
            })
            .collect::<CliResult<_>>()?;
        let mut worst: f64 = 0.0;
        let mut comps = Vec::new();
        for (i, t) in target.to_flat().iter().enumerate() {
            let vals: Vec<f64> = runs.iter().map(|r| r[i]).collect();
            let ci = mean_ci95(&vals);
            let n = vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - ci.mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            let z = (ci.mean - t) / (sd / n.sqrt());
            worst = worst.max(z.abs());
            comps.push(json!({ "target": t, "mean": ci.mean, "z": z }));
        }
        Ok((worst < 4.0, json!({ "components": comps, "max_abs_z": worst })))
    }));

    let failed = items.iter().filter(|i| !i.passed).count();
    let report = json!({ "seed": seed, "passed": failed == 0, "checks": items });
    crate::artifacts::ensure_dir(out)?;
    let path = out.join("check.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| crate::error::io(&path, e))?;
    Ok(items)
}
