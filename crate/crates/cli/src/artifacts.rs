//! Output files. Every artifact carries the resolved configuration and the
//! code hash; the creation time lives only in headers, so bodies of reruns
//! compare byte for byte.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use gift_core::Params;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::error::{io, CliError, CliResult};

/// Content hash of the library and driver sources this binary was built from.
pub const CODE_HASH: &str = env!("GIFT_CODE_HASH");
/// Content hash of the core library alone.
pub const CORE_HASH: &str = env!("GIFT_CORE_HASH");

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

fn created_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    std::fs::write(path, text).map_err(|e| io(path, e))
}

/// Writes `# key: value` header lines followed by `body`.
pub fn write_csv(path: &Path, config: &ExperimentConfig, body: &str) -> CliResult<()> {
    let mut text = String::new();
    writeln!(text, "# code_hash: {CODE_HASH}").unwrap();
    writeln!(text, "# created_unix: {}", created_unix()).unwrap();
    writeln!(text, "# config: {}", serde_json::to_string(config)?).unwrap();
    text.push_str(body);
    write(path, &text)
}

/// The CSV body: every line not starting with `#`.
pub fn csv_body(text: &str) -> String {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .fold(String::new(), |mut acc, l| {
            acc.push_str(l);
            acc.push('\n');
            acc
        })
}

/// Wraps `data` as `{"meta": {...}, "data": ...}`.
pub fn write_json(path: &Path, config: &ExperimentConfig, data: Value) -> CliResult<()> {
    let doc = json!({
        "meta": {
            "code_hash": CODE_HASH,
            "created_unix": created_unix(),
            "config": config,
        },
        "data": data,
    });
    write(path, &serde_json::to_string_pretty(&doc)?)
}

/// Trained weights with everything needed to reproduce them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub code_hash: String,
    pub config: ExperimentConfig,
    pub architecture: String,
    pub seed: u64,
    pub s0: f64,
    pub steps: usize,
    pub final_smoothed_loss: f64,
    pub params: Value,
}

impl Checkpoint {
    pub fn new(
        config: &ExperimentConfig,
        architecture: &str,
        seed: u64,
        s0: f64,
        steps: usize,
        final_smoothed_loss: f64,
        params: &Params,
    ) -> CliResult<Self> {
        Ok(Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            code_hash: CODE_HASH.to_string(),
            config: config.clone(),
            architecture: architecture.to_string(),
            seed,
            s0,
            steps,
            final_smoothed_loss,
            params: serde_json::from_str(&params.to_json()?)?,
        })
    }

    pub fn params(&self) -> CliResult<Params> {
        Ok(Params::from_json(&serde_json::to_string(&self.params)?)?)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        write(path, &serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| CliError::Runtime(format!("{}: not a checkpoint: {e}", path.display())))?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(CliError::Runtime(format!(
                "{}: checkpoint format {} is not supported (expected {})",
                path.display(),
                ck.format_version,
                CHECKPOINT_FORMAT_VERSION
            )));
        }
        Ok(ck)
    }
}

pub fn checkpoint_path(dir: &Path, arch: &str, s0: f64, seed: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("{arch}_s0-{s0}_seed-{seed}.json"))
}

/// Formats an optional value as a CSV field; `None` is empty.
pub fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}
