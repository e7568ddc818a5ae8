//! On-disk formats written by `run` and `compare`.
//!
//! CSV floats use `{:.16e}`: 17 significant digits, `.` decimal point,
//! independent of locale.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fedctl_core::{ComparisonReport, SimulationConfig, SimulationResult};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const ROUNDS_CSV: &str = "rounds.csv";
pub const CLIENTS_CSV: &str = "clients.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const COMPARISON_JSON: &str = "comparison.json";

pub const ROUNDS_HEADER: &str = "round,eta,delta_L,global_loss,global_accuracy";
pub const CLIENTS_HEADER: &str =
    "round,client_id,weight,local_loss_before,local_loss_after,grad_norm,baseline_accuracy,personalized_accuracy";

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn rounds_csv(result: &SimulationResult) -> String {
    let mut out = String::from(ROUNDS_HEADER);
    out.push('\n');
    for r in &result.rounds {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.round,
            fmt_f64(r.eta),
            fmt_f64(r.delta_loss),
            fmt_f64(r.global_loss),
            fmt_f64(r.global_accuracy)
        );
    }
    out
}

pub fn clients_csv(result: &SimulationResult) -> String {
    let mut out = String::from(CLIENTS_HEADER);
    out.push('\n');
    for r in &result.rounds {
        for c in &r.clients {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.round,
                c.client_id,
                fmt_f64(c.weight),
                fmt_f64(c.local_loss_before),
                fmt_f64(c.local_loss_after),
                fmt_f64(c.grad_norm),
                fmt_f64(c.baseline_accuracy),
                fmt_f64(c.personalized_accuracy)
            );
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub final_global_accuracy: f64,
    pub final_global_loss: f64,
    pub eta_trajectory: Vec<f64>,
    pub mean_personalization_gain: f64,
    pub noniid_score: f64,
    pub rounds: usize,
    pub num_clients: usize,
}

impl Summary {
    pub fn of(result: &SimulationResult) -> Self {
        let last = result.last_round();
        Self {
            final_global_accuracy: last.global_accuracy,
            final_global_loss: last.global_loss,
            eta_trajectory: result.eta_trajectory(),
            mean_personalization_gain: last.mean_personalization_gain(),
            noniid_score: result.noniid_score,
            rounds: result.rounds.len(),
            num_clients: last.clients.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifact_version: String,
    pub command: String,
    pub config: SimulationConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    pub started: String,
    pub finished: String,
    /// Paths relative to the manifest's directory.
    pub outputs: Vec<String>,
}

pub fn timestamp() -> String {
    humantime::format_rfc3339_seconds(std::time::SystemTime::now()).to_string()
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| CliError::Output {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, contents).map_err(|source| CliError::Output {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_file(path, &text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &'static str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Input {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Malformed {
        what,
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes rounds.csv, clients.csv and summary.json into `dir`; returns the file names.
pub fn write_run_files(dir: &Path, result: &SimulationResult) -> Result<Vec<PathBuf>> {
    write_file(&dir.join(ROUNDS_CSV), &rounds_csv(result))?;
    write_file(&dir.join(CLIENTS_CSV), &clients_csv(result))?;
    write_json(&dir.join(SUMMARY_JSON), &Summary::of(result))?;
    Ok(vec![ROUNDS_CSV.into(), CLIENTS_CSV.into(), SUMMARY_JSON.into()])
}

pub fn comparison_json(report: &ComparisonReport) -> serde_json::Value {
    serde_json::to_value(report).expect("serializable")
}
