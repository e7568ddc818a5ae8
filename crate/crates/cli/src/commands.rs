use std::path::{Path, PathBuf};

use fedctl_core::{datagen, run_comparison, run_simulation, SimulationConfig};
use serde::Serialize;

use crate::config::load_config;
use crate::dataset_file;
use crate::error::{CliError, Result};
use crate::output::{self, Manifest, Summary};

/// Config inputs shared by every command.
#[derive(Debug, Clone, Default)]
pub struct ConfigArgs {
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<SimulationConfig> {
        load_config(self.config.as_deref(), &self.overrides, self.seed)
    }
}

fn manifest(
    command: &str,
    config: SimulationConfig,
    seeds: Option<Vec<u64>>,
    started: String,
    outputs: Vec<String>,
) -> Manifest {
    Manifest {
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        config,
        seeds,
        started,
        finished: output::timestamp(),
        outputs,
    }
}

pub fn cmd_run(args: &ConfigArgs, out: &Path) -> Result<Summary> {
    let started = output::timestamp();
    let cfg = args.resolve()?;
    let result = run_simulation(&cfg)?;
    let files = output::write_run_files(out, &result)?;
    let mut outputs: Vec<String> = files.iter().map(|p| p.display().to_string()).collect();
    outputs.push(output::MANIFEST_JSON.into());
    output::write_json(
        &out.join(output::MANIFEST_JSON),
        &manifest("run", cfg, None, started, outputs),
    )?;
    Ok(Summary::of(&result))
}

pub fn parse_seeds(list: &str) -> Result<Vec<u64>> {
    let seeds = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<u64>()
                .map_err(|_| CliError::Config(format!("bad seed `{s}` in --seeds")))
        })
        .collect::<Result<Vec<_>>>()?;
    if seeds.is_empty() {
        return Err(CliError::Config("--seeds needs at least one seed".into()));
    }
    Ok(seeds)
}

/// Directory of one arm/seed's per-round files, relative to the compare output dir.
pub fn arm_dir(label: &str, seed: u64) -> PathBuf {
    Path::new("arms").join(label).join(format!("seed-{seed}"))
}

pub fn cmd_compare(args: &ConfigArgs, seeds: &[u64], out: &Path) -> Result<fedctl_core::ComparisonReport> {
    let started = output::timestamp();
    let cfg = args.resolve()?;
    let cmp = run_comparison(&cfg, seeds)?;

    let mut outputs = vec![output::COMPARISON_JSON.to_string()];
    for run in &cmp.runs {
        let rel = arm_dir(
            &fedctl_core::orchestrator::arm_label(run.control, run.personalization),
            run.seed,
        );
        for f in output::write_run_files(&out.join(&rel), &run.result)? {
            outputs.push(rel.join(f).display().to_string());
        }
    }
    output::write_json(
        &out.join(output::COMPARISON_JSON),
        &output::comparison_json(&cmp.report),
    )?;
    outputs.push(output::MANIFEST_JSON.into());
    output::write_json(
        &out.join(output::MANIFEST_JSON),
        &manifest("compare", cfg, Some(seeds.to_vec()), started, outputs),
    )?;
    Ok(cmp.report)
}

pub fn cmd_dump_data(args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = args.resolve()?;
    let fd = datagen::generate(&cfg.data)?;
    output::write_file(out, &dataset_file::render(&fd))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Inspection {
    pub source: String,
    pub num_clients: usize,
    pub client_train_sizes: Vec<usize>,
    pub client_test_sizes: Vec<usize>,
    pub global_test_size: usize,
    pub noniid_score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<Summary>,
}

impl Inspection {
    pub fn render(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut lines = vec![
            format!("source: {}", self.source),
            format!("num_clients: {}", self.num_clients),
            format!("client_train_sizes: {}", join(&self.client_train_sizes)),
            format!("client_test_sizes: {}", join(&self.client_test_sizes)),
            format!("global_test_size: {}", self.global_test_size),
            format!("noniid_score: {}", self.noniid_score),
        ];
        if let Some(s) = &self.summary {
            lines.push(format!("rounds: {}", s.rounds));
            lines.push(format!("final_global_accuracy: {}", s.final_global_accuracy));
            lines.push(format!("final_global_loss: {}", s.final_global_loss));
            lines.push(format!("mean_personalization_gain: {}", s.mean_personalization_gain));
            let eta: Vec<String> = s.eta_trajectory.iter().map(|e| e.to_string()).collect();
            lines.push(format!("eta_trajectory: {}", eta.join(",")));
        }
        lines.join("\n") + "\n"
    }
}

/// Summarize a dataset dump file or a `run` output directory. Run
/// directories are summarized by regenerating the dataset from the manifest.
pub fn cmd_inspect(path: &Path) -> Result<Inspection> {
    if path.is_dir() {
        let manifest: Manifest = output::read_json(&path.join(output::MANIFEST_JSON), "manifest")?;
        let fd = datagen::generate(&manifest.config.resolved().data)?;
        let summary_path = path.join(output::SUMMARY_JSON);
        let summary = if summary_path.exists() {
            Some(output::read_json(&summary_path, "summary")?)
        } else {
            None
        };
        Ok(Inspection {
            source: "run".into(),
            num_clients: fd.clients.len(),
            client_train_sizes: fd.clients.iter().map(|c| c.train.len()).collect(),
            client_test_sizes: fd.clients.iter().map(|c| c.test.len()).collect(),
            global_test_size: fd.global_test.len(),
            noniid_score: datagen::noniid_score(&fd),
            summary,
        })
    } else {
        let ds = dataset_file::load(path)?;
        Ok(Inspection {
            source: "dataset".into(),
            num_clients: ds.clients.len(),
            client_train_sizes: ds.clients.iter().map(|c| c.train.len()).collect(),
            client_test_sizes: ds.clients.iter().map(|c| c.test.len()).collect(),
            global_test_size: ds.global_test.len(),
            noniid_score: ds.noniid_score(),
            summary: None,
        })
    }
}
