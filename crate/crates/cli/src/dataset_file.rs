//! Flat text dump of a generated dataset.
//!
//! ```text
//! # fedctl-dataset v1 config_hash=<16 hex> num_clients=<N> num_classes=<C> input_dim=<D>
//! <split>,<client>,<label>,<f_1>,...,<f_D>
//! ```
//!
//! `split` is `train` or `test`; `client` is the client index, or
//! `global-test` for the server's held-out set (always with split `test`).
//! Clients appear in index order, train rows before test rows; the global
//! test rows come last. Features use the CSV float format.

use std::fmt::Write as _;
use std::path::Path;

use fedctl_core::datagen::{histogram, noniid_score_from_histograms};
use fedctl_core::rng::fnv1a64;
use fedctl_core::{DataGenConfig, Example, FederatedDataset};

use crate::error::{CliError, Result};
use crate::output::fmt_f64;

pub const MAGIC: &str = "# fedctl-dataset v1";
pub const GLOBAL_TEST: &str = "global-test";

pub fn config_hash(cfg: &DataGenConfig) -> u64 {
    fnv1a64(serde_json::to_string(cfg).expect("serializable").as_bytes())
}

fn push_row(out: &mut String, split: &str, client: &str, ex: &Example) {
    let _ = write!(out, "{split},{client},{}", ex.label);
    for x in &ex.features {
        out.push(',');
        out.push_str(&fmt_f64(*x));
    }
    out.push('\n');
}

pub fn render(fd: &FederatedDataset) -> String {
    let cfg = &fd.config;
    let mut out = format!(
        "{MAGIC} config_hash={:016x} num_clients={} num_classes={} input_dim={}\n",
        config_hash(cfg),
        fd.clients.len(),
        cfg.num_classes,
        cfg.input_dim
    );
    for c in &fd.clients {
        let id = c.client_id.to_string();
        for ex in &c.train {
            push_row(&mut out, "train", &id, ex);
        }
        for ex in &c.test {
            push_row(&mut out, "test", &id, ex);
        }
    }
    for ex in &fd.global_test {
        push_row(&mut out, "test", GLOBAL_TEST, ex);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedClient {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    pub config_hash: u64,
    pub num_classes: usize,
    pub input_dim: usize,
    pub clients: Vec<LoadedClient>,
    pub global_test: Vec<Example>,
}

impl LoadedDataset {
    pub fn noniid_score(&self) -> f64 {
        let hists: Vec<Vec<usize>> = self
            .clients
            .iter()
            .map(|c| histogram(&c.train, self.num_classes))
            .collect();
        let refs: Vec<&[usize]> = hists.iter().map(|h| h.as_slice()).collect();
        noniid_score_from_histograms(&refs)
    }
}

fn header_field<'a>(header: &'a str, name: &str) -> Option<&'a str> {
    header
        .split_whitespace()
        .find_map(|tok| tok.strip_prefix(name).and_then(|rest| rest.strip_prefix('=')))
}

pub fn parse(text: &str, path: &Path) -> Result<LoadedDataset> {
    let bad = |reason: String| CliError::Malformed {
        what: "dataset dump",
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    if !header.starts_with(MAGIC) {
        return Err(bad("missing header".into()));
    }
    let field =
        |name: &str| -> Result<&str> { header_field(header, name).ok_or_else(|| bad(format!("header lacks {name}"))) };
    let config_hash = u64::from_str_radix(field("config_hash")?, 16).map_err(|e| bad(e.to_string()))?;
    let num_clients: usize = field("num_clients")?
        .parse()
        .map_err(|_| bad("bad num_clients".into()))?;
    let num_classes: usize = field("num_classes")?
        .parse()
        .map_err(|_| bad("bad num_classes".into()))?;
    let input_dim: usize = field("input_dim")?.parse().map_err(|_| bad("bad input_dim".into()))?;

    let mut clients = vec![
        LoadedClient {
            train: Vec::new(),
            test: Vec::new()
        };
        num_clients
    ];
    let mut global_test = Vec::new();
    for (n, line) in lines.enumerate() {
        let lineno = n + 2;
        let mut parts = line.split(',');
        let (split, client, label) = match (parts.next(), parts.next(), parts.next()) {
            (Some(s), Some(c), Some(l)) => (s, c, l),
            _ => return Err(bad(format!("line {lineno}: too few fields"))),
        };
        let label: usize = label.parse().map_err(|_| bad(format!("line {lineno}: bad label")))?;
        if label >= num_classes {
            return Err(bad(format!("line {lineno}: label {label} out of range")));
        }
        let features = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad(format!("line {lineno}: bad feature")))?;
        if features.len() != input_dim {
            return Err(bad(format!(
                "line {lineno}: expected {input_dim} features, got {}",
                features.len()
            )));
        }
        let ex = Example::new(features, label);
        if client == GLOBAL_TEST {
            global_test.push(ex);
            continue;
        }
        let id: usize = client
            .parse()
            .map_err(|_| bad(format!("line {lineno}: bad client id")))?;
        let slot = clients
            .get_mut(id)
            .ok_or_else(|| bad(format!("line {lineno}: client {id} out of range")))?;
        match split {
            "train" => slot.train.push(ex),
            "test" => slot.test.push(ex),
            other => return Err(bad(format!("line {lineno}: unknown split `{other}`"))),
        }
    }
    Ok(LoadedDataset {
        config_hash,
        num_classes,
        input_dim,
        clients,
        global_test,
    })
}

pub fn load(path: &Path) -> Result<LoadedDataset> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Input {
        path: path.to_path_buf(),
        source,
    })?;
    parse(&text, path)
}
