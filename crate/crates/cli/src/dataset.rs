//! Line-delimited JSON dataset formats and manifests. Files are UTF-8, one
//! object per line; serde_json's shortest-round-trip float encoding keeps
//! read-back values bit-identical to what was written.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use ohio_core::types::{ActionVec, HighAction, HighActionKind, RelabeledSample, StateVec, Transition};

use crate::CliError;

/// Raw dataset record: {"ep", "t", "s", "a", "r", "s_next"}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub ep: i64,
    pub t: i64,
    pub s: Vec<f64>,
    pub a: Option<Vec<f64>>,
    pub r: Option<f64>,
    pub s_next: Vec<f64>,
}

impl TransitionRecord {
    pub fn from_transition(tr: &Transition) -> Self {
        Self {
            ep: tr.episode,
            t: tr.t,
            s: tr.s.values().to_vec(),
            a: tr.a.as_ref().map(|a| a.values().to_vec()),
            r: tr.r,
            s_next: tr.s_next.values().to_vec(),
        }
    }

    pub fn into_transition(self, line: usize) -> Result<Transition, CliError> {
        let bad = |e: ohio_core::types::TypeError| {
            CliError::Data(format!("line {line}: {e}"))
        };
        Ok(Transition {
            episode: self.ep,
            t: self.t,
            s: StateVec::new(self.s).map_err(bad)?,
            a: self.a.map(ActionVec::new).transpose().map_err(bad)?,
            r: self.r,
            s_next: StateVec::new(self.s_next).map_err(bad)?,
        })
    }
}

/// Relabeled record: {"s", "u", "u_kind", "r", "s_next", "inv_loss"}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelabeledRecord {
    pub s: Vec<f64>,
    pub u: Vec<f64>,
    pub u_kind: String,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub inv_loss: f64,
}

fn kind_name(kind: HighActionKind) -> &'static str {
    match kind {
        HighActionKind::GoalState => "goal_state",
        HighActionKind::Distribution => "distribution",
        HighActionKind::MixedProductionDistribution => "mixed_production_distribution",
    }
}

fn kind_from_name(name: &str, line: usize) -> Result<HighActionKind, CliError> {
    match name {
        "goal_state" => Ok(HighActionKind::GoalState),
        "distribution" => Ok(HighActionKind::Distribution),
        "mixed_production_distribution" => Ok(HighActionKind::MixedProductionDistribution),
        other => Err(CliError::Data(format!("line {line}: unknown u_kind '{other}'"))),
    }
}

impl RelabeledRecord {
    pub fn from_sample(sample: &RelabeledSample) -> Self {
        Self {
            s: sample.s.values().to_vec(),
            u: sample.u.values().to_vec(),
            u_kind: kind_name(sample.u.kind()).to_string(),
            r: sample.r,
            s_next: sample.s_next.values().to_vec(),
            inv_loss: sample.inv_loss,
        }
    }

    pub fn into_sample(self, line: usize) -> Result<RelabeledSample, CliError> {
        let bad = |e: ohio_core::types::TypeError| CliError::Data(format!("line {line}: {e}"));
        let kind = kind_from_name(&self.u_kind, line)?;
        RelabeledSample::new(
            StateVec::new(self.s).map_err(bad)?,
            HighAction::from_kind(self.u, kind).map_err(bad)?,
            self.r,
            StateVec::new(self.s_next).map_err(bad)?,
            self.inv_loss,
        )
        .map_err(bad)
    }
}

/// Manifest written next to each raw dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub count: usize,
    pub env_kind: String,
    pub episodes: usize,
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Io(format!("{}: {e}", parent.display())))?;
    }
    let file = std::fs::File::create(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut out = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| CliError::Data(format!("serialize: {e}")))?;
        out.write_all(line.as_bytes())
            .and_then(|_| out.write_all(b"\n"))
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }
    out.flush().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line)
            .map_err(|e| CliError::Data(format!("{} line {}: {e}", path.display(), idx + 1)))?;
        out.push(record);
    }
    Ok(out)
}

pub fn read_transitions(path: &Path) -> Result<Vec<Transition>, CliError> {
    let records: Vec<TransitionRecord> = read_jsonl(path)?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.into_transition(i + 1))
        .collect()
}

pub fn read_samples(path: &Path) -> Result<Vec<RelabeledSample>, CliError> {
    let records: Vec<RelabeledRecord> = read_jsonl(path)?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.into_sample(i + 1))
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Io(format!("{}: {e}", parent.display())))?;
    }
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Data(format!("serialize: {e}")))?;
    std::fs::write(path, text + "\n")
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
