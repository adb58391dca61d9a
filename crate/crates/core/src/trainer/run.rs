use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::Adam;
use super::step::{train_step, FlagHistogram, StateRecord, TrainState};
use super::{TrainConfig, TrainingSample};
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
use crate::error::{Error, Result};
use crate::model::Model;

const OPTIM_PREFIX: &str = "optim.";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub l_d: f64,
    pub l_c: f64,
    pub l_s: f64,
    pub total: f64,
    pub flags: FlagHistogram,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub final_step: usize,
    pub checkpoints: Vec<PathBuf>,
    pub last: Option<MetricRow>,
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("checkpoint-{step:06}.safetensors"))
}

fn save_state(path: &Path, model: &Model, state: &TrainState) -> Result<()> {
    let vars = model.named_vars();
    let mut tensors = model.weights();
    tensors.extend(state.optimizer.named_moments(&vars, OPTIM_PREFIX));
    let mut header = CheckpointHeader::for_model(model, state.step);
    header.train = Some(serde_json::to_value(state.record())?);
    save_checkpoint(path, &header, &tensors)
}

fn restore_state(path: &Path, model: &Model, cfg: &TrainConfig) -> Result<TrainState> {
    let (header, tensors) = load_checkpoint(path, model.device())?;
    if header.model != model.cfg {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: "model configuration differs from the checkpoint".into(),
        });
    }
    let weights: Vec<_> = tensors
        .iter()
        .filter(|(k, _)| !k.starts_with(OPTIM_PREFIX))
        .cloned()
        .collect();
    model.load_weights(&weights)?;
    let record: StateRecord = serde_json::from_value(header.train.ok_or_else(|| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: "no trainer state; not a resumable checkpoint".into(),
    })?)?;
    let optimizer = Adam::restore(cfg.adam, record.optimizer_step, &model.named_vars(), &tensors, OPTIM_PREFIX)?;
    Ok(TrainState::from_record(record, optimizer))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .enumerate()
        .filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|(i, line)| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Trains until `cfg.steps`, writing `metrics.jsonl` and checkpoints into
/// `out_dir`. With `resume`, continues from that checkpoint and keeps only
/// the metric rows up to its step.
pub fn train_loop(
    model: &Model,
    dataset: &[TrainingSample],
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate()?;
    dataset.iter().try_for_each(TrainingSample::validate)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);

    let (mut state, mut rows) = match resume {
        Some(path) => {
            let state = restore_state(path, model, cfg)?;
            let rows = if metrics_path.exists() {
                read_metrics(&metrics_path)?
                    .into_iter()
                    .filter(|r| r.step <= state.step)
                    .collect()
            } else {
                Vec::new()
            };
            (state, rows)
        }
        None => (TrainState::new(model, cfg)?, Vec::new()),
    };
    write_metrics(&metrics_path, &rows)?;
    let mut log = std::fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;

    let mut checkpoints = Vec::new();
    while state.step < cfg.steps {
        let idx = state.next_indices(dataset.len(), cfg.batch_size);
        let batch: Vec<TrainingSample> = idx.iter().map(|&i| dataset[i].clone()).collect();
        let outcome = train_step(model, &mut state, &batch, cfg)?;
        let row = MetricRow {
            step: state.step,
            l_d: outcome.losses.l_d,
            l_c: outcome.losses.l_c,
            l_s: outcome.losses.l_s,
            total: outcome.losses.total,
            flags: outcome.flags,
        };
        writeln!(log, "{}", serde_json::to_string(&row)?).map_err(|e| Error::io(&metrics_path, e))?;
        log::debug!(
            "step {} l_d={:.5} l_c={:.5} l_s={:.5} total={:.5}",
            row.step,
            row.l_d,
            row.l_c,
            row.l_s,
            row.total
        );
        rows.push(row);
        let periodic = cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0;
        if periodic || state.step == cfg.steps {
            let path = checkpoint_path(out_dir, state.step);
            save_state(&path, model, &state)?;
            checkpoints.push(path);
        }
    }
    Ok(TrainSummary {
        final_step: state.step,
        checkpoints,
        last: rows.last().cloned(),
    })
}
