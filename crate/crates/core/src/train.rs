//! Epoch loop: shuffle train pairs, draw one negative per pair with the
//! configured sampler, take a BPR/Adam step per mini-batch, early-stop on
//! validation Recall@20.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{bpr_step, propagate, write_checkpoint, BprSample, Forward, Graph, ModelState, TrainConfig};
use crate::dataset::InteractionDataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalSplit};
use crate::par;
use crate::rng;
use crate::sampler::Sampler;

pub const EARLY_STOP_K: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub recall: f64,
    pub ndcg: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// State with the best validation Recall@20 (the last state when there
    /// is no validation data).
    pub best: ModelState,
    pub best_epoch: usize,
    pub best_recall: f64,
    pub history: Vec<EpochLog>,
    pub stopped_early: bool,
}

/// Draws negatives for a batch. Each pair uses its own seeded stream, so the
/// result does not depend on thread scheduling.
fn draw_batch(
    ds: &InteractionDataset,
    forward: &Forward,
    sampler: &Sampler<'_>,
    pairs: &[(u32, u32)],
    seed: u64,
    epoch: usize,
    batch: usize,
) -> Result<Vec<BprSample>> {
    let draws = par::map_range(pairs.len(), |k| {
        let (u, pos) = pairs[k];
        let mut r = rng::stream(seed, &[0xD8A, epoch as u64, batch as u64, k as u64]);
        sampler.draw(ds, forward, u, pos, &mut r).map(|d| d.map(|d| BprSample { user: u, pos, neg: d.item, lambda: d.lambda }))
    });
    let mut out = Vec::with_capacity(pairs.len());
    for d in draws {
        if let Some(s) = d? {
            out.push(s);
        }
    }
    Ok(out)
}

/// Trains `state` on `ds.train` with `sampler`. `on_epoch` sees each epoch's
/// log as it completes. On a non-finite loss or parameters the last finite
/// state is written to `dump` (when given) before the error is returned.
pub fn fit(
    ds: &InteractionDataset,
    mut state: ModelState,
    sampler: &Sampler<'_>,
    cfg: &TrainConfig,
    dump: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FitOutcome> {
    cfg.validate()?;
    let graph = Graph::from_dataset(ds);
    let pairs: Vec<(u32, u32)> = ds.train.iter().map(|e| (e.user, e.item)).collect();
    let has_validation = !ds.validation.is_empty();

    let mut best = state.clone();
    let mut best_epoch = 0;
    let mut best_recall = f64::NEG_INFINITY;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut order = pairs.clone();
        order.shuffle(&mut rng::stream(cfg.seed, &[0xE90C, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let forward = propagate(&state, &graph);
            let batch = draw_batch(ds, &forward, sampler, chunk, cfg.seed, epoch, b)?;
            if batch.is_empty() {
                continue;
            }
            let loss = match bpr_step(&mut state, &graph, &forward, &batch, cfg) {
                Ok(l) => l,
                Err(e @ Error::NonFinite { .. }) => return Err(dump_and(e, &state, dump)),
                Err(e) => return Err(e),
            };
            loss_sum += loss * batch.len() as f64;
            loss_n += batch.len();
        }
        if !state.is_finite() {
            let e = Error::NonFinite { step: state.adam.step, detail: format!("non-finite parameters after epoch {epoch}") };
            return Err(dump_and(e, &best, dump));
        }
        let seconds = start.elapsed().as_secs_f64();
        let (recall, ndcg) = if has_validation {
            let m = evaluate(&propagate(&state, &graph), ds, EvalSplit::Validation, &[EARLY_STOP_K]);
            (m.recall_at(EARLY_STOP_K), m.ndcg_at(EARLY_STOP_K))
        } else {
            (0.0, 0.0)
        };
        let log = EpochLog { epoch, loss: loss_sum / loss_n.max(1) as f64, recall, ndcg, seconds };
        on_epoch(&log);
        history.push(log);

        if !has_validation || recall > best_recall {
            best_recall = recall;
            best_epoch = epoch;
            best = state.clone();
        } else if cfg.patience > 0 && epoch - best_epoch >= cfg.patience {
            info!("early stop at epoch {epoch}; best epoch {best_epoch} (recall@{EARLY_STOP_K} {best_recall:.4})");
            stopped_early = true;
            break;
        }
    }
    if history.is_empty() {
        best_recall = 0.0;
    }
    Ok(FitOutcome { best, best_epoch, best_recall, history, stopped_early })
}

fn dump_and(e: Error, state: &ModelState, dump: Option<&Path>) -> Error {
    if let Some(p) = dump {
        match write_checkpoint(p, state) {
            Ok(()) => warn!("training diverged; state written to {}", p.display()),
            Err(w) => warn!("training diverged and the state dump failed: {w}"),
        }
    }
    e
}

/// `epoch,loss,recall@20,ndcg@20`.
pub fn write_metric_log(path: &Path, history: &[EpochLog]) -> Result<()> {
    let mut w = fs::File::create(path)?;
    writeln!(w, "epoch,loss,recall@20,ndcg@20")?;
    for h in history {
        writeln!(w, "{},{:.8},{:.6},{:.6}", h.epoch, h.loss, h.recall, h.ndcg)?;
    }
    Ok(())
}

/// `epoch,seconds` wall-clock per training epoch (evaluation excluded).
pub fn write_timing_log(path: &Path, history: &[EpochLog]) -> Result<()> {
    let mut w = fs::File::create(path)?;
    writeln!(w, "epoch,seconds")?;
    for h in history {
        writeln!(w, "{},{:.6}", h.epoch, h.seconds)?;
    }
    Ok(())
}
