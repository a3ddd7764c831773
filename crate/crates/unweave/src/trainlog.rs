//! Training-curve CSV logs and periodic checkpoint writing.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::Serialize;
use unweave_core::optim::AdamState;
use unweave_core::story::Scenario;
use unweave_core::train::{StepRecord, TrainObserver};
use unweave_core::Model;

use crate::checkpoint::{Checkpoint, Lineage};

#[derive(Debug, Serialize)]
struct Row {
    step: u64,
    loss: f64,
    lr: f64,
    grad_norm: f64,
    acc_continue: Option<f64>,
    acc_new: Option<f64>,
    acc_resume: Option<f64>,
    acc_overall: Option<f64>,
    saturated: usize,
    wall_s: f64,
}

#[derive(Debug, Serialize)]
struct EvalRow {
    step: u64,
    val_ri: f64,
    wall_s: f64,
}

/// Appends one CSV row per step and per validation, and writes checkpoints
/// under `checkpoint_dir` when the loop asks for them.
pub struct CsvLogger {
    steps: csv::Writer<File>,
    evals: Option<csv::Writer<File>>,
    started: Instant,
    checkpoint_dir: Option<PathBuf>,
    lineage: Option<Lineage>,
    error: Option<anyhow::Error>,
    every: u64,
}

impl CsvLogger {
    pub fn create(path: &Path) -> anyhow::Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let steps = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self {
            steps,
            evals: None,
            started: Instant::now(),
            checkpoint_dir: None,
            lineage: None,
            error: None,
            every: 100,
        })
    }

    /// Also log validation RI to `path`.
    pub fn with_evals(mut self, path: &Path) -> anyhow::Result<Self> {
        self.evals = Some(csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?);
        Ok(self)
    }

    pub fn with_checkpoints(mut self, dir: PathBuf, lineage: Lineage) -> Self {
        self.checkpoint_dir = Some(dir);
        self.lineage = Some(lineage);
        self
    }

    /// Progress line period on the log (0 silences it).
    pub fn with_progress_every(mut self, every: u64) -> Self {
        self.every = every;
        self
    }

    /// Flushes and surfaces any IO error swallowed during the run.
    pub fn finish(mut self) -> anyhow::Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.steps.flush()?;
        if let Some(w) = self.evals.as_mut() {
            w.flush()?;
        }
        Ok(())
    }

    fn keep(&mut self, r: anyhow::Result<()>) {
        if let (Err(e), None) = (r, &self.error) {
            self.error = Some(e);
        }
    }
}

impl TrainObserver for CsvLogger {
    fn on_step(&mut self, r: &StepRecord) {
        let row = Row {
            step: r.step,
            loss: r.loss,
            lr: r.lr,
            grad_norm: r.grad_norm,
            acc_continue: r.counts.accuracy(Scenario::Continue),
            acc_new: r.counts.accuracy(Scenario::New),
            acc_resume: r.counts.accuracy(Scenario::Resume),
            acc_overall: r.counts.overall(),
            saturated: r.saturated,
            wall_s: self.started.elapsed().as_secs_f64(),
        };
        if self.every > 0 && r.step.is_multiple_of(self.every) {
            log::info!("step {} loss {:.4} lr {:.2e}", r.step, r.loss, r.lr);
        }
        let res = self.steps.serialize(row).map_err(Into::into);
        self.keep(res);
    }

    fn on_checkpoint(&mut self, step: u64, model: &Model, adam: &AdamState) {
        let (Some(dir), Some(lineage)) = (&self.checkpoint_dir, &self.lineage) else {
            return;
        };
        let path = dir.join(format!("step-{step:06}.ckpt.json"));
        let ck = Checkpoint::new(model.clone(), Some(adam.clone()), step, lineage.clone());
        let res = ck.save(&path).map(|_| log::info!("checkpoint {}", path.display()));
        self.keep(res);
    }

    fn on_eval(&mut self, step: u64, val_ri: f64) {
        log::info!("step {step} validation RI {val_ri:.4}");
        let wall_s = self.started.elapsed().as_secs_f64();
        if let Some(w) = self.evals.as_mut() {
            let res = w.serialize(EvalRow { step, val_ri, wall_s }).map_err(Into::into);
            self.keep(res);
        }
    }
}
