use std::path::Path;

use super::{pretrain, PretrainOptions, TrainError};
use crate::config::RunConfig;
use crate::optim::OptimizerKind;
use crate::schedule::ScheduleKind;
use crate::tensor::Element;

pub const GRID_OPTIMIZERS: [OptimizerKind; 2] = [OptimizerKind::Adafactor, OptimizerKind::AdamwRms];
pub const GRID_SCHEDULES: [ScheduleKind; 2] = [ScheduleKind::Isr, ScheduleKind::Cosine];

/// Outcome of one optimizer/schedule combination.
#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub optimizer: OptimizerKind,
    pub schedule: ScheduleKind,
    /// Train loss of the first step, before any update.
    pub initial_nll: f64,
    /// Train loss of the last step.
    pub final_nll: f64,
    pub heldout_nll: Option<f64>,
    /// Every logged loss is finite and the run did not diverge.
    pub finite: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridReport {
    pub cells: Vec<GridCell>,
}

impl GridReport {
    pub fn cell(&self, opt: OptimizerKind, sched: ScheduleKind) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.optimizer == opt && c.schedule == sched)
    }
}

fn schedule_name(k: ScheduleKind) -> &'static str {
    match k {
        ScheduleKind::Isr => "isr",
        ScheduleKind::Cosine => "cosine",
        ScheduleKind::Constant => "constant",
    }
}

/// Pre-trains every optimizer/schedule pair from the same initialisation.
///
/// `schedules` gives the schedule section used for each schedule kind; the
/// rest of `base` is shared. Cells run one after the other, each in its own
/// subdirectory of `out_dir` when given.
pub fn run_grid<T: Element>(
    base: &RunConfig,
    schedules: &dyn Fn(ScheduleKind) -> crate::schedule::ScheduleSpec,
    out_dir: Option<&Path>,
) -> Result<GridReport, TrainError> {
    let mut cells = Vec::new();
    for opt in GRID_OPTIMIZERS {
        for sched in GRID_SCHEDULES {
            let mut run = base.clone();
            run.optim.kind = opt;
            run.schedule = schedules(sched);
            run.schedule.kind = sched;
            let dir = out_dir.map(|d| d.join(format!("{}-{}", opt.name(), schedule_name(sched))));
            let opts = PretrainOptions::<T> {
                out_dir: dir.as_deref(),
                ..Default::default()
            };
            let cell = match pretrain(&run, opts) {
                Ok(report) => {
                    let train: Vec<f64> = report
                        .metrics
                        .iter()
                        .filter(|r| r.split == "train")
                        .map(|r| r.loss)
                        .collect();
                    let heldout = report.metrics.iter().rev().find(|r| r.split == "heldout").map(|r| r.loss);
                    GridCell {
                        optimizer: opt,
                        schedule: sched,
                        initial_nll: train.first().copied().unwrap_or(f64::NAN),
                        final_nll: train.last().copied().unwrap_or(f64::NAN),
                        heldout_nll: heldout,
                        finite: !train.is_empty() && report.metrics.iter().all(|r| r.loss.is_finite()),
                        error: None,
                    }
                }
                Err(e @ TrainError::Diverged { .. }) => GridCell {
                    optimizer: opt,
                    schedule: sched,
                    initial_nll: f64::NAN,
                    final_nll: f64::NAN,
                    heldout_nll: None,
                    finite: false,
                    error: Some(e.to_string()),
                },
                Err(e) => return Err(e),
            };
            cells.push(cell);
        }
    }
    Ok(GridReport { cells })
}

/// Final train NLL per cell as a table with optimizers as rows and
/// schedules as columns.
pub fn format_grid(report: &GridReport) -> String {
    let mut out = format!("{:<12}", "optimizer");
    for s in GRID_SCHEDULES {
        out.push_str(&format!(" | {:>9}", schedule_name(s)));
    }
    out.push('\n');
    out.push_str(&"-".repeat(12 + GRID_SCHEDULES.len() * 12));
    out.push('\n');
    for o in GRID_OPTIMIZERS {
        out.push_str(&format!("{:<12}", o.name()));
        for s in GRID_SCHEDULES {
            let v = match report.cell(o, s) {
                Some(c) if c.finite => format!("{:.3}", c.final_nll),
                Some(_) => "diverged".into(),
                None => "-".into(),
            };
            out.push_str(&format!(" | {v:>9}"));
        }
        out.push('\n');
    }
    out
}

/// Desk-scale grid setup: the nano model on the bundled corpus with short
/// inputs, effective batch 32 and `steps` optimizer steps.
pub fn desk_grid_config(steps: u64) -> RunConfig {
    let mut run = RunConfig::default();
    run.data.input_length = 32;
    run.data.prefetch = 4;
    run.train.total_steps = steps;
    run.train.micro_batch_size = 8;
    run.train.grad_accum_steps = 4;
    run.train.eval_interval = 0;
    run.train.eval_batches = 2;
    run.train.checkpoint_interval = 0;
    run.schedule = desk_schedule(ScheduleKind::Isr, steps);
    run
}

/// Relative step sizes for the desk grid. Both schedules peak at 0.01, the
/// value inverse square root decay holds through the default warmup.
pub fn desk_schedule(kind: ScheduleKind, steps: u64) -> crate::schedule::ScheduleSpec {
    let warmup = (steps / 20).max(1);
    let peak = 0.01;
    crate::schedule::ScheduleSpec {
        kind,
        peak_lr: match kind {
            ScheduleKind::Isr => peak * (warmup as f64).sqrt(),
            _ => peak,
        },
        final_lr: None,
        warmup_steps: warmup,
        total_steps: steps.max(warmup),
    }
}
