//! Step-Wise Fine-Tuning: six nested freeze plans that unfreeze the
//! network from the head back to the stem, and the sweep that trains each
//! step independently from the same pretrained checkpoint.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::datagen::ImageSample;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_with, Evaluation, MetricsReport};
use crate::nn::{Group, MiniResNet, StageTag};
use crate::rng::mix_seed;
use crate::train::{train, write_file, TrainConfig, TrainHistory};

pub const MAX_STEP: usize = 6;

/// Trainable groups for one SWFT step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezePlan {
    pub step: usize,
    pub trainable: BTreeSet<Group>,
}

impl FreezePlan {
    /// Step 1 trains `fc`; each further step adds the next stage towards
    /// the input; step 6 trains everything.
    pub fn for_step(step: usize) -> Result<Self> {
        if !(1..=MAX_STEP).contains(&step) {
            return Err(Error::invalid(format!(
                "swft step must be in 1..={MAX_STEP}, got {step}"
            )));
        }
        let trainable = Group::ALL.iter().rev().take(step).copied().collect();
        Ok(FreezePlan { step, trainable })
    }

    pub fn head_only() -> Self {
        Self::for_step(1).expect("step 1 is valid")
    }

    pub fn all() -> Self {
        Self::for_step(MAX_STEP).expect("step 6 is valid")
    }

    pub fn is_trainable(&self, group: Group) -> bool {
        self.trainable.contains(&group)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.trainable.iter().map(|g| g.name()).collect()
    }
}

pub fn freeze_plan_for_step(step: usize) -> Result<FreezePlan> {
    FreezePlan::for_step(step)
}

/// Train/validation/test partition of one domain.
#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: Vec<ImageSample>,
    pub val: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

/// Outcome of training one freeze plan on the target domain.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub plan: FreezePlan,
    pub model: MiniResNet,
    pub history: TrainHistory,
    pub evaluation: Evaluation,
}

impl StepResult {
    pub fn report(&self) -> &MetricsReport {
        &self.evaluation.report
    }
}

/// Reloads `checkpoint`, gives it a fresh head for the target classes and
/// trains it under `plan`.
pub fn fine_tune(
    checkpoint: &[u8],
    target: &Splits,
    num_classes: usize,
    config: &TrainConfig,
    plan: &FreezePlan,
) -> Result<StepResult> {
    let mut model = MiniResNet::from_checkpoint_bytes(checkpoint)?;
    model.replace_head(num_classes, mix_seed(config.seed, 0x6865_6164))?;
    let (mut model, history) = train(&model, &target.train, &target.val, config, plan)?;
    model.meta.stage = StageTag::Target;
    model.meta.seed = config.seed;
    let evaluation = evaluate_with(&model, &target.test, config.seed, &config.normalization)?;
    Ok(StepResult {
        plan: plan.clone(),
        model,
        history,
        evaluation,
    })
}

/// Runs every requested step from the same checkpoint bytes. Failures are
/// reported with the step that produced them.
pub fn swft_sweep(
    checkpoint: &[u8],
    target: &Splits,
    config: &TrainConfig,
    steps: &[usize],
) -> Result<Vec<StepResult>> {
    if steps.is_empty() {
        return Err(Error::invalid("swft_sweep: no steps requested"));
    }
    steps
        .iter()
        .map(|&step| {
            let tag = |e: Error| Error::Step {
                step,
                source: Box::new(e),
            };
            let plan = FreezePlan::for_step(step).map_err(tag)?;
            fine_tune(checkpoint, target, 2, config, &plan).map_err(tag)
        })
        .collect()
}

pub const SWEEP_HEADER: &str =
    "step,epoch,accuracy,precision_b,precision_m,recall_b,recall_m,f1_b,f1_m,auc,avg_time";

/// One row per step; `epoch` is the number of epochs run and `avg_time`
/// the mean wall time per epoch in seconds.
pub fn sweep_summary_csv(results: &[StepResult]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in results {
        let _ = write!(s, "{},{}", r.plan.step, r.history.epochs.len());
        for v in r.report().values() {
            let _ = write!(s, ",{v}");
        }
        let _ = writeln!(s, ",{:.3}", avg_epoch_time(r));
    }
    s
}

fn avg_epoch_time(r: &StepResult) -> f64 {
    r.history.wall_time_s() / r.history.epochs.len().max(1) as f64
}

/// Writes `summary.csv` (the table without timing, so reruns compare
/// equal), `timings.csv`, and `step{N}/history.csv` plus `step{N}/model.vxck`.
pub fn write_sweep(results: &[StepResult], dir: &Path) -> Result<()> {
    let table = sweep_summary_csv(results);
    let untimed: String = table
        .lines()
        .map(|l| format!("{}\n", &l[..l.rfind(',').unwrap_or(l.len())]))
        .collect();
    write_file(&dir.join("summary.csv"), untimed.as_bytes())?;
    let mut timings = String::from("step,epoch,avg_time\n");
    for r in results {
        let _ = writeln!(timings, "{},{},{:.3}", r.plan.step, r.history.epochs.len(), avg_epoch_time(r));
    }
    write_file(&dir.join("timings.csv"), timings.as_bytes())?;
    for r in results {
        let step_dir = dir.join(format!("step{}", r.plan.step));
        r.history.write_csv(&step_dir.join("history.csv"))?;
        write_file(&step_dir.join("model.vxck"), &r.model.to_checkpoint_bytes())?;
    }
    Ok(())
}
