//! Training objectives over soft labels and per-task head outputs.
//!
//! Four modes share one building block, the KL divergence between a task's
//! soft label and its predicted distribution:
//!
//! * `Unitask`: KL for a single task (one model per PHQ-8 item).
//! * `Mtl`: weighted sum of the eight per-task losses.
//! * `Uw`: homoscedastic uncertainty weighting, `Σ_t exp(-s_t)·L_t + s_t/2`
//!   with `s_t = log σ_t²`.
//! * `UFair`: the same weighting with a separate `s_t^g` per group, applied to
//!   the per-group mean task losses and averaged over the groups present.
//!
//! Per-task batch losses are arithmetic means over records.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phq::{Group, SoftLabel, NUM_CLASSES, NUM_TASKS};

/// Class probabilities of one head.
pub type ClassProbs = [f64; NUM_CLASSES];
/// Class probabilities of all eight heads for one record.
pub type TaskProbs = [ClassProbs; NUM_TASKS];
/// Soft labels of all eight tasks for one record.
pub type TaskLabels = [SoftLabel; NUM_TASKS];

pub const DEFAULT_EPSILON_Q: f64 = 1e-12;
pub const DEFAULT_SIGMA_G: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Unitask { task: usize },
    Mtl,
    Uw,
    #[serde(rename = "ufair")]
    UFair,
}

impl LossMode {
    /// Number of learnable log-variance parameters this mode carries.
    pub fn num_uncertainty_params(self) -> usize {
        match self {
            LossMode::Unitask { .. } | LossMode::Mtl => 0,
            LossMode::Uw => NUM_TASKS,
            LossMode::UFair => 2 * NUM_TASKS,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossMode::Unitask { .. } => "unitask",
            LossMode::Mtl => "mtl",
            LossMode::Uw => "uw",
            LossMode::UFair => "ufair",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub mode: LossMode,
    pub task_weights: [f64; NUM_TASKS],
    pub sigma_g: f64,
    pub epsilon_q: f64,
}

impl LossSpec {
    pub fn new(mode: LossMode) -> Self {
        LossSpec {
            mode,
            task_weights: [1.0; NUM_TASKS],
            sigma_g: DEFAULT_SIGMA_G,
            epsilon_q: DEFAULT_EPSILON_Q,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let LossMode::Unitask { task } = self.mode {
            check_task(task)?;
        }
        if self.task_weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Config("task weights must be finite".into()));
        }
        if !(self.sigma_g > 0.0 && self.sigma_g.is_finite()) {
            return Err(Error::Config(format!("sigma_g must be > 0, got {}", self.sigma_g)));
        }
        if !(self.epsilon_q > 0.0 && self.epsilon_q <= 1e-6) {
            return Err(Error::Config(format!(
                "epsilon_q must lie in (0, 1e-6], got {}",
                self.epsilon_q
            )));
        }
        Ok(())
    }
}

fn check_task(t: usize) -> Result<()> {
    if t >= NUM_TASKS {
        return Err(Error::Input(format!("task index {t} outside 0..{NUM_TASKS}")));
    }
    Ok(())
}

/// Clamps `q` below at `eps` and renormalizes.
pub fn clamp_renormalize(q: &ClassProbs, eps: f64) -> ClassProbs {
    let mut c = q.map(|v| v.max(eps));
    let s: f64 = c.iter().sum();
    c.iter_mut().for_each(|v| *v /= s);
    c
}

/// `Σ_k p_k log(p_k / q_k)` with `q` clamped and renormalized; `0·log 0 = 0`.
pub fn kl_loss(p: &SoftLabel, q: &ClassProbs, eps: f64) -> f64 {
    let qc = clamp_renormalize(q, eps);
    p.0.iter()
        .zip(qc.iter())
        .filter(|(pk, _)| **pk > 0.0)
        .map(|(pk, qk)| pk * (pk / qk).ln())
        .sum()
}

/// KL loss of one record on task `task`.
pub fn unitask_loss(labels: &TaskLabels, outputs: &TaskProbs, task: usize, eps: f64) -> Result<f64> {
    check_task(task)?;
    Ok(kl_loss(&labels[task], &outputs[task], eps))
}

/// `Σ_t w_t L_t`.
pub fn mtl_loss(per_task: &[f64; NUM_TASKS], weights: &[f64; NUM_TASKS]) -> f64 {
    per_task.iter().zip(weights).map(|(l, w)| w * l).sum()
}

/// `Σ_t exp(-s_t) L_t + s_t / 2`.
pub fn uw_loss(per_task: &[f64; NUM_TASKS], log_var: &[f64; NUM_TASKS]) -> f64 {
    per_task
        .iter()
        .zip(log_var)
        .map(|(l, s)| (-s).exp() * l + 0.5 * s)
        .sum()
}

/// Per-group mean task losses and which groups occur in the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupTaskLosses {
    pub losses: [[f64; NUM_TASKS]; 2],
    pub present: [bool; 2],
}

/// U-Fair objective: mean over present groups of the group's UW loss.
pub fn ufair_loss(
    per_group: &[[f64; NUM_TASKS]; 2],
    log_var: &[[f64; NUM_TASKS]; 2],
    present: [bool; 2],
) -> Result<f64> {
    let n_present = present.iter().filter(|&&p| p).count();
    if n_present == 0 {
        return Err(Error::Input("no group present in batch".into()));
    }
    let total: f64 = (0..2)
        .filter(|&g| present[g])
        .map(|g| uw_loss(&per_group[g], &log_var[g]))
        .sum();
    Ok(total / n_present as f64)
}

/// Mean per-task KL over a batch.
pub fn task_losses(labels: &[TaskLabels], outputs: &[TaskProbs], eps: f64) -> Result<[f64; NUM_TASKS]> {
    if labels.is_empty() || labels.len() != outputs.len() {
        return Err(Error::Input(format!(
            "need a non-empty batch with matching labels/outputs ({} vs {})",
            labels.len(),
            outputs.len()
        )));
    }
    let mut acc = [0.0; NUM_TASKS];
    for (lab, out) in labels.iter().zip(outputs) {
        for t in 0..NUM_TASKS {
            acc[t] += kl_loss(&lab[t], &out[t], eps);
        }
    }
    let n = labels.len() as f64;
    Ok(acc.map(|v| v / n))
}

/// Mean per-task KL over each group's members of the batch.
pub fn group_task_losses(
    labels: &[TaskLabels],
    outputs: &[TaskProbs],
    groups: &[Group],
    eps: f64,
) -> Result<GroupTaskLosses> {
    if labels.is_empty() || labels.len() != outputs.len() || labels.len() != groups.len() {
        return Err(Error::Input("need a non-empty batch with matching lengths".into()));
    }
    let mut acc = [[0.0; NUM_TASKS]; 2];
    let mut counts = [0usize; 2];
    for ((lab, out), g) in labels.iter().zip(outputs).zip(groups) {
        let gi = g.index();
        counts[gi] += 1;
        for t in 0..NUM_TASKS {
            acc[gi][t] += kl_loss(&lab[t], &out[t], eps);
        }
    }
    for g in 0..2 {
        if counts[g] > 0 {
            let n = counts[g] as f64;
            acc[g].iter_mut().for_each(|v| *v /= n);
        }
    }
    Ok(GroupTaskLosses {
        losses: acc,
        present: counts.map(|c| c > 0),
    })
}

/// Splits a flat uncertainty vector (group-major, 8 per group) into rows.
pub fn group_log_vars(flat: &[f64]) -> Result<[[f64; NUM_TASKS]; 2]> {
    if flat.len() != 2 * NUM_TASKS {
        return Err(Error::Shape(format!(
            "expected {} per-group log-variances, got {}",
            2 * NUM_TASKS,
            flat.len()
        )));
    }
    let mut out = [[0.0; NUM_TASKS]; 2];
    out[0].copy_from_slice(&flat[..NUM_TASKS]);
    out[1].copy_from_slice(&flat[NUM_TASKS..]);
    Ok(out)
}

/// Batch objective for `spec.mode`. `log_var` must hold exactly the mode's
/// uncertainty parameters (0, 8 or 16 values).
pub fn batch_objective(
    spec: &LossSpec,
    labels: &[TaskLabels],
    outputs: &[TaskProbs],
    groups: &[Group],
    log_var: &[f64],
) -> Result<f64> {
    let expected = spec.mode.num_uncertainty_params();
    if log_var.len() != expected {
        return Err(Error::Shape(format!(
            "{} mode takes {expected} uncertainty parameters, got {}",
            spec.mode.name(),
            log_var.len()
        )));
    }
    match spec.mode {
        LossMode::Unitask { task } => {
            check_task(task)?;
            Ok(task_losses(labels, outputs, spec.epsilon_q)?[task])
        }
        LossMode::Mtl => Ok(mtl_loss(
            &task_losses(labels, outputs, spec.epsilon_q)?,
            &spec.task_weights,
        )),
        LossMode::Uw => {
            let s: [f64; NUM_TASKS] = log_var.try_into().expect("length checked");
            Ok(uw_loss(&task_losses(labels, outputs, spec.epsilon_q)?, &s))
        }
        LossMode::UFair => {
            let gl = group_task_losses(labels, outputs, groups, spec.epsilon_q)?;
            ufair_loss(&gl.losses, &group_log_vars(log_var)?, gl.present)
        }
    }
}
