//! Attention-based late-fusion multitask network with hand-written
//! reverse-mode gradients and an Adam optimizer.
//!
//! Per record:
//!
//! ```text
//! h_m      = tanh(W_m x_m + b_m)                 m ∈ {audio, visual, text}
//! e_{t,m}  = a_t · h_m                           one scoring vector per task
//! α_t      = softmax_m(e_{t,m})
//! z_t      = Σ_m α_{t,m} h_m
//! q_t      = softmax(V_t z_t + c_t)              4 score classes
//! ```
//!
//! All parameters live in one flat `Vec<f64>`; [`ParamLayout`] maps named
//! blocks onto it. Uncertainty parameters `s = log σ²` come last: none for
//! unitask/MTL, 8 for UW, 16 (group-major) for U-Fair.

use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, ClassProbs, LossMode, LossSpec, TaskLabels, TaskProbs};
use crate::phq::{self, Group, ParticipantRecord, NUM_CLASSES, NUM_MODALITIES, NUM_TASKS};

pub const DEFAULT_HIDDEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Uncertainty {
    None,
    PerTask,
    PerTaskGroup,
}

impl Uncertainty {
    pub fn for_mode(mode: LossMode) -> Self {
        match mode {
            LossMode::Unitask { .. } | LossMode::Mtl => Uncertainty::None,
            LossMode::Uw => Uncertainty::PerTask,
            LossMode::UFair => Uncertainty::PerTaskGroup,
        }
    }

    pub fn count(self) -> usize {
        match self {
            Uncertainty::None => 0,
            Uncertainty::PerTask => NUM_TASKS,
            Uncertainty::PerTaskGroup => 2 * NUM_TASKS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub feature_dims: [usize; NUM_MODALITIES],
    pub hidden: usize,
    pub uncertainty: Uncertainty,
}

impl NetConfig {
    pub fn new(feature_dims: [usize; NUM_MODALITIES], hidden: usize, mode: LossMode) -> Self {
        NetConfig {
            feature_dims,
            hidden,
            uncertainty: Uncertainty::for_mode(mode),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.feature_dims.contains(&0) {
            return Err(Error::Config(format!(
                "network dimensions must be positive: features {:?}, hidden {}",
                self.feature_dims, self.hidden
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self)
    }
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub enc_w: [Range<usize>; NUM_MODALITIES],
    pub enc_b: [Range<usize>; NUM_MODALITIES],
    pub attn: [Range<usize>; NUM_TASKS],
    pub head_w: [Range<usize>; NUM_TASKS],
    pub head_b: [Range<usize>; NUM_TASKS],
    pub uncertainty: Range<usize>,
    pub len: usize,
}

impl ParamLayout {
    fn new(cfg: &NetConfig) -> Self {
        let h = cfg.hidden;
        let mut cursor = 0;
        let mut take = |n: usize| {
            let r = cursor..cursor + n;
            cursor += n;
            r
        };
        let enc_w = std::array::from_fn(|m| take(h * cfg.feature_dims[m]));
        let enc_b = std::array::from_fn(|_| take(h));
        let attn = std::array::from_fn(|_| take(h));
        let head_w = std::array::from_fn(|_| take(NUM_CLASSES * h));
        let head_b = std::array::from_fn(|_| take(NUM_CLASSES));
        let uncertainty = take(cfg.uncertainty.count());
        let len = uncertainty.end;
        ParamLayout {
            enc_w,
            enc_b,
            attn,
            head_w,
            head_b,
            uncertainty,
            len,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: NetConfig,
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(config: NetConfig) -> Self {
        let len = config.layout().len;
        ModelParams {
            config,
            values: vec![0.0; len],
        }
    }

    /// Weights uniform in `±1/√fan_in`, biases and log-variances zero.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let mut p = ModelParams::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let mut fill = |vals: &mut [f64], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in vals {
                *v = rng.random_range(-bound..bound);
            }
        };
        for m in 0..NUM_MODALITIES {
            fill(&mut p.values[layout.enc_w[m].clone()], config.feature_dims[m]);
        }
        for t in 0..NUM_TASKS {
            fill(&mut p.values[layout.attn[t].clone()], config.hidden);
            fill(&mut p.values[layout.head_w[t].clone()], config.hidden);
        }
        Ok(p)
    }

    pub fn layout(&self) -> ParamLayout {
        self.config.layout()
    }

    pub fn uncertainty(&self) -> &[f64] {
        &self.values[self.layout().uncertainty]
    }

    pub fn uncertainty_mut(&mut self) -> &mut [f64] {
        let r = self.layout().uncertainty;
        &mut self.values[r]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_record(&self, record: &ParticipantRecord) -> Result<()> {
        let dims = record.feature_dims();
        if dims != self.config.feature_dims {
            return Err(Error::Config(format!(
                "record {} has feature dims {dims:?}, model expects {:?}",
                record.id, self.config.feature_dims
            )));
        }
        Ok(())
    }
}

/// Per-task class probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadOutput {
    pub q: TaskProbs,
}

impl HeadOutput {
    /// Argmax per task, ties to the lowest class index.
    pub fn argmax_scores(&self) -> [u8; NUM_TASKS] {
        self.q.map(|probs| {
            let mut best = 0;
            for k in 1..NUM_CLASSES {
                if probs[k] > probs[best] {
                    best = k;
                }
            }
            best as u8
        })
    }
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub hidden: [Vec<f64>; NUM_MODALITIES],
    pub attention: [[f64; NUM_MODALITIES]; NUM_TASKS],
    pub fused: [Vec<f64>; NUM_TASKS],
    pub output: HeadOutput,
}

fn softmax<const N: usize>(x: &[f64; N]) -> [f64; N] {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = x.map(|v| (v - max).exp());
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn forward_trace(params: &ModelParams, record: &ParticipantRecord) -> Result<ForwardTrace> {
    params.check_record(record)?;
    let layout = params.layout();
    let h = params.config.hidden;
    let w = &params.values;
    let inputs = record.modalities();

    let hidden: [Vec<f64>; NUM_MODALITIES] = std::array::from_fn(|m| {
        let x = inputs[m];
        let d = x.len();
        let wm = &w[layout.enc_w[m].clone()];
        let bm = &w[layout.enc_b[m].clone()];
        (0..h)
            .map(|i| (dot(&wm[i * d..(i + 1) * d], x) + bm[i]).tanh())
            .collect()
    });

    let mut attention = [[0.0; NUM_MODALITIES]; NUM_TASKS];
    let mut fused: [Vec<f64>; NUM_TASKS] = std::array::from_fn(|_| vec![0.0; h]);
    let mut q = [[0.0; NUM_CLASSES]; NUM_TASKS];
    for t in 0..NUM_TASKS {
        let a = &w[layout.attn[t].clone()];
        let scores: [f64; NUM_MODALITIES] = std::array::from_fn(|m| dot(a, &hidden[m]));
        let alpha = softmax(&scores);
        let z = &mut fused[t];
        for m in 0..NUM_MODALITIES {
            for (zi, hi) in z.iter_mut().zip(&hidden[m]) {
                *zi += alpha[m] * hi;
            }
        }
        let vw = &w[layout.head_w[t].clone()];
        let vb = &w[layout.head_b[t].clone()];
        let logits: [f64; NUM_CLASSES] =
            std::array::from_fn(|k| dot(&vw[k * h..(k + 1) * h], z) + vb[k]);
        attention[t] = alpha;
        q[t] = softmax(&logits);
    }
    if q.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite head output for record {}",
            record.id
        )));
    }
    Ok(ForwardTrace {
        hidden,
        attention,
        fused,
        output: HeadOutput { q },
    })
}

pub fn forward(params: &ModelParams, record: &ParticipantRecord) -> Result<HeadOutput> {
    forward_trace(params, record).map(|t| t.output)
}

fn check_mode(params: &ModelParams, spec: &LossSpec) -> Result<()> {
    let want = Uncertainty::for_mode(spec.mode);
    if params.config.uncertainty != want {
        return Err(Error::Mode(format!(
            "{} loss needs {want:?} uncertainty parameters, model has {:?}",
            spec.mode.name(),
            params.config.uncertainty
        )));
    }
    Ok(())
}

/// Objective value on a batch, forward pass only.
pub fn batch_loss(params: &ModelParams, batch: &[ParticipantRecord], spec: &LossSpec) -> Result<f64> {
    check_mode(params, spec)?;
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut labels = Vec::with_capacity(batch.len());
    let mut outputs = Vec::with_capacity(batch.len());
    for r in batch {
        labels.push(phq::soft_labels(&r.scores, spec.sigma_g)?);
        outputs.push(forward(params, r)?.q);
    }
    let groups: Vec<Group> = batch.iter().map(|r| r.group).collect();
    losses::batch_objective(spec, &labels, &outputs, &groups, params.uncertainty())
}

/// d KL(p ‖ clamp(q)) / d q, zero on clamped components.
fn kl_grad_wrt_q(p: &phq::SoftLabel, q: &ClassProbs, eps: f64) -> ClassProbs {
    let c = q.map(|v| v.max(eps));
    let s: f64 = c.iter().sum();
    std::array::from_fn(|k| {
        if q[k] > eps {
            -p.0[k] / c[k] + 1.0 / s
        } else {
            0.0
        }
    })
}

/// Batch loss and its gradient with respect to every parameter.
pub fn backward(
    params: &ModelParams,
    batch: &[ParticipantRecord],
    spec: &LossSpec,
) -> Result<(f64, ModelParams)> {
    check_mode(params, spec)?;
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let layout = params.layout();
    let h = params.config.hidden;
    let w = &params.values;
    let n = batch.len();

    let mut traces = Vec::with_capacity(n);
    let mut labels: Vec<TaskLabels> = Vec::with_capacity(n);
    for r in batch {
        traces.push(forward_trace(params, r)?);
        labels.push(phq::soft_labels(&r.scores, spec.sigma_g)?);
    }
    let outputs: Vec<TaskProbs> = traces.iter().map(|t| t.output.q).collect();
    let groups: Vec<Group> = batch.iter().map(|r| r.group).collect();
    let s = params.uncertainty();
    let loss = losses::batch_objective(spec, &labels, &outputs, &groups, s)?;

    let mut grad = ModelParams::zeros(params.config);
    let g = &mut grad.values;

    // dLoss/dKL_{i,t} for each record and task, plus uncertainty gradients
    let mut coef = vec![[0.0; NUM_TASKS]; n];
    match spec.mode {
        LossMode::Unitask { task } => {
            for c in coef.iter_mut() {
                c[task] = 1.0 / n as f64;
            }
        }
        LossMode::Mtl => {
            for c in coef.iter_mut() {
                *c = spec.task_weights.map(|wt| wt / n as f64);
            }
        }
        LossMode::Uw => {
            let per_task = losses::task_losses(&labels, &outputs, spec.epsilon_q)?;
            let weights: [f64; NUM_TASKS] = std::array::from_fn(|t| (-s[t]).exp());
            for c in coef.iter_mut() {
                *c = weights.map(|wt| wt / n as f64);
            }
            let us = layout.uncertainty.start;
            for t in 0..NUM_TASKS {
                g[us + t] = -weights[t] * per_task[t] + 0.5;
            }
        }
        LossMode::UFair => {
            let gl = losses::group_task_losses(&labels, &outputs, &groups, spec.epsilon_q)?;
            let mut counts = [0usize; 2];
            groups.iter().for_each(|gr| counts[gr.index()] += 1);
            let present = gl.present.iter().filter(|&&p| p).count() as f64;
            for (c, gr) in coef.iter_mut().zip(&groups) {
                let gi = gr.index();
                *c = std::array::from_fn(|t| {
                    (-s[gi * NUM_TASKS + t]).exp() / (present * counts[gi] as f64)
                });
            }
            let us = layout.uncertainty.start;
            for gi in 0..2 {
                if !gl.present[gi] {
                    continue;
                }
                for t in 0..NUM_TASKS {
                    let sv = s[gi * NUM_TASKS + t];
                    g[us + gi * NUM_TASKS + t] =
                        (-(-sv).exp() * gl.losses[gi][t] + 0.5) / present;
                }
            }
        }
    }

    let mut d_hidden: [Vec<f64>; NUM_MODALITIES] = std::array::from_fn(|_| vec![0.0; h]);
    let mut dz = vec![0.0; h];
    for (i, (record, tr)) in batch.iter().zip(&traces).enumerate() {
        d_hidden.iter_mut().for_each(|v| v.iter_mut().for_each(|x| *x = 0.0));
        for t in 0..NUM_TASKS {
            let ct = coef[i][t];
            if ct == 0.0 {
                continue;
            }
            let q = &tr.output.q[t];
            let gq = kl_grad_wrt_q(&labels[i][t], q, spec.epsilon_q);
            let mean: f64 = q.iter().zip(&gq).map(|(a, b)| a * b).sum();
            let dlogit: [f64; NUM_CLASSES] = std::array::from_fn(|k| ct * q[k] * (gq[k] - mean));

            let z = &tr.fused[t];
            let hw = layout.head_w[t].clone();
            let hb = layout.head_b[t].start;
            dz.iter_mut().for_each(|x| *x = 0.0);
            for k in 0..NUM_CLASSES {
                let row = hw.start + k * h;
                for j in 0..h {
                    g[row + j] += dlogit[k] * z[j];
                    dz[j] += w[row + j] * dlogit[k];
                }
                g[hb + k] += dlogit[k];
            }

            let alpha = &tr.attention[t];
            let dalpha: [f64; NUM_MODALITIES] = std::array::from_fn(|m| dot(&dz, &tr.hidden[m]));
            let amean: f64 = alpha.iter().zip(&dalpha).map(|(a, b)| a * b).sum();
            let a_range = layout.attn[t].clone();
            for m in 0..NUM_MODALITIES {
                let de = alpha[m] * (dalpha[m] - amean);
                let hm = &tr.hidden[m];
                for j in 0..h {
                    g[a_range.start + j] += de * hm[j];
                    d_hidden[m][j] += alpha[m] * dz[j] + de * w[a_range.start + j];
                }
            }
        }

        let inputs = record.modalities();
        for m in 0..NUM_MODALITIES {
            let x = inputs[m];
            let d = x.len();
            let ew = layout.enc_w[m].start;
            let eb = layout.enc_b[m].start;
            for j in 0..h {
                let hv = tr.hidden[m][j];
                let dpre = d_hidden[m][j] * (1.0 - hv * hv);
                if dpre == 0.0 {
                    continue;
                }
                g[eb + j] += dpre;
                let row = ew + j * d;
                for (gk, xk) in g[row..row + d].iter_mut().zip(x) {
                    *gk += dpre * xk;
                }
            }
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.0002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        OptimizerState {
            config,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut OptimizerState) -> Result<()> {
    let n = params.values.len();
    if grads.values.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Shape(format!(
            "adam: params {n}, grads {}, moments {}/{}",
            grads.values.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for i in 0..n {
        let gi = grads.values[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * gi;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * gi * gi;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params.values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

pub const CHECKPOINT_FORMAT: &str = "phqfair-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One trained network inside a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub loss_spec: LossSpec,
    pub net: NetConfig,
    pub params: Vec<f64>,
    pub optimizer: OptimizerState,
}

impl ModelEntry {
    pub fn new(params: &ModelParams, loss_spec: LossSpec, optimizer: OptimizerState) -> Self {
        ModelEntry {
            loss_spec,
            net: params.config,
            params: params.values.clone(),
            optimizer,
        }
    }

    pub fn model_params(&self) -> Result<ModelParams> {
        let len = self.net.layout().len;
        if self.params.len() != len {
            return Err(Error::Shape(format!(
                "checkpoint holds {} parameters, layout needs {len}",
                self.params.len()
            )));
        }
        Ok(ModelParams {
            config: self.net,
            values: self.params.clone(),
        })
    }
}

/// Checkpoint file. Unitask runs store eight entries (one per task), every
/// other mode stores one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub manifest_hash: String,
    pub dataset_hash: String,
    pub models: Vec<ModelEntry>,
}

impl Checkpoint {
    pub fn new(manifest_hash: String, dataset_hash: String, models: Vec<ModelEntry>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            manifest_hash,
            dataset_hash,
            models,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        for m in &ck.models {
            m.model_params()?;
        }
        Ok(ck)
    }
}
