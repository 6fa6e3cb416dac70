#![allow(dead_code)]

use phqfair::losses::{LossMode, LossSpec};
use phqfair::net::{self, ModelParams, NetConfig};
use phqfair::phq::{Group, ParticipantRecord, ScoreVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ALL_MODES: [LossMode; 4] = [
    LossMode::Unitask { task: 5 },
    LossMode::Mtl,
    LossMode::Uw,
    LossMode::UFair,
];

pub fn random_record(rng: &mut ChaCha8Rng, id: usize, group: Group, dims: [usize; 3]) -> ParticipantRecord {
    let mut scores = [0u8; 8];
    scores.iter_mut().for_each(|s| *s = rng.random_range(0..4));
    let mut feat = |d: usize| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect::<Vec<f64>>();
    let audio = feat(dims[0]);
    let visual = feat(dims[1]);
    let text = feat(dims[2]);
    ParticipantRecord {
        id: format!("r{id}"),
        group,
        scores: ScoreVector::new(scores).unwrap(),
        audio,
        visual,
        text,
    }
}

/// Four records (groups s0, s1, s0, s1) with d_m = 5.
pub fn fd_batch(seed: u64) -> Vec<ParticipantRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = [Group::S0, Group::S1, Group::S0, Group::S1];
    groups
        .iter()
        .enumerate()
        .map(|(i, &g)| random_record(&mut rng, i, g, [5, 5, 5]))
        .collect()
}

/// d_h = 6 model with weights spread wider than the default init and
/// non-zero log-variances.
pub fn fd_params(mode: LossMode, seed: u64) -> ModelParams {
    let cfg = NetConfig::new([5, 5, 5], 6, mode);
    let mut p = ModelParams::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let unc = p.layout().uncertainty;
    for (i, v) in p.values.iter_mut().enumerate() {
        if unc.contains(&i) {
            *v = rng.random_range(-0.8..0.8);
        } else {
            *v = *v * 2.0 + rng.random_range(-0.2..0.2);
        }
    }
    p
}

/// Max relative error between analytic and central-difference gradients.
/// The denominator is floored at 1e-6 so exactly-zero gradients compare
/// on absolute error.
pub fn max_fd_relative_error(params: &ModelParams, batch: &[ParticipantRecord], spec: &LossSpec, h: f64) -> (f64, usize) {
    let (_, grad) = net::backward(params, batch, spec).unwrap();
    let mut worst = (0.0, 0);
    let mut p = params.clone();
    for i in 0..p.values.len() {
        let orig = p.values[i];
        p.values[i] = orig + h;
        let up = net::batch_loss(&p, batch, spec).unwrap();
        p.values[i] = orig - h;
        let down = net::batch_loss(&p, batch, spec).unwrap();
        p.values[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let a = grad.values[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    worst
}
