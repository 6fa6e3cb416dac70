mod common;

use common::*;
use phqfair::losses::{self, LossMode, LossSpec};
use phqfair::net;
use phqfair::phq::{self, Group};

#[test]
fn analytic_gradients_match_central_differences() {
    for mode in ALL_MODES {
        for seed in [1, 2, 3] {
            let batch = fd_batch(seed);
            let params = fd_params(mode, seed);
            let spec = LossSpec::new(mode);
            let (err, idx) = max_fd_relative_error(&params, &batch, &spec, 1e-5);
            assert!(err < 1e-4, "{mode:?} seed {seed}: rel err {err} at param {idx}");
        }
    }
}

#[test]
fn every_unitask_head_checks_out() {
    let batch = fd_batch(7);
    for task in 0..8 {
        let mode = LossMode::Unitask { task };
        let (err, idx) = max_fd_relative_error(&fd_params(mode, 7), &batch, &LossSpec::new(mode), 1e-5);
        assert!(err < 1e-4, "task {task}: {err} at {idx}");
    }
}

#[test]
fn ufair_gradient_with_one_group_absent() {
    let batch: Vec<_> = fd_batch(4).into_iter().filter(|r| r.group == Group::S1).collect();
    let params = fd_params(LossMode::UFair, 4);
    let spec = LossSpec::new(LossMode::UFair);
    let (err, _) = max_fd_relative_error(&params, &batch, &spec, 1e-5);
    assert!(err < 1e-4);
    // absent group's log-variances get no gradient
    let (_, g) = net::backward(&params, &batch, &spec).unwrap();
    let us = params.layout().uncertainty.start;
    assert!(g.values[us..us + 8].iter().all(|&v| v == 0.0));
}

#[test]
fn mtl_with_custom_weights() {
    let batch = fd_batch(5);
    let mut spec = LossSpec::new(LossMode::Mtl);
    spec.task_weights = [0.5, 2.0, 0.0, 1.0, 3.0, 0.1, 1.0, 0.7];
    let (err, _) = max_fd_relative_error(&fd_params(LossMode::Mtl, 5), &batch, &spec, 1e-5);
    assert!(err < 1e-4);
}

#[test]
fn returned_loss_matches_forward_recomputation() {
    let batch = fd_batch(9);
    for mode in ALL_MODES {
        let params = fd_params(mode, 9);
        let spec = LossSpec::new(mode);
        let (loss, _) = net::backward(&params, &batch, &spec).unwrap();

        // recompute by hand from forward outputs
        let outs: Vec<_> = batch.iter().map(|r| net::forward(&params, r).unwrap().q).collect();
        let labels: Vec<_> = batch.iter().map(|r| phq::soft_labels(&r.scores, spec.sigma_g).unwrap()).collect();
        let s = params.uncertainty();
        let mut per_group = [[0.0; 8]; 2];
        let mut per_task = [0.0; 8];
        let mut counts = [0.0; 2];
        for ((r, o), l) in batch.iter().zip(&outs).zip(&labels) {
            counts[r.group.index()] += 1.0;
            for t in 0..8 {
                let kl = losses::kl_loss(&l[t], &o[t], spec.epsilon_q);
                per_task[t] += kl / batch.len() as f64;
                per_group[r.group.index()][t] += kl;
            }
        }
        let want = match mode {
            LossMode::Unitask { task } => per_task[task],
            LossMode::Mtl => per_task.iter().sum(),
            LossMode::Uw => (0..8).map(|t| (-s[t]).exp() * per_task[t] + s[t] / 2.0).sum(),
            LossMode::UFair => {
                let mut tot = 0.0;
                for g in 0..2 {
                    for t in 0..8 {
                        let st = s[g * 8 + t];
                        tot += (-st).exp() * per_group[g][t] / counts[g] + st / 2.0;
                    }
                }
                tot / 2.0
            }
        };
        assert!((loss - want).abs() < 1e-12, "{mode:?}: {loss} vs {want}");
        assert_eq!(loss, net::batch_loss(&params, &batch, &spec).unwrap());
    }
}
