//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::{fd_batch, fd_params, max_fd_relative_error, ALL_MODES};
use phqfair::analysis::{markings, spearman, Mark, DC_REFERENCE};
use phqfair::eval::{self, fairness_ratios, pareto_frontier, LabeledPrediction, ParetoPoint, Ratio};
use phqfair::losses::{batch_objective, LossMode, LossSpec, TaskLabels};
use phqfair::net;
use phqfair::phq::{self, Group, ParticipantRecord, ScoreVector};
use phqfair::synth::{self, CohortConfig};
use phqfair::train::{self, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ------------------------------------------------------------- gradients

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    for mode in ALL_MODES {
        let batch = fd_batch(11);
        let params = fd_params(mode, 11);
        let (err, idx) = max_fd_relative_error(&params, &batch, &LossSpec::new(mode), 1e-5);
        if err >= worst.0 {
            worst = (err, format!("{} param {idx}", mode.name()));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst.0 < 1e-4 && secs < 10.0,
        format!("max relative error {:.3e} ({}), {secs:.2}s", worst.0, worst.1),
    )
}

// -------------------------------------------------------------- identities

fn random_outputs(rng: &mut ChaCha8Rng, n: usize) -> Vec<[[f64; 4]; 8]> {
    (0..n)
        .map(|_| {
            std::array::from_fn(|_| {
                let z: [f64; 4] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
                let e = z.map(f64::exp);
                let s: f64 = e.iter().sum();
                e.map(|v| v / s)
            })
        })
        .collect()
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..10);
        let scores: Vec<ScoreVector> = (0..n)
            .map(|_| ScoreVector::new(std::array::from_fn(|_| rng.random_range(0..4))).unwrap())
            .collect();
        let labels: Vec<TaskLabels> = scores.iter().map(|s| phq::soft_labels(s, 0.5).unwrap()).collect();
        let outputs = random_outputs(&mut rng, n);
        let groups: Vec<Group> = (0..n).map(|_| Group::from_index(rng.random_range(0..2)).unwrap()).collect();

        let mtl = batch_objective(&LossSpec::new(LossMode::Mtl), &labels, &outputs, &groups, &[]).unwrap();
        let uw0 = batch_objective(&LossSpec::new(LossMode::Uw), &labels, &outputs, &groups, &[0.0; 8]).unwrap();
        worst = worst.max((mtl - uw0).abs());

        let s: [f64; 8] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
        let uw = batch_objective(&LossSpec::new(LossMode::Uw), &labels, &outputs, &groups, &s).unwrap();
        let mut dup_labels = labels.clone();
        dup_labels.extend(labels.iter().cloned());
        let mut dup_outputs = outputs.clone();
        dup_outputs.extend(outputs.iter().cloned());
        let dup_groups: Vec<Group> = std::iter::repeat_n(Group::S0, n).chain(std::iter::repeat_n(Group::S1, n)).collect();
        let mut s16 = [0.0; 16];
        s16[..8].copy_from_slice(&s);
        s16[8..].copy_from_slice(&s);
        let uf = batch_objective(&LossSpec::new(LossMode::UFair), &dup_labels, &dup_outputs, &dup_groups, &s16).unwrap();
        worst = worst.max((uf - uw).abs());

        for task in 0..8 {
            let mut one_hot = LossSpec::new(LossMode::Mtl);
            one_hot.task_weights = std::array::from_fn(|t| if t == task { 1.0 } else { 0.0 });
            let a = batch_objective(&one_hot, &labels, &outputs, &groups, &[]).unwrap();
            let b = batch_objective(&LossSpec::new(LossMode::Unitask { task }), &labels, &outputs, &groups, &[]).unwrap();
            worst = worst.max((a - b).abs());
        }
    }
    check(worst <= 1e-12, format!("max deviation {worst:.3e} over 200 random batches"))
}

// ------------------------------------------------------------- aggregation

fn aggregation_oracle() -> Outcome {
    let start = Instant::now();
    let mut mismatches = 0usize;
    for code in 0u32..65_536 {
        let digits: [u8; 8] = std::array::from_fn(|i| ((code >> (2 * i)) & 3) as u8);
        let naive_ts: u32 = (0..8).map(|i| (code >> (2 * i)) & 3).sum();
        let naive_y = u8::from(naive_ts >= 10);
        let sv = ScoreVector::new(digits).unwrap();
        let out = phq::BinaryOutcome::from_scores(&sv);
        if phq::total_score(&sv) != naive_ts || out.ts != naive_ts || out.y_hat != naive_y
            || phq::binary_outcome(naive_ts).unwrap() != naive_y
        {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        mismatches == 0 && secs < 5.0,
        format!("{mismatches} mismatches over 65536 vectors, {secs:.3}s"),
    )
}

// ---------------------------------------------------------------- fairness

/// Counting oracle: ratio of per-group rates with 0/0 = 1 and x/0 undefined.
fn naive_ratio(preds: &[LabeledPrediction], cond: impl Fn(&LabeledPrediction) -> bool, event: impl Fn(&LabeledPrediction) -> bool) -> Option<f64> {
    let rate = |g: Group| {
        let pool: Vec<_> = preds.iter().filter(|p| p.group == g && cond(p)).collect();
        if pool.is_empty() {
            return None;
        }
        Some(pool.iter().filter(|p| event(p)).count() as f64 / pool.len() as f64)
    };
    let (r0, r1) = (rate(Group::S0)?, rate(Group::S1)?);
    if r1 == 0.0 {
        return if r0 == 0.0 { Some(1.0) } else { None };
    }
    Some(r0 / r1)
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= 1e-12 * x.abs().max(1.0),
        (None, None) => true,
        _ => false,
    }
}

fn fairness_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut mismatches, mut swap_failures, mut defined) = (0, 0, 0);
    let mut sets = 0;
    while sets < 1000 {
        let n = rng.random_range(2..200);
        let p_s0 = rng.random_range(0.05..0.95);
        let p_y = rng.random_range(0.0..1.0);
        let p_hat = rng.random_range(0.0..1.0);
        let preds: Vec<LabeledPrediction> = (0..n)
            .map(|_| LabeledPrediction {
                group: if rng.random_bool(p_s0) { Group::S0 } else { Group::S1 },
                y_true: rng.random_bool(p_y),
                y_hat: rng.random_bool(p_hat),
            })
            .collect();
        let Ok(rep) = fairness_ratios(&preds) else {
            continue; // a group is missing; regenerate
        };
        sets += 1;
        let sp = naive_ratio(&preds, |_| true, |p| p.y_hat);
        let eopp = naive_ratio(&preds, |p| p.y_true, |p| p.y_hat);
        let fpr = naive_ratio(&preds, |p| !p.y_true, |p| p.y_hat);
        let eodd = match (eopp, fpr) {
            (Some(a), Some(b)) => Some((a * b).sqrt()),
            _ => None,
        };
        let eacc = naive_ratio(&preds, |_| true, |p| p.y_true == p.y_hat);
        for (got, want) in [
            (rep.m_sp.raw, sp),
            (rep.m_eopp.raw, eopp),
            (rep.m_eodd.raw, eodd),
            (rep.m_eacc.raw, eacc),
        ] {
            if !close(got.value(), want) {
                mismatches += 1;
            }
        }
        let swapped: Vec<LabeledPrediction> =
            preds.iter().map(|p| LabeledPrediction { group: p.group.other(), ..*p }).collect();
        let srep = fairness_ratios(&swapped).unwrap();
        for m in eval::FairnessMetric::ALL {
            if let Ratio::Defined(r) = rep.measure(m).raw {
                if r > 0.0 {
                    defined += 1;
                    if !close(srep.measure(m).raw.value(), Some(1.0 / r)) {
                        swap_failures += 1;
                    }
                }
            }
        }
    }
    check(
        mismatches == 0 && swap_failures == 0,
        format!("1000 sets: {mismatches} oracle mismatches, {swap_failures}/{defined} swap failures"),
    )
}

// ------------------------------------------------------------------ pareto

fn brute_frontier(points: &[ParetoPoint]) -> Vec<(String, u64, u64)> {
    let mut out: Vec<(String, u64, u64)> = points
        .iter()
        .filter(|p| {
            !points.iter().any(|q| {
                q.accuracy >= p.accuracy
                    && q.fairness_norm >= p.fairness_norm
                    && (q.accuracy > p.accuracy || q.fairness_norm > p.fairness_norm)
            })
        })
        .map(|p| (p.method_id.clone(), p.accuracy.to_bits(), p.fairness_norm.to_bits()))
        .collect();
    out.sort();
    out
}

fn pareto_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut mismatches = 0;
    for set in 0..1000 {
        let n = rng.random_range(1..=200);
        // half the sets on a coarse grid so ties and duplicates occur
        let grid = set % 2 == 0;
        let coord = |rng: &mut ChaCha8Rng| {
            if grid {
                rng.random_range(0..=20) as f64 / 20.0
            } else {
                rng.random_range(0.0..=1.0)
            }
        };
        let points: Vec<ParetoPoint> = (0..n)
            .map(|i| {
                let (a, f) = (coord(&mut rng), coord(&mut rng));
                ParetoPoint::new(format!("m{i}"), a, f)
            })
            .collect();
        let fast = pareto_frontier(&points).unwrap();
        let sorted_desc = fast.windows(2).all(|w| w[0].accuracy >= w[1].accuracy);
        let mut got: Vec<(String, u64, u64)> = fast
            .iter()
            .map(|p| (p.method_id.clone(), p.accuracy.to_bits(), p.fairness_norm.to_bits()))
            .collect();
        got.sort();
        if got != brute_frontier(&points) || !sorted_desc {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("{mismatches} mismatching sets out of 1000 (n <= 200)"))
}

// ---------------------------------------------------------------- spearman

fn marked(values: &[f64], mark: Mark) -> Vec<usize> {
    markings(values)
        .iter()
        .enumerate()
        .filter(|(_, &m)| m == mark)
        .map(|(i, _)| i + 1)
        .collect()
}

fn reference_rank_agreement() -> Outcome {
    let columns: [(&str, [f64; 8], f64, [usize; 3], [usize; 2]); 4] = [
        ("DW-F", [1.50, 1.41, 0.62, 0.82, 0.61, 0.73, 0.75, 1.58], 0.5238095238095238, [1, 2, 8], [3, 5]),
        ("DW-M", [1.41, 1.47, 0.64, 0.68, 0.69, 0.59, 0.80, 1.72], 0.2619047619047619, [1, 2, 8], [3, 6]),
        ("ED-F", [1.69, 1.38, 0.51, 0.91, 0.51, 0.63, 0.61, 1.69], 0.6386005678432408, [1, 2, 8], [3, 5]),
        ("ED-M", [1.69, 1.41, 0.58, 0.60, 0.58, 0.60, 0.89, 1.70], 0.5301589619830679, [1, 2, 8], [3, 5]),
    ];
    let mut problems = Vec::new();
    if marked(&DC_REFERENCE, Mark::Top) != [1, 2, 6] || marked(&DC_REFERENCE, Mark::Bottom) != [3, 5] {
        problems.push("DC markings".to_string());
    }
    let mut rhos = Vec::new();
    for (name, col, golden, top, bottom) in columns {
        let rho = spearman(&DC_REFERENCE, &col).unwrap().unwrap();
        rhos.push(format!("{name} {rho:.6}"));
        if (rho - golden).abs() > 1e-9 {
            problems.push(format!("{name} rho {rho} vs {golden}"));
        }
        if marked(&col, Mark::Top) != top || marked(&col, Mark::Bottom) != bottom {
            problems.push(format!("{name} markings"));
        }
    }
    let detail = format!("rho: {}; markings for DC + 4 columns", rhos.join(", "));
    if problems.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; problems: {}", problems.join("; ")))
    }
}

// ------------------------------------------------------------- convergence

fn labeled(params: &net::ModelParams, records: &[ParticipantRecord]) -> Vec<LabeledPrediction> {
    let preds = train::predict(params, records).unwrap();
    eval::label_predictions(&preds, records).unwrap()
}

fn convergence() -> Outcome {
    let start = Instant::now();
    let cohort = synth::generate_cohort(&CohortConfig::separable_toy(0)).unwrap();
    let (tr, va, _) = cohort.split(0.7, 0.15, 0).unwrap();
    let mut cfg = TrainConfig::new(LossMode::Mtl);
    cfg.lr = 1e-3;
    cfg.max_epochs = 150;
    let m = train::train(&tr.records, &va.records, &cfg).unwrap();
    let first = m.trace.epochs[0].train_loss;
    let last = net::batch_loss(&m.params, &tr.records, &cfg.loss_spec).unwrap();
    let acc = eval::performance_metrics(&labeled(&m.params, &tr.records)).unwrap().accuracy;
    let secs = start.elapsed().as_secs_f64();
    let ratio = last / first;
    check(
        ratio < 0.10 && acc > 0.9 && secs < 120.0 && m.trace.epochs.len() <= 150,
        format!(
            "n=200, lr 1e-3: loss {first:.4} -> {last:.4} ({:.1}%), train accuracy {acc:.3}, {} epochs, {secs:.1}s",
            100.0 * ratio,
            m.trace.epochs.len()
        ),
    )
}

// ------------------------------------------------------------- directional

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn directional_fairness() -> Outcome {
    let start = Instant::now();
    let mut gaps: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut undefined = 0;
    for seed in 0..10u64 {
        let cohort = synth::generate_cohort(&CohortConfig::bias_injected(seed)).unwrap();
        let (tr, va, te) = cohort.split(0.7, 0.15, seed).unwrap();
        for mode in [LossMode::Mtl, LossMode::UFair] {
            let mut cfg = TrainConfig::new(mode);
            cfg.seed = seed;
            let m = train::train(&tr.records, &va.records, &cfg).unwrap();
            let rep = fairness_ratios(&labeled(&m.params, &te.records)).unwrap();
            match rep.m_eacc.raw.value() {
                Some(r) => gaps.entry(mode.name()).or_default().push((1.0 - r).abs()),
                None => undefined += 1,
            }
        }
    }
    let mtl = median(gaps.get_mut("mtl").map(Vec::as_mut_slice).unwrap_or_default());
    let uf = median(gaps.get_mut("ufair").map(Vec::as_mut_slice).unwrap_or_default());
    check(
        uf <= mtl && undefined == 0,
        format!(
            "median |1 - M_EAcc| over 10 seeds: ufair {uf:.4} vs mtl {mtl:.4} ({undefined} undefined), {:.0}s",
            start.elapsed().as_secs_f64()
        ),
    )
}

// ------------------------------------------------------------- determinism

fn run_pipeline(dir: &Path) -> Result<(), String> {
    let steps: &[&[&str]] = &[
        &["generate", "--preset", "biased", "--n", "300", "--seed", "5", "--out", "cohort.jsonl"],
        &["train", "--dataset", "cohort.jsonl", "--mode", "mtl", "--max-epochs", "15", "--out", "mtl"],
        &["train", "--dataset", "cohort.jsonl", "--mode", "ufair", "--max-epochs", "15", "--out", "ufair"],
        &["train", "--dataset", "cohort.jsonl", "--mode", "unitask", "--max-epochs", "5", "--out", "unitask"],
        &["evaluate", "--checkpoint", "mtl"],
        &["evaluate", "--checkpoint", "ufair"],
        &["evaluate", "--checkpoint", "unitask"],
        &["compare", "mtl", "ufair", "unitask", "--out", "cmp"],
        &["analyze", "--checkpoint", "ufair"],
    ];
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_phqfair"))
            .current_dir(dir)
            .args(*args)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect_files(root, &path, out);
        } else {
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            out.insert(rel, std::fs::read(&path).unwrap());
        }
    }
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_pipeline(a.path())?;
    run_pipeline(b.path())?;
    let (mut fa, mut fb) = (BTreeMap::new(), BTreeMap::new());
    collect_files(a.path(), a.path(), &mut fa);
    collect_files(b.path(), b.path(), &mut fb);
    let names_match = fa.keys().eq(fb.keys());
    let differing: Vec<&String> = fa.iter().filter(|(k, v)| fb.get(*k) != Some(v)).map(|(k, _)| k).collect();
    check(
        names_match && differing.is_empty() && fa.len() > 20,
        format!("{} files compared across two full runs, {} differ {:?}", fa.len(), differing.len(), differing),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient fidelity", gradient_fidelity),
        ("loss identities", loss_identities),
        ("aggregation oracle", aggregation_oracle),
        ("fairness metric oracle", fairness_oracle),
        ("pareto oracle", pareto_oracle),
        ("reference rank agreement (spearman, markings)", reference_rank_agreement),
        ("end-to-end convergence", convergence),
        ("directional fairness", directional_fairness),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
