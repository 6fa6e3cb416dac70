//! Seeded synthetic cohorts with group-conditioned PHQ-8 subscore
//! distributions, plus the JSON Lines dataset format.
//!
//! Every modality feature vector is a fixed random linear embedding of the
//! centred score vector, scaled by `signal_scale`, plus Gaussian noise whose
//! standard deviation depends on the participant's group. The noise level is
//! the knob for per-group aleatoric uncertainty.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`), seeded with
//! `seed_from_u64(seed)`. Stream 0 draws the embedding matrices, stream 1
//! draws participants, so the embedding does not depend on `n`.
//!
//! # File format
//!
//! Line 1 is a header object:
//! `{"format":"phqfair-cohort","version":1,"config_hash":"<hex>","n":<count>}`.
//! Each following line is one record:
//! `{"id":..,"group":"s0"|"s1","scores":[8 ints],"audio":[..],"visual":[..],"text":[..]}`.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::phq::{
    Group, ParticipantRecord, ScoreVector, NUM_CLASSES, NUM_MODALITIES, NUM_TASKS,
};

pub const DATASET_FORMAT: &str = "phqfair-cohort";
pub const DATASET_VERSION: u32 = 1;

/// Per-group, per-task categorical distribution over scores 0..=3.
pub type ScoreMarginals = [[[f64; NUM_CLASSES]; NUM_TASKS]; 2];

/// Default subscore marginals. Group s0 carries more mass on higher scores
/// for sleep, fatigue and appetite items. These are illustrative, not
/// estimates from any corpus.
pub const DEFAULT_MARGINALS: ScoreMarginals = [
    // s0
    [
        [0.38, 0.32, 0.18, 0.12],
        [0.38, 0.32, 0.18, 0.12],
        [0.25, 0.30, 0.25, 0.20],
        [0.20, 0.32, 0.26, 0.22],
        [0.32, 0.30, 0.22, 0.16],
        [0.40, 0.28, 0.18, 0.14],
        [0.42, 0.30, 0.16, 0.12],
        [0.60, 0.22, 0.11, 0.07],
    ],
    // s1
    [
        [0.40, 0.32, 0.17, 0.11],
        [0.42, 0.30, 0.17, 0.11],
        [0.30, 0.30, 0.22, 0.18],
        [0.28, 0.34, 0.22, 0.16],
        [0.45, 0.28, 0.16, 0.11],
        [0.45, 0.27, 0.16, 0.12],
        [0.40, 0.30, 0.18, 0.12],
        [0.62, 0.22, 0.10, 0.06],
    ],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub n: usize,
    pub group_fraction_s0: f64,
    pub score_marginals: ScoreMarginals,
    /// Audio, visual, text feature dimensions.
    pub feature_dims: [usize; NUM_MODALITIES],
    pub signal_scale: f64,
    /// Noise standard deviation for s0 and s1.
    pub noise_scale: [f64; 2],
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            n: 500,
            group_fraction_s0: 0.35,
            score_marginals: DEFAULT_MARGINALS,
            feature_dims: [16, 12, 20],
            signal_scale: 1.0,
            noise_scale: [0.5, 0.5],
            seed: 0,
        }
    }
}

impl CohortConfig {
    /// Noise-free cohort of 200 participants; scores are recoverable from features.
    pub fn separable_toy(seed: u64) -> Self {
        CohortConfig {
            n: 200,
            group_fraction_s0: 0.5,
            noise_scale: [0.0, 0.0],
            seed,
            ..CohortConfig::default()
        }
    }

    /// 2,000 participants where the minority group's features are much noisier.
    pub fn bias_injected(seed: u64) -> Self {
        CohortConfig {
            n: 2000,
            group_fraction_s0: 0.3,
            noise_scale: [1.5, 0.3],
            seed,
            ..CohortConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("participant count n must be at least 1".into()));
        }
        if !(self.group_fraction_s0 > 0.0 && self.group_fraction_s0 < 1.0) {
            return Err(Error::Config(format!(
                "group_fraction_s0 must lie in (0, 1), got {}",
                self.group_fraction_s0
            )));
        }
        for (g, rows) in self.score_marginals.iter().enumerate() {
            for (t, row) in rows.iter().enumerate() {
                let sum: f64 = row.iter().sum();
                if row.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!(
                        "score marginal for s{g}, PHQ-{} must be a probability vector (sum {sum})",
                        t + 1
                    )));
                }
            }
        }
        if self.feature_dims.contains(&0) {
            return Err(Error::Config("feature dimensions must be at least 1".into()));
        }
        if !self.signal_scale.is_finite() {
            return Err(Error::Config("signal_scale must be finite".into()));
        }
        if self.noise_scale.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Config("noise_scale entries must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub records: Vec<ParticipantRecord>,
    pub config_hash: String,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn group_counts(&self) -> [usize; 2] {
        let mut c = [0; 2];
        for r in &self.records {
            c[r.group.index()] += 1;
        }
        c
    }

    /// Score histograms: `hist[task][score]`.
    pub fn score_histograms(&self) -> [[usize; NUM_CLASSES]; NUM_TASKS] {
        let mut h = [[0; NUM_CLASSES]; NUM_TASKS];
        for r in &self.records {
            for (t, row) in h.iter_mut().enumerate() {
                row[usize::from(r.scores.get(t))] += 1;
            }
        }
        h
    }

    /// Common feature dimensions, or `None` for an empty cohort.
    pub fn feature_dims(&self) -> Option<[usize; NUM_MODALITIES]> {
        self.records.first().map(|r| r.feature_dims())
    }

    /// Seeded shuffle followed by a train/validation/test split. `fractions`
    /// are the train and validation shares; the test split takes the rest.
    pub fn split(&self, train_frac: f64, val_frac: f64, seed: u64) -> Result<(Cohort, Cohort, Cohort)> {
        if !(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac <= 1.0) {
            return Err(Error::Config(format!(
                "invalid split fractions {train_frac}/{val_frac}"
            )));
        }
        let mut idx: Vec<usize> = (0..self.records.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
        let n = idx.len();
        let n_train = (n as f64 * train_frac).round() as usize;
        let n_val = ((n as f64 * val_frac).round() as usize).min(n - n_train);
        let take = |ix: &[usize]| Cohort {
            records: ix.iter().map(|&i| self.records[i].clone()).collect(),
            config_hash: self.config_hash.clone(),
        };
        Ok((
            take(&idx[..n_train]),
            take(&idx[n_train..n_train + n_val]),
            take(&idx[n_train + n_val..]),
        ))
    }
}

fn sample_category(rng: &mut ChaCha8Rng, probs: &[f64; NUM_CLASSES]) -> u8 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k as u8;
        }
    }
    // u landed in the rounding slack above the cumulative sum; pick the last
    // class with positive mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) as u8
}

/// Draws a cohort. Identical configs give identical cohorts.
pub fn generate_cohort(config: &CohortConfig) -> Result<Cohort> {
    config.validate()?;

    let mut embed_rng = ChaCha8Rng::seed_from_u64(config.seed);
    embed_rng.set_stream(0);
    let norm = 1.0 / (NUM_TASKS as f64).sqrt();
    let embeddings: Vec<Vec<f64>> = config
        .feature_dims
        .iter()
        .map(|&d| {
            (0..d * NUM_TASKS)
                .map(|_| embed_rng.sample::<f64, _>(StandardNormal) * norm)
                .collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let width = config.n.to_string().len();
    let mut records = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let group = if rng.random::<f64>() < config.group_fraction_s0 {
            Group::S0
        } else {
            Group::S1
        };
        let mut raw = [0u8; NUM_TASKS];
        for (t, s) in raw.iter_mut().enumerate() {
            *s = sample_category(&mut rng, &config.score_marginals[group.index()][t]);
        }
        let scores = ScoreVector::new(raw)?;
        let centred: Vec<f64> = raw.iter().map(|&s| f64::from(s) - 1.5).collect();
        let noise = config.noise_scale[group.index()];

        let mut features: Vec<Vec<f64>> = Vec::with_capacity(NUM_MODALITIES);
        for (m, &d) in config.feature_dims.iter().enumerate() {
            let w = &embeddings[m];
            let v = (0..d)
                .map(|j| {
                    let row = &w[j * NUM_TASKS..(j + 1) * NUM_TASKS];
                    let signal: f64 = row.iter().zip(&centred).map(|(a, b)| a * b).sum();
                    let eps: f64 = rng.sample(StandardNormal);
                    config.signal_scale * signal + noise * eps
                })
                .collect();
            features.push(v);
        }
        let text = features.pop().unwrap();
        let visual = features.pop().unwrap();
        let audio = features.pop().unwrap();
        records.push(ParticipantRecord {
            id: format!("p{i:0width$}"),
            group,
            scores,
            audio,
            visual,
            text,
        });
    }
    Ok(Cohort {
        records,
        config_hash: config.digest(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    config_hash: String,
    n: usize,
}

/// Writes a cohort as JSON Lines (header line first).
pub fn write_dataset(cohort: &Cohort, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    write_dataset_to(cohort, &mut w)?;
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn write_dataset_to<W: Write>(cohort: &Cohort, w: &mut W) -> Result<()> {
    let header = DatasetHeader {
        format: DATASET_FORMAT.to_string(),
        version: DATASET_VERSION,
        config_hash: cohort.config_hash.clone(),
        n: cohort.records.len(),
    };
    let io = |e| Error::io("writing dataset", e);
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n").map_err(io)?;
    for r in &cohort.records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n").map_err(io)?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Cohort> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_dataset_from(BufReader::new(file), path)
}

/// Parses the dataset format; `path` is only used in error messages.
pub fn read_dataset_from<R: BufRead>(reader: R, path: &Path) -> Result<Cohort> {
    let perr = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = reader.lines();
    let header_line = match lines.next() {
        Some(l) => l.map_err(|e| Error::io(format!("reading {}", path.display()), e))?,
        None => return Err(perr(1, "missing header line".into())),
    };
    let header: DatasetHeader =
        serde_json::from_str(&header_line).map_err(|e| perr(1, format!("bad header: {e}")))?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(perr(
            1,
            format!("unsupported dataset format {} v{}", header.format, header.version),
        ));
    }

    let mut records = Vec::with_capacity(header.n);
    let mut dims: Option<[usize; NUM_MODALITIES]> = None;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let rec: ParticipantRecord =
            serde_json::from_str(&line).map_err(|e| perr(lineno, e.to_string()))?;
        let d = rec.feature_dims();
        match dims {
            None => dims = Some(d),
            Some(expected) if expected != d => {
                return Err(perr(
                    lineno,
                    format!("feature dimensions {d:?} differ from {expected:?}"),
                ))
            }
            _ => {}
        }
        if rec.modalities().iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(perr(lineno, "non-finite feature value".into()));
        }
        records.push(rec);
    }
    if records.len() != header.n {
        return Err(perr(
            records.len() + 1,
            format!("header declares {} records, found {}", header.n, records.len()),
        ));
    }
    Ok(Cohort {
        records,
        config_hash: header.config_hash,
    })
}

/// SHA-256 over the serialized dataset bytes.
pub fn dataset_digest(cohort: &Cohort) -> String {
    let mut buf = Vec::new();
    write_dataset_to(cohort, &mut buf).expect("in-memory write");
    hex::encode(Sha256::digest(&buf))
}
