//! PHQ-8 domain types: subscore vectors, total-score aggregation, the binary
//! depression outcome and Gaussian soft labels over the four score classes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of PHQ-8 subitems, one prediction task each.
pub const NUM_TASKS: usize = 8;
/// Score classes per subitem: 0, 1, 2, 3.
pub const NUM_CLASSES: usize = 4;
/// Highest attainable total score.
pub const MAX_TOTAL: u32 = 24;
/// Totals at or above this value are classed as depressed.
pub const DEPRESSION_THRESHOLD: u32 = 10;

/// Sensitive attribute. `S0` is the female minority group, `S1` the male majority.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "s0")]
    S0,
    #[serde(rename = "s1")]
    S1,
}

impl Group {
    pub const ALL: [Group; 2] = [Group::S0, Group::S1];

    pub fn index(self) -> usize {
        match self {
            Group::S0 => 0,
            Group::S1 => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Group> {
        match i {
            0 => Some(Group::S0),
            1 => Some(Group::S1),
            _ => None,
        }
    }

    pub fn other(self) -> Group {
        match self {
            Group::S0 => Group::S1,
            Group::S1 => Group::S0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Group::S0 => "s0",
            Group::S1 => "s1",
        }
    }
}

impl std::fmt::Display for Group {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Eight PHQ-8 subscores, each in `0..=3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct ScoreVector([u8; NUM_TASKS]);

impl ScoreVector {
    pub fn new(scores: [u8; NUM_TASKS]) -> Result<Self> {
        if let Some((t, &s)) = scores.iter().enumerate().find(|(_, &s)| s > 3) {
            return Err(Error::Input(format!(
                "subscore for PHQ-{} is {s}, must be in 0..=3",
                t + 1
            )));
        }
        Ok(ScoreVector(scores))
    }

    pub fn zeros() -> Self {
        ScoreVector([0; NUM_TASKS])
    }

    pub fn get(&self, task: usize) -> u8 {
        self.0[task]
    }

    pub fn as_array(&self) -> &[u8; NUM_TASKS] {
        &self.0
    }
}

impl TryFrom<Vec<u8>> for ScoreVector {
    type Error = Error;

    fn try_from(v: Vec<u8>) -> Result<Self> {
        let arr: [u8; NUM_TASKS] = v.as_slice().try_into().map_err(|_| {
            Error::Input(format!("expected {NUM_TASKS} subscores, got {}", v.len()))
        })?;
        ScoreVector::new(arr)
    }
}

impl From<ScoreVector> for Vec<u8> {
    fn from(s: ScoreVector) -> Self {
        s.0.to_vec()
    }
}

/// Total PHQ-8 score: the plain sum of the eight subscores.
pub fn total_score(scores: &ScoreVector) -> u32 {
    scores.0.iter().map(|&s| u32::from(s)).sum()
}

/// Binary depression outcome from a total score (1 iff `ts >= 10`).
pub fn binary_outcome(ts: u32) -> Result<u8> {
    if ts > MAX_TOTAL {
        return Err(Error::Input(format!(
            "total score {ts} outside 0..={MAX_TOTAL}"
        )));
    }
    Ok(u8::from(ts >= DEPRESSION_THRESHOLD))
}

/// Total score together with its thresholded class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryOutcome {
    pub ts: u32,
    pub y_hat: u8,
}

impl BinaryOutcome {
    pub fn from_scores(scores: &ScoreVector) -> Self {
        let ts = total_score(scores);
        BinaryOutcome {
            ts,
            y_hat: u8::from(ts >= DEPRESSION_THRESHOLD),
        }
    }
}

/// Probability vector over the four score classes for one task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftLabel(pub [f64; NUM_CLASSES]);

impl SoftLabel {
    pub fn probs(&self) -> &[f64; NUM_CLASSES] {
        &self.0
    }
}

/// Discretized Gaussian centred on `y`: `p(k) ∝ exp(-(k - y)² / (2 σ²))`, k ∈ {0,1,2,3}.
pub fn soft_label(y: u8, sigma_g: f64) -> Result<SoftLabel> {
    if !(sigma_g > 0.0 && sigma_g.is_finite()) {
        return Err(Error::Config(format!(
            "soft-label width must be positive and finite, got {sigma_g}"
        )));
    }
    if usize::from(y) >= NUM_CLASSES {
        return Err(Error::Input(format!("score {y} outside 0..=3")));
    }
    let denom = 2.0 * sigma_g * sigma_g;
    let mut p = [0.0; NUM_CLASSES];
    // the k == y term is exp(0) = 1, so the sum never underflows
    for (k, pk) in p.iter_mut().enumerate() {
        let d = k as f64 - f64::from(y);
        *pk = (-d * d / denom).exp();
    }
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    Ok(SoftLabel(p))
}

/// Soft labels for all eight tasks of a score vector.
pub fn soft_labels(scores: &ScoreVector, sigma_g: f64) -> Result<[SoftLabel; NUM_TASKS]> {
    let mut out = [SoftLabel([0.0; NUM_CLASSES]); NUM_TASKS];
    for (t, slot) in out.iter_mut().enumerate() {
        *slot = soft_label(scores.get(t), sigma_g)?;
    }
    Ok(out)
}

/// One participant: sensitive group, three modality feature vectors and ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantRecord {
    pub id: String,
    pub group: Group,
    pub scores: ScoreVector,
    pub audio: Vec<f64>,
    pub visual: Vec<f64>,
    pub text: Vec<f64>,
}

pub const NUM_MODALITIES: usize = 3;

impl ParticipantRecord {
    /// Feature vectors in modality order audio, visual, text.
    pub fn modalities(&self) -> [&[f64]; NUM_MODALITIES] {
        [&self.audio, &self.visual, &self.text]
    }

    pub fn feature_dims(&self) -> [usize; NUM_MODALITIES] {
        [self.audio.len(), self.visual.len(), self.text.len()]
    }

    pub fn outcome(&self) -> BinaryOutcome {
        BinaryOutcome::from_scores(&self.scores)
    }
}
