//! Mini-batch training with seeded shuffling and early stopping, the
//! eight-model unitask suite, and prediction.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossMode, LossSpec};
use crate::net::{
    self, adam_step, backward, AdamConfig, ModelParams, NetConfig, OptimizerState, Uncertainty,
};
use crate::phq::{total_score, Group, ParticipantRecord, ScoreVector, DEPRESSION_THRESHOLD, NUM_TASKS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMonitor {
    /// Lower validation objective is better.
    ValLoss,
    /// Higher mean per-task validation accuracy is better.
    ValTaskAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub monitor: StopMonitor,
    pub seed: u64,
    pub hidden: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub loss_spec: LossSpec,
}

impl TrainConfig {
    pub fn new(mode: LossMode) -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            lr: adam.lr,
            batch_size: 32,
            max_epochs: 150,
            patience: 10,
            monitor: StopMonitor::ValLoss,
            seed: 0,
            hidden: net::DEFAULT_HIDDEN,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            loss_spec: LossSpec::new(mode),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden size must be >= 1".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::Config("Adam epsilon must be > 0".into()));
        }
        self.loss_spec.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// `1/σ²` per task (group-major for U-Fair), empty without uncertainty.
    pub inv_sigma2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub mode: LossMode,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopping_epoch: usize,
}

impl TrainTrace {
    fn sigma_columns(&self) -> Vec<String> {
        match Uncertainty::for_mode(self.mode) {
            Uncertainty::None => vec![],
            Uncertainty::PerTask => (1..=NUM_TASKS).map(|t| format!("inv_sigma2_t{t}")).collect(),
            Uncertainty::PerTaskGroup => Group::ALL
                .iter()
                .flat_map(|g| (1..=NUM_TASKS).map(move |t| format!("inv_sigma2_{g}_t{t}")))
                .collect(),
        }
    }

    /// CSV with one row per epoch and split. The first line is a
    /// `# manifest_hash: <hex>` comment.
    pub fn write_csv<W: Write>(&self, w: W, manifest_hash: &str) -> Result<()> {
        let mut w = w;
        writeln!(w, "# manifest_hash: {manifest_hash}").map_err(|e| Error::io("writing trace", e))?;
        let mut csv = csv::Writer::from_writer(w);
        let mut header = vec!["epoch".to_string(), "split".into(), "loss".into()];
        header.extend(self.sigma_columns());
        csv.write_record(&header)?;
        for e in &self.epochs {
            for (split, loss) in [("train", e.train_loss), ("val", e.val_loss)] {
                let mut row = vec![e.epoch.to_string(), split.to_string(), loss.to_string()];
                row.extend(e.inv_sigma2.iter().map(|v| v.to_string()));
                csv.write_record(&row)?;
            }
        }
        csv.flush().map_err(|e| Error::io("writing trace", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path, manifest_hash: &str) -> Result<()> {
        let f = std::fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        self.write_csv(std::io::BufWriter::new(f), manifest_hash)
    }
}

/// Patience-based stopping rule over a monitored value.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    higher_is_better: bool,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize, higher_is_better: bool) -> Self {
        EarlyStopping {
            patience,
            higher_is_better,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> StopDecision {
        let improved = match self.best {
            None => true,
            Some(b) if self.higher_is_better => value > b,
            Some(b) => value < b,
        };
        if improved {
            self.best = Some(value);
            self.best_epoch = epoch;
            self.stale = 0;
            StopDecision::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Parameters from the best epoch plus the optimizer state at that epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub trace: TrainTrace,
    pub loss_spec: LossSpec,
}

fn common_dims(records: &[ParticipantRecord]) -> Result<[usize; 3]> {
    let first = records
        .first()
        .ok_or_else(|| Error::Input("empty split".into()))?
        .feature_dims();
    if let Some(r) = records.iter().find(|r| r.feature_dims() != first) {
        return Err(Error::Config(format!(
            "record {} has dims {:?}, expected {first:?}",
            r.id,
            r.feature_dims()
        )));
    }
    Ok(first)
}

/// Mean per-task argmax accuracy; for unitask specs only the trained task counts.
fn task_accuracy(params: &ModelParams, records: &[ParticipantRecord], mode: LossMode) -> Result<f64> {
    let mut correct = [0usize; NUM_TASKS];
    for r in records {
        let pred = net::forward(params, r)?.argmax_scores();
        for t in 0..NUM_TASKS {
            correct[t] += usize::from(pred[t] == r.scores.get(t));
        }
    }
    let n = records.len() as f64;
    Ok(match mode {
        LossMode::Unitask { task } => correct[task] as f64 / n,
        _ => correct.iter().map(|&c| c as f64 / n).sum::<f64>() / NUM_TASKS as f64,
    })
}

pub fn train(
    train_set: &[ParticipantRecord],
    val_set: &[ParticipantRecord],
    config: &TrainConfig,
) -> Result<TrainedModel> {
    config.validate()?;
    let dims = common_dims(train_set)?;
    let val_dims = common_dims(val_set)?;
    if dims != val_dims {
        return Err(Error::Config(format!(
            "train dims {dims:?} differ from validation dims {val_dims:?}"
        )));
    }
    let spec = &config.loss_spec;
    let net_cfg = NetConfig::new(dims, config.hidden, spec.mode);
    let mut params = ModelParams::init(net_cfg, config.seed)?;
    let mut opt = OptimizerState::new(config.adam(), params.values.len());

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(3);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut stopper = EarlyStopping::new(
        config.patience,
        config.monitor == StopMonitor::ValTaskAccuracy,
    );
    let mut best = (params.clone(), opt.clone());
    let mut epochs = Vec::new();
    let mut stopping_epoch = config.max_epochs;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<ParticipantRecord> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let (loss, grads) = backward(&params, &batch, spec).map_err(|e| match e {
                Error::Numeric(m) => Error::Divergence { epoch, batch: b, message: m },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    message: format!("loss is {loss}"),
                });
            }
            adam_step(&mut params, &grads, &mut opt)?;
            if !params.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    message: "non-finite parameter after update".into(),
                });
            }
            loss_sum += loss;
            n_batches += 1;
        }
        let val_loss = net::batch_loss(&params, val_set, spec).map_err(|e| match e {
            Error::Numeric(m) => Error::Divergence { epoch, batch: n_batches, message: m },
            other => other,
        })?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                batch: n_batches,
                message: format!("validation loss is {val_loss}"),
            });
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n_batches as f64,
            val_loss,
            inv_sigma2: params.uncertainty().iter().map(|s| (-s).exp()).collect(),
        });
        let monitored = match config.monitor {
            StopMonitor::ValLoss => val_loss,
            StopMonitor::ValTaskAccuracy => task_accuracy(&params, val_set, spec.mode)?,
        };
        match stopper.observe(epoch, monitored) {
            StopDecision::Improved => best = (params.clone(), opt.clone()),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopping_epoch = epoch;
                break;
            }
        }
    }

    Ok(TrainedModel {
        params: best.0,
        optimizer: best.1,
        trace: TrainTrace {
            mode: spec.mode,
            epochs,
            best_epoch: stopper.best_epoch(),
            stopping_epoch,
        },
        loss_spec: spec.clone(),
    })
}

/// Eight single-task models, model `t` trained on PHQ item `t` only.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitaskSuite {
    pub models: Vec<TrainedModel>,
}

pub fn train_unitask_suite(
    train_set: &[ParticipantRecord],
    val_set: &[ParticipantRecord],
    config: &TrainConfig,
) -> Result<UnitaskSuite> {
    let models = (0..NUM_TASKS)
        .map(|task| {
            let mut cfg = config.clone();
            cfg.loss_spec.mode = LossMode::Unitask { task };
            train(train_set, val_set, &cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(UnitaskSuite { models })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub group: Group,
    pub scores: ScoreVector,
    pub ts: u32,
    pub y_hat: u8,
}

impl Prediction {
    fn from_scores(record: &ParticipantRecord, raw: [u8; NUM_TASKS]) -> Result<Self> {
        let scores = ScoreVector::new(raw)?;
        let ts = total_score(&scores);
        Ok(Prediction {
            id: record.id.clone(),
            group: record.group,
            scores,
            ts,
            y_hat: u8::from(ts >= DEPRESSION_THRESHOLD),
        })
    }
}

/// Something that maps records to per-task score predictions.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictor {
    Joint(ModelParams),
    /// One model per task; task `t` is read from `models[t]`.
    Suite(Vec<ModelParams>),
}

impl Predictor {
    pub fn predict(&self, records: &[ParticipantRecord]) -> Result<Vec<Prediction>> {
        match self {
            Predictor::Joint(p) => predict(p, records),
            Predictor::Suite(models) => predict_suite(models, records),
        }
    }
}

/// Argmax per head (ties to the lowest class), then total score and threshold.
pub fn predict(params: &ModelParams, records: &[ParticipantRecord]) -> Result<Vec<Prediction>> {
    records
        .iter()
        .map(|r| Prediction::from_scores(r, net::forward(params, r)?.argmax_scores()))
        .collect()
}

pub fn predict_suite(models: &[ModelParams], records: &[ParticipantRecord]) -> Result<Vec<Prediction>> {
    if models.len() != NUM_TASKS {
        return Err(Error::Input(format!(
            "unitask suite needs {NUM_TASKS} models, got {}",
            models.len()
        )));
    }
    records
        .iter()
        .map(|r| {
            let mut raw = [0u8; NUM_TASKS];
            for (t, m) in models.iter().enumerate() {
                raw[t] = net::forward(m, r)?.argmax_scores()[t];
            }
            Prediction::from_scores(r, raw)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopping_semantics() {
        let mut s = EarlyStopping::new(1, false);
        assert_eq!(s.observe(1, 1.0), StopDecision::Improved);
        assert_eq!(s.observe(2, 1.5), StopDecision::Stop);
        assert_eq!(s.best_epoch(), 1);

        let mut s = EarlyStopping::new(3, false);
        let vals = [5.0, 4.0, 4.5, 4.0, 3.9, 4.2, 4.1, 4.0];
        let decisions: Vec<_> = vals.iter().enumerate().map(|(i, &v)| s.observe(i + 1, v)).collect();
        use StopDecision::*;
        assert_eq!(
            decisions,
            vec![Improved, Improved, Continue, Continue, Improved, Continue, Continue, Stop]
        );
        assert_eq!(s.best_epoch(), 5);

        let mut s = EarlyStopping::new(2, true);
        assert_eq!(s.observe(1, 0.5), Improved);
        assert_eq!(s.observe(2, 0.6), Improved);
        assert_eq!(s.observe(3, 0.6), Continue);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::new(LossMode::Mtl);
        c.validate().unwrap();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::new(LossMode::Mtl);
        c.lr = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::new(LossMode::Mtl);
        c.patience = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn default_hyperparameters() {
        let c = TrainConfig::new(LossMode::UFair);
        assert_eq!(c.lr, 0.0002);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.max_epochs, 150);
        assert_eq!(c.loss_spec.task_weights, [1.0; 8]);
    }
}
