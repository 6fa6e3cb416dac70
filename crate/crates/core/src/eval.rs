//! Binary classification metrics, ratio-form group fairness measures and
//! fairness/accuracy Pareto frontiers.
//!
//! Every fairness measure is `rate(s0) / rate(s1)`:
//!
//! | measure | rate |
//! |---------|------|
//! | `m_sp`   | P(Ŷ=1) |
//! | `m_eopp` | P(Ŷ=1 \| Y=1) |
//! | `m_eodd` | P(Ŷ=1 \| Y=y) for y = 1 and y = 0, aggregated |
//! | `m_eacc` | accuracy |
//!
//! A rate with an empty conditioning set is undefined. Two zero rates give a
//! ratio of 1; a positive rate over a zero rate is [`Ratio::Undefined`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phq::{Group, ParticipantRecord, NUM_TASKS};
use crate::train::Prediction;

pub const FAIRNESS_LOWER_BOUND: f64 = 0.80;
pub const FAIRNESS_UPPER_BOUND: f64 = 1.20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPrediction {
    pub group: Group,
    pub y_true: bool,
    pub y_hat: bool,
}

/// Pairs predictions with the ground-truth outcome of the same records.
pub fn label_predictions(preds: &[Prediction], records: &[ParticipantRecord]) -> Result<Vec<LabeledPrediction>> {
    if preds.len() != records.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} records",
            preds.len(),
            records.len()
        )));
    }
    preds
        .iter()
        .zip(records)
        .map(|(p, r)| {
            if p.id != r.id {
                return Err(Error::Input(format!("prediction {} paired with record {}", p.id, r.id)));
            }
            Ok(LabeledPrediction {
                group: r.group,
                y_true: r.outcome().y_hat == 1,
                y_hat: p.y_hat == 1,
            })
        })
        .collect()
}

/// Per-task subscore accuracy.
pub fn task_accuracies(preds: &[Prediction], records: &[ParticipantRecord]) -> Result<[f64; NUM_TASKS]> {
    if preds.is_empty() || preds.len() != records.len() {
        return Err(Error::Input("task accuracy needs matching non-empty inputs".into()));
    }
    let mut hits = [0usize; NUM_TASKS];
    for (p, r) in preds.iter().zip(records) {
        for (t, h) in hits.iter_mut().enumerate() {
            *h += usize::from(p.scores.get(t) == r.scores.get(t));
        }
    }
    let n = preds.len() as f64;
    Ok(hits.map(|h| h as f64 / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerformanceMetrics {
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub uar: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Confusion {
    tp: usize,
    fp: usize,
    tn: usize,
    fn_: usize,
}

impl Confusion {
    fn from_iter<'a>(preds: impl Iterator<Item = &'a LabeledPrediction>) -> Self {
        let mut c = Confusion::default();
        for p in preds {
            match (p.y_true, p.y_hat) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        c
    }

    fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn frac(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, positive-class F1/precision/recall and UAR.
///
/// Precision with no predicted positives is 0, recall with no actual
/// positives is 0, and UAR averages recall over the classes present in
/// `y_true`.
pub fn performance_metrics(preds: &[LabeledPrediction]) -> Result<PerformanceMetrics> {
    if preds.is_empty() {
        return Err(Error::Input("no predictions to score".into()));
    }
    let c = Confusion::from_iter(preds.iter());
    let accuracy = frac(c.tp + c.tn, c.total());
    let precision = frac(c.tp, c.tp + c.fp);
    let recall = frac(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let mut recalls = Vec::with_capacity(2);
    if c.tp + c.fn_ > 0 {
        recalls.push(recall);
    }
    if c.tn + c.fp > 0 {
        recalls.push(frac(c.tn, c.tn + c.fp));
    }
    let uar = recalls.iter().sum::<f64>() / recalls.len() as f64;
    Ok(PerformanceMetrics {
        accuracy,
        f1,
        precision,
        recall,
        uar,
    })
}

/// A fairness ratio, or the marker for a one-sided zero denominator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "Option<f64>", into = "Option<f64>")]
pub enum Ratio {
    Defined(f64),
    Undefined,
}

impl From<Option<f64>> for Ratio {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Ratio::Undefined, Ratio::Defined)
    }
}

impl From<Ratio> for Option<f64> {
    fn from(r: Ratio) -> Self {
        r.value()
    }
}

impl Ratio {
    pub fn value(self) -> Option<f64> {
        match self {
            Ratio::Defined(v) => Some(v),
            Ratio::Undefined => None,
        }
    }

    pub fn is_defined(self) -> bool {
        matches!(self, Ratio::Defined(_))
    }

    /// Ratio of two rates given as `(numerator count, denominator count)`.
    fn of_rates(s0: (usize, usize), s1: (usize, usize)) -> Ratio {
        if s0.1 == 0 || s1.1 == 0 {
            return Ratio::Undefined;
        }
        let r0 = s0.0 as f64 / s0.1 as f64;
        let r1 = s1.0 as f64 / s1.1 as f64;
        match (r0 == 0.0, r1 == 0.0) {
            (true, true) => Ratio::Defined(1.0),
            (false, true) => Ratio::Undefined,
            _ => Ratio::Defined(r0 / r1),
        }
    }
}

/// Folds a ratio onto [0, 1]: `min(r, 1/r)`, with 0 mapping to 0.
pub fn normalize_fairness(r: Ratio) -> Result<Ratio> {
    match r {
        Ratio::Undefined => Ok(Ratio::Undefined),
        Ratio::Defined(v) if v < 0.0 || v.is_nan() => {
            Err(Error::Input(format!("fairness ratio must be >= 0, got {v}")))
        }
        Ratio::Defined(0.0) => Ok(Ratio::Defined(0.0)),
        Ratio::Defined(v) => Ok(Ratio::Defined(v.min(1.0 / v))),
    }
}

/// `0.80 <= r <= 1.20`; `None` when undefined.
pub fn within_bounds(r: Ratio) -> Option<bool> {
    r.value()
        .map(|v| (FAIRNESS_LOWER_BOUND..=FAIRNESS_UPPER_BOUND).contains(&v))
}

/// How the y=1 and y=0 equalised-odds ratios are reduced to one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EoddAggregate {
    /// `sqrt(r1 * r0)`; swapping groups maps it to its reciprocal.
    #[default]
    GeometricMean,
    ArithmeticMean,
    /// The component farther from 1 on a log scale (y=1 wins ties).
    WorstCase,
}

impl EoddAggregate {
    fn apply(self, y1: Ratio, y0: Ratio) -> Ratio {
        let (Ratio::Defined(a), Ratio::Defined(b)) = (y1, y0) else {
            return Ratio::Undefined;
        };
        Ratio::Defined(match self {
            EoddAggregate::GeometricMean => (a * b).sqrt(),
            EoddAggregate::ArithmeticMean => 0.5 * (a + b),
            EoddAggregate::WorstCase => {
                if a.ln().abs() >= b.ln().abs() {
                    a
                } else {
                    b
                }
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairnessMeasure {
    pub raw: Ratio,
    pub normalized: Ratio,
    pub within_bounds: Option<bool>,
}

impl FairnessMeasure {
    fn new(raw: Ratio) -> Self {
        FairnessMeasure {
            raw,
            normalized: normalize_fairness(raw).expect("rates are non-negative"),
            within_bounds: within_bounds(raw),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EoddComponents {
    pub y1: Ratio,
    pub y0: Ratio,
    pub aggregate: EoddAggregate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub m_sp: FairnessMeasure,
    pub m_eopp: FairnessMeasure,
    pub m_eodd: FairnessMeasure,
    pub m_eacc: FairnessMeasure,
    pub m_eodd_components: EoddComponents,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FairnessMetric {
    #[serde(rename = "m_sp")]
    StatisticalParity,
    #[serde(rename = "m_eopp")]
    EqualOpportunity,
    #[serde(rename = "m_eodd")]
    EqualisedOdds,
    #[serde(rename = "m_eacc")]
    EqualAccuracy,
}

impl FairnessMetric {
    pub const ALL: [FairnessMetric; 4] = [
        FairnessMetric::StatisticalParity,
        FairnessMetric::EqualOpportunity,
        FairnessMetric::EqualisedOdds,
        FairnessMetric::EqualAccuracy,
    ];

    pub fn key(self) -> &'static str {
        match self {
            FairnessMetric::StatisticalParity => "m_sp",
            FairnessMetric::EqualOpportunity => "m_eopp",
            FairnessMetric::EqualisedOdds => "m_eodd",
            FairnessMetric::EqualAccuracy => "m_eacc",
        }
    }
}

impl FairnessReport {
    pub fn measure(&self, metric: FairnessMetric) -> &FairnessMeasure {
        match metric {
            FairnessMetric::StatisticalParity => &self.m_sp,
            FairnessMetric::EqualOpportunity => &self.m_eopp,
            FairnessMetric::EqualisedOdds => &self.m_eodd,
            FairnessMetric::EqualAccuracy => &self.m_eacc,
        }
    }
}

pub fn fairness_ratios(preds: &[LabeledPrediction]) -> Result<FairnessReport> {
    fairness_ratios_with(preds, EoddAggregate::default())
}

pub fn fairness_ratios_with(preds: &[LabeledPrediction], aggregate: EoddAggregate) -> Result<FairnessReport> {
    let conf = Group::ALL.map(|g| Confusion::from_iter(preds.iter().filter(|p| p.group == g)));
    if let Some(g) = Group::ALL.iter().find(|g| conf[g.index()].total() == 0) {
        return Err(Error::Input(format!("group {g} has no predictions")));
    }
    let [c0, c1] = conf;
    let sp = Ratio::of_rates((c0.tp + c0.fp, c0.total()), (c1.tp + c1.fp, c1.total()));
    let tpr = Ratio::of_rates((c0.tp, c0.tp + c0.fn_), (c1.tp, c1.tp + c1.fn_));
    let fpr = Ratio::of_rates((c0.fp, c0.fp + c0.tn), (c1.fp, c1.fp + c1.tn));
    let acc = Ratio::of_rates((c0.tp + c0.tn, c0.total()), (c1.tp + c1.tn, c1.total()));
    Ok(FairnessReport {
        m_sp: FairnessMeasure::new(sp),
        m_eopp: FairnessMeasure::new(tpr),
        m_eodd: FairnessMeasure::new(aggregate.apply(tpr, fpr)),
        m_eacc: FairnessMeasure::new(acc),
        m_eodd_components: EoddComponents {
            y1: tpr,
            y0: fpr,
            aggregate,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub method_id: String,
    pub accuracy: f64,
    pub fairness_norm: f64,
}

impl ParetoPoint {
    pub fn new(method_id: impl Into<String>, accuracy: f64, fairness_norm: f64) -> Self {
        ParetoPoint {
            method_id: method_id.into(),
            accuracy,
            fairness_norm,
        }
    }
}

fn check_points(points: &[ParetoPoint]) -> Result<()> {
    if points.is_empty() {
        return Err(Error::Input("no points for Pareto frontier".into()));
    }
    for p in points {
        for v in [p.accuracy, p.fairness_norm] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Input(format!(
                    "point {} has coordinate {v} outside [0, 1]",
                    p.method_id
                )));
            }
        }
    }
    Ok(())
}

/// Frontier membership for each input point, in input order.
pub fn frontier_mask(points: &[ParetoPoint]) -> Result<Vec<bool>> {
    check_points(points)?;
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&points[a], &points[b]);
        pb.accuracy
            .total_cmp(&pa.accuracy)
            .then(pb.fairness_norm.total_cmp(&pa.fairness_norm))
    });
    let mut mask = vec![false; points.len()];
    // best fairness among points with strictly higher accuracy
    let mut best_above = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        let acc = points[order[i]].accuracy;
        let mut j = i;
        while j < order.len() && points[order[j]].accuracy == acc {
            j += 1;
        }
        let top = points[order[i]].fairness_norm;
        if top > best_above {
            for &k in &order[i..j] {
                if points[k].fairness_norm == top {
                    mask[k] = true;
                }
            }
        }
        best_above = best_above.max(top);
        i = j;
    }
    Ok(mask)
}

/// Non-dominated points, sorted by accuracy descending. Exact duplicates of
/// a frontier point are all kept.
pub fn pareto_frontier(points: &[ParetoPoint]) -> Result<Vec<ParetoPoint>> {
    let mask = frontier_mask(points)?;
    let mut out: Vec<ParetoPoint> = points
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(p, _)| p.clone())
        .collect();
    out.sort_by(|a, b| b.accuracy.total_cmp(&a.accuracy));
    Ok(out)
}
