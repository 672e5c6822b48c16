//! Accuracy and group-fairness gaps for a binary predictor and a binary
//! protected attribute.
//!
//! * DDP  = |P(ŷ=1 | a=0) − P(ŷ=1 | a=1)|
//! * DEO  = ½ Σ_y |P(ŷ=1 | y, a=0) − P(ŷ=1 | y, a=1)|
//! * DEOp = |P(ŷ=1 | y=1, a=0) − P(ŷ=1 | y=1, a=1)|
//!
//! An empty conditioning stratum is an error, never a zero.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::TwoHeadModel;
use crate::numerics::argmax;

/// One prediction with its ground truth and group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub predicted: u8,
    pub label: u8,
    pub group: u8,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PredictionLog {
    rows: Vec<Outcome>,
}

impl PredictionLog {
    pub fn new(rows: Vec<Outcome>) -> Result<Self> {
        if let Some(i) = rows
            .iter()
            .position(|o| o.predicted > 1 || o.label > 1 || o.group > 1)
        {
            return Err(Error::Config(format!("prediction log row {i} is not binary")));
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[Outcome] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn counts(&self) -> StratifiedCounts {
        let mut c = StratifiedCounts::default();
        for o in &self.rows {
            c.cells[usize::from(o.label)][usize::from(o.group)][usize::from(o.predicted)] += 1;
        }
        c
    }
}

/// Counts indexed `[y][a][ŷ]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratifiedCounts {
    pub cells: [[[u64; 2]; 2]; 2],
}

impl StratifiedCounts {
    pub fn total(&self) -> u64 {
        self.cells.iter().flatten().flatten().sum()
    }

    fn group(&self, a: usize) -> (u64, u64) {
        let positives = self.cells[0][a][1] + self.cells[1][a][1];
        let total = self.cells[0][a].iter().sum::<u64>() + self.cells[1][a].iter().sum::<u64>();
        (positives, total)
    }

    fn stratum(&self, y: usize, a: usize) -> (u64, u64) {
        (self.cells[y][a][1], self.cells[y][a].iter().sum())
    }

    fn rate(metric: &'static str, stratum: String, (pos, total): (u64, u64)) -> Result<f64> {
        if total == 0 {
            return Err(Error::UndefinedMetric { metric, stratum });
        }
        Ok(pos as f64 / total as f64)
    }

    /// Positive-rate gap between the groups of label `y`.
    fn conditional_gap(&self, metric: &'static str, y: usize) -> Result<f64> {
        let r0 = Self::rate(metric, format!("y={y},a=0"), self.stratum(y, 0))?;
        let r1 = Self::rate(metric, format!("y={y},a=1"), self.stratum(y, 1))?;
        Ok((r0 - r1).abs())
    }

    pub fn ddp(&self) -> Result<f64> {
        let r0 = Self::rate("DDP", "a=0".into(), self.group(0))?;
        let r1 = Self::rate("DDP", "a=1".into(), self.group(1))?;
        Ok((r0 - r1).abs())
    }

    pub fn deop(&self) -> Result<f64> {
        self.conditional_gap("DEOp", 1)
    }

    /// False-positive-rate gap.
    pub fn fpr_gap(&self) -> Result<f64> {
        self.conditional_gap("DEO", 0)
    }

    pub fn deo(&self) -> Result<f64> {
        let tpr_gap = self.conditional_gap("DEO", 1)?;
        let fpr_gap = self.conditional_gap("DEO", 0)?;
        Ok((tpr_gap + fpr_gap) / 2.0)
    }

    pub fn accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::UndefinedMetric {
                metric: "ACC",
                stratum: "all rows".into(),
            });
        }
        let correct: u64 = (0..2).map(|y| self.cells[y][0][y] + self.cells[y][1][y]).sum();
        Ok(correct as f64 / total as f64)
    }
}

pub fn ddp(log: &PredictionLog) -> Result<f64> {
    log.counts().ddp()
}

pub fn deo(log: &PredictionLog) -> Result<f64> {
    log.counts().deo()
}

pub fn deop(log: &PredictionLog) -> Result<f64> {
    log.counts().deop()
}

/// Metrics plus the counts they derive from. A metric whose stratum is
/// empty is `None` and named in `undefined`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub ddp: Option<f64>,
    pub deo: Option<f64>,
    pub deop: Option<f64>,
    pub acc: f64,
    pub counts: StratifiedCounts,
    pub undefined: Vec<String>,
}

impl FairnessReport {
    pub fn from_counts(counts: StratifiedCounts) -> Result<Self> {
        let acc = counts.accuracy()?;
        let mut undefined = Vec::new();
        let mut keep = |r: Result<f64>| match r {
            Ok(v) => Some(v),
            Err(e) => {
                undefined.push(e.to_string());
                None
            }
        };
        let ddp = keep(counts.ddp());
        let deo = keep(counts.deo());
        let deop = keep(counts.deop());
        Ok(Self {
            ddp,
            deo,
            deop,
            acc,
            counts,
            undefined,
        })
    }

    pub fn from_log(log: &PredictionLog) -> Result<Self> {
        Self::from_counts(log.counts())
    }

    /// Strict accessors that surface the undefined-metric error.
    pub fn ddp(&self) -> Result<f64> {
        self.counts.ddp()
    }

    pub fn deo(&self) -> Result<f64> {
        self.counts.deo()
    }

    pub fn deop(&self) -> Result<f64> {
        self.counts.deop()
    }
}

/// Target-head argmax decisions for every sample.
pub fn predict_log(model: &TwoHeadModel, dataset: &Dataset) -> Result<PredictionLog> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let logits = model.forward_target(&dataset.feature_matrix(&indices)?)?;
    let rows = dataset
        .samples()
        .iter()
        .enumerate()
        .map(|(r, s)| {
            let predicted = argmax(logits.row(r));
            if predicted > 1 {
                return Err(Error::Config(
                    "fairness metrics need a binary target head".into(),
                ));
            }
            Ok(Outcome {
                predicted: predicted as u8,
                label: s.y,
                group: s.a,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    PredictionLog::new(rows)
}

pub fn evaluate(model: &TwoHeadModel, dataset: &Dataset) -> Result<FairnessReport> {
    FairnessReport::from_log(&predict_log(model, dataset)?)
}

/// Protected-head accuracy on `dataset`.
pub fn protected_accuracy(model: &TwoHeadModel, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let logits = model.forward_protected(&dataset.feature_matrix(&indices)?)?;
    let correct = dataset
        .samples()
        .iter()
        .enumerate()
        .filter(|(r, s)| argmax(logits.row(*r)) == usize::from(s.a))
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}
