//! Difficulty scoring and curriculum assembly.
//!
//! Every sample of a minibatch is paired with every noise magnitude, the
//! resulting ASACs are scored against the target classifier M(θ, ρ), and the
//! `k × l` stream is ordered by score.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attacks::{attack_rows, Asac, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::TwoHeadModel;
use crate::numerics::{softmax_row, Tensor};
use crate::rng::rng_from;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurriculumOrder {
    Ascending,
    Descending,
    Random,
}

impl fmt::Display for CurriculumOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CurriculumOrder::Ascending => "ascending",
            CurriculumOrder::Descending => "descending",
            CurriculumOrder::Random => "random",
        })
    }
}

impl FromStr for CurriculumOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ascending" => Ok(Self::Ascending),
            "descending" => Ok(Self::Descending),
            "random" => Ok(Self::Random),
            other => Err(Error::Config(format!("unknown curriculum order {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    /// Noise magnitudes; must contain 0.
    pub eps: Vec<f64>,
    pub order: CurriculumOrder,
    /// Attack used for every non-zero magnitude; its own `eps` is ignored.
    pub attack: AttackConfig,
    /// Seeds the shuffle when `order` is random.
    pub seed: u64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            eps: vec![0.0, 0.001, 0.01],
            order: CurriculumOrder::Ascending,
            attack: AttackConfig::fgsm(0.0),
            seed: 0,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.eps.contains(&0.0) {
            return Err(Error::Config("curriculum eps list must include 0".into()));
        }
        for (i, &e) in self.eps.iter().enumerate() {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::Config(format!("curriculum eps {e} outside [0, 1]")));
            }
            if self.eps[..i].contains(&e) {
                return Err(Error::Config(format!("curriculum eps {e} listed twice")));
            }
        }
        for &e in &self.eps {
            self.attack.with_eps(e).validate()?;
        }
        Ok(())
    }
}

/// One element of the curriculum stream.
#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumEntry {
    pub asac: Asac,
    pub score: f64,
    pub y: u8,
    /// Position of the source sample within the minibatch.
    pub slot: usize,
    /// Position of the noise magnitude within the eps list.
    pub eps_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumBatch {
    pub entries: Vec<CurriculumEntry>,
}

impl CurriculumBatch {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }

    /// CSV rows `source_idx,eps,score,rank`.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "source_idx,eps,score,rank")?;
        for (rank, e) in self.entries.iter().enumerate() {
            writeln!(out, "{},{},{},{}", e.asac.source_index, e.asac.eps, e.score, rank)?;
        }
        Ok(())
    }
}

/// `1 − p(y)` under the target classifier for each row of `x`.
pub fn difficulty_scores(model: &TwoHeadModel, x: &Tensor, labels: &[u8]) -> Result<Vec<f64>> {
    let logits = model.target_classifier().logits(x)?;
    let (rows, classes) = logits.as_matrix_dims()?;
    if labels.len() != rows {
        return Err(Error::Shape(format!("{} labels for {rows} rows", labels.len())));
    }
    labels
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            let y = usize::from(y);
            if y >= classes {
                return Err(Error::Index(format!("label {y} out of range for {classes} classes")));
            }
            Ok((1.0 - softmax_row(logits.row(r))[y]).clamp(0.0, 1.0))
        })
        .collect()
}

/// Difficulty of one ASAC: the probability mass M puts outside the true label.
pub fn difficulty_score(model: &TwoHeadModel, asac: &Asac, y: u8) -> Result<f64> {
    let x = Tensor::matrix(1, asac.features.len(), asac.features.clone())?;
    Ok(difficulty_scores(model, &x, &[y])?[0])
}

/// Comparator used by the sorted orders: score first, then minibatch slot,
/// then eps position.
fn tie_break(a: &CurriculumEntry, b: &CurriculumEntry) -> Ordering {
    a.slot.cmp(&b.slot).then(a.eps_index.cmp(&b.eps_index))
}

pub fn construct_curriculum(
    model: &TwoHeadModel,
    dataset: &Dataset,
    minibatch: &[usize],
    cfg: &CurriculumConfig,
) -> Result<CurriculumBatch> {
    cfg.validate()?;
    if minibatch.is_empty() {
        return Err(Error::Config("curriculum minibatch is empty".into()));
    }
    let clean = dataset.feature_matrix(minibatch)?;
    let protected: Vec<usize> = minibatch
        .iter()
        .map(|&i| usize::from(dataset.get(i).a))
        .collect();

    // rows[j] holds the minibatch perturbed at eps[j]; eps = 0 copies it.
    let mut rows: Vec<Tensor> = Vec::with_capacity(cfg.eps.len());
    for &eps in &cfg.eps {
        rows.push(if eps == 0.0 {
            clean.clone()
        } else {
            attack_rows(model, &clean, &protected, &cfg.attack.with_eps(eps))?
        });
    }

    let k = minibatch.len();
    let l = cfg.eps.len();
    let mut stacked: Vec<&[f64]> = Vec::with_capacity(k * l);
    let mut targets = Vec::with_capacity(k * l);
    for (slot, &src) in minibatch.iter().enumerate() {
        for r in &rows {
            stacked.push(r.row(slot));
            targets.push(dataset.get(src).y);
        }
    }
    let scores = difficulty_scores(model, &Tensor::from_rows(&stacked)?, &targets)?;

    let mut entries = Vec::with_capacity(k * l);
    for (slot, &src) in minibatch.iter().enumerate() {
        for (j, &eps) in cfg.eps.iter().enumerate() {
            let score = scores[slot * l + j];
            entries.push(CurriculumEntry {
                asac: Asac {
                    features: rows[j].row(slot).to_vec(),
                    source_index: src,
                    eps,
                    method: cfg.attack.method,
                    score: Some(score),
                },
                score,
                y: dataset.get(src).y,
                slot,
                eps_index: j,
            });
        }
    }

    match cfg.order {
        CurriculumOrder::Ascending => {
            entries.sort_by(|a, b| a.score.total_cmp(&b.score).then_with(|| tie_break(a, b)))
        }
        CurriculumOrder::Descending => {
            entries.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| tie_break(a, b)))
        }
        CurriculumOrder::Random => entries.shuffle(&mut rng_from(cfg.seed)),
    }
    Ok(CurriculumBatch { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::AttackMethod;
    use crate::data::Sample;
    use crate::model::Architecture;

    fn dataset(n: usize) -> Dataset {
        let samples = (0..n)
            .map(|i| Sample {
                features: (0..4).map(|j| ((i * 7 + j * 3) % 10) as f64 / 10.0).collect(),
                y: (i % 2) as u8,
                a: ((i / 2) % 2) as u8,
            })
            .collect();
        Dataset::new(4, samples).unwrap()
    }

    #[test]
    fn score_is_complement_of_true_class_probability() {
        // logits (ln 9, 0) put probability 0.9 on class 0.
        let arch = Architecture::new(1, vec![], 2).unwrap();
        let mut m = TwoHeadModel::zeros(arch).unwrap();
        m.params_mut()[1].data_mut()[0] = 9f64.ln();
        let asac = Asac {
            features: vec![0.5],
            source_index: 0,
            eps: 0.0,
            method: AttackMethod::Fgsm,
            score: None,
        };
        assert!((difficulty_score(&m, &asac, 0).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_score_half() {
        let m = TwoHeadModel::zeros(Architecture::default_for(4)).unwrap();
        let x = Tensor::matrix(2, 4, vec![0.3; 8]).unwrap();
        assert_eq!(difficulty_scores(&m, &x, &[0, 1]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn size_is_k_times_l() {
        let m = TwoHeadModel::new(Architecture::new(4, vec![3], 2).unwrap(), 1).unwrap();
        let cb = construct_curriculum(&m, &dataset(5), &[4, 1], &CurriculumConfig::default())
            .unwrap();
        assert_eq!(cb.len(), 6);
        assert!(cb.scores().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn ties_resolve_by_slot_then_eps() {
        let m = TwoHeadModel::zeros(Architecture::default_for(4)).unwrap();
        let cb = construct_curriculum(&m, &dataset(3), &[2, 0], &CurriculumConfig::default())
            .unwrap();
        let order: Vec<(usize, usize)> = cb.entries.iter().map(|e| (e.slot, e.eps_index)).collect();
        assert_eq!(order, vec![(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]);
        assert_eq!(cb.entries[0].asac.source_index, 2);
    }

    #[test]
    fn zero_eps_entries_copy_the_sample() {
        let m = TwoHeadModel::new(Architecture::new(4, vec![3], 2).unwrap(), 8).unwrap();
        let ds = dataset(4);
        let cb = construct_curriculum(&m, &ds, &[0, 1, 2, 3], &CurriculumConfig::default())
            .unwrap();
        for e in cb.entries.iter().filter(|e| e.asac.eps == 0.0) {
            assert_eq!(e.asac.features, ds.get(e.asac.source_index).features);
        }
    }

    #[test]
    fn config_requires_zero_and_distinct() {
        let mut cfg = CurriculumConfig { eps: vec![0.01, 0.001], ..CurriculumConfig::default() };
        assert!(cfg.validate().is_err());
        cfg.eps = vec![0.0, 0.01, 0.01];
        assert!(cfg.validate().is_err());
        cfg.eps = vec![0.0, 2.0];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn empty_minibatch_rejected() {
        let m = TwoHeadModel::zeros(Architecture::default_for(4)).unwrap();
        assert!(construct_curriculum(&m, &dataset(2), &[], &CurriculumConfig::default()).is_err());
    }
}
