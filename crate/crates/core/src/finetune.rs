//! Curriculum fine-tuning of the target classifier M(θ, ρ) with the
//! α-weighted clean/adversarial cross-entropy.
//!
//! Each epoch shuffles the training set into minibatches of `k`. For every
//! minibatch a fresh curriculum is built against the current model, and the
//! sorted `k × l` stream is consumed in micro-batches, one Adam step each.
//! The protected probe φ is never updated.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::curriculum::{construct_curriculum, CurriculumConfig, CurriculumEntry};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fairness::{evaluate, FairnessReport};
use crate::model::{Adam, Bound, ParamGroup, TrainConfig, TwoHeadModel};
use crate::numerics::{GradTape, Reduction, Tensor, Var};
use crate::rng::{child_seed, rng_from};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    /// Weight of the clean term; `1 − alpha` weighs the adversarial term.
    pub alpha: f64,
    /// Stream entries per optimizer step; `None` uses the minibatch size.
    pub micro_batch: Option<usize>,
    pub curriculum: CurriculumConfig,
    /// Optimizer, epochs, minibatch size `k` and shuffle seed.
    pub train: TrainConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            micro_batch: None,
            curriculum: CurriculumConfig::default(),
            train: TrainConfig {
                epochs: 10,
                ..TrainConfig::default()
            },
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if self.micro_batch == Some(0) {
            return Err(Error::Config("micro_batch must be positive".into()));
        }
        self.train.validate()?;
        self.curriculum.validate()
    }

    pub fn micro_batch_size(&self) -> usize {
        self.micro_batch.unwrap_or(self.train.batch_size)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean optimizer-step loss over the epoch.
    pub mean_loss: f64,
    pub steps: usize,
    /// Clean samples drawn as curriculum sources this epoch.
    pub sources_consumed: usize,
    /// Evaluation after the epoch, when an evaluation set was supplied.
    pub report: Option<FairnessReport>,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: TwoHeadModel,
    pub history: Vec<EpochRecord>,
}

/// Record `α·CE(M(clean), y) + (1 − α)·CE(M(adv), y)` on `tape`, each term
/// averaged over rows.
pub fn trace_combined_loss(
    tape: &mut GradTape,
    bound: &Bound,
    clean: Var,
    adversarial: Var,
    labels: &[usize],
    alpha: f64,
) -> Result<Var> {
    check_alpha(alpha)?;
    let clean_logits = bound.forward(tape, clean)?;
    let clean_ce = tape.softmax_cross_entropy(clean_logits, labels, Reduction::Mean)?;
    let adv_logits = bound.forward(tape, adversarial)?;
    let adv_ce = tape.softmax_cross_entropy(adv_logits, labels, Reduction::Mean)?;
    let clean_term = tape.scale(clean_ce, alpha)?;
    let adv_term = tape.scale(adv_ce, 1.0 - alpha)?;
    tape.add(clean_term, adv_term)
}

/// Value of the combined loss for paired clean/adversarial rows.
pub fn combined_loss(
    model: &TwoHeadModel,
    clean_x: &Tensor,
    asac_x: &Tensor,
    y: &[u8],
    alpha: f64,
) -> Result<f64> {
    if clean_x.shape() != asac_x.shape() {
        return Err(Error::Shape(format!(
            "clean {:?} and adversarial {:?} inputs differ in shape",
            clean_x.shape(),
            asac_x.shape()
        )));
    }
    let as_batch = |t: &Tensor| match t.shape() {
        [d] => Tensor::matrix(1, *d, t.data().to_vec()),
        _ => Ok(t.clone()),
    };
    let labels: Vec<usize> = y.iter().map(|&v| usize::from(v)).collect();
    let mut tape = GradTape::new();
    let bound = model.target_classifier().bind(&mut tape, false, false);
    let clean = tape.constant(as_batch(clean_x)?);
    let adv = tape.constant(as_batch(asac_x)?);
    let loss = trace_combined_loss(&mut tape, &bound, clean, adv, &labels, alpha)?;
    Ok(tape.value(loss)?.data()[0])
}

/// Shuffled minibatches for successive epochs, matching the base trainer's
/// shuffle so equal seeds visit samples in the same order.
pub struct EpochPlanner {
    order: Vec<usize>,
    batch_size: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl EpochPlanner {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            order: (0..n).collect(),
            batch_size,
            rng: rng_from(seed),
        }
    }

    pub fn next_epoch(&mut self) -> Vec<Vec<usize>> {
        self.order.shuffle(&mut self.rng);
        self.order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

pub fn finetune(
    model: &TwoHeadModel,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    finetune_with(model, train, eval, cfg, |_, _| Ok(()))
}

/// [`finetune`] with a callback after every epoch (e.g. to checkpoint).
pub fn finetune_with<F>(
    model: &TwoHeadModel,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &FinetuneConfig,
    mut on_epoch: F,
) -> Result<FinetuneOutcome>
where
    F: FnMut(&TwoHeadModel, &EpochRecord) -> Result<()>,
{
    cfg.validate()?;
    let stage = model.stage();
    if !stage.target_trained || !stage.protected_trained {
        return Err(Error::PipelineOrder(
            "fine-tuning needs a model whose target and protected heads are both trained".into(),
        ));
    }
    if train.is_empty() {
        return Err(Error::Config("cannot fine-tune on an empty dataset".into()));
    }
    if train.dim() != model.architecture().input_dim {
        return Err(Error::Shape(format!(
            "dataset has {} features, model expects {}",
            train.dim(),
            model.architecture().input_dim
        )));
    }

    let mut model = model.clone();
    let mut opt = {
        let params = model.group_mut(ParamGroup::TargetPath);
        Adam::new(cfg.train.adam(), params.iter().map(|p| &**p))
    };
    let mut planner = EpochPlanner::new(train.len(), cfg.train.batch_size, cfg.train.seed);
    let micro = cfg.micro_batch_size();
    let mut history = Vec::with_capacity(cfg.train.epochs);

    for epoch in 0..cfg.train.epochs {
        let mut total = 0.0;
        let mut steps = 0usize;
        let mut sources = 0usize;
        let epoch_seed = child_seed(cfg.curriculum.seed, epoch as u64);
        for (b, minibatch) in planner.next_epoch().into_iter().enumerate() {
            let curriculum_cfg = CurriculumConfig {
                seed: child_seed(epoch_seed, b as u64),
                ..cfg.curriculum.clone()
            };
            let stream = construct_curriculum(&model, train, &minibatch, &curriculum_cfg)?;
            sources += minibatch.len();
            for chunk in stream.entries.chunks(micro) {
                total += step(&mut model, &mut opt, train, chunk, cfg.alpha)?;
                steps += 1;
            }
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            mean_loss: total / steps as f64,
            steps,
            sources_consumed: sources,
            report: eval.map(|d| evaluate(&model, d)).transpose()?,
        };
        on_epoch(&model, &record)?;
        history.push(record);
    }
    Ok(FinetuneOutcome { model, history })
}

/// One optimizer step on a micro-batch of the curriculum stream. Rows are
/// laid out in (minibatch slot, eps index) order; ordering inside one step
/// does not change the update beyond floating-point summation order.
fn step(
    model: &mut TwoHeadModel,
    opt: &mut Adam,
    train: &Dataset,
    chunk: &[CurriculumEntry],
    alpha: f64,
) -> Result<f64> {
    let mut rows: Vec<&CurriculumEntry> = chunk.iter().collect();
    rows.sort_by_key(|e| (e.slot, e.eps_index));
    let clean: Vec<&[f64]> = rows
        .iter()
        .map(|e| train.get(e.asac.source_index).features.as_slice())
        .collect();
    let adv: Vec<&[f64]> = rows.iter().map(|e| e.asac.features.as_slice()).collect();
    let labels: Vec<usize> = rows.iter().map(|e| usize::from(e.y)).collect();

    let mut tape = GradTape::new();
    let (loss, grads) = {
        let bound = model.target_classifier().bind(&mut tape, true, true);
        let cv = tape.constant(Tensor::from_rows(&clean)?);
        let av = tape.constant(Tensor::from_rows(&adv)?);
        let loss = trace_combined_loss(&mut tape, &bound, cv, av, &labels, alpha)?;
        (tape.value(loss)?.data()[0], tape.grad(loss, &bound.vars())?)
    };
    let mut params = model.group_mut(ParamGroup::TargetPath);
    opt.step(&mut params, grads)?;
    Ok(loss)
}

/// Training log CSV: `epoch,mean_loss,acc,ddp,deo,deop,config_digest,seed`.
pub fn write_log_csv<W: std::io::Write>(
    history: &[EpochRecord],
    config_digest: &str,
    seed: u64,
    mut out: W,
) -> Result<()> {
    writeln!(out, "epoch,mean_loss,acc,ddp,deo,deop,config_digest,seed")?;
    let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
    for r in history {
        let rep = r.report.as_ref();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch,
            r.mean_loss,
            fmt(rep.map(|x| x.acc)),
            fmt(rep.and_then(|x| x.ddp)),
            fmt(rep.and_then(|x| x.deo)),
            fmt(rep.and_then(|x| x.deop)),
            config_digest,
            seed
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GenConfig};
    use crate::model::{train_probe, Architecture, Head};

    fn trained(n: usize) -> (TwoHeadModel, Dataset) {
        let ds = generate(&GenConfig { seed: 3, n, grid: 4, ..GenConfig::default() }).unwrap();
        let model = TwoHeadModel::new(Architecture::new(16, vec![8, 6], 2).unwrap(), 1).unwrap();
        let tc = TrainConfig { epochs: 3, batch_size: 16, ..TrainConfig::default() };
        let m = train_probe(&model, &ds, Head::Target, &tc).unwrap().model;
        let m = train_probe(&m, &ds, Head::Protected, &tc).unwrap().model;
        (m, ds)
    }

    #[test]
    fn alpha_endpoints_and_midpoint() {
        let (m, ds) = trained(40);
        let clean = ds.feature_matrix(&[0, 1, 2]).unwrap();
        let adv = Tensor::new(
            clean.shape().to_vec(),
            clean.data().iter().map(|v| (v + 0.05f64).min(1.0)).collect(),
        )
        .unwrap();
        let y: Vec<u8> = (0..3).map(|i| ds.get(i).y).collect();
        let j1 = combined_loss(&m, &clean, &adv, &y, 1.0).unwrap();
        let j0 = combined_loss(&m, &clean, &adv, &y, 0.0).unwrap();
        let jh = combined_loss(&m, &clean, &adv, &y, 0.5).unwrap();
        assert!((jh - (0.5 * j1 + 0.5 * j0)).abs() < 1e-12);
        assert!(matches!(combined_loss(&m, &clean, &adv, &y, 1.2), Err(Error::Config(_))));
    }

    #[test]
    fn zero_epochs_returns_model_unchanged() {
        let (m, ds) = trained(40);
        let cfg = FinetuneConfig {
            train: TrainConfig { epochs: 0, ..TrainConfig::default() },
            ..FinetuneConfig::default()
        };
        let out = finetune(&m, &ds, None, &cfg).unwrap();
        assert!(out.model.same_bits(&m));
        assert!(out.history.is_empty());
    }

    #[test]
    fn untrained_protected_head_is_pipeline_error() {
        let ds = generate(&GenConfig { seed: 3, n: 10, grid: 4, ..GenConfig::default() }).unwrap();
        let model = TwoHeadModel::new(Architecture::new(16, vec![4], 2).unwrap(), 1).unwrap();
        let tc = TrainConfig { epochs: 1, ..TrainConfig::default() };
        let m = train_probe(&model, &ds, Head::Target, &tc).unwrap().model;
        let err = finetune(&m, &ds, None, &FinetuneConfig::default());
        assert!(matches!(err, Err(Error::PipelineOrder(_))));
    }

    #[test]
    fn protected_probe_is_frozen_and_epochs_cover_data() {
        let (m, ds) = trained(50);
        let cfg = FinetuneConfig {
            train: TrainConfig { epochs: 2, batch_size: 16, ..TrainConfig::default() },
            ..FinetuneConfig::default()
        };
        let out = finetune(&m, &ds, Some(&ds), &cfg).unwrap();
        assert_eq!(out.model.protected_probe(), m.protected_probe());
        assert!(!out.model.same_bits(&m));
        for r in &out.history {
            assert_eq!(r.sources_consumed, 50);
            // minibatches of 16, 16, 16, 2 give streams of 48, 48, 48, 6.
            assert_eq!(r.steps, 3 + 3 + 3 + 1);
            assert!(r.report.is_some());
        }
    }

    #[test]
    fn planner_visits_each_sample_once_per_epoch() {
        let mut p = EpochPlanner::new(37, 8, 5);
        for _ in 0..3 {
            let mut seen: Vec<usize> = p.next_epoch().concat();
            seen.sort_unstable();
            assert_eq!(seen, (0..37).collect::<Vec<_>>());
        }
    }
}
