use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Adam, AdamConfig, Head, ParamGroup, TwoHeadModel};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{GradTape, Reduction, Tensor};
use crate::rng::rng_from;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip: f64,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 50,
            batch_size: 128,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) || !(self.clip > 0.0) {
            return Err(Error::Config("adam_eps and clip must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            clip: Some(self.clip),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TwoHeadModel,
    /// Mean minibatch loss of each epoch.
    pub loss_history: Vec<f64>,
}

fn check_inputs(model: &TwoHeadModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    if dataset.dim() != model.architecture().input_dim {
        return Err(Error::Shape(format!(
            "dataset has {} features, model expects {}",
            dataset.dim(),
            model.architecture().input_dim
        )));
    }
    Ok(())
}

/// Shuffled minibatch loop shared by the trainers. `step_grads` records the
/// loss for one minibatch and returns its value plus gradients for `group`.
fn fit<F>(
    model: &TwoHeadModel,
    dataset: &Dataset,
    group: ParamGroup,
    cfg: &TrainConfig,
    mut step_grads: F,
) -> Result<(TwoHeadModel, Vec<f64>)>
where
    F: FnMut(&TwoHeadModel, &[usize]) -> Result<(f64, Vec<Tensor>)>,
{
    let mut model = model.clone();
    let mut opt = {
        let params = model.group_mut(group);
        Adam::new(cfg.adam(), params.iter().map(|p| &**p))
    };
    let mut rng = rng_from(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = step_grads(&model, batch)?;
            let mut params = model.group_mut(group);
            opt.step(&mut params, grads)?;
            total += loss;
            steps += 1;
        }
        history.push(total / steps as f64);
    }
    Ok((model, history))
}

fn labels(dataset: &Dataset, batch: &[usize], head: Head) -> Vec<usize> {
    batch
        .iter()
        .map(|&i| {
            let s = dataset.get(i);
            usize::from(match head {
                Head::Target => s.y,
                Head::Protected => s.a,
            })
        })
        .collect()
}

/// Fit one head with cross-entropy.
///
/// `Head::Target` updates the backbone and the target probe. `Head::Protected`
/// updates only the protected probe; the backbone stays frozen so the target
/// classifier is untouched.
pub fn train_probe(
    model: &TwoHeadModel,
    dataset: &Dataset,
    head: Head,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    check_inputs(model, dataset, cfg)?;
    let group = match head {
        Head::Target => ParamGroup::TargetPath,
        Head::Protected => ParamGroup::ProtectedProbe,
    };
    let (mut model, history) = fit(model, dataset, group, cfg, |model, batch| {
        let labels = labels(dataset, batch, head);
        let mut tape = GradTape::new();
        let bound = model.classifier(head).bind(&mut tape, head == Head::Target, true);
        let xv = tape.constant(dataset.feature_matrix(batch)?);
        let logits = bound.forward(&mut tape, xv)?;
        let loss = tape.softmax_cross_entropy(logits, &labels, Reduction::Mean)?;
        let wrt = match head {
            Head::Target => bound.vars(),
            Head::Protected => bound.probe_vars(),
        };
        Ok((tape.value(loss)?.data()[0], tape.grad(loss, &wrt)?))
    })?;
    let stage = model.stage_mut();
    match head {
        Head::Target => stage.target_trained = true,
        Head::Protected => stage.protected_trained = true,
    }
    Ok(TrainOutcome {
        model,
        loss_history: history,
    })
}

/// Fit θ, ρ and φ together on `CE(M(x), y) + CE(C(x), a)`, each term a
/// minibatch mean.
pub fn train_joint(
    model: &TwoHeadModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    check_inputs(model, dataset, cfg)?;
    let (mut model, history) = fit(model, dataset, ParamGroup::All, cfg, |model, batch| {
        let y = labels(dataset, batch, Head::Target);
        let a = labels(dataset, batch, Head::Protected);
        let mut tape = GradTape::new();
        let target = model.target_classifier().bind(&mut tape, true, true);
        let protected = target.with_probe(&mut tape, model.protected_probe(), true);
        let xv = tape.constant(dataset.feature_matrix(batch)?);
        let target_logits = target.forward(&mut tape, xv)?;
        let protected_logits = protected.forward(&mut tape, xv)?;
        let target_loss = tape.softmax_cross_entropy(target_logits, &y, Reduction::Mean)?;
        let protected_loss = tape.softmax_cross_entropy(protected_logits, &a, Reduction::Mean)?;
        let loss = tape.add(target_loss, protected_loss)?;
        let mut wrt = target.vars();
        wrt.extend(protected.probe_vars());
        Ok((tape.value(loss)?.data()[0], tape.grad(loss, &wrt)?))
    })?;
    let stage = model.stage_mut();
    stage.target_trained = true;
    stage.protected_trained = true;
    Ok(TrainOutcome {
        model,
        loss_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;
    use crate::model::Architecture;

    fn tiny_dataset() -> Dataset {
        Dataset::new(
            2,
            vec![
                Sample { features: vec![0.9, 0.1], y: 1, a: 0 },
                Sample { features: vec![0.1, 0.9], y: 0, a: 1 },
            ],
        )
        .unwrap()
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let ds = Dataset::new(2, vec![tiny_dataset().get(0).clone()]).unwrap();
        let model = TwoHeadModel::new(Architecture::new(2, vec![3], 2).unwrap(), 1).unwrap();
        let cfg = TrainConfig { lr: 0.0, epochs: 1, ..TrainConfig::default() };
        let out = train_probe(&model, &ds, Head::Target, &cfg).unwrap();
        assert!(out.model.same_bits(&model));
    }

    #[test]
    fn empty_dataset_is_config_error() {
        let ds = Dataset::new(2, vec![]).unwrap();
        let model = TwoHeadModel::new(Architecture::new(2, vec![3], 2).unwrap(), 1).unwrap();
        let err = train_probe(&model, &ds, Head::Target, &TrainConfig::default());
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn protected_training_freezes_backbone_and_target_probe() {
        let model = TwoHeadModel::new(Architecture::new(2, vec![4], 2).unwrap(), 2).unwrap();
        let cfg = TrainConfig { epochs: 5, lr: 1e-2, ..TrainConfig::default() };
        let out = train_probe(&model, &tiny_dataset(), Head::Protected, &cfg).unwrap();
        for (a, b) in out.model.backbone().iter().zip(model.backbone()) {
            assert!(a.weight.same_bits(&b.weight) && a.bias.same_bits(&b.bias));
        }
        assert_eq!(out.model.target_probe(), model.target_probe());
        assert_ne!(out.model.protected_probe(), model.protected_probe());
        assert!(out.model.stage().protected_trained);
        assert!(!out.model.stage().target_trained);
    }

    #[test]
    fn training_is_deterministic() {
        let model = TwoHeadModel::new(Architecture::new(2, vec![4], 2).unwrap(), 2).unwrap();
        let cfg = TrainConfig { epochs: 3, ..TrainConfig::default() };
        let a = train_probe(&model, &tiny_dataset(), Head::Target, &cfg).unwrap();
        let b = train_probe(&model, &tiny_dataset(), Head::Target, &cfg).unwrap();
        assert!(a.model.same_bits(&b.model));
        assert_eq!(a.loss_history, b.loss_history);
    }

    #[test]
    fn joint_training_moves_every_group() {
        let model = TwoHeadModel::new(Architecture::new(2, vec![4], 2).unwrap(), 2).unwrap();
        let cfg = TrainConfig { epochs: 5, lr: 1e-2, ..TrainConfig::default() };
        let out = train_joint(&model, &tiny_dataset(), &cfg).unwrap();
        assert_ne!(out.model.backbone()[0], model.backbone()[0]);
        assert_ne!(out.model.target_probe(), model.target_probe());
        assert_ne!(out.model.protected_probe(), model.protected_probe());
        assert!(out.model.stage().target_trained && out.model.stage().protected_trained);
        assert_eq!(out.loss_history.len(), 5);
    }
}
