//! Attribute-specific adversarial counterfactuals.
//!
//! Perturbations are computed against the protected classifier C(θ, φ)
//! using each sample's protected label, never through the target probe.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::TwoHeadModel;
use crate::numerics::{GradTape, Reduction, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMethod {
    Fgsm,
    Pgd,
}

impl fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Pgd => "pgd",
        })
    }
}

impl FromStr for AttackMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackMethod::Fgsm),
            "pgd" => Ok(AttackMethod::Pgd),
            other => Err(Error::Config(format!("unknown attack method {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub method: AttackMethod,
    pub eps: f64,
    pub pgd_steps: usize,
    /// Defaults to `eps / 4` when unset.
    pub pgd_step_size: Option<f64>,
}

impl AttackConfig {
    pub fn fgsm(eps: f64) -> Self {
        Self {
            method: AttackMethod::Fgsm,
            eps,
            pgd_steps: 10,
            pgd_step_size: None,
        }
    }

    pub fn pgd(eps: f64) -> Self {
        Self {
            method: AttackMethod::Pgd,
            ..Self::fgsm(eps)
        }
    }

    pub fn with_eps(&self, eps: f64) -> Self {
        Self { eps, ..self.clone() }
    }

    pub fn step_size(&self) -> f64 {
        self.pgd_step_size.unwrap_or(self.eps / 4.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eps) {
            return Err(Error::Config(format!("eps must lie in [0, 1], got {}", self.eps)));
        }
        if self.method == AttackMethod::Pgd {
            if self.pgd_steps == 0 {
                return Err(Error::Config("pgd_steps must be >= 1".into()));
            }
            let step = self.step_size();
            if !step.is_finite() || step < 0.0 || (self.eps > 0.0 && step == 0.0) {
                return Err(Error::Config(format!("pgd step size must be positive, got {step}")));
            }
        }
        Ok(())
    }
}

/// A perturbed copy `x' = x + δ` of one dataset sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Asac {
    pub features: Vec<f64>,
    pub source_index: usize,
    pub eps: f64,
    pub method: AttackMethod,
    /// Filled in by curriculum scoring.
    pub score: Option<f64>,
}

/// `sign(v)` with `sign(0) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `δ = ε · sign(g)`, before any clamping.
pub fn fgsm_delta(grad: &[f64], eps: f64) -> Vec<f64> {
    grad.iter().map(|&g| eps * sign(g)).collect()
}

/// Gradient of the summed protected-head cross-entropy with respect to each
/// input row. Rows are independent, so row `i` equals the per-sample gradient.
pub fn protected_input_gradient(
    model: &TwoHeadModel,
    x: &Tensor,
    labels: &[usize],
) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let bound = model.protected_classifier().bind(&mut tape, false, false);
    let xv = tape.leaf(x.clone());
    let logits = bound.forward(&mut tape, xv)?;
    let loss = tape.softmax_cross_entropy(logits, labels, Reduction::Sum)?;
    Ok(tape.grad(loss, &[xv])?.remove(0))
}

fn fgsm_rows(model: &TwoHeadModel, x: &Tensor, labels: &[usize], eps: f64) -> Result<Tensor> {
    if eps == 0.0 {
        return Ok(x.clone());
    }
    let grad = protected_input_gradient(model, x, labels)?;
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&xi, &g)| (xi + eps * sign(g)).clamp(0.0, 1.0))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// PGD over a batch. `observe(t, x_t)` sees every iterate after projection.
pub fn pgd_rows_observed(
    model: &TwoHeadModel,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    observe: &mut dyn FnMut(usize, &Tensor),
) -> Result<Tensor> {
    cfg.validate()?;
    let eps = cfg.eps;
    if eps == 0.0 {
        return Ok(x.clone());
    }
    let step = cfg.step_size();
    let mut current = x.clone();
    for t in 0..cfg.pgd_steps {
        let grad = protected_input_gradient(model, &current, labels)?;
        let data = current
            .data()
            .iter()
            .zip(grad.data())
            .zip(x.data())
            .map(|((&xt, &g), &x0)| {
                let moved = (xt + step * sign(g)).clamp(0.0, 1.0);
                moved.clamp(x0 - eps, x0 + eps)
            })
            .collect();
        current = Tensor::new(x.shape().to_vec(), data)?;
        observe(t + 1, &current);
    }
    Ok(current)
}

/// Attack every row of `x` (`[B × d]`) with its protected label.
pub fn attack_rows(
    model: &TwoHeadModel,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    match cfg.method {
        AttackMethod::Fgsm => fgsm_rows(model, x, labels, cfg.eps),
        AttackMethod::Pgd => pgd_rows_observed(model, x, labels, cfg, &mut |_, _| {}),
    }
}

fn single(model: &TwoHeadModel, x: &[f64], a: u8, cfg: &AttackConfig) -> Result<Asac> {
    let row = Tensor::matrix(1, x.len(), x.to_vec())?;
    let out = attack_rows(model, &row, &[usize::from(a)], cfg)?;
    Ok(Asac {
        features: out.into_data(),
        source_index: 0,
        eps: cfg.eps,
        method: cfg.method,
        score: None,
    })
}

/// Single-step sign attack on the protected head.
pub fn fgsm(model: &TwoHeadModel, x: &[f64], a: u8, eps: f64) -> Result<Asac> {
    single(model, x, a, &AttackConfig::fgsm(eps))
}

/// Iterated sign steps projected back onto the ε-ball around `x` and the unit box.
pub fn pgd(model: &TwoHeadModel, x: &[f64], a: u8, cfg: &AttackConfig) -> Result<Asac> {
    if cfg.method != AttackMethod::Pgd {
        return Err(Error::Config("pgd called with a non-PGD attack config".into()));
    }
    single(model, x, a, cfg)
}

/// One ASAC per listed dataset sample, in the order given.
pub fn make_asac_batch(
    model: &TwoHeadModel,
    dataset: &Dataset,
    indices: &[usize],
    cfg: &AttackConfig,
) -> Result<Vec<Asac>> {
    if indices.is_empty() {
        return Err(Error::Config("cannot attack an empty batch".into()));
    }
    let x = dataset.feature_matrix(indices)?;
    let labels: Vec<usize> = indices.iter().map(|&i| usize::from(dataset.get(i).a)).collect();
    let out = attack_rows(model, &x, &labels, cfg)?;
    Ok(indices
        .iter()
        .enumerate()
        .map(|(r, &src)| Asac {
            features: out.row(r).to_vec(),
            source_index: src,
            eps: cfg.eps,
            method: cfg.method,
            score: None,
        })
        .collect())
}

/// Fraction of rows whose protected prediction changes under attack.
pub fn flip_rate(model: &TwoHeadModel, clean: &Tensor, attacked: &Tensor) -> Result<f64> {
    let before = model.forward_protected(clean)?;
    let after = model.forward_protected(attacked)?;
    let (rows, _) = before.as_matrix_dims()?;
    let flips = (0..rows)
        .filter(|&r| {
            crate::numerics::argmax(before.row(r)) != crate::numerics::argmax(after.row(r))
        })
        .count();
    Ok(flips as f64 / rows as f64)
}

/// ASAC rows as CSV: `f0,…,f{d-1},y,a,source_idx,eps,method`.
pub fn write_asac_csv<W: std::io::Write>(
    dataset: &Dataset,
    asacs: &[Asac],
    mut out: W,
) -> Result<()> {
    let header: Vec<String> = (0..dataset.dim())
        .map(|i| format!("f{i}"))
        .chain(["y", "a", "source_idx", "eps", "method"].map(String::from))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for asac in asacs {
        let src = dataset.get(asac.source_index);
        let mut line: Vec<String> = asac.features.iter().map(|v| v.to_string()).collect();
        line.extend([
            src.y.to_string(),
            src.a.to_string(),
            asac.source_index.to_string(),
            asac.eps.to_string(),
            asac.method.to_string(),
        ]);
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;

    fn model() -> TwoHeadModel {
        TwoHeadModel::new(Architecture::new(6, vec![5], 2).unwrap(), 4).unwrap()
    }

    #[test]
    fn fgsm_delta_follows_sign() {
        assert_eq!(fgsm_delta(&[0.3, -0.2, 0.0], 0.01), vec![0.01, -0.01, 0.0]);
        assert_eq!(sign(-0.0), 0.0);
    }

    #[test]
    fn zero_eps_is_identity() {
        let m = model();
        let x = vec![0.1, 0.5, 0.9, 0.0, 1.0, 0.3];
        assert_eq!(fgsm(&m, &x, 1, 0.0).unwrap().features, x);
        let mut cfg = AttackConfig::pgd(0.0);
        cfg.pgd_steps = 7;
        assert_eq!(pgd(&m, &x, 0, &cfg).unwrap().features, x);
    }

    #[test]
    fn pgd_iterates_stay_in_ball() {
        let m = model();
        let x = Tensor::matrix(1, 6, vec![0.1, 0.5, 0.9, 0.0, 1.0, 0.3]).unwrap();
        let cfg = AttackConfig { pgd_step_size: Some(0.04), ..AttackConfig::pgd(0.05) };
        let mut seen = 0;
        pgd_rows_observed(&m, &x, &[1], &cfg, &mut |_, xt| {
            seen += 1;
            for (a, b) in xt.data().iter().zip(x.data()) {
                assert!((a - b).abs() <= 0.05 + 1e-12);
                assert!((0.0..=1.0).contains(a));
            }
        })
        .unwrap();
        assert_eq!(seen, 10);
    }

    #[test]
    fn batch_preserves_order_and_length() {
        let m = model();
        let samples = (0..4)
            .map(|i| crate::data::Sample {
                features: vec![i as f64 / 4.0; 6],
                y: (i % 2) as u8,
                a: ((i / 2) % 2) as u8,
            })
            .collect();
        let ds = Dataset::new(6, samples).unwrap();
        let out = make_asac_batch(&m, &ds, &[3, 0, 2], &AttackConfig::fgsm(0.02)).unwrap();
        assert_eq!(out.iter().map(|a| a.source_index).collect::<Vec<_>>(), vec![3, 0, 2]);
        let single = make_asac_batch(&m, &ds, &[1], &AttackConfig::fgsm(0.0)).unwrap();
        assert_eq!(single[0].features, ds.get(1).features);
        assert!(make_asac_batch(&m, &ds, &[], &AttackConfig::fgsm(0.1)).is_err());
    }

    #[test]
    fn batched_attack_matches_single_sample() {
        let m = model();
        let rows = vec![vec![0.2; 6], vec![0.7, 0.1, 0.4, 0.9, 0.5, 0.6]];
        let x = Tensor::from_rows(&rows).unwrap();
        let batch = attack_rows(&m, &x, &[0, 1], &AttackConfig::pgd(0.1)).unwrap();
        for (r, (row, a)) in rows.iter().zip([0u8, 1]).enumerate() {
            let alone = pgd(&m, row, a, &AttackConfig::pgd(0.1)).unwrap();
            assert_eq!(batch.row(r), alone.features.as_slice());
        }
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::fgsm(1.5).validate().is_err());
        assert!(AttackConfig { pgd_steps: 0, ..AttackConfig::pgd(0.1) }.validate().is_err());
        assert!(AttackConfig { pgd_step_size: Some(0.0), ..AttackConfig::pgd(0.1) }
            .validate()
            .is_err());
        assert!(AttackConfig::pgd(0.0).validate().is_ok());
    }
}
