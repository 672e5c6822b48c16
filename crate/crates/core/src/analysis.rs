//! Robustness sweeps across noise magnitudes and Integrated Gradients
//! attributions for the target head.

use serde::{Deserialize, Serialize};

use crate::attacks::{attack_rows, AttackConfig};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::TwoHeadModel;
use crate::numerics::{argmax, softmax_row, GradTape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub eps: f64,
    /// Target-head probability of the true `y`.
    pub p_target: f64,
    /// Protected-head probability of the true `a`.
    pub p_protected: f64,
    /// Target prediction differs from the clean prediction.
    pub flipped_target: bool,
    /// Protected prediction differs from the clean prediction.
    pub flipped_protected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub rows: Vec<RobustnessRow>,
}

/// Attack `sample` against the protected head at every ε in `grid` (sorted
/// ascending in the output) and record how both heads respond.
pub fn robustness_sweep(
    model: &TwoHeadModel,
    sample: &Sample,
    grid: &[f64],
    attack: &AttackConfig,
) -> Result<RobustnessCurve> {
    if grid.is_empty() {
        return Err(Error::Config("robustness sweep needs a non-empty eps grid".into()));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let clean = Tensor::matrix(1, sample.features.len(), sample.features.clone())?;
    let (_, clean_t, clean_p) = model.forward_both(&clean)?;
    let (clean_t_pred, clean_p_pred) = (argmax(clean_t.row(0)), argmax(clean_p.row(0)));

    let mut rows = Vec::with_capacity(grid.len());
    for eps in grid {
        let x = attack_rows(model, &clean, &[usize::from(sample.a)], &attack.with_eps(eps))?;
        let (_, t, p) = model.forward_both(&x)?;
        rows.push(RobustnessRow {
            eps,
            p_target: softmax_row(t.row(0))[usize::from(sample.y)],
            p_protected: softmax_row(p.row(0))[usize::from(sample.a)],
            flipped_target: argmax(t.row(0)) != clean_t_pred,
            flipped_protected: argmax(p.row(0)) != clean_p_pred,
        });
    }
    Ok(RobustnessCurve { rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub values: Vec<f64>,
    pub baseline: Vec<f64>,
    pub steps: usize,
    pub class: usize,
    /// `Σ IG − (F(x) − F(x₀))`.
    pub residual: f64,
}

impl Attribution {
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Sum of absolute attribution over `region` divided by the total absolute attribution.
    pub fn mass_fraction(&self, region: &[usize]) -> f64 {
        let total: f64 = self.values.iter().map(|v| v.abs()).sum();
        if total == 0.0 {
            return 0.0;
        }
        region.iter().map(|&i| self.values[i].abs()).sum::<f64>() / total
    }
}

pub const DEFAULT_IG_STEPS: usize = 50;

/// Right-endpoint Riemann approximation of Integrated Gradients of the
/// target logit `class`, from `baseline` (zeros when `None`) to `x`.
pub fn integrated_gradients(
    model: &TwoHeadModel,
    x: &[f64],
    class: usize,
    baseline: Option<&[f64]>,
    steps: usize,
) -> Result<Attribution> {
    if steps == 0 {
        return Err(Error::Config("integrated gradients needs at least one step".into()));
    }
    let d = x.len();
    let baseline = baseline.map_or_else(|| vec![0.0; d], <[f64]>::to_vec);
    if baseline.len() != d {
        return Err(Error::Shape(format!(
            "baseline has {} features, input has {d}",
            baseline.len()
        )));
    }
    let classifier = model.target_classifier();
    if class >= classifier.classes() {
        return Err(Error::Index(format!(
            "class {class} out of range for {} target classes",
            classifier.classes()
        )));
    }

    let mut path = Vec::with_capacity(steps * d);
    for t in 1..=steps {
        let frac = t as f64 / steps as f64;
        path.extend(baseline.iter().zip(x).map(|(&b, &xi)| b + frac * (xi - b)));
    }
    let mut tape = GradTape::new();
    let bound = classifier.bind(&mut tape, false, false);
    let xv = tape.leaf(Tensor::matrix(steps, d, path)?);
    let logits = bound.forward(&mut tape, xv)?;
    let picked = tape.column_sum(logits, class)?;
    let grads = tape.grad(picked, &[xv])?.remove(0);

    let mut mean_grad = vec![0.0; d];
    for r in 0..steps {
        for (m, g) in mean_grad.iter_mut().zip(grads.row(r)) {
            *m += g;
        }
    }
    let values: Vec<f64> = mean_grad
        .iter()
        .zip(x.iter().zip(&baseline))
        .map(|(g, (xi, bi))| (xi - bi) * g / steps as f64)
        .collect();

    let ends = Tensor::from_rows(&[x, baseline.as_slice()])?;
    let end_logits = classifier.logits(&ends)?;
    let delta = end_logits.row(0)[class] - end_logits.row(1)[class];
    let residual = values.iter().sum::<f64>() - delta;
    Ok(Attribution {
        values,
        baseline,
        steps,
        class,
        residual,
    })
}

/// Predicted target class for `x` (ties to class 0).
pub fn predicted_class(model: &TwoHeadModel, x: &[f64]) -> Result<usize> {
    let logits = model.forward_target(&Tensor::vector(x.to_vec())?)?;
    Ok(argmax(logits.data()))
}

/// Attribution laid out as a `grid × grid` block of text, one row per line.
pub fn heatmap_text(values: &[f64], grid: usize) -> String {
    values
        .chunks(grid)
        .map(|row| {
            row.iter()
                .map(|v| format!("{v:+.4e}"))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;

    #[test]
    fn zero_path_gives_zero_attribution() {
        let m = TwoHeadModel::new(Architecture::new(5, vec![4], 2).unwrap(), 2).unwrap();
        let x = vec![0.3, 0.1, 0.8, 0.5, 0.2];
        let att = integrated_gradients(&m, &x, 1, Some(&x), 20).unwrap();
        assert!(att.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_arguments() {
        let m = TwoHeadModel::new(Architecture::new(3, vec![2], 2).unwrap(), 2).unwrap();
        assert!(integrated_gradients(&m, &[0.1; 3], 0, None, 0).is_err());
        assert!(matches!(
            integrated_gradients(&m, &[0.1; 3], 0, Some(&[0.0; 2]), 5),
            Err(Error::Shape(_))
        ));
        assert!(integrated_gradients(&m, &[0.1; 3], 2, None, 5).is_err());
    }

    #[test]
    fn sweep_zero_row_matches_clean_forward() {
        let m = TwoHeadModel::new(Architecture::new(4, vec![3], 2).unwrap(), 6).unwrap();
        let s = Sample { features: vec![0.2, 0.9, 0.4, 0.6], y: 1, a: 0 };
        let curve = robustness_sweep(&m, &s, &[0.1, 0.0], &AttackConfig::fgsm(0.0)).unwrap();
        assert_eq!(curve.rows[0].eps, 0.0);
        let x = Tensor::vector(s.features.clone()).unwrap();
        let pt = softmax_row(m.forward_target(&x).unwrap().data())[1];
        let pp = softmax_row(m.forward_protected(&x).unwrap().data())[0];
        assert_eq!(curve.rows[0].p_target.to_bits(), pt.to_bits());
        assert_eq!(curve.rows[0].p_protected.to_bits(), pp.to_bits());
        assert!(!curve.rows[0].flipped_target && !curve.rows[0].flipped_protected);
        assert!(robustness_sweep(&m, &s, &[], &AttackConfig::fgsm(0.0)).is_err());
    }

    #[test]
    fn heatmap_has_grid_lines() {
        let text = heatmap_text(&[0.0; 16], 4);
        assert_eq!(text.lines().count(), 4);
    }
}
