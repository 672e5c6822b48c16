use asac_core::analysis::{integrated_gradients, robustness_sweep};
use asac_core::data::{self, target_region, Dataset, GenConfig};
use asac_core::model::{load_checkpoint, train_joint, Architecture, TrainConfig, TwoHeadModel};
use asac_core::pipeline::*;
use tempfile::TempDir;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn briefly_trained(seed: u64) -> (TwoHeadModel, Dataset) {
    let ds = data::generate(&GenConfig { seed, n: 400, ..GenConfig::default() }).unwrap();
    let model = TwoHeadModel::new(Architecture::default_for(ds.dim()), seed).unwrap();
    let cfg = TrainConfig { epochs: 3, ..TrainConfig::default() };
    (train_joint(&model, &ds, &cfg).unwrap().model, ds)
}

#[test]
fn ig_residual_shrinks_with_steps() {
    let mut residuals = [0.0; 3];
    for seed in 0..10 {
        let (model, ds) = briefly_trained(seed);
        for s in ds.samples().iter().take(5) {
            for (slot, m) in [10, 50, 200].into_iter().enumerate() {
                let att = integrated_gradients(&model, &s.features, usize::from(s.y), None, m).unwrap();
                residuals[slot] += att.residual.abs();
            }
        }
    }
    assert!(residuals[1] <= 1.1 * residuals[0], "{residuals:?}");
    assert!(residuals[2] <= 1.1 * residuals[1], "{residuals:?}");
}

#[test]
fn successful_attacks_lower_protected_confidence() {
    let (model, ds) = briefly_trained(3);
    let grid = [0.0, 0.05, 0.1, 0.2];
    let cfg = ExperimentConfig::default().attack();
    let mut drops = Vec::new();
    for s in ds.samples().iter().take(60) {
        let curve = robustness_sweep(&model, s, &grid, &cfg).unwrap();
        let (first, last) = (&curve.rows[0], curve.rows.last().unwrap());
        if last.flipped_protected {
            drops.push(first.p_protected - last.p_protected);
        }
    }
    assert!(!drops.is_empty());
    assert!(median(drops) >= 0.0);
}

// Default data and base training, one seed.
fn default_run(dir: &std::path::Path) -> (ExperimentConfig, TwoHeadModel, TwoHeadModel, Dataset) {
    let cfg = ExperimentConfig { out_dir: dir.to_path_buf(), ..ExperimentConfig::default() };
    cmd_generate(&cfg).unwrap();
    cmd_train_base(&cfg).unwrap();
    cmd_finetune(&cfg).unwrap();
    let (base, _) = load_checkpoint(&dir.join(BASE_CHECKPOINT)).unwrap();
    let (tuned, _) = load_checkpoint(&dir.join(FINETUNED_CHECKPOINT)).unwrap();
    let (_, test) = load_split(&cfg).unwrap();
    (cfg, base, tuned, test)
}

#[test]
fn finetune_shifts_attribution_and_robustness() {
    let dir = TempDir::new().unwrap();
    let (cfg, base, tuned, test) = default_run(dir.path());
    let region = target_region(cfg.data_grid);
    let samples = &test.samples()[..100];

    let mass = |m: &TwoHeadModel| -> f64 {
        samples
            .iter()
            .map(|s| {
                integrated_gradients(m, &s.features, usize::from(s.y), None, cfg.ig_steps)
                    .unwrap()
                    .mass_fraction(&region)
            })
            .sum::<f64>()
    };
    let flips = |m: &TwoHeadModel| -> usize {
        samples
            .iter()
            .filter(|s| robustness_sweep(m, s, &[0.05], &cfg.attack()).unwrap().rows[0].flipped_target)
            .count()
    };
    let (mass_base, mass_tuned) = (mass(&base), mass(&tuned));
    let (flips_base, flips_tuned) = (flips(&base), flips(&tuned));
    println!("bar mass {mass_base:.4} -> {mass_tuned:.4}; target flips at 0.05 {flips_base} -> {flips_tuned}");
    assert!(mass_tuned > mass_base);
    assert!(flips_tuned <= flips_base);
}
