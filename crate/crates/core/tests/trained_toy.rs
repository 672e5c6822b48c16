use asac_core::analysis::predicted_class;
use asac_core::attacks::{attack_rows, flip_rate, make_asac_batch, AttackConfig};
use asac_core::curriculum::difficulty_score;
use asac_core::data::{self, target_region, Dataset, GenConfig, Sample};
use asac_core::model::{train_joint, Architecture, TrainConfig, TwoHeadModel};
use asac_core::numerics::{argmax, Tensor};

fn toy(seed: u64) -> (TwoHeadModel, Dataset, Dataset) {
    let full = data::generate(&GenConfig { seed, n: 2000, ..GenConfig::default() }).unwrap();
    let (train, test) = data::split(&full, (0.8, 0.2), seed).unwrap();
    let model = TwoHeadModel::new(Architecture::default_for(train.dim()), seed).unwrap();
    let cfg = TrainConfig { epochs: 30, seed, ..TrainConfig::default() };
    (train_joint(&model, &train, &cfg).unwrap().model, train, test)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn plain(grid: usize) -> Vec<f64> {
    vec![0.5; grid * grid]
}

#[test]
fn trained_heads_read_their_signals() {
    let (model, _, _) = toy(1);
    let mut bar = plain(8);
    for i in target_region(8) {
        bar[i] += 0.3;
    }
    assert_eq!(predicted_class(&model, &bar).unwrap(), 1);
    let mut column = plain(8);
    for i in data::protected_region(8) {
        column[i] += 0.3;
    }
    let logits = model.forward_protected(&Tensor::vector(column).unwrap()).unwrap();
    assert_eq!(argmax(logits.data()), 1);
}

fn correct_protected(model: &TwoHeadModel, test: &Dataset) -> Vec<usize> {
    (0..test.len())
        .filter(|&i| {
            let s = test.get(i);
            let logits = model.forward_protected(&Tensor::vector(s.features.clone()).unwrap()).unwrap();
            argmax(logits.data()) == usize::from(s.a)
        })
        .collect()
}

fn attack_flip_rate(model: &TwoHeadModel, test: &Dataset, idx: &[usize], cfg: &AttackConfig) -> f64 {
    let x = test.feature_matrix(idx).unwrap();
    let labels: Vec<usize> = idx.iter().map(|&i| usize::from(test.get(i).a)).collect();
    let adv = attack_rows(model, &x, &labels, cfg).unwrap();
    flip_rate(model, &x, &adv).unwrap()
}

#[test]
fn fgsm_flips_most_protected_predictions() {
    let (model, _, test) = toy(2);
    let idx = correct_protected(&model, &test);
    let rate = attack_flip_rate(&model, &test, &idx, &AttackConfig::fgsm(0.05));
    assert!(rate >= 0.6, "flip rate {rate}");
}

#[test]
fn pgd_dominates_fgsm() {
    let mut gaps = Vec::new();
    for seed in 0..5 {
        let (model, _, test) = toy(seed);
        let idx = correct_protected(&model, &test);
        let f = attack_flip_rate(&model, &test, &idx, &AttackConfig::fgsm(0.05));
        let p = attack_flip_rate(&model, &test, &idx, &AttackConfig::pgd(0.05));
        gaps.push(p - f);
    }
    assert!(median(gaps.clone()) >= 0.0, "{gaps:?}");
}

#[test]
fn asacs_are_harder_than_their_sources() {
    let (model, train, _) = toy(4);
    let confident: Vec<usize> = (0..train.len())
        .filter(|&i| {
            let s: &Sample = train.get(i);
            let x = Tensor::vector(s.features.clone()).unwrap();
            let p = asac_core::numerics::softmax_row(model.forward_target(&x).unwrap().data());
            p[usize::from(s.y)] > 0.9
        })
        .take(200)
        .collect();
    assert!(!confident.is_empty());
    let clean = make_asac_batch(&model, &train, &confident, &AttackConfig::fgsm(0.0)).unwrap();
    let adv = make_asac_batch(&model, &train, &confident, &AttackConfig::fgsm(0.05)).unwrap();
    let harder = clean
        .iter()
        .zip(&adv)
        .filter(|(c, a)| {
            let y = train.get(c.source_index).y;
            difficulty_score(&model, c, y).unwrap() < difficulty_score(&model, a, y).unwrap()
        })
        .count();
    assert!(2 * harder > confident.len(), "{harder} of {}", confident.len());
}
