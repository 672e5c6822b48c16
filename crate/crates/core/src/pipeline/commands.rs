use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{BaseSchedule, ExperimentConfig};
use crate::analysis::{integrated_gradients, predicted_class, robustness_sweep};
use crate::curriculum::CurriculumOrder;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::fairness::{evaluate, protected_accuracy, FairnessReport};
use crate::finetune::{finetune_with, write_log_csv, EpochRecord};
use crate::model::{
    load_checkpoint, save_checkpoint, train_joint, train_probe, CheckpointMeta, Head, TwoHeadModel,
};

pub const TRAIN_FILE: &str = "train.bin";
pub const TEST_FILE: &str = "test.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BASE_CHECKPOINT: &str = "base.ckpt";
pub const BASE_REPORT: &str = "base_report.json";
pub const FINETUNED_CHECKPOINT: &str = "finetuned.ckpt";
pub const FINETUNED_REPORT: &str = "finetuned_report.json";
pub const FINETUNE_LOG: &str = "finetune_log.csv";

/// Digest and seed stamped on every artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_digest: String,
    pub master_seed: u64,
}

impl Provenance {
    pub fn of(cfg: &ExperimentConfig) -> Self {
        Self {
            config_digest: cfg.digest(),
            master_seed: cfg.seed,
        }
    }

    fn checkpoint_meta(cfg: &ExperimentConfig) -> CheckpointMeta {
        CheckpointMeta {
            master_seed: cfg.seed,
            config_digest: cfg.digest_bytes(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub provenance: Provenance,
    pub dim: usize,
    pub grid: usize,
    /// Pearson correlation of `y` and `a` over the full generated set.
    pub label_correlation: f64,
    pub train: FileEntry,
    pub test: FileEntry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub provenance: Provenance,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub target: FairnessReport,
    pub protected_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub provenance: Provenance,
    pub base_checkpoint_sha256: String,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub base: FairnessReport,
    pub target: FairnessReport,
    pub protected_accuracy: f64,
    pub history: Vec<EpochRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(read_artifact(path)?)))
}

fn read_artifact(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            Error::MissingArtifact(format!("{} not found", path.display()))
        }
        _ => Error::Io(e),
    })
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Numeric(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn out_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out_dir)?;
    Ok(&cfg.out_dir)
}

pub fn load_split(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let train = data::load(&cfg.out_dir.join(TRAIN_FILE))?;
    let test = data::load(&cfg.out_dir.join(TEST_FILE))?;
    let dim = cfg.architecture().input_dim;
    if train.dim() != dim || test.dim() != dim {
        return Err(Error::Config(format!(
            "datasets in {} have {} features, config expects {dim}",
            cfg.out_dir.display(),
            train.dim()
        )));
    }
    Ok((train, test))
}

/// Generate, split and write the datasets plus a manifest.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<Manifest> {
    let dir = out_dir(cfg)?;
    let full = data::generate(&cfg.gen_config())?;
    let (train, test) =
        data::split(&full, (cfg.train_fraction, 1.0 - cfg.train_fraction), cfg.split_seed())?;
    let mut entries = Vec::with_capacity(2);
    for (ds, file, csv) in [(&train, TRAIN_FILE, "train.csv"), (&test, TEST_FILE, "test.csv")] {
        let path = dir.join(file);
        data::save(ds, &path)?;
        let mut w = create(&dir.join(csv))?;
        data::write_csv(ds, &mut w)?;
        w.flush()?;
        entries.push(FileEntry {
            file: file.to_string(),
            bytes: fs::metadata(&path)?.len(),
            sha256: sha256_file(&path)?,
            samples: ds.len(),
        });
    }
    let test_entry = entries.pop().expect("two entries");
    let train_entry = entries.pop().expect("two entries");
    let manifest = Manifest {
        provenance: Provenance::of(cfg),
        dim: full.dim(),
        grid: cfg.data_grid,
        label_correlation: full.label_correlation(),
        train: train_entry,
        test: test_entry,
    };
    write_json(&manifest, &dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Train both heads per `base_schedule`. Writes the base checkpoint and its
/// report.
pub fn cmd_train_base(cfg: &ExperimentConfig) -> Result<ModelReport> {
    let (train, test) = load_split(cfg)?;
    let model = TwoHeadModel::new(cfg.architecture(), cfg.init_seed())?;
    let model = match cfg.base_schedule {
        BaseSchedule::Joint => train_joint(&model, &train, &cfg.base_train())?.model,
        BaseSchedule::Sequential => {
            let model = train_probe(&model, &train, Head::Target, &cfg.base_train())?.model;
            train_probe(&model, &train, Head::Protected, &cfg.probe_train())?.model
        }
    };
    let path = out_dir(cfg)?.join(BASE_CHECKPOINT);
    save_checkpoint(&model, &Provenance::checkpoint_meta(cfg), &path)?;
    let report = model_report(cfg, &model, &test, &path)?;
    write_json(&report, &cfg.out_dir.join(BASE_REPORT))?;
    Ok(report)
}

fn model_report(
    cfg: &ExperimentConfig,
    model: &TwoHeadModel,
    test: &Dataset,
    checkpoint: &Path,
) -> Result<ModelReport> {
    Ok(ModelReport {
        provenance: Provenance::of(cfg),
        checkpoint: file_name(checkpoint),
        checkpoint_sha256: sha256_file(checkpoint)?,
        target: evaluate(model, test)?,
        protected_accuracy: protected_accuracy(model, test)?,
    })
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn load_model(path: &Path) -> Result<TwoHeadModel> {
    let (model, _) = load_checkpoint(path)?;
    Ok(model)
}

fn load_base(cfg: &ExperimentConfig) -> Result<(TwoHeadModel, PathBuf)> {
    let path = cfg.out_dir.join(BASE_CHECKPOINT);
    let model = load_model(&path)?;
    if model.architecture() != &cfg.architecture() {
        return Err(Error::Config(format!(
            "{} was trained with a different architecture",
            path.display()
        )));
    }
    Ok((model, path))
}

/// Fine-tune from the base checkpoint. Writes one checkpoint per epoch, the
/// epoch log, the final checkpoint and the final report.
pub fn cmd_finetune(cfg: &ExperimentConfig) -> Result<FinetuneReport> {
    let (base, base_path) = load_base(cfg)?;
    let (train, test) = load_split(cfg)?;
    let dir = out_dir(cfg)?;
    let meta = Provenance::checkpoint_meta(cfg);
    let outcome = finetune_with(&base, &train, Some(&test), &cfg.finetune_config(), |m, rec| {
        save_checkpoint(m, &meta, &dir.join(format!("finetuned_epoch_{:02}.ckpt", rec.epoch)))
    })?;
    let path = dir.join(FINETUNED_CHECKPOINT);
    save_checkpoint(&outcome.model, &meta, &path)?;

    let prov = Provenance::of(cfg);
    let mut log = create(&dir.join(FINETUNE_LOG))?;
    write_log_csv(&outcome.history, &prov.config_digest, prov.master_seed, &mut log)?;
    log.flush()?;

    let report = FinetuneReport {
        provenance: prov,
        base_checkpoint_sha256: sha256_file(&base_path)?,
        checkpoint: file_name(&path),
        checkpoint_sha256: sha256_file(&path)?,
        base: evaluate(&base, &test)?,
        target: evaluate(&outcome.model, &test)?,
        protected_accuracy: protected_accuracy(&outcome.model, &test)?,
        history: outcome.history,
    };
    write_json(&report, &dir.join(FINETUNED_REPORT))?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Order,
    Eps,
    Alpha,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "order" => Ok(Self::Order),
            "eps" => Ok(Self::Eps),
            "alpha" => Ok(Self::Alpha),
            other => Err(Error::Config(format!(
                "unknown sweep axis {other:?} (expected order, eps or alpha)"
            ))),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Order => "order",
            Self::Eps => "eps",
            Self::Alpha => "alpha",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Self::Order => &["ascending", "descending", "random"],
            Self::Eps => &["0.001+0.01", "0.001+0.03", "0.001+0.05"],
            Self::Alpha => &["0.3", "0.5", "0.7"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// `cfg` with the swept field set to `value`. Eps values are `+`-joined
    /// magnitude sets; 0 is prepended when absent.
    pub fn apply(self, cfg: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut out = cfg.clone();
        match self {
            Self::Order => out.curriculum_order = CurriculumOrder::from_str(value)?,
            Self::Alpha => out.ft_alpha = parse_f64(value)?,
            Self::Eps => {
                let mut eps = vec![0.0];
                for part in value.split('+') {
                    let e = parse_f64(part)?;
                    if e != 0.0 {
                        eps.push(e);
                    }
                }
                out.curriculum_eps = eps;
            }
        }
        out.validate()?;
        Ok(out)
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {s:?} as a number")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub report: FairnessReport,
    pub provenance: Provenance,
}

/// One fine-tune per value, all from the same base checkpoint. Writes
/// `sweep_<axis>.csv`.
pub fn cmd_sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[String]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let runs = values
        .iter()
        .map(|v| axis.apply(cfg, v))
        .collect::<Result<Vec<_>>>()?;
    let (base, _) = load_base(cfg)?;
    let (train, test) = load_split(cfg)?;
    let mut rows = Vec::with_capacity(values.len());
    for (value, run) in values.iter().zip(&runs) {
        let outcome = finetune_with(&base, &train, None, &run.finetune_config(), |_, _| Ok(()))?;
        rows.push(SweepRow {
            value: value.clone(),
            report: evaluate(&outcome.model, &test)?,
            provenance: Provenance::of(run),
        });
    }
    let mut w = create(&out_dir(cfg)?.join(format!("sweep_{}.csv", axis.name())))?;
    writeln!(w, "axis,value,acc,ddp,deo,deop,config_digest,seed")?;
    for r in &rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            axis.name(),
            r.value,
            r.report.acc,
            na(r.report.ddp),
            na(r.report.deo),
            na(r.report.deop),
            r.provenance.config_digest,
            r.provenance.master_seed
        )?;
    }
    w.flush()?;
    Ok(rows)
}

fn na(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnalyzeMode {
    Sweep,
    Ig,
}

impl FromStr for AnalyzeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sweep" => Ok(Self::Sweep),
            "ig" => Ok(Self::Ig),
            other => Err(Error::Config(format!(
                "unknown analyze mode {other:?} (expected sweep or ig)"
            ))),
        }
    }
}

/// Robustness curves or IG attributions (of the predicted class) for the
/// first `analyze_samples` test samples. Returns the CSV path.
pub fn cmd_analyze(cfg: &ExperimentConfig, checkpoint: &Path, mode: AnalyzeMode) -> Result<PathBuf> {
    let model = load_model(checkpoint)?;
    let test = data::load(&cfg.out_dir.join(TEST_FILE))?;
    if test.dim() != model.architecture().input_dim {
        return Err(Error::Config(format!(
            "test set has {} features, checkpoint expects {}",
            test.dim(),
            model.architecture().input_dim
        )));
    }
    let n = cfg.analyze_samples.min(test.len());
    let prov = Provenance::of(cfg);
    let stem = checkpoint
        .file_stem()
        .map_or_else(|| "model".to_string(), |s| s.to_string_lossy().into_owned());
    let dir = out_dir(cfg)?;
    match mode {
        AnalyzeMode::Sweep => {
            let path = dir.join(format!("robustness_{stem}.csv"));
            let mut w = create(&path)?;
            writeln!(
                w,
                "sample,eps,p_target,p_protected,flipped_target,flipped_protected,config_digest,seed"
            )?;
            for i in 0..n {
                let curve = robustness_sweep(&model, test.get(i), &cfg.analyze_eps, &cfg.attack())?;
                for r in curve.rows {
                    writeln!(
                        w,
                        "{i},{},{},{},{},{},{},{}",
                        r.eps,
                        r.p_target,
                        r.p_protected,
                        u8::from(r.flipped_target),
                        u8::from(r.flipped_protected),
                        prov.config_digest,
                        prov.master_seed
                    )?;
                }
            }
            w.flush()?;
            Ok(path)
        }
        AnalyzeMode::Ig => {
            let path = dir.join(format!("ig_{stem}.csv"));
            let mut w = create(&path)?;
            let d = test.dim();
            let header: Vec<String> = (0..d).map(|j| format!("ig{j}")).collect();
            writeln!(w, "sample,class,residual,{},config_digest,seed", header.join(","))?;
            for i in 0..n {
                let s = test.get(i);
                let class = predicted_class(&model, &s.features)?;
                let att = integrated_gradients(&model, &s.features, class, None, cfg.ig_steps)?;
                let values: Vec<String> = att.values.iter().map(f64::to_string).collect();
                writeln!(
                    w,
                    "{i},{},{},{},{},{}",
                    att.class,
                    att.residual,
                    values.join(","),
                    prov.config_digest,
                    prov.master_seed
                )?;
            }
            w.flush()?;
            Ok(path)
        }
    }
}

/// Report for any checkpoint on the test split, written as
/// `evaluate_<stem>.json`.
pub fn cmd_evaluate(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<ModelReport> {
    let model = load_model(checkpoint)?;
    let test = data::load(&cfg.out_dir.join(TEST_FILE))?;
    let report = model_report(cfg, &model, &test, checkpoint)?;
    let stem = checkpoint
        .file_stem()
        .map_or_else(|| "model".to_string(), |s| s.to_string_lossy().into_owned());
    write_json(&report, &out_dir(cfg)?.join(format!("evaluate_{stem}.json")))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_axis_parsing() {
        assert_eq!("order".parse::<SweepAxis>().unwrap(), SweepAxis::Order);
        assert!(matches!("depth".parse::<SweepAxis>(), Err(Error::Config(_))));
        assert_eq!(SweepAxis::Alpha.default_values(), vec!["0.3", "0.5", "0.7"]);
    }

    #[test]
    fn apply_changes_only_the_swept_field() {
        let cfg = ExperimentConfig::default();
        let eps = SweepAxis::Eps.apply(&cfg, "0.001+0.03").unwrap();
        assert_eq!(eps.curriculum_eps, vec![0.0, 0.001, 0.03]);
        let mut expect = cfg.clone();
        expect.curriculum_eps = eps.curriculum_eps.clone();
        assert_eq!(eps, expect);
        assert!(SweepAxis::Alpha.apply(&cfg, "1.2").is_err());
        assert!(SweepAxis::Order.apply(&cfg, "sideways").is_err());
    }
}
