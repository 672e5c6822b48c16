//! Synthetic biased dataset with a tunable spurious correlation between the
//! target label `y` and the protected attribute `a`, plus binary and CSV I/O.
//!
//! Each sample is a `g × g` grid flattened row-major. Background pixels are
//! `Normal(0.5, σ)` clamped to `[0, 1]`. A positive target adds `s` to the
//! horizontal bar at row `⌊g/4⌋`; a positive protected attribute adds `s` to
//! the left column. `P(a = y) = bias`, so `corr(y, a) → 2·bias − 1`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::rng_from;

pub const DATASET_MAGIC: &[u8; 7] = b"ASACDS1";
const HEADER_LEN: u64 = 7 + 8 + 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub y: u8,
    pub a: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    dim: usize,
    samples: Vec<Sample>,
}

impl Dataset {
    /// Validates that every sample has `dim` features in `[0, 1]` and binary labels.
    pub fn new(dim: usize, samples: Vec<Sample>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != dim {
                return Err(Error::Shape(format!(
                    "sample {i} has {} features, expected {dim}",
                    s.features.len()
                )));
            }
            if s.features.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Config(format!("sample {i} has a feature outside [0, 1]")));
            }
            if s.y > 1 || s.a > 1 {
                return Err(Error::Config(format!("sample {i} has a non-binary label")));
            }
        }
        Ok(Self { dim, samples })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn get(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    /// Side of the square grid, if `dim` is a perfect square.
    pub fn grid_side(&self) -> Option<usize> {
        let g = (self.dim as f64).sqrt().round() as usize;
        (g * g == self.dim).then_some(g)
    }

    /// `[indices.len() × dim]` feature matrix in the given row order.
    pub fn feature_matrix(&self, indices: &[usize]) -> Result<Tensor> {
        let rows: Vec<&[f64]> = indices
            .iter()
            .map(|&i| self.samples[i].features.as_slice())
            .collect();
        Tensor::from_rows(&rows)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            dim: self.dim,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Pearson correlation between `y` and `a`.
    pub fn label_correlation(&self) -> f64 {
        let pairs: Vec<(f64, f64)> = self
            .samples
            .iter()
            .map(|s| (s.y as f64, s.a as f64))
            .collect();
        pearson(&pairs)
    }
}

fn pearson(pairs: &[(f64, f64)]) -> f64 {
    let n = pairs.len() as f64;
    let (mx, my) = pairs
        .iter()
        .fold((0.0, 0.0), |(sx, sy), (x, y)| (sx + x, sy + y));
    let (mx, my) = (mx / n, my / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub n: usize,
    /// Grid side `g`; samples have `g²` features.
    pub grid: usize,
    /// `P(a = y)`.
    pub bias: f64,
    /// Background standard deviation.
    pub noise: f64,
    /// Amplitude added to the target bar and protected column.
    pub signal: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n: 4000,
            grid: 8,
            bias: 0.8,
            noise: 0.1,
            signal: 0.3,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.5..=1.0).contains(&self.bias) {
            return Err(Error::Config(format!("bias must be in [0.5, 1], got {}", self.bias)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be >= 0, got {}", self.noise)));
        }
        if self.grid < 4 {
            return Err(Error::Config(format!("grid must be >= 4, got {}", self.grid)));
        }
        if !self.signal.is_finite() {
            return Err(Error::Config("signal must be finite".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.grid * self.grid
    }

    /// Row index of the target bar.
    pub fn target_row(&self) -> usize {
        self.grid / 4
    }
}

/// Flat indices of the target bar for a `grid × grid` sample.
pub fn target_region(grid: usize) -> Vec<usize> {
    let row = grid / 4;
    (0..grid).map(|c| row * grid + c).collect()
}

/// Flat indices of the protected column for a `grid × grid` sample.
pub fn protected_region(grid: usize) -> Vec<usize> {
    (0..grid).map(|r| r * grid).collect()
}

pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = rng_from(cfg.seed);
    let background = Normal::new(0.5, cfg.noise)
        .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
    let g = cfg.grid;
    let bar = target_region(g);
    let column = protected_region(g);
    let mut samples = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let y = u8::from(rng.random_bool(0.5));
        let a = if rng.random_bool(cfg.bias) { y } else { 1 - y };
        let mut features: Vec<f64> = (0..g * g)
            .map(|_| background.sample(&mut rng).clamp(0.0, 1.0))
            .collect();
        if y == 1 {
            for &i in &bar {
                features[i] += cfg.signal;
            }
        }
        if a == 1 {
            for &i in &column {
                features[i] += cfg.signal;
            }
        }
        for v in &mut features {
            *v = v.clamp(0.0, 1.0);
        }
        samples.push(Sample { features, y, a });
    }
    Dataset::new(g * g, samples)
}

/// Seeded shuffle, then the first `⌊train·n⌋` samples become the train part.
pub fn split(dataset: &Dataset, fractions: (f64, f64), seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = fractions;
    let valid = |f: f64| (0.0..=1.0).contains(&f);
    if !valid(train) || !valid(test) || (train + test - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must lie in [0, 1] and sum to 1, got ({train}, {test})"
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng_from(seed));
    let n_train = ((train * dataset.len() as f64).floor() as usize).min(dataset.len());
    Ok((dataset.subset(&order[..n_train]), dataset.subset(&order[n_train..])))
}

/// Exact byte size of a dataset file.
pub fn encoded_len(n: usize, dim: usize) -> u64 {
    HEADER_LEN + n as u64 * (8 * dim as u64 + 2)
}

pub fn encode(dataset: &Dataset) -> Vec<u8> {
    let mut buf = Vec::with_capacity(encoded_len(dataset.len(), dataset.dim) as usize);
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&(dataset.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(dataset.dim as u64).to_le_bytes());
    for s in &dataset.samples {
        for v in &s.features {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.push(s.y);
        buf.push(s.a);
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(DATASET_MAGIC.len(), "magic")?;
    if magic != DATASET_MAGIC {
        return Err(Error::format(
            0,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(magic),
                std::str::from_utf8(DATASET_MAGIC).expect("ascii")
            ),
        ));
    }
    let n = r.u64("sample count")? as usize;
    let dim_offset = r.pos as u64;
    let dim = r.u64("feature dimension")? as usize;
    if dim == 0 {
        return Err(Error::format(dim_offset, "feature dimension is zero"));
    }
    let expected = encoded_len(n, dim);
    if (bytes.len() as u64) < expected {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated: header promises {expected} bytes, file has {}", bytes.len()),
        ));
    }
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let start = r.pos as u64;
        let features: Vec<f64> = r
            .take(8 * dim, "features")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if features.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::format(start, "feature outside [0, 1]"));
        }
        let labels = r.take(2, "labels")?;
        if labels[0] > 1 || labels[1] > 1 {
            return Err(Error::format(r.pos as u64 - 2, "non-binary label"));
        }
        samples.push(Sample {
            features,
            y: labels[0],
            a: labels[1],
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after last sample"));
    }
    Dataset::new(dim, samples)
}

pub fn save(dataset: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode(dataset))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            Error::MissingArtifact(format!("dataset {} not found", path.display()))
        }
        _ => Error::Io(e),
    })?;
    decode(&bytes)
}

/// CSV with header `f0,…,f{d-1},y,a`.
pub fn write_csv<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    let header: Vec<String> = (0..dataset.dim)
        .map(|i| format!("f{i}"))
        .chain(["y".to_string(), "a".to_string()])
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for s in &dataset.samples {
        let mut line: Vec<String> = s.features.iter().map(|v| v.to_string()).collect();
        line.push(s.y.to_string());
        line.push(s.a.to_string());
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(bias: f64, n: usize) -> GenConfig {
        GenConfig {
            seed: 11,
            n,
            bias,
            ..GenConfig::default()
        }
    }

    #[test]
    fn independent_labels_when_unbiased() {
        let ds = generate(&cfg(0.5, 10_000)).unwrap();
        let c = ds.label_correlation();
        assert!(c.abs() <= 0.04, "corr {c}");
    }

    #[test]
    fn full_bias_copies_label() {
        let ds = generate(&cfg(1.0, 500)).unwrap();
        assert!(ds.samples().iter().all(|s| s.a == s.y));
    }

    #[test]
    fn bias_0615_gives_correlation_near_023() {
        let ds = generate(&cfg(0.615, 10_000)).unwrap();
        let c = ds.label_correlation();
        assert!((c - 0.23).abs() <= 0.03, "corr {c}");
    }

    #[test]
    fn features_stay_in_unit_box() {
        let ds = generate(&GenConfig {
            noise: 0.5,
            signal: 0.9,
            ..cfg(0.8, 300)
        })
        .unwrap();
        assert!(ds
            .samples()
            .iter()
            .all(|s| s.features.iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn generation_is_seed_deterministic() {
        assert_eq!(generate(&cfg(0.8, 200)).unwrap(), generate(&cfg(0.8, 200)).unwrap());
    }

    #[test]
    fn signal_regions_overlap_in_one_pixel() {
        let bar = target_region(8);
        let col = protected_region(8);
        assert_eq!(bar.iter().filter(|i| col.contains(i)).count(), 1);
    }

    #[test]
    fn invalid_configs_rejected() {
        for bad in [
            GenConfig { bias: 0.4, ..GenConfig::default() },
            GenConfig { bias: 1.1, ..GenConfig::default() },
            GenConfig { noise: -0.1, ..GenConfig::default() },
            GenConfig { grid: 3, ..GenConfig::default() },
        ] {
            assert!(matches!(generate(&bad), Err(Error::Config(_))));
        }
    }

    #[test]
    fn round_trip_and_size() {
        let ds = generate(&cfg(0.8, 37)).unwrap();
        let bytes = encode(&ds);
        assert_eq!(bytes.len() as u64, encoded_len(37, 64));
        assert_eq!(decode(&bytes).unwrap(), ds);
    }

    #[test]
    fn truncated_file_is_format_error() {
        let ds = generate(&cfg(0.8, 5)).unwrap();
        let bytes = encode(&ds);
        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
    }

    #[test]
    fn wrong_magic_names_expected() {
        let mut bytes = encode(&generate(&cfg(0.8, 2)).unwrap());
        bytes[0] = b'X';
        let err = decode(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
        assert!(err.to_string().contains("ASACDS1"));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = generate(&cfg(0.8, 101)).unwrap();
        let (tr, te) = split(&ds, (0.8, 0.2), 4).unwrap();
        assert_eq!(tr.len(), 80);
        assert_eq!(te.len(), 21);
        let (tr2, te2) = split(&ds, (0.8, 0.2), 4).unwrap();
        assert_eq!((tr, te), (tr2, te2));
        let (all, none) = split(&ds, (1.0, 0.0), 4).unwrap();
        assert_eq!(all.len(), 101);
        assert!(none.is_empty());
        assert!(matches!(split(&ds, (0.7, 0.2), 4), Err(Error::Config(_))));
    }

    #[test]
    fn split_is_a_partition() {
        let ds = generate(&cfg(0.8, 50)).unwrap();
        let (tr, te) = split(&ds, (0.6, 0.4), 9).unwrap();
        let mut all: Vec<_> = tr.samples().iter().chain(te.samples()).cloned().collect();
        let mut orig = ds.samples().to_vec();
        let key = |s: &Sample| s.features.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        all.sort_by_key(key);
        orig.sort_by_key(key);
        assert_eq!(all, orig);
    }

    #[test]
    fn csv_header() {
        let ds = generate(&cfg(0.8, 2)).unwrap();
        let mut out = Vec::new();
        write_csv(&ds, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let header = text.lines().next().unwrap();
        assert!(header.starts_with("f0,f1,"));
        assert!(header.ends_with("f63,y,a"));
        assert_eq!(text.lines().count(), 3);
    }
}
