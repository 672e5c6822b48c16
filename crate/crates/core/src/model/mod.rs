//! Two-head classifier: a shared ReLU backbone feeding a target probe and a
//! protected-attribute probe.
//!
//! [`TwoHeadModel::target_classifier`] and
//! [`TwoHeadModel::protected_classifier`] hand out borrowed views that only
//! reach the backbone plus one probe. Code that holds a target view cannot
//! read the protected probe and vice versa.

mod checkpoint;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_MAGIC};
pub use optim::{clip_global_norm, Adam, AdamConfig};
pub use train::{train_joint, train_probe, TrainConfig, TrainOutcome};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, relu, GradTape, Tensor, Var};

/// The protected attribute is binary.
pub const PROTECTED_CLASSES: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub target_classes: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden: Vec<usize>, target_classes: usize) -> Result<Self> {
        let arch = Self {
            input_dim,
            hidden,
            target_classes,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// `input_dim → 64 → 32 → heads`, binary target.
    pub fn default_for(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![64, 32],
            target_classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(format!("layer widths must be positive: {self:?}")));
        }
        if self.target_classes < 2 {
            return Err(Error::Config(format!(
                "target head needs at least 2 classes, got {}",
                self.target_classes
            )));
        }
        Ok(())
    }

    /// Width of the representation shared by both probes.
    pub fn feature_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }

    /// `(fan_in, fan_out)` of every affine layer in declaration order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.target_classes));
        dims.push((prev, PROTECTED_CLASSES));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Affine layer `x · W + b` with `W: [fan_in × fan_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::from_parts(vec![fan_in, fan_out], vec![0.0; fan_in * fan_out]),
            bias: Tensor::from_parts(vec![fan_out], vec![0.0; fan_out]),
        }
    }

    /// Weights uniform in `[-1/√fan_in, 1/√fan_in]`, zero bias.
    pub fn uniform<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            weight: Tensor::from_parts(vec![fan_in, fan_out], weight),
            bias: Tensor::from_parts(vec![fan_out], vec![0.0; fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = matmul(x, &self.weight)?;
        let cols = self.fan_out();
        let bias = self.bias.data();
        for row in out.data_mut().chunks_mut(cols) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Target,
    Protected,
}

/// Which training stages a model has been through.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Stage {
    pub target_trained: bool,
    pub protected_trained: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoHeadModel {
    arch: Architecture,
    backbone: Vec<Dense>,
    target: Dense,
    protected: Dense,
    init_seed: u64,
    stage: Stage,
}

impl TwoHeadModel {
    /// Randomly initialised model.
    pub fn new(arch: Architecture, init_seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = crate::rng::rng_from(init_seed);
        let dims = arch.layer_dims();
        let n_hidden = arch.hidden.len();
        let backbone = dims[..n_hidden]
            .iter()
            .map(|&(i, o)| Dense::uniform(i, o, &mut rng))
            .collect();
        let (ti, to) = dims[n_hidden];
        let target = Dense::uniform(ti, to, &mut rng);
        let (pi, po) = dims[n_hidden + 1];
        let protected = Dense::uniform(pi, po, &mut rng);
        Ok(Self {
            arch,
            backbone,
            target,
            protected,
            init_seed,
            stage: Stage::default(),
        })
    }

    /// Model with every parameter set to zero.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let dims = arch.layer_dims();
        let n_hidden = arch.hidden.len();
        let backbone = dims[..n_hidden].iter().map(|&(i, o)| Dense::zeros(i, o)).collect();
        let (ti, to) = dims[n_hidden];
        let (pi, po) = dims[n_hidden + 1];
        Ok(Self {
            arch,
            backbone,
            target: Dense::zeros(ti, to),
            protected: Dense::zeros(pi, po),
            init_seed: 0,
            stage: Stage::default(),
        })
    }

    /// Untrained model assembled from explicit layers. Widths must chain and
    /// the protected probe must have two outputs.
    pub fn from_layers(backbone: Vec<Dense>, target: Dense, protected: Dense) -> Result<Self> {
        let input_dim = backbone.first().unwrap_or(&target).fan_in();
        let arch = Architecture::new(
            input_dim,
            backbone.iter().map(Dense::fan_out).collect(),
            target.fan_out(),
        )?;
        let layers = backbone.iter().chain([&target, &protected]);
        for (layer, &(i, o)) in layers.zip(&arch.layer_dims()) {
            if layer.weight.shape() != [i, o] || layer.bias.shape() != [o] {
                return Err(Error::Shape(format!(
                    "layer with weight {:?} and bias {:?} does not fit {i} -> {o}",
                    layer.weight.shape(),
                    layer.bias.shape()
                )));
            }
        }
        Ok(Self::from_parts(arch, backbone, target, protected, 0, Stage::default()))
    }

    pub(crate) fn from_parts(
        arch: Architecture,
        backbone: Vec<Dense>,
        target: Dense,
        protected: Dense,
        init_seed: u64,
        stage: Stage,
    ) -> Self {
        Self {
            arch,
            backbone,
            target,
            protected,
            init_seed,
            stage,
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub(crate) fn stage_mut(&mut self) -> &mut Stage {
        &mut self.stage
    }

    pub fn backbone(&self) -> &[Dense] {
        &self.backbone
    }

    pub fn target_probe(&self) -> &Dense {
        &self.target
    }

    pub fn protected_probe(&self) -> &Dense {
        &self.protected
    }

    /// M(θ, ρ).
    pub fn target_classifier(&self) -> Classifier<'_> {
        Classifier {
            backbone: &self.backbone,
            probe: &self.target,
            input_dim: self.arch.input_dim,
        }
    }

    /// C(θ, φ).
    pub fn protected_classifier(&self) -> Classifier<'_> {
        Classifier {
            backbone: &self.backbone,
            probe: &self.protected,
            input_dim: self.arch.input_dim,
        }
    }

    pub fn classifier(&self, head: Head) -> Classifier<'_> {
        match head {
            Head::Target => self.target_classifier(),
            Head::Protected => self.protected_classifier(),
        }
    }

    /// Backbone activations consumed by both probes.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.target_classifier().features(x)
    }

    pub fn forward_target(&self, x: &Tensor) -> Result<Tensor> {
        self.target_classifier().logits(x)
    }

    pub fn forward_protected(&self, x: &Tensor) -> Result<Tensor> {
        self.protected_classifier().logits(x)
    }

    /// Backbone activations plus both heads' logits from one backbone pass.
    pub fn forward_both(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let classifier = self.target_classifier();
        let features = classifier.features(x)?;
        let target = classifier.head_from_features(&self.target, &features, x.shape().len())?;
        let protected =
            classifier.head_from_features(&self.protected, &features, x.shape().len())?;
        Ok((features, target, protected))
    }

    /// Every parameter in declaration order: backbone layers (weight, bias),
    /// then target probe, then protected probe.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * self.backbone.len() + 4);
        for layer in &self.backbone {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        out.extend([
            &self.target.weight,
            &self.target.bias,
            &self.protected.weight,
            &self.protected.bias,
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Parameters updated when training `group`, in declaration order.
    pub(crate) fn group_mut(&mut self, group: ParamGroup) -> Vec<&mut Tensor> {
        match group {
            ParamGroup::TargetPath => {
                let mut out = Vec::with_capacity(2 * self.backbone.len() + 2);
                for layer in &mut self.backbone {
                    out.push(&mut layer.weight);
                    out.push(&mut layer.bias);
                }
                out.push(&mut self.target.weight);
                out.push(&mut self.target.bias);
                out
            }
            ParamGroup::ProtectedProbe => {
                vec![&mut self.protected.weight, &mut self.protected.bias]
            }
            ParamGroup::All => self.params_mut(),
        }
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 * self.backbone.len() + 4);
        for layer in &mut self.backbone {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.extend([
            &mut self.target.weight,
            &mut self.target.bias,
            &mut self.protected.weight,
            &mut self.protected.bias,
        ]);
        out
    }

    /// Same parameters, bit for bit.
    pub fn same_bits(&self, other: &TwoHeadModel) -> bool {
        self.arch == other.arch
            && self
                .params()
                .iter()
                .zip(other.params())
                .all(|(a, b)| a.same_bits(b))
    }
}

/// Parameter subsets that training updates together.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ParamGroup {
    /// θ and ρ.
    TargetPath,
    /// φ only.
    ProtectedProbe,
    /// θ, ρ and φ.
    All,
}

/// Borrowed view of the backbone plus one probe.
#[derive(Clone, Copy, Debug)]
pub struct Classifier<'a> {
    backbone: &'a [Dense],
    probe: &'a Dense,
    input_dim: usize,
}

impl<'a> Classifier<'a> {
    fn as_batch(&self, x: &Tensor) -> Result<Tensor> {
        match x.shape() {
            [d] if *d == self.input_dim => Ok(Tensor::from_parts(vec![1, *d], x.data().to_vec())),
            [_, d] if *d == self.input_dim => Ok(x.clone()),
            s => Err(Error::Shape(format!(
                "expected input of width {}, got shape {s:?}",
                self.input_dim
            ))),
        }
    }

    fn features_batch(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.as_batch(x)?;
        for layer in self.backbone {
            h = relu(&layer.apply(&h)?);
        }
        Ok(h)
    }

    /// Backbone output with the same rank as `x`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.features_batch(x)?;
        Ok(match x.shape().len() {
            1 => Tensor::from_parts(vec![h.len()], h.into_data()),
            _ => h,
        })
    }

    fn head_from_features(&self, probe: &Dense, features: &Tensor, rank: usize) -> Result<Tensor> {
        let batch = match features.shape() {
            [n] => Tensor::from_parts(vec![1, *n], features.data().to_vec()),
            _ => features.clone(),
        };
        let out = probe.apply(&batch)?;
        Ok(match rank {
            1 => Tensor::from_parts(vec![out.len()], out.into_data()),
            _ => out,
        })
    }

    /// Logits with the same rank as `x` (`[d] → [classes]`, `[B×d] → [B×classes]`).
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.features_batch(x)?;
        self.head_from_features(self.probe, &h, x.shape().len())
    }

    pub fn classes(&self) -> usize {
        self.probe.fan_out()
    }

    /// Record this classifier's parameters on `tape`.
    pub fn bind(&self, tape: &mut GradTape, track_backbone: bool, track_probe: bool) -> Bound {
        let mut put = |t: &Tensor, tracked: bool| {
            if tracked {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let backbone = self
            .backbone
            .iter()
            .map(|l| (put(&l.weight, track_backbone), put(&l.bias, track_backbone)))
            .collect();
        let probe = (
            put(&self.probe.weight, track_probe),
            put(&self.probe.bias, track_probe),
        );
        Bound { backbone, probe }
    }
}

/// Tape variables for one classifier's parameters.
#[derive(Clone, Debug)]
pub struct Bound {
    backbone: Vec<(Var, Var)>,
    probe: (Var, Var),
}

impl Bound {
    /// Logits `[B × classes]` for a `[B × d]` input variable.
    pub fn forward(&self, tape: &mut GradTape, x: Var) -> Result<Var> {
        let mut h = x;
        for &(w, b) in &self.backbone {
            let z = tape.matmul(h, w)?;
            let z = tape.add_row(z, b)?;
            h = tape.relu(z)?;
        }
        let z = tape.matmul(h, self.probe.0)?;
        tape.add_row(z, self.probe.1)
    }

    /// Backbone variables followed by the probe, matching declaration order.
    pub fn vars(&self) -> Vec<Var> {
        self.backbone
            .iter()
            .flat_map(|&(w, b)| [w, b])
            .chain([self.probe.0, self.probe.1])
            .collect()
    }

    pub fn probe_vars(&self) -> Vec<Var> {
        vec![self.probe.0, self.probe.1]
    }

    /// Same backbone variables with a different probe bound on `tape`.
    pub fn with_probe(&self, tape: &mut GradTape, probe: &Dense, track: bool) -> Bound {
        let put = |tape: &mut GradTape, t: &Tensor| {
            if track {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let w = put(tape, &probe.weight);
        let b = put(tape, &probe.bias);
        Bound {
            backbone: self.backbone.clone(),
            probe: (w, b),
        }
    }
}
