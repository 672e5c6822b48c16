//! Binary checkpoint format.
//!
//! ```text
//! magic        8 bytes  "ASACCKPT"
//! version      u32
//! init_seed    u64
//! master_seed  u64
//! digest       32 bytes (config digest, zero if none)
//! input_dim    u64
//! n_hidden     u64, then n_hidden × u64 widths
//! target       u64 classes
//! protected    u64 classes (always 2)
//! stage        u8   bit 0 = target trained, bit 1 = protected trained
//! n_params     u64
//! params       n_params × f64, declaration order
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::{Architecture, Dense, Stage, TwoHeadModel, PROTECTED_CLASSES};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ASACCKPT";
const VERSION: u32 = 1;

/// Provenance carried alongside the parameters.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub master_seed: u64,
    pub config_digest: [u8; 32],
}

pub fn encode_checkpoint(model: &TwoHeadModel, meta: &CheckpointMeta) -> Vec<u8> {
    let arch = model.architecture();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&model.init_seed().to_le_bytes());
    buf.extend_from_slice(&meta.master_seed.to_le_bytes());
    buf.extend_from_slice(&meta.config_digest);
    buf.extend_from_slice(&(arch.input_dim as u64).to_le_bytes());
    buf.extend_from_slice(&(arch.hidden.len() as u64).to_le_bytes());
    for &h in &arch.hidden {
        buf.extend_from_slice(&(h as u64).to_le_bytes());
    }
    buf.extend_from_slice(&(arch.target_classes as u64).to_le_bytes());
    buf.extend_from_slice(&(PROTECTED_CLASSES as u64).to_le_bytes());
    let stage = model.stage();
    buf.push(u8::from(stage.target_trained) | (u8::from(stage.protected_trained) << 1));
    buf.extend_from_slice(&(model.param_count() as u64).to_le_bytes());
    for p in model.params() {
        for v in p.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated checkpoint while reading {what}"),
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

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(TwoHeadModel, CheckpointMeta)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"ASACCKPT\""));
    }
    let version = u32::from_le_bytes(c.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::format(8, format!("unsupported checkpoint version {version}")));
    }
    let init_seed = c.u64("init seed")?;
    let master_seed = c.u64("master seed")?;
    let config_digest: [u8; 32] = c.take(32, "config digest")?.try_into().expect("32 bytes");
    let input_dim = c.u64("input dim")? as usize;
    let n_hidden_at = c.pos as u64;
    let n_hidden = c.u64("hidden count")? as usize;
    if n_hidden > 64 {
        return Err(Error::format(n_hidden_at, format!("implausible hidden layer count {n_hidden}")));
    }
    let hidden = (0..n_hidden)
        .map(|_| c.u64("hidden width").map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let target_classes = c.u64("target classes")? as usize;
    let protected_at = c.pos as u64;
    if c.u64("protected classes")? as usize != PROTECTED_CLASSES {
        return Err(Error::format(protected_at, "protected head must have 2 classes"));
    }
    let arch = Architecture::new(input_dim, hidden, target_classes)
        .map_err(|e| Error::format(protected_at, format!("invalid architecture: {e}")))?;
    let flags = c.take(1, "stage flags")?[0];
    let stage = Stage {
        target_trained: flags & 1 != 0,
        protected_trained: flags & 2 != 0,
    };
    let count_at = c.pos as u64;
    let n_params = c.u64("parameter count")? as usize;
    if n_params != arch.param_count() {
        return Err(Error::format(
            count_at,
            format!("{n_params} parameters recorded, architecture needs {}", arch.param_count()),
        ));
    }

    let read_tensor = |shape: Vec<usize>, c: &mut Cursor<'_>| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let at = c.pos as u64;
        let data = c
            .take(8 * n, "parameters")?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::format(at, e.to_string()))
    };
    let dims = arch.layer_dims();
    let mut layers = Vec::with_capacity(dims.len());
    for &(i, o) in &dims {
        let weight = read_tensor(vec![i, o], &mut c)?;
        let bias = read_tensor(vec![o], &mut c)?;
        layers.push(Dense { weight, bias });
    }
    if c.pos != bytes.len() {
        return Err(Error::format(c.pos as u64, "trailing bytes after parameters"));
    }
    let protected = layers.pop().expect("protected layer");
    let target = layers.pop().expect("target layer");
    let model = TwoHeadModel::from_parts(arch, layers, target, protected, init_seed, stage);
    Ok((
        model,
        CheckpointMeta {
            master_seed,
            config_digest,
        },
    ))
}

pub fn save_checkpoint(model: &TwoHeadModel, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model, meta))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(TwoHeadModel, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            Error::MissingArtifact(format!("checkpoint {} not found", path.display()))
        }
        _ => Error::Io(e),
    })?;
    decode_checkpoint(&bytes)
}
