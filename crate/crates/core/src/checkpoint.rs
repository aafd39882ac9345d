//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DMF1" | version u32 | config_len u64 | config TOML (UTF-8)
//! | tensor table | step u64 | EMA tensor table
//! tensor table = count u64, then per tensor:
//!     name_len u32 | name | dtype u8 (0 = f32, 1 = f64) | rank u32
//!     | extents u64 × rank | row-major payload
//! ```
//!
//! The model table holds parameters and batch-norm buffers. An empty EMA
//! table means no shadow weights were saved.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::Module;
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: [u8; 4] = *b"DMF1";
pub const VERSION: u32 = 1;

pub type NamedTensors<T> = Vec<(String, Tensor<T>)>;

/// Decoded checkpoint contents.
pub struct Checkpoint<T: Element> {
    pub config: ModelConfig,
    pub tensors: NamedTensors<T>,
    pub step: u64,
    pub ema: NamedTensors<T>,
}

impl<T: Element> Checkpoint<T> {
    pub fn capture(model: &Model<T>, step: u64, ema: Option<&NamedTensors<T>>) -> Self {
        Checkpoint {
            config: model.config.clone(),
            tensors: model.named_state().into_iter().map(|(n, t, _)| (n, t)).collect(),
            step,
            ema: ema.cloned().unwrap_or_default(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config.to_toml();
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        write_table(&mut out, &self.tensors);
        out.extend_from_slice(&self.step.to_le_bytes());
        write_table(&mut out, &self.ema);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic).into());
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            }
            .into());
        }
        let len = r.len("config length")?;
        let text = std::str::from_utf8(r.take(len, "config")?)
            .map_err(|_| CheckpointError::Malformed("config is not UTF-8".into()))?;
        let config = ModelConfig::from_toml(text)?;
        let tensors = read_table(&mut r)?;
        let step = r.u64("step")?;
        let ema = read_table(&mut r)?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)).into());
        }
        Ok(Checkpoint {
            config,
            tensors,
            step,
            ema,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Builds the stored model and loads its tensors.
    pub fn into_model(self) -> Result<(Model<T>, u64, NamedTensors<T>)> {
        let mut model = Model::new(self.config.clone())?;
        assign_state(&mut model, &self.tensors)?;
        Ok((model, self.step, self.ema))
    }
}

pub fn save_checkpoint<T: Element>(
    model: &Model<T>,
    step: u64,
    ema: Option<&NamedTensors<T>>,
    path: impl AsRef<Path>,
) -> Result<()> {
    Checkpoint::capture(model, step, ema).save(path)
}

/// Loads a checkpoint into a freshly built model: `(model, step, ema)`.
pub fn load_checkpoint<T: Element>(path: impl AsRef<Path>) -> Result<(Model<T>, u64, NamedTensors<T>)> {
    Checkpoint::load(path)?.into_model()
}

/// Loads a checkpoint into an existing model whose config must match.
pub fn load_into<T: Element>(model: &mut Model<T>, path: impl AsRef<Path>) -> Result<(u64, NamedTensors<T>)> {
    let ck = Checkpoint::<T>::load(path)?;
    if ck.config != model.config {
        return Err(CheckpointError::ConfigMismatch.into());
    }
    assign_state(model, &ck.tensors)?;
    Ok((ck.step, ck.ema))
}

/// Replaces every tensor of `module` with the same-named entry of `state`.
/// Missing, extra and mis-shaped entries are errors.
pub fn assign_state<T: Element, M: Module<T>>(module: &mut M, state: &NamedTensors<T>) -> Result<()> {
    let mut table: HashMap<&str, &Tensor<T>> = HashMap::with_capacity(state.len());
    for (n, t) in state {
        if table.insert(n.as_str(), t).is_some() {
            return Err(CheckpointError::Malformed(format!("duplicate tensor `{n}`")).into());
        }
    }
    let mut failure = None;
    module.visit_mut("", &mut |name, slot, _| {
        if failure.is_some() {
            return;
        }
        match table.remove(name) {
            None => failure = Some(CheckpointError::MissingTensor(name.to_string())),
            Some(t) if t.shape() != slot.shape() => {
                failure = Some(CheckpointError::ShapeMismatch {
                    name: name.to_string(),
                    found: t.shape().to_vec(),
                    expected: slot.shape().to_vec(),
                })
            }
            Some(t) => *slot = t.detach(),
        }
    });
    if let Some(e) = failure {
        return Err(e.into());
    }
    if let Some(extra) = table.keys().min() {
        return Err(CheckpointError::UnknownTensor(extra.to_string()).into());
    }
    Ok(())
}

fn write_table<T: Element>(out: &mut Vec<u8>, table: &NamedTensors<T>) {
    out.extend_from_slice(&(table.len() as u64).to_le_bytes());
    for (name, t) in table {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(out);
        }
    }
}

fn read_table<T: Element>(r: &mut Reader<'_>) -> Result<NamedTensors<T>> {
    let count = r.len("tensor count")?;
    let mut table = Vec::new();
    for _ in 0..count {
        let len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let tag = r.take(1, "dtype")?[0];
        let dtype =
            DType::from_tag(tag).ok_or_else(|| CheckpointError::Malformed(format!("unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(CheckpointError::DtypeMismatch {
                name,
                found: dtype.name(),
                expected: T::DTYPE.name(),
            }
            .into());
        }
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.len("extent")?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor `{name}` is too large")))?;
        let bytes = numel
            .checked_mul(dtype.size())
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor `{name}` is too large")))?;
        let payload = r.take(bytes, "tensor payload")?;
        let data = payload.chunks_exact(dtype.size()).map(T::read_le).collect();
        table.push((name, Tensor::from_vec(data, &shape)?));
    }
    Ok(table)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(CheckpointError::Truncated(what).into());
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &'static str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| CheckpointError::Malformed(format!("{what} overflows")).into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_bytes() -> Vec<u8> {
        let model = Model::<f32>::new(ModelConfig::micro()).unwrap();
        Checkpoint::capture(&model, 7, None).encode()
    }

    #[test]
    fn bad_magic_names_format() {
        let mut bytes = micro_bytes();
        bytes[0] = b'X';
        let err = Checkpoint::<f32>::decode(&bytes).err().unwrap();
        assert!(matches!(err, Error::Checkpoint(CheckpointError::BadMagic(_))));
        assert!(err.to_string().contains("DMF1"));
    }

    #[test]
    fn version_and_truncation_are_distinct() {
        let mut bytes = micro_bytes();
        bytes[4] = 9;
        assert!(matches!(
            Checkpoint::<f32>::decode(&bytes),
            Err(Error::Checkpoint(CheckpointError::Version { found: 9, .. }))
        ));
        let bytes = micro_bytes();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::<f32>::decode(&bytes[..cut]),
                Err(Error::Checkpoint(CheckpointError::Truncated(_)))
            ));
        }
    }

    #[test]
    fn dtype_mismatch_detected() {
        assert!(matches!(
            Checkpoint::<f64>::decode(&micro_bytes()),
            Err(Error::Checkpoint(CheckpointError::DtypeMismatch { .. }))
        ));
    }

    #[test]
    fn shape_mismatch_detected() {
        let model = Model::<f32>::new(ModelConfig::micro()).unwrap();
        let mut ck = Checkpoint::capture(&model, 0, None);
        ck.tensors[0].1 = Tensor::zeros(&[1, 2, 3]);
        let mut target = Model::<f32>::new(ModelConfig::micro()).unwrap();
        assert!(matches!(
            assign_state(&mut target, &ck.tensors),
            Err(Error::Checkpoint(CheckpointError::ShapeMismatch { .. }))
        ));
    }

    #[test]
    fn config_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::<f32>::new(ModelConfig::micro()).unwrap();
        save_checkpoint(&model, 0, None, &path).unwrap();
        let mut cfg = ModelConfig::micro();
        cfg.num_classes = 5;
        let mut other = Model::<f32>::new(cfg).unwrap();
        assert!(matches!(
            load_into(&mut other, &path),
            Err(Error::Checkpoint(CheckpointError::ConfigMismatch))
        ));
    }
}
