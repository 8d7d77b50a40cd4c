//! Binary checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "S2MOECKP" | version u32 | precision u8 (bytes per value)
//! config   : u32 len, UTF-8 canonical config text
//! step     : u64
//! vocab    : u32 len, bytes
//! rngs     : u32 count, { name, seed u64, stream u64, counter u128 }
//! tensors  : u32 count, { name, trainable u8, ndim u32, dims u32.., values }
//! adam     : step u64, u32 count, { m values, v values } in tensor order
//! snapshots: u32 count, { layer u32, ndim u32, dims u32.., values }
//! ```
//!
//! Strings are a u32 length followed by UTF-8 bytes. Values are stored at
//! the writer's precision and cast on load.

use std::io::Write;
use std::path::Path;

use super::config::{ConfigError, Preset, RunConfig};
use super::corpus::{CorpusError, Vocab};
use crate::model::{LanguageModel, ModelError};
use crate::optim::Adam;
use crate::rng::{RngState, RngStream};
use crate::tensor::{Precision, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"S2MOECKP";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads {VERSION})")]
    Version { found: u32 },
    #[error("truncated checkpoint at byte {0}")]
    Truncated(usize),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("tensor {name}: checkpoint shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Vocab(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub config: RunConfig,
    /// Completed optimizer steps.
    pub step: u64,
    pub vocab: Vocab,
    pub model: LanguageModel<T>,
    pub adam: Adam<T>,
    pub data_rng: RngStream,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
    }
    fn dims(&mut self, shape: &[usize]) {
        self.u32(shape.len() as u32);
        shape.iter().for_each(|&d| self.u32(d as u32));
    }
    fn values<T: Scalar>(&mut self, t: &Tensor<T>) {
        t.data().iter().for_each(|v| v.write_le(&mut self.buf));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn u128(&mut self) -> Result<u128, CheckpointError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }
    fn bytes(&mut self) -> Result<&'a [u8], CheckpointError> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn string(&mut self) -> Result<String, CheckpointError> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| CheckpointError::Malformed("non-UTF-8 string".into()))
    }
    fn dims(&mut self) -> Result<Vec<usize>, CheckpointError> {
        let n = self.u32()? as usize;
        if n > 8 {
            return Err(CheckpointError::Malformed(format!("{n} dimensions")));
        }
        (0..n).map(|_| self.u32().map(|d| d as usize)).collect()
    }
    fn values<T: Scalar>(&mut self, stored: Precision, shape: &[usize]) -> Result<Tensor<T>, CheckpointError> {
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(stored.width()).ok_or(CheckpointError::Truncated(self.pos))?)?;
        let data = raw
            .chunks_exact(stored.width())
            .map(|c| match stored {
                Precision::F32 => T::of(f32::read_le(c).f64()),
                Precision::F64 => T::of(f64::read_le(c)),
            })
            .collect();
        Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))
    }
}

impl<T: Scalar> TrainState<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u8(T::PRECISION.width() as u8);
        w.bytes(self.config.to_text().as_bytes());
        w.u64(self.step);
        w.bytes(self.vocab.symbols());

        let mut rngs = vec![("data".to_string(), self.data_rng.state())];
        rngs.extend(self.model.rng_states());
        w.u32(rngs.len() as u32);
        for (name, s) in &rngs {
            w.bytes(name.as_bytes());
            w.u64(s.seed);
            w.u64(s.stream);
            w.u128(s.counter);
        }

        let params = self.model.params();
        w.u32(params.len() as u32);
        for p in &params {
            w.bytes(p.name().as_bytes());
            w.u8(p.trainable() as u8);
            w.dims(p.value().shape());
            w.values(p.value());
        }

        let (m, v) = self.adam.moments();
        w.u64(self.adam.steps_taken());
        w.u32(m.len() as u32);
        for (mi, vi) in m.iter().zip(v) {
            w.values(mi);
            w.values(vi);
        }

        let snaps: Vec<(usize, &Tensor<T>)> = self
            .model
            .blocks
            .iter()
            .enumerate()
            .filter_map(|(l, b)| b.moe.router.snapshot().map(|s| (l, s)))
            .collect();
        w.u32(snaps.len() as u32);
        for (l, s) in snaps {
            w.u32(l as u32);
            w.dims(s.shape());
            w.values(s);
        }
        w.buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let stored = match r.u8()? {
            4 => Precision::F32,
            8 => Precision::F64,
            other => return Err(CheckpointError::Malformed(format!("precision byte {other}"))),
        };
        let text = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| CheckpointError::Malformed("config text".into()))?;
        let config = RunConfig::from_text(&text, Preset::Desk)?;
        let step = r.u64()?;
        let vocab = Vocab::from_symbols(r.bytes()?.to_vec())?;
        let mut model = LanguageModel::<T>::new(config.model_config(vocab.size()))?;

        let n_rngs = r.u32()?;
        let mut data_rng = None;
        for _ in 0..n_rngs {
            let name = r.string()?;
            let state = RngState {
                seed: r.u64()?,
                stream: r.u64()?,
                counter: r.u128()?,
            };
            if name == "data" {
                data_rng = Some(RngStream::restore(state));
            } else {
                model.restore_rng(&name, state)?;
            }
        }
        let data_rng = data_rng.ok_or_else(|| CheckpointError::Malformed("missing data stream".into()))?;

        let n_tensors = r.u32()? as usize;
        let expected = model.params().len();
        if n_tensors != expected {
            return Err(CheckpointError::Malformed(format!(
                "{n_tensors} tensors stored, model has {expected}"
            )));
        }
        let mut shapes = Vec::with_capacity(n_tensors);
        {
            let mut params = model.params_mut();
            for p in params.iter_mut() {
                let name = r.string()?;
                if name != p.name() {
                    return Err(CheckpointError::Malformed(format!(
                        "tensor {name:?} where {:?} was expected",
                        p.name()
                    )));
                }
                let trainable = r.u8()? != 0;
                let dims = r.dims()?;
                if dims != p.value().shape() {
                    return Err(CheckpointError::ShapeMismatch {
                        name,
                        found: dims,
                        expected: p.value().shape().to_vec(),
                    });
                }
                p.set_value(r.values(stored, &dims)?);
                p.set_trainable(trainable);
                shapes.push(dims);
            }
        }

        let adam_step = r.u64()?;
        let n_mom = r.u32()? as usize;
        if n_mom != n_tensors {
            return Err(CheckpointError::Malformed("optimizer state size".into()));
        }
        let (mut m, mut v) = (Vec::with_capacity(n_mom), Vec::with_capacity(n_mom));
        for s in &shapes {
            m.push(r.values(stored, s)?);
            v.push(r.values(stored, s)?);
        }
        let mut adam = Adam::new(config.adam(), model.params());
        adam.restore(adam_step, m, v);

        let n_snaps = r.u32()?;
        for _ in 0..n_snaps {
            let l = r.u32()? as usize;
            let dims = r.dims()?;
            let snap = r.values(stored, &dims)?;
            let block = model
                .blocks
                .get_mut(l)
                .ok_or_else(|| CheckpointError::Malformed(format!("snapshot for missing layer {l}")))?;
            block.moe.router.restore_snapshot(snap);
        }
        if r.pos != buf.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                buf.len() - r.pos
            )));
        }
        Ok(Self {
            config,
            step,
            vocab,
            model,
            adam,
            data_rng,
        })
    }

    /// Writes atomically: a temporary file is renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let buf = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&buf)
    }
}

/// Precision a checkpoint was written at.
pub fn stored_precision(path: &Path) -> Result<Precision, CheckpointError> {
    let buf = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if buf.len() < 13 || &buf[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    match buf[12] {
        4 => Ok(Precision::F32),
        8 => Ok(Precision::F64),
        other => Err(CheckpointError::Malformed(format!("precision byte {other}"))),
    }
}
