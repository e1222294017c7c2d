//! Experiment checkpoint: config, tagged parameters, step counter and RNG state.
//!
//! Little-endian layout: magic `CKP1`, scalar width byte (4 or 8), u32-length
//! config text, u64 step, RNG seed (32 bytes), u128 word position, u64 stream,
//! u32 parameter count, then per parameter a u32-length name, a frozen byte,
//! u32 rank, u32 extents and the values.

use std::path::Path;

use diffcore::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::SegModel;

pub const MAGIC: &[u8; 4] = b"CKP1";

#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar> {
    pub config: ExperimentConfig,
    pub model: SegModel<T>,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format { offset: self.pos as u64, msg: format!("truncated checkpoint: need {n} more bytes") });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn fail<V>(&self, msg: impl Into<String>) -> Result<V> {
        Err(Error::Format { offset: self.pos as u64, msg: msg.into() })
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn encode(&self) -> Vec<u8> {
        let width = std::mem::size_of::<T>();
        let mut out = Vec::with_capacity(16 + self.model.store.numel() * width);
        out.extend_from_slice(MAGIC);
        out.push(width as u8);
        let cfg = self.config.render();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.get_seed());
        out.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        out.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        out.extend_from_slice(&(self.model.store.len() as u32).to_le_bytes());
        for (_, p) in self.model.store.iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.frozen as u8);
            out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in p.value.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format { offset: 0, msg: "not an experiment checkpoint".into() });
        }
        let width = r.take(1)?[0] as usize;
        if width != std::mem::size_of::<T>() {
            return r.fail(format!("checkpoint holds {}-byte scalars, expected {}", width, std::mem::size_of::<T>()));
        }
        let n = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(n)?).map_err(|_| Error::Format { offset: r.pos as u64, msg: "config is not UTF-8".into() })?;
        let config = ExperimentConfig::parse(text)?;
        let step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let stream = r.u64()?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        let mut model = SegModel::<T>::new(config.model_config(), 0)?;
        let count = r.u32()? as usize;
        if count != model.store.len() {
            return r.fail(format!("checkpoint has {count} parameters, the configured model {}", model.store.len()));
        }
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let len = r.u32()? as usize;
            let name = String::from_utf8_lossy(r.take(len)?).into_owned();
            let expected = &model.store.get(id).name;
            if &name != expected {
                return r.fail(format!("parameter '{name}' where '{expected}' was expected"));
            }
            let frozen = r.take(1)?[0] != 0;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if shape != model.store.value(id).shape() {
                return r.fail(format!("parameter '{name}' has shape {shape:?}, expected {:?}", model.store.value(id).shape()));
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * width)?;
            let data = raw.chunks_exact(width).map(T::read_le).collect();
            let p = model.store.get_mut(id);
            p.value = Tensor::new(&shape, data)?;
            p.frozen = frozen;
        }
        if r.pos != bytes.len() {
            return r.fail(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Self { config, model, step, rng })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
