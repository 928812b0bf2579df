//! Binary checkpoint files.
//!
//! Layout, little-endian:
//! `"CGCK"`, u32 version, u64 scalar count, u32 length + UTF-8 `key=value`
//! text, u32 tensor count, per tensor (u32 name length, name, u32 rank,
//! u64 dims, u64 offset), u8 optimizer flag (+ u64 step, f64 lr), u32 history
//! length + (u64 epoch, 3 x f64) records, u64 payload length + f64 payload
//! (parameters, then Adam first and second moments when present), and a
//! trailer of u64 file length and the CRC-32 of every preceding byte.

use std::collections::BTreeMap;
use std::path::Path;

use crate::backbone::{Backbone, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{AdamState, ParamStore, Tensor};
use crate::train::EpochRecord;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CGCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const TRAILER: usize = 12;

/// Everything needed to resume training or forecast.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
    pub history: Vec<EpochRecord>,
    /// Free-form settings stored next to the model config.
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: &Backbone) -> Self {
        Self {
            config: model.config().clone(),
            params: model.params().clone(),
            optimizer: None,
            history: Vec::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn model(&self) -> Result<Backbone> {
        Backbone::from_params(self.config.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.num_scalars() as u64).to_le_bytes());

        let mut text = String::new();
        for (k, v) in self.config.to_kv() {
            text.push_str(&format!("model.{k}={v}\n"));
        }
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::InvalidArgument(format!("checkpoint meta '{k}' contains '=' or a newline")));
            }
            text.push_str(&format!("meta.{k}={v}\n"));
        }
        put_bytes(&mut out, text.as_bytes());

        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (i, t) in self.params.tensors().iter().enumerate() {
            put_bytes(&mut out, self.params.name(i).as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += t.len() as u64;
        }

        match &self.optimizer {
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.step_count().to_le_bytes());
                out.extend_from_slice(&opt.lr.to_le_bytes());
            }
            None => out.push(0),
        }

        out.extend_from_slice(&(self.history.len() as u32).to_le_bytes());
        for r in &self.history {
            out.extend_from_slice(&(r.epoch as u64).to_le_bytes());
            for v in [r.train_loss, r.val_mse, r.val_mae] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }

        let mut payload: Vec<f64> = Vec::new();
        for t in self.params.tensors() {
            payload.extend_from_slice(t.data());
        }
        if let Some(opt) = &self.optimizer {
            let (m, v) = opt.moments();
            if m.iter().map(Vec::len).sum::<usize>() != self.params.num_scalars() {
                return Err(Error::InvalidArgument("optimizer state does not match parameters".into()));
            }
            m.iter().chain(v).for_each(|b| payload.extend_from_slice(b));
        }
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }

        let total = (out.len() + TRAILER) as u64;
        out.extend_from_slice(&total.to_le_bytes());
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Truncated(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::CorruptHeader(format!("magic {:?}", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 16 + TRAILER {
            return Err(Error::Truncated(format!("{} bytes", bytes.len())));
        }
        let end = bytes.len() - TRAILER;
        let declared = u64::from_le_bytes(bytes[end..end + 8].try_into().expect("8 bytes"));
        if declared != bytes.len() as u64 {
            return Err(Error::Truncated(format!(
                "file has {} bytes, trailer declares {declared}",
                bytes.len()
            )));
        }
        let stored = u32::from_le_bytes(bytes[end + 8..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&bytes[..end + 8]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }

        let mut r = Reader { bytes: &bytes[..end], pos: 8 };
        let count = r.u64()? as usize;
        let text = String::from_utf8(r.bytes_prefixed()?.to_vec())
            .map_err(|_| Error::CorruptHeader("config text is not UTF-8".into()))?;
        let mut model_kv = Vec::new();
        let mut meta = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::CorruptHeader(format!("config line '{line}'")))?;
            if let Some(k) = k.strip_prefix("model.") {
                model_kv.push((k.to_string(), v.to_string()));
            } else if let Some(k) = k.strip_prefix("meta.") {
                meta.insert(k.to_string(), v.to_string());
            } else {
                return Err(Error::CorruptHeader(format!("config key '{k}'")));
            }
        }
        let config = ModelConfig::from_kv(model_kv.iter().map(|(k, v)| (k.as_str(), v.as_str())))
            .map_err(|e| Error::CorruptHeader(e.to_string()))?;

        let n_tensors = r.u32()? as usize;
        let mut index = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name = String::from_utf8(r.bytes_prefixed()?.to_vec())
                .map_err(|_| Error::CorruptHeader("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            index.push((name, shape, offset));
        }

        let opt_meta = match r.u8()? {
            0 => None,
            1 => Some((r.u64()?, r.f64()?)),
            f => return Err(Error::CorruptHeader(format!("optimizer flag {f}"))),
        };

        let n_hist = r.u32()? as usize;
        let mut history = Vec::with_capacity(n_hist.min(1 << 16));
        for _ in 0..n_hist {
            history.push(EpochRecord {
                epoch: r.u64()? as usize,
                train_loss: r.f64()?,
                val_mse: r.f64()?,
                val_mae: r.f64()?,
            });
        }

        let payload_len = r.u64()? as usize;
        let expected = if opt_meta.is_some() { 3 * count } else { count };
        if payload_len != expected {
            return Err(Error::CorruptHeader(format!(
                "payload holds {payload_len} values, header implies {expected}"
            )));
        }
        let payload = r.f64s(payload_len)?;
        if r.pos != r.bytes.len() {
            return Err(Error::CorruptHeader(format!("{} trailing bytes", r.bytes.len() - r.pos)));
        }

        let mut params = ParamStore::new();
        for (name, shape, offset) in index {
            let n: usize = shape.iter().product();
            let data = payload
                .get(offset..offset + n)
                .filter(|_| offset + n <= count)
                .ok_or_else(|| Error::CorruptHeader(format!("tensor '{name}' lies outside the payload")))?;
            params.push(name, Tensor::new(shape, data.to_vec())?);
        }
        if params.num_scalars() != count {
            return Err(Error::CorruptHeader(format!(
                "index covers {} values, header declares {count}",
                params.num_scalars()
            )));
        }
        let built = Backbone::parameter_count(&config)?;
        if built != count {
            return Err(Error::CorruptHeader(format!(
                "model config implies {built} parameters, file holds {count}"
            )));
        }

        let optimizer = match opt_meta {
            None => None,
            Some((step, lr)) => {
                let split = |base: usize| {
                    let mut at = base;
                    params
                        .tensors()
                        .iter()
                        .map(|t| {
                            let v = payload[at..at + t.len()].to_vec();
                            at += t.len();
                            v
                        })
                        .collect::<Vec<_>>()
                };
                Some(AdamState::from_parts(lr, step, split(count), split(2 * count))?)
            }
        };
        Ok(Self {
            config,
            params,
            optimizer,
            history,
            meta,
        })
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Truncated(format!("needed {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::CorruptHeader("payload length".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn bytes_prefixed(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
