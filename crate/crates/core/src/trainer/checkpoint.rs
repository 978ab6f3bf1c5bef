//! Binary checkpoint container.
//!
//! ```text
//! magic    8 bytes  "CDHVCKPT"
//! version  u32 LE
//! dtype    u8       parameter element type tag (f32)
//! meta     u32 LE length + UTF-8 JSON (configs, vocab, counters, log)
//! params   u32 count, then per tensor: name, rank, dims, f32 LE data
//! moments  first then second Adam moment for every parameter, same order
//! ema      u8 flag, then one tensor per parameter when set
//! sha256   32 bytes over everything above
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EpochLog, OptimizerState, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::features::{Dataset, MelParams, Normalization, SpeakerVocab};
use crate::model::{Model, ModelConfig};
use crate::tensor::{DType, Real, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CDHVCKPT";
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub vocab: SpeakerVocab,
    pub normalization: Normalization,
    pub mel_params: MelParams,
    pub epoch: usize,
    pub step: u64,
    pub history: Vec<EpochLog>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: OptimizerState,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer, dataset: &Dataset) -> Checkpoint {
        Checkpoint {
            model: t.model.clone(),
            optimizer: t.state.clone(),
            meta: CheckpointMeta {
                model_config: t.model.config().clone(),
                train_config: t.config.clone(),
                vocab: dataset.vocab().clone(),
                normalization: *dataset.normalization(),
                mel_params: dataset.manifest.mel_params.clone(),
                epoch: t.epoch,
                step: t.state.step,
                history: t.history.clone(),
            },
        }
    }

    /// The parameters used for inference: the running average when one was
    /// kept, else the raw weights.
    pub fn inference_model(&self) -> Model<f32> {
        let mut m = self.model.clone();
        if let Some(ema) = &self.optimizer.ema {
            for (dst, src) in m.params_mut().tensors_mut().iter_mut().zip(ema) {
                *dst = src.clone();
            }
        }
        m
    }

    /// Rejects use with a vocabulary other than the one trained on.
    pub fn check_vocab(&self, vocab: &SpeakerVocab) -> Result<()> {
        if vocab != &self.meta.vocab {
            return Err(Error::config(format!(
                "checkpoint was trained on {} speakers {:?}, got {} speakers {:?}",
                self.meta.vocab.len(),
                self.meta.vocab.names(),
                vocab.len(),
                vocab.names()
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the parameter names, shapes and values.
    pub fn model_checksum(&self) -> String {
        let mut h = Sha256::new();
        let p = self.model.params();
        for (name, t) in p.names().iter().zip(p.tensors()) {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(f32::DTYPE.tag());
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::invalid(format!("checkpoint metadata: {e}")))?;
        put_u32(&mut out, meta.len());
        out.extend_from_slice(&meta);

        let p = self.model.params();
        put_u32(&mut out, p.len());
        for (name, t) in p.names().iter().zip(p.tensors()) {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_tensor(&mut out, t);
        }
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        for t in self.optimizer.m.iter().chain(&self.optimizer.v) {
            put_tensor(&mut out, t);
        }
        match &self.optimizer.ema {
            Some(ema) => {
                out.push(1);
                ema.iter().for_each(|t| put_tensor(&mut out, t));
            }
            None => out.push(0),
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(digest.as_slice());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
            return Err(Error::Integrity("checkpoint truncated".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Integrity("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("checkpoint checksum mismatch".into()));
        }

        let mut r = Reader { buf: body, pos: 12 };
        let tag = r.u8()?;
        if tag != DType::F32.tag() {
            return Err(Error::Integrity(format!("unexpected dtype tag {tag}")));
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Integrity(format!("checkpoint metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut named = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Integrity("parameter name is not UTF-8".into()))?;
            named.push((name, r.tensor()?));
        }
        let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let m = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        let v = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        let ema = match r.u8()? {
            0 => None,
            1 => Some((0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?),
            f => return Err(Error::Integrity(format!("bad averaging flag {f}"))),
        };
        if r.pos != body.len() {
            return Err(Error::Integrity("trailing bytes in checkpoint".into()));
        }
        let model = Model::from_named(meta.model_config.clone(), meta.vocab.len(), named)?;
        let shapes_ok = |ts: &[Tensor<f32>]| {
            ts.len() == count && ts.iter().zip(model.params().tensors()).all(|(a, b)| a.shape() == b.shape())
        };
        if !shapes_ok(&m) || !shapes_ok(&v) || !ema.as_deref().map_or(true, shapes_ok) {
            return Err(Error::Integrity("optimizer state does not match the parameters".into()));
        }
        Ok(Checkpoint {
            model,
            optimizer: OptimizerState { step, m, v, ema },
            meta,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    // write then rename so a crash never leaves a half-written checkpoint
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    put_u32(out, t.shape().len());
    t.shape().iter().for_each(|&d| put_u32(out, d));
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Integrity("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Integrity(format!("tensor rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Integrity("tensor size".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::from_vec(&shape, data).map_err(|_| Error::Integrity("tensor shape".into()))
    }
}
