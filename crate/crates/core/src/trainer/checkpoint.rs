//! Versioned binary checkpoints and the per-update loss log.
//!
//! Layout: magic, `u32` version, `u64` header length, JSON header, then one
//! record per tensor (`u32` name length, name, `u8` dtype, `u32` rank,
//! `u64` dims, little-endian `f64` data). All integers are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{BioModel, ModelConfig};
use crate::numerics::{AdamState, ParamStore, Tensor};
use crate::text::Vocabulary;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BIOWCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: BioModel,
    pub optimizer: AdamState,
    /// Parameter names the optimizer moments align with.
    pub optimizer_params: Vec<String>,
    pub train_config: Option<TrainConfig>,
    pub updates: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    vocab: Vec<String>,
    vocab_fingerprint: u64,
    model: ModelConfig,
    train: Option<TrainConfig>,
    updates: u64,
    optimizer_step: u64,
    optimizer_params: Vec<String>,
}

fn write_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.push(DTYPE_F64);
    out.extend((shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend((d as u64).to_le_bytes());
    }
    for &x in data {
        out.extend(x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            vocab: self.model.vocab.tokens().to_vec(),
            vocab_fingerprint: self.model.vocab.fingerprint(),
            model: self.model.config.clone(),
            train: self.train_config.clone(),
            updates: self.updates,
            optimizer_step: self.optimizer.step,
            optimizer_params: self.optimizer_params.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend(CHECKPOINT_MAGIC);
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        out.extend((json.len() as u64).to_le_bytes());
        out.extend(&json);
        for (name, t) in self.model.params.iter() {
            write_record(&mut out, name, t.shape(), t.data());
        }
        if !self.optimizer.first_moment.is_empty() {
            if self.optimizer.first_moment.len() != self.optimizer_params.len() {
                return Err(Error::Checkpoint("optimizer moments not aligned with names".into()));
            }
            for (i, name) in self.optimizer_params.iter().enumerate() {
                let m = &self.optimizer.first_moment[i];
                let v = &self.optimizer.second_moment[i];
                write_record(&mut out, &format!("{ADAM_M}{name}"), &[m.len()], m);
                write_record(&mut out, &format!("{ADAM_V}{name}"), &[v.len()], v);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)?;
        let vocab = Vocabulary::from_tokens(header.vocab)?;
        if vocab.fingerprint() != header.vocab_fingerprint {
            return Err(Error::Checkpoint("vocabulary fingerprint mismatch".into()));
        }
        let mut params = ParamStore::new();
        let mut moments: std::collections::HashMap<String, Vec<f64>> = Default::default();
        while !r.done() {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F64 {
                return Err(Error::Checkpoint(format!("{name}: unknown dtype tag {dtype}")));
            }
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let count: usize = shape.iter().product();
            let bytes = r.take(count.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            if name.starts_with(ADAM_M) || name.starts_with(ADAM_V) {
                moments.insert(name, data);
            } else {
                params.insert(name, Tensor::new(shape, data)?);
            }
        }
        let mut optimizer = AdamState { step: header.optimizer_step, ..AdamState::default() };
        if !moments.is_empty() {
            for p in &header.optimizer_params {
                let m = moments
                    .remove(&format!("{ADAM_M}{p}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing first moment for {p}")))?;
                let v = moments
                    .remove(&format!("{ADAM_V}{p}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing second moment for {p}")))?;
                optimizer.first_moment.push(m);
                optimizer.second_moment.push(v);
            }
        }
        let model = BioModel { config: header.model, vocab, params };
        model.validate()?;
        Ok(Self {
            model,
            optimizer,
            optimizer_params: header.optimizer_params,
            train_config: header.train,
            updates: header.updates,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// A checkpoint for an untrained model.
    pub fn from_model(model: BioModel) -> Self {
        Self { model, optimizer: AdamState::default(), optimizer_params: Vec::new(), train_config: None, updates: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub update: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn write_loss_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut s = String::from("update,lr,loss\n");
    for r in records {
        s.push_str(&format!("{},{:e},{}\n", r.update, r.lr, r.loss));
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let content = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate().skip(1) {
        let bad = |m: &str| Error::Parse { path: path.to_path_buf(), line: i + 1, message: m.into() };
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(bad("expected update,lr,loss"));
        }
        out.push(LossRecord {
            update: parts[0].parse().map_err(|_| bad("bad update"))?,
            lr: parts[1].parse().map_err(|_| bad("bad lr"))?,
            loss: parts[2].parse().map_err(|_| bad("bad loss"))?,
        });
    }
    Ok(out)
}
