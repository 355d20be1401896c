//! Binary checkpoint container.
//!
//! ```text
//! magic      8 bytes  "SANDCKPT"
//! version    u32
//! config     u32 length + UTF-8 flat key/value text (ModelConfig)
//! params     u32 count, then per param:
//!              u32 name length + name, u8 trainable, tensor
//! stats      u8 present, then tensors mean and std
//! heads      u32 count, then per head:
//!              u32 name length + name, u8 present, tensor bucket values
//! checksum   32 bytes, SHA-256 of everything above
//! ```
//!
//! Integers are little-endian; a tensor is `u32 rank`, `rank × u32` dims and
//! the row-major `f64` payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ModelConfig, SandModel};
use crate::data::ChannelStats;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SANDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len());
    buf.extend_from_slice(s.as_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    t.write_to(buf).expect("writing to a Vec cannot fail");
}

fn vector(v: &[f64]) -> Tensor {
    Tensor::new(vec![v.len()], v.to_vec()).expect("1-D")
}

pub fn to_bytes(model: &SandModel) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION as usize);
    put_str(&mut buf, &model.config().to_kv().to_string());

    put_u32(&mut buf, model.params().len());
    for p in model.params().iter() {
        put_str(&mut buf, &p.name);
        buf.push(p.trainable as u8);
        put_tensor(&mut buf, &p.value);
    }

    match &model.input_stats {
        Some(stats) => {
            buf.push(1);
            put_tensor(&mut buf, &vector(&stats.mean));
            put_tensor(&mut buf, &vector(&stats.std));
        }
        None => buf.push(0),
    }

    put_u32(&mut buf, model.heads().len());
    for h in model.heads() {
        put_str(&mut buf, &h.spec.name);
        match &h.bucket_values {
            Some(v) => {
                buf.push(1);
                put_tensor(&mut buf, &vector(v));
            }
            None => buf.push(0),
        }
    }

    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() < n {
            return Err(Error::Checkpoint("unexpected end of data".into()));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let mut r: &[u8] = self.bytes;
        let t = Tensor::read_from(&mut r)?;
        self.bytes = r;
        Ok(t)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<SandModel> {
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config: ModelConfig = r.string()?.parse()?;
    let mut model = SandModel::new(config)?;

    let count = r.u32()?;
    if count != model.params().len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameters, found {count}",
            model.params().len()
        )));
    }
    for _ in 0..count {
        let name = r.string()?;
        let trainable = r.u8()? != 0;
        let value = r.tensor()?;
        let slot = model
            .params_mut()
            .by_name_mut(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if slot.value.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, expected {:?}",
                value.shape(),
                slot.value.shape()
            )));
        }
        slot.value = value;
        slot.trainable = trainable;
    }

    if r.u8()? != 0 {
        let mean = r.tensor()?.into_data();
        let std = r.tensor()?.into_data();
        model.input_stats = Some(ChannelStats { mean, std });
    }

    let heads = r.u32()?;
    for _ in 0..heads {
        let name = r.string()?;
        let values = if r.u8()? != 0 {
            Some(r.tensor()?.into_data())
        } else {
            None
        };
        let idx = model
            .head_index(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown head `{name}`")))?;
        model.heads_mut()[idx].bucket_values = values;
    }
    if !r.bytes.is_empty() {
        return Err(Error::Checkpoint("trailing bytes before checksum".into()));
    }
    Ok(model)
}

pub fn save(model: &SandModel, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<SandModel> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
