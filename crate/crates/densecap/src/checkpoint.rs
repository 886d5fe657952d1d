//! Binary checkpoint container: run configuration, iteration counter, all
//! named parameter tensors, optional optimizer state, and a trailing SHA-256
//! checksum over everything before it. All integers are little-endian;
//! tensor data is raw f64 bits, so a save/load round trip is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{SgdState, Tensor};

const MAGIC: &[u8; 8] = b"DCAPCKPT";
const VERSION: u32 = 1;

/// Momentum buffers plus schedule position, saved so training can resume.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    /// one buffer per parameter, in parameter-store order
    pub velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn from_sgd(sgd: &SgdState) -> Self {
        OptimizerState {
            learning_rate: sgd.learning_rate,
            momentum: sgd.momentum,
            velocity: sgd.velocity.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub iteration: u64,
    /// (name, tensor) in parameter-store order
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn from_model(config: RunConfig, iteration: u64, model: &Model) -> Self {
        let params = model
            .store
            .iter()
            .map(|(_, e)| (e.name.clone(), e.value.clone()))
            .collect();
        Checkpoint { config, iteration, params, optimizer: None }
    }

    /// Rebuild a model from the stored config and overwrite every parameter
    /// by name. Errors if any stored tensor has no home or a shape mismatch,
    /// or if the fresh model has a parameter the checkpoint lacks.
    pub fn into_model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.model.clone(), self.config.seed)?;
        let mut seen = vec![false; model.store.len()];
        for (name, tensor) in &self.params {
            let id = model
                .store
                .id_of(name)
                .ok_or_else(|| Error::Data(format!("checkpoint parameter '{name}' not in model")))?;
            let entry = model.store.entry_mut(id);
            if entry.value.shape != tensor.shape {
                return Err(Error::Data(format!(
                    "checkpoint parameter '{name}' has shape {:?}, model wants {:?}",
                    tensor.shape, entry.value.shape
                )));
            }
            entry.value = tensor.clone();
            seen[id.index()] = true;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            let name = model
                .store
                .iter()
                .nth(missing)
                .map(|(_, e)| e.name.clone())
                .unwrap_or_default();
            return Err(Error::Data(format!("checkpoint is missing parameter '{name}'")));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());

        let cfg_json = serde_json::to_vec(&self.config)
            .map_err(|e| Error::Data(format!("config serialization failed: {e}")))?;
        buf.extend_from_slice(&(cfg_json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&cfg_json);
        buf.extend_from_slice(&self.iteration.to_le_bytes());

        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, tensor) in &self.params {
            write_str(&mut buf, name);
            buf.extend_from_slice(&(tensor.shape.len() as u32).to_le_bytes());
            for &d in &tensor.shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &tensor.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }

        match &self.optimizer {
            None => buf.push(0),
            Some(opt) => {
                buf.push(1);
                buf.extend_from_slice(&opt.learning_rate.to_le_bytes());
                buf.extend_from_slice(&opt.momentum.to_le_bytes());
                buf.extend_from_slice(&(opt.velocity.len() as u64).to_le_bytes());
                for v in &opt.velocity {
                    buf.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    for &x in v {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }

        let digest = Sha256::digest(&buf);
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&buf)?;
        w.write_all(&digest)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(Error::Data("checkpoint file truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Data("checkpoint checksum mismatch".into()));
        }

        let mut r = Cursor { buf: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Data("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }

        let cfg_len = r.u64()? as usize;
        let config: RunConfig = serde_json::from_slice(r.take(cfg_len)?)
            .map_err(|e| Error::Data(format!("bad embedded config: {e}")))?;
        let iteration = r.u64()?;

        let n_params = r.u64()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name = r.string()?;
            let ndims = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndims);
            for _ in 0..ndims {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(r.f64()?);
            }
            params.push((name, Tensor::from_vec(&shape, data)?));
        }

        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let learning_rate = r.f64()?;
                let momentum = r.f64()?;
                let n = r.u64()? as usize;
                let mut velocity = Vec::with_capacity(n);
                for _ in 0..n {
                    let len = r.u64()? as usize;
                    let mut v = Vec::with_capacity(len);
                    for _ in 0..len {
                        v.push(r.f64()?);
                    }
                    velocity.push(v);
                }
                Some(OptimizerState { learning_rate, momentum, velocity })
            }
            x => return Err(Error::Data(format!("bad optimizer-state tag {x}"))),
        };
        if r.pos != body.len() {
            return Err(Error::Data("trailing bytes in checkpoint".into()));
        }
        Ok(Checkpoint { config, iteration, params, optimizer })
    }
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Data("checkpoint file truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Data("bad utf-8 in checkpoint".into()))
    }
}
