//! Binary checkpoints: an 8-byte magic, a little-endian `u32` version, a
//! `u64` header length, a JSON header describing every tensor, then the raw
//! `f64` little-endian payload in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameter, Parameterized, RunningStats};
use crate::error::{Error, Result};
use crate::loss::TargetStore;
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ELRCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct StatsEntry {
    channels: usize,
    ready: bool,
}

#[derive(Serialize, Deserialize)]
struct TargetsEntry {
    ids: Vec<usize>,
    num_classes: usize,
    beta: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    epoch: usize,
    params: Vec<TensorEntry>,
    stats: Vec<StatsEntry>,
    targets: Option<TargetsEntry>,
}

/// Model weights and BN stats, the ELR targets if any, and the epoch reached.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub targets: Option<TargetStore>,
    pub epoch: usize,
}

pub fn save_checkpoint(path: &Path, model: &Model, targets: Option<&TargetStore>, epoch: usize) -> Result<()> {
    let header = Header {
        model: model.config().clone(),
        epoch,
        params: model
            .parameters()
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        stats: model
            .running_stats()
            .iter()
            .map(|s| StatsEntry {
                channels: s.channels(),
                ready: s.ready,
            })
            .collect(),
        targets: targets.map(|t| TargetsEntry {
            ids: t.ids().to_vec(),
            num_classes: t.num_classes(),
            beta: t.beta(),
        }),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");

    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    let mut put = |values: &[f64]| values.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    for p in model.parameters() {
        put(p.value.data());
    }
    for s in model.running_stats() {
        put(&s.mean);
        put(&s.var);
    }
    if let Some(t) = targets {
        put(t.data());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated: need {n} more bytes")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { path, bytes: &bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        r.pos = 0;
        return Err(r.fail("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header_start = r.pos;
    let header: Header = serde_json::from_slice(r.take(len)?).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: header_start as u64,
        msg: e.to_string(),
    })?;

    let mut params = Vec::with_capacity(header.params.len());
    for entry in &header.params {
        let data = r.f64s(entry.shape.iter().product())?;
        params.push(Parameter::new(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
    }
    let mut stats = Vec::with_capacity(header.stats.len());
    for entry in &header.stats {
        stats.push(RunningStats {
            mean: r.f64s(entry.channels)?,
            var: r.f64s(entry.channels)?,
            ready: entry.ready,
        });
    }
    let targets = match header.targets {
        Some(t) => {
            let data = r.f64s(t.ids.len() * t.num_classes)?;
            Some(TargetStore::from_parts(t.ids, t.num_classes, t.beta, data)?)
        }
        None => None,
    };
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after payload"));
    }
    Ok(Checkpoint {
        model: Model::from_parts(&header.model, params, stats)?,
        targets,
        epoch: header.epoch,
    })
}
