//! Layout (all integers little-endian):
//!
//! ```text
//! "UIEDAL01"
//! u64 header length, UTF-8 JSON header
//! u64 tensor count
//! per tensor: u32 name length, name, u32 ndim, u64 dims[ndim], f32 values
//! ```
//!
//! Tensors are the parameters of E, G and D in registry order, followed by
//! the Adam moments as `adam.m.<param>` / `adam.v.<param>`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::atomic_write;
use crate::autodiff::{AdamState, Graph};
use crate::error::{Error, Result};
use crate::models::{build_model, ArchitectureConfig};
use crate::training::{nan_as_null, EpochLog, Optimizers, TrainConfig, TrainState, Trainer, WarmupReport};

pub const MAGIC: &[u8; 8] = b"UIEDAL01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateHeader {
    pub epoch: usize,
    pub master_seed: u64,
    #[serde(with = "nan_as_null")]
    pub val_g: f64,
    #[serde(with = "nan_as_null")]
    pub val_d: f64,
    pub warmup: Option<WarmupReport>,
    /// Adam step counts for E, G, D.
    pub adam_steps: [u64; 3],
    pub with_classifier: bool,
    pub log: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub architecture: ArchitectureConfig,
    pub train_config: TrainConfig,
    pub state: StateHeader,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for d in shape {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn graph_tensors<'a>(
    g: &'a Graph<f32>,
    adam: &'a AdamState<f32>,
) -> impl Iterator<Item = (String, &'a [usize], &'a [f32])> + 'a {
    let params = g
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.tensor.shape(), p.tensor.data()));
    let moments = g
        .params()
        .iter()
        .zip(adam.m.iter().zip(&adam.v))
        .flat_map(|(p, (m, v))| {
            [
                (format!("adam.m.{}", p.name), p.tensor.shape(), m.as_slice()),
                (format!("adam.v.{}", p.name), p.tensor.shape(), v.as_slice()),
            ]
        });
    params.chain(moments)
}

/// Serialise a trainer (model, config and loop state) to bytes.
pub fn encode_checkpoint(trainer: &Trainer<f32>) -> Result<Vec<u8>> {
    let st = &trainer.state;
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        architecture: trainer.bundle.config.clone(),
        train_config: trainer.config.clone(),
        state: StateHeader {
            epoch: st.epoch,
            master_seed: trainer.config.seed,
            val_g: st.val_g,
            val_d: st.val_d,
            warmup: st.warmup.clone(),
            adam_steps: [st.optim.encoder.step, st.optim.decoder.step, st.optim.classifier.step],
            with_classifier: trainer.with_classifier,
            log: st.log.clone(),
        },
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(json.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);

    let b = &trainer.bundle;
    let tensors: Vec<_> = graph_tensors(&b.encoder, &st.optim.encoder)
        .chain(graph_tensors(&b.decoder, &st.optim.decoder))
        .chain(graph_tensors(&b.classifier, &st.optim.classifier))
        .collect();
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, shape, data) in tensors {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::shape(name, "optimizer moment length differs from parameter"));
        }
        put_tensor(&mut out, &name, shape, data);
    }
    Ok(out)
}

pub fn save_checkpoint(trainer: &Trainer<f32>, path: &Path) -> Result<()> {
    atomic_write(path, &encode_checkpoint(trainer)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Corruption(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| Error::Corruption(format!("{what} {v} does not fit in memory")))
    }
}

type TensorMap = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

fn take_tensor(map: &mut TensorMap, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
    let (dims, data) = map
        .remove(name)
        .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name:?}")))?;
    if dims != shape {
        return Err(Error::Format(format!(
            "tensor {name:?} has shape {dims:?}, architecture expects {shape:?}"
        )));
    }
    Ok(data)
}

fn restore_graph(g: &mut Graph<f32>, map: &mut TensorMap, step: u64) -> Result<AdamState<f32>> {
    let mut adam = AdamState::new(g.params());
    adam.step = step;
    for (i, p) in g.params_mut().iter_mut().enumerate() {
        let shape = p.tensor.shape().to_vec();
        let data = take_tensor(map, &p.name, &shape)?;
        p.tensor.data_mut().copy_from_slice(&data);
        adam.m[i] = take_tensor(map, &format!("adam.m.{}", p.name), &shape)?;
        adam.v[i] = take_tensor(map, &format!("adam.v.{}", p.name), &shape)?;
    }
    Ok(adam)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Trainer<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r
        .take(8, "magic")
        .map_err(|_| Error::Format("file too short for a checkpoint".into()))?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            std::str::from_utf8(MAGIC).unwrap()
        )));
    }
    let hlen = r.len("header length")?;
    let header: CheckpointHeader =
        serde_json::from_slice(r.take(hlen, "header")?).map_err(|e| Error::Format(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }

    let count = r.len("tensor count")?;
    let mut map = TensorMap::new();
    for _ in 0..count {
        let nlen = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(nlen, "tensor name")?)
            .map_err(|_| Error::Corruption("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32("ndim")? as usize;
        let dims = (0..ndim).map(|_| r.len("dimension")).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Corruption(format!("tensor {name:?} dimensions overflow")))?;
        let payload = r.take(n, &format!("payload of {name:?}"))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if map.insert(name.clone(), (dims, data)).is_some() {
            return Err(Error::Format(format!("tensor {name:?} appears twice")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Corruption(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let mut bundle = build_model::<f32>(&header.architecture)?;
    let [se, sg, sd] = header.state.adam_steps;
    let optim = Optimizers {
        encoder: restore_graph(&mut bundle.encoder, &mut map, se)?,
        decoder: restore_graph(&mut bundle.decoder, &mut map, sg)?,
        classifier: restore_graph(&mut bundle.classifier, &mut map, sd)?,
    };
    if let Some(extra) = map.keys().next() {
        return Err(Error::Format(format!("unknown tensor {extra:?}")));
    }
    let st = header.state;
    let state = TrainState {
        epoch: st.epoch,
        val_g: st.val_g,
        val_d: st.val_d,
        warmup: st.warmup,
        log: st.log,
        optim,
    };
    let mut config = header.train_config;
    config.seed = st.master_seed;
    let mut trainer = Trainer::from_parts(bundle, config, Some(state));
    trainer.with_classifier = st.with_classifier;
    Ok(trainer)
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
