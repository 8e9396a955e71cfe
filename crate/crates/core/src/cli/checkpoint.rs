//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//! `"RCAE"`, `u32` version, `u32` header length, header JSON, `u32` record
//! count, then per record `u32` name length, name, `u8` dtype tag, `u8`
//! rank, `u64` dims, raw values.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Autoencoder, ModelConfig, NliModel, WordConfig};
use crate::nn::NormLayer;
use crate::retrieval::{load_glove, GloveTable};
use crate::tensor::{ParamStore, Rng, Tensor};
use crate::train::{Sgd, TrainConfig};

pub const MAGIC: &[u8; 4] = b"RCAE";
pub const FORMAT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_U64: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum RecordData {
    F32(Vec<f32>),
    U64(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: RecordData,
}

impl Record {
    fn f32(name: String, dims: &[usize], values: Vec<f32>) -> Self {
        Record { name, dims: dims.iter().map(|&d| d as u64).collect(), data: RecordData::F32(values) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Byte,
    Word,
}

/// Human-readable part of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: ModelKind,
    pub model: Option<ModelConfig>,
    pub word: Option<WordConfig>,
    pub train: TrainConfig,
    /// Word-vector file the frozen table is reloaded from.
    pub glove: Option<PathBuf>,
    pub epochs_done: usize,
}

pub fn encode(header: &Header, records: &[Record]) -> Result<Vec<u8>> {
    let json = serde_json::to_string(header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(match r.data {
            RecordData::F32(_) => DTYPE_F32,
            RecordData::U64(_) => DTYPE_U64,
        });
        out.push(r.dims.len() as u8);
        for d in &r.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &r.data {
            RecordData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            RecordData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Header, Vec<Record>)> {
    let mut rd = Reader { bytes, pos: 0 };
    if rd.take(4, "magic").ok() != Some(&MAGIC[..]) {
        return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
    }
    let version = rd.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("format version {version} is not supported (expected {FORMAT_VERSION})")));
    }
    let len = rd.u32("header")? as usize;
    let json = std::str::from_utf8(rd.take(len, "header")?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let header: Header = serde_json::from_str(json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let count = rd.u32("record count")?;
    let mut records = Vec::with_capacity(count as usize);
    for i in 0..count {
        let unnamed = format!("record #{i}");
        let nlen = rd.u32(&unnamed)? as usize;
        let name = String::from_utf8(rd.take(nlen, &unnamed)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{unnamed}: name is not UTF-8")))?;
        let what = format!("record {name}");
        let dtype = rd.u8(&what)?;
        let rank = rd.u8(&what)?;
        let dims = (0..rank).map(|_| rd.u64(&what)).collect::<Result<Vec<u64>>>()?;
        let n = dims.iter().try_fold(1u64, |a, &d| a.checked_mul(d)).unwrap_or(u64::MAX);
        let data = match dtype {
            DTYPE_F32 => {
                let raw = rd.take(usize::try_from(n.saturating_mul(4)).unwrap_or(usize::MAX), &what)?;
                RecordData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
            }
            DTYPE_U64 => {
                let raw = rd.take(usize::try_from(n.saturating_mul(8)).unwrap_or(usize::MAX), &what)?;
                RecordData::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
            }
            t => return Err(Error::Checkpoint(format!("{what}: unknown dtype tag {t}"))),
        };
        records.push(Record { name, dims, data });
    }
    if rd.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - rd.pos)));
    }
    Ok((header, records))
}

/// Writes through a temporary file in the same directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn stats_records(layers: &[&NormLayer<f32>], out: &mut Vec<Record>) {
    for layer in layers {
        for (key, st) in &layer.stats {
            let tag = format!("{}.s{}k{}", layer.name, key.step, key.k);
            let c = st.running_mean.len();
            out.push(Record::f32(format!("{tag}.running_mean"), &[c], st.running_mean.clone()));
            out.push(Record::f32(format!("{tag}.running_var"), &[c], st.running_var.clone()));
            out.push(Record { name: format!("{tag}.updates"), dims: vec![1], data: RecordData::U64(vec![st.updates]) });
        }
    }
}

/// Trainable parameters, running statistics and optional velocity. Frozen
/// parameters are not stored.
fn model_records(params: &ParamStore<f32>, layers: &[&NormLayer<f32>], velocity: Option<&Sgd<f32>>) -> Vec<Record> {
    let mut out = Vec::new();
    for (_, p) in params.iter().filter(|(_, p)| !p.frozen) {
        out.push(Record::f32(p.name.clone(), p.value.shape(), p.value.data().to_vec()));
    }
    stats_records(layers, &mut out);
    if let Some(sgd) = velocity {
        for ((_, p), v) in params.iter().zip(&sgd.velocity).filter(|((_, p), _)| !p.frozen) {
            out.push(Record::f32(format!("velocity.{}", p.name), v.shape(), v.data().to_vec()));
        }
    }
    out
}

fn take_f32(records: &mut RecordMap, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
    let r = records.remove(name).ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))?;
    let dims: Vec<u64> = shape.iter().map(|&d| d as u64).collect();
    if r.dims != dims {
        return Err(Error::Checkpoint(format!("record {name} has dims {:?}, model expects {:?}", r.dims, dims)));
    }
    match r.data {
        RecordData::F32(v) => Ok(v),
        RecordData::U64(_) => Err(Error::Checkpoint(format!("record {name} has the wrong dtype"))),
    }
}

type RecordMap = HashMap<String, Record>;

fn record_map(records: Vec<Record>) -> RecordMap {
    records.into_iter().map(|r| (r.name.clone(), r)).collect()
}

fn apply_params(map: &mut RecordMap, params: &mut ParamStore<f32>) -> Result<()> {
    for p in params.iter_mut().filter(|p| !p.frozen) {
        let v = take_f32(map, &p.name, p.value.shape())?;
        p.value = Tensor::from_vec(p.value.shape(), v)?;
    }
    Ok(())
}

fn apply_stats(map: &mut RecordMap, layers: Vec<&mut NormLayer<f32>>) -> Result<()> {
    for layer in layers {
        for (key, st) in layer.stats.iter_mut() {
            let tag = format!("{}.s{}k{}", layer.name, key.step, key.k);
            let c = st.running_mean.len();
            st.running_mean = take_f32(map, &format!("{tag}.running_mean"), &[c])?;
            st.running_var = take_f32(map, &format!("{tag}.running_var"), &[c])?;
            let name = format!("{tag}.updates");
            st.updates = match map.remove(&name) {
                Some(Record { data: RecordData::U64(v), .. }) if v.len() == 1 => v[0],
                _ => return Err(Error::Checkpoint(format!("missing or malformed record {name}"))),
            };
        }
    }
    Ok(())
}

/// Velocity records, if the checkpoint has any; every other record must
/// have been consumed already.
fn take_velocity(mut map: RecordMap, params: &ParamStore<f32>) -> Result<Option<Sgd<f32>>> {
    let velocity = if map.keys().any(|k| k.starts_with("velocity.")) {
        let mut sgd = Sgd::new(params);
        for ((_, p), v) in params.iter().zip(sgd.velocity.iter_mut()) {
            if !p.frozen {
                let data = take_f32(&mut map, &format!("velocity.{}", p.name), p.value.shape())?;
                *v = Tensor::from_vec(p.value.shape(), data)?;
            }
        }
        Some(sgd)
    } else {
        None
    };
    if let Some(extra) = map.keys().min() {
        return Err(Error::Checkpoint(format!("unexpected record {extra}")));
    }
    Ok(velocity)
}

#[derive(Debug, Clone)]
pub enum SavedModel {
    Byte(Autoencoder<f32>),
    Word(NliModel<f32>),
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: Header,
    pub model: SavedModel,
    pub velocity: Option<Sgd<f32>>,
}

impl Checkpoint {
    pub fn byte(model: Autoencoder<f32>, train: TrainConfig, epochs_done: usize, velocity: Option<Sgd<f32>>) -> Self {
        let header =
            Header { kind: ModelKind::Byte, model: Some(model.config), word: None, train, glove: None, epochs_done };
        Checkpoint { header, model: SavedModel::Byte(model), velocity }
    }

    pub fn word(
        model: NliModel<f32>,
        glove: PathBuf,
        train: TrainConfig,
        epochs_done: usize,
        velocity: Option<Sgd<f32>>,
    ) -> Self {
        let header = Header {
            kind: ModelKind::Word,
            model: None,
            word: Some(model.config),
            train,
            glove: Some(glove),
            epochs_done,
        };
        Checkpoint { header, model: SavedModel::Word(model), velocity }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let records = match &self.model {
            SavedModel::Byte(m) => model_records(&m.params, &m.norm_layers(), self.velocity.as_ref()),
            SavedModel::Word(m) => model_records(&m.params, &m.norm_layers(), self.velocity.as_ref()),
        };
        encode(&self.header, &records)
    }

    /// Rebuilds the model described by the header. Word models reload their
    /// frozen vectors from `glove`, or from the path in the header.
    pub fn from_bytes(bytes: &[u8], glove: Option<&GloveTable>) -> Result<Self> {
        let (header, records) = decode(bytes)?;
        let mut rng = Rng::new(0);
        match header.kind {
            ModelKind::Byte => {
                let cfg = header.model.ok_or_else(|| Error::Checkpoint("byte model without model config".into()))?;
                let mut m = Autoencoder::new(cfg, &mut rng)?;
                let mut map = record_map(records);
                apply_params(&mut map, &mut m.params)?;
                apply_stats(&mut map, m.norm_layers_mut())?;
                let velocity = take_velocity(map, &m.params)?;
                Ok(Checkpoint { header, model: SavedModel::Byte(m), velocity })
            }
            ModelKind::Word => {
                let cfg = header.word.ok_or_else(|| Error::Checkpoint("word model without word config".into()))?;
                let loaded;
                let table = match glove {
                    Some(g) => g,
                    None => {
                        let path = header.glove.as_ref().ok_or_else(|| Error::Checkpoint("word model without vector file".into()))?;
                        loaded = load_glove(path)?;
                        &loaded
                    }
                };
                if table.dim() != cfg.d_w {
                    return Err(Error::Checkpoint(format!(
                        "word vectors have dimension {}, checkpoint expects {}",
                        table.dim(),
                        cfg.d_w
                    )));
                }
                let mut m = NliModel::new(cfg, table.vocab(), table.tensor(), &mut rng)?;
                let mut map = record_map(records);
                apply_params(&mut map, &mut m.params)?;
                apply_stats(&mut map, m.norm_layers_mut())?;
                let velocity = take_velocity(map, &m.params)?;
                Ok(Checkpoint { header, model: SavedModel::Word(m), velocity })
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path, glove: Option<&GloveTable>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, glove).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
