//! Binary checkpoint format and transfer initialization.
//!
//! Layout (little endian): `"ATTS"`, u32 version, u32 tensor count, then per
//! tensor u16 name length, UTF-8 name, u8 dtype (0 = f32, 1 = f64), u8 rank,
//! u32 dims, raw data; finally a u32-length-prefixed UTF-8 JSON metadata blob.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainingError;
use crate::autodiff::ParamSet;
use crate::rng;
use crate::taco::{TacoConfig, Tacotron};
use crate::tensor::Tensor;
use crate::vocoder::{WaveGlow, WaveGlowConfig};

pub const MAGIC: &[u8; 4] = b"ATTS";
pub const VERSION: u32 = 1;
/// Standard deviation of freshly initialized embedding rows.
pub const NEW_ROW_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&self.shape, self.data.to_f64())
    }
}

/// Metadata written by this crate. Other producers may store any JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `"tacotron"` or `"waveglow"`.
    pub model: String,
    /// Symbol strings in id order.
    pub symbols: Vec<String>,
    pub config: serde_json::Value,
    pub step: usize,
    #[serde(default)]
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
    /// Raw JSON text, kept verbatim so save/load round trips are byte-exact.
    pub metadata: String,
}

fn bad(m: impl Into<String>) -> TrainingError {
    TrainingError::Format(m.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainingError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("unexpected end of checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, TrainingError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, TrainingError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, TrainingError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    /// Snapshot of every parameter and buffer, stored as f64.
    pub fn from_params(params: &ParamSet, meta: &CheckpointMeta) -> Self {
        let tensors = params
            .iter()
            .map(|(_, p)| NamedTensor { name: p.name().to_string(), shape: p.value().shape().to_vec(), data: TensorData::F64(p.value().data().to_vec()) })
            .collect();
        Self { tensors, metadata: serde_json::to_string(meta).expect("metadata serializes") }
    }

    pub fn meta(&self) -> Result<CheckpointMeta, TrainingError> {
        serde_json::from_str(&self.metadata).map_err(|e| bad(format!("metadata: {e}")))
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, TrainingError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.tensors.len()).map_err(|_| bad("too many tensors"))?;
        out.extend_from_slice(&count.to_le_bytes());
        let mut seen = HashSet::new();
        for t in &self.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(bad(format!("duplicate tensor name {}", t.name)));
            }
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(bad(format!("{}: shape {:?} does not match {} values", t.name, t.shape, t.data.len())));
            }
            let name_len = u16::try_from(t.name.len()).map_err(|_| bad("tensor name too long"))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(match t.data {
                TensorData::F32(_) => 0,
                TensorData::F64(_) => 1,
            });
            out.push(u8::try_from(t.shape.len()).map_err(|_| bad("rank too large"))?);
            for &d in &t.shape {
                out.extend_from_slice(&u32::try_from(d).map_err(|_| bad("dimension too large"))?.to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let meta_len = u32::try_from(self.metadata.len()).map_err(|_| bad("metadata too long"))?;
        out.extend_from_slice(&meta_len.to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, TrainingError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        let mut seen = HashSet::new();
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(n)?).map_err(|_| bad("tensor name is not UTF-8"))?.to_string();
            if !seen.insert(name.clone()) {
                return Err(bad(format!("duplicate tensor name {name}")));
            }
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("tensor too large"))?;
            let data = match dtype {
                0 => TensorData::F32(
                    r.take(len.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                1 => TensorData::F64(
                    r.take(len.checked_mul(8).ok_or_else(|| bad("tensor too large"))?)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                d => return Err(bad(format!("{name}: unknown dtype code {d}"))),
            };
            tensors.push(NamedTensor { name, shape, data });
        }
        let meta_len = r.u32()? as usize;
        let metadata = std::str::from_utf8(r.take(meta_len)?).map_err(|_| bad("metadata is not UTF-8"))?.to_string();
        if r.pos != buf.len() {
            return Err(bad("trailing bytes after metadata"));
        }
        Ok(Self { tensors, metadata })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainingError> {
        Ok(std::fs::write(path, self.to_bytes()?)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainingError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copies every tensor into `params`. Names and shapes must match exactly
    /// and every parameter must be present.
    pub fn restore(&self, params: &mut ParamSet) -> Result<(), TrainingError> {
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let name = params.get(id).name().to_string();
            let t = self.get(&name).ok_or_else(|| bad(format!("checkpoint lacks {name}")))?;
            let model_shape = params.value(id).shape().to_vec();
            if t.shape != model_shape {
                return Err(TrainingError::ShapeConflict { name, checkpoint: t.shape.clone(), model: model_shape });
            }
            params.set_value(id, t.to_tensor());
        }
        if self.tensors.len() != params.len() {
            let extra: Vec<_> = self.tensors.iter().filter(|t| params.id(&t.name).is_none()).map(|t| t.name.as_str()).collect();
            return Err(bad(format!("checkpoint has tensors unknown to the model: {extra:?}")));
        }
        Ok(())
    }
}

/// Symbol strings of the phonetizer's table, in id order.
pub fn model_symbols() -> Vec<String> {
    crate::phonetizer::symbol_table().into_iter().map(|(s, _)| s).collect()
}

pub fn taco_checkpoint(model: &Tacotron, step: usize, epoch: usize) -> Checkpoint {
    let meta = CheckpointMeta {
        model: "tacotron".into(),
        symbols: model_symbols(),
        config: serde_json::to_value(&model.config).expect("config serializes"),
        step,
        epoch,
    };
    Checkpoint::from_params(&model.params, &meta)
}

/// Rebuilds a Tacotron from a checkpoint written by [`taco_checkpoint`].
pub fn load_taco(ck: &Checkpoint) -> Result<Tacotron, TrainingError> {
    let meta = ck.meta()?;
    if meta.model != "tacotron" {
        return Err(bad(format!("expected a tacotron checkpoint, found {}", meta.model)));
    }
    let config: TacoConfig = serde_json::from_value(meta.config).map_err(|e| bad(format!("config: {e}")))?;
    let mut model = Tacotron::new(config, 0)?;
    ck.restore(&mut model.params)?;
    Ok(model)
}

pub fn waveglow_checkpoint(model: &WaveGlow, step: usize, epoch: usize) -> Checkpoint {
    let meta = CheckpointMeta {
        model: "waveglow".into(),
        symbols: Vec::new(),
        config: serde_json::to_value(&model.config).expect("config serializes"),
        step,
        epoch,
    };
    Checkpoint::from_params(&model.params, &meta)
}

/// Rebuilds the vocoder and checks every mixing matrix is invertible.
pub fn load_waveglow(ck: &Checkpoint) -> Result<WaveGlow, TrainingError> {
    let meta = ck.meta()?;
    if meta.model != "waveglow" {
        return Err(bad(format!("expected a waveglow checkpoint, found {}", meta.model)));
    }
    let config: WaveGlowConfig = serde_json::from_value(meta.config).map_err(|e| bad(format!("config: {e}")))?;
    let mut model = WaveGlow::new(config, 0)?;
    ck.restore(&mut model.params)?;
    model.check_invertible()?;
    Ok(model)
}

/// What [`transfer_init`] did.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TransferReport {
    pub copied_tensors: Vec<String>,
    /// Model-side symbols whose embedding row came from the checkpoint.
    pub copied_rows: Vec<String>,
    /// Model-side symbols given a fresh `N(0, 0.02²)` row.
    pub initialized_rows: Vec<String>,
    /// Model parameters absent from the checkpoint, left at their
    /// initialization.
    pub missing_tensors: Vec<String>,
}

/// Initializes `params` from a checkpoint trained with another symbol table.
///
/// Tensors whose names and shapes match are copied. The embedding table
/// `embedding` is remapped row by row: a model symbol also present in the
/// checkpoint's table (by string) takes that row, any other symbol gets a row
/// drawn from `N(0, 0.02²)` with `seed`. Any other shape mismatch fails with
/// `ShapeConflict`, leaving `params` untouched.
pub fn transfer_init(
    params: &mut ParamSet,
    checkpoint: &Checkpoint,
    checkpoint_symbols: &[String],
    model_symbols: &[String],
    embedding: &str,
    seed: u64,
) -> Result<TransferReport, TrainingError> {
    let mut report = TransferReport::default();
    let mut updates = Vec::new();
    for id in params.ids().collect::<Vec<_>>() {
        let name = params.get(id).name().to_string();
        let model_shape = params.value(id).shape().to_vec();
        let Some(t) = checkpoint.get(&name) else {
            report.missing_tensors.push(name);
            continue;
        };
        if name == embedding {
            let dim = *model_shape.last().expect("embedding is [rows, dim]");
            if t.shape.len() != 2 || t.shape[1] != dim || model_shape[0] != model_symbols.len() || t.shape[0] != checkpoint_symbols.len() {
                return Err(TrainingError::ShapeConflict { name, checkpoint: t.shape.clone(), model: model_shape });
            }
            let src = t.data.to_f64();
            let index: HashMap<&str, usize> = checkpoint_symbols.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
            let mut r = rng::seeded(seed);
            let mut rows = Vec::with_capacity(model_symbols.len() * dim);
            for sym in model_symbols {
                match index.get(sym.as_str()) {
                    Some(&i) => {
                        rows.extend_from_slice(&src[i * dim..(i + 1) * dim]);
                        report.copied_rows.push(sym.clone());
                    }
                    None => {
                        rows.extend((0..dim).map(|_| rng::normal(&mut r, NEW_ROW_STD)));
                        report.initialized_rows.push(sym.clone());
                    }
                }
            }
            updates.push((id, Tensor::new(&model_shape, rows)));
        } else if t.shape == model_shape {
            updates.push((id, t.to_tensor()));
        } else {
            return Err(TrainingError::ShapeConflict { name, checkpoint: t.shape.clone(), model: model_shape });
        }
        report.copied_tensors.push(params.get(id).name().to_string());
    }
    for (id, v) in updates {
        params.set_value(id, v);
    }
    Ok(report)
}
