//! Versioned binary checkpoints: magic "RFCK", u32 version, a JSON header
//! (architecture, training config, normalization constants, tensor
//! manifest), then raw little-endian float32 blobs for the weights and the
//! Adam moments.

use ndarray::{Array1, Array2, Array4};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use super::adam::{Adam, MomentSlot};
use super::model::{build_model, ArchConfig, Model, TargetMode, TargetScaler};
use super::train::TrainConfig;
use super::NnError;
use crate::features::{FeatureStats, Recipe};

const MAGIC: &[u8; 4] = b"RFCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: ArchConfig,
    pub input_shape: (usize, usize, usize),
    pub target_mode: TargetMode,
    pub recipe: Recipe,
    pub scaler: TargetScaler,
    pub feature_stats: FeatureStats,
    pub train_config: TrainConfig,
    pub adam_step: u64,
    pub tensors: Vec<TensorInfo>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model<f32>,
    pub adam: Adam<f32>,
}

fn model_tensors(model: &Model<f32>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    use super::layers::Layer;
    let mut out = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        match layer {
            Layer::Conv(c) => {
                out.push((
                    format!("layer{i}.conv.weight"),
                    c.weights.shape().to_vec(),
                    c.weights.iter().cloned().collect(),
                ));
                out.push((
                    format!("layer{i}.conv.bias"),
                    c.bias.shape().to_vec(),
                    c.bias.iter().cloned().collect(),
                ));
            }
            Layer::Dense(d) => {
                out.push((
                    format!("layer{i}.dense.weight"),
                    d.weights.shape().to_vec(),
                    d.weights.iter().cloned().collect(),
                ));
                out.push((
                    format!("layer{i}.dense.bias"),
                    d.bias.shape().to_vec(),
                    d.bias.iter().cloned().collect(),
                ));
            }
            _ => {}
        }
    }
    out
}

fn adam_tensors(adam: &Adam<f32>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out = Vec::new();
    for (i, slot) in adam.slots.iter().enumerate() {
        match slot {
            MomentSlot::Conv { mw, vw, mb, vb } => {
                out.push((format!("adam{i}.mw"), mw.shape().to_vec(), mw.iter().cloned().collect()));
                out.push((format!("adam{i}.vw"), vw.shape().to_vec(), vw.iter().cloned().collect()));
                out.push((format!("adam{i}.mb"), mb.shape().to_vec(), mb.iter().cloned().collect()));
                out.push((format!("adam{i}.vb"), vb.shape().to_vec(), vb.iter().cloned().collect()));
            }
            MomentSlot::Dense { mw, vw, mb, vb } => {
                out.push((format!("adam{i}.mw"), mw.shape().to_vec(), mw.iter().cloned().collect()));
                out.push((format!("adam{i}.vw"), vw.shape().to_vec(), vw.iter().cloned().collect()));
                out.push((format!("adam{i}.mb"), mb.shape().to_vec(), mb.iter().cloned().collect()));
                out.push((format!("adam{i}.vb"), vb.shape().to_vec(), vb.iter().cloned().collect()));
            }
            MomentSlot::None => {}
        }
    }
    out
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), NnError> {
    let mut tensors = model_tensors(&checkpoint.model);
    tensors.extend(adam_tensors(&checkpoint.adam));

    let mut meta = checkpoint.meta.clone();
    meta.adam_step = checkpoint.adam.step;
    meta.tensors = tensors
        .iter()
        .map(|(name, shape, _)| TensorInfo { name: name.clone(), shape: shape.clone() })
        .collect();

    let header = serde_json::to_vec(&meta).expect("meta serializes");
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for (_, _, values) in &tensors {
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn bad(path: &Path, reason: impl Into<String>) -> NnError {
    NnError::BadCheckpoint { path: path.display().to_string(), reason: reason.into() }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, NnError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad(path, "bad magic"));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(bad(path, format!("unsupported version {version}")));
    }
    r.read_exact(&mut buf4)?;
    let header_len = u32::from_le_bytes(buf4) as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)?;
    let meta: CheckpointMeta =
        serde_json::from_slice(&header).map_err(|e| bad(path, e.to_string()))?;

    // Structure is a pure function of (arch, input shape, target mode); the
    // blobs then overwrite the freshly initialized parameters.
    let (c, bands, frames) = meta.input_shape;
    let mut model = build_model::<f32>(c, bands, frames, meta.target_mode, &meta.arch, 0)?;
    let mut adam = Adam::new(&model);
    adam.step = meta.adam_step;

    let mut read_tensor = |expect_name: &str, len: usize| -> Result<Vec<f32>, NnError> {
        let info = meta
            .tensors
            .iter()
            .find(|t| t.name == expect_name)
            .ok_or_else(|| bad(path, format!("missing tensor {expect_name}")))?;
        let expected: usize = info.shape.iter().product();
        if expected != len {
            return Err(bad(path, format!("tensor {expect_name} shape mismatch")));
        }
        let mut bytes = vec![0u8; len * 4];
        r.read_exact(&mut bytes).map_err(|_| bad(path, "truncated blob section"))?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    };

    use super::layers::Layer;
    for i in 0..model.layers.len() {
        enum Kind {
            Conv((usize, usize, usize, usize), usize),
            Dense((usize, usize), usize),
            Other,
        }
        let kind = match &model.layers[i] {
            Layer::Conv(conv) => Kind::Conv(conv.weights.dim(), conv.bias.len()),
            Layer::Dense(d) => Kind::Dense(d.weights.dim(), d.bias.len()),
            _ => Kind::Other,
        };
        match kind {
            Kind::Conv(wdim, blen) => {
                let w = read_tensor(&format!("layer{i}.conv.weight"), wdim.0 * wdim.1 * wdim.2 * wdim.3)?;
                let b = read_tensor(&format!("layer{i}.conv.bias"), blen)?;
                if let Layer::Conv(conv) = &mut model.layers[i] {
                    conv.weights = Array4::from_shape_vec(wdim, w).expect("shape checked");
                    conv.bias = Array1::from_vec(b);
                }
            }
            Kind::Dense(wdim, blen) => {
                let w = read_tensor(&format!("layer{i}.dense.weight"), wdim.0 * wdim.1)?;
                let b = read_tensor(&format!("layer{i}.dense.bias"), blen)?;
                if let Layer::Dense(d) = &mut model.layers[i] {
                    d.weights = Array2::from_shape_vec(wdim, w).expect("shape checked");
                    d.bias = Array1::from_vec(b);
                }
            }
            Kind::Other => {}
        }
    }
    for i in 0..adam.slots.len() {
        enum SlotShape {
            Conv((usize, usize, usize, usize), usize),
            Dense((usize, usize), usize),
            Other,
        }
        let shape = match &adam.slots[i] {
            MomentSlot::Conv { mw, mb, .. } => SlotShape::Conv(mw.dim(), mb.len()),
            MomentSlot::Dense { mw, mb, .. } => SlotShape::Dense(mw.dim(), mb.len()),
            MomentSlot::None => SlotShape::Other,
        };
        match shape {
            SlotShape::Conv(dim, blen) => {
                let wlen = dim.0 * dim.1 * dim.2 * dim.3;
                let mw = read_tensor(&format!("adam{i}.mw"), wlen)?;
                let vw = read_tensor(&format!("adam{i}.vw"), wlen)?;
                let mb = read_tensor(&format!("adam{i}.mb"), blen)?;
                let vb = read_tensor(&format!("adam{i}.vb"), blen)?;
                adam.slots[i] = MomentSlot::Conv {
                    mw: Array4::from_shape_vec(dim, mw).expect("shape checked"),
                    vw: Array4::from_shape_vec(dim, vw).expect("shape checked"),
                    mb: Array1::from_vec(mb),
                    vb: Array1::from_vec(vb),
                };
            }
            SlotShape::Dense(dim, blen) => {
                let wlen = dim.0 * dim.1;
                let mw = read_tensor(&format!("adam{i}.mw"), wlen)?;
                let vw = read_tensor(&format!("adam{i}.vw"), wlen)?;
                let mb = read_tensor(&format!("adam{i}.mb"), blen)?;
                let vb = read_tensor(&format!("adam{i}.vb"), blen)?;
                adam.slots[i] = MomentSlot::Dense {
                    mw: Array2::from_shape_vec(dim, mw).expect("shape checked"),
                    vw: Array2::from_shape_vec(dim, vw).expect("shape checked"),
                    mb: Array1::from_vec(mb),
                    vb: Array1::from_vec(vb),
                };
            }
            SlotShape::Other => {}
        }
    }

    Ok(Checkpoint { meta, model, adam })
}
