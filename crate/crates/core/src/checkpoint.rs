//! Checkpoint container for the denoiser and its optimizer state.
//!
//! # Byte layout (stable, version 1)
//!
//! All integers little-endian.
//!
//! ```text
//! offset  size  field
//! 0       4     magic bytes "IDCK"
//! 4       4     format version, u32 (currently 1)
//! 8       8     header length H, u64
//! 16      H     header, UTF-8 JSON (see `Header`)
//! 16+H    ...   payload: raw array data, concatenated in header order
//! ```
//!
//! The header lists every array with its name, dtype (`"f32"`), shape, and
//! byte offset/length relative to the payload start. Parameters come first in
//! registration order, then, when optimizer state is saved, the first and
//! second moments as `opt.m.<name>` / `opt.v.<name>`. Array data is raw
//! little-endian IEEE-754, row-major. Save → load round-trips bit-exactly.

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::denoiser::{Denoiser, ModelConfig};
use crate::error::{CoreError, CoreResult};
use crate::optim::AdamW;
use crate::schedule::{make_linear_schedule, NoiseSchedule};

const MAGIC: &[u8; 4] = b"IDCK";
const FORMAT_VERSION: u32 = 1;

/// Linear-schedule parameters; enough to rebuild the full table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    /// Defaults: 1e-4 → 0.02 at T = 1000, scaled by 1000/T otherwise.
    pub fn default_for(num_steps: usize) -> Self {
        let scale = 1000.0 / num_steps as f64;
        Self {
            num_steps,
            beta_start: 1e-4 * scale,
            beta_end: 0.02 * scale,
        }
    }

    pub fn build(&self) -> CoreResult<NoiseSchedule> {
        make_linear_schedule(self.num_steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayInfo {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    schedule: ScheduleConfig,
    step: u64,
    init_seed: u64,
    arrays: Vec<ArrayInfo>,
}

/// Deserialized checkpoint contents.
pub struct Checkpoint {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub step: u64,
    pub init_seed: u64,
    pub params: Vec<(String, ArrayD<f32>)>,
    pub opt_m: Vec<(String, ArrayD<f32>)>,
    pub opt_v: Vec<(String, ArrayD<f32>)>,
}

fn corrupt(msg: impl Into<String>) -> CoreError {
    CoreError::CorruptCheckpoint(msg.into())
}

/// Write the model (and optionally optimizer moments) to `path`.
pub fn save_checkpoint(
    path: &Path,
    model: &Denoiser<f32>,
    schedule: ScheduleConfig,
    opt: Option<&AdamW<f32>>,
) -> CoreResult<()> {
    let mut arrays: Vec<(String, &ArrayD<f32>)> = model
        .store()
        .iter()
        .map(|(_, e)| (e.name.clone(), &e.value))
        .collect();
    if let Some(opt) = opt {
        let (m, v) = opt.moments();
        let names: Vec<String> = model.store().iter().map(|(_, e)| e.name.clone()).collect();
        for (name, arr) in names.iter().zip(m.iter()) {
            arrays.push((format!("opt.m.{name}"), arr));
        }
        for (name, arr) in names.iter().zip(v.iter()) {
            arrays.push((format!("opt.v.{name}"), arr));
        }
    }

    let mut infos = Vec::with_capacity(arrays.len());
    let mut offset = 0u64;
    for (name, arr) in &arrays {
        let byte_len = (arr.len() * 4) as u64;
        infos.push(ArrayInfo {
            name: name.clone(),
            dtype: "f32".into(),
            shape: arr.shape().to_vec(),
            offset,
            byte_len,
        });
        offset += byte_len;
    }
    let header = Header {
        model: model.config().clone(),
        schedule,
        step: model.step,
        init_seed: model.init_seed,
        arrays: infos,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| corrupt(format!("header serialization failed: {e}")))?;

    let mut file = std::fs::File::create(path)
        .map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let io = |e| CoreError::io(path.display().to_string(), e);
    file.write_all(MAGIC).map_err(io)?;
    file.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    file.write_all(&(header_json.len() as u64).to_le_bytes()).map_err(io)?;
    file.write_all(&header_json).map_err(io)?;
    let mut buf = Vec::with_capacity(offset as usize);
    for (_, arr) in &arrays {
        let standard = arr.as_standard_layout();
        for &v in standard.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    file.write_all(&buf).map_err(io)?;
    Ok(())
}

/// Read and validate a checkpoint file.
pub fn load_checkpoint(path: &Path) -> CoreResult<Checkpoint> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| CoreError::io(path.display().to_string(), e))?;
    if bytes.len() < 16 {
        return Err(corrupt(format!("file too short: {} bytes", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CoreError::CheckpointMismatch {
            field: "format_version".into(),
            found: version.to_string(),
            expected: FORMAT_VERSION.to_string(),
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(corrupt("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| corrupt(format!("header parse: {e}")))?;
    let payload = &bytes[16 + header_len..];

    let mut params = Vec::new();
    let mut opt_m = Vec::new();
    let mut opt_v = Vec::new();
    for info in &header.arrays {
        if info.dtype != "f32" {
            return Err(corrupt(format!("unsupported dtype {}", info.dtype)));
        }
        let elems: usize = info.shape.iter().product();
        if info.byte_len as usize != elems * 4 {
            return Err(corrupt(format!(
                "array {}: byte length {} does not match shape {:?}",
                info.name, info.byte_len, info.shape
            )));
        }
        let start = info.offset as usize;
        let end = start + info.byte_len as usize;
        if end > payload.len() {
            return Err(corrupt(format!(
                "array {}: payload truncated ({} > {})",
                info.name,
                end,
                payload.len()
            )));
        }
        let mut data = Vec::with_capacity(elems);
        for chunk in payload[start..end].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&info.shape), data)
            .map_err(|e| corrupt(format!("array {}: {e}", info.name)))?;
        if let Some(rest) = info.name.strip_prefix("opt.m.") {
            opt_m.push((rest.to_string(), arr));
        } else if let Some(rest) = info.name.strip_prefix("opt.v.") {
            opt_v.push((rest.to_string(), arr));
        } else {
            params.push((info.name.clone(), arr));
        }
    }

    Ok(Checkpoint {
        model: header.model,
        schedule: header.schedule,
        step: header.step,
        init_seed: header.init_seed,
        params,
        opt_m,
        opt_v,
    })
}

/// Field-by-field config comparison; the error names the first differing field.
pub fn require_matching_config(found: &ModelConfig, expected: &ModelConfig) -> CoreResult<()> {
    macro_rules! check {
        ($field:ident) => {
            if found.$field != expected.$field {
                return Err(CoreError::CheckpointMismatch {
                    field: stringify!($field).into(),
                    found: format!("{:?}", found.$field),
                    expected: format!("{:?}", expected.$field),
                });
            }
        };
    }
    check!(image_size);
    check!(num_stages);
    check!(base_channels);
    check!(channel_multipliers);
    check!(blocks_per_stage);
    check!(attention_resolutions);
    check!(num_heads);
    check!(writer_count);
    check!(writer_embed_dim);
    check!(timestep_embed_dim);
    check!(null_writer_index);
    Ok(())
}

impl Checkpoint {
    /// Rebuild the denoiser (and optionally an optimizer) from this checkpoint.
    pub fn restore(&self, lr: f64, weight_decay: f64) -> CoreResult<(Denoiser<f32>, AdamW<f32>)> {
        let mut model: Denoiser<f32> = Denoiser::new(self.model.clone(), self.init_seed)?;
        if self.params.len() != model.store().len() {
            return Err(corrupt(format!(
                "checkpoint holds {} parameter arrays, model needs {}",
                self.params.len(),
                model.store().len()
            )));
        }
        for (name, value) in &self.params {
            let id = model
                .store()
                .find(name)
                .ok_or_else(|| corrupt(format!("unknown parameter {name}")))?;
            if model.store().value(id).shape() != value.shape() {
                return Err(corrupt(format!(
                    "parameter {name}: shape {:?} vs expected {:?}",
                    value.shape(),
                    model.store().value(id).shape()
                )));
            }
            *model.store_mut().value_mut(id) = value.clone();
        }
        model.step = self.step;

        let mut opt = AdamW::new(model.store(), lr, weight_decay);
        if !self.opt_m.is_empty() {
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (_, e) in model.store().clone().iter() {
                let find = |list: &[(String, ArrayD<f32>)]| {
                    list.iter()
                        .find(|(n, _)| n == &e.name)
                        .map(|(_, a)| a.clone())
                        .ok_or_else(|| corrupt(format!("missing optimizer moment for {}", e.name)))
                };
                m.push(find(&self.opt_m)?);
                v.push(find(&self.opt_v)?);
            }
            opt.restore(self.step, m, v);
        }
        Ok((model, opt))
    }
}
