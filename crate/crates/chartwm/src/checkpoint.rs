//! Checkpoint serialization: the "CSWM0001" container.
//!
//! Layout (all integers little-endian):
//! magic `CSWM0001` · u32 version · u64 config length + UTF-8 config
//! document · u32 tensor count · per tensor: u16 name length, name bytes,
//! u8 rank, u32 dims, f32 values.
//!
//! A checkpoint carries the four parameter stores (online encoder, EMA
//! target encoder, predictor, frozen inverse-dynamics probe) under the
//! prefixes `online.` / `target.` / `dynamics.` / `idm.`, optionally the
//! AdamW moments under `opt.`, and the trainer's global step as the scalar
//! `meta.global_step` — everything needed to resume a run mid-schedule.
//! Values are f32 in the file and f64 in memory; save → load → save is
//! byte-identical because f32 survives the round trip exactly and the config
//! document is preserved verbatim.

use std::path::Path;

use crate::config::{parse_run_config, RunConfig};
use crate::dataset::atomic_write;
use crate::error::DataError;
use crate::model::WorldModel;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::trainer::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CSWM0001";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Scalar tensor carrying the trainer's global step (exact up to 2^24,
/// far beyond any schedule here).
pub const STEP_TENSOR: &str = "meta.global_step";

const MAX_TENSORS: u64 = 1 << 20;
const MAX_RANK: u8 = 8;

const STORE_PREFIXES: [&str; 4] = ["online", "target", "dynamics", "idm"];

/// A parsed checkpoint: the verbatim config document plus the flat named
/// tensor list in file order. Structure (stores, optimizer, step) is
/// interpreted by [`restore_model`], not here.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_json: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn push_store(out: &mut Vec<(String, Tensor)>, prefix: &str, store: &ParamStore) {
    for (name, tensor, _) in store.iter() {
        out.push((format!("{prefix}.{name}"), tensor.clone()));
    }
}

/// Assemble a checkpoint from a model, the config document that produced it,
/// and (after training) the optimizer state.
pub fn build_checkpoint(
    config_json: &str,
    model: &WorldModel,
    global_step: u64,
    opt: Option<(&AdamState, &AdamState)>,
) -> Result<Checkpoint, DataError> {
    if global_step >= 1 << 24 {
        return Err(DataError::Implausible {
            field: "global_step".into(),
            value: global_step,
            context: "checkpoint build (f32 exactness bound)".into(),
        });
    }
    let mut tensors = Vec::new();
    for (prefix, store) in STORE_PREFIXES
        .iter()
        .zip([&model.online, &model.target, &model.dynamics, &model.idm])
    {
        push_store(&mut tensors, prefix, store);
    }
    if let Some((enc, dyn_)) = opt {
        for (scope, state) in [("online", enc), ("dynamics", dyn_)] {
            for (name, m, v) in state.moments() {
                tensors.push((format!("opt.{scope}.m.{name}"), m.clone()));
                tensors.push((format!("opt.{scope}.v.{name}"), v.clone()));
            }
        }
    }
    tensors.push((STEP_TENSOR.to_string(), Tensor::scalar(global_step as f64)));
    Ok(Checkpoint { config_json: config_json.to_string(), tensors })
}

/// Serialize to the binary container. Rejects values that do not survive
/// the f32 narrowing finitely.
pub fn serialize_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>, DataError> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(ckpt.config_json.len() as u64).to_le_bytes());
    out.extend_from_slice(ckpt.config_json.as_bytes());
    if ckpt.tensors.len() as u64 > MAX_TENSORS {
        return Err(DataError::Implausible {
            field: "tensor count".into(),
            value: ckpt.tensors.len() as u64,
            context: "checkpoint serialization".into(),
        });
    }
    out.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, tensor) in &ckpt.tensors {
        if name.len() > u16::MAX as usize {
            return Err(DataError::Implausible {
                field: "tensor name length".into(),
                value: name.len() as u64,
                context: format!("tensor {}…", &name[..32.min(name.len())]),
            });
        }
        let shape = tensor.shape();
        if shape.len() > MAX_RANK as usize {
            return Err(DataError::Implausible {
                field: "rank".into(),
                value: shape.len() as u64,
                context: format!("tensor {name}"),
            });
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for &d in shape {
            if d > u32::MAX as usize {
                return Err(DataError::Implausible {
                    field: "dimension".into(),
                    value: d as u64,
                    context: format!("tensor {name}"),
                });
            }
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            let narrowed = v as f32;
            if !narrowed.is_finite() {
                return Err(DataError::NonFinite { context: format!("tensor {name}") });
            }
            out.extend_from_slice(&narrowed.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8], DataError> {
        if self.buf.len() - self.pos < n {
            return Err(DataError::Truncated { context: context.to_string() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, context: &str) -> Result<u16, DataError> {
        Ok(u16::from_le_bytes(self.take(2, context)?.try_into().unwrap()))
    }

    fn u32(&mut self, context: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }

    fn u64(&mut self, context: &str) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Parse a checkpoint from bytes. Every read is bounds-checked and every
/// size field is verified against the bytes actually present before any
/// allocation, so arbitrary input cannot panic or balloon memory.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint, DataError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(8, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(DataError::BadMagic {
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            got: format!("{:02x?}", magic),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(DataError::Version { got: version, supported: CHECKPOINT_VERSION });
    }
    let cfg_len = r.u64("config length")?;
    if cfg_len > r.remaining() as u64 {
        return Err(DataError::Truncated { context: "config document".into() });
    }
    let cfg_bytes = r.take(cfg_len as usize, "config document")?;
    let config_json = std::str::from_utf8(cfg_bytes)
        .map_err(|e| DataError::Config(format!("config document is not UTF-8: {e}")))?
        .to_string();

    let count = r.u32("tensor count")? as u64;
    if count > MAX_TENSORS || count * 3 > r.remaining() as u64 {
        return Err(DataError::Implausible {
            field: "tensor count".into(),
            value: count,
            context: "checkpoint header".into(),
        });
    }
    let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(count as usize);
    for ti in 0..count {
        let context = format!("tensor {ti}");
        let name_len = r.u16(&context)? as usize;
        let name = std::str::from_utf8(r.take(name_len, &context)?)
            .map_err(|e| DataError::Config(format!("{context}: name is not UTF-8: {e}")))?
            .to_string();
        if tensors.iter().any(|(n, _)| *n == name) {
            return Err(DataError::UnexpectedTensor { name: format!("{name} (duplicate)") });
        }
        let rank = r.take(1, &context)?[0];
        if rank > MAX_RANK {
            return Err(DataError::Implausible {
                field: "rank".into(),
                value: rank as u64,
                context,
            });
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = r.u32(&context)? as u64;
            numel = numel.checked_mul(d).ok_or_else(|| DataError::Implausible {
                field: "element count".into(),
                value: u64::MAX,
                context: context.clone(),
            })?;
            shape.push(d as usize);
        }
        if numel * 4 > r.remaining() as u64 {
            return Err(DataError::Truncated { context });
        }
        let raw = r.take(numel as usize * 4, &context)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.push((name, Tensor::from_vec(&shape, data)));
    }
    if r.remaining() != 0 {
        return Err(DataError::Implausible {
            field: "trailing bytes".into(),
            value: r.remaining() as u64,
            context: "after last tensor".into(),
        });
    }
    Ok(Checkpoint { config_json, tensors })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), DataError> {
    atomic_write(path, &serialize_checkpoint(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, DataError> {
    parse_checkpoint(&std::fs::read(path)?)
}

/// A checkpoint interpreted back into live objects.
pub struct RestoredModel {
    pub config: RunConfig,
    pub model: WorldModel,
    pub global_step: u64,
    /// AdamW moments for (online encoder, predictor) when the checkpoint
    /// carries optimizer state.
    pub opt: Option<(AdamState, AdamState)>,
}

fn fill_store(
    store: &mut ParamStore,
    prefix: &str,
    ckpt: &Checkpoint,
) -> Result<usize, DataError> {
    let mut used = 0;
    let names: Vec<String> = store.iter().map(|(n, _, _)| n.to_string()).collect();
    for name in names {
        let full = format!("{prefix}.{name}");
        let found = ckpt
            .tensor(&full)
            .ok_or_else(|| DataError::MissingTensor { name: full.clone() })?;
        let dst = store.get_mut(&name);
        if found.shape() != dst.shape() {
            return Err(DataError::TensorShape {
                name: full,
                got: found.shape().to_vec(),
                expected: dst.shape().to_vec(),
            });
        }
        if !found.all_finite() {
            return Err(DataError::NonFinite { context: full });
        }
        dst.data_mut().copy_from_slice(found.data());
        used += 1;
    }
    Ok(used)
}

/// Rebuild the model (and optimizer state, if stored) from a checkpoint:
/// parse and validate the embedded config, construct the model skeleton it
/// describes, then overwrite every parameter — verifying that the tensor
/// names and shapes in the file match the skeleton exactly, with nothing
/// missing and nothing left over.
pub fn restore_model(ckpt: &Checkpoint) -> Result<RestoredModel, DataError> {
    let config = parse_run_config(&ckpt.config_json)?;
    config
        .validate()
        .map_err(|e| DataError::Config(format!("embedded config is invalid: {e}")))?;
    let mut model = WorldModel::new(config.model.clone(), config.model_seed)
        .map_err(|e| DataError::Config(format!("embedded model config is unusable: {e}")))?;

    let mut used = 0;
    used += fill_store(&mut model.online, "online", ckpt)?;
    used += fill_store(&mut model.target, "target", ckpt)?;
    used += fill_store(&mut model.dynamics, "dynamics", ckpt)?;
    used += fill_store(&mut model.idm, "idm", ckpt)?;

    let step_tensor = ckpt
        .tensor(STEP_TENSOR)
        .ok_or_else(|| DataError::MissingTensor { name: STEP_TENSOR.into() })?;
    let raw_step = step_tensor.data()[0];
    if !(raw_step >= 0.0 && raw_step.fract() == 0.0 && raw_step < (1u64 << 24) as f64) {
        return Err(DataError::Implausible {
            field: "global step".into(),
            value: raw_step as u64,
            context: STEP_TENSOR.into(),
        });
    }
    let global_step = raw_step as u64;
    used += 1;

    let has_opt = ckpt.tensors.iter().any(|(n, _)| n.starts_with("opt."));
    let opt = if has_opt {
        let mut states = Vec::new();
        for (scope, store) in [("online", &model.online), ("dynamics", &model.dynamics)] {
            let trainable: Vec<(String, Vec<usize>)> = store
                .iter()
                .filter(|(_, _, k)| *k != crate::params::ParamKind::Buffer)
                .map(|(n, t, _)| (n.to_string(), t.shape().to_vec()))
                .collect();
            let mut moments = Vec::new();
            for (name, shape) in &trainable {
                let mut pair = Vec::with_capacity(2);
                for kind in ["m", "v"] {
                    let full = format!("opt.{scope}.{kind}.{name}");
                    let t = ckpt
                        .tensor(&full)
                        .ok_or_else(|| DataError::MissingTensor { name: full.clone() })?;
                    if t.shape() != &shape[..] {
                        return Err(DataError::TensorShape {
                            name: full,
                            got: t.shape().to_vec(),
                            expected: shape.clone(),
                        });
                    }
                    if !t.all_finite() {
                        return Err(DataError::NonFinite { context: full });
                    }
                    pair.push(t.clone());
                    used += 1;
                }
                moments.push((name.clone(), pair.remove(0), pair.remove(0)));
            }
            let state = AdamState::restore(store, &moments, global_step)
                .map_err(|e| DataError::Config(format!("optimizer state: {e}")))?;
            states.push(state);
        }
        let dyn_state = states.pop().unwrap();
        let enc_state = states.pop().unwrap();
        Some((enc_state, dyn_state))
    } else {
        None
    };

    if used != ckpt.tensors.len() {
        let expected: std::collections::HashSet<String> = expected_names(&model, has_opt);
        let stray = ckpt
            .tensors
            .iter()
            .map(|(n, _)| n)
            .find(|n| !expected.contains(*n))
            .cloned()
            .unwrap_or_else(|| "?".into());
        return Err(DataError::UnexpectedTensor { name: stray });
    }
    Ok(RestoredModel { config, model, global_step, opt })
}

fn expected_names(model: &WorldModel, with_opt: bool) -> std::collections::HashSet<String> {
    let mut set = std::collections::HashSet::new();
    for (prefix, store) in STORE_PREFIXES
        .iter()
        .zip([&model.online, &model.target, &model.dynamics, &model.idm])
    {
        for (name, _, kind) in store.iter() {
            set.insert(format!("{prefix}.{name}"));
            if with_opt
                && kind != crate::params::ParamKind::Buffer
                && (*prefix == "online" || *prefix == "dynamics")
            {
                set.insert(format!("opt.{prefix}.m.{name}"));
                set.insert(format!("opt.{prefix}.v.{name}"));
            }
        }
    }
    set.insert(STEP_TENSOR.to_string());
    set
}
