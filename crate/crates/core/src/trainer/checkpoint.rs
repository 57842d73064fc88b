//! Checkpoint format: a flat archive of named float64 arrays with a
//! versioned header.
//!
//! Layout (all little-endian):
//! `"SFCK"` magic, `u32` version, `u64` entry count, then per entry:
//! `u16` name length, name bytes, `u8` rank, `u64` dims, `f64` data.
//! Names follow the `module.layer.param` convention; optimizer moments
//! live under `optim.*` and run state under `state.*` / `config.*`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::config::{Arm, ModelConfig};
use crate::error::CoreError;
use crate::optim::Adam;
use crate::params::ParamStore;

const MAGIC: &[u8; 4] = b"SFCK";
const VERSION: u32 = 1;

/// One named array.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn write_entries(path: &Path, entries: &[Entry]) -> Result<(), CoreError> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        bytes.extend_from_slice(&(name.len() as u16).to_le_bytes());
        bytes.extend_from_slice(name);
        bytes.push(e.shape.len() as u8);
        for &d in &e.shape {
            bytes.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &e.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| CoreError::io(path, e))
}

pub fn read_entries(path: &Path) -> Result<Vec<Entry>, CoreError> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let fail = |detail: &str| CoreError::CheckpointFormat {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("u32"));
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("u64")) as usize;
    let mut pos = 16;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], CoreError> {
            if *pos + n > bytes.len() {
                return Err(fail("truncated entry"));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().expect("u16")) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| fail("entry name is not utf-8"))?;
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("u64")) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("f64")))
            .collect();
        entries.push(Entry { name, shape, data });
    }
    Ok(entries)
}

/// Run state stored beside the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub completed_epochs: usize,
    pub global_step: u64,
    pub best_target_map: f64,
    pub arm: Arm,
    pub model: ModelConfig,
}

/// Writes parameters, optimizer moments, and run state.
pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    adam: &Adam,
    state: &TrainState,
) -> Result<(), CoreError> {
    let mut entries = Vec::with_capacity(store.len() * 3 + 4);
    for (i, (_, name, tensor)) in store.iter().enumerate() {
        entries.push(Entry {
            name: format!("param.{name}"),
            shape: tensor.shape().to_vec(),
            data: tensor.data().to_vec(),
        });
        entries.push(Entry {
            name: format!("optim.m.{name}"),
            shape: tensor.shape().to_vec(),
            data: adam.m[i].clone(),
        });
        entries.push(Entry {
            name: format!("optim.v.{name}"),
            shape: tensor.shape().to_vec(),
            data: adam.v[i].clone(),
        });
    }
    entries.push(Entry {
        name: "state.scalars".into(),
        shape: vec![4],
        data: vec![
            state.completed_epochs as f64,
            state.global_step as f64,
            state.best_target_map,
            adam.t as f64,
        ],
    });
    entries.push(Entry {
        name: "config.arm".into(),
        shape: vec![1],
        data: vec![match state.arm {
            Arm::SourceOnly => 0.0,
            Arm::DaCnn => 1.0,
            Arm::Sfa => 2.0,
        }],
    });
    let m = &state.model;
    entries.push(Entry {
        name: "config.model".into(),
        shape: vec![9],
        data: vec![
            m.num_levels as f64,
            m.hidden_dim as f64,
            m.num_encoder_layers as f64,
            m.num_decoder_layers as f64,
            m.num_object_queries as f64,
            m.num_heads as f64,
            m.num_classes as f64,
            m.image_size.0 as f64,
            m.image_size.1 as f64,
        ],
    });
    write_entries(path, &entries)
}

/// Reads the run state (without touching any parameter store).
pub fn read_state(path: &Path) -> Result<(TrainState, Vec<Entry>), CoreError> {
    let entries = read_entries(path)?;
    let find = |name: &str| -> Result<&Entry, CoreError> {
        entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| CoreError::CheckpointMissingEntry { name: name.into() })
    };
    let scalars = find("state.scalars")?;
    let arm = match find("config.arm")?.data[0] as i64 {
        0 => Arm::SourceOnly,
        1 => Arm::DaCnn,
        _ => Arm::Sfa,
    };
    let mc = &find("config.model")?.data;
    let model = ModelConfig {
        num_levels: mc[0] as usize,
        hidden_dim: mc[1] as usize,
        num_encoder_layers: mc[2] as usize,
        num_decoder_layers: mc[3] as usize,
        num_object_queries: mc[4] as usize,
        num_heads: mc[5] as usize,
        num_classes: mc[6] as usize,
        image_size: (mc[7] as usize, mc[8] as usize),
    };
    let state = TrainState {
        completed_epochs: scalars.data[0] as usize,
        global_step: scalars.data[1] as u64,
        best_target_map: scalars.data[2],
        arm,
        model,
    };
    Ok((state, entries))
}

/// Restores parameters and optimizer moments from checkpoint entries.
pub fn restore_into(
    path: &Path,
    entries: &[Entry],
    store: &mut ParamStore,
    adam: &mut Adam,
) -> Result<(), CoreError> {
    let lookup = |name: &str| -> Result<&Entry, CoreError> {
        entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| CoreError::CheckpointMissingEntry { name: name.into() })
    };
    let ids: Vec<_> = store.iter().map(|(id, name, _)| (id, name.to_string())).collect();
    for (i, (id, name)) in ids.iter().enumerate() {
        let p = lookup(&format!("param.{name}"))?;
        let current = store.value(*id);
        if p.shape != current.shape() {
            return Err(CoreError::CheckpointFormat {
                path: path.to_path_buf(),
                detail: format!(
                    "shape mismatch for {name}: checkpoint {:?} vs model {:?}",
                    p.shape,
                    current.shape()
                ),
            });
        }
        store.value_mut(*id).data_mut().copy_from_slice(&p.data);
        adam.m[i].copy_from_slice(&lookup(&format!("optim.m.{name}"))?.data);
        adam.v[i].copy_from_slice(&lookup(&format!("optim.v.{name}"))?.data);
    }
    let scalars = lookup("state.scalars")?;
    adam.t = scalars.data[3] as u64;
    Ok(())
}
