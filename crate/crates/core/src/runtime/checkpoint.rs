//! Checkpoint container: magic "SFCK", version, the run configuration, every
//! named parameter tensor in the raw tensor format, and (for resumable
//! checkpoints) the optimizer and data-order state.
//!
//! Writes are atomic: the file is assembled under a temporary name in the
//! destination directory and renamed into place, so a crash never leaves a
//! truncated checkpoint behind. Save followed by load is bitwise stable.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, SfimError};
use crate::model::Model;
use crate::params::ParamStore;
use crate::runtime::config::RunConfig;
use crate::tensor::{Dtype, Tensor};

const MAGIC: &[u8; 4] = b"SFCK";
const VERSION: u32 = 1;

/// Mutable training progress stored alongside the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Optimizer steps taken across all phases.
    pub global_step: u64,
    /// Index into `config.phases`.
    pub phase: u32,
    /// Steps taken inside the current phase.
    pub step_in_phase: u64,
    /// Optimizer internal step counter (bias correction).
    pub opt_step: u64,
    /// First-moment buffer, concatenated over parameters in store order.
    pub opt_m: Vec<f64>,
    /// Second-moment buffer, same layout as `opt_m`.
    pub opt_v: Vec<f64>,
    /// Generator driving sample order, crops, and flips.
    pub rng_state: u64,
    /// Best validation PSNR seen so far, dB.
    pub best_val_psnr: f64,
}

/// In-memory image of one checkpoint file.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// `(name, tensor)` in the parameter store's allocation order.
    pub params: Vec<(String, Tensor)>,
    pub train: Option<TrainState>,
}

/// FNV-1a, the integrity stamp over the serialized configuration.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn save_checkpoint(
    path: &Path,
    config: &RunConfig,
    store: &ParamStore,
    train: Option<&TrainState>,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());

    let config_bytes = config.to_toml()?.into_bytes();
    buf.extend_from_slice(&fnv1a(&config_bytes).to_le_bytes());
    buf.extend_from_slice(&(config_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config_bytes);

    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, name, tensor) in store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        tensor.write_sftn(&mut buf, Dtype::F64)?;
    }

    match train {
        None => buf.push(0),
        Some(t) => {
            buf.push(1);
            buf.extend_from_slice(&t.global_step.to_le_bytes());
            buf.extend_from_slice(&t.phase.to_le_bytes());
            buf.extend_from_slice(&t.step_in_phase.to_le_bytes());
            buf.extend_from_slice(&t.opt_step.to_le_bytes());
            buf.extend_from_slice(&(t.opt_m.len() as u64).to_le_bytes());
            for v in t.opt_m.iter().chain(&t.opt_v) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.extend_from_slice(&t.rng_state.to_le_bytes());
            buf.extend_from_slice(&t.best_val_psnr.to_le_bytes());
        }
    }

    let tmp = path.with_extension("sfck.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let display = path.display().to_string();
    let fmt = |reason: String| SfimError::format(display.clone(), reason);
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(fmt("bad magic, not a checkpoint file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(fmt(format!(
            "unsupported checkpoint version {version}, this build reads {VERSION}"
        )));
    }

    let stored_hash = read_u64(&mut r)?;
    let config_len = read_u32(&mut r)? as usize;
    let mut config_bytes = vec![0u8; config_len];
    r.read_exact(&mut config_bytes)?;
    if fnv1a(&config_bytes) != stored_hash {
        return Err(fmt("config hash mismatch, checkpoint is corrupt".into()));
    }
    let config_text = String::from_utf8(config_bytes)
        .map_err(|_| fmt("config payload is not valid UTF-8".into()))?;
    let config = RunConfig::from_toml(&config_text)?;

    let n_params = read_u32(&mut r)? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| fmt("parameter name is not valid UTF-8".into()))?;
        let tensor = Tensor::read_sftn(&mut r)?;
        params.push((name, tensor));
    }

    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let train = match flag[0] {
        0 => None,
        1 => {
            let global_step = read_u64(&mut r)?;
            let phase = read_u32(&mut r)?;
            let step_in_phase = read_u64(&mut r)?;
            let opt_step = read_u64(&mut r)?;
            let moments = read_u64(&mut r)? as usize;
            let mut opt_m = Vec::with_capacity(moments);
            let mut opt_v = Vec::with_capacity(moments);
            for target in [&mut opt_m, &mut opt_v] {
                for _ in 0..moments {
                    target.push(read_f64(&mut r)?);
                }
            }
            let rng_state = read_u64(&mut r)?;
            let best_val_psnr = read_f64(&mut r)?;
            Some(TrainState {
                global_step,
                phase,
                step_in_phase,
                opt_step,
                opt_m,
                opt_v,
                rng_state,
                best_val_psnr,
            })
        }
        other => return Err(fmt(format!("unknown train-state flag {other}"))),
    };

    Ok(Checkpoint { config, params, train })
}

impl Checkpoint {
    /// Rebuilds the model described by the stored configuration and loads the
    /// stored parameter values into it.
    pub fn build_model(&self) -> Result<(ParamStore, Model)> {
        let mut store = ParamStore::new(self.config.seed);
        let model = Model::build(&mut store, &self.config.model)?;
        self.load_into(&mut store)?;
        Ok((store, model))
    }

    /// Overwrites `store`'s values with the checkpoint's, matching by name.
    /// The store must contain exactly the checkpoint's parameter set.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(SfimError::config(format!(
                "checkpoint/config mismatch: store has {} parameters, checkpoint {}",
                store.len(),
                self.params.len()
            )));
        }
        for (name, tensor) in &self.params {
            let id = store.id_of(name).ok_or_else(|| {
                SfimError::config(format!("checkpoint/config mismatch: no parameter '{name}'"))
            })?;
            if store.value(id).shape() != tensor.shape() {
                return Err(SfimError::config(format!(
                    "checkpoint/config mismatch: '{name}' is {:?} in the model, {:?} on disk",
                    store.value(id).shape(),
                    tensor.shape()
                )));
            }
            store.set_value(id, tensor.clone())?;
        }
        Ok(())
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
