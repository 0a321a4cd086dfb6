//! Checkpoints: a directory holding `manifest.json` and `payload.bin`.
//!
//! The payload is the concatenation of every tensor as little-endian f64,
//! row-major, in manifest order. Tensor names are prefixed `params/`,
//! `opt_m/`, `opt_v/` and `teacher/`. The manifest carries a SHA-256 of the
//! payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::engine::{FreezeEvent, TrainState, Trainer};
use crate::error::{Error, Result};
use crate::model::Target;
use crate::optim::{Moments, OptState};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT: &str = "layerlock-checkpoint/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "payload.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte ChaCha key, hex encoded.
    pub seed: String,
    pub stream: u64,
    /// Position in the keystream (a u128, kept as a decimal string).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: hex::encode(rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Integrity(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| Error::Integrity("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self.word_pos.parse().map_err(|e| Error::Integrity(format!("rng word_pos: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub frozen_prefix: usize,
    pub last_switch_step: Option<u64>,
    pub active_targets: Vec<Target>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: RunConfig,
    pub step: u64,
    pub rng: RngState,
    pub schedule: ScheduleState,
    /// Bias-correction counters of the optimizer entries.
    pub opt_steps: BTreeMap<String, u64>,
    pub events: Vec<FreezeEvent>,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: u64,
    pub sha256: String,
}

fn push_tensor(name: String, t: &Tensor, payload: &mut Vec<u8>, dir: &mut Vec<TensorEntry>) {
    dir.push(TensorEntry { name, shape: t.shape().to_vec(), dtype: "f64le".into(), offset: payload.len() as u64 });
    for v in t.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a run into its manifest and payload bytes.
pub fn encode(cfg: &RunConfig, st: &TrainState) -> (Manifest, Vec<u8>) {
    let mut payload = Vec::new();
    let mut dir = Vec::new();
    for (n, t) in st.params.iter() {
        push_tensor(format!("params/{n}"), t, &mut payload, &mut dir);
    }
    let mut opt_steps = BTreeMap::new();
    for (n, m) in st.opt.iter() {
        push_tensor(format!("opt_m/{n}"), &m.m, &mut payload, &mut dir);
        push_tensor(format!("opt_v/{n}"), &m.v, &mut payload, &mut dir);
        opt_steps.insert(n.clone(), m.t);
    }
    if let Some(teacher) = &st.teacher {
        for (n, t) in teacher.iter() {
            push_tensor(format!("teacher/{n}"), t, &mut payload, &mut dir);
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        config: cfg.clone(),
        step: st.step,
        rng: RngState::capture(&st.rng),
        schedule: ScheduleState {
            frozen_prefix: st.frozen_prefix,
            last_switch_step: st.last_switch_step,
            active_targets: st.active_targets.clone(),
        },
        opt_steps,
        events: st.events.clone(),
        tensors: dir,
        payload_bytes: payload.len() as u64,
        sha256: hex::encode(Sha256::digest(&payload)),
    };
    (manifest, payload)
}

/// Rebuilds the run from a manifest and payload, checking size, checksum
/// and the tensor directory.
pub fn decode(manifest: &Manifest, payload: &[u8]) -> Result<(RunConfig, TrainState)> {
    if manifest.format != FORMAT {
        return Err(Error::Integrity(format!("unknown format `{}`", manifest.format)));
    }
    if payload.len() as u64 != manifest.payload_bytes {
        return Err(Error::Integrity(format!("payload has {} bytes, manifest says {}", payload.len(), manifest.payload_bytes)));
    }
    if hex::encode(Sha256::digest(payload)) != manifest.sha256 {
        return Err(Error::Integrity("payload checksum mismatch".into()));
    }
    let mut params = ParamStore::new();
    let mut m_parts = BTreeMap::new();
    let mut v_parts = BTreeMap::new();
    let mut teacher = ParamStore::new();
    let mut expected = 0u64;
    for e in &manifest.tensors {
        if e.dtype != "f64le" {
            return Err(Error::Integrity(format!("{}: unsupported dtype `{}`", e.name, e.dtype)));
        }
        if e.offset != expected {
            return Err(Error::Integrity(format!("{}: offset {} where {expected} was expected", e.name, e.offset)));
        }
        let numel: usize = e.shape.iter().product();
        let end = e.offset as usize + 8 * numel;
        let bytes = payload.get(e.offset as usize..end).ok_or_else(|| Error::Integrity(format!("{}: truncated payload", e.name)))?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        let t = Tensor::new(e.shape.clone(), data)?;
        expected = end as u64;
        let (kind, name) = e.name.split_once('/').ok_or_else(|| Error::Integrity(format!("bad tensor name `{}`", e.name)))?;
        match kind {
            "params" => params.insert(name, t),
            "opt_m" => {
                m_parts.insert(name.to_string(), t);
            }
            "opt_v" => {
                v_parts.insert(name.to_string(), t);
            }
            "teacher" => teacher.insert(name, t),
            _ => return Err(Error::Integrity(format!("bad tensor name `{}`", e.name))),
        }
    }
    if expected != manifest.payload_bytes {
        return Err(Error::Integrity("payload has trailing bytes".into()));
    }
    let mut opt = OptState::new();
    for (name, m) in m_parts {
        let v = v_parts.remove(&name).ok_or_else(|| Error::Integrity(format!("missing second moment of `{name}`")))?;
        let t = *manifest.opt_steps.get(&name).ok_or_else(|| Error::Integrity(format!("missing step count of `{name}`")))?;
        opt.insert(name, Moments { m, v, t });
    }
    if let Some(name) = v_parts.keys().next() {
        return Err(Error::Integrity(format!("missing first moment of `{name}`")));
    }
    let has_teacher = manifest.config.jepa.is_some() && manifest.config.mode == crate::config::RunMode::Jepa;
    let state = TrainState {
        params,
        opt,
        step: manifest.step,
        rng: manifest.rng.restore()?,
        frozen_prefix: manifest.schedule.frozen_prefix,
        last_switch_step: manifest.schedule.last_switch_step,
        active_targets: manifest.schedule.active_targets.clone(),
        teacher: has_teacher.then_some(teacher),
        events: manifest.events.clone(),
    };
    Ok((manifest.config.clone(), state))
}

pub fn save_checkpoint(trainer: &Trainer, dir: &Path) -> Result<()> {
    save_state(trainer.cfg(), &trainer.state, dir)
}

pub fn save_state(cfg: &RunConfig, st: &TrainState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (manifest, payload) = encode(cfg, st);
    fs::write(dir.join(PAYLOAD_FILE), &payload)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_checkpoint(dir: &Path) -> Result<(Manifest, Vec<u8>)> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Integrity(format!("manifest: {e}")))?;
    let payload = fs::read(dir.join(PAYLOAD_FILE))?;
    Ok((manifest, payload))
}

/// Restores a trainer that continues bit-exactly where the saved run stopped.
pub fn load_checkpoint(dir: &Path) -> Result<Trainer> {
    let (manifest, payload) = read_checkpoint(dir)?;
    let (cfg, state) = decode(&manifest, &payload)?;
    Trainer::with_state(cfg, state)
}
