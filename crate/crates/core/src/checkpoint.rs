//! Versioned, self-describing checkpoint of a solver state.
//!
//! The file is a single JSON object. Floats are written with shortest
//! round-trip formatting and parsed exactly, so `load(save(s)) == s` bit for bit.

use serde::{Deserialize, Serialize};

use crate::bias::LAYOUT_VERSION;
use crate::error::{BalanceError, Result};
use crate::types::{BalanceSpec, Hyperparams, Schedule, SolverState};

pub const FORMAT_NAME: &str = "databalance-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    format_version: u32,
    layout_version: u32,
    m: usize,
    c: usize,
    pi: Vec<f64>,
    eps_d: f64,
    eps_r: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    assoc_mask: Option<Vec<bool>>,
    eta: f64,
    q_max: f64,
    v_level: f64,
    tau0: f64,
    schedule: Schedule,
    t: u64,
    mu: f64,
    v: Vec<f64>,
}

pub fn save(state: &SolverState) -> Vec<u8> {
    let file = CheckpointFile {
        format: FORMAT_NAME.to_string(),
        format_version: FORMAT_VERSION,
        layout_version: LAYOUT_VERSION,
        m: state.spec.m,
        c: state.spec.c,
        pi: state.spec.pi.clone(),
        eps_d: state.spec.eps_d,
        eps_r: state.spec.eps_r,
        assoc_mask: state.spec.assoc_mask.clone(),
        eta: state.hp.eta,
        q_max: state.hp.q_max,
        v_level: state.hp.v_level,
        tau0: state.hp.tau0,
        schedule: state.hp.schedule,
        t: state.t,
        mu: state.mu,
        v: state.v.clone(),
    };
    let mut bytes = serde_json::to_vec_pretty(&file).expect("checkpoint fields are always serializable");
    bytes.push(b'\n');
    bytes
}

pub fn load(bytes: &[u8]) -> Result<SolverState> {
    let file: CheckpointFile =
        serde_json::from_slice(bytes).map_err(|e| BalanceError::CorruptCheckpoint(e.to_string()))?;
    if file.format != FORMAT_NAME {
        return Err(BalanceError::CorruptCheckpoint(format!("unknown format '{}'", file.format)));
    }
    if file.format_version != FORMAT_VERSION {
        return Err(BalanceError::VersionMismatch(format!(
            "format version {} (supported: {FORMAT_VERSION})",
            file.format_version
        )));
    }
    if file.layout_version != LAYOUT_VERSION {
        return Err(BalanceError::VersionMismatch(format!(
            "bias layout version {} (supported: {LAYOUT_VERSION})",
            file.layout_version
        )));
    }
    let spec = BalanceSpec {
        m: file.m,
        c: file.c,
        pi: file.pi,
        eps_d: file.eps_d,
        eps_r: file.eps_r,
        assoc_mask: file.assoc_mask,
    };
    spec.validate().map_err(|e| BalanceError::CorruptCheckpoint(e.to_string()))?;
    let hp = Hyperparams {
        eta: file.eta,
        q_max: file.q_max,
        v_level: file.v_level,
        tau0: file.tau0,
        schedule: file.schedule,
    };
    hp.validate().map_err(|e| BalanceError::CorruptCheckpoint(e.to_string()))?;
    if file.v.len() != spec.bias_len() {
        return Err(BalanceError::CorruptCheckpoint(format!(
            "dual vector has length {}, expected {}",
            file.v.len(),
            spec.bias_len()
        )));
    }
    if let Some(bad) = file.v.iter().find(|x| !(0.0..=hp.v_level).contains(*x)) {
        return Err(BalanceError::CorruptCheckpoint(format!("dual value {bad} outside [0, {}]", hp.v_level)));
    }
    if !file.mu.is_finite() {
        return Err(BalanceError::CorruptCheckpoint("non-finite mu".into()));
    }
    Ok(SolverState {
        v: file.v,
        mu: file.mu,
        t: file.t,
        spec,
        hp,
    })
}

/// Loads a checkpoint and checks it was produced for `m` attributes and `c` labels.
pub fn load_for(bytes: &[u8], m: usize, c: usize) -> Result<SolverState> {
    let state = load(bytes)?;
    if state.spec.m != m || state.spec.c != c {
        return Err(BalanceError::VersionMismatch(format!(
            "checkpoint was fitted for m = {}, c = {}; data has m = {m}, c = {c}",
            state.spec.m, state.spec.c
        )));
    }
    Ok(state)
}
