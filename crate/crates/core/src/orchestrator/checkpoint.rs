//! Checkpoint directories.
//!
//! Layout: `policy.bin` and `reference.bin` (magic, format version, JSON
//! header length, JSON [`PolicyHeader`], little-endian f64 parameters),
//! `buffer.json`, `rng.json`, `state.json` and `config.txt`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::learner::ValueTable;
use crate::policy::{LibraryPolicy, PolicyHeader};
use crate::selfimprove::PrevSolutionBuffer;

pub const POLICY_MAGIC: &[u8; 8] = b"MLERLPOL";
pub const POLICY_FORMAT: u32 = 1;

/// Scalar training state outside the policy.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed iterations.
    pub iteration: usize,
    pub next_attempt_id: u64,
    /// Best raw score per task.
    pub best: BTreeMap<String, f64>,
    pub values: ValueTable,
    /// Cumulative quantised duration, the clock of deterministic runs.
    pub logical_clock: f64,
    /// Wall-clock seconds spent before this process resumed.
    pub wallclock_s: f64,
    pub task_ids: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub policy: LibraryPolicy,
    pub reference: LibraryPolicy,
    pub buffer: PrevSolutionBuffer,
    pub rng: ChaCha8Rng,
    pub state: TrainState,
    pub config: RunConfig,
}

pub fn encode_policy(policy: &LibraryPolicy) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&policy.header())?;
    let mut out = Vec::with_capacity(20 + header.len() + policy.params().len() * 8);
    out.extend_from_slice(POLICY_MAGIC);
    out.extend_from_slice(&POLICY_FORMAT.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for p in policy.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_policy(bytes: &[u8]) -> Result<LibraryPolicy> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != POLICY_MAGIC {
        return Err(bad("not a policy file"));
    }
    let format = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if format != POLICY_FORMAT {
        return Err(bad(&format!("unsupported policy format {format}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: PolicyHeader = serde_json::from_slice(&body[..hlen])?;
    let raw = &body[hlen..];
    if raw.len() != header.num_params * 8 {
        return Err(bad("parameter block length does not match header"));
    }
    let params = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    LibraryPolicy::from_header(header, params)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::path(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::path(path, e))
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::path(dir, e))?;
        write(&dir.join("policy.bin"), &encode_policy(&self.policy)?)?;
        write(&dir.join("reference.bin"), &encode_policy(&self.reference)?)?;
        write(&dir.join("buffer.json"), &serde_json::to_vec(&self.buffer)?)?;
        write(&dir.join("rng.json"), &serde_json::to_vec(&self.rng)?)?;
        write(
            &dir.join("state.json"),
            &serde_json::to_vec_pretty(&self.state)?,
        )?;
        write(&dir.join("config.txt"), self.config.to_text().as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config_text = String::from_utf8(read(&dir.join("config.txt"))?)
            .map_err(|_| Error::Checkpoint("config.txt is not UTF-8".into()))?;
        Ok(Self {
            policy: decode_policy(&read(&dir.join("policy.bin"))?)?,
            reference: decode_policy(&read(&dir.join("reference.bin"))?)?,
            buffer: serde_json::from_slice(&read(&dir.join("buffer.json"))?)?,
            rng: serde_json::from_slice(&read(&dir.join("rng.json"))?)?,
            state: serde_json::from_slice(&read(&dir.join("state.json"))?)?,
            config: RunConfig::parse(&config_text)?,
        })
    }
}
