//! Registry checkpoints encrypted under a fresh data key that is wrapped
//! once per chosen agent key.
//!
//! File layout (integers big-endian):
//!
//! ```text
//! "DSCKPT01" | flags u8 (1 = encrypted) | checkpoint_id u64 | covered_lsn u64
//! slot_count u8 | slot_count x (agent u64 | wrapped [12 + 32 + 16])
//! payload_len u64 | payload
//! ```
//!
//! A slot holds the data key sealed under one agent's key with associated
//! data `"station-ckpt-slot-v1" | checkpoint_id | agent`. The payload is the
//! registry snapshot sealed under the data key (nonce prepended) with
//! associated data `"station-ckpt-v1" | checkpoint_id | covered_lsn`. Without
//! encryption there are no slots and the payload is the plain snapshot.

use std::path::Path;

use crate::crypto::{SymmetricKey, KEY_LEN, NONCE_LEN, TAG_LEN};
use crate::error::{Error, Result};
use crate::model::AgentId;
use crate::storage::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DSCKPT01";
const WRAPPED_LEN: usize = NONCE_LEN + KEY_LEN + TAG_LEN;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeySlot {
    pub agent: AgentId,
    pub wrapped: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointFile {
    pub id: u64,
    pub covered_lsn: u64,
    pub encrypted: bool,
    pub slots: Vec<KeySlot>,
    pub payload: Vec<u8>,
}

fn slot_aad(id: u64, agent: AgentId) -> Vec<u8> {
    let mut aad = b"station-ckpt-slot-v1".to_vec();
    aad.extend_from_slice(&id.to_be_bytes());
    aad.extend_from_slice(&agent.0.to_be_bytes());
    aad
}

fn payload_aad(id: u64, covered_lsn: u64) -> Vec<u8> {
    let mut aad = b"station-ckpt-v1".to_vec();
    aad.extend_from_slice(&id.to_be_bytes());
    aad.extend_from_slice(&covered_lsn.to_be_bytes());
    aad
}

impl CheckpointFile {
    /// Encrypts `snapshot` in memory. `keys` empty means full-trust.
    pub fn seal(id: u64, covered_lsn: u64, snapshot: &[u8], keys: &[(AgentId, SymmetricKey)]) -> Self {
        if keys.is_empty() {
            return CheckpointFile {
                id,
                covered_lsn,
                encrypted: false,
                slots: Vec::new(),
                payload: snapshot.to_vec(),
            };
        }
        let data_key = SymmetricKey::generate();
        let slots = keys
            .iter()
            .map(|(agent, key)| KeySlot {
                agent: *agent,
                wrapped: key.seal(&slot_aad(id, *agent), data_key.as_bytes()),
            })
            .collect();
        CheckpointFile {
            id,
            covered_lsn,
            encrypted: true,
            slots,
            payload: data_key.seal(&payload_aad(id, covered_lsn), snapshot),
        }
    }

    pub fn slot_agents(&self) -> Vec<AgentId> {
        self.slots.iter().map(|s| s.agent).collect()
    }

    /// Decrypts the snapshot with one agent's key. `Ok(None)` when the
    /// agent holds no slot.
    pub fn open_with(&self, agent: AgentId, key: &SymmetricKey) -> Result<Option<Vec<u8>>> {
        let Some(slot) = self.slots.iter().find(|s| s.agent == agent) else {
            return Ok(None);
        };
        let data_key = SymmetricKey::from_slice(&key.open(&slot_aad(self.id, agent), &slot.wrapped)?)?;
        Ok(Some(data_key.open(&payload_aad(self.id, self.covered_lsn), &self.payload)?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.push(self.encrypted as u8);
        out.extend_from_slice(&self.id.to_be_bytes());
        out.extend_from_slice(&self.covered_lsn.to_be_bytes());
        out.push(self.slots.len() as u8);
        for slot in &self.slots {
            out.extend_from_slice(&slot.agent.0.to_be_bytes());
            out.extend_from_slice(&slot.wrapped);
        }
        out.extend_from_slice(&(self.payload.len() as u64).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = || Error::Integrity("checkpoint file corrupt".into());
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok_or_else(corrupt)? != CHECKPOINT_MAGIC {
            return Err(corrupt());
        }
        let encrypted = match r.take(1).ok_or_else(corrupt)?[0] {
            0 => false,
            1 => true,
            _ => return Err(corrupt()),
        };
        let id = r.u64().ok_or_else(corrupt)?;
        let covered_lsn = r.u64().ok_or_else(corrupt)?;
        let count = r.take(1).ok_or_else(corrupt)?[0];
        let mut slots = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let agent = AgentId(r.u64().ok_or_else(corrupt)?);
            let wrapped = r.take(WRAPPED_LEN).ok_or_else(corrupt)?.to_vec();
            slots.push(KeySlot { agent, wrapped });
        }
        let len = r.u64().ok_or_else(corrupt)? as usize;
        let payload = r.take(len).ok_or_else(corrupt)?.to_vec();
        if r.pos != bytes.len() {
            return Err(corrupt());
        }
        Ok(CheckpointFile {
            id,
            covered_lsn,
            encrypted,
            slots,
            payload,
        })
    }

    pub fn write(&self, path: &Path, fsync: bool) -> Result<()> {
        write_atomic(path, &self.to_bytes(), fsync)
    }

    pub fn read(path: &Path) -> Result<Option<Self>> {
        match std::fs::read(path) {
            Ok(b) => Self::from_bytes(&b).map(Some),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_be_bytes(b.try_into().unwrap()))
    }
}

/// Which agents' keys wrap the checkpoint data key.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum SlotSelection {
    /// The `m` keyed agents with the lowest ids.
    #[default]
    LowestIds,
    Explicit(Vec<AgentId>),
}

/// Default slot count: 3, or fewer if fewer agents hold keys.
pub fn default_slot_count(keyed_agents: usize) -> usize {
    keyed_agents.min(3)
}
