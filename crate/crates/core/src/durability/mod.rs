//! Write-ahead logging, checkpoints and restart recovery of the registry.

mod checkpoint;
mod ewal;

pub use checkpoint::{default_slot_count, CheckpointFile, KeySlot, SlotSelection, CHECKPOINT_MAGIC};
pub use ewal::{scan as scan_ewal, Ewal, EwalRecord, EwalScan, EWAL_MAGIC};

use std::collections::{BTreeMap, BTreeSet};

use crate::crypto::VolatileKeyManager;
use crate::error::{Error, Result};
use crate::model::AgentId;
use crate::registry::{Registry, Update};

/// Crash points for recovery tests. Counters are 1-based over EWAL appends
/// made by one station instance.
#[doc(hidden)]
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FaultPlan {
    /// Fail after the Nth record is durable but before it is applied.
    pub crash_after_append: Option<u64>,
    /// Write only half of the Nth record, then fail.
    pub torn_append: Option<u64>,
    /// Fail after a checkpoint file is written but before the log is
    /// truncated.
    pub crash_before_truncate: bool,
}

/// What the station found on disk at boot.
#[derive(Debug)]
pub struct RecoveryPlan {
    pub checkpoint: Option<CheckpointFile>,
    pub tail: Vec<EwalRecord>,
    pub encrypted: bool,
}

#[derive(Debug)]
pub enum RecoveryAttempt {
    Done(Registry),
    Waiting {
        /// Agents whose keys are still needed.
        awaiting: Vec<AgentId>,
        /// Agents whose resent key failed to decrypt anything of theirs.
        rejected: Vec<AgentId>,
    },
}

impl RecoveryPlan {
    pub fn new(checkpoint: Option<CheckpointFile>, scan: EwalScan) -> Result<Self> {
        let covered = checkpoint.as_ref().map(|c| c.covered_lsn).unwrap_or(0);
        if scan.base_lsn > covered + 1 {
            return Err(Error::IntegrityAlarm(format!(
                "EWAL starts at lsn {} but the checkpoint only covers {covered}",
                scan.base_lsn
            )));
        }
        // Records at or below the checkpoint survive only when a crash hit
        // between writing the checkpoint and truncating the log.
        let tail = scan.records.into_iter().filter(|r| r.lsn > covered).collect();
        Ok(RecoveryPlan {
            checkpoint,
            tail,
            encrypted: scan.encrypted,
        })
    }

    /// Whether recovery needs any key at all.
    pub fn needs_keys(&self) -> bool {
        self.encrypted && (self.checkpoint.is_some() || !self.tail.is_empty())
    }

    pub fn tail_agents(&self) -> BTreeSet<AgentId> {
        self.tail.iter().map(|r| r.agent).collect()
    }

    /// Last lsn covered by the checkpoint or present in the tail.
    pub fn last_lsn(&self) -> u64 {
        self.tail
            .last()
            .map(|r| r.lsn)
            .or(self.checkpoint.as_ref().map(|c| c.covered_lsn))
            .unwrap_or(0)
    }

    fn key_opens_tail(&self, agent: AgentId, keys: &VolatileKeyManager) -> bool {
        let Some(key) = keys.get(agent) else {
            return false;
        };
        self.tail
            .iter()
            .filter(|r| r.agent == agent)
            .any(|r| r.open(&key).is_ok())
    }

    /// Tries to rebuild the registry with the keys resent so far.
    pub fn attempt(&self, keys: &VolatileKeyManager) -> Result<RecoveryAttempt> {
        let mut awaiting = BTreeSet::new();
        let mut rejected = BTreeSet::new();

        let base = match &self.checkpoint {
            None => Some(Registry::new()),
            Some(c) if !c.encrypted => Some(decode_snapshot(&c.payload)?),
            Some(c) => {
                let mut opened = None;
                for agent in c.slot_agents() {
                    let Some(key) = keys.get(agent) else { continue };
                    match c.open_with(agent, &key) {
                        Ok(Some(bytes)) => {
                            opened = Some(decode_snapshot(&bytes)?);
                            break;
                        }
                        Ok(None) => {}
                        Err(_) if self.key_opens_tail(agent, keys) => {
                            return Err(Error::IntegrityAlarm(format!(
                                "checkpoint {} slot for agent {agent} does not open with a key that opens the log",
                                c.id
                            )));
                        }
                        Err(_) => {
                            rejected.insert(agent);
                        }
                    }
                }
                if opened.is_none() {
                    awaiting.extend(c.slot_agents());
                }
                opened
            }
        };

        let mut plain: BTreeMap<u64, Vec<u8>> = BTreeMap::new();
        if self.encrypted {
            for agent in self.tail_agents() {
                let Some(key) = keys.get(agent) else {
                    awaiting.insert(agent);
                    continue;
                };
                let mut ok = 0usize;
                let mut bad = None;
                for rec in self.tail.iter().filter(|r| r.agent == agent) {
                    match rec.open(&key) {
                        Ok(p) => {
                            ok += 1;
                            plain.insert(rec.lsn, p);
                        }
                        Err(_) => bad = bad.or(Some(rec.lsn)),
                    }
                }
                match (ok, bad) {
                    (_, None) => {}
                    (0, Some(_)) => {
                        rejected.insert(agent);
                        awaiting.insert(agent);
                    }
                    (_, Some(lsn)) => {
                        return Err(Error::IntegrityAlarm(format!(
                            "EWAL record {lsn} of agent {agent} does not decrypt"
                        )));
                    }
                }
            }
        } else {
            for rec in &self.tail {
                plain.insert(rec.lsn, rec.ciphertext.clone());
            }
        }

        let base = match base {
            Some(b) if awaiting.is_empty() && rejected.is_empty() => b,
            _ => {
                return Ok(RecoveryAttempt::Waiting {
                    awaiting: awaiting.into_iter().collect(),
                    rejected: rejected.into_iter().collect(),
                })
            }
        };
        let mut reg = base;
        for (lsn, bytes) in plain {
            let update = Update::decode(&bytes)
                .map_err(|e| Error::IntegrityAlarm(format!("EWAL record {lsn}: {e}")))?;
            reg.apply(&update);
        }
        Ok(RecoveryAttempt::Done(reg))
    }
}

fn decode_snapshot(bytes: &[u8]) -> Result<Registry> {
    Registry::decode_state(bytes).map_err(|e| Error::IntegrityAlarm(format!("checkpoint snapshot: {e}")))
}
