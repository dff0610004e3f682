//! Hash-chained, encrypted, append-only audit log.
//!
//! File layout (integers big-endian):
//!
//! ```text
//! header: "DSAUDIT1" | flags u8 (1 = encrypted)
//! entry:  len u32 | seq u64 | agent u64 | nonce [12] | ciphertext | chain [32]
//! ```
//!
//! `len` counts everything after itself. `agent` names the key the entry is
//! sealed under: the triggering agent, or `0` for the station's per-boot key
//! when the triggering agent has none. The chain digest is
//! `SHA-256(prev_chain | seq | agent | nonce | ciphertext)` with
//! `prev_chain` for seq 1 being `SHA-256("station-audit-genesis-v1")`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{Seek, SeekFrom, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::crypto::{sha256, SymmetricKey, VolatileKeyManager, NONCE_LEN};
use crate::error::{Error, Result};
use crate::model::{
    AccessTriple, AgentId, ContractId, DeId, Digest, FunctionId, InvocationId, ReleaseDecision,
    RoleSet, StoredMode, STATION_AGENT,
};

pub const AUDIT_MAGIC: &[u8; 8] = b"DSAUDIT1";
const HEADER_LEN: u64 = 9;
const FIXED: usize = 8 + 8 + NONCE_LEN + 32;

pub fn genesis_digest() -> Digest {
    sha256(&[b"station-audit-genesis-v1"])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Delivered,
    Staged,
    Denied,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogPayload {
    AgentRegistered {
        agent: AgentId,
        roles: RoleSet,
    },
    ConnectorRegistered {
        app: String,
        functions: Vec<FunctionId>,
    },
    DeRegistered {
        de: DeId,
        mode: StoredMode,
    },
    PolicyCreated {
        triple: AccessTriple,
    },
    PolicyDeleted {
        triple: AccessTriple,
    },
    InvocationStarted {
        invocation: InvocationId,
        function: FunctionId,
        covered_only: bool,
    },
    IntentCreated {
        invocation: InvocationId,
        function: FunctionId,
        des: Vec<DeId>,
    },
    PolicyMatch {
        invocation: InvocationId,
        function: FunctionId,
        des: Vec<DeId>,
    },
    PolicyMismatch {
        invocation: InvocationId,
        function: FunctionId,
        des: Vec<DeId>,
    },
    InvocationFinished {
        invocation: InvocationId,
        function: FunctionId,
        outcome: Outcome,
        accessed: Vec<DeId>,
        detail: String,
    },
    /// Bytes left the station. `de` is `None` for results delivered
    /// without being kept as a DE.
    DeReleased {
        de: Option<DeId>,
        recipient: AgentId,
        function: FunctionId,
        invocation: InvocationId,
        provenance: Vec<DeId>,
    },
    Staged {
        de: DeId,
        requester: AgentId,
        function: FunctionId,
        invocation: InvocationId,
        pending_owners: Vec<AgentId>,
        provenance: Vec<DeId>,
    },
    StagedDecision {
        de: DeId,
        decision: ReleaseDecision,
        des: Vec<DeId>,
    },
    ContractProposed {
        contract: ContractId,
        operator: AgentId,
    },
    ContractSigned {
        contract: ContractId,
        complete: bool,
    },
    LogRead {
        operator_view: bool,
    },
    Violation {
        invocation: InvocationId,
        detail: String,
    },
    Checkpoint {
        id: u64,
        covered_lsn: u64,
    },
    Recovered {
        last_lsn: u64,
    },
}

fn filter_des(des: &[DeId], keep: &dyn Fn(DeId) -> bool) -> Vec<DeId> {
    des.iter().copied().filter(|d| keep(*d)).collect()
}

impl LogPayload {
    /// Every DE id this entry concerns.
    pub fn des(&self) -> Vec<DeId> {
        use LogPayload::*;
        match self {
            DeRegistered { de, .. } => vec![*de],
            PolicyCreated { triple } | PolicyDeleted { triple } => vec![triple.de],
            IntentCreated { des, .. } | PolicyMatch { des, .. } | PolicyMismatch { des, .. } => {
                des.clone()
            }
            InvocationFinished { accessed, .. } => accessed.clone(),
            DeReleased { de, provenance, .. } => de.iter().chain(provenance).copied().collect(),
            Staged { de, provenance, .. } => std::iter::once(de).chain(provenance).copied().collect(),
            StagedDecision { de, des, .. } => std::iter::once(de).chain(des).copied().collect(),
            _ => Vec::new(),
        }
    }

    /// Copy with DE lists narrowed to ids `keep` accepts. Single-DE fields
    /// naming the subject of the entry are left alone.
    pub fn redact(&self, keep: &dyn Fn(DeId) -> bool) -> LogPayload {
        use LogPayload::*;
        let mut out = self.clone();
        match &mut out {
            IntentCreated { des, .. } | PolicyMatch { des, .. } | PolicyMismatch { des, .. } => {
                *des = filter_des(des, keep)
            }
            InvocationFinished { accessed, .. } => *accessed = filter_des(accessed, keep),
            DeReleased { provenance, .. } | Staged { provenance, .. } => {
                *provenance = filter_des(provenance, keep)
            }
            StagedDecision { des, .. } => *des = filter_des(des, keep),
            _ => {}
        }
        out
    }
}

/// Decrypted body of one entry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEvent {
    /// Agent whose request caused the entry.
    pub actor: AgentId,
    pub payload: LogPayload,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawEntry {
    pub seq: u64,
    pub agent: AgentId,
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
    pub chain: Digest,
}

fn entry_aad(seq: u64, agent: AgentId) -> Vec<u8> {
    let mut aad = b"station-audit-v1".to_vec();
    aad.extend_from_slice(&seq.to_be_bytes());
    aad.extend_from_slice(&agent.0.to_be_bytes());
    aad
}

fn chain_digest(prev: &Digest, seq: u64, agent: AgentId, nonce: &[u8], ct: &[u8]) -> Digest {
    sha256(&[prev, &seq.to_be_bytes(), &agent.0.to_be_bytes(), nonce, ct])
}

impl RawEntry {
    fn to_bytes(&self) -> Vec<u8> {
        let len = (FIXED + self.ciphertext.len()) as u32;
        let mut out = Vec::with_capacity(4 + len as usize);
        out.extend_from_slice(&len.to_be_bytes());
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.extend_from_slice(&self.agent.0.to_be_bytes());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.chain);
        out
    }

    fn parse(body: &[u8]) -> RawEntry {
        let ct_end = body.len() - 32;
        RawEntry {
            seq: u64::from_be_bytes(body[..8].try_into().unwrap()),
            agent: AgentId(u64::from_be_bytes(body[8..16].try_into().unwrap())),
            nonce: body[16..16 + NONCE_LEN].try_into().unwrap(),
            ciphertext: body[16 + NONCE_LEN..ct_end].to_vec(),
            chain: body[ct_end..].try_into().unwrap(),
        }
    }
}

/// Result of a full-scan chain verification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChainStatus {
    Ok { entries: u64 },
    Broken { first_bad_seq: u64 },
}

/// One entry as presented to a reader; `event` is `None` when the entry
/// cannot be decrypted with the keys currently held.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogView {
    pub seq: u64,
    pub agent: AgentId,
    pub event: Option<LogEvent>,
}

struct Scan {
    entries: Vec<(u64, RawEntry)>,
    valid_end: u64,
    file_len: u64,
    broken: Option<u64>,
}

fn scan_file(bytes: &[u8]) -> Result<Scan> {
    if bytes.len() < HEADER_LEN as usize || &bytes[..8] != AUDIT_MAGIC {
        return Err(Error::Integrity("audit log header missing or corrupt".into()));
    }
    let mut entries = Vec::new();
    let mut pos = HEADER_LEN as usize;
    let mut prev = genesis_digest();
    let mut broken = None;
    while pos < bytes.len() {
        let expected = entries.len() as u64 + 1;
        if bytes.len() - pos < 4 {
            break;
        }
        let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        if len < FIXED {
            broken = Some(expected);
            break;
        }
        if bytes.len() - pos - 4 < len {
            break;
        }
        let e = RawEntry::parse(&bytes[pos + 4..pos + 4 + len]);
        if e.seq != expected || chain_digest(&prev, e.seq, e.agent, &e.nonce, &e.ciphertext) != e.chain {
            broken = Some(expected);
            break;
        }
        prev = e.chain;
        entries.push((pos as u64, e));
        pos += 4 + len;
    }
    Ok(Scan {
        entries,
        valid_end: pos as u64,
        file_len: bytes.len() as u64,
        broken,
    })
}

pub struct AuditLog {
    path: PathBuf,
    file: File,
    encrypted: bool,
    fsync: bool,
    head: Digest,
    /// File offset and total length of each entry, by seq - 1.
    offsets: Vec<(u64, u32)>,
    index: BTreeMap<DeId, BTreeSet<u64>>,
    unindexed: BTreeSet<u64>,
    station_key: SymmetricKey,
}

impl std::fmt::Debug for AuditLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AuditLog")
            .field("path", &self.path)
            .field("entries", &self.offsets.len())
            .finish()
    }
}

impl AuditLog {
    /// Opens or creates the log. A torn final entry (crash mid-append) is
    /// cut off; any other damage refuses the open.
    pub fn open(path: &Path, encrypted: bool, fsync: bool, station_key: SymmetricKey) -> Result<Self> {
        if !path.exists() {
            let mut f = File::create(path)?;
            f.write_all(AUDIT_MAGIC)?;
            f.write_all(&[encrypted as u8])?;
            f.sync_all()?;
        }
        let bytes = std::fs::read(path)?;
        let scan = scan_file(&bytes)?;
        if bytes[8] != encrypted as u8 {
            return Err(Error::Integrity("audit log was written in a different trust mode".into()));
        }
        if let Some(seq) = scan.broken {
            return Err(Error::IntegrityAlarm(format!("audit log chain broken at seq {seq}")));
        }
        let file = OpenOptions::new().read(true).write(true).open(path)?;
        if scan.valid_end < scan.file_len {
            file.set_len(scan.valid_end)?;
            file.sync_all()?;
        }
        let head = scan.entries.last().map(|(_, e)| e.chain).unwrap_or_else(genesis_digest);
        let offsets = scan
            .entries
            .iter()
            .map(|(off, e)| (*off, (4 + FIXED + e.ciphertext.len()) as u32))
            .collect::<Vec<_>>();
        let mut log = AuditLog {
            path: path.to_path_buf(),
            file,
            encrypted,
            fsync,
            head,
            unindexed: (1..=offsets.len() as u64).collect(),
            offsets,
            index: BTreeMap::new(),
            station_key,
        };
        if !encrypted {
            log.refresh_index(&VolatileKeyManager::new());
        }
        Ok(log)
    }

    pub fn len(&self) -> u64 {
        self.offsets.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn head(&self) -> Digest {
        self.head
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Next seq to be assigned.
    pub fn next_seq(&self) -> u64 {
        self.len() + 1
    }

    /// Seals, chains and durably appends one event. `key` is the actor's
    /// symmetric key; without one the entry goes under the station key.
    pub fn append(&mut self, actor: AgentId, key: Option<&SymmetricKey>, payload: LogPayload) -> Result<u64> {
        let seq = self.next_seq();
        let event = LogEvent { actor, payload };
        let plain = bincode::serialize(&event)?;
        let (agent, nonce, ciphertext) = if self.encrypted {
            let (agent, key) = match key {
                Some(k) => (actor, k),
                None => (STATION_AGENT, &self.station_key),
            };
            let sealed = key.seal(&entry_aad(seq, agent), &plain);
            let (n, ct) = sealed.split_at(NONCE_LEN);
            (agent, n.try_into().expect("nonce length"), ct.to_vec())
        } else {
            (actor, [0u8; NONCE_LEN], plain)
        };
        let chain = chain_digest(&self.head, seq, agent, &nonce, &ciphertext);
        let entry = RawEntry {
            seq,
            agent,
            nonce,
            ciphertext,
            chain,
        };
        let bytes = entry.to_bytes();
        let offset = self.file.seek(SeekFrom::End(0))?;
        self.file.write_all(&bytes)?;
        if self.fsync {
            self.file.sync_data()?;
        }
        self.head = chain;
        self.offsets.push((offset, bytes.len() as u32));
        for de in event.payload.des() {
            self.index.entry(de).or_default().insert(seq);
        }
        Ok(seq)
    }

    pub fn raw(&self, seq: u64) -> Result<RawEntry> {
        let (offset, len) = *self
            .offsets
            .get((seq as usize).wrapping_sub(1))
            .ok_or_else(|| Error::Invalid(format!("no audit entry {seq}")))?;
        let mut buf = vec![0u8; len as usize];
        self.file.read_exact_at(&mut buf, offset)?;
        Ok(RawEntry::parse(&buf[4..]))
    }

    fn decrypt(&self, e: &RawEntry, keys: &VolatileKeyManager) -> Option<LogEvent> {
        let plain = if !self.encrypted {
            e.ciphertext.clone()
        } else {
            let key = if e.agent == STATION_AGENT {
                self.station_key.clone()
            } else {
                keys.get(e.agent)?
            };
            key.open_with_nonce(&e.nonce, &entry_aad(e.seq, e.agent), &e.ciphertext)
                .ok()?
        };
        bincode::deserialize(&plain).ok()
    }

    pub fn read(&self, seq: u64, keys: &VolatileKeyManager) -> Result<LogView> {
        let e = self.raw(seq)?;
        Ok(LogView {
            seq,
            agent: e.agent,
            event: self.decrypt(&e, keys),
        })
    }

    /// Indexes entries that became decryptable since the last call (after
    /// restart, as agents resend their keys). Returns how many remain
    /// opaque.
    pub fn refresh_index(&mut self, keys: &VolatileKeyManager) -> usize {
        let pending: Vec<u64> = self.unindexed.iter().copied().collect();
        for seq in pending {
            let Ok(view) = self.read(seq, keys) else { continue };
            if let Some(event) = view.event {
                for de in event.payload.des() {
                    self.index.entry(de).or_default().insert(seq);
                }
                self.unindexed.remove(&seq);
            }
        }
        self.unindexed.len()
    }

    /// Seqs of indexed entries naming any DE in `des`.
    pub fn seqs_for(&self, des: &BTreeSet<DeId>) -> BTreeSet<u64> {
        des.iter()
            .filter_map(|d| self.index.get(d))
            .flatten()
            .copied()
            .collect()
    }

    /// Entries concerning `owned`, with DE lists narrowed to it.
    pub fn owner_view(&self, owned: &BTreeSet<DeId>, keys: &VolatileKeyManager) -> Result<Vec<LogView>> {
        let mut out = Vec::new();
        for seq in self.seqs_for(owned) {
            let mut view = self.read(seq, keys)?;
            if let Some(ev) = &mut view.event {
                ev.payload = ev.payload.redact(&|d| owned.contains(&d));
            }
            out.push(view);
        }
        Ok(out)
    }

    pub fn full_view(&self, keys: &VolatileKeyManager) -> Result<Vec<LogView>> {
        (1..=self.len()).map(|s| self.read(s, keys)).collect()
    }

    /// Re-reads the whole file and checks sequence numbers, every chain
    /// digest, and that the last digest matches the head held in memory.
    pub fn verify_chain(&self) -> Result<ChainStatus> {
        let bytes = std::fs::read(&self.path)?;
        if bytes.len() < HEADER_LEN as usize || &bytes[..8] != AUDIT_MAGIC {
            return Ok(ChainStatus::Broken { first_bad_seq: 1 });
        }
        let scan = scan_file(&bytes)?;
        let n = scan.entries.len() as u64;
        if let Some(seq) = scan.broken {
            return Ok(ChainStatus::Broken { first_bad_seq: seq });
        }
        if scan.valid_end != scan.file_len || n < self.len() {
            return Ok(ChainStatus::Broken { first_bad_seq: n + 1 });
        }
        let last = scan.entries.last().map(|(_, e)| e.chain).unwrap_or_else(genesis_digest);
        if n > self.len() || last != self.head {
            return Ok(ChainStatus::Broken {
                first_bad_seq: n.min(self.len()).max(1),
            });
        }
        Ok(ChainStatus::Ok { entries: n })
    }
}
