//! Encrypted write-ahead log.
//!
//! File layout (all integers big-endian):
//!
//! ```text
//! header:  "DSEWAL01" | flags u8 (1 = encrypted) | base_lsn u64
//! record:  len u32 | lsn u64 | agent u64 | nonce [12] | ciphertext [len - 28]
//! ```
//!
//! `len` counts everything after itself. The ciphertext is the versioned
//! update encoding sealed under the triggering agent's key with associated
//! data `"station-ewal-v1" | lsn | agent`. In full-trust mode the nonce is
//! zero and the "ciphertext" is the plain encoding.

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::crypto::{SymmetricKey, NONCE_LEN};
use crate::error::{Error, Result};
use crate::model::AgentId;

use super::FaultPlan;

pub const EWAL_MAGIC: &[u8; 8] = b"DSEWAL01";
const HEADER_LEN: u64 = 8 + 1 + 8;
const RECORD_FIXED: usize = 8 + 8 + NONCE_LEN;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EwalRecord {
    pub lsn: u64,
    pub agent: AgentId,
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
}

pub(crate) fn record_aad(lsn: u64, agent: AgentId) -> Vec<u8> {
    let mut aad = b"station-ewal-v1".to_vec();
    aad.extend_from_slice(&lsn.to_be_bytes());
    aad.extend_from_slice(&agent.0.to_be_bytes());
    aad
}

impl EwalRecord {
    /// Seals `payload` for `lsn`. `key == None` stores it in the clear.
    pub fn seal(lsn: u64, agent: AgentId, key: Option<&SymmetricKey>, payload: &[u8]) -> Self {
        match key {
            Some(key) => {
                let sealed = key.seal(&record_aad(lsn, agent), payload);
                let (nonce, ct) = sealed.split_at(NONCE_LEN);
                EwalRecord {
                    lsn,
                    agent,
                    nonce: nonce.try_into().expect("nonce length"),
                    ciphertext: ct.to_vec(),
                }
            }
            None => EwalRecord {
                lsn,
                agent,
                nonce: [0; NONCE_LEN],
                ciphertext: payload.to_vec(),
            },
        }
    }

    pub fn open(&self, key: &SymmetricKey) -> Result<Vec<u8>> {
        key.open_with_nonce(&self.nonce, &record_aad(self.lsn, self.agent), &self.ciphertext)
    }

    fn to_bytes(&self) -> Vec<u8> {
        let len = (RECORD_FIXED + self.ciphertext.len()) as u32;
        let mut out = Vec::with_capacity(4 + len as usize);
        out.extend_from_slice(&len.to_be_bytes());
        out.extend_from_slice(&self.lsn.to_be_bytes());
        out.extend_from_slice(&self.agent.0.to_be_bytes());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.ciphertext);
        out
    }
}

/// Contents of an EWAL file as found on disk.
#[derive(Debug)]
pub struct EwalScan {
    pub encrypted: bool,
    pub base_lsn: u64,
    pub records: Vec<EwalRecord>,
    /// Bytes of a partially written final record, dropped on open.
    pub torn_bytes: u64,
}

/// Parses an EWAL file without modifying it.
pub fn scan(path: &Path) -> Result<Option<EwalScan>> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    if bytes.len() < HEADER_LEN as usize || &bytes[..8] != EWAL_MAGIC {
        return Err(Error::Integrity("EWAL header missing or corrupt".into()));
    }
    let encrypted = match bytes[8] {
        0 => false,
        1 => true,
        f => return Err(Error::Integrity(format!("unknown EWAL flags {f}"))),
    };
    let base_lsn = u64::from_be_bytes(bytes[9..17].try_into().unwrap());
    let mut records = Vec::new();
    let mut pos = HEADER_LEN as usize;
    let mut expected = base_lsn;
    while pos < bytes.len() {
        if bytes.len() - pos < 4 {
            break;
        }
        let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        if len < RECORD_FIXED || bytes.len() - pos - 4 < len {
            break;
        }
        let body = &bytes[pos + 4..pos + 4 + len];
        let lsn = u64::from_be_bytes(body[..8].try_into().unwrap());
        if lsn != expected {
            return Err(Error::Integrity(format!(
                "EWAL sequence broken: expected lsn {expected}, found {lsn}"
            )));
        }
        records.push(EwalRecord {
            lsn,
            agent: AgentId(u64::from_be_bytes(body[8..16].try_into().unwrap())),
            nonce: body[16..16 + NONCE_LEN].try_into().unwrap(),
            ciphertext: body[RECORD_FIXED..].to_vec(),
        });
        expected += 1;
        pos += 4 + len;
    }
    Ok(Some(EwalScan {
        encrypted,
        base_lsn,
        records,
        torn_bytes: (bytes.len() - pos) as u64,
    }))
}

/// Append handle on the EWAL file.
pub struct Ewal {
    path: PathBuf,
    file: File,
    encrypted: bool,
    next_lsn: u64,
    fsync: bool,
    faults: FaultPlan,
    appends: u64,
}

impl std::fmt::Debug for Ewal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Ewal")
            .field("path", &self.path)
            .field("next_lsn", &self.next_lsn)
            .finish()
    }
}

fn write_header(file: &mut File, encrypted: bool, base_lsn: u64) -> Result<()> {
    file.write_all(EWAL_MAGIC)?;
    file.write_all(&[encrypted as u8])?;
    file.write_all(&base_lsn.to_be_bytes())?;
    Ok(())
}

impl Ewal {
    /// Opens (or creates) the log, cutting off a torn final record.
    pub fn open(path: &Path, encrypted: bool, fsync: bool, faults: FaultPlan) -> Result<(Self, EwalScan)> {
        let scan = match scan(path)? {
            Some(s) => {
                if s.encrypted != encrypted {
                    return Err(Error::Integrity(
                        "EWAL was written in a different trust mode".into(),
                    ));
                }
                s
            }
            None => {
                let mut f = File::create(path)?;
                write_header(&mut f, encrypted, 1)?;
                f.sync_all()?;
                EwalScan {
                    encrypted,
                    base_lsn: 1,
                    records: Vec::new(),
                    torn_bytes: 0,
                }
            }
        };
        let mut file = OpenOptions::new().read(true).write(true).open(path)?;
        let end = file.seek(SeekFrom::End(0))?;
        if scan.torn_bytes > 0 {
            file.set_len(end - scan.torn_bytes)?;
            file.sync_all()?;
        }
        file.seek(SeekFrom::End(0))?;
        let next_lsn = scan.base_lsn + scan.records.len() as u64;
        Ok((
            Ewal {
                path: path.to_path_buf(),
                file,
                encrypted,
                next_lsn,
                fsync,
                faults,
                appends: 0,
            },
            scan,
        ))
    }

    pub fn next_lsn(&self) -> u64 {
        self.next_lsn
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Seals and durably appends one update. Returns its lsn.
    pub fn append(&mut self, agent: AgentId, key: Option<&SymmetricKey>, payload: &[u8]) -> Result<u64> {
        if self.encrypted && key.is_none() {
            return Err(Error::KeyRequired(agent));
        }
        let key = if self.encrypted { key } else { None };
        let lsn = self.next_lsn;
        let bytes = EwalRecord::seal(lsn, agent, key, payload).to_bytes();
        self.appends += 1;
        if self.faults.torn_append == Some(self.appends) {
            self.file.write_all(&bytes[..bytes.len() / 2])?;
            self.file.sync_data()?;
            return Err(Error::InjectedCrash);
        }
        self.file.write_all(&bytes)?;
        if self.fsync {
            self.file.sync_data()?;
        } else {
            self.file.flush()?;
        }
        self.next_lsn += 1;
        if self.faults.crash_after_append == Some(self.appends) {
            return Err(Error::InjectedCrash);
        }
        Ok(lsn)
    }

    /// Replaces the log with an empty one whose first lsn follows
    /// `covered_lsn`. Called once a checkpoint covering every record is on
    /// disk.
    pub fn truncate_through(&mut self, covered_lsn: u64) -> Result<()> {
        if covered_lsn + 1 != self.next_lsn {
            return Err(Error::Invalid(format!(
                "checkpoint covers lsn {covered_lsn} but log is at {}",
                self.next_lsn - 1
            )));
        }
        let tmp = self.path.with_extension("tmp");
        {
            let mut f = File::create(&tmp)?;
            write_header(&mut f, self.encrypted, covered_lsn + 1)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, &self.path)?;
        if let Some(parent) = self.path.parent() {
            File::open(parent)?.sync_all()?;
        }
        self.file = OpenOptions::new().read(true).write(true).open(&self.path)?;
        self.file.seek(SeekFrom::End(0))?;
        Ok(())
    }

    /// Size of the file in bytes.
    pub fn len_bytes(&mut self) -> Result<u64> {
        Ok(self.file.seek(SeekFrom::End(0))?)
    }

    #[doc(hidden)]
    pub fn raw_bytes(&mut self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.file.seek(SeekFrom::Start(0))?;
        self.file.read_to_end(&mut out)?;
        self.file.seek(SeekFrom::End(0))?;
        Ok(out)
    }
}
