//! Content-addressed blob store under the station's storage root.
//!
//! Blobs are named by the SHA-256 of their stored bytes (ciphertext in
//! near-zero-trust mode), never of the plaintext.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::crypto::sha256;
use crate::error::{Error, Result};
use crate::model::StorageRef;

#[derive(Debug, Clone)]
pub struct BlobStore {
    dir: PathBuf,
    fsync: bool,
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8], fsync: bool) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        if fsync {
            f.sync_all()?;
        }
    }
    fs::rename(&tmp, path)?;
    if fsync {
        if let Some(parent) = path.parent() {
            File::open(parent)?.sync_all()?;
        }
    }
    Ok(())
}

impl BlobStore {
    pub fn open(dir: impl Into<PathBuf>, fsync: bool) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(BlobStore { dir, fsync })
    }

    fn path(&self, r: &StorageRef) -> Result<PathBuf> {
        if r.0.len() != 64 || !r.0.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(Error::Integrity(format!("malformed storage ref `{}`", r.0)));
        }
        Ok(self.dir.join(&r.0))
    }

    pub fn put(&self, bytes: &[u8]) -> Result<StorageRef> {
        let name = hex::encode(sha256(&[bytes]));
        let r = StorageRef(name);
        let path = self.path(&r)?;
        if !path.exists() {
            write_atomic(&path, bytes, self.fsync)?;
        }
        Ok(r)
    }

    /// Reads a blob and checks it still hashes to its name.
    pub fn get(&self, r: &StorageRef) -> Result<Vec<u8>> {
        let bytes = fs::read(self.path(r)?)?;
        if hex::encode(sha256(&[&bytes])) != r.0 {
            return Err(Error::Integrity(format!("blob {} does not match its address", r.0)));
        }
        Ok(bytes)
    }

    pub fn remove(&self, r: &StorageRef) -> Result<()> {
        match fs::remove_file(self.path(r)?) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn list(&self) -> Result<Vec<String>> {
        let mut names = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if !name.ends_with(".tmp") {
                names.push(name);
            }
        }
        names.sort();
        Ok(names)
    }

    /// Deletes blobs not in `live` (left behind by a crash between writing
    /// a blob and logging the DE that references it).
    pub fn sweep(&self, live: &std::collections::BTreeSet<String>) -> Result<usize> {
        let mut removed = 0;
        for name in self.list()? {
            if !live.contains(&name) {
                fs::remove_file(self.dir.join(&name))?;
                removed += 1;
            }
        }
        Ok(removed)
    }
}
