//! Mediated execution of connector functions.
//!
//! Every invocation gets an [`ExecutionContext`]: a private sandbox
//! directory plus the set of DEs the gatekeeper made visible. Functions never
//! touch stored blobs; they ask the context for inputs by virtual name
//! (`de-<id>`), and the context decrypts on demand, records what was read,
//! and refuses everything else. Native functions call the context directly;
//! subprocess connectors reach it over a Unix socket using the `station io`
//! client (see [`wire`]).
//!
//! Sandbox layout:
//!
//! ```text
//! <root>/params.json   invocation parameters
//! <root>/inputs/       empty; inputs are served over the I/O channel
//! <root>/outputs/      files here (plus optional manifest.json) become outputs
//! <root>/scratch/      side-effect files, encrypted under the caller's key
//! <root>/io.sock       I/O channel for subprocesses
//! ```

mod natives;
mod subprocess;
pub mod wire;

pub use natives::{builtin_natives, NativeFunction, INDEX_MAGIC};
pub use subprocess::SandboxLimits;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::crypto::SymmetricKey;
use crate::error::{Error, Result};
use crate::functions::Params;
use crate::model::{AgentId, DeId, FunctionId, InvocationId, TrustMode};

/// Plaintext access to stored DEs, provided by the station.
pub trait DeReader: Send + Sync {
    fn read_plain(&self, de: DeId) -> Result<Vec<u8>>;
}

pub fn virtual_name(de: DeId) -> String {
    format!("de-{}", de.0)
}

fn is_escape(name: &str) -> bool {
    name.starts_with('/') || name.starts_with('~') || name.split('/').any(|s| s == "..")
}

/// Parameters for a new execution context.
#[derive(Clone)]
pub struct ContextInit {
    pub invocation: InvocationId,
    pub caller: AgentId,
    pub function: FunctionId,
    pub visible: BTreeSet<DeId>,
    pub params: Params,
    pub mode: TrustMode,
    /// Key for scratch files (the caller's, in near-zero-trust mode).
    pub scratch_key: Option<SymmetricKey>,
    pub scratch_quota: u64,
    /// Fail the run on the first denied access instead of just refusing it.
    pub abort_on_violation: bool,
}

/// One result produced by a function.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Output {
    pub bytes: Vec<u8>,
    /// Inputs this output was computed from, when the function says so.
    pub inputs: Option<BTreeSet<DeId>>,
}

#[derive(Debug, Default)]
struct CtxState {
    accessed: BTreeSet<DeId>,
    cache: HashMap<DeId, Arc<Vec<u8>>>,
    outputs: Vec<Output>,
    violations: Vec<String>,
    scratch_bytes: u64,
    aborted: bool,
}

pub struct ExecutionContext {
    invocation: InvocationId,
    caller: AgentId,
    function: FunctionId,
    root: PathBuf,
    visible: BTreeMap<String, DeId>,
    params: Params,
    mode: TrustMode,
    scratch_key: Option<SymmetricKey>,
    scratch_quota: u64,
    abort_on_violation: bool,
    reader: Arc<dyn DeReader>,
    state: Mutex<CtxState>,
}

/// What a finished run hands back to the gatekeeper.
#[derive(Debug, Default)]
pub struct RunReport {
    pub outputs: Vec<Output>,
    pub accessed: BTreeSet<DeId>,
    pub violations: Vec<String>,
    pub diagnostics: String,
}

#[derive(Serialize, Deserialize)]
struct OutputManifest {
    outputs: Vec<OutputManifestEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputManifestEntry {
    file: String,
    #[serde(default)]
    inputs: Option<Vec<String>>,
}

impl ExecutionContext {
    /// Creates the sandbox directory under `base`.
    pub fn create(base: &Path, init: ContextInit, reader: Arc<dyn DeReader>) -> Result<Arc<Self>> {
        let mut suffix = [0u8; 6];
        rand::RngCore::fill_bytes(&mut rand::rngs::OsRng, &mut suffix);
        let root = base.join(format!("inv-{}-{}", init.invocation.0, hex::encode(suffix)));
        fs::create_dir_all(&root)?;
        {
            use std::os::unix::fs::PermissionsExt;
            fs::set_permissions(&root, fs::Permissions::from_mode(0o700))?;
        }
        for sub in ["inputs", "outputs", "scratch"] {
            fs::create_dir(root.join(sub))?;
        }
        fs::write(root.join("params.json"), serde_json::to_vec_pretty(&init.params)?)?;
        Ok(Arc::new(ExecutionContext {
            invocation: init.invocation,
            caller: init.caller,
            function: init.function,
            visible: init.visible.iter().map(|d| (virtual_name(*d), *d)).collect(),
            root,
            params: init.params,
            mode: init.mode,
            scratch_key: init.scratch_key,
            scratch_quota: init.scratch_quota,
            abort_on_violation: init.abort_on_violation,
            reader,
            state: Mutex::new(CtxState::default()),
        }))
    }

    pub fn invocation(&self) -> InvocationId {
        self.invocation
    }

    pub fn caller(&self) -> AgentId {
        self.caller
    }

    pub fn function(&self) -> &FunctionId {
        &self.function
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn mode(&self) -> TrustMode {
        self.mode
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Virtual names of every visible input, ordered by DE id.
    pub fn list(&self) -> Vec<String> {
        let mut ids: Vec<DeId> = self.visible.values().copied().collect();
        ids.sort();
        ids.into_iter().map(virtual_name).collect()
    }

    pub fn visible(&self) -> BTreeSet<DeId> {
        self.visible.values().copied().collect()
    }

    fn violation(&self, detail: String) -> Error {
        let mut st = self.state.lock();
        st.violations.push(detail.clone());
        if self.abort_on_violation {
            st.aborted = true;
        }
        Error::Violation(detail)
    }

    /// Plaintext of a visible input. Decrypted once, then cached for the
    /// rest of the invocation.
    pub fn read(&self, name: &str) -> Result<Arc<Vec<u8>>> {
        if is_escape(name) {
            return Err(self.violation(format!("path escape attempt `{name}`")));
        }
        let Some(&de) = self.visible.get(name) else {
            return Err(self.violation(format!("read of `{name}` outside the visible set")));
        };
        if let Some(bytes) = self.state.lock().cache.get(&de) {
            return Ok(bytes.clone());
        }
        let bytes = Arc::new(self.reader.read_plain(de)?);
        let mut st = self.state.lock();
        st.accessed.insert(de);
        st.cache.insert(de, bytes.clone());
        Ok(bytes)
    }

    fn resolve_inputs(&self, names: &[String]) -> Result<BTreeSet<DeId>> {
        let accessed = self.state.lock().accessed.clone();
        names
            .iter()
            .map(|n| match self.visible.get(n) {
                Some(d) if accessed.contains(d) => Ok(*d),
                _ => Err(Error::Sandbox(format!("output names input `{n}` that was never read"))),
            })
            .collect()
    }

    pub fn put_output(&self, bytes: Vec<u8>, inputs: Option<Vec<String>>) -> Result<()> {
        let inputs = inputs.map(|names| self.resolve_inputs(&names)).transpose()?;
        self.state.lock().outputs.push(Output { bytes, inputs });
        Ok(())
    }

    fn scratch_path(&self, name: &str) -> Result<PathBuf> {
        if name.is_empty() || name.contains('/') || name.starts_with('.') {
            return Err(self.violation(format!("invalid scratch name `{name}`")));
        }
        Ok(self.root.join("scratch").join(name))
    }

    fn scratch_aad(&self, name: &str) -> Vec<u8> {
        let mut aad = b"station-scratch-v1".to_vec();
        aad.extend_from_slice(&self.invocation.0.to_be_bytes());
        aad.extend_from_slice(name.as_bytes());
        aad
    }

    /// Stores a temporary file for the running function. In near-zero-trust
    /// mode it is encrypted under the caller's key before reaching disk.
    pub fn write_side_effect(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.scratch_path(name)?;
        {
            let mut st = self.state.lock();
            let previous = fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
            let total = st.scratch_bytes - previous.min(st.scratch_bytes) + bytes.len() as u64;
            if total > self.scratch_quota {
                return Err(Error::Sandbox(format!(
                    "scratch quota of {} bytes exceeded",
                    self.scratch_quota
                )));
            }
            st.scratch_bytes = total;
        }
        let stored = match (&self.scratch_key, self.mode) {
            (Some(key), TrustMode::NearZeroTrust) => key.seal(&self.scratch_aad(name), bytes),
            (None, TrustMode::NearZeroTrust) => return Err(Error::KeyRequired(self.caller)),
            (_, TrustMode::FullTrust) => bytes.to_vec(),
        };
        fs::write(&path, stored)?;
        Ok(path)
    }

    pub fn read_side_effect(&self, name: &str) -> Result<Vec<u8>> {
        let stored = fs::read(self.scratch_path(name)?)?;
        match (&self.scratch_key, self.mode) {
            (Some(key), TrustMode::NearZeroTrust) => key.open(&self.scratch_aad(name), &stored),
            (None, TrustMode::NearZeroTrust) => Err(Error::KeyRequired(self.caller)),
            (_, TrustMode::FullTrust) => Ok(stored),
        }
    }

    pub fn accessed(&self) -> BTreeSet<DeId> {
        self.state.lock().accessed.clone()
    }

    pub fn violations(&self) -> Vec<String> {
        self.state.lock().violations.clone()
    }

    pub(crate) fn aborted(&self) -> bool {
        self.state.lock().aborted
    }

    /// Outputs emitted over the channel followed by files left in
    /// `outputs/`. Files are taken in name order unless `manifest.json`
    /// lists them.
    pub fn collect_outputs(&self) -> Result<Vec<Output>> {
        let mut outputs = std::mem::take(&mut self.state.lock().outputs);
        let dir = self.root.join("outputs");
        let manifest_path = dir.join("manifest.json");
        if manifest_path.exists() {
            let manifest: OutputManifest = serde_json::from_slice(&fs::read(&manifest_path)?)
                .map_err(|e| Error::Sandbox(format!("malformed output manifest: {e}")))?;
            for entry in manifest.outputs {
                if entry.file.contains('/') || entry.file == "manifest.json" {
                    return Err(Error::Sandbox(format!(
                        "malformed output manifest: bad file name `{}`",
                        entry.file
                    )));
                }
                let bytes = fs::read(dir.join(&entry.file)).map_err(|e| {
                    Error::Sandbox(format!("malformed output manifest: `{}`: {e}", entry.file))
                })?;
                let inputs = entry.inputs.map(|n| self.resolve_inputs(&n)).transpose()?;
                outputs.push(Output { bytes, inputs });
            }
        } else {
            let mut names: Vec<_> = fs::read_dir(&dir)?
                .filter_map(|e| e.ok())
                .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
                .map(|e| e.file_name())
                .collect();
            names.sort();
            for name in names {
                outputs.push(Output {
                    bytes: fs::read(dir.join(&name))?,
                    inputs: None,
                });
            }
        }
        Ok(outputs)
    }

    /// Removes the sandbox directory, scratch area included.
    pub fn teardown(&self) {
        let _ = fs::remove_dir_all(&self.root);
    }
}

impl Drop for ExecutionContext {
    fn drop(&mut self) {
        self.teardown();
    }
}

/// What to run inside a context.
pub enum Program {
    Native(Arc<dyn NativeFunction>),
    Command {
        argv: Vec<String>,
        connector_dir: PathBuf,
    },
}

/// Runs `program` to completion and gathers its outputs and accessed set.
pub fn launch(ctx: &Arc<ExecutionContext>, program: &Program, limits: &SandboxLimits) -> Result<RunReport> {
    let diagnostics = match program {
        Program::Native(f) => {
            f.run(ctx)?;
            String::new()
        }
        Program::Command {
            argv,
            connector_dir,
        } => subprocess::run(ctx, argv, connector_dir, limits)?,
    };
    if ctx.aborted() {
        return Err(Error::Violation(ctx.violations().join("; ")));
    }
    Ok(RunReport {
        outputs: ctx.collect_outputs()?,
        accessed: ctx.accessed(),
        violations: ctx.violations(),
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) struct MapReader(pub BTreeMap<DeId, Vec<u8>>);

    impl DeReader for MapReader {
        fn read_plain(&self, de: DeId) -> Result<Vec<u8>> {
            self.0.get(&de).cloned().ok_or(Error::UnknownDe(de))
        }
    }

    pub(crate) fn ctx(base: &Path, visible: &[u64], mode: TrustMode) -> Arc<ExecutionContext> {
        let reader = MapReader(
            (1..=5)
                .map(|i| (DeId(i), format!("content-{i}").into_bytes()))
                .collect(),
        );
        ExecutionContext::create(
            base,
            ContextInit {
                invocation: InvocationId(1),
                caller: AgentId(1),
                function: FunctionId::new("f"),
                visible: visible.iter().map(|d| DeId(*d)).collect(),
                params: Params::new(),
                mode,
                scratch_key: Some(SymmetricKey::generate()),
                scratch_quota: 1024,
                abort_on_violation: false,
            },
            Arc::new(reader),
        )
        .unwrap()
    }

    #[test]
    fn reads_record_exactly_what_was_read() {
        let dir = tempfile::tempdir().unwrap();
        let c = ctx(dir.path(), &[1, 2, 3, 4, 5], TrustMode::FullTrust);
        assert_eq!(c.list().len(), 5);
        assert_eq!(&**c.read("de-2").unwrap(), b"content-2");
        c.read("de-4").unwrap();
        c.read("de-2").unwrap();
        assert_eq!(c.accessed(), BTreeSet::from([DeId(2), DeId(4)]));
    }

    #[test]
    fn invisible_and_escaping_names_denied() {
        let dir = tempfile::tempdir().unwrap();
        let c = ctx(dir.path(), &[1], TrustMode::FullTrust);
        for name in ["de-2", "../../etc/passwd", "/etc/passwd", "de-01x"] {
            assert!(matches!(c.read(name), Err(Error::Violation(_))));
        }
        assert_eq!(c.violations().len(), 4);
        assert!(c.accessed().is_empty());
    }

    #[test]
    fn scratch_is_encrypted_quota_checked_and_torn_down() {
        let dir = tempfile::tempdir().unwrap();
        let c = ctx(dir.path(), &[], TrustMode::NearZeroTrust);
        let path = c.write_side_effect("tmp", b"plaintext-marker").unwrap();
        let raw = fs::read(&path).unwrap();
        assert!(!raw.windows(9).any(|w| w == b"plaintext"));
        assert_eq!(c.read_side_effect("tmp").unwrap(), b"plaintext-marker");
        assert!(c.write_side_effect("big", &[0u8; 2048]).is_err());
        assert!(c.write_side_effect("../x", b"").is_err());
        let root = c.root().to_path_buf();
        drop(c);
        assert!(!root.exists());
    }

    #[test]
    fn output_dir_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let c = ctx(dir.path(), &[1, 2], TrustMode::FullTrust);
        assert!(c.collect_outputs().unwrap().is_empty());
        c.read("de-1").unwrap();
        fs::write(c.root().join("outputs/a"), b"A").unwrap();
        fs::write(
            c.root().join("outputs/manifest.json"),
            br#"{"outputs":[{"file":"a","inputs":["de-1"]}]}"#,
        )
        .unwrap();
        let outs = c.collect_outputs().unwrap();
        assert_eq!(outs.len(), 1);
        assert_eq!(outs[0].inputs, Some(BTreeSet::from([DeId(1)])));
        fs::write(c.root().join("outputs/manifest.json"), b"{not json").unwrap();
        assert!(matches!(c.collect_outputs(), Err(Error::Sandbox(_))));
    }
}
