//! The station: boot, recovery, registration, key handling and the
//! audit-log read paths. Invocation brokering lives in
//! [`crate::gatekeeper`].
//!
//! Storage root layout:
//!
//! ```text
//! <root>/blobs/          content-addressed DE blobs
//! <root>/ewal.log        encrypted write-ahead log
//! <root>/checkpoint.bin  latest checkpoint
//! <root>/audit.log       hash-chained audit log
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock, RwLockReadGuard};
use serde::{Deserialize, Serialize};
use zeroize::Zeroizing;

use crate::audit::{AuditLog, ChainStatus, LogPayload, LogView};
use crate::crypto::{
    blob_aad, resend_proof_bytes, sha256, validate_public_key, verify_signature, AttestationReport,
    SignedCiphertext, StationIdentity, SymmetricKey, VolatileKeyManager,
};
use crate::durability::{
    default_slot_count, scan_ewal, CheckpointFile, Ewal, EwalScan, FaultPlan, RecoveryAttempt,
    RecoveryPlan, SlotSelection,
};
use crate::error::{Error, Result};
use crate::functions::{ConnectorManifest, Entrypoint, FunctionRegistry, FunctionSummary};
use crate::interceptor::{builtin_natives, DeReader, NativeFunction, SandboxLimits};
use crate::model::{
    AccessTriple, Agent, AgentId, Contract, ContractId, DataElement, DeId, DeKind, FunctionId,
    Policy, Role, RoleSet, StoredMode, TrustMode, AUDIT_LOG_DE, STATION_AGENT,
};
use crate::registry::{Registry, Update};
use crate::storage::BlobStore;

#[derive(Clone, Debug)]
pub struct StationConfig {
    pub storage_root: PathBuf,
    pub mode: TrustMode,
    /// Flush every EWAL record and audit entry to stable storage.
    pub fsync: bool,
    /// Where per-invocation sandboxes are created. Defaults to a
    /// memory-backed directory in near-zero-trust mode when available.
    pub sandbox_base: Option<PathBuf>,
    /// Connector manifests loaded at every boot.
    pub connectors: Vec<PathBuf>,
    pub limits: SandboxLimits,
    pub scratch_quota: u64,
    pub abort_on_violation: bool,
    #[doc(hidden)]
    pub faults: FaultPlan,
    /// Deliberately broken build for detector-sensitivity tests: results
    /// are released without checking policy coverage.
    #[doc(hidden)]
    pub unsafe_skip_coverage_check: bool,
}

impl StationConfig {
    pub fn new(storage_root: impl Into<PathBuf>, mode: TrustMode) -> Self {
        StationConfig {
            storage_root: storage_root.into(),
            mode,
            fsync: true,
            sandbox_base: None,
            connectors: Vec::new(),
            limits: SandboxLimits::default(),
            scratch_quota: 256 << 20,
            abort_on_violation: false,
            faults: FaultPlan::default(),
            unsafe_skip_coverage_check: false,
        }
    }
}

/// Whether the station is serving requests or still collecting keys.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecoveryStatus {
    Ready,
    Recovering {
        awaiting: Vec<AgentId>,
        rejected: Vec<AgentId>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub id: u64,
    pub covered_lsn: u64,
    pub slots: Vec<AgentId>,
}

/// Registration request for a new agent.
#[derive(Clone, Debug)]
pub struct NewAgent {
    pub name: String,
    pub roles: RoleSet,
    pub public_key: crate::model::PublicKey,
    pub key: Option<SymmetricKey>,
}

pub(crate) struct Writer {
    pub(crate) ewal: Ewal,
    pub(crate) audit: AuditLog,
    next_checkpoint: u64,
}

enum Phase {
    Ready,
    Recovering {
        plan: RecoveryPlan,
        proofs: BTreeMap<AgentId, Vec<u8>>,
    },
}

pub struct Station {
    pub(crate) config: StationConfig,
    identity: StationIdentity,
    pub(crate) keys: Arc<VolatileKeyManager>,
    pub(crate) blobs: BlobStore,
    pub(crate) functions: RwLock<FunctionRegistry>,
    pub(crate) connector_dirs: RwLock<HashMap<String, PathBuf>>,
    pub(crate) natives: RwLock<BTreeMap<String, Arc<dyn NativeFunction>>>,
    pub(crate) registry: RwLock<Registry>,
    pub(crate) writer: Mutex<Writer>,
    phase: Mutex<Phase>,
    poisoned: AtomicBool,
    pub(crate) sandbox_base: PathBuf,
}

impl std::fmt::Debug for Station {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Station")
            .field("root", &self.config.storage_root)
            .field("mode", &self.config.mode)
            .finish()
    }
}

/// Reads stored DEs for the interceptor, decrypting in memory.
pub(crate) struct StoredDes {
    pub(crate) blobs: BlobStore,
    pub(crate) keys: Arc<VolatileKeyManager>,
    pub(crate) des: HashMap<DeId, DataElement>,
}

impl DeReader for StoredDes {
    fn read_plain(&self, de: DeId) -> Result<Vec<u8>> {
        let elem = self.des.get(&de).ok_or(Error::UnknownDe(de))?;
        decrypt_de(&self.blobs, &self.keys, elem).map(|z| z.to_vec())
    }
}

pub(crate) fn decrypt_de(
    blobs: &BlobStore,
    keys: &VolatileKeyManager,
    elem: &DataElement,
) -> Result<Zeroizing<Vec<u8>>> {
    let r = elem
        .storage_ref
        .as_ref()
        .ok_or_else(|| Error::Invalid(format!("DE {} has no stored content", elem.id)))?;
    let stored = blobs.get(r)?;
    let plain = match elem.enc_key {
        Some(agent) => Zeroizing::new(keys.require(agent)?.open(&blob_aad(agent), &stored)?),
        None => Zeroizing::new(stored),
    };
    if sha256(&[&plain]) != elem.content_digest {
        return Err(Error::Integrity(format!("DE {} content digest mismatch", elem.id)));
    }
    Ok(plain)
}

fn default_sandbox_base(config: &StationConfig, identity: &StationIdentity) -> PathBuf {
    if let Some(b) = &config.sandbox_base {
        return b.clone();
    }
    let shm = Path::new("/dev/shm");
    if config.mode.encrypts() && shm.is_dir() {
        // SIMULATED ENCLAVE: memory-backed so function temp files never
        // reach durable media.
        return shm.join(format!("station-{}", hex::encode(&identity.session_id()[..6])));
    }
    config.storage_root.join("sandbox")
}

impl Station {
    pub fn ewal_path(root: &Path) -> PathBuf {
        root.join("ewal.log")
    }

    pub fn checkpoint_path(root: &Path) -> PathBuf {
        root.join("checkpoint.bin")
    }

    pub fn audit_path(root: &Path) -> PathBuf {
        root.join("audit.log")
    }

    pub fn blob_dir(root: &Path) -> PathBuf {
        root.join("blobs")
    }

    /// Boots a station over `config.storage_root`. With an encrypted log
    /// on disk the station comes up recovering and serves only attestation
    /// and key resends until every needed key is back.
    pub fn open(config: StationConfig) -> Result<Station> {
        std::fs::create_dir_all(&config.storage_root)?;
        let root = config.storage_root.clone();
        let encrypted = config.mode.encrypts();
        let identity = StationIdentity::generate();
        let blobs = BlobStore::open(Self::blob_dir(&root), config.fsync)?;
        let checkpoint = CheckpointFile::read(&Self::checkpoint_path(&root))?;
        if let Some(c) = &checkpoint {
            if c.encrypted != encrypted {
                return Err(Error::Integrity("checkpoint was written in a different trust mode".into()));
            }
        }
        let (ewal, scan): (Ewal, EwalScan) =
            Ewal::open(&Self::ewal_path(&root), encrypted, config.fsync, config.faults.clone())?;
        let next_checkpoint = checkpoint.as_ref().map(|c| c.id + 1).unwrap_or(1);
        let plan = RecoveryPlan::new(checkpoint, scan)?;
        let audit = AuditLog::open(
            &Self::audit_path(&root),
            encrypted,
            config.fsync,
            SymmetricKey::generate(),
        )?;
        let sandbox_base = default_sandbox_base(&config, &identity);
        std::fs::create_dir_all(&sandbox_base)?;
        let station = Station {
            identity,
            keys: Arc::new(VolatileKeyManager::new()),
            blobs,
            functions: RwLock::new(FunctionRegistry::new()),
            connector_dirs: RwLock::new(HashMap::new()),
            natives: RwLock::new(builtin_natives()),
            registry: RwLock::new(Registry::new()),
            writer: Mutex::new(Writer {
                ewal,
                audit,
                next_checkpoint,
            }),
            phase: Mutex::new(Phase::Recovering {
                plan,
                proofs: BTreeMap::new(),
            }),
            poisoned: AtomicBool::new(false),
            sandbox_base,
            config,
        };
        for path in station.config.connectors.clone() {
            station.load_connector_file(&path)?;
        }
        station.try_finish_recovery()?;
        Ok(station)
    }

    pub fn mode(&self) -> TrustMode {
        self.config.mode
    }

    pub fn config(&self) -> &StationConfig {
        &self.config
    }

    pub fn storage_root(&self) -> &Path {
        &self.config.storage_root
    }

    pub fn sandbox_base(&self) -> &Path {
        &self.sandbox_base
    }

    pub fn session_id(&self) -> [u8; 16] {
        self.identity.session_id()
    }

    pub fn identity(&self) -> &StationIdentity {
        &self.identity
    }

    pub fn attest(&self, nonce: &[u8]) -> AttestationReport {
        self.identity.attest(nonce)
    }

    /// Read access to the in-memory registry.
    pub fn registry(&self) -> RwLockReadGuard<'_, Registry> {
        self.registry.read()
    }

    pub fn state_hash(&self) -> crate::model::Digest {
        self.registry.read().state_hash()
    }

    pub fn has_key(&self, agent: AgentId) -> bool {
        self.keys.contains(agent)
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned.load(Ordering::SeqCst)
    }

    pub(crate) fn poison(&self, e: Error) -> Error {
        if matches!(e, Error::InjectedCrash | Error::Io(_)) {
            self.poisoned.store(true, Ordering::SeqCst);
        }
        e
    }

    pub(crate) fn ready(&self) -> Result<()> {
        if self.is_poisoned() {
            return Err(Error::Poisoned);
        }
        match &*self.phase.lock() {
            Phase::Ready => Ok(()),
            Phase::Recovering { plan, .. } => {
                let awaiting = match plan.attempt(&self.keys) {
                    Ok(RecoveryAttempt::Waiting { awaiting, .. }) => awaiting,
                    _ => Vec::new(),
                };
                Err(Error::Recovering(awaiting))
            }
        }
    }

    /// Key used for records and log entries triggered by `agent`.
    pub(crate) fn key_for(&self, agent: AgentId) -> Result<Option<SymmetricKey>> {
        match (self.config.mode, self.keys.get(agent)) {
            (TrustMode::FullTrust, k) => Ok(k),
            (TrustMode::NearZeroTrust, Some(k)) => Ok(Some(k)),
            (TrustMode::NearZeroTrust, None) => Err(Error::KeyRequired(agent)),
        }
    }

    /// Write-ahead: seal and append the update, then apply it.
    pub(crate) fn commit(&self, w: &mut Writer, agent: AgentId, update: &Update) -> Result<Option<crate::registry::ReleaseOutcome>> {
        let key = self.key_for(agent)?;
        w.ewal
            .append(agent, key.as_ref(), &update.encode())
            .map_err(|e| self.poison(e))?;
        Ok(self.registry.write().apply(update))
    }

    pub(crate) fn log(&self, w: &mut Writer, actor: AgentId, payload: LogPayload) -> Result<u64> {
        let key = if actor == STATION_AGENT {
            None
        } else {
            self.keys.get(actor)
        };
        w.audit
            .append(actor, key.as_ref(), payload)
            .map_err(|e| self.poison(e))
    }

    // ---- connectors ------------------------------------------------------

    /// Makes a native function available to manifests as
    /// `entrypoint = { native = "<name>" }`.
    pub fn register_native(&self, name: &str, f: Arc<dyn NativeFunction>) {
        self.natives.write().insert(name.to_string(), f);
    }

    pub fn load_connector_file(&self, path: &Path) -> Result<Vec<FunctionId>> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let manifest = ConnectorManifest::from_toml(&text)?;
        let dir = path
            .parent()
            .map(|p| p.canonicalize().unwrap_or_else(|_| p.to_path_buf()))
            .unwrap_or_default();
        self.register_connector(&manifest, &dir)
    }

    /// Registers an application. `dir` is substituted for `{connector}` in
    /// subprocess entrypoints.
    pub fn register_connector(&self, manifest: &ConnectorManifest, dir: &Path) -> Result<Vec<FunctionId>> {
        {
            let natives = self.natives.read();
            for f in &manifest.functions {
                if let Entrypoint::Native(name) = &f.entrypoint {
                    if !natives.contains_key(name) {
                        return Err(Error::Manifest(format!(
                            "function `{}` names unknown native `{name}`",
                            f.name
                        )));
                    }
                }
            }
        }
        let mut w = self.writer.lock();
        let added = self.functions.write().register_connector(manifest)?;
        self.connector_dirs
            .write()
            .insert(manifest.app.clone(), dir.to_path_buf());
        self.log(
            &mut w,
            STATION_AGENT,
            LogPayload::ConnectorRegistered {
                app: manifest.app.clone(),
                functions: added.clone(),
            },
        )?;
        Ok(added)
    }

    pub fn list_functions(&self) -> Vec<FunctionSummary> {
        self.functions.read().list_functions()
    }

    pub fn descendants(&self, f: &FunctionId) -> Result<BTreeSet<FunctionId>> {
        self.functions.read().descendants(f)
    }

    // ---- agents, DEs, policies ------------------------------------------

    pub fn register_agent(&self, req: NewAgent) -> Result<AgentId> {
        self.ready()?;
        if req.roles.is_empty() {
            return Err(Error::Invalid("an agent needs at least one role".into()));
        }
        validate_public_key(&req.public_key)?;
        if self.config.mode.encrypts() && req.key.is_none() {
            return Err(Error::Invalid(
                "near-zero-trust mode requires a symmetric key at registration".into(),
            ));
        }
        let mut w = self.writer.lock();
        let id = {
            let reg = self.registry.read();
            if let Some(existing) = reg.agent_by_key(&req.public_key) {
                return Err(Error::DuplicatePublicKey(existing));
            }
            reg.next_agent_id()
        };
        let agent = Agent {
            id,
            display_name: req.name,
            roles: req.roles,
            public_key: req.public_key,
            keyed: req.key.is_some(),
        };
        if let Some(k) = req.key {
            self.keys.insert(id, k);
        }
        let result = self.commit(&mut w, id, &Update::RegisterAgent { agent });
        if let Err(e) = result {
            self.keys.remove(id);
            return Err(e);
        }
        self.log(
            &mut w,
            id,
            LogPayload::AgentRegistered {
                agent: id,
                roles: req.roles,
            },
        )?;
        Ok(id)
    }

    pub fn agent(&self, id: AgentId) -> Result<Agent> {
        self.registry.read().agent(id).cloned()
    }

    fn require_role(&self, agent: AgentId, role: Role) -> Result<Agent> {
        let a = self.agent(agent)?;
        if !a.roles.contains(role) {
            return Err(Error::Unauthorized(format!("agent {agent} lacks the {role:?} role")));
        }
        Ok(a)
    }

    /// Authenticates an upload and decrypts it in memory.
    pub fn ingest_encrypted(&self, agent: AgentId, upload: &SignedCiphertext) -> Result<Zeroizing<Vec<u8>>> {
        let a = self.agent(agent)?;
        verify_signature(&a.public_key, &upload.ciphertext, &upload.signature)
            .map_err(|_| Error::Integrity("upload signature does not verify".into()))?;
        match self.config.mode {
            TrustMode::FullTrust => Ok(Zeroizing::new(upload.ciphertext.clone())),
            TrustMode::NearZeroTrust => {
                let key = self.keys.require(agent)?;
                Ok(Zeroizing::new(key.open(&blob_aad(agent), &upload.ciphertext)?))
            }
        }
    }

    pub fn register_de(&self, owner: AgentId, upload: &SignedCiphertext, mode: StoredMode) -> Result<DeId> {
        self.ready()?;
        self.require_role(owner, Role::Owner)?;
        let plain = self.ingest_encrypted(owner, upload)?;
        let digest = sha256(&[&plain]);
        let size = plain.len() as u64;
        drop(plain);
        // The upload is already sealed under the owner's key (or is the
        // plaintext in full-trust mode) and is stored as received.
        let storage_ref = self.blobs.put(&upload.ciphertext)?;
        let mut w = self.writer.lock();
        let id = self.registry.read().next_de_id();
        let de = DataElement {
            id,
            owner,
            kind: DeKind::Registered,
            stored_mode: mode,
            storage_ref: Some(storage_ref),
            enc_key: self.config.mode.encrypts().then_some(owner),
            content_digest: digest,
            size,
        };
        self.commit(&mut w, owner, &Update::RegisterDe { de })?;
        self.log(&mut w, owner, LogPayload::DeRegistered { de: id, mode })?;
        Ok(id)
    }

    fn check_policy_request(&self, owner: AgentId, triple: &AccessTriple) -> Result<()> {
        let reg = self.registry.read();
        let de = reg.de(triple.de)?;
        if de.kind != DeKind::Registered || de.owner != owner {
            return Err(Error::Unauthorized(format!(
                "agent {owner} does not own DE {}",
                triple.de
            )));
        }
        reg.agent(triple.agent)?;
        if !self.functions.read().contains(&triple.function) {
            return Err(Error::UnknownFunction(triple.function.clone()));
        }
        Ok(())
    }

    pub fn create_policy(&self, owner: AgentId, grantee: AgentId, function: FunctionId, de: DeId) -> Result<Policy> {
        self.ready()?;
        let triple = AccessTriple::new(grantee, function, de);
        let mut w = self.writer.lock();
        self.check_policy_request(owner, &triple)?;
        if !self.registry.read().has_policy(&triple) {
            self.commit(&mut w, owner, &Update::CreatePolicy { triple: triple.clone() })?;
            self.log(&mut w, owner, LogPayload::PolicyCreated { triple: triple.clone() })?;
        }
        let created_at = self.registry.read().state().policies[&triple];
        Ok(Policy {
            agent: triple.agent,
            function: triple.function,
            de: triple.de,
            created_at,
        })
    }

    /// Revokes a policy. Returns whether one existed.
    pub fn delete_policy(&self, owner: AgentId, grantee: AgentId, function: FunctionId, de: DeId) -> Result<bool> {
        self.ready()?;
        let triple = AccessTriple::new(grantee, function, de);
        let mut w = self.writer.lock();
        self.check_policy_request(owner, &triple)?;
        if !self.registry.read().has_policy(&triple) {
            return Ok(false);
        }
        self.commit(&mut w, owner, &Update::DeletePolicy { triple: triple.clone() })?;
        self.log(&mut w, owner, LogPayload::PolicyDeleted { triple })?;
        Ok(true)
    }

    /// Policies on DEs owned by `owner`, or granted to `owner`.
    pub fn policies_for(&self, agent: AgentId) -> Vec<Policy> {
        let reg = self.registry.read();
        reg.state()
            .policies
            .iter()
            .filter(|(t, _)| {
                t.agent == agent || reg.de(t.de).map(|d| d.owner == agent).unwrap_or(false)
            })
            .map(|(t, seq)| Policy {
                agent: t.agent,
                function: t.function.clone(),
                de: t.de,
                created_at: *seq,
            })
            .collect()
    }

    /// Stored bytes of `de` re-encrypted for `recipient`. A derived DE
    /// already sealed under the recipient's key is returned as stored.
    pub fn reencrypt_for(&self, de: DeId, recipient: AgentId) -> Result<Vec<u8>> {
        let elem = self.registry.read().de(de)?.clone();
        if !self.config.mode.encrypts() {
            return decrypt_de(&self.blobs, &self.keys, &elem).map(|z| z.to_vec());
        }
        let recipient_key = self.keys.require(recipient)?;
        if elem.kind == DeKind::Derived && elem.enc_key == Some(recipient) {
            let r = elem.storage_ref.as_ref().ok_or(Error::UnknownDe(de))?;
            return self.blobs.get(r);
        }
        let plain = decrypt_de(&self.blobs, &self.keys, &elem)?;
        Ok(recipient_key.seal(&blob_aad(recipient), &plain))
    }

    // ---- contracts and the audit log -------------------------------------

    pub fn propose_contract(&self, operator: AgentId) -> Result<Contract> {
        self.ready()?;
        self.require_role(operator, Role::Operator)?;
        let mut w = self.writer.lock();
        let contract = {
            let reg = self.registry.read();
            Contract {
                id: reg.next_contract_id(),
                operator,
                function: FunctionId::audit_read(),
                de: AUDIT_LOG_DE,
                required: reg.state().agents.keys().copied().collect(),
                signatures: BTreeMap::new(),
            }
        };
        self.commit(&mut w, operator, &Update::ProposeContract { contract: contract.clone() })?;
        self.log(
            &mut w,
            operator,
            LogPayload::ContractProposed {
                contract: contract.id,
                operator,
            },
        )?;
        Ok(contract)
    }

    pub fn contract(&self, id: ContractId) -> Result<Contract> {
        self.registry.read().contract(id).cloned()
    }

    pub fn sign_contract(&self, agent: AgentId, id: ContractId, signature: &[u8]) -> Result<Contract> {
        self.ready()?;
        let mut w = self.writer.lock();
        let contract = self.contract(id)?;
        if !contract.required.contains(&agent) {
            return Err(Error::Unauthorized(format!("agent {agent} is not a party to contract {}", id.0)));
        }
        let a = self.agent(agent)?;
        verify_signature(&a.public_key, &contract.canonical_bytes(), signature)?;
        self.commit(
            &mut w,
            agent,
            &Update::SignContract {
                contract: id,
                agent,
                signature: signature.to_vec(),
            },
        )?;
        let contract = self.contract(id)?;
        self.log(
            &mut w,
            agent,
            LogPayload::ContractSigned {
                contract: id,
                complete: contract.is_complete(),
            },
        )?;
        Ok(contract)
    }

    fn require_log_policy(&self, agent: AgentId) -> Result<()> {
        let triple = AccessTriple::new(agent, FunctionId::audit_read(), AUDIT_LOG_DE);
        if !self.registry.read().has_policy(&triple) {
            return Err(Error::Unauthorized(format!("agent {agent} may not read the audit log")));
        }
        Ok(())
    }

    /// Entries concerning DEs `owner` owns, narrowed to those DEs.
    pub fn read_owner_log(&self, owner: AgentId) -> Result<Vec<LogView>> {
        self.ready()?;
        self.require_role(owner, Role::Owner)?;
        self.require_log_policy(owner)?;
        let owned = self.registry.read().owned_des(owner);
        let mut w = self.writer.lock();
        let views = w.audit.owner_view(&owned, &self.keys)?;
        self.log(&mut w, owner, LogPayload::LogRead { operator_view: false })?;
        Ok(views)
    }

    /// The whole log; needs a fully signed contract.
    pub fn read_operator_log(&self, operator: AgentId) -> Result<Vec<LogView>> {
        self.ready()?;
        self.require_role(operator, Role::Operator)?;
        self.require_log_policy(operator)?;
        let mut w = self.writer.lock();
        let views = w.audit.full_view(&self.keys)?;
        self.log(&mut w, operator, LogPayload::LogRead { operator_view: true })?;
        Ok(views)
    }

    pub fn verify_audit_chain(&self) -> Result<ChainStatus> {
        self.writer.lock().audit.verify_chain()
    }

    pub fn audit_len(&self) -> u64 {
        self.writer.lock().audit.len()
    }

    /// Every entry decryptable with the keys currently held. For tests and
    /// tooling; agents go through the gated read paths.
    #[doc(hidden)]
    pub fn audit_snapshot(&self) -> Result<Vec<LogView>> {
        self.writer.lock().audit.full_view(&self.keys)
    }

    // ---- keys, recovery, checkpoints -------------------------------------

    pub fn recovery_status(&self) -> Result<RecoveryStatus> {
        match &*self.phase.lock() {
            Phase::Ready => Ok(RecoveryStatus::Ready),
            Phase::Recovering { plan, .. } => match plan.attempt(&self.keys)? {
                RecoveryAttempt::Waiting { awaiting, rejected } => {
                    Ok(RecoveryStatus::Recovering { awaiting, rejected })
                }
                RecoveryAttempt::Done(_) => Ok(RecoveryStatus::Recovering {
                    awaiting: Vec::new(),
                    rejected: Vec::new(),
                }),
            },
        }
    }

    /// Accepts a key resent after a restart. `proof` is the agent's
    /// signature over [`resend_proof_bytes`] for this boot's session.
    pub fn resend_key(&self, agent: AgentId, key: SymmetricKey, proof: &[u8]) -> Result<RecoveryStatus> {
        if self.is_poisoned() {
            return Err(Error::Poisoned);
        }
        let msg = resend_proof_bytes(&self.session_id(), agent, &key);
        {
            let mut phase = self.phase.lock();
            match &mut *phase {
                Phase::Ready => {
                    let a = self.agent(agent)?;
                    verify_signature(&a.public_key, &msg, proof)?;
                    self.keys.insert(agent, key);
                    drop(phase);
                    self.writer.lock().audit.refresh_index(&self.keys);
                    return Ok(RecoveryStatus::Ready);
                }
                Phase::Recovering { proofs, .. } => {
                    // The agent's public key is only known once the
                    // registry is back; the proof is checked then.
                    proofs.insert(agent, proof.to_vec());
                    self.keys.insert(agent, key);
                }
            }
        }
        self.try_finish_recovery()?;
        self.recovery_status()
    }

    fn try_finish_recovery(&self) -> Result<()> {
        let mut phase = self.phase.lock();
        let Phase::Recovering { plan, proofs } = &mut *phase else {
            return Ok(());
        };
        let registry = match plan.attempt(&self.keys)? {
            RecoveryAttempt::Done(reg) => reg,
            RecoveryAttempt::Waiting { rejected, .. } => {
                for agent in rejected {
                    self.keys.remove(agent);
                    proofs.remove(&agent);
                }
                return Ok(());
            }
        };
        let session = self.session_id();
        for (agent, proof) in std::mem::take(proofs) {
            let ok = registry.agent(agent).ok().and_then(|a| {
                let key = self.keys.get(agent)?;
                verify_signature(&a.public_key, &resend_proof_bytes(&session, agent, &key), &proof).ok()
            });
            if ok.is_none() {
                tracing::warn!(agent = agent.0, "dropping resent key with an invalid proof");
                self.keys.remove(agent);
            }
        }
        let last_lsn = plan.last_lsn();
        let live = registry.live_blobs();
        *self.registry.write() = registry;
        *phase = Phase::Ready;
        drop(phase);
        self.blobs.sweep(&live)?;
        let mut w = self.writer.lock();
        w.audit.refresh_index(&self.keys);
        if last_lsn > 0 {
            self.log(&mut w, STATION_AGENT, LogPayload::Recovered { last_lsn })?;
        }
        Ok(())
    }

    /// Writes a checkpoint whose data key is wrapped under `m` agents' keys
    /// and truncates the EWAL behind it.
    pub fn checkpoint(&self, m: Option<usize>, selection: SlotSelection) -> Result<CheckpointInfo> {
        self.ready()?;
        let mut w = self.writer.lock();
        let reg = self.registry.read();
        let covered_lsn = w.ewal.next_lsn() - 1;
        let slots: Vec<(AgentId, SymmetricKey)> = if self.config.mode.encrypts() {
            let candidates: Vec<AgentId> = match &selection {
                SlotSelection::LowestIds => reg
                    .state()
                    .agents
                    .values()
                    .filter(|a| a.keyed && self.keys.contains(a.id))
                    .map(|a| a.id)
                    .collect(),
                SlotSelection::Explicit(list) => list.clone(),
            };
            let m = m.unwrap_or_else(|| default_slot_count(candidates.len()));
            if m == 0 || candidates.len() < m {
                return Err(Error::CheckpointRefused(format!(
                    "{m} key slots requested but {} keys available",
                    candidates.len()
                )));
            }
            candidates
                .into_iter()
                .take(m)
                .map(|a| {
                    self.keys
                        .get(a)
                        .map(|k| (a, k))
                        .ok_or_else(|| Error::CheckpointRefused(format!("no key held for agent {a}")))
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let id = w.next_checkpoint;
        // Sealed in memory before anything touches disk.
        let file = CheckpointFile::seal(id, covered_lsn, &reg.encode_state(), &slots);
        drop(reg);
        file.write(&Self::checkpoint_path(self.storage_root()), self.config.fsync)
            .map_err(|e| self.poison(e))?;
        w.next_checkpoint += 1;
        if self.config.faults.crash_before_truncate {
            return Err(self.poison(Error::InjectedCrash));
        }
        w.ewal.truncate_through(covered_lsn).map_err(|e| self.poison(e))?;
        self.log(&mut w, STATION_AGENT, LogPayload::Checkpoint { id, covered_lsn })?;
        Ok(CheckpointInfo {
            id,
            covered_lsn,
            slots: slots.into_iter().map(|(a, _)| a).collect(),
        })
    }

    /// Last lsn written to the EWAL.
    pub fn last_lsn(&self) -> u64 {
        self.writer.lock().ewal.next_lsn() - 1
    }

    #[doc(hidden)]
    pub fn ewal_scan(&self) -> Result<Option<EwalScan>> {
        scan_ewal(&Self::ewal_path(self.storage_root()))
    }
}

impl Drop for Station {
    fn drop(&mut self) {
        if self.config.sandbox_base.is_none() && self.sandbox_base.starts_with("/dev/shm") {
            let _ = std::fs::remove_dir_all(&self.sandbox_base);
        }
    }
}
