//! Domain vocabulary shared by every station module: agents, data
//! elements, functions, policies, intents and contracts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

/// Station-wide agent identifier. Assigned monotonically, never reused.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgentId(pub u64);

/// The station itself. Owns the audit log and attributes bootstrap events.
pub const STATION_AGENT: AgentId = AgentId(0);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "agent#{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DeId(pub u64);

/// The audit log is itself a data element owned by the station. It never
/// appears in the data-element table and can never be delivered by `invoke`.
pub const AUDIT_LOG_DE: DeId = DeId(0);

impl fmt::Display for DeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "de#{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FunctionId(String);

/// Name of the station-provided log reader that owner policies and operator
/// contracts refer to.
pub const AUDIT_READ_FUNCTION: &str = "station.read_log";

impl FunctionId {
    pub fn new(name: impl Into<String>) -> Self {
        FunctionId(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn audit_read() -> Self {
        FunctionId::new(AUDIT_READ_FUNCTION)
    }
}

impl fmt::Display for FunctionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for FunctionId {
    fn from(s: &str) -> Self {
        FunctionId::new(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InvocationId(pub u64);

impl fmt::Display for InvocationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "inv#{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ContractId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Owner,
    User,
    Operator,
}

/// Non-empty set of roles held by one agent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RoleSet(u8);

impl RoleSet {
    const OWNER: u8 = 1;
    const USER: u8 = 2;
    const OPERATOR: u8 = 4;

    pub fn empty() -> Self {
        RoleSet(0)
    }

    pub fn of(roles: &[Role]) -> Self {
        roles.iter().fold(RoleSet::empty(), |set, r| set.with(*r))
    }

    fn bit(role: Role) -> u8 {
        match role {
            Role::Owner => Self::OWNER,
            Role::User => Self::USER,
            Role::Operator => Self::OPERATOR,
        }
    }

    pub fn with(self, role: Role) -> Self {
        RoleSet(self.0 | Self::bit(role))
    }

    pub fn contains(self, role: Role) -> bool {
        self.0 & Self::bit(role) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn roles(self) -> Vec<Role> {
        [Role::Owner, Role::User, Role::Operator]
            .into_iter()
            .filter(|r| self.contains(*r))
            .collect()
    }
}

/// Ed25519 verifying key bytes.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PublicKey(pub [u8; 32]);

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", hex::encode(&self.0[..8]))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Agent {
    pub id: AgentId,
    pub display_name: String,
    pub roles: RoleSet,
    pub public_key: PublicKey,
    /// Whether a symmetric key was supplied at registration. The key
    /// itself only ever lives in the volatile key manager, under the
    /// agent's id.
    pub keyed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DeKind {
    Registered,
    Derived,
}

/// The only modes a data element can be stored in. "Open" is never stored:
/// a DE is open for an agent by virtue of a matching policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StoredMode {
    Sealed,
    Enclave,
}

impl std::str::FromStr for StoredMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sealed" => Ok(StoredMode::Sealed),
            "enclave" => Ok(StoredMode::Enclave),
            other => Err(format!("unknown sharing mode `{other}` (expected sealed|enclave)")),
        }
    }
}

/// Sharing mode of a DE as seen by one agent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SharingMode {
    Sealed,
    Enclave,
    Open { grantee: AgentId, function: FunctionId },
}

/// Content-addressed blob name inside the storage root.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StorageRef(pub String);

pub type Digest = [u8; 32];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataElement {
    pub id: DeId,
    pub owner: AgentId,
    pub kind: DeKind,
    pub stored_mode: StoredMode,
    pub storage_ref: Option<StorageRef>,
    /// Agent whose symmetric key encrypts the stored bytes. `None` in
    /// full-trust mode, where blobs are stored as-is.
    pub enc_key: Option<AgentId>,
    pub content_digest: Digest,
    pub size: u64,
}

/// Permission triple written by a DE owner.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Policy {
    pub agent: AgentId,
    pub function: FunctionId,
    pub de: DeId,
    pub created_at: u64,
}

/// An (agent, function, DE) triple, the shape shared by policies and intents.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AccessTriple {
    pub agent: AgentId,
    pub function: FunctionId,
    pub de: DeId,
}

impl AccessTriple {
    pub fn new(agent: AgentId, function: FunctionId, de: DeId) -> Self {
        AccessTriple {
            agent,
            function,
            de,
        }
    }
}

/// Attempted access created by the gatekeeper for one invocation.
///
/// Only [`crate::broker::PolicyBroker::intent`] constructs intents; it refuses
/// sealed DEs that lack a covering policy.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intent {
    pub(crate) triple: AccessTriple,
    pub(crate) invocation: InvocationId,
}

impl Intent {
    pub fn triple(&self) -> &AccessTriple {
        &self.triple
    }

    pub fn invocation(&self) -> InvocationId {
        self.invocation
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchDecision {
    Match,
    Mismatch,
}

/// A proposed operator policy on the audit log that only takes effect once
/// every agent registered at proposal time has signed it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contract {
    pub id: ContractId,
    pub operator: AgentId,
    pub function: FunctionId,
    pub de: DeId,
    pub required: BTreeSet<AgentId>,
    pub signatures: BTreeMap<AgentId, Vec<u8>>,
}

impl Contract {
    /// Bytes every participant signs.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = b"station-contract-v1".to_vec();
        out.extend_from_slice(&self.id.0.to_be_bytes());
        out.extend_from_slice(&self.operator.0.to_be_bytes());
        out.extend_from_slice(&(self.function.as_str().len() as u32).to_be_bytes());
        out.extend_from_slice(self.function.as_str().as_bytes());
        out.extend_from_slice(&self.de.0.to_be_bytes());
        out
    }

    pub fn missing_signers(&self) -> Vec<AgentId> {
        self.required
            .iter()
            .filter(|a| !self.signatures.contains_key(a))
            .copied()
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.missing_signers().is_empty()
    }
}

/// Links a derived DE to the DEs its producing invocation actually read.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub output_de: DeId,
    pub inputs: BTreeSet<DeId>,
    pub function: FunctionId,
    pub invocation: InvocationId,
}

/// A derived result held in the staging zone until every contributing
/// enclave owner approves it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagedResult {
    pub de: DeId,
    pub requester: AgentId,
    pub function: FunctionId,
    pub invocation: InvocationId,
    /// Uncovered registered DEs, grouped by owner, that must be approved.
    pub pending: BTreeMap<AgentId, BTreeSet<DeId>>,
    pub approved: BTreeSet<AgentId>,
}

impl StagedResult {
    pub fn pending_owners(&self) -> BTreeSet<AgentId> {
        self.pending
            .keys()
            .filter(|o| !self.approved.contains(o))
            .copied()
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReleaseDecision {
    Grant,
    Deny,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FunctionKind {
    DataAware,
    DataBlind,
}

/// Station-wide deployment mode, fixed at boot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrustMode {
    FullTrust,
    NearZeroTrust,
}

impl TrustMode {
    pub fn encrypts(self) -> bool {
        self == TrustMode::NearZeroTrust
    }
}

impl std::str::FromStr for TrustMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full-trust" | "full" => Ok(TrustMode::FullTrust),
            "near-zero-trust" | "nzt" => Ok(TrustMode::NearZeroTrust),
            other => Err(format!("unknown trust mode `{other}` (expected full-trust|near-zero-trust)")),
        }
    }
}

impl fmt::Display for TrustMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrustMode::FullTrust => "full-trust",
            TrustMode::NearZeroTrust => "near-zero-trust",
        })
    }
}
