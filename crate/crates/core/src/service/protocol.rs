//! Request and response types carried over the secure channel.
//!
//! Messages are bincode-encoded (little-endian, fixed-width integers).
//! Every request travels in an [`Envelope`] signed by the agent's Ed25519
//! key; see `docs/wire-protocol.md`.

use serde::{Deserialize, Serialize};

use crate::audit::{ChainStatus, LogView};
use crate::crypto::{AttestationReport, SignedCiphertext, WrappedKey};
use crate::error::{Error, ErrorClass, Result};
use crate::functions::FunctionSummary;
use crate::gatekeeper::{Delivery, InvokeResult, ProvenanceClosure};
use crate::model::{
    AgentId, Contract, ContractId, DeId, FunctionId, Policy, PublicKey, ReleaseDecision, Role,
    StagedResult, StoredMode, TrustMode,
};
use crate::registry::ReleaseOutcome;
use crate::station::{CheckpointInfo, RecoveryStatus};

pub const PROTOCOL_VERSION: u32 = 1;

/// Proof of a login, bound to one station boot.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionToken {
    pub agent: AgentId,
    /// Unix seconds after which the token is refused.
    pub expires_at: u64,
    pub nonce: [u8; 16],
    /// HMAC-SHA256 under the station's per-boot session secret.
    pub mac: [u8; 32],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Request {
    Attest {
        nonce: Vec<u8>,
    },
    Challenge {
        agent: AgentId,
    },
    Login {
        agent: AgentId,
        signature: Vec<u8>,
    },
    /// Self-registration. The envelope must be signed by `public_key`.
    /// Operators additionally need the admin's approval signature.
    RegisterAgent {
        name: String,
        roles: Vec<Role>,
        public_key: PublicKey,
        wrapped_key: Option<WrappedKey>,
        admin_approval: Option<Vec<u8>>,
    },
    RegisterDe {
        upload: SignedCiphertext,
        mode: StoredMode,
    },
    CreatePolicy {
        grantee: AgentId,
        function: FunctionId,
        de: DeId,
    },
    DeletePolicy {
        grantee: AgentId,
        function: FunctionId,
        de: DeId,
    },
    ListPolicies,
    ListFunctions,
    /// `params` is a JSON object of primitive values.
    Invoke {
        function: FunctionId,
        params: String,
        des: Option<Vec<DeId>>,
    },
    InvokeCoveredOnly {
        function: FunctionId,
        params: String,
    },
    PendingApprovals,
    ApproveRelease {
        de: DeId,
        decision: ReleaseDecision,
    },
    PendingDeliveries,
    FetchReleased {
        de: DeId,
    },
    ProvenanceOf {
        de: DeId,
    },
    ReadOwnerLog,
    ProposeContract,
    GetContract {
        contract: ContractId,
    },
    SignContract {
        contract: ContractId,
        signature: Vec<u8>,
    },
    ReadOperatorLog,
    ResendKey {
        agent: AgentId,
        wrapped_key: WrappedKey,
        proof: Vec<u8>,
    },
    RecoveryStatus,
    AdminCheckpoint {
        slots: Option<usize>,
    },
    VerifyAuditChain,
}

impl Request {
    pub fn name(&self) -> &'static str {
        match self {
            Request::Attest { .. } => "attest",
            Request::Challenge { .. } => "challenge",
            Request::Login { .. } => "login",
            Request::RegisterAgent { .. } => "register_agent",
            Request::RegisterDe { .. } => "register_de",
            Request::CreatePolicy { .. } => "create_policy",
            Request::DeletePolicy { .. } => "delete_policy",
            Request::ListPolicies => "list_policies",
            Request::ListFunctions => "list_functions",
            Request::Invoke { .. } => "invoke",
            Request::InvokeCoveredOnly { .. } => "invoke_covered_only",
            Request::PendingApprovals => "pending_approvals",
            Request::ApproveRelease { .. } => "approve_release",
            Request::PendingDeliveries => "pending_deliveries",
            Request::FetchReleased { .. } => "fetch_released",
            Request::ProvenanceOf { .. } => "provenance_of",
            Request::ReadOwnerLog => "read_owner_log",
            Request::ProposeContract => "propose_contract",
            Request::GetContract { .. } => "get_contract",
            Request::SignContract { .. } => "sign_contract",
            Request::ReadOperatorLog => "read_operator_log",
            Request::ResendKey { .. } => "resend_key",
            Request::RecoveryStatus => "recovery_status",
            Request::AdminCheckpoint { .. } => "admin_checkpoint",
            Request::VerifyAuditChain => "verify_audit_chain",
        }
    }

    /// Requests accepted without a session.
    pub fn is_public(&self) -> bool {
        matches!(
            self,
            Request::Attest { .. }
                | Request::Challenge { .. }
                | Request::Login { .. }
                | Request::RegisterAgent { .. }
                | Request::ResendKey { .. }
                | Request::RecoveryStatus
        )
    }
}

/// A signed request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub version: u32,
    pub session: Option<SessionToken>,
    /// Strictly increasing per session.
    pub counter: u64,
    pub request: Request,
    pub signature: Vec<u8>,
}

impl Envelope {
    /// Bytes covered by `signature`.
    pub fn signed_bytes(version: u32, session: &Option<SessionToken>, counter: u64, request: &Request) -> Vec<u8> {
        let mut out = b"station-envelope-v1".to_vec();
        out.extend_from_slice(&version.to_be_bytes());
        out.extend(encode(session));
        out.extend_from_slice(&counter.to_be_bytes());
        out.extend(encode(request));
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reply {
    Attestation { report: AttestationReport, mode: TrustMode },
    Challenge { nonce: [u8; 32] },
    Session(SessionToken),
    Agent(AgentId),
    De(DeId),
    Policy(Policy),
    Policies(Vec<Policy>),
    Deleted(bool),
    Functions(Vec<FunctionSummary>),
    Invoked(InvokeResult),
    Approvals(Vec<StagedResult>),
    Release(ReleaseOutcome),
    Deliveries(Vec<DeId>),
    Delivery(Delivery),
    Provenance(ProvenanceClosure),
    Log(Vec<LogView>),
    Contract(Contract),
    Recovery(RecoveryStatus),
    Checkpoint(CheckpointInfo),
    Chain(ChainStatus),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Response {
    Ok(Reply),
    Err { class: ErrorClass, message: String },
}

impl Response {
    pub fn from_result(r: Result<Reply>) -> Self {
        match r {
            Ok(reply) => Response::Ok(reply),
            Err(e) => Response::Err {
                class: e.class(),
                message: e.to_string(),
            },
        }
    }

    pub fn into_result(self) -> Result<Reply> {
        match self {
            Response::Ok(r) => Ok(r),
            Response::Err { class, message } => Err(Error::Remote { class, message }),
        }
    }
}

pub fn encode<T: Serialize>(v: &T) -> Vec<u8> {
    bincode::serialize(v).expect("protocol types always serialize")
}

pub fn decode<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    bincode::deserialize(bytes).map_err(|e| Error::Encoding(format!("malformed message: {e}")))
}
