//! The station's request surface: session authentication, signed request
//! envelopes, and dispatch onto [`Station`] operations.

pub mod channel;
pub mod client;
pub mod protocol;

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use hmac::{Hmac, Mac};
use parking_lot::Mutex;
use rand::RngCore;
use sha2::Sha256;

use crate::crypto::{unwrap_key, verify_signature};
use crate::durability::SlotSelection;
use crate::error::{Error, Result};
use crate::functions::Params;
use crate::model::{AgentId, PublicKey, Role, RoleSet, STATION_AGENT};
use crate::station::{NewAgent, Station};

pub use protocol::{Envelope, Reply, Request, Response, SessionToken, PROTOCOL_VERSION};

/// The admin authenticates as this id with the configured admin key.
pub const ADMIN_AGENT: AgentId = STATION_AGENT;

/// Bytes an agent signs to answer a login challenge.
pub fn login_bytes(session_id: &[u8; 16], agent: AgentId, nonce: &[u8; 32]) -> Vec<u8> {
    let mut out = b"station-login-v1".to_vec();
    out.extend_from_slice(session_id);
    out.extend_from_slice(&agent.0.to_be_bytes());
    out.extend_from_slice(nonce);
    out
}

/// Bytes the admin signs to let `operator` register with the operator role.
pub fn operator_approval_bytes(operator: &PublicKey) -> Vec<u8> {
    let mut out = b"station-operator-approval-v1".to_vec();
    out.extend_from_slice(&operator.0);
    out
}

pub fn parse_params(json: &str) -> Result<Params> {
    if json.trim().is_empty() {
        return Ok(Params::new());
    }
    serde_json::from_str(json).map_err(|e| Error::Invalid(format!("params: {e}")))
}

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub admin_public_key: Option<PublicKey>,
    pub session_ttl: Duration,
    pub challenge_ttl: Duration,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            admin_public_key: None,
            session_ttl: Duration::from_secs(3600),
            challenge_ttl: Duration::from_secs(60),
        }
    }
}

pub struct Service {
    station: Arc<Station>,
    config: ServiceConfig,
    session_secret: [u8; 32],
    challenges: Mutex<HashMap<AgentId, ([u8; 32], Instant)>>,
    counters: Mutex<HashMap<[u8; 16], u64>>,
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl Service {
    pub fn new(station: Arc<Station>, config: ServiceConfig) -> Self {
        let mut session_secret = [0u8; 32];
        rand::rngs::OsRng.fill_bytes(&mut session_secret);
        Service {
            station,
            config,
            session_secret,
            challenges: Mutex::new(HashMap::new()),
            counters: Mutex::new(HashMap::new()),
        }
    }

    pub fn station(&self) -> &Arc<Station> {
        &self.station
    }

    fn mac(&self, agent: AgentId, expires_at: u64, nonce: &[u8; 16]) -> [u8; 32] {
        let mut m = Hmac::<Sha256>::new_from_slice(&self.session_secret).expect("any key length");
        m.update(b"station-session-v1");
        m.update(&self.station.session_id());
        m.update(&agent.0.to_be_bytes());
        m.update(&expires_at.to_be_bytes());
        m.update(nonce);
        m.finalize().into_bytes().into()
    }

    fn public_key_of(&self, agent: AgentId) -> Result<PublicKey> {
        if agent == ADMIN_AGENT {
            return self
                .config
                .admin_public_key
                .ok_or_else(|| Error::Authentication("no admin key configured".into()));
        }
        self.station
            .agent(agent)
            .map(|a| a.public_key)
            .map_err(|_| Error::Authentication(format!("unknown agent {agent}")))
    }

    /// Decodes, authenticates and executes one encoded envelope.
    pub fn handle_bytes(&self, bytes: &[u8]) -> Vec<u8> {
        let response = match protocol::decode::<Envelope>(bytes) {
            Ok(env) => self.handle(env),
            Err(e) => Response::from_result(Err(Error::Invalid(e.to_string()))),
        };
        protocol::encode(&response)
    }

    pub fn handle(&self, env: Envelope) -> Response {
        let op = env.request.name();
        let r = self.authenticate(&env).and_then(|caller| self.dispatch(caller, env.request));
        if let Err(e) = &r {
            tracing::debug!(op, "request failed: {e}");
        }
        Response::from_result(r)
    }

    /// Returns the session's agent, or `None` for public requests.
    fn authenticate(&self, env: &Envelope) -> Result<Option<AgentId>> {
        if env.version != PROTOCOL_VERSION {
            return Err(Error::Invalid(format!("unsupported protocol version {}", env.version)));
        }
        let signed = Envelope::signed_bytes(env.version, &env.session, env.counter, &env.request);
        if let Request::RegisterAgent { public_key, .. } = &env.request {
            verify_signature(public_key, &signed, &env.signature)?;
            return Ok(None);
        }
        if env.request.is_public() {
            return Ok(None);
        }
        let token = env
            .session
            .as_ref()
            .ok_or_else(|| Error::Authentication("a session is required".into()))?;
        if token.mac != self.mac(token.agent, token.expires_at, &token.nonce) {
            return Err(Error::Authentication("invalid session token".into()));
        }
        if token.expires_at < now_secs() {
            return Err(Error::Authentication("session expired".into()));
        }
        verify_signature(&self.public_key_of(token.agent)?, &signed, &env.signature)?;
        let mut counters = self.counters.lock();
        let last = counters.entry(token.nonce).or_insert(0);
        if env.counter <= *last {
            return Err(Error::Authentication("replayed request".into()));
        }
        *last = env.counter;
        Ok(Some(token.agent))
    }

    fn dispatch(&self, caller: Option<AgentId>, req: Request) -> Result<Reply> {
        let st = &self.station;
        let me = || caller.ok_or_else(|| Error::Authentication("a session is required".into()));
        let agent_only = || match caller {
            Some(ADMIN_AGENT) => Err(Error::Unauthorized("the admin session cannot do this".into())),
            Some(a) => Ok(a),
            None => Err(Error::Authentication("a session is required".into())),
        };
        let admin_only = || match caller {
            Some(ADMIN_AGENT) => Ok(()),
            _ => Err(Error::Unauthorized("admin only".into())),
        };
        match req {
            Request::Attest { nonce } => Ok(Reply::Attestation {
                report: st.attest(&nonce),
                mode: st.mode(),
            }),
            Request::Challenge { agent } => {
                self.public_key_of(agent)?;
                let mut nonce = [0u8; 32];
                rand::rngs::OsRng.fill_bytes(&mut nonce);
                self.challenges.lock().insert(agent, (nonce, Instant::now()));
                Ok(Reply::Challenge { nonce })
            }
            Request::Login { agent, signature } => {
                let (nonce, at) = self
                    .challenges
                    .lock()
                    .remove(&agent)
                    .ok_or_else(|| Error::Authentication("no outstanding challenge".into()))?;
                if at.elapsed() > self.config.challenge_ttl {
                    return Err(Error::Authentication("challenge expired".into()));
                }
                verify_signature(
                    &self.public_key_of(agent)?,
                    &login_bytes(&st.session_id(), agent, &nonce),
                    &signature,
                )?;
                let mut tnonce = [0u8; 16];
                rand::rngs::OsRng.fill_bytes(&mut tnonce);
                let expires_at = now_secs() + self.config.session_ttl.as_secs();
                Ok(Reply::Session(SessionToken {
                    agent,
                    expires_at,
                    nonce: tnonce,
                    mac: self.mac(agent, expires_at, &tnonce),
                }))
            }
            Request::RegisterAgent {
                name,
                roles,
                public_key,
                wrapped_key,
                admin_approval,
            } => {
                let roles = RoleSet::of(&roles);
                if roles.contains(Role::Operator) {
                    let admin = self
                        .config
                        .admin_public_key
                        .ok_or_else(|| Error::Unauthorized("operators need an admin, and none is configured".into()))?;
                    let sig = admin_approval
                        .ok_or_else(|| Error::Unauthorized("operator registration needs admin approval".into()))?;
                    verify_signature(&admin, &operator_approval_bytes(&public_key), &sig)
                        .map_err(|_| Error::Unauthorized("admin approval does not verify".into()))?;
                }
                let key = wrapped_key
                    .map(|w| unwrap_key(st.identity(), AgentId(0), &w))
                    .transpose()?;
                Ok(Reply::Agent(st.register_agent(NewAgent {
                    name,
                    roles,
                    public_key,
                    key,
                })?))
            }
            Request::RegisterDe { upload, mode } => Ok(Reply::De(st.register_de(agent_only()?, &upload, mode)?)),
            Request::CreatePolicy { grantee, function, de } => {
                Ok(Reply::Policy(st.create_policy(agent_only()?, grantee, function, de)?))
            }
            Request::DeletePolicy { grantee, function, de } => {
                Ok(Reply::Deleted(st.delete_policy(agent_only()?, grantee, function, de)?))
            }
            Request::ListPolicies => Ok(Reply::Policies(st.policies_for(agent_only()?))),
            Request::ListFunctions => {
                me()?;
                Ok(Reply::Functions(st.list_functions()))
            }
            Request::Invoke { function, params, des } => Ok(Reply::Invoked(st.invoke(
                agent_only()?,
                &function,
                parse_params(&params)?,
                des,
            )?)),
            Request::InvokeCoveredOnly { function, params } => Ok(Reply::Invoked(st.invoke_covered_only(
                agent_only()?,
                &function,
                parse_params(&params)?,
            )?)),
            Request::PendingApprovals => Ok(Reply::Approvals(st.pending_approvals(agent_only()?))),
            Request::ApproveRelease { de, decision } => {
                Ok(Reply::Release(st.approve_release(agent_only()?, de, decision)?))
            }
            Request::PendingDeliveries => Ok(Reply::Deliveries(
                st.pending_deliveries(agent_only()?).into_iter().collect(),
            )),
            Request::FetchReleased { de } => Ok(Reply::Delivery(st.fetch_released(agent_only()?, de)?)),
            Request::ProvenanceOf { de } => {
                me()?;
                Ok(Reply::Provenance(st.provenance_of(de)?))
            }
            Request::ReadOwnerLog => Ok(Reply::Log(st.read_owner_log(agent_only()?)?)),
            Request::ProposeContract => Ok(Reply::Contract(st.propose_contract(agent_only()?)?)),
            Request::GetContract { contract } => {
                me()?;
                Ok(Reply::Contract(st.contract(contract)?))
            }
            Request::SignContract { contract, signature } => {
                Ok(Reply::Contract(st.sign_contract(agent_only()?, contract, &signature)?))
            }
            Request::ReadOperatorLog => Ok(Reply::Log(st.read_operator_log(agent_only()?)?)),
            Request::ResendKey {
                agent,
                wrapped_key,
                proof,
            } => {
                let key = unwrap_key(st.identity(), agent, &wrapped_key)?;
                Ok(Reply::Recovery(st.resend_key(agent, key, &proof)?))
            }
            Request::RecoveryStatus => Ok(Reply::Recovery(st.recovery_status()?)),
            Request::AdminCheckpoint { slots } => {
                admin_only()?;
                Ok(Reply::Checkpoint(st.checkpoint(slots, SlotSelection::LowestIds)?))
            }
            Request::VerifyAuditChain => {
                admin_only()?;
                Ok(Reply::Chain(st.verify_audit_chain()?))
            }
        }
    }
}
