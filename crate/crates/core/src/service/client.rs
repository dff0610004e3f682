//! Agent-side client: attestation, login and signed requests over any
//! [`Transport`].

use std::net::{TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::channel::{ChannelPeer, SecureChannel};
use super::protocol::{decode, encode, Envelope, Reply, Request, Response, SessionToken, PROTOCOL_VERSION};
use super::{login_bytes, Service};
use crate::crypto::{
    resend_proof_bytes, software_digest, wrap_key_for_station, SignedCiphertext, SigningIdentity, SymmetricKey,
    VerifiedStation,
};
use crate::error::{Error, Result};
use crate::gatekeeper::{Delivery, InvokeResult};
use crate::model::{AgentId, DeId, FunctionId, Policy, PublicKey, Role, StoredMode, TrustMode};
use crate::station::RecoveryStatus;

pub trait Transport: Send {
    fn round_trip(&mut self, request: &[u8]) -> Result<Vec<u8>>;

    /// Station identity learned from the transport itself, if any.
    fn peer(&self) -> Option<ChannelPeer> {
        None
    }
}

/// In-process transport. Messages still go through the wire encoding.
pub struct LocalTransport(pub Arc<Service>);

impl Transport for LocalTransport {
    fn round_trip(&mut self, request: &[u8]) -> Result<Vec<u8>> {
        Ok(self.0.handle_bytes(request))
    }
}

pub struct TcpTransport {
    channel: SecureChannel,
    peer: ChannelPeer,
}

impl TcpTransport {
    pub fn connect(addr: impl ToSocketAddrs, pinned: Option<&PublicKey>) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        let (channel, peer) = SecureChannel::connect(stream, pinned)?;
        Ok(TcpTransport { channel, peer })
    }
}

impl Transport for TcpTransport {
    fn round_trip(&mut self, request: &[u8]) -> Result<Vec<u8>> {
        self.channel.send(request)?;
        self.channel
            .recv()?
            .ok_or_else(|| Error::Io(std::io::ErrorKind::UnexpectedEof.into()))
    }

    fn peer(&self) -> Option<ChannelPeer> {
        Some(self.peer)
    }
}

/// Long-lived agent secrets, stored as JSON with hex fields.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Credentials {
    pub agent: Option<AgentId>,
    pub signing_seed: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
}

impl Credentials {
    pub fn generate(with_key: bool) -> Self {
        Credentials {
            agent: None,
            signing_seed: hex::encode(SigningIdentity::generate().seed()),
            key: with_key.then(|| hex::encode(SymmetricKey::generate().as_bytes())),
        }
    }

    pub fn signer(&self) -> Result<SigningIdentity> {
        let raw = hex::decode(&self.signing_seed).map_err(|e| Error::Invalid(format!("signing seed: {e}")))?;
        let seed: [u8; 32] = raw
            .try_into()
            .map_err(|_| Error::Invalid("signing seed must be 32 bytes".into()))?;
        Ok(SigningIdentity::from_seed(seed))
    }

    pub fn symmetric_key(&self) -> Result<Option<SymmetricKey>> {
        self.key
            .as_deref()
            .map(|k| {
                let raw = hex::decode(k).map_err(|e| Error::Invalid(format!("key: {e}")))?;
                SymmetricKey::from_slice(&raw)
            })
            .transpose()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_vec_pretty(self)?;
        write_private(path, &body)
    }
}

#[cfg(unix)]
fn write_private(path: &Path, body: &[u8]) -> Result<()> {
    use std::io::Write;
    use std::os::unix::fs::OpenOptionsExt;
    let mut f = std::fs::OpenOptions::new()
        .write(true)
        .create(true)
        .truncate(true)
        .mode(0o600)
        .open(path)?;
    f.write_all(body)?;
    Ok(())
}

#[cfg(not(unix))]
fn write_private(path: &Path, body: &[u8]) -> Result<()> {
    std::fs::write(path, body)?;
    Ok(())
}

pub struct Client<T: Transport> {
    transport: T,
    station: Option<(VerifiedStation, TrustMode)>,
    session: Option<SessionToken>,
    signer: Option<SigningIdentity>,
    counter: u64,
}

impl<T: Transport> Client<T> {
    pub fn new(transport: T) -> Self {
        Client {
            transport,
            station: None,
            session: None,
            signer: None,
            counter: 0,
        }
    }

    fn exchange(&mut self, env: &Envelope) -> Result<Reply> {
        let bytes = self.transport.round_trip(&encode(env))?;
        decode::<Response>(&bytes)?.into_result()
    }

    fn unsigned(&mut self, request: Request) -> Result<Reply> {
        self.exchange(&Envelope {
            version: PROTOCOL_VERSION,
            session: None,
            counter: 0,
            request,
            signature: Vec::new(),
        })
    }

    fn signed(&mut self, request: Request, signer: &SigningIdentity, session: Option<SessionToken>) -> Result<Reply> {
        self.counter += 1;
        let sig = signer.sign(&Envelope::signed_bytes(PROTOCOL_VERSION, &session, self.counter, &request));
        self.exchange(&Envelope {
            version: PROTOCOL_VERSION,
            session,
            counter: self.counter,
            request,
            signature: sig,
        })
    }

    /// Verifies a fresh attestation report against the build digest this
    /// client was compiled with, and against the channel's station key.
    pub fn attest(&mut self) -> Result<(VerifiedStation, TrustMode)> {
        let mut nonce = vec![0u8; 32];
        rand::rngs::OsRng.fill_bytes(&mut nonce);
        let Reply::Attestation { report, mode } = self.unsigned(Request::Attest { nonce: nonce.clone() })? else {
            return Err(unexpected("attest"));
        };
        let v = report.verify(&nonce, &software_digest())?;
        if let Some(peer) = self.transport.peer() {
            if peer.station_public != v.station_public || peer.session_id != v.session_id {
                return Err(Error::Authentication("attestation does not match the channel".into()));
            }
        }
        self.station = Some((v, mode));
        Ok((v, mode))
    }

    fn verified(&mut self) -> Result<(VerifiedStation, TrustMode)> {
        match self.station {
            Some(s) => Ok(s),
            None => self.attest(),
        }
    }

    pub fn mode(&mut self) -> Result<TrustMode> {
        Ok(self.verified()?.1)
    }

    /// Self-registration. The key, if any, is wrapped to the attested
    /// station before it leaves the client.
    pub fn register(
        &mut self,
        name: &str,
        roles: &[Role],
        signer: &SigningIdentity,
        key: Option<&SymmetricKey>,
        admin_approval: Option<Vec<u8>>,
    ) -> Result<AgentId> {
        let (station, _) = self.verified()?;
        let wrapped_key =
            key.map(|k| wrap_key_for_station(&station.station_kx_public, &station.session_id, AgentId(0), k));
        let request = Request::RegisterAgent {
            name: name.to_string(),
            roles: roles.to_vec(),
            public_key: signer.public_key(),
            wrapped_key,
            admin_approval,
        };
        match self.signed(request, signer, None)? {
            Reply::Agent(id) => Ok(id),
            _ => Err(unexpected("register")),
        }
    }

    pub fn login(&mut self, agent: AgentId, signer: SigningIdentity) -> Result<()> {
        let (station, _) = self.verified()?;
        let Reply::Challenge { nonce } = self.unsigned(Request::Challenge { agent })? else {
            return Err(unexpected("challenge"));
        };
        let signature = signer.sign(&login_bytes(&station.session_id, agent, &nonce));
        let Reply::Session(token) = self.unsigned(Request::Login { agent, signature })? else {
            return Err(unexpected("login"));
        };
        self.session = Some(token);
        self.signer = Some(signer);
        self.counter = 0;
        Ok(())
    }

    pub fn agent(&self) -> Option<AgentId> {
        self.session.as_ref().map(|s| s.agent)
    }

    /// Sends a request in the current session.
    pub fn call(&mut self, request: Request) -> Result<Reply> {
        if request.is_public() {
            return self.unsigned(request);
        }
        let signer = self
            .signer
            .clone()
            .ok_or_else(|| Error::Authentication("log in first".into()))?;
        let session = self.session.clone();
        self.signed(request, &signer, session)
    }

    /// Resends a symmetric key to a restarted station.
    pub fn resend_key(&mut self, agent: AgentId, signer: &SigningIdentity, key: &SymmetricKey) -> Result<RecoveryStatus> {
        let (station, _) = self.attest()?;
        let wrapped_key = wrap_key_for_station(&station.station_kx_public, &station.session_id, agent, key);
        let proof = signer.sign(&resend_proof_bytes(&station.session_id, agent, key));
        match self.unsigned(Request::ResendKey {
            agent,
            wrapped_key,
            proof,
        })? {
            Reply::Recovery(s) => Ok(s),
            _ => Err(unexpected("resend_key")),
        }
    }

    pub fn recovery_status(&mut self) -> Result<RecoveryStatus> {
        match self.unsigned(Request::RecoveryStatus)? {
            Reply::Recovery(s) => Ok(s),
            _ => Err(unexpected("recovery_status")),
        }
    }

    /// Encrypts (in NZT mode), signs and registers `data`.
    pub fn upload(&mut self, data: &[u8], key: Option<&SymmetricKey>, mode: StoredMode) -> Result<DeId> {
        let trust = self.mode()?;
        let agent = self.agent().ok_or_else(|| Error::Authentication("log in first".into()))?;
        let signer = self.signer.clone().expect("set with the session");
        let upload = SignedCiphertext::for_mode(trust, agent, key, &signer, data);
        match self.call(Request::RegisterDe { upload, mode })? {
            Reply::De(id) => Ok(id),
            _ => Err(unexpected("register_de")),
        }
    }

    pub fn create_policy(&mut self, grantee: AgentId, function: &str, de: DeId) -> Result<Policy> {
        match self.call(Request::CreatePolicy {
            grantee,
            function: FunctionId::new(function),
            de,
        })? {
            Reply::Policy(p) => Ok(p),
            _ => Err(unexpected("create_policy")),
        }
    }

    pub fn invoke(&mut self, function: &str, params: &str, des: Option<Vec<DeId>>) -> Result<InvokeResult> {
        match self.call(Request::Invoke {
            function: FunctionId::new(function),
            params: params.to_string(),
            des,
        })? {
            Reply::Invoked(r) => Ok(r),
            _ => Err(unexpected("invoke")),
        }
    }

    pub fn fetch_released(&mut self, de: DeId) -> Result<Delivery> {
        match self.call(Request::FetchReleased { de })? {
            Reply::Delivery(d) => Ok(d),
            _ => Err(unexpected("fetch_released")),
        }
    }
}

/// Recovers the plaintext of a delivery addressed to `agent`.
pub fn open_delivery(agent: AgentId, key: Option<&SymmetricKey>, d: &Delivery) -> Result<Vec<u8>> {
    if !d.encrypted {
        return Ok(d.payload.clone());
    }
    let key = key.ok_or(Error::KeyRequired(agent))?;
    key.open(&crate::crypto::blob_aad(agent), &d.payload)
}

fn unexpected(op: &str) -> Error {
    Error::Encoding(format!("unexpected reply to {op}"))
}
