//! Transport of agent symmetric keys to an attested station.

use hkdf::Hkdf;
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use super::{StationIdentity, SymmetricKey, KEY_LEN};
use crate::error::{Error, Result};
use crate::model::AgentId;

/// A symmetric key encrypted to the station's per-boot X25519 key.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WrappedKey {
    pub ephemeral_public: [u8; 32],
    pub sealed: Vec<u8>,
}

fn transport_key(shared: &[u8; 32], ephemeral: &[u8; 32], session_id: &[u8; 16]) -> SymmetricKey {
    let hk = Hkdf::<Sha256>::new(Some(session_id), shared);
    let mut okm = [0u8; KEY_LEN];
    let mut info = b"station-key-transport-v1".to_vec();
    info.extend_from_slice(ephemeral);
    hk.expand(&info, &mut okm)
        .expect("32 bytes is a valid hkdf-sha256 output length");
    SymmetricKey::from_bytes(okm)
}

fn transport_aad(agent: AgentId) -> Vec<u8> {
    let mut aad = b"station-key-transport-v1".to_vec();
    aad.extend_from_slice(&agent.0.to_be_bytes());
    aad
}

/// Agent side: encrypt `key` to the station identified by an attestation
/// report. `agent` is `AgentId(0)` when the id is not yet assigned.
pub fn wrap_key_for_station(
    station_kx_public: &[u8; 32],
    session_id: &[u8; 16],
    agent: AgentId,
    key: &SymmetricKey,
) -> WrappedKey {
    let eph = x25519_dalek::EphemeralSecret::random_from_rng(rand::rngs::OsRng);
    let eph_pub = x25519_dalek::PublicKey::from(&eph).to_bytes();
    let shared = eph.diffie_hellman(&x25519_dalek::PublicKey::from(*station_kx_public));
    let tk = transport_key(shared.as_bytes(), &eph_pub, session_id);
    WrappedKey {
        ephemeral_public: eph_pub,
        sealed: tk.seal(&transport_aad(agent), key.as_bytes()),
    }
}

/// Station side inverse of [`wrap_key_for_station`].
pub fn unwrap_key(station: &StationIdentity, agent: AgentId, wrapped: &WrappedKey) -> Result<SymmetricKey> {
    let shared = station
        .kx_secret()
        .diffie_hellman(&x25519_dalek::PublicKey::from(wrapped.ephemeral_public));
    let tk = transport_key(shared.as_bytes(), &wrapped.ephemeral_public, &station.session_id());
    let raw = tk
        .open(&transport_aad(agent), &wrapped.sealed)
        .map_err(|_| Error::Integrity("wrapped key does not open for this station session".into()))?;
    SymmetricKey::from_slice(&raw)
}

/// Message an agent signs to bind a resent key to its identity and to the
/// current station boot.
pub fn resend_proof_bytes(session_id: &[u8; 16], agent: AgentId, key: &SymmetricKey) -> Vec<u8> {
    let mut out = b"station-resend-v1".to_vec();
    out.extend_from_slice(session_id);
    out.extend_from_slice(&agent.0.to_be_bytes());
    out.extend_from_slice(&key.fingerprint());
    out
}
