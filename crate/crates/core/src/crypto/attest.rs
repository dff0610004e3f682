//! Software stand-in for hardware remote attestation.
//!
//! The station holds a freshly generated identity per boot. A report is a
//! signature over the agent's nonce, the digest of the running build and
//! the boot session id; agents pin the digest they expect and reject
//! reports from any other build or from a previous boot.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{sha256, verify_signature, SigningIdentity};
use crate::error::{Error, Result};
use crate::model::{Digest, PublicKey};

// SIMULATED ENCLAVE: with SEV-SNP this digest would come from the
// hardware launch measurement instead of the build manifest.
const BUILD_MANIFEST: &str = include_str!("../../Cargo.toml");

/// Digest identifying the running station build.
pub fn software_digest() -> Digest {
    sha256(&[
        b"station-software-v1",
        env!("CARGO_PKG_NAME").as_bytes(),
        env!("CARGO_PKG_VERSION").as_bytes(),
        BUILD_MANIFEST.as_bytes(),
    ])
}

/// Per-boot station identity. Lives only in memory; a restart produces a
/// new key pair and session id, forcing every agent to re-attest.
pub struct StationIdentity {
    signing: SigningIdentity,
    kx_secret: x25519_dalek::StaticSecret,
    session_id: [u8; 16],
    software_digest: Digest,
}

impl std::fmt::Debug for StationIdentity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StationIdentity")
            .field("session_id", &hex::encode(self.session_id))
            .finish()
    }
}

impl StationIdentity {
    pub fn generate() -> Self {
        let mut session_id = [0u8; 16];
        rand::rngs::OsRng.fill_bytes(&mut session_id);
        StationIdentity {
            signing: SigningIdentity::generate(),
            kx_secret: x25519_dalek::StaticSecret::random_from_rng(rand::rngs::OsRng),
            session_id,
            software_digest: software_digest(),
        }
    }

    pub fn session_id(&self) -> [u8; 16] {
        self.session_id
    }

    pub fn signing_public(&self) -> PublicKey {
        self.signing.public_key()
    }

    pub fn kx_public(&self) -> [u8; 32] {
        x25519_dalek::PublicKey::from(&self.kx_secret).to_bytes()
    }

    pub(crate) fn kx_secret(&self) -> &x25519_dalek::StaticSecret {
        &self.kx_secret
    }

    pub fn sign(&self, msg: &[u8]) -> Vec<u8> {
        self.signing.sign(msg)
    }

    pub fn attest(&self, nonce: &[u8]) -> AttestationReport {
        let mut report = AttestationReport {
            nonce: nonce.to_vec(),
            software_digest: self.software_digest,
            session_id: self.session_id,
            station_public: self.signing_public(),
            station_kx_public: self.kx_public(),
            signature: Vec::new(),
        };
        report.signature = self.signing.sign(&report.signed_bytes());
        report
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationReport {
    pub nonce: Vec<u8>,
    pub software_digest: Digest,
    pub session_id: [u8; 16],
    pub station_public: PublicKey,
    pub station_kx_public: [u8; 32],
    pub signature: Vec<u8>,
}

/// What an agent learns from a verified report.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VerifiedStation {
    pub session_id: [u8; 16],
    pub station_public: PublicKey,
    pub station_kx_public: [u8; 32],
}

impl AttestationReport {
    fn signed_bytes(&self) -> Vec<u8> {
        let mut out = b"station-attest-v1".to_vec();
        out.extend_from_slice(&(self.nonce.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.software_digest);
        out.extend_from_slice(&self.session_id);
        out.extend_from_slice(&self.station_public.0);
        out.extend_from_slice(&self.station_kx_public);
        out
    }

    /// Checks the signature with the key embedded in the report.
    pub fn verify_self_signed(&self) -> Result<()> {
        verify_signature(&self.station_public, &self.signed_bytes(), &self.signature)
    }

    /// Checks the signature against a station key the agent already knows.
    pub fn verify_with(&self, station_public: &PublicKey) -> Result<()> {
        verify_signature(station_public, &self.signed_bytes(), &self.signature)
    }

    /// Agent-side verification: nonce freshness, pinned build digest and a
    /// valid station signature.
    pub fn verify(&self, expected_nonce: &[u8], expected_digest: &Digest) -> Result<VerifiedStation> {
        if self.nonce != expected_nonce {
            return Err(Error::Authentication("attestation nonce mismatch".into()));
        }
        if &self.software_digest != expected_digest {
            return Err(Error::Authentication(
                "attestation reports an unexpected software digest".into(),
            ));
        }
        self.verify_self_signed()?;
        Ok(VerifiedStation {
            session_id: self.session_id,
            station_public: self.station_public,
            station_kx_public: self.station_kx_public,
        })
    }
}
