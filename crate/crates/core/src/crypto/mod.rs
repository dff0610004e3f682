//! Protocol coordinator primitives and the volatile key manager.
//!
//! Cipher suite, fixed station-wide:
//!
//! * symmetric: ChaCha20-Poly1305 (IETF, 96-bit random nonce, 128-bit tag)
//! * signatures: Ed25519
//! * key agreement for key transport and the session channel: X25519 +
//!   HKDF-SHA256
//! * digests: SHA-256
//!
//! Every blob encrypted under an agent key binds the agent id as
//! associated data, so a ciphertext cannot be replayed under a different
//! agent's identity.

mod attest;
mod keys;
mod transport;

pub use attest::{software_digest, AttestationReport, StationIdentity, VerifiedStation};
pub use keys::VolatileKeyManager;
pub use transport::{resend_proof_bytes, unwrap_key, wrap_key_for_station, WrappedKey};

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Nonce};
use ed25519_dalek::{Signer, Verifier};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use zeroize::{Zeroize, ZeroizeOnDrop};

use crate::error::{Error, Result};
use crate::model::{AgentId, Digest, PublicKey, TrustMode};

pub const KEY_LEN: usize = 32;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;

/// 256-bit symmetric key. Never serialized; wiped on drop.
#[derive(Clone, PartialEq, Eq, Zeroize, ZeroizeOnDrop)]
pub struct SymmetricKey([u8; KEY_LEN]);

impl std::fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SymmetricKey(..)")
    }
}

impl SymmetricKey {
    pub fn generate() -> Self {
        let mut k = [0u8; KEY_LEN];
        rand::rngs::OsRng.fill_bytes(&mut k);
        SymmetricKey(k)
    }

    pub fn from_bytes(bytes: [u8; KEY_LEN]) -> Self {
        SymmetricKey(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self> {
        let arr: [u8; KEY_LEN] = bytes
            .try_into()
            .map_err(|_| Error::Invalid(format!("symmetric key must be {KEY_LEN} bytes")))?;
        Ok(SymmetricKey(arr))
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }

    /// Short fingerprint used in resend proofs; never the key itself.
    pub fn fingerprint(&self) -> Digest {
        sha256(&[b"station-key-fp-v1", &self.0])
    }

    fn cipher(&self) -> ChaCha20Poly1305 {
        ChaCha20Poly1305::new((&self.0).into())
    }

    /// Encrypts with an explicit nonce. Only used for test vectors and by
    /// callers that manage nonce uniqueness themselves.
    pub fn seal_with_nonce(&self, nonce: &[u8; NONCE_LEN], aad: &[u8], plaintext: &[u8]) -> Vec<u8> {
        self.cipher()
            .encrypt(
                Nonce::from_slice(nonce),
                Payload {
                    msg: plaintext,
                    aad,
                },
            )
            .expect("chacha20poly1305 encryption is infallible for in-memory buffers")
    }

    /// Encrypts under a fresh random nonce; returns `nonce || ciphertext`.
    pub fn seal(&self, aad: &[u8], plaintext: &[u8]) -> Vec<u8> {
        let mut nonce = [0u8; NONCE_LEN];
        rand::rngs::OsRng.fill_bytes(&mut nonce);
        let ct = self.seal_with_nonce(&nonce, aad, plaintext);
        let mut out = Vec::with_capacity(NONCE_LEN + ct.len());
        out.extend_from_slice(&nonce);
        out.extend_from_slice(&ct);
        out
    }

    pub fn open_with_nonce(&self, nonce: &[u8], aad: &[u8], ciphertext: &[u8]) -> Result<Vec<u8>> {
        if nonce.len() != NONCE_LEN {
            return Err(Error::Integrity("bad nonce length".into()));
        }
        self.cipher()
            .decrypt(
                Nonce::from_slice(nonce),
                Payload {
                    msg: ciphertext,
                    aad,
                },
            )
            .map_err(|_| Error::Integrity("authenticated decryption failed".into()))
    }

    /// Inverse of [`SymmetricKey::seal`].
    pub fn open(&self, aad: &[u8], sealed: &[u8]) -> Result<Vec<u8>> {
        if sealed.len() < NONCE_LEN + TAG_LEN {
            return Err(Error::Integrity("ciphertext too short".into()));
        }
        let (nonce, ct) = sealed.split_at(NONCE_LEN);
        self.open_with_nonce(nonce, aad, ct)
    }
}

/// Associated data for blobs encrypted under an agent's symmetric key.
pub fn blob_aad(agent: AgentId) -> Vec<u8> {
    let mut aad = b"station-blob-v1".to_vec();
    aad.extend_from_slice(&agent.0.to_be_bytes());
    aad
}

pub fn sha256(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

/// An agent's (or the admin's) Ed25519 signing identity.
#[derive(Clone)]
pub struct SigningIdentity(ed25519_dalek::SigningKey);

impl std::fmt::Debug for SigningIdentity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SigningIdentity({:?})", self.public_key())
    }
}

impl SigningIdentity {
    pub fn generate() -> Self {
        SigningIdentity(ed25519_dalek::SigningKey::generate(&mut rand::rngs::OsRng))
    }

    pub fn from_seed(seed: [u8; 32]) -> Self {
        SigningIdentity(ed25519_dalek::SigningKey::from_bytes(&seed))
    }

    pub fn seed(&self) -> [u8; 32] {
        self.0.to_bytes()
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey(self.0.verifying_key().to_bytes())
    }

    pub fn sign(&self, msg: &[u8]) -> Vec<u8> {
        self.0.sign(msg).to_bytes().to_vec()
    }
}

/// Rejects keys that are not valid curve points.
pub fn validate_public_key(key: &PublicKey) -> Result<()> {
    ed25519_dalek::VerifyingKey::from_bytes(&key.0)
        .map(|_| ())
        .map_err(|_| Error::Invalid("public key is not a valid ed25519 point".into()))
}

pub fn verify_signature(key: &PublicKey, msg: &[u8], signature: &[u8]) -> Result<()> {
    let vk = ed25519_dalek::VerifyingKey::from_bytes(&key.0)
        .map_err(|_| Error::Authentication("malformed public key".into()))?;
    let sig = ed25519_dalek::Signature::from_slice(signature)
        .map_err(|_| Error::Authentication("malformed signature".into()))?;
    vk.verify(msg, &sig)
        .map_err(|_| Error::Authentication("signature verification failed".into()))
}

/// Encrypted blob as shipped between agents and the station.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedCiphertext {
    pub ciphertext: Vec<u8>,
    pub signature: Vec<u8>,
}

impl SignedCiphertext {
    /// Client side: encrypt `plaintext` under the agent key and sign it.
    pub fn create(
        agent: AgentId,
        key: &SymmetricKey,
        signer: &SigningIdentity,
        plaintext: &[u8],
    ) -> Self {
        let ciphertext = key.seal(&blob_aad(agent), plaintext);
        let signature = signer.sign(&ciphertext);
        SignedCiphertext {
            ciphertext,
            signature,
        }
    }

    /// Full-trust upload: the payload travels as-is (the channel still
    /// protects it) and is only signed.
    pub fn plain(signer: &SigningIdentity, plaintext: &[u8]) -> Self {
        SignedCiphertext {
            ciphertext: plaintext.to_vec(),
            signature: signer.sign(plaintext),
        }
    }

    /// [`Self::create`] or [`Self::plain`] depending on the station mode.
    pub fn for_mode(
        mode: TrustMode,
        agent: AgentId,
        key: Option<&SymmetricKey>,
        signer: &SigningIdentity,
        plaintext: &[u8],
    ) -> Self {
        match (mode.encrypts(), key) {
            (true, Some(k)) => Self::create(agent, k, signer, plaintext),
            _ => Self::plain(signer, plaintext),
        }
    }
}
