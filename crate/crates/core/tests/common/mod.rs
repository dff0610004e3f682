#![allow(dead_code)]

pub mod driver;

use std::path::{Path, PathBuf};

use station_core::crypto::{SignedCiphertext, SigningIdentity, SymmetricKey};
use station_core::model::{AgentId, DeId, FunctionId, RoleSet, Role, StoredMode, TrustMode};
use station_core::station::{NewAgent, Station, StationConfig};

pub fn connectors_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("connectors")
}

pub fn config(root: &Path, mode: TrustMode) -> StationConfig {
    let mut c = StationConfig::new(root, mode);
    c.fsync = false;
    c.sandbox_base = Some(root.join("sandbox"));
    c.connectors = ["download.toml", "search.toml", "consortium.toml", "toolkit.toml"]
        .iter()
        .map(|f| connectors_dir().join(f))
        .collect();
    c
}

pub struct Who {
    pub id: AgentId,
    pub signer: SigningIdentity,
    pub key: SymmetricKey,
}

pub fn register(st: &Station, name: &str, roles: &[Role]) -> Who {
    let signer = SigningIdentity::generate();
    let key = SymmetricKey::generate();
    let id = st
        .register_agent(NewAgent {
            name: name.into(),
            roles: RoleSet::of(roles),
            public_key: signer.public_key(),
            key: Some(key.clone()),
        })
        .unwrap();
    Who { id, signer, key }
}

pub fn upload(st: &Station, who: &Who, bytes: &[u8], mode: StoredMode) -> DeId {
    let up = SignedCiphertext::for_mode(st.mode(), who.id, Some(&who.key), &who.signer, bytes);
    st.register_de(who.id, &up, mode).unwrap()
}

pub fn open_payload(st: &Station, who: &Who, payload: &[u8]) -> Vec<u8> {
    if st.mode().encrypts() {
        who.key
            .open(&station_core::crypto::blob_aad(who.id), payload)
            .unwrap()
    } else {
        payload.to_vec()
    }
}

pub fn f(name: &str) -> FunctionId {
    FunctionId::new(name)
}
