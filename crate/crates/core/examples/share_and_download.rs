//! An owner registers a file, grants one user the `download` function on
//! it, and the user gets the original bytes back.

use station_core::crypto::{blob_aad, SignedCiphertext, SigningIdentity, SymmetricKey};
use station_core::functions::Params;
use station_core::model::{FunctionId, Role, RoleSet, StoredMode, TrustMode};
use station_core::station::{NewAgent, Station, StationConfig};

fn main() -> station_core::Result<()> {
    let dir = tempfile::tempdir()?;
    let mut cfg = StationConfig::new(dir.path(), TrustMode::NearZeroTrust);
    cfg.connectors = vec![concat!(env!("CARGO_MANIFEST_DIR"), "/connectors/download.toml").into()];
    let st = Station::open(cfg)?;

    let (owner_sig, owner_key) = (SigningIdentity::generate(), SymmetricKey::generate());
    let owner = st.register_agent(NewAgent {
        name: "hospital".into(),
        roles: RoleSet::of(&[Role::Owner]),
        public_key: owner_sig.public_key(),
        key: Some(owner_key.clone()),
    })?;
    let user_key = SymmetricKey::generate();
    let user = st.register_agent(NewAgent {
        name: "analyst".into(),
        roles: RoleSet::of(&[Role::User]),
        public_key: SigningIdentity::generate().public_key(),
        key: Some(user_key.clone()),
    })?;

    // Encrypted on the owner's side before it reaches the station.
    let upload = SignedCiphertext::for_mode(st.mode(), owner, Some(&owner_key), &owner_sig, b"patient,age\n1,42\n");
    let de = st.register_de(owner, &upload, StoredMode::Sealed)?;
    let download = FunctionId::new("download");

    let denied = st.invoke(user, &download, Params::new(), Some(vec![de]))?;
    println!("before the policy: {:?}", denied.status);

    st.create_policy(owner, user, download.clone(), de)?;
    let r = st.invoke(user, &download, Params::new(), Some(vec![de]))?;
    let plain = user_key.open(&blob_aad(user), &r.deliveries[0].payload)?;
    println!("after the policy: {:?}\n{}", r.status, String::from_utf8_lossy(&plain));
    Ok(())
}
