//! Every station action lands in a hash-chained audit log. Owners read the
//! entries about their own data; an operator reads the whole log only after
//! every agent signs a contract. Flipping one byte on disk breaks the chain.

use station_core::crypto::{SignedCiphertext, SigningIdentity, SymmetricKey};
use station_core::functions::Params;
use station_core::model::{AgentId, FunctionId, Role, RoleSet, StoredMode, TrustMode};
use station_core::station::{NewAgent, Station, StationConfig};

fn agent(st: &Station, name: &str, role: Role, s: &SigningIdentity, key: &SymmetricKey) -> station_core::Result<AgentId> {
    st.register_agent(NewAgent {
        name: name.into(),
        roles: RoleSet::of(&[role]),
        public_key: s.public_key(),
        key: Some(key.clone()),
    })
}

fn main() -> station_core::Result<()> {
    let dir = tempfile::tempdir()?;
    let mut cfg = StationConfig::new(dir.path(), TrustMode::NearZeroTrust);
    cfg.fsync = false;
    cfg.connectors = vec![concat!(env!("CARGO_MANIFEST_DIR"), "/connectors/download.toml").into()];
    let st = Station::open(cfg)?;
    let (so, su, sop) = (SigningIdentity::generate(), SigningIdentity::generate(), SigningIdentity::generate());
    let ko = SymmetricKey::generate();
    let owner = agent(&st, "owner", Role::Owner, &so, &ko)?;
    let user = agent(&st, "user", Role::User, &su, &SymmetricKey::generate())?;
    let operator = agent(&st, "auditor", Role::Operator, &sop, &SymmetricKey::generate())?;

    let upload = SignedCiphertext::for_mode(st.mode(), owner, Some(&ko), &so, b"ledger");
    let de = st.register_de(owner, &upload, StoredMode::Sealed)?;
    st.create_policy(owner, user, FunctionId::new("download"), de)?;
    st.invoke(user, &FunctionId::new("download"), Params::new(), Some(vec![de]))?;

    println!("owner's view:");
    for v in st.read_owner_log(owner)? {
        if let Some(e) = v.event {
            println!("  #{:<3} {:?}", v.seq, e.payload);
        }
    }

    println!("operator before contract: {}", st.read_operator_log(operator).unwrap_err());
    let contract = st.propose_contract(operator)?;
    for (id, signer) in [(owner, &so), (user, &su), (operator, &sop)] {
        st.sign_contract(id, contract.id, &signer.sign(&contract.canonical_bytes()))?;
    }
    println!("operator after contract: {} entries", st.read_operator_log(operator)?.len());
    println!("chain: {:?}", st.verify_audit_chain()?);

    let path = Station::audit_path(dir.path());
    let mut bytes = std::fs::read(&path)?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    std::fs::write(&path, bytes)?;
    println!("after flipping a bit: {:?}", st.verify_audit_chain());
    Ok(())
}
