//! Near-zero-trust state is encrypted under agents' keys, so after a
//! restart the station waits for enough agents to resend them. A
//! checkpoint wrapped to several slots lets any one slot holder bring it
//! back; later EWAL records need the keys of the agents that wrote them.

use station_core::crypto::{resend_proof_bytes, SignedCiphertext, SigningIdentity, SymmetricKey};
use station_core::durability::SlotSelection;
use station_core::model::{FunctionId, Role, RoleSet, StoredMode, TrustMode};
use station_core::station::{NewAgent, RecoveryStatus, Station, StationConfig};

fn config(root: &std::path::Path) -> StationConfig {
    let mut cfg = StationConfig::new(root, TrustMode::NearZeroTrust);
    cfg.fsync = false;
    cfg.connectors = vec![concat!(env!("CARGO_MANIFEST_DIR"), "/connectors/download.toml").into()];
    cfg
}

fn main() -> station_core::Result<()> {
    let dir = tempfile::tempdir()?;
    let mut agents = Vec::new();
    let hash;
    {
        let st = Station::open(config(dir.path()))?;
        for (i, role) in [Role::Owner, Role::Owner, Role::User].into_iter().enumerate() {
            let signer = SigningIdentity::generate();
            let key = SymmetricKey::generate();
            let id = st.register_agent(NewAgent {
                name: format!("agent-{i}"),
                roles: RoleSet::of(&[role]),
                public_key: signer.public_key(),
                key: Some(key.clone()),
            })?;
            agents.push((id, signer, key));
        }
        let (o, so, ko) = &agents[0];
        let de = st.register_de(*o, &SignedCiphertext::for_mode(st.mode(), *o, Some(ko), so, b"x"), StoredMode::Sealed)?;
        st.create_policy(*o, agents[2].0, FunctionId::new("download"), de)?;
        let cp = st.checkpoint(Some(3), SlotSelection::LowestIds)?;
        println!("checkpoint {} covers lsn {} with slots {:?}", cp.id, cp.covered_lsn, cp.slots);
        // Written after the checkpoint, so it comes back from the EWAL.
        st.register_de(*o, &SignedCiphertext::for_mode(st.mode(), *o, Some(ko), so, b"y"), StoredMode::Sealed)?;
        hash = st.state_hash();
    }

    // Restart: any single slot key unlocks the checkpoint, but the record
    // written after it is sealed under its owner's key.
    let st = Station::open(config(dir.path()))?;
    println!("after restart: {:?}", st.recovery_status()?);
    for (id, signer, key) in [&agents[1], &agents[0]] {
        let proof = signer.sign(&resend_proof_bytes(&st.session_id(), *id, key));
        println!("after {id} resends: {:?}", st.resend_key(*id, key.clone(), &proof)?);
    }
    assert_eq!(st.recovery_status()?, RecoveryStatus::Ready);
    println!("state matches: {}", st.state_hash() == hash);
    Ok(())
}
