//! Data in enclave mode can be computed on without a policy, but results
//! that touch it wait in the staging zone until every affected owner
//! decides.

use station_core::crypto::{SignedCiphertext, SigningIdentity};
use station_core::functions::Params;
use station_core::model::{AgentId, FunctionId, ReleaseDecision, Role, RoleSet, StoredMode, TrustMode};
use station_core::station::{NewAgent, Station, StationConfig};

fn agent(st: &Station, name: &str, role: Role, s: &SigningIdentity) -> station_core::Result<AgentId> {
    st.register_agent(NewAgent {
        name: name.into(),
        roles: RoleSet::of(&[role]),
        public_key: s.public_key(),
        key: None,
    })
}

fn main() -> station_core::Result<()> {
    let dir = tempfile::tempdir()?;
    let mut cfg = StationConfig::new(dir.path(), TrustMode::FullTrust);
    cfg.fsync = false;
    cfg.connectors = vec![concat!(env!("CARGO_MANIFEST_DIR"), "/connectors/consortium.toml").into()];
    let st = Station::open(cfg)?;
    let (s1, s2) = (SigningIdentity::generate(), SigningIdentity::generate());
    let clinic_a = agent(&st, "clinic-a", Role::Owner, &s1)?;
    let clinic_b = agent(&st, "clinic-b", Role::Owner, &s2)?;
    let researcher = agent(&st, "researcher", Role::User, &SigningIdentity::generate())?;
    st.register_de(clinic_a, &SignedCiphertext::plain(&s1, b"1,2\n3,4\n"), StoredMode::Enclave)?;
    st.register_de(clinic_b, &SignedCiphertext::plain(&s2, b"5,6\n"), StoredMode::Enclave)?;

    let train = FunctionId::new("train_pooled_csv");
    let r = st.invoke(researcher, &train, Params::new(), None)?;
    let staged = r.staged[0];
    println!("{:?}: result {staged} waits for {:?}", r.status, st.registry().staged(staged).map(|s| s.pending_owners()));

    println!("clinic-a grants: {:?}", st.approve_release(clinic_a, staged, ReleaseDecision::Grant)?);
    println!("clinic-b grants: {:?}", st.approve_release(clinic_b, staged, ReleaseDecision::Grant)?);
    let got = st.fetch_released(researcher, staged)?;
    print!("released once:\n{}", String::from_utf8_lossy(&got.payload));
    println!("second fetch: {}", st.fetch_released(researcher, staged).unwrap_err());
    Ok(())
}
