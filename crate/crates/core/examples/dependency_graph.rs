//! A policy on `search` also lets `index` run over the same data, because
//! `search` depends on `index`. The reverse does not hold.

use station_core::crypto::{SignedCiphertext, SigningIdentity};
use station_core::functions::{ParamValue, Params};
use station_core::model::{AgentId, FunctionId, Role, RoleSet, StoredMode, TrustMode};
use station_core::station::{NewAgent, Station, StationConfig};

fn agent(st: &Station, name: &str, role: Role, signer: &SigningIdentity) -> station_core::Result<AgentId> {
    st.register_agent(NewAgent {
        name: name.into(),
        roles: RoleSet::of(&[role]),
        public_key: signer.public_key(),
        key: None,
    })
}

fn main() -> station_core::Result<()> {
    let dir = tempfile::tempdir()?;
    let mut cfg = StationConfig::new(dir.path(), TrustMode::FullTrust);
    cfg.fsync = false;
    cfg.connectors = vec![concat!(env!("CARGO_MANIFEST_DIR"), "/connectors/search.toml").into()];
    let st = Station::open(cfg)?;
    let signer = SigningIdentity::generate();
    let owner = agent(&st, "library", Role::Owner, &signer)?;
    let user = agent(&st, "reader", Role::User, &SigningIdentity::generate())?;

    let mut des = Vec::new();
    for text in ["the river runs", "a stone by the river", "clouds"] {
        des.push(st.register_de(owner, &SignedCiphertext::plain(&signer, text.as_bytes()), StoredMode::Sealed)?);
    }
    for &de in &des {
        st.create_policy(owner, user, FunctionId::new("search"), de)?;
    }

    let idx = st.invoke(user, &FunctionId::new("index"), Params::new(), None)?;
    let index_de = idx.deliveries[0].de.expect("index output is kept");
    println!("index ran under the search policy and produced {index_de}");

    let mut p = Params::new();
    p.insert("query".into(), ParamValue::String("river".into()));
    p.insert("index".into(), ParamValue::Int(index_de.0 as i64));
    let hits = st.invoke(user, &FunctionId::new("search"), p, None)?;
    print!("search hits:\n{}", String::from_utf8_lossy(&hits.deliveries[0].payload));

    let prov = st.provenance_of(index_de)?;
    println!("index provenance: {:?}", prov.des);
    Ok(())
}
