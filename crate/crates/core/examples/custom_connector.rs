//! Registers an application-defined function. The function sees inputs
//! only through its execution context; the station decides which ones.

use std::sync::Arc;

use station_core::crypto::{SignedCiphertext, SigningIdentity};
use station_core::functions::{ConnectorManifest, Params};
use station_core::interceptor::{ExecutionContext, NativeFunction};
use station_core::model::{AgentId, FunctionId, Role, RoleSet, StoredMode, TrustMode};
use station_core::station::{NewAgent, Station, StationConfig};

/// Emits the number of lines across every input it may read.
struct LineCount;

impl NativeFunction for LineCount {
    fn run(&self, io: &ExecutionContext) -> station_core::Result<()> {
        let mut lines = 0;
        for name in io.list() {
            lines += io.read(&name)?.iter().filter(|&&b| b == b'\n').count();
        }
        io.put_output(format!("{lines}\n").into_bytes(), None)
    }
}

const MANIFEST: &str = r#"
format_version = 1
app = "stats"

[[functions]]
name = "line_count"
kind = "data_blind"
entrypoint = { native = "line_count" }
"#;

fn agent(st: &Station, role: Role, s: &SigningIdentity) -> station_core::Result<AgentId> {
    st.register_agent(NewAgent {
        name: format!("{role:?}"),
        roles: RoleSet::of(&[role]),
        public_key: s.public_key(),
        key: None,
    })
}

fn main() -> station_core::Result<()> {
    let dir = tempfile::tempdir()?;
    let mut cfg = StationConfig::new(dir.path(), TrustMode::FullTrust);
    cfg.fsync = false;
    let st = Station::open(cfg)?;
    st.register_native("line_count", Arc::new(LineCount));
    let ids = st.register_connector(&ConnectorManifest::from_toml(MANIFEST)?, dir.path())?;
    println!("registered {ids:?}");

    let so = SigningIdentity::generate();
    let owner = agent(&st, Role::Owner, &so)?;
    let user = agent(&st, Role::User, &SigningIdentity::generate())?;
    let a = st.register_de(owner, &SignedCiphertext::plain(&so, b"a\nb\nc\n"), StoredMode::Sealed)?;
    st.register_de(owner, &SignedCiphertext::plain(&so, b"d\ne\n"), StoredMode::Sealed)?;

    let f = FunctionId::new("line_count");
    st.create_policy(owner, user, f.clone(), a)?;
    // Data-blind: runs over whatever the caller is covered for.
    let r = st.invoke(user, &f, Params::new(), None)?;
    print!("{:?}: {}", r.status, String::from_utf8_lossy(&r.deliveries[0].payload));
    Ok(())
}
