//! A station served over an encrypted TCP channel. The client pins the
//! station key, checks the attestation, registers, and downloads.

use std::net::TcpListener;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use station_core::crypto::{SigningIdentity, SymmetricKey};
use station_core::model::{Role, StoredMode, TrustMode};
use station_core::service::channel::serve;
use station_core::service::client::{open_delivery, Client, TcpTransport};
use station_core::service::{Service, ServiceConfig};
use station_core::station::{Station, StationConfig};

fn main() -> station_core::Result<()> {
    let dir = tempfile::tempdir()?;
    let mut cfg = StationConfig::new(dir.path(), TrustMode::NearZeroTrust);
    cfg.fsync = false;
    cfg.connectors = vec![concat!(env!("CARGO_MANIFEST_DIR"), "/connectors/download.toml").into()];
    let station = Arc::new(Station::open(cfg)?);
    let pinned = station.identity().signing_public();
    let service = Arc::new(Service::new(station, ServiceConfig::default()));

    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let server = {
        let stop = stop.clone();
        std::thread::spawn(move || serve(listener, service, stop))
    };

    let connect = || TcpTransport::connect(addr, Some(&pinned)).map(Client::new);
    let (mut owner, mut user) = (connect()?, connect()?);
    let (verified, mode) = owner.attest()?;
    println!("attested {mode:?} station, session {}", hex::encode(verified.session_id));

    let (so, ko) = (SigningIdentity::generate(), SymmetricKey::generate());
    let (su, ku) = (SigningIdentity::generate(), SymmetricKey::generate());
    let o = owner.register("owner", &[Role::Owner], &so, Some(&ko), None)?;
    let u = user.register("user", &[Role::User], &su, Some(&ku), None)?;
    owner.login(o, so)?;
    user.login(u, su)?;

    let de = owner.upload(b"shared over tcp", Some(&ko), StoredMode::Sealed)?;
    owner.create_policy(u, "download", de)?;
    let r = user.invoke("download", "", Some(vec![de]))?;
    let bytes = open_delivery(u, Some(&ku), &r.deliveries[0])?;
    println!("{:?}: {}", r.status, String::from_utf8_lossy(&bytes));

    stop.store(true, Ordering::SeqCst);
    drop((owner, user));
    let _ = TcpTransport::connect(addr, Some(&pinned));
    server.join().expect("server thread")?;
    Ok(())
}
