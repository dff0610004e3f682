//! Encrypted, authenticated framing over TCP.
//!
//! Handshake (all fields raw bytes):
//!
//! ```text
//! client -> server   "STN1" | client_eph[32] | client_nonce[32]
//! server -> client   server_eph[32] | station_public[32] | session_id[16] | sig[64]
//! ```
//!
//! `sig` is the station's Ed25519 signature over the transcript. Both
//! sides derive one ChaCha20-Poly1305 key per direction with HKDF-SHA256
//! from the X25519 shared secret. Each frame is a u32 big-endian length
//! followed by the sealed message; the nonce is four zero bytes and the
//! frame counter in big-endian, so replayed, dropped or reordered frames
//! fail to open.

use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use hkdf::Hkdf;
use rand::RngCore;
use sha2::Sha256;

use super::Service;
use crate::crypto::{sha256, verify_signature, StationIdentity, SymmetricKey, NONCE_LEN};
use crate::error::{Error, Result};
use crate::model::PublicKey;

const MAGIC: &[u8; 4] = b"STN1";
pub const MAX_FRAME: usize = 64 << 20;

/// What the client learns about the station from the handshake.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelPeer {
    pub station_public: PublicKey,
    pub session_id: [u8; 16],
}

pub struct SecureChannel {
    stream: TcpStream,
    send_key: SymmetricKey,
    recv_key: SymmetricKey,
    send_aad: &'static [u8],
    recv_aad: &'static [u8],
    sent: u64,
    received: u64,
}

fn transcript(c_eph: &[u8; 32], c_nonce: &[u8; 32], s_eph: &[u8; 32], station: &PublicKey, session: &[u8; 16]) -> Vec<u8> {
    let mut t = b"station-channel-v1".to_vec();
    t.extend_from_slice(c_eph);
    t.extend_from_slice(c_nonce);
    t.extend_from_slice(s_eph);
    t.extend_from_slice(&station.0);
    t.extend_from_slice(session);
    t
}

fn derive(shared: &[u8; 32], transcript: &[u8]) -> (SymmetricKey, SymmetricKey) {
    let salt = sha256(&[transcript]);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let mut c2s = [0u8; 32];
    let mut s2c = [0u8; 32];
    hk.expand(b"station-channel-c2s", &mut c2s).expect("valid length");
    hk.expand(b"station-channel-s2c", &mut s2c).expect("valid length");
    (SymmetricKey::from_bytes(c2s), SymmetricKey::from_bytes(s2c))
}

fn frame_nonce(counter: u64) -> [u8; NONCE_LEN] {
    let mut n = [0u8; NONCE_LEN];
    n[4..].copy_from_slice(&counter.to_be_bytes());
    n
}

impl SecureChannel {
    /// Client side. When `pinned` is given, the station key from the
    /// handshake must match it.
    pub fn connect(stream: TcpStream, pinned: Option<&PublicKey>) -> Result<(Self, ChannelPeer)> {
        let mut stream = stream;
        stream.set_nodelay(true)?;
        let eph = x25519_dalek::EphemeralSecret::random_from_rng(rand::rngs::OsRng);
        let c_eph = x25519_dalek::PublicKey::from(&eph).to_bytes();
        let mut c_nonce = [0u8; 32];
        rand::rngs::OsRng.fill_bytes(&mut c_nonce);
        let mut hello = MAGIC.to_vec();
        hello.extend_from_slice(&c_eph);
        hello.extend_from_slice(&c_nonce);
        stream.write_all(&hello)?;

        let mut reply = [0u8; 32 + 32 + 16 + 64];
        stream.read_exact(&mut reply)?;
        let s_eph: [u8; 32] = reply[..32].try_into().expect("slice length");
        let station = PublicKey(reply[32..64].try_into().expect("slice length"));
        let session_id: [u8; 16] = reply[64..80].try_into().expect("slice length");
        if let Some(p) = pinned {
            if *p != station {
                return Err(Error::Authentication("station key differs from the pinned key".into()));
            }
        }
        let t = transcript(&c_eph, &c_nonce, &s_eph, &station, &session_id);
        verify_signature(&station, &t, &reply[80..])?;
        let shared = eph.diffie_hellman(&x25519_dalek::PublicKey::from(s_eph));
        let (c2s, s2c) = derive(shared.as_bytes(), &t);
        Ok((
            SecureChannel {
                stream,
                send_key: c2s,
                recv_key: s2c,
                send_aad: b"c2s",
                recv_aad: b"s2c",
                sent: 0,
                received: 0,
            },
            ChannelPeer {
                station_public: station,
                session_id,
            },
        ))
    }

    /// Station side of the handshake.
    pub fn accept(stream: TcpStream, identity: &StationIdentity) -> Result<Self> {
        let mut stream = stream;
        stream.set_nodelay(true)?;
        let mut hello = [0u8; 4 + 32 + 32];
        stream.read_exact(&mut hello)?;
        if &hello[..4] != MAGIC {
            return Err(Error::Invalid("not a station client".into()));
        }
        let c_eph: [u8; 32] = hello[4..36].try_into().expect("slice length");
        let c_nonce: [u8; 32] = hello[36..].try_into().expect("slice length");
        let eph = x25519_dalek::EphemeralSecret::random_from_rng(rand::rngs::OsRng);
        let s_eph = x25519_dalek::PublicKey::from(&eph).to_bytes();
        let station = identity.signing_public();
        let session_id = identity.session_id();
        let t = transcript(&c_eph, &c_nonce, &s_eph, &station, &session_id);
        let mut reply = Vec::with_capacity(144);
        reply.extend_from_slice(&s_eph);
        reply.extend_from_slice(&station.0);
        reply.extend_from_slice(&session_id);
        reply.extend(identity.sign(&t));
        stream.write_all(&reply)?;
        let shared = eph.diffie_hellman(&x25519_dalek::PublicKey::from(c_eph));
        let (c2s, s2c) = derive(shared.as_bytes(), &t);
        Ok(SecureChannel {
            stream,
            send_key: s2c,
            recv_key: c2s,
            send_aad: b"s2c",
            recv_aad: b"c2s",
            sent: 0,
            received: 0,
        })
    }

    pub fn send(&mut self, msg: &[u8]) -> Result<()> {
        let ct = self
            .send_key
            .seal_with_nonce(&frame_nonce(self.sent), self.send_aad, msg);
        self.sent += 1;
        if ct.len() > MAX_FRAME {
            return Err(Error::Invalid("message exceeds the frame limit".into()));
        }
        let mut buf = Vec::with_capacity(4 + ct.len());
        buf.extend_from_slice(&(ct.len() as u32).to_be_bytes());
        buf.extend_from_slice(&ct);
        self.stream.write_all(&buf)?;
        Ok(())
    }

    /// Next message, or `None` when the peer closed the connection
    /// between frames.
    pub fn recv(&mut self) -> Result<Option<Vec<u8>>> {
        let mut len = [0u8; 4];
        match self.stream.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        let len = u32::from_be_bytes(len) as usize;
        if len > MAX_FRAME {
            return Err(Error::Invalid("frame too large".into()));
        }
        let mut ct = vec![0u8; len];
        self.stream.read_exact(&mut ct)?;
        let pt = self
            .recv_key
            .open_with_nonce(&frame_nonce(self.received), self.recv_aad, &ct)?;
        self.received += 1;
        Ok(Some(pt))
    }
}

fn serve_connection(stream: TcpStream, service: &Service) -> Result<()> {
    let mut ch = SecureChannel::accept(stream, service.station().identity())?;
    while let Some(msg) = ch.recv()? {
        let reply = service.handle_bytes(&msg);
        ch.send(&reply)?;
    }
    Ok(())
}

/// Accepts connections until `stop` is set, one thread per connection.
pub fn serve(listener: TcpListener, service: Arc<Service>, stop: Arc<AtomicBool>) -> Result<()> {
    listener.set_nonblocking(true)?;
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, peer)) => {
                stream.set_nonblocking(false)?;
                let service = Arc::clone(&service);
                std::thread::spawn(move || {
                    if let Err(e) = serve_connection(stream, &service) {
                        tracing::debug!(%peer, "connection closed: {e}");
                    }
                });
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(20));
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}
