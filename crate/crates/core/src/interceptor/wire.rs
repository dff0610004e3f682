//! Framing for the sandbox I/O channel between a connector subprocess and
//! the interceptor.
//!
//! Each message is `header_len u32 | header (JSON) | body_len u64 | body`,
//! integers big-endian. A connection carries one request and one response.

use std::io::{Read, Write};
use std::os::unix::net::UnixStream;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_HEADER: u32 = 1 << 20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum IoRequest {
    /// Names of visible inputs.
    List,
    /// Whole contents of a visible input.
    Read { name: String },
    /// Emit an output; `inputs` names the inputs it was computed from.
    Put { inputs: Option<Vec<String>> },
    ScratchPut { name: String },
    ScratchGet { name: String },
    Params,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoResponse {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub names: Vec<String>,
}

impl IoResponse {
    pub fn ok() -> Self {
        IoResponse {
            ok: true,
            error: None,
            names: Vec::new(),
        }
    }

    pub fn err(msg: impl Into<String>) -> Self {
        IoResponse {
            ok: false,
            error: Some(msg.into()),
            names: Vec::new(),
        }
    }
}

pub fn write_message<H: Serialize>(w: &mut impl Write, header: &H, body: &[u8]) -> Result<()> {
    let h = serde_json::to_vec(header)?;
    w.write_all(&(h.len() as u32).to_be_bytes())?;
    w.write_all(&h)?;
    w.write_all(&(body.len() as u64).to_be_bytes())?;
    w.write_all(body)?;
    w.flush()?;
    Ok(())
}

pub fn read_message<H: DeserializeOwned>(r: &mut impl Read, max_body: u64) -> Result<(H, Vec<u8>)> {
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4)?;
    let hlen = u32::from_be_bytes(len4);
    if hlen > MAX_HEADER {
        return Err(Error::Encoding("sandbox I/O header too large".into()));
    }
    let mut h = vec![0u8; hlen as usize];
    r.read_exact(&mut h)?;
    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8)?;
    let blen = u64::from_be_bytes(len8);
    if blen > max_body {
        return Err(Error::Encoding("sandbox I/O body too large".into()));
    }
    let mut body = vec![0u8; blen as usize];
    r.read_exact(&mut body)?;
    Ok((serde_json::from_slice(&h)?, body))
}

/// Client side: one request over a fresh connection.
pub fn call(socket: &Path, req: &IoRequest, body: &[u8]) -> Result<(IoResponse, Vec<u8>)> {
    let mut stream = UnixStream::connect(socket)?;
    write_message(&mut stream, req, body)?;
    let (resp, body): (IoResponse, Vec<u8>) = read_message(&mut stream, u64::MAX >> 1)?;
    if !resp.ok {
        return Err(Error::Sandbox(resp.error.unwrap_or_default()));
    }
    Ok((resp, body))
}
