//! Timing harness for owner upload, user download and policy matching.
//!
//! Every run starts from an empty station under its own directory and
//! emits one [`BenchRow`] per measured phase. Rows print as CSV with the
//! header in [`CSV_HEADER`] or as JSON lines.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::RngCore;
use serde::Serialize;

use crate::crypto::{SignedCiphertext, SigningIdentity, SymmetricKey};
use crate::error::{Error, Result};
use crate::functions::{ConnectorManifest, Entrypoint, FunctionDecl, KindDecl, Params};
use crate::gatekeeper::InvocationStatus;
use crate::model::{AgentId, DeId, FunctionId, Role, RoleSet, StoredMode, TrustMode};
use crate::station::{NewAgent, Station, StationConfig};

pub const CSV_HEADER: &str = "bench,mode,des,functions,de_size,phase,seconds,ops";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub bench: &'static str,
    pub mode: &'static str,
    pub des: usize,
    pub functions: usize,
    pub de_size: usize,
    pub phase: &'static str,
    /// Total wall time of the phase across `ops` operations.
    pub seconds: f64,
    pub ops: usize,
}

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.9},{}",
            self.bench, self.mode, self.des, self.functions, self.de_size, self.phase, self.seconds, self.ops
        )
    }
}

fn mode_name(mode: TrustMode) -> &'static str {
    if mode.encrypts() {
        "nzt"
    } else {
        "full"
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub mode: TrustMode,
    pub des: usize,
    pub functions: usize,
    pub de_size: usize,
    /// Flush EWAL and audit writes, as a deployed station does.
    pub fsync: bool,
    /// Scratch directory; each run uses and removes a subdirectory.
    pub work_dir: PathBuf,
}

struct Agent {
    id: AgentId,
    signer: SigningIdentity,
    key: SymmetricKey,
}

struct Rig {
    station: Station,
    dir: PathBuf,
    functions: Vec<FunctionId>,
}

impl Drop for Rig {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.dir);
    }
}

fn run_dir(base: &Path, label: &str) -> Result<PathBuf> {
    let mut tag = [0u8; 6];
    rand::rngs::OsRng.fill_bytes(&mut tag);
    let dir = base.join(format!("{label}-{}", hex::encode(tag)));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// A station with `functions` generated functions, all backed by
/// `native` with the given kind. The first is named after the native.
fn rig(cfg: &BenchConfig, label: &str, native: &str, kind: KindDecl) -> Result<Rig> {
    let dir = run_dir(&cfg.work_dir, label)?;
    let mut sc = StationConfig::new(dir.join("station"), cfg.mode);
    sc.fsync = cfg.fsync;
    sc.sandbox_base = Some(dir.join("sandbox"));
    let station = Station::open(sc)?;
    let functions: Vec<FunctionDecl> = (0..cfg.functions.max(1))
        .map(|i| FunctionDecl {
            name: if i == 0 { native.to_string() } else { format!("{native}_{i:03}") },
            kind,
            entrypoint: Entrypoint::Native(native.to_string()),
            params: Vec::new(),
            retain_outputs: false,
        })
        .collect();
    let manifest = ConnectorManifest {
        format_version: 1,
        app: format!("bench_{native}"),
        functions,
        dependencies: Vec::new(),
    };
    let functions = station.register_connector(&manifest, &dir)?;
    Ok(Rig { station, dir, functions })
}

fn agent(st: &Station, name: &str, role: Role) -> Result<Agent> {
    let signer = SigningIdentity::generate();
    let key = SymmetricKey::generate();
    let id = st.register_agent(NewAgent {
        name: name.into(),
        roles: RoleSet::of(&[role]),
        public_key: signer.public_key(),
        key: Some(key.clone()),
    })?;
    Ok(Agent { id, signer, key })
}

fn random_bytes(n: usize) -> Vec<u8> {
    let mut v = vec![0u8; n];
    rand::rngs::OsRng.fill_bytes(&mut v);
    v
}

struct Phases {
    rows: Vec<BenchRow>,
    bench: &'static str,
    cfg: BenchConfig,
}

impl Phases {
    fn push(&mut self, phase: &'static str, d: Duration, ops: usize) {
        self.rows.push(BenchRow {
            bench: self.bench,
            mode: mode_name(self.cfg.mode),
            des: self.cfg.des,
            functions: self.cfg.functions,
            de_size: self.cfg.de_size,
            phase,
            seconds: d.as_secs_f64(),
            ops,
        });
    }
}

fn upload_all(st: &Station, owner: &Agent, cfg: &BenchConfig, p: Option<&mut Phases>) -> Result<Vec<DeId>> {
    let files: Vec<Vec<u8>> = (0..cfg.des).map(|_| random_bytes(cfg.de_size)).collect();
    let t = Instant::now();
    let uploads: Vec<SignedCiphertext> = files
        .iter()
        .map(|f| SignedCiphertext::for_mode(cfg.mode, owner.id, Some(&owner.key), &owner.signer, f))
        .collect();
    let encrypt = t.elapsed();
    let t = Instant::now();
    let ids = uploads
        .iter()
        .map(|u| st.register_de(owner.id, u, StoredMode::Sealed))
        .collect::<Result<Vec<_>>>()?;
    let create = t.elapsed();
    if let Some(p) = p {
        p.push("encrypt", encrypt, cfg.des);
        p.push("create_de", create, cfg.des);
    }
    Ok(ids)
}

fn grant_all(st: &Station, owner: AgentId, user: AgentId, functions: &[FunctionId], des: &[DeId]) -> Result<usize> {
    let mut n = 0;
    for f in functions {
        for &d in des {
            st.create_policy(owner, user, f.clone(), d)?;
            n += 1;
        }
    }
    Ok(n)
}

/// Owner-side cost: registering agents, encrypting DEs, registering
/// them, and writing a policy for every (function, DE) pair.
pub fn upload(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let rig = rig(cfg, "upload", "download", KindDecl::DataAware)?;
    let st = &rig.station;
    let mut p = Phases {
        rows: Vec::new(),
        bench: "upload",
        cfg: cfg.clone(),
    };
    let t = Instant::now();
    let owner = agent(st, "owner", Role::Owner)?;
    let user = agent(st, "user", Role::User)?;
    p.push("create_user", t.elapsed(), 2);
    let des = upload_all(st, &owner, cfg, Some(&mut p))?;
    let t = Instant::now();
    let n = grant_all(st, owner.id, user.id, &rig.functions, &des)?;
    p.push("create_policy", t.elapsed(), n);
    Ok(p.rows)
}

/// User-side cost of downloading every DE through the `download`
/// function, split into the gatekeeper's phases plus client decryption.
pub fn download(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let rig = rig(cfg, "download", "download", KindDecl::DataAware)?;
    let st = &rig.station;
    let owner = agent(st, "owner", Role::Owner)?;
    let user = agent(st, "user", Role::User)?;
    let des = upload_all(st, &owner, cfg, None)?;
    grant_all(st, owner.id, user.id, &rig.functions, &des)?;

    let mut p = Phases {
        rows: Vec::new(),
        bench: "download",
        cfg: cfg.clone(),
    };
    let (mut matching, mut exec, mut enc, mut commit, mut client) = Default::default();
    let download = &rig.functions[0];
    for &d in &des {
        let r = st.invoke(user.id, download, Params::new(), Some(vec![d]))?;
        if r.status != InvocationStatus::Delivered {
            return Err(Error::Invalid(format!("download of {d} was {:?}", r.status)));
        }
        matching += r.timings.matching;
        exec += r.timings.execution;
        enc += r.timings.encryption;
        commit += r.timings.commit;
        let t = Instant::now();
        for out in &r.deliveries {
            if out.encrypted {
                user.key.open(&crate::crypto::blob_aad(user.id), &out.payload)?;
            }
        }
        client += t.elapsed();
    }
    let n = des.len();
    p.push("matching", matching, n);
    p.push("read_decrypt", exec, n);
    p.push("re_encrypt", enc, n);
    p.push("commit", commit, n);
    p.push("client_decrypt", client, n);
    Ok(p.rows)
}

/// Cost of computing a user's accessible set with `des * functions`
/// policies in place, plus the phases of one data-blind `noop` call.
/// `reps` accessible-set queries are timed; the row reports their median.
pub fn matcher(cfg: &BenchConfig, reps: usize) -> Result<Vec<BenchRow>> {
    let rig = rig(cfg, "matcher", "noop", KindDecl::DataBlind)?;
    let st = &rig.station;
    let owner = agent(st, "owner", Role::Owner)?;
    let user = agent(st, "user", Role::User)?;
    let small = BenchConfig {
        de_size: cfg.de_size.min(64),
        ..cfg.clone()
    };
    let des = upload_all(st, &owner, &small, None)?;
    grant_all(st, owner.id, user.id, &rig.functions, &des)?;

    let mut p = Phases {
        rows: Vec::new(),
        bench: "matcher",
        cfg: cfg.clone(),
    };
    let f = &rig.functions[0];
    let mut samples = Vec::with_capacity(reps.max(1));
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        let set = st.accessible_set(user.id, f)?;
        samples.push(t.elapsed());
        if set.covered.len() != des.len() {
            return Err(Error::Invalid("accessible set is missing granted DEs".into()));
        }
    }
    samples.sort();
    p.push("accessible_set", samples[samples.len() / 2], 1);
    let r = st.invoke_covered_only(user.id, f, Params::new())?;
    p.push("invoke_matching", r.timings.matching, 1);
    p.push("invoke_execution", r.timings.execution, 1);
    p.push("invoke_commit", r.timings.commit + r.timings.encryption, 1);
    Ok(p.rows)
}

/// Total time of a named phase across rows.
pub fn phase_seconds(rows: &[BenchRow], phase: &str) -> f64 {
    rows.iter().filter(|r| r.phase == phase).map(|r| r.seconds).sum()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_a_power_law() {
        let pts: Vec<(f64, f64)> = [1.0, 10.0, 100.0, 1000.0].iter().map(|&x| (x, 3.0 * x)).collect();
        assert!((log_log_slope(&pts) - 1.0).abs() < 1e-9);
        let pts: Vec<(f64, f64)> = [1.0f64, 10.0, 100.0].iter().map(|&x| (x, x.powf(0.5))).collect();
        assert!((log_log_slope(&pts) - 0.5).abs() < 1e-9);
    }
}
