//! Drives the `station` binary end to end: a server process plus owner,
//! user, operator and admin clients over TCP.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_station");

fn connectors() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("connectors")
}

struct Server {
    child: Child,
    addr: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn start(root: &Path, mode: &str, admin_key: &str) -> Server {
    let mut child = Command::new(BIN)
        .args(["--json", "--trust", mode, "serve", "--no-fsync", "--listen", "127.0.0.1:0"])
        .arg("--root")
        .arg(root.join("station"))
        .args(["--admin-key", admin_key])
        .arg("--connector")
        .arg(connectors().join("download.toml"))
        .arg("--connector")
        .arg(connectors().join("shell-tools/manifest.toml"))
        .env_remove("STATION_CONFIG")
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let info: serde_json::Value = serde_json::from_str(&line).unwrap();
    Server {
        child,
        addr: info["listen"].as_str().unwrap().to_string(),
    }
}

struct Agent<'a> {
    server: &'a Server,
    identity: PathBuf,
}

impl Agent<'_> {
    fn run(&self, args: &[&str]) -> Output {
        Command::new(BIN)
            .arg("--json")
            .args(["--addr", &self.server.addr])
            .arg("--identity")
            .arg(&self.identity)
            .args(args)
            .env_remove("STATION_CONFIG")
            .env_remove("STATION_MODE")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> serde_json::Value {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        let text = String::from_utf8(out.stdout).unwrap();
        serde_json::from_str(text.lines().last().unwrap_or("null")).unwrap()
    }
}

fn keygen(dir: &Path, name: &str, no_key: bool) -> (PathBuf, String) {
    let path = dir.join(format!("{name}.json"));
    let mut cmd = Command::new(BIN);
    cmd.args(["--json", "keygen", "--out"]).arg(&path);
    if no_key {
        cmd.arg("--no-key");
    }
    let out = cmd.output().unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    (path, v["public_key"].as_str().unwrap().to_string())
}

#[test]
fn full_workflow_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let (admin_id, admin_pk) = keygen(dir.path(), "admin", true);
    let server = start(dir.path(), "near-zero-trust", &admin_pk);
    let (owner_id, _) = keygen(dir.path(), "owner", false);
    let (user_id, _) = keygen(dir.path(), "user", false);
    let (op_id, op_pk) = keygen(dir.path(), "operator", false);
    let owner = Agent { server: &server, identity: owner_id };
    let user = Agent { server: &server, identity: user_id };
    let operator = Agent { server: &server, identity: op_id };
    let admin = Agent { server: &server, identity: admin_id };

    owner.ok(&["owner", "register", "--name", "alice"]);
    let uid = user.ok(&["user", "register", "--name", "bob"])["agent"].as_u64().unwrap();

    let file = dir.path().join("report.txt");
    std::fs::write(&file, "one two three\nfour five\n").unwrap();
    let de = owner.ok(&["owner", "de", "register", "--mode", "sealed", file.to_str().unwrap()]);
    let de = de["De"].as_u64().unwrap().to_string();

    // No policy: the sealed DE is invisible, so the download is denied.
    let out_dir = dir.path().join("out");
    let r = user.ok(&["user", "invoke", "download", "--de", &de, "--out", out_dir.to_str().unwrap()]);
    assert!(r["status"]["Denied"].is_object(), "{r}");
    assert!(!out_dir.exists() || std::fs::read_dir(&out_dir).unwrap().next().is_none());

    owner.ok(&["owner", "policy", "create", "--grantee", &uid.to_string(), "--function", "download", "--de", &de]);
    let r = user.ok(&["user", "invoke", "download", "--de", &de, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(r["status"], "Delivered");
    let written = PathBuf::from(r["outputs"][0]["path"].as_str().unwrap());
    assert_eq!(std::fs::read(written).unwrap(), std::fs::read(&file).unwrap());

    // A subprocess connector over an enclave DE stages; the owner releases.
    let notes = dir.path().join("notes.txt");
    std::fs::write(&notes, "alpha beta gamma delta").unwrap();
    owner.ok(&["owner", "de", "register", "--mode", "enclave", notes.to_str().unwrap()]);
    let r = user.ok(&["user", "invoke", "wordcount", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(r["status"], "Staged", "{r}");
    let staged = r["staged"][0].as_u64().unwrap().to_string();
    let approvals = owner.ok(&["owner", "approvals"]);
    assert_eq!(approvals["Approvals"].as_array().unwrap().len(), 1);
    owner.ok(&["owner", "approve", &staged]);
    let f = user.ok(&["user", "fetch", &staged, "--out", out_dir.to_str().unwrap()]);
    let counted = std::fs::read_to_string(f["path"].as_str().unwrap()).unwrap();
    assert_eq!(counted.trim(), "4");

    // Operators: registration needs the admin's signature; reading the
    // log needs every agent's signature on a contract.
    let approval = admin.ok(&["admin", "approve-operator", &op_pk])["approval"]
        .as_str()
        .unwrap()
        .to_string();
    operator.ok(&["operator", "register", "--name", "ops", "--approval", &approval]);
    let denied = operator.run(&["operator", "log", "read"]);
    assert_eq!(denied.status.code(), Some(4), "{}", String::from_utf8_lossy(&denied.stderr));
    let c = operator.ok(&["operator", "contract", "propose"]);
    let cid = c["Contract"]["id"].as_u64().unwrap().to_string();
    owner.ok(&["owner", "contract", "sign", &cid]);
    user.ok(&["user", "contract", "sign", &cid]);
    assert_eq!(operator.run(&["operator", "log", "read"]).status.code(), Some(4));
    operator.ok(&["operator", "contract", "sign", &cid]);
    let log = operator.ok(&["operator", "log", "read"]);
    assert!(log["Log"].as_array().unwrap().len() > 10);

    // Owners see their own log entries, including the release.
    let log = owner.ok(&["owner", "log", "read"]);
    assert!(log.to_string().contains("DeReleased"));

    let chain = admin.ok(&["admin", "verify-audit"]);
    assert!(chain["Chain"]["Ok"].is_object(), "{chain}");
    admin.ok(&["admin", "checkpoint"]);
}

#[test]
fn exit_codes_follow_failure_classes() {
    let dir = tempfile::tempdir().unwrap();
    let (_, admin_pk) = keygen(dir.path(), "admin", true);
    let server = start(dir.path(), "full-trust", &admin_pk);
    let (id, _) = keygen(dir.path(), "u", true);
    let u = Agent { server: &server, identity: id };
    // Not registered yet: a validation failure.
    assert_eq!(u.run(&["user", "functions"]).status.code(), Some(5));
    u.ok(&["user", "register", "--name", "carol"]);
    assert!(u.ok(&["user", "functions"])["Functions"].as_array().unwrap().len() >= 3);
    // Users cannot upload data: authorization.
    let f = dir.path().join("x");
    std::fs::write(&f, b"x").unwrap();
    assert_eq!(u.run(&["owner", "de", "register", f.to_str().unwrap()]).status.code(), Some(4));
    // Unknown function: not found.
    assert_eq!(u.run(&["user", "invoke", "nope"]).status.code(), Some(6));
    // Bad usage: clap's code.
    assert_eq!(u.run(&["user", "invoke"]).status.code(), Some(2));
    // Wrong expected mode.
    let out = Command::new(BIN)
        .args(["--trust", "near-zero-trust", "--addr", &server.addr, "admin", "recovery-status"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(5));
}
