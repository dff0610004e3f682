//! The `station` command line: the server, one client per agent role,
//! the benchmark harness, and the sandbox I/O helper used by subprocess
//! connectors.
//!
//! Settings come from flags, then environment variables, then the TOML
//! file named by `--config` / `STATION_CONFIG`. See `docs/cli.md`.

use std::io::{Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::bench::{self, BenchConfig, BenchRow, CSV_HEADER};
use crate::error::{Error, Result};
use crate::interceptor::wire::{self, IoRequest};
use crate::model::{AgentId, ContractId, DeId, FunctionId, PublicKey, ReleaseDecision, Role, StoredMode, TrustMode};
use crate::service::channel::serve;
use crate::service::client::{open_delivery, Client, Credentials, TcpTransport};
use crate::service::protocol::{Reply, Request};
use crate::service::{operator_approval_bytes, Service, ServiceConfig, ADMIN_AGENT};
use crate::station::{Station, StationConfig};

pub const DEFAULT_ADDR: &str = "127.0.0.1:7400";

#[derive(Parser, Debug)]
#[command(name = "station", version, about = "Policy-brokered data escrow station")]
pub struct Cli {
    /// TOML config file.
    #[arg(long, global = true, env = "STATION_CONFIG")]
    pub config: Option<PathBuf>,
    /// Station address, host:port.
    #[arg(long, global = true, env = "STATION_ADDR")]
    pub addr: Option<String>,
    /// Credentials file of the acting agent.
    #[arg(long, global = true, env = "STATION_IDENTITY")]
    pub identity: Option<PathBuf>,
    /// Trust mode (full-trust|near-zero-trust). Clients refuse a station
    /// running in another mode.
    #[arg(long = "trust", id = "trust", global = true, env = "STATION_MODE")]
    pub trust: Option<TrustMode>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run a station.
    Serve(ServeArgs),
    /// Create a credentials file (signing key and, by default, a symmetric key).
    Keygen {
        #[arg(long)]
        out: PathBuf,
        /// Omit the symmetric key (enough for full-trust stations and the admin).
        #[arg(long)]
        no_key: bool,
    },
    #[command(subcommand)]
    Owner(OwnerCmd),
    #[command(subcommand)]
    User(UserCmd),
    #[command(subcommand)]
    Operator(OperatorCmd),
    #[command(subcommand)]
    Admin(AdminCmd),
    /// Timing harness; runs an in-process station per configuration.
    Bench(BenchArgs),
    /// Sandbox I/O for subprocess connectors. Only works inside a run.
    #[command(subcommand)]
    Io(IoCmd),
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Storage directory.
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// Address to listen on.
    #[arg(long)]
    pub listen: Option<String>,
    /// Admin Ed25519 public key, hex.
    #[arg(long)]
    pub admin_key: Option<String>,
    /// Connector manifests to load at boot.
    #[arg(long = "connector")]
    pub connectors: Vec<PathBuf>,
    /// Do not flush writes to stable storage (tests only).
    #[arg(long)]
    pub no_fsync: bool,
}

#[derive(Args, Debug)]
pub struct RegisterArgs {
    #[arg(long)]
    pub name: String,
    /// Additional roles, e.g. `--also user`.
    #[arg(long, value_delimiter = ',')]
    pub also: Vec<RoleArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum RoleArg {
    Owner,
    User,
}

#[derive(Subcommand, Debug)]
pub enum DeCmd {
    /// Upload a file as a new DE; prints its id.
    Register {
        #[arg(long, default_value = "sealed")]
        mode: StoredMode,
        file: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
pub enum PolicyCmd {
    Create {
        #[arg(long)]
        grantee: u64,
        #[arg(long)]
        function: String,
        #[arg(long)]
        de: u64,
    },
    Delete {
        #[arg(long)]
        grantee: u64,
        #[arg(long)]
        function: String,
        #[arg(long)]
        de: u64,
    },
    List,
}

#[derive(Subcommand, Debug)]
pub enum LogCmd {
    Read,
}

#[derive(Subcommand, Debug)]
pub enum ContractCmd {
    Show { id: u64 },
    Sign { id: u64 },
}

#[derive(Subcommand, Debug)]
pub enum OwnerCmd {
    Register(RegisterArgs),
    #[command(subcommand)]
    De(DeCmd),
    #[command(subcommand)]
    Policy(PolicyCmd),
    /// Staged results waiting on this owner.
    Approvals,
    Approve { de: u64 },
    Deny { de: u64 },
    #[command(subcommand)]
    Log(LogCmd),
    #[command(subcommand)]
    Contract(ContractCmd),
    /// Send this agent's key to a restarted station.
    ResendKey,
}

#[derive(Subcommand, Debug)]
pub enum UserCmd {
    Register(RegisterArgs),
    Functions,
    Invoke {
        function: String,
        /// DEs for data-aware functions.
        #[arg(long = "de")]
        des: Vec<u64>,
        /// JSON object of parameters.
        #[arg(long, default_value = "")]
        params: String,
        /// Data-blind run over covered DEs only; never stages.
        #[arg(long)]
        covered_only: bool,
        /// Directory for delivered outputs.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Released results waiting to be fetched.
    Deliveries,
    Fetch {
        de: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    Provenance { de: u64 },
    Policies,
    #[command(subcommand)]
    Log(LogCmd),
    #[command(subcommand)]
    Contract(ContractCmd),
    ResendKey,
}

#[derive(Subcommand, Debug)]
pub enum OperatorCmd {
    /// Register with an approval signature from `station admin approve-operator`.
    Register {
        #[arg(long)]
        name: String,
        #[arg(long)]
        approval: String,
    },
    #[command(subcommand)]
    Contract(OperatorContractCmd),
    #[command(subcommand)]
    Log(LogCmd),
    ResendKey,
}

#[derive(Subcommand, Debug)]
pub enum OperatorContractCmd {
    Propose,
    Show { id: u64 },
    Sign { id: u64 },
}

#[derive(Subcommand, Debug)]
pub enum AdminCmd {
    /// Offline: sign an operator's public key (hex) with the admin identity.
    ApproveOperator { public_key: String },
    /// Print the public key (hex) of the identity file.
    PublicKey,
    Checkpoint {
        #[arg(long)]
        slots: Option<usize>,
    },
    VerifyAudit,
    RecoveryStatus,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BenchKind {
    Upload,
    Download,
    Matcher,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum RowFormat {
    Csv,
    Json,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    pub kind: BenchKind,
    #[arg(long, value_delimiter = ',', default_value = "10,100,1000")]
    pub des: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,10,50,100")]
    pub functions: Vec<usize>,
    /// DE size in bytes.
    #[arg(long, value_delimiter = ',', default_value = "10240")]
    pub size: Vec<usize>,
    /// Accessible-set queries per matcher configuration.
    #[arg(long, default_value_t = 9)]
    pub reps: usize,
    #[arg(long)]
    pub no_fsync: bool,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: RowFormat,
    /// Scratch directory.
    #[arg(long)]
    pub work_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum IoCmd {
    /// Names of the inputs this run may read.
    List,
    /// Write an input to stdout.
    Read { name: String },
    /// Emit stdin as an output. `--from` narrows its declared inputs.
    Put {
        #[arg(long = "from")]
        from: Vec<String>,
    },
    Params,
    ScratchPut { name: String },
    ScratchGet { name: String },
}

/// `station.toml`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub addr: Option<String>,
    pub identity: Option<PathBuf>,
    pub mode: Option<String>,
    /// Pinned station signing key, hex. Stations generate a new key per
    /// boot, so pinning suits short-lived deployments only.
    pub station_key: Option<String>,
    #[serde(default)]
    pub server: ServerConfig,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    pub root: Option<PathBuf>,
    pub listen: Option<String>,
    pub admin_public_key: Option<String>,
    #[serde(default)]
    pub connectors: Vec<PathBuf>,
    pub fsync: Option<bool>,
    pub sandbox_base: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
    }
}

struct Ctx {
    cli_addr: Option<String>,
    cli_identity: Option<PathBuf>,
    cli_mode: Option<TrustMode>,
    file: FileConfig,
    json: bool,
}

fn parse_hex32(s: &str, what: &str) -> Result<[u8; 32]> {
    let raw = hex::decode(s.trim()).map_err(|e| Error::Invalid(format!("{what}: {e}")))?;
    raw.try_into()
        .map_err(|_| Error::Invalid(format!("{what} must be 32 bytes")))
}

impl Ctx {
    fn mode(&self) -> Result<Option<TrustMode>> {
        if let Some(m) = self.cli_mode {
            return Ok(Some(m));
        }
        self.file
            .mode
            .as_deref()
            .map(|m| m.parse().map_err(Error::Invalid))
            .transpose()
    }

    fn identity_path(&self) -> Result<PathBuf> {
        self.cli_identity
            .clone()
            .or_else(|| self.file.identity.clone())
            .ok_or_else(|| Error::Invalid("no identity file; pass --identity or set STATION_IDENTITY".into()))
    }

    fn credentials(&self) -> Result<(PathBuf, Credentials)> {
        let path = self.identity_path()?;
        let creds = Credentials::load(&path)?;
        Ok((path, creds))
    }

    fn connect(&self) -> Result<Client<TcpTransport>> {
        let addr = self
            .cli_addr
            .clone()
            .or_else(|| self.file.addr.clone())
            .unwrap_or_else(|| DEFAULT_ADDR.to_string());
        let pinned = self
            .file
            .station_key
            .as_deref()
            .map(|k| parse_hex32(k, "station_key").map(PublicKey))
            .transpose()?;
        let mut client = Client::new(TcpTransport::connect(addr.as_str(), pinned.as_ref())?);
        let (_, mode) = client.attest()?;
        if let Some(expected) = self.mode()? {
            if expected != mode {
                return Err(Error::Invalid(format!("station runs {mode}, expected {expected}")));
            }
        }
        Ok(client)
    }

    /// Connects and logs in with the identity file.
    fn session(&self) -> Result<(Client<TcpTransport>, Credentials)> {
        let (_, creds) = self.credentials()?;
        let mut client = self.connect()?;
        let agent = creds
            .agent
            .ok_or_else(|| Error::Invalid("identity is not registered yet".into()))?;
        client.login(agent, creds.signer()?)?;
        Ok((client, creds))
    }

    fn admin_session(&self) -> Result<Client<TcpTransport>> {
        let (_, creds) = self.credentials()?;
        let mut client = self.connect()?;
        client.login(ADMIN_AGENT, creds.signer()?)?;
        Ok(client)
    }

    fn emit<T: Serialize>(&self, value: &T, human: impl FnOnce() -> String) {
        if self.json {
            println!("{}", serde_json::to_string(value).expect("output types serialize"));
        } else {
            println!("{}", human());
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let json = cli.json;
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let class = e.class();
            if json {
                eprintln!(
                    "{}",
                    serde_json::json!({ "error": e.to_string(), "class": format!("{class:?}") })
                );
            } else {
                eprintln!("error: {e}");
            }
            class.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let ctx = Ctx {
        cli_addr: cli.addr,
        cli_identity: cli.identity,
        cli_mode: cli.trust,
        file,
        json: cli.json,
    };
    match cli.command {
        Command::Serve(a) => serve_cmd(&ctx, a),
        Command::Keygen { out, no_key } => {
            if out.exists() {
                return Err(Error::Invalid(format!("{} already exists", out.display())));
            }
            let creds = Credentials::generate(!no_key);
            creds.save(&out)?;
            let pk = hex::encode(creds.signer()?.public_key().0);
            ctx.emit(&serde_json::json!({ "public_key": pk }), || format!("public key {pk}"));
            Ok(())
        }
        Command::Owner(c) => owner_cmd(&ctx, c),
        Command::User(c) => user_cmd(&ctx, c),
        Command::Operator(c) => operator_cmd(&ctx, c),
        Command::Admin(c) => admin_cmd(&ctx, c),
        Command::Bench(a) => bench_cmd(a),
        Command::Io(c) => io_cmd(c),
    }
}

fn serve_cmd(ctx: &Ctx, a: ServeArgs) -> Result<()> {
    let s = &ctx.file.server;
    let root = a
        .root
        .or_else(|| s.root.clone())
        .ok_or_else(|| Error::Invalid("no storage root; pass --root".into()))?;
    let mode = ctx.mode()?.unwrap_or(TrustMode::NearZeroTrust);
    let mut config = StationConfig::new(root, mode);
    config.fsync = !a.no_fsync && s.fsync.unwrap_or(true);
    config.sandbox_base = s.sandbox_base.clone();
    config.connectors = s.connectors.iter().cloned().chain(a.connectors).collect();
    config.limits.io_client = std::env::current_exe().ok();
    let admin = a
        .admin_key
        .or_else(|| s.admin_public_key.clone())
        .map(|k| parse_hex32(&k, "admin key").map(PublicKey))
        .transpose()?;
    let listen = a
        .listen
        .or_else(|| s.listen.clone())
        .unwrap_or_else(|| DEFAULT_ADDR.to_string());

    let station = Arc::new(Station::open(config)?);
    let status = station.recovery_status()?;
    let listener = TcpListener::bind(&listen)?;
    let info = serde_json::json!({
        "listen": listener.local_addr()?.to_string(),
        "mode": mode.to_string(),
        "session_id": hex::encode(station.session_id()),
        "station_key": hex::encode(station.identity().signing_public().0),
        "status": status,
    });
    ctx.emit(&info, || {
        format!(
            "station listening on {} ({mode})\nstation key {}\nstatus {:?}",
            info["listen"].as_str().unwrap_or_default(),
            info["station_key"].as_str().unwrap_or_default(),
            status
        )
    });
    let _ = std::io::stdout().flush();
    let service = Arc::new(Service::new(
        station,
        ServiceConfig {
            admin_public_key: admin,
            ..ServiceConfig::default()
        },
    ));
    serve(listener, service, Arc::new(AtomicBool::new(false)))
}

fn roles(primary: Role, also: &[RoleArg]) -> Vec<Role> {
    let mut r = vec![primary];
    for a in also {
        let role = match a {
            RoleArg::Owner => Role::Owner,
            RoleArg::User => Role::User,
        };
        if !r.contains(&role) {
            r.push(role);
        }
    }
    r
}

fn register(ctx: &Ctx, name: &str, roles: &[Role], approval: Option<Vec<u8>>) -> Result<()> {
    let (path, mut creds) = ctx.credentials()?;
    if let Some(a) = creds.agent {
        return Err(Error::Invalid(format!("identity is already registered as {a}")));
    }
    let mut client = ctx.connect()?;
    let key = creds.symmetric_key()?;
    if client.mode()?.encrypts() && key.is_none() {
        return Err(Error::Invalid("a near-zero-trust station needs a symmetric key; run keygen without --no-key".into()));
    }
    let id = client.register(name, roles, &creds.signer()?, key.as_ref(), approval)?;
    creds.agent = Some(id);
    creds.save(&path)?;
    ctx.emit(&serde_json::json!({ "agent": id.0 }), || format!("registered as {id}"));
    Ok(())
}

fn resend_key(ctx: &Ctx) -> Result<()> {
    let (_, creds) = ctx.credentials()?;
    let agent = creds
        .agent
        .ok_or_else(|| Error::Invalid("identity is not registered".into()))?;
    let key = creds
        .symmetric_key()?
        .ok_or_else(|| Error::Invalid("identity holds no symmetric key".into()))?;
    let mut client = ctx.connect()?;
    let status = client.resend_key(agent, &creds.signer()?, &key)?;
    ctx.emit(&status, || format!("{status:?}"));
    Ok(())
}

fn show(ctx: &Ctx, reply: &Reply) {
    ctx.emit(reply, || human(reply));
}

fn human(reply: &Reply) -> String {
    match reply {
        Reply::De(d) => d.0.to_string(),
        Reply::Agent(a) => a.0.to_string(),
        Reply::Deleted(b) => if *b { "deleted" } else { "no such policy" }.into(),
        Reply::Policy(p) => format!("{} may run {} on {}", p.agent, p.function, p.de),
        Reply::Policies(ps) => ps
            .iter()
            .map(|p| format!("{}\t{}\t{}", p.agent.0, p.function, p.de.0))
            .collect::<Vec<_>>()
            .join("\n"),
        Reply::Functions(fs) => fs
            .iter()
            .map(|f| {
                let params: Vec<String> = f.params.iter().map(|(n, t)| format!("{n}:{t}")).collect();
                format!("{}\t{}\t{:?}\t{}", f.name, f.app, f.kind, params.join(","))
            })
            .collect::<Vec<_>>()
            .join("\n"),
        Reply::Approvals(rs) => rs
            .iter()
            .map(|s| format!("{}\trequested by {} via {}", s.de.0, s.requester, s.function))
            .collect::<Vec<_>>()
            .join("\n"),
        Reply::Release(o) => format!("{o:?}"),
        Reply::Deliveries(ds) => ds.iter().map(|d| d.0.to_string()).collect::<Vec<_>>().join("\n"),
        Reply::Log(entries) => entries
            .iter()
            .map(|e| match &e.event {
                Some(ev) => format!("{}\t{}\t{ev:?}", e.seq, e.agent),
                None => format!("{}\t{}\t(encrypted for another agent)", e.seq, e.agent),
            })
            .collect::<Vec<_>>()
            .join("\n"),
        Reply::Contract(c) => format!(
            "contract {} by {}: {} of {} signatures",
            c.id.0,
            c.operator,
            c.signatures.len(),
            c.required.len()
        ),
        other => serde_json::to_string_pretty(other).expect("replies serialize"),
    }
}

fn sign_contract(client: &mut Client<TcpTransport>, creds: &Credentials, id: u64) -> Result<Reply> {
    let Reply::Contract(c) = client.call(Request::GetContract { contract: ContractId(id) })? else {
        return Err(Error::Encoding("unexpected reply".into()));
    };
    let signature = creds.signer()?.sign(&c.canonical_bytes());
    client.call(Request::SignContract {
        contract: ContractId(id),
        signature,
    })
}

fn contract_cmd(ctx: &Ctx, c: ContractCmd) -> Result<()> {
    let (mut client, creds) = ctx.session()?;
    let reply = match c {
        ContractCmd::Show { id } => client.call(Request::GetContract { contract: ContractId(id) })?,
        ContractCmd::Sign { id } => sign_contract(&mut client, &creds, id)?,
    };
    show(ctx, &reply);
    Ok(())
}

fn owner_cmd(ctx: &Ctx, c: OwnerCmd) -> Result<()> {
    let simple = |req: Request| -> Result<()> {
        let (mut client, _) = ctx.session()?;
        show(ctx, &client.call(req)?);
        Ok(())
    };
    match c {
        OwnerCmd::Register(a) => register(ctx, &a.name, &roles(Role::Owner, &a.also), None),
        OwnerCmd::De(DeCmd::Register { mode, file }) => {
            let data = std::fs::read(&file)?;
            let (mut client, creds) = ctx.session()?;
            let id = client.upload(&data, creds.symmetric_key()?.as_ref(), mode)?;
            show(ctx, &Reply::De(id));
            Ok(())
        }
        OwnerCmd::Policy(PolicyCmd::Create { grantee, function, de }) => simple(Request::CreatePolicy {
            grantee: AgentId(grantee),
            function: FunctionId::new(function),
            de: DeId(de),
        }),
        OwnerCmd::Policy(PolicyCmd::Delete { grantee, function, de }) => simple(Request::DeletePolicy {
            grantee: AgentId(grantee),
            function: FunctionId::new(function),
            de: DeId(de),
        }),
        OwnerCmd::Policy(PolicyCmd::List) => simple(Request::ListPolicies),
        OwnerCmd::Approvals => simple(Request::PendingApprovals),
        OwnerCmd::Approve { de } => simple(Request::ApproveRelease {
            de: DeId(de),
            decision: ReleaseDecision::Grant,
        }),
        OwnerCmd::Deny { de } => simple(Request::ApproveRelease {
            de: DeId(de),
            decision: ReleaseDecision::Deny,
        }),
        OwnerCmd::Log(LogCmd::Read) => simple(Request::ReadOwnerLog),
        OwnerCmd::Contract(c) => contract_cmd(ctx, c),
        OwnerCmd::ResendKey => resend_key(ctx),
    }
}

#[derive(Serialize)]
struct Written {
    de: Option<u64>,
    path: PathBuf,
    bytes: usize,
}

fn write_output(out: &Path, name: &str, data: &[u8]) -> Result<PathBuf> {
    std::fs::create_dir_all(out)?;
    let path = out.join(name);
    std::fs::write(&path, data)?;
    Ok(path)
}

fn user_cmd(ctx: &Ctx, c: UserCmd) -> Result<()> {
    let simple = |req: Request| -> Result<()> {
        let (mut client, _) = ctx.session()?;
        show(ctx, &client.call(req)?);
        Ok(())
    };
    match c {
        UserCmd::Register(a) => register(ctx, &a.name, &roles(Role::User, &a.also), None),
        UserCmd::Functions => simple(Request::ListFunctions),
        UserCmd::Invoke {
            function,
            des,
            params,
            covered_only,
            out,
        } => {
            let (mut client, creds) = ctx.session()?;
            let request = if covered_only {
                Request::InvokeCoveredOnly {
                    function: FunctionId::new(function),
                    params,
                }
            } else {
                Request::Invoke {
                    function: FunctionId::new(function),
                    params,
                    des: (!des.is_empty()).then(|| des.into_iter().map(DeId).collect()),
                }
            };
            let Reply::Invoked(r) = client.call(request)? else {
                return Err(Error::Encoding("unexpected reply".into()));
            };
            let agent = creds.agent.expect("session implies registration");
            let key = creds.symmetric_key()?;
            let mut written = Vec::new();
            for (i, d) in r.deliveries.iter().enumerate() {
                let data = open_delivery(agent, key.as_ref(), d)?;
                let name = match d.de {
                    Some(de) => format!("de-{}.out", de.0),
                    None => format!("inv-{}-{i}.out", r.invocation.0),
                };
                written.push(Written {
                    de: d.de.map(|x| x.0),
                    path: write_output(&out, &name, &data)?,
                    bytes: data.len(),
                });
            }
            let summary = serde_json::json!({
                "invocation": r.invocation.0,
                "status": r.status,
                "outputs": written,
                "staged": r.staged.iter().map(|d| d.0).collect::<Vec<_>>(),
                "violations": r.violations,
            });
            ctx.emit(&summary, || {
                let mut s = format!("invocation {}: {:?}", r.invocation.0, r.status);
                for w in &written {
                    s.push_str(&format!("\nwrote {} ({} bytes)", w.path.display(), w.bytes));
                }
                for d in &r.staged {
                    s.push_str(&format!("\nstaged {} pending owner approval", d.0));
                }
                s
            });
            Ok(())
        }
        UserCmd::Deliveries => simple(Request::PendingDeliveries),
        UserCmd::Fetch { de, out } => {
            let (mut client, creds) = ctx.session()?;
            let d = client.fetch_released(DeId(de))?;
            let data = open_delivery(creds.agent.expect("registered"), creds.symmetric_key()?.as_ref(), &d)?;
            let w = Written {
                de: Some(de),
                path: write_output(&out, &format!("de-{de}.out"), &data)?,
                bytes: data.len(),
            };
            ctx.emit(&w, || format!("wrote {} ({} bytes)", w.path.display(), w.bytes));
            Ok(())
        }
        UserCmd::Provenance { de } => simple(Request::ProvenanceOf { de: DeId(de) }),
        UserCmd::Policies => simple(Request::ListPolicies),
        UserCmd::Log(LogCmd::Read) => simple(Request::ReadOwnerLog),
        UserCmd::Contract(c) => contract_cmd(ctx, c),
        UserCmd::ResendKey => resend_key(ctx),
    }
}

fn operator_cmd(ctx: &Ctx, c: OperatorCmd) -> Result<()> {
    match c {
        OperatorCmd::Register { name, approval } => {
            let sig = hex::decode(approval.trim()).map_err(|e| Error::Invalid(format!("approval: {e}")))?;
            register(ctx, &name, &[Role::Operator], Some(sig))
        }
        OperatorCmd::Contract(c) => {
            let (mut client, creds) = ctx.session()?;
            let reply = match c {
                OperatorContractCmd::Propose => client.call(Request::ProposeContract)?,
                OperatorContractCmd::Show { id } => client.call(Request::GetContract { contract: ContractId(id) })?,
                OperatorContractCmd::Sign { id } => sign_contract(&mut client, &creds, id)?,
            };
            show(ctx, &reply);
            Ok(())
        }
        OperatorCmd::Log(LogCmd::Read) => {
            let (mut client, _) = ctx.session()?;
            show(ctx, &client.call(Request::ReadOperatorLog)?);
            Ok(())
        }
        OperatorCmd::ResendKey => resend_key(ctx),
    }
}

fn admin_cmd(ctx: &Ctx, c: AdminCmd) -> Result<()> {
    match c {
        AdminCmd::ApproveOperator { public_key } => {
            let (_, creds) = ctx.credentials()?;
            let pk = PublicKey(parse_hex32(&public_key, "public key")?);
            let sig = hex::encode(creds.signer()?.sign(&operator_approval_bytes(&pk)));
            ctx.emit(&serde_json::json!({ "approval": sig }), || sig.clone());
            Ok(())
        }
        AdminCmd::PublicKey => {
            let (_, creds) = ctx.credentials()?;
            let pk = hex::encode(creds.signer()?.public_key().0);
            ctx.emit(&serde_json::json!({ "public_key": pk }), || pk.clone());
            Ok(())
        }
        AdminCmd::Checkpoint { slots } => {
            let mut client = ctx.admin_session()?;
            show(ctx, &client.call(Request::AdminCheckpoint { slots })?);
            Ok(())
        }
        AdminCmd::VerifyAudit => {
            let mut client = ctx.admin_session()?;
            show(ctx, &client.call(Request::VerifyAuditChain)?);
            Ok(())
        }
        AdminCmd::RecoveryStatus => {
            let mut client = ctx.connect()?;
            let s = client.recovery_status()?;
            ctx.emit(&s, || format!("{s:?}"));
            Ok(())
        }
    }
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    let work_dir = a
        .work_dir
        .unwrap_or_else(|| std::env::temp_dir().join(format!("station-bench-{}", std::process::id())));
    let print = |rows: &[BenchRow]| {
        for r in rows {
            match a.format {
                RowFormat::Csv => println!("{}", r.csv()),
                RowFormat::Json => println!("{}", serde_json::to_string(r).expect("rows serialize")),
            }
        }
        let _ = std::io::stdout().flush();
    };
    if let RowFormat::Csv = a.format {
        println!("{CSV_HEADER}");
    }
    let result = (|| {
        for mode in [TrustMode::FullTrust, TrustMode::NearZeroTrust] {
            for &des in &a.des {
                for &functions in &a.functions {
                    for &size in &a.size {
                        let cfg = BenchConfig {
                            mode,
                            des,
                            functions,
                            de_size: size,
                            fsync: !a.no_fsync,
                            work_dir: work_dir.clone(),
                        };
                        let rows = match a.kind {
                            BenchKind::Upload => bench::upload(&cfg)?,
                            BenchKind::Download => bench::download(&cfg)?,
                            BenchKind::Matcher => bench::matcher(&cfg, a.reps)?,
                        };
                        print(&rows);
                    }
                }
            }
        }
        Ok(())
    })();
    let _ = std::fs::remove_dir_all(&work_dir);
    result
}

fn io_cmd(c: IoCmd) -> Result<()> {
    let socket = std::env::var_os("STATION_IO_SOCKET")
        .map(PathBuf::from)
        .ok_or_else(|| Error::Invalid("STATION_IO_SOCKET is not set; `io` only works inside a station run".into()))?;
    let mut stdout = std::io::stdout().lock();
    match c {
        IoCmd::List => {
            let (resp, _) = wire::call(&socket, &IoRequest::List, &[])?;
            for n in resp.names {
                writeln!(stdout, "{n}")?;
            }
        }
        IoCmd::Read { name } => {
            let (_, body) = wire::call(&socket, &IoRequest::Read { name }, &[])?;
            stdout.write_all(&body)?;
        }
        IoCmd::Put { from } => {
            let mut body = Vec::new();
            std::io::stdin().read_to_end(&mut body)?;
            let inputs = (!from.is_empty()).then_some(from);
            wire::call(&socket, &IoRequest::Put { inputs }, &body)?;
        }
        IoCmd::Params => {
            let (_, body) = wire::call(&socket, &IoRequest::Params, &[])?;
            stdout.write_all(&body)?;
        }
        IoCmd::ScratchPut { name } => {
            let mut body = Vec::new();
            std::io::stdin().read_to_end(&mut body)?;
            wire::call(&socket, &IoRequest::ScratchPut { name }, &body)?;
        }
        IoCmd::ScratchGet { name } => {
            let (_, body) = wire::call(&socket, &IoRequest::ScratchGet { name }, &[])?;
            stdout.write_all(&body)?;
        }
    }
    stdout.flush()?;
    Ok(())
}
