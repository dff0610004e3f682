//! Runs oracle scenario scripts against a real station and records what
//! the oracles need.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use station_core::crypto::{resend_proof_bytes, sha256, SignedCiphertext, SigningIdentity, SymmetricKey};
use station_core::durability::{FaultPlan, SlotSelection};
use station_core::functions::{ParamValue, Params};
use station_core::model::{AgentId, DeId, FunctionId, ReleaseDecision, Role, RoleSet, StoredMode, TrustMode};
use station_core::registry::Registry;
use station_core::station::{NewAgent, RecoveryStatus, Station, StationConfig};
use station_core::{Error, Result};
use station_oracles::{Action, Field, LeakTrace, StateSnapshot, TraceEvent};

use super::{config, Who};

pub const FUNCTIONS: [&str; 4] = ["download", "concat", "index", "search"];

/// Dependency edges of the connectors above, written out by hand.
pub fn edges() -> Vec<(String, String)> {
    vec![("search".into(), "index".into())]
}

pub fn snapshot(reg: &Registry) -> StateSnapshot {
    let s = reg.state();
    let mut snap = StateSnapshot::new();
    for t in ["agents", "des", "policies", "provenance", "staged", "outbox", "contracts", "counters"] {
        snap.table(t);
    }
    for a in s.agents.values() {
        snap.row(
            "agents",
            vec![
                Field::U64(a.id.0),
                Field::Str(a.display_name.clone()),
                Field::U64(a.roles.bits() as u64),
                Field::Bytes(a.public_key.0.to_vec()),
                Field::Bool(a.keyed),
            ],
        );
    }
    // Blob names are left out: near-zero-trust ciphertexts carry random
    // nonces, so equal states can store different bytes.
    for d in s.des.values() {
        snap.row(
            "des",
            vec![
                Field::U64(d.id.0),
                Field::U64(d.owner.0),
                Field::Str(format!("{:?}/{:?}", d.kind, d.stored_mode)),
                d.enc_key.map(|a| Field::U64(a.0)).unwrap_or(Field::None),
                Field::Bytes(d.content_digest.to_vec()),
                Field::U64(d.size),
            ],
        );
    }
    for (t, seq) in &s.policies {
        snap.row(
            "policies",
            vec![Field::U64(t.agent.0), Field::Str(t.function.to_string()), Field::U64(t.de.0), Field::U64(*seq)],
        );
    }
    for p in s.provenance.values() {
        snap.row(
            "provenance",
            vec![
                Field::U64(p.output_de.0),
                Field::List(p.inputs.iter().map(|d| d.0).collect()),
                Field::Str(p.function.to_string()),
                Field::U64(p.invocation.0),
            ],
        );
    }
    for st in s.staged.values() {
        let mut row = vec![
            Field::U64(st.de.0),
            Field::U64(st.requester.0),
            Field::Str(st.function.to_string()),
            Field::U64(st.invocation.0),
            Field::List(st.approved.iter().map(|a| a.0).collect()),
        ];
        for (o, des) in &st.pending {
            row.push(Field::U64(o.0));
            row.push(Field::List(des.iter().map(|d| d.0).collect()));
        }
        snap.row("staged", row);
    }
    for (a, des) in &s.outbox {
        snap.row("outbox", vec![Field::U64(a.0), Field::List(des.iter().map(|d| d.0).collect())]);
    }
    for c in s.contracts.values() {
        let mut row = vec![
            Field::U64(c.id.0),
            Field::U64(c.operator.0),
            Field::List(c.required.iter().map(|a| a.0).collect()),
        ];
        for (a, sig) in &c.signatures {
            row.push(Field::U64(a.0));
            row.push(Field::Bytes(sig.clone()));
        }
        snap.row("contracts", row);
    }
    snap.row(
        "counters",
        vec![
            Field::U64(s.next_agent),
            Field::U64(s.next_de),
            Field::U64(s.next_contract),
            Field::U64(s.policy_seq),
        ],
    );
    snap
}

pub fn state_hash(st: &Station) -> [u8; 32] {
    station_oracles::oracle_state_hash(&snapshot(&st.registry()))
}

/// Identity derived from the scenario seed, so reruns produce identical
/// registries.
pub fn who(seed: u64, index: usize, id: AgentId) -> Who {
    let s = sha256(&[b"sign", &seed.to_be_bytes(), &(index as u64).to_be_bytes()]);
    let k = sha256(&[b"key", &seed.to_be_bytes(), &(index as u64).to_be_bytes()]);
    Who {
        id,
        signer: SigningIdentity::from_seed(s),
        key: SymmetricKey::from_bytes(k),
    }
}

pub struct Driver {
    pub root: std::path::PathBuf,
    pub mode: TrustMode,
    pub seed: u64,
    pub station: Option<Station>,
    pub agents: Vec<(Who, RoleSet)>,
    /// Registered DEs and the index of their owner in `agents`.
    pub des: Vec<(DeId, usize)>,
    pub policies: Vec<(usize, AgentId, FunctionId, DeId)>,
    pub staged_fn: BTreeMap<DeId, String>,
    pub trace: LeakTrace,
    pub step: usize,
    pub delivered: usize,
    pub staged: usize,
    pub tweak: fn(&mut StationConfig),
    /// Faults for the station currently up; cleared by every reboot.
    pub faults: FaultPlan,
    rng: ChaCha8Rng,
}

fn no_tweak(_: &mut StationConfig) {}

impl Driver {
    pub fn new(root: &Path, mode: TrustMode, seed: u64) -> Self {
        Self::with_config(root, mode, seed, no_tweak)
    }

    pub fn with_config(root: &Path, mode: TrustMode, seed: u64, tweak: fn(&mut StationConfig)) -> Self {
        Self::build(root, mode, seed, tweak, FaultPlan::default())
    }

    pub fn with_faults(root: &Path, mode: TrustMode, seed: u64, faults: FaultPlan) -> Self {
        Self::build(root, mode, seed, no_tweak, faults)
    }

    fn build(root: &Path, mode: TrustMode, seed: u64, tweak: fn(&mut StationConfig), faults: FaultPlan) -> Self {
        let mut d = Driver {
            root: root.to_path_buf(),
            mode,
            seed,
            station: None,
            agents: Vec::new(),
            des: Vec::new(),
            policies: Vec::new(),
            staged_fn: BTreeMap::new(),
            trace: LeakTrace::new(),
            step: 0,
            delivered: 0,
            staged: 0,
            tweak,
            faults,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed),
        };
        d.station = Some(Station::open(d.config()).unwrap());
        d
    }

    pub fn config(&self) -> StationConfig {
        let mut c = config(&self.root, self.mode);
        (self.tweak)(&mut c);
        c.faults = self.faults.clone();
        c
    }

    pub fn st(&self) -> &Station {
        self.station.as_ref().expect("station is up")
    }

    fn open(&self, payload: &[u8], agent: usize) -> Vec<u8> {
        if self.mode.encrypts() {
            let w = &self.agents[agent].0;
            w.key.open(&station_core::crypto::blob_aad(w.id), payload).unwrap()
        } else {
            payload.to_vec()
        }
    }

    fn agent_index(&self, id: AgentId) -> usize {
        self.agents.iter().position(|(w, _)| w.id == id).unwrap()
    }

    fn deliver(&mut self, recipient: usize, function: &str, payload: &[u8]) {
        let plain = self.open(payload, recipient);
        self.delivered += 1;
        self.trace.push(TraceEvent::Delivered {
            step: self.step,
            recipient: self.agents[recipient].0.id.0,
            function: function.to_string(),
            payload: plain,
        });
    }

    /// Applies one action. `Ok(false)` means its preconditions did not
    /// hold or the station refused it; errors are injected crashes and
    /// anything unexpected.
    pub fn apply(&mut self, action: &Action) -> Result<bool> {
        self.step += 1;
        match self.apply_inner(action) {
            Ok(applied) => Ok(applied),
            Err(
                e @ (Error::InjectedCrash
                | Error::Poisoned
                | Error::Io(_)
                | Error::IntegrityAlarm(_)
                | Error::Integrity(_)
                | Error::Encoding(_)),
            ) => Err(e),
            Err(_) => Ok(false),
        }
    }

    fn apply_inner(&mut self, action: &Action) -> Result<bool> {
        if self.station.is_none() && *action != Action::Recover {
            return Ok(false);
        }
        match action {
            Action::RegisterAgent { owner, user } => {
                let mut roles = RoleSet::empty();
                if *owner {
                    roles = roles.with(Role::Owner);
                }
                if *user {
                    roles = roles.with(Role::User);
                }
                let expected = self.st().registry().next_agent_id();
                let w = who(self.seed, self.agents.len(), expected);
                let r = self.st().register_agent(NewAgent {
                    name: format!("agent{}", self.agents.len()),
                    roles,
                    public_key: w.signer.public_key(),
                    key: Some(w.key.clone()),
                });
                if let Err(Error::InjectedCrash) = r {
                    // The record may be durable; recovery will want this key.
                    self.agents.push((w, roles));
                    return Err(Error::InjectedCrash);
                }
                let id = r?;
                assert_eq!(id, expected);
                self.agents.push((w, roles));
            }
            Action::RegisterDe { owner, enclave, token, filler } => {
                let owners: Vec<usize> = (0..self.agents.len())
                    .filter(|i| self.agents[*i].1.contains(Role::Owner))
                    .collect();
                if owners.is_empty() {
                    return Ok(false);
                }
                let oi = owners[owner % owners.len()];
                let w = &self.agents[oi].0;
                let content = format!("{token} {filler}");
                let up = SignedCiphertext::for_mode(self.mode, w.id, Some(&w.key), &w.signer, content.as_bytes());
                let mode = if *enclave { StoredMode::Enclave } else { StoredMode::Sealed };
                let de = self.st().register_de(w.id, &up, mode)?;
                self.des.push((de, oi));
                self.trace.push(TraceEvent::Registered { de: de.0, token: token.clone() });
            }
            Action::CreatePolicy { de, grantee, function } => {
                if self.des.is_empty() {
                    return Ok(false);
                }
                let (de, oi) = self.des[de % self.des.len()];
                let g = self.agents[grantee % self.agents.len()].0.id;
                let f = FunctionId::new(FUNCTIONS[*function % FUNCTIONS.len()]);
                let owner = self.agents[oi].0.id;
                if self.policies.iter().any(|(_, a, pf, d)| *a == g && *pf == f && *d == de) {
                    return Ok(false);
                }
                self.st().create_policy(owner, g, f.clone(), de)?;
                self.trace.push(TraceEvent::Authorized((g.0, f.to_string(), de.0)));
                self.policies.push((oi, g, f, de));
            }
            Action::DeletePolicy { policy } => {
                if self.policies.is_empty() {
                    return Ok(false);
                }
                let i = policy % self.policies.len();
                let (oi, g, f, de) = self.policies[i].clone();
                self.st().delete_policy(self.agents[oi].0.id, g, f.clone(), de)?;
                self.policies.remove(i);
                self.trace.push(TraceEvent::Revoked((g.0, f.to_string(), de.0)));
            }
            Action::Invoke { caller, function, declared, covered_only } => {
                let ci = caller % self.agents.len();
                let c = self.agents[ci].0.id;
                let fname = FUNCTIONS[*function % FUNCTIONS.len()];
                let f = FunctionId::new(fname);
                let r = if fname == "download" {
                    if self.des.is_empty() {
                        return Ok(false);
                    }
                    let des = declared.iter().map(|i| self.des[i % self.des.len()].0).collect();
                    self.st().invoke(c, &f, Params::new(), Some(des))?
                } else {
                    let mut p = Params::new();
                    if fname == "search" {
                        p.insert("query".into(), ParamValue::String("river".into()));
                    }
                    if *covered_only {
                        self.st().invoke_covered_only(c, &f, p)?
                    } else {
                        self.st().invoke(c, &f, p, None)?
                    }
                };
                for d in &r.deliveries {
                    self.deliver(ci, fname, &d.payload);
                }
                for s in &r.staged {
                    self.staged += 1;
                    self.staged_fn.insert(*s, fname.to_string());
                }
            }
            Action::Decide { staged, owner, grant } => {
                let all: Vec<_> = self.st().registry().state().staged.values().cloned().collect();
                if all.is_empty() {
                    return Ok(false);
                }
                let s = &all[staged % all.len()];
                let pending: Vec<AgentId> = s.pending_owners().into_iter().collect();
                let o = pending[owner % pending.len()];
                let decision = if *grant { ReleaseDecision::Grant } else { ReleaseDecision::Deny };
                self.st().approve_release(o, s.de, decision)?;
                if *grant {
                    for d in &s.pending[&o] {
                        self.trace
                            .push(TraceEvent::Authorized((s.requester.0, s.function.to_string(), d.0)));
                    }
                }
            }
            Action::Fetch { agent } => {
                let ai = agent % self.agents.len();
                let a = self.agents[ai].0.id;
                // One delivery per action, so every action writes at most
                // one log record.
                let Some(de) = self.st().pending_deliveries(a).into_iter().next() else {
                    return Ok(false);
                };
                let f = self.st().registry().state().provenance[&de].function.to_string();
                let got = self.st().fetch_released(a, de)?;
                self.deliver(ai, &f, &got.payload);
            }
            Action::Checkpoint { slots } => {
                self.st().checkpoint(Some(*slots), SlotSelection::LowestIds)?;
            }
            Action::Crash => {
                self.station = None;
            }
            Action::Recover => {
                if self.station.is_some() {
                    return Ok(false);
                }
                self.recover(None)?;
            }
        }
        Ok(true)
    }

    /// Reboots and resends every key, in a shuffled order unless `order`
    /// is given.
    pub fn recover(&mut self, order: Option<Vec<usize>>) -> Result<()> {
        self.reopen(FaultPlan::default(), order)
    }

    /// Reboots with `faults` armed and resends every key. Agents whose
    /// registration never became durable are dropped.
    pub fn reopen(&mut self, faults: FaultPlan, order: Option<Vec<usize>>) -> Result<()> {
        self.station = None;
        self.faults = faults;
        let st = Station::open(self.config())?;
        let order = order.unwrap_or_else(|| {
            let mut o: Vec<usize> = (0..self.agents.len()).collect();
            o.shuffle(&mut self.rng);
            o
        });
        let mut status = st.recovery_status()?;
        for i in order {
            let w = &self.agents[i].0;
            let proof = w.signer.sign(&resend_proof_bytes(&st.session_id(), w.id, &w.key));
            match st.resend_key(w.id, w.key.clone(), &proof) {
                Ok(s) => status = s,
                Err(Error::UnknownAgent(_)) => {}
                Err(e) => return Err(e),
            }
        }
        if status != RecoveryStatus::Ready {
            status = st.recovery_status()?;
        }
        assert_eq!(status, RecoveryStatus::Ready, "seed {}", self.seed);
        let known = st.registry().state().agents.len();
        self.agents.retain(|(w, _)| w.id.0 <= known as u64);
        self.station = Some(st);
        Ok(())
    }
}
