//! Invocation brokering: intents, policy matching, sandboxed execution,
//! provenance, delivery and the staging zone.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::audit::{LogPayload, Outcome};
use crate::broker::PolicyBroker;
use crate::crypto::{blob_aad, sha256};
use crate::error::{Error, Result};
use crate::functions::{Entrypoint, Params};
use crate::interceptor::{launch, ContextInit, ExecutionContext, Output, Program};
use crate::model::{
    AgentId, DataElement, DeId, DeKind, FunctionId, FunctionKind, InvocationId, ProvenanceRecord,
    ReleaseDecision, StagedResult, StoredMode,
};
use crate::registry::{DerivedOutput, ReleaseOutcome, Update};
use crate::station::{decrypt_de, Station, StoredDes};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InvocationStatus {
    Delivered,
    /// At least one output is held in the staging zone.
    Staged,
    Denied { reason: String },
    Failed { diagnostics: String },
}

/// One result handed to the caller.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivery {
    /// Set when the output was kept as a derived DE.
    pub de: Option<DeId>,
    /// Sealed under the caller's key in near-zero-trust mode.
    pub payload: Vec<u8>,
    pub encrypted: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub matching: Duration,
    pub execution: Duration,
    pub encryption: Duration,
    pub commit: Duration,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvokeResult {
    pub invocation: InvocationId,
    pub status: InvocationStatus,
    pub deliveries: Vec<Delivery>,
    pub staged: Vec<DeId>,
    pub violations: Vec<String>,
    pub timings: PhaseTimings,
}

/// Transitive provenance of a DE.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceClosure {
    pub records: Vec<ProvenanceRecord>,
    /// Every DE that contributed, derived and registered.
    pub des: BTreeSet<DeId>,
}

struct Prepared {
    invocation: InvocationId,
    visible: BTreeSet<DeId>,
    reader: StoredDes,
    program: Program,
    retain: bool,
    trusted_inputs: bool,
}

impl Station {
    /// Runs `function` for `caller`. Data-aware functions name their inputs
    /// in `declared`; data-blind functions see whatever the caller may use.
    pub fn invoke(
        &self,
        caller: AgentId,
        function: &FunctionId,
        params: Params,
        declared: Option<Vec<DeId>>,
    ) -> Result<InvokeResult> {
        self.invoke_inner(caller, function, params, declared, false)
    }

    /// Data-blind invocation over policy-covered DEs only. The result is
    /// always deliverable.
    pub fn invoke_covered_only(&self, caller: AgentId, function: &FunctionId, params: Params) -> Result<InvokeResult> {
        self.invoke_inner(caller, function, params, None, true)
    }

    fn invoke_inner(
        &self,
        caller: AgentId,
        function: &FunctionId,
        params: Params,
        declared: Option<Vec<DeId>>,
        covered_only: bool,
    ) -> Result<InvokeResult> {
        self.ready()?;
        self.agent(caller)?;
        let def = self.functions.read().get(function)?.clone();
        def.check_params(&params)?;
        match (def.kind, &declared) {
            (FunctionKind::DataAware, None) => {
                return Err(Error::Invalid(format!("{function} is data-aware and needs declared DEs")))
            }
            (FunctionKind::DataBlind, Some(_)) => {
                return Err(Error::Invalid(format!("{function} is data-blind and takes no declared DEs")))
            }
            (FunctionKind::DataAware, Some(_)) if covered_only => {
                return Err(Error::Invalid(format!("{function} is data-aware")))
            }
            _ => {}
        }
        let scratch_key = self.key_for(caller)?;
        let mut timings = PhaseTimings::default();

        let started = Instant::now();
        let prepared = match self.prepare(caller, &def, declared, covered_only)? {
            Ok(p) => p,
            Err((invocation, reason)) => {
                return Ok(InvokeResult {
                    invocation,
                    status: InvocationStatus::Denied { reason },
                    deliveries: Vec::new(),
                    staged: Vec::new(),
                    violations: Vec::new(),
                    timings,
                })
            }
        };
        timings.matching = started.elapsed();
        let invocation = prepared.invocation;

        let started = Instant::now();
        let ctx = ExecutionContext::create(
            &self.sandbox_base,
            ContextInit {
                invocation,
                caller,
                function: function.clone(),
                visible: prepared.visible.clone(),
                params,
                mode: self.config.mode,
                scratch_key,
                scratch_quota: self.config.scratch_quota,
                abort_on_violation: self.config.abort_on_violation,
            },
            Arc::new(prepared.reader),
        )?;
        let run = launch(&ctx, &prepared.program, &self.config.limits);
        let violations = ctx.violations();
        ctx.teardown();
        drop(ctx);
        timings.execution = started.elapsed();

        let report = match run {
            Ok(r) => r,
            Err(e) => {
                let diagnostics = e.to_string();
                let mut w = self.writer.lock();
                for v in &violations {
                    self.log(&mut w, caller, LogPayload::Violation { invocation, detail: v.clone() })?;
                }
                self.log(
                    &mut w,
                    caller,
                    LogPayload::InvocationFinished {
                        invocation,
                        function: function.clone(),
                        outcome: Outcome::Failed,
                        accessed: Vec::new(),
                        detail: diagnostics.clone(),
                    },
                )?;
                return Ok(InvokeResult {
                    invocation,
                    status: InvocationStatus::Failed { diagnostics },
                    deliveries: Vec::new(),
                    staged: Vec::new(),
                    violations,
                    timings,
                });
            }
        };
        if !report.accessed.is_subset(&prepared.visible) {
            return Err(Error::Violation(format!(
                "invocation {} read DEs outside its visible set",
                invocation.0
            )));
        }
        let outputs: Vec<Output> = report
            .outputs
            .into_iter()
            .map(|o| Output {
                inputs: match o.inputs {
                    // Only in-process functions may narrow provenance.
                    Some(i) if prepared.trusted_inputs => Some(i),
                    _ => Some(report.accessed.clone()),
                },
                bytes: o.bytes,
            })
            .collect();
        self.complete(
            caller,
            &def.id,
            invocation,
            outputs,
            report.accessed,
            violations,
            prepared.retain,
            timings,
        )
    }

    /// Logs the start of an invocation and decides what it may see. The
    /// inner `Err` is a denial, already logged.
    #[allow(clippy::type_complexity)]
    fn prepare(
        &self,
        caller: AgentId,
        def: &crate::functions::FunctionDef,
        declared: Option<Vec<DeId>>,
        covered_only: bool,
    ) -> Result<std::result::Result<Prepared, (InvocationId, String)>> {
        let function = &def.id;
        let mut w = self.writer.lock();
        let next = InvocationId(w.audit.next_seq());
        let seq = self.log(
            &mut w,
            caller,
            LogPayload::InvocationStarted {
                invocation: next,
                function: function.clone(),
                covered_only,
            },
        )?;
        let invocation = InvocationId(seq);
        let functions = self.functions.read();
        let reg = self.registry.read();
        let broker = PolicyBroker::new(&reg, functions.graph());

        let (visible, matched, mismatched, denied) = match declared {
            Some(des) => {
                let des: BTreeSet<DeId> = des.into_iter().collect();
                let mut visible = BTreeSet::new();
                let mut matched = Vec::new();
                let mut mismatched = Vec::new();
                let mut denied = Vec::new();
                for de in des {
                    if reg.de(de).is_err() {
                        denied.push(de);
                        continue;
                    }
                    match broker.intent(crate::model::AccessTriple::new(caller, function.clone(), de), invocation) {
                        None => {
                            mismatched.push(de);
                            denied.push(de);
                        }
                        Some(_) => {
                            visible.insert(de);
                            if broker.covered(caller, function, de) {
                                matched.push(de);
                            } else {
                                mismatched.push(de);
                            }
                        }
                    }
                }
                (visible, matched, mismatched, denied)
            }
            None => {
                let set = broker.accessible_set(caller, function)?;
                let visible = if covered_only { set.covered.clone() } else { set.all() };
                let mismatched = if covered_only {
                    Vec::new()
                } else {
                    set.enclave_only.iter().copied().collect()
                };
                (visible, set.covered.into_iter().collect(), mismatched, Vec::new())
            }
        };
        let des_map: HashMap<DeId, DataElement> = visible
            .iter()
            .filter_map(|d| reg.de(*d).ok().map(|e| (*d, e.clone())))
            .collect();
        drop(reg);
        drop(functions);

        self.log(
            &mut w,
            caller,
            LogPayload::IntentCreated {
                invocation,
                function: function.clone(),
                des: visible.iter().copied().collect(),
            },
        )?;
        if !matched.is_empty() {
            self.log(&mut w, caller, LogPayload::PolicyMatch { invocation, function: function.clone(), des: matched })?;
        }
        if !mismatched.is_empty() {
            self.log(
                &mut w,
                caller,
                LogPayload::PolicyMismatch { invocation, function: function.clone(), des: mismatched },
            )?;
        }
        if !denied.is_empty() {
            let reason = format!(
                "no policy or enclave access for {}",
                denied.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
            );
            self.log(
                &mut w,
                caller,
                LogPayload::InvocationFinished {
                    invocation,
                    function: function.clone(),
                    outcome: Outcome::Denied,
                    accessed: Vec::new(),
                    detail: reason.clone(),
                },
            )?;
            return Ok(Err((invocation, reason)));
        }
        drop(w);

        let (program, trusted_inputs) = match &def.entrypoint {
            Entrypoint::Native(name) => {
                let f = self
                    .natives
                    .read()
                    .get(name)
                    .cloned()
                    .ok_or_else(|| Error::Manifest(format!("unknown native `{name}`")))?;
                (Program::Native(f), true)
            }
            Entrypoint::Command(argv) => (
                Program::Command {
                    argv: argv.clone(),
                    connector_dir: self.connector_dirs.read().get(&def.app).cloned().unwrap_or_default(),
                },
                false,
            ),
        };
        Ok(Ok(Prepared {
            invocation,
            visible,
            reader: StoredDes {
                blobs: self.blobs.clone(),
                keys: self.keys.clone(),
                des: des_map,
            },
            program,
            retain: def.retain_outputs,
            trusted_inputs,
        }))
    }

    #[allow(clippy::too_many_arguments)]
    fn complete(
        &self,
        caller: AgentId,
        function: &FunctionId,
        invocation: InvocationId,
        outputs: Vec<Output>,
        accessed: BTreeSet<DeId>,
        violations: Vec<String>,
        retain: bool,
        mut timings: PhaseTimings,
    ) -> Result<InvokeResult> {
        let caller_key = self.key_for(caller)?;
        let mut w = self.writer.lock();
        let started = Instant::now();

        // Coverage is decided at delivery time, against current policies.
        struct Planned {
            bytes: Vec<u8>,
            inputs: BTreeSet<DeId>,
            closure: BTreeSet<DeId>,
            pending: Option<BTreeMap<AgentId, BTreeSet<DeId>>>,
        }
        let planned: Vec<Planned> = {
            let functions = self.functions.read();
            let reg = self.registry.read();
            let broker = PolicyBroker::new(&reg, functions.graph());
            outputs
                .into_iter()
                .map(|o| {
                    let inputs = o.inputs.unwrap_or_else(|| accessed.clone());
                    let closure = closure_of(&reg, &inputs);
                    let mut pending: BTreeMap<AgentId, BTreeSet<DeId>> = BTreeMap::new();
                    if !self.config.unsafe_skip_coverage_check {
                        for d in &inputs {
                            for r in reg.roots(*d) {
                                if !broker.covered(caller, function, r) {
                                    if let Ok(e) = reg.de(r) {
                                        pending.entry(e.owner).or_default().insert(r);
                                    }
                                }
                            }
                        }
                    }
                    Planned {
                        bytes: o.bytes,
                        inputs,
                        closure,
                        pending: (!pending.is_empty()).then_some(pending),
                    }
                })
                .collect()
        };

        // Persist retained and staged outputs as derived DEs.
        let mut next_de = self.registry.read().next_de_id().0;
        let mut derived = Vec::new();
        let mut ids: Vec<Option<DeId>> = Vec::new();
        let mut enc_time = Duration::ZERO;
        for p in &planned {
            if !(retain || p.pending.is_some()) {
                ids.push(None);
                continue;
            }
            let id = DeId(next_de);
            next_de += 1;
            let t = Instant::now();
            let stored = match &caller_key {
                Some(k) if self.config.mode.encrypts() => k.seal(&blob_aad(caller), &p.bytes),
                _ => p.bytes.clone(),
            };
            enc_time += t.elapsed();
            let storage_ref = self.blobs.put(&stored)?;
            derived.push(DerivedOutput {
                de: DataElement {
                    id,
                    owner: caller,
                    kind: DeKind::Derived,
                    stored_mode: if p.pending.is_some() { StoredMode::Enclave } else { StoredMode::Sealed },
                    storage_ref: Some(storage_ref),
                    enc_key: self.config.mode.encrypts().then_some(caller),
                    content_digest: sha256(&[&p.bytes]),
                    size: p.bytes.len() as u64,
                },
                inputs: p.inputs.clone(),
                staged: p.pending.clone(),
            });
            ids.push(Some(id));
        }
        if !derived.is_empty() {
            self.commit(
                &mut w,
                caller,
                &Update::CompleteInvocation {
                    invocation,
                    caller,
                    function: function.clone(),
                    outputs: derived,
                },
            )?;
        }

        let mut deliveries = Vec::new();
        let mut staged = Vec::new();
        for (p, id) in planned.into_iter().zip(ids) {
            let provenance: Vec<DeId> = p.closure.iter().copied().collect();
            if let Some(pending) = &p.pending {
                let de = id.expect("staged outputs are persisted");
                staged.push(de);
                self.log(
                    &mut w,
                    caller,
                    LogPayload::Staged {
                        de,
                        requester: caller,
                        function: function.clone(),
                        invocation,
                        pending_owners: pending.keys().copied().collect(),
                        provenance,
                    },
                )?;
                continue;
            }
            let t = Instant::now();
            let (payload, encrypted) = match &caller_key {
                Some(k) if self.config.mode.encrypts() => (k.seal(&blob_aad(caller), &p.bytes), true),
                _ => (p.bytes, false),
            };
            enc_time += t.elapsed();
            self.log(
                &mut w,
                caller,
                LogPayload::DeReleased {
                    de: id,
                    recipient: caller,
                    function: function.clone(),
                    invocation,
                    provenance,
                },
            )?;
            deliveries.push(Delivery { de: id, payload, encrypted });
        }
        for v in &violations {
            self.log(&mut w, caller, LogPayload::Violation { invocation, detail: v.clone() })?;
        }
        let outcome = if staged.is_empty() { Outcome::Delivered } else { Outcome::Staged };
        self.log(
            &mut w,
            caller,
            LogPayload::InvocationFinished {
                invocation,
                function: function.clone(),
                outcome,
                accessed: accessed.iter().copied().collect(),
                detail: String::new(),
            },
        )?;
        timings.encryption = enc_time;
        timings.commit = started.elapsed().saturating_sub(enc_time);
        Ok(InvokeResult {
            invocation,
            status: if staged.is_empty() { InvocationStatus::Delivered } else { InvocationStatus::Staged },
            deliveries,
            staged,
            violations,
            timings,
        })
    }

    /// What a data-blind run of `function` by `agent` would see right now.
    pub fn accessible_set(&self, agent: AgentId, function: &FunctionId) -> Result<crate::broker::AccessibleSet> {
        let functions = self.functions.read();
        let reg = self.registry.read();
        PolicyBroker::new(&reg, functions.graph()).accessible_set(agent, function)
    }

    /// Staged results waiting on `owner`.
    pub fn pending_approvals(&self, owner: AgentId) -> Vec<StagedResult> {
        self.registry
            .read()
            .state()
            .staged
            .values()
            .filter(|s| s.pending_owners().contains(&owner))
            .cloned()
            .collect()
    }

    pub fn approve_release(&self, owner: AgentId, staged: DeId, decision: ReleaseDecision) -> Result<ReleaseOutcome> {
        self.ready()?;
        let mut w = self.writer.lock();
        let (des, blobs) = {
            let reg = self.registry.read();
            let entry = reg
                .staged(staged)
                .ok_or_else(|| Error::Invalid(format!("DE {staged} is not staged")))?;
            if !entry.pending_owners().contains(&owner) {
                return Err(Error::Unauthorized(format!(
                    "agent {owner} has no pending approval on DE {staged}"
                )));
            }
            let update = Update::Release { staged, owner, decision };
            (entry.pending[&owner].clone(), update.released_blobs(&reg))
        };
        let outcome = self
            .commit(&mut w, owner, &Update::Release { staged, owner, decision })?
            .unwrap_or(ReleaseOutcome::Removed);
        self.log(
            &mut w,
            owner,
            LogPayload::StagedDecision {
                de: staged,
                decision,
                des: des.into_iter().collect(),
            },
        )?;
        if !blobs.is_empty() {
            let live = self.registry.read().live_blobs();
            for b in blobs {
                if !live.contains(&b.0) {
                    self.blobs.remove(&b)?;
                }
            }
        }
        Ok(outcome)
    }

    /// Released staged results `agent` has not fetched yet.
    pub fn pending_deliveries(&self, agent: AgentId) -> BTreeSet<DeId> {
        self.registry
            .read()
            .state()
            .outbox
            .get(&agent)
            .cloned()
            .unwrap_or_default()
    }

    /// Hands a released result to its requester, once.
    pub fn fetch_released(&self, agent: AgentId, de: DeId) -> Result<Delivery> {
        self.ready()?;
        let mut w = self.writer.lock();
        let (elem, record, closure) = {
            let functions = self.functions.read();
            let reg = self.registry.read();
            if !reg.state().outbox.get(&agent).map(|s| s.contains(&de)).unwrap_or(false) {
                return Err(Error::Unauthorized(format!("DE {de} is not awaiting delivery to agent {agent}")));
            }
            let record = reg
                .state()
                .provenance
                .get(&de)
                .cloned()
                .ok_or(Error::UnknownDe(de))?;
            let broker = PolicyBroker::new(&reg, functions.graph());
            if !self.config.unsafe_skip_coverage_check && !broker.covered(agent, &record.function, de) {
                return Err(Error::Unauthorized(format!("DE {de} is no longer covered for agent {agent}")));
            }
            (reg.de(de)?.clone(), record.clone(), closure_of(&reg, &record.inputs))
        };
        let plain = decrypt_de(&self.blobs, &self.keys, &elem)?;
        let (payload, encrypted) = if self.config.mode.encrypts() {
            let k = self.keys.require(agent)?;
            let payload = if elem.enc_key == Some(agent) {
                self.blobs.get(elem.storage_ref.as_ref().expect("checked by decrypt"))?
            } else {
                k.seal(&blob_aad(agent), &plain)
            };
            (payload, true)
        } else {
            (plain.to_vec(), false)
        };
        self.commit(&mut w, agent, &Update::AckDelivery { agent, de })?;
        self.log(
            &mut w,
            agent,
            LogPayload::DeReleased {
                de: Some(de),
                recipient: agent,
                function: record.function,
                invocation: record.invocation,
                provenance: closure.into_iter().collect(),
            },
        )?;
        Ok(Delivery {
            de: Some(de),
            payload,
            encrypted,
        })
    }

    /// Provenance records reachable from `de`, down to registered DEs.
    pub fn provenance_of(&self, de: DeId) -> Result<ProvenanceClosure> {
        let reg = self.registry.read();
        reg.de(de)?;
        let mut out = ProvenanceClosure::default();
        let mut stack = vec![de];
        let mut seen = BTreeSet::new();
        while let Some(d) = stack.pop() {
            if !seen.insert(d) {
                continue;
            }
            if let Some(rec) = reg.state().provenance.get(&d) {
                for i in &rec.inputs {
                    out.des.insert(*i);
                    stack.push(*i);
                }
                out.records.push(rec.clone());
            }
        }
        out.records.sort_by_key(|r| r.output_de);
        Ok(out)
    }
}

/// `inputs` plus everything they were derived from.
fn closure_of(reg: &crate::registry::Registry, inputs: &BTreeSet<DeId>) -> BTreeSet<DeId> {
    let mut out = BTreeSet::new();
    let mut stack: Vec<DeId> = inputs.iter().copied().collect();
    while let Some(d) = stack.pop() {
        if !out.insert(d) {
            continue;
        }
        if let Some(rec) = reg.state().provenance.get(&d) {
            stack.extend(rec.inputs.iter().copied());
        }
    }
    out
}
