//! The in-memory database behind the policy broker: agents, data elements,
//! policies, contracts, provenance and the staging zone.
//!
//! Every mutation is expressed as an [`Update`] and applied through
//! [`Registry::apply`], both on the live path and during write-ahead log
//! replay, so a replayed registry is bit-identical to the original.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::crypto::sha256;
use crate::error::{Error, Result};
use crate::model::{
    AccessTriple, Agent, AgentId, Contract, ContractId, DataElement, DeId, DeKind, Digest,
    FunctionId, InvocationId, PublicKey, ReleaseDecision, StagedResult, StoredMode,
};

/// Canonical registry contents. Serialized with bincode for checkpoints and
/// state hashes; every collection is ordered so the encoding is unique.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryState {
    pub agents: BTreeMap<AgentId, Agent>,
    pub des: BTreeMap<DeId, DataElement>,
    /// Policy triple -> creation sequence number.
    pub policies: BTreeMap<AccessTriple, u64>,
    pub provenance: BTreeMap<DeId, crate::model::ProvenanceRecord>,
    pub staged: BTreeMap<DeId, StagedResult>,
    /// Released staged results awaiting pickup by their requester.
    pub outbox: BTreeMap<AgentId, BTreeSet<DeId>>,
    pub contracts: BTreeMap<ContractId, Contract>,
    pub next_agent: u64,
    pub next_de: u64,
    pub next_contract: u64,
    pub policy_seq: u64,
}

/// One derived output of a completed invocation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivedOutput {
    pub de: DataElement,
    pub inputs: BTreeSet<DeId>,
    /// Uncovered registered inputs grouped by owner; `Some` stages the output.
    pub staged: Option<BTreeMap<AgentId, BTreeSet<DeId>>>,
}

/// A single registry mutation. Exactly one is written to the write-ahead
/// log per acknowledged request.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Update {
    RegisterAgent {
        agent: Agent,
    },
    RegisterDe {
        de: DataElement,
    },
    CreatePolicy {
        triple: AccessTriple,
    },
    DeletePolicy {
        triple: AccessTriple,
    },
    ProposeContract {
        contract: Contract,
    },
    SignContract {
        contract: ContractId,
        agent: AgentId,
        signature: Vec<u8>,
    },
    CompleteInvocation {
        invocation: InvocationId,
        caller: AgentId,
        function: FunctionId,
        outputs: Vec<DerivedOutput>,
    },
    Release {
        staged: DeId,
        owner: AgentId,
        decision: ReleaseDecision,
    },
    AckDelivery {
        agent: AgentId,
        de: DeId,
    },
}

impl Update {
    pub const ENCODING_VERSION: u8 = 1;

    /// Versioned canonical encoding written (encrypted) to the EWAL.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![Self::ENCODING_VERSION];
        out.extend(bincode::serialize(self).expect("updates always serialize"));
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        match bytes.split_first() {
            Some((&Self::ENCODING_VERSION, rest)) => Ok(bincode::deserialize(rest)?),
            Some((v, _)) => Err(Error::Encoding(format!("unknown update encoding version {v}"))),
            None => Err(Error::Encoding("empty update record".into())),
        }
    }

    /// Blob files this update stops referencing once applied to `reg`.
    pub fn released_blobs(&self, reg: &Registry) -> Vec<crate::model::StorageRef> {
        match self {
            Update::Release {
                staged,
                decision: ReleaseDecision::Deny,
                ..
            } => reg
                .state
                .des
                .get(staged)
                .and_then(|d| d.storage_ref.clone())
                .into_iter()
                .collect(),
            _ => Vec::new(),
        }
    }
}

/// Outcome of applying a release decision.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReleaseOutcome {
    /// Still waiting on these owners.
    Pending(BTreeSet<AgentId>),
    /// Every owner approved; the result moved to the requester's outbox.
    Released,
    /// An owner denied; the staged DE is gone.
    Removed,
}

#[derive(Clone, Debug, Default)]
pub struct Registry {
    state: RegistryState,
    pubkeys: HashMap<PublicKey, AgentId>,
    /// agent -> function -> DEs with a policy naming exactly that function.
    by_agent_fn: HashMap<AgentId, HashMap<FunctionId, BTreeSet<DeId>>>,
    enclave: BTreeSet<DeId>,
    derived: BTreeSet<DeId>,
    /// Registered DEs each derived DE transitively depends on.
    roots: HashMap<DeId, BTreeSet<DeId>>,
}

impl PartialEq for Registry {
    fn eq(&self, other: &Self) -> bool {
        self.state == other.state
    }
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_state(state: RegistryState) -> Self {
        let mut reg = Registry::default();
        for agent in state.agents.values() {
            reg.pubkeys.insert(agent.public_key, agent.id);
        }
        for triple in state.policies.keys() {
            reg.index_policy(triple);
        }
        for de in state.des.values() {
            reg.index_de(de);
        }
        reg.state = state;
        // Provenance records were created in DE-id order, so inputs always
        // precede outputs.
        let records: Vec<_> = reg.state.provenance.values().cloned().collect();
        for rec in records {
            let roots = reg.roots_of_inputs(&rec.inputs);
            reg.roots.insert(rec.output_de, roots);
        }
        reg
    }

    pub fn state(&self) -> &RegistryState {
        &self.state
    }

    pub fn encode_state(&self) -> Vec<u8> {
        let mut out = vec![Update::ENCODING_VERSION];
        out.extend(bincode::serialize(&self.state).expect("state always serializes"));
        out
    }

    pub fn decode_state(bytes: &[u8]) -> Result<Self> {
        match bytes.split_first() {
            Some((&Update::ENCODING_VERSION, rest)) => {
                Ok(Registry::from_state(bincode::deserialize(rest)?))
            }
            _ => Err(Error::Encoding("unknown registry snapshot version".into())),
        }
    }

    /// SHA-256 of the canonical encoding.
    pub fn state_hash(&self) -> Digest {
        sha256(&[b"station-registry-v1", &self.encode_state()])
    }

    fn index_policy(&mut self, t: &AccessTriple) {
        self.by_agent_fn
            .entry(t.agent)
            .or_default()
            .entry(t.function.clone())
            .or_default()
            .insert(t.de);
    }

    fn unindex_policy(&mut self, t: &AccessTriple) {
        if let Some(by_fn) = self.by_agent_fn.get_mut(&t.agent) {
            if let Some(set) = by_fn.get_mut(&t.function) {
                set.remove(&t.de);
                if set.is_empty() {
                    by_fn.remove(&t.function);
                }
            }
        }
    }

    fn index_de(&mut self, de: &DataElement) {
        match de.kind {
            DeKind::Registered if de.stored_mode == StoredMode::Enclave => {
                self.enclave.insert(de.id);
            }
            DeKind::Registered => {}
            DeKind::Derived => {
                self.derived.insert(de.id);
            }
        }
    }

    fn roots_of_inputs(&self, inputs: &BTreeSet<DeId>) -> BTreeSet<DeId> {
        let mut out = BTreeSet::new();
        for d in inputs {
            match self.roots.get(d) {
                Some(r) => out.extend(r.iter().copied()),
                None => {
                    out.insert(*d);
                }
            }
        }
        out
    }

    /// Applies one update. Replay-safe: validation happens before an update
    /// is logged, never here.
    pub fn apply(&mut self, update: &Update) -> Option<ReleaseOutcome> {
        match update {
            Update::RegisterAgent { agent } => {
                self.pubkeys.insert(agent.public_key, agent.id);
                self.state.next_agent = self.state.next_agent.max(agent.id.0 + 1);
                self.state.agents.insert(agent.id, agent.clone());
                if agent.roles.contains(crate::model::Role::Owner) {
                    // Owners may always read their own slice of the log.
                    self.insert_policy(AccessTriple::new(
                        agent.id,
                        FunctionId::audit_read(),
                        crate::model::AUDIT_LOG_DE,
                    ));
                }
            }
            Update::RegisterDe { de } => {
                self.state.next_de = self.state.next_de.max(de.id.0 + 1);
                self.index_de(de);
                self.state.des.insert(de.id, de.clone());
            }
            Update::CreatePolicy { triple } => self.insert_policy(triple.clone()),
            Update::DeletePolicy { triple } => {
                if self.state.policies.remove(triple).is_some() {
                    self.unindex_policy(triple);
                }
            }
            Update::ProposeContract { contract } => {
                self.state.next_contract = self.state.next_contract.max(contract.id.0 + 1);
                self.state.contracts.insert(contract.id, contract.clone());
            }
            Update::SignContract {
                contract,
                agent,
                signature,
            } => {
                if let Some(c) = self.state.contracts.get_mut(contract) {
                    c.signatures.insert(*agent, signature.clone());
                    if c.is_complete() {
                        let triple = AccessTriple::new(c.operator, c.function.clone(), c.de);
                        self.insert_policy(triple);
                    }
                }
            }
            Update::CompleteInvocation {
                invocation,
                caller,
                function,
                outputs,
            } => {
                for out in outputs {
                    let de = &out.de;
                    self.state.next_de = self.state.next_de.max(de.id.0 + 1);
                    let roots = self.roots_of_inputs(&out.inputs);
                    self.roots.insert(de.id, roots);
                    self.index_de(de);
                    self.state.des.insert(de.id, de.clone());
                    self.state.provenance.insert(
                        de.id,
                        crate::model::ProvenanceRecord {
                            output_de: de.id,
                            inputs: out.inputs.clone(),
                            function: function.clone(),
                            invocation: *invocation,
                        },
                    );
                    if let Some(pending) = &out.staged {
                        self.state.staged.insert(
                            de.id,
                            StagedResult {
                                de: de.id,
                                requester: *caller,
                                function: function.clone(),
                                invocation: *invocation,
                                pending: pending.clone(),
                                approved: BTreeSet::new(),
                            },
                        );
                    }
                }
            }
            Update::Release {
                staged,
                owner,
                decision,
            } => return Some(self.apply_release(*staged, *owner, *decision)),
            Update::AckDelivery { agent, de } => {
                if let Some(set) = self.state.outbox.get_mut(agent) {
                    set.remove(de);
                    if set.is_empty() {
                        self.state.outbox.remove(agent);
                    }
                }
            }
        }
        None
    }

    fn insert_policy(&mut self, triple: AccessTriple) {
        if self.state.policies.contains_key(&triple) {
            return;
        }
        self.state.policy_seq += 1;
        self.index_policy(&triple);
        self.state.policies.insert(triple, self.state.policy_seq);
    }

    fn apply_release(&mut self, staged: DeId, owner: AgentId, decision: ReleaseDecision) -> ReleaseOutcome {
        let Some(entry) = self.state.staged.get_mut(&staged) else {
            return ReleaseOutcome::Removed;
        };
        match decision {
            ReleaseDecision::Deny => {
                self.state.staged.remove(&staged);
                self.state.des.remove(&staged);
                self.state.provenance.remove(&staged);
                self.derived.remove(&staged);
                self.roots.remove(&staged);
                ReleaseOutcome::Removed
            }
            ReleaseDecision::Grant => {
                entry.approved.insert(owner);
                let waiting = entry.pending_owners();
                if !waiting.is_empty() {
                    return ReleaseOutcome::Pending(waiting);
                }
                let entry = self
                    .state
                    .staged
                    .remove(&staged)
                    .expect("entry checked above");
                for de in entry.pending.values().flatten() {
                    self.insert_policy(AccessTriple::new(entry.requester, entry.function.clone(), *de));
                }
                self.state
                    .outbox
                    .entry(entry.requester)
                    .or_default()
                    .insert(staged);
                ReleaseOutcome::Released
            }
        }
    }

    // ---- queries -------------------------------------------------------

    pub fn agent(&self, id: AgentId) -> Result<&Agent> {
        self.state.agents.get(&id).ok_or(Error::UnknownAgent(id))
    }

    pub fn agent_by_key(&self, key: &PublicKey) -> Option<AgentId> {
        self.pubkeys.get(key).copied()
    }

    pub fn agent_count(&self) -> usize {
        self.state.agents.len()
    }

    pub fn de(&self, id: DeId) -> Result<&DataElement> {
        self.state.des.get(&id).ok_or(Error::UnknownDe(id))
    }

    pub fn has_policy(&self, triple: &AccessTriple) -> bool {
        self.state.policies.contains_key(triple)
    }

    pub fn policy_count(&self) -> usize {
        self.state.policies.len()
    }

    /// DEs with a policy naming exactly (`agent`, `function`).
    pub fn policied_des(&self, agent: AgentId, function: &FunctionId) -> Option<&BTreeSet<DeId>> {
        self.by_agent_fn.get(&agent).and_then(|m| m.get(function))
    }

    pub fn enclave_des(&self) -> &BTreeSet<DeId> {
        &self.enclave
    }

    pub fn derived_des(&self) -> &BTreeSet<DeId> {
        &self.derived
    }

    /// Registered DEs behind `de`: itself when registered, else the roots
    /// recorded when it was derived.
    pub fn roots(&self, de: DeId) -> BTreeSet<DeId> {
        self.roots
            .get(&de)
            .cloned()
            .unwrap_or_else(|| BTreeSet::from([de]))
    }

    pub fn staged(&self, de: DeId) -> Option<&StagedResult> {
        self.state.staged.get(&de)
    }

    pub fn is_staged(&self, de: DeId) -> bool {
        self.state.staged.contains_key(&de)
    }

    pub fn owned_des(&self, owner: AgentId) -> BTreeSet<DeId> {
        self.state
            .des
            .values()
            .filter(|d| d.owner == owner && d.kind == DeKind::Registered)
            .map(|d| d.id)
            .collect()
    }

    pub fn contract(&self, id: ContractId) -> Result<&Contract> {
        self.state
            .contracts
            .get(&id)
            .ok_or_else(|| Error::Invalid(format!("unknown contract {}", id.0)))
    }

    pub fn next_agent_id(&self) -> AgentId {
        AgentId(self.state.next_agent.max(1))
    }

    pub fn next_de_id(&self) -> DeId {
        DeId(self.state.next_de.max(1))
    }

    pub fn next_contract_id(&self) -> ContractId {
        ContractId(self.state.next_contract.max(1))
    }

    /// Every blob the registry still references.
    pub fn live_blobs(&self) -> BTreeSet<String> {
        self.state
            .des
            .values()
            .filter_map(|d| d.storage_ref.as_ref().map(|r| r.0.clone()))
            .collect()
    }
}
