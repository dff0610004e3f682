//! Policy broker: intent/policy matching with the dependency-graph
//! descendant rule, and accessible-set computation for data-blind calls.
//!
//! A policy `(a, g, d)` matches an intent `(a, f, d)` when `f == g` or `f`
//! is a descendant of `g` in the dependency graph. Matching is pure given a
//! registry snapshot and a graph.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::functions::DependencyGraph;
use crate::model::{
    AccessTriple, AgentId, DeId, DeKind, FunctionId, Intent, InvocationId, MatchDecision,
    StoredMode,
};
use crate::registry::Registry;

/// DEs visible to one (agent, function) pair, split by whether a policy
/// covers them.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AccessibleSet {
    pub covered: BTreeSet<DeId>,
    pub enclave_only: BTreeSet<DeId>,
}

impl AccessibleSet {
    /// Union of both halves, ordered by DE id.
    pub fn all(&self) -> BTreeSet<DeId> {
        self.covered.union(&self.enclave_only).copied().collect()
    }

    pub fn len(&self) -> usize {
        self.covered.len() + self.enclave_only.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct PolicyBroker<'a> {
    registry: &'a Registry,
    graph: &'a DependencyGraph,
}

impl<'a> PolicyBroker<'a> {
    pub fn new(registry: &'a Registry, graph: &'a DependencyGraph) -> Self {
        PolicyBroker { registry, graph }
    }

    /// Functions whose policies cover an intent naming `f`.
    fn covering(&self, f: &FunctionId) -> BTreeSet<FunctionId> {
        if self.graph.contains(f) {
            self.graph.covering_functions(f)
        } else {
            BTreeSet::from([f.clone()])
        }
    }

    fn matches_with(&self, covering: &BTreeSet<FunctionId>, agent: AgentId, de: DeId) -> bool {
        covering.iter().any(|g| {
            self.registry
                .policied_des(agent, g)
                .map(|s| s.contains(&de))
                .unwrap_or(false)
        })
    }

    /// Decision for a single triple against the policy table.
    pub fn match_triple(&self, t: &AccessTriple) -> MatchDecision {
        if self.matches_with(&self.covering(&t.function), t.agent, t.de) {
            MatchDecision::Match
        } else {
            MatchDecision::Mismatch
        }
    }

    pub fn match_intent(&self, intent: &Intent) -> MatchDecision {
        self.match_triple(intent.triple())
    }

    /// Matches many triples in one pass, computing each function's covering
    /// set once. Output order follows input order.
    pub fn match_batch(&self, triples: &[AccessTriple]) -> Vec<MatchDecision> {
        let mut covering: HashMap<&FunctionId, BTreeSet<FunctionId>> = HashMap::new();
        triples
            .iter()
            .map(|t| {
                let cov = covering
                    .entry(&t.function)
                    .or_insert_with(|| self.covering(&t.function));
                if self.matches_with(cov, t.agent, t.de) {
                    MatchDecision::Match
                } else {
                    MatchDecision::Mismatch
                }
            })
            .collect()
    }

    pub fn match_intents_batch(&self, intents: &[Intent]) -> Vec<MatchDecision> {
        let triples: Vec<_> = intents.iter().map(|i| i.triple().clone()).collect();
        self.match_batch(&triples)
    }

    /// Whether every registered DE behind `de` has a policy covering
    /// (`agent`, `function`).
    pub fn covered(&self, agent: AgentId, function: &FunctionId, de: DeId) -> bool {
        let cov = self.covering(function);
        self.registry
            .roots(de)
            .iter()
            .all(|r| self.matches_with(&cov, agent, *r))
    }

    /// Whether a function run by `agent` may see `de` at all: it must not be
    /// staged, and no registered DE behind it may be both sealed and
    /// uncovered.
    pub fn visible(&self, agent: AgentId, function: &FunctionId, de: DeId) -> bool {
        let Ok(elem) = self.registry.de(de) else {
            return false;
        };
        if self.registry.is_staged(de) {
            return false;
        }
        let cov = self.covering(function);
        let roots = match elem.kind {
            DeKind::Registered => BTreeSet::from([de]),
            DeKind::Derived => self.registry.roots(de),
        };
        roots.iter().all(|r| {
            self.matches_with(&cov, agent, *r)
                || self
                    .registry
                    .de(*r)
                    .map(|d| d.stored_mode == StoredMode::Enclave)
                    .unwrap_or(false)
        })
    }

    /// Builds an intent, refusing DEs the agent may not even see. This is
    /// the only constructor of [`Intent`].
    pub fn intent(&self, triple: AccessTriple, invocation: InvocationId) -> Option<Intent> {
        self.visible(triple.agent, &triple.function, triple.de)
            .then_some(Intent { triple, invocation })
    }

    /// Policy-matched DEs plus enclave DEs, ordered by id. Derived DEs are
    /// included when visible and classed as covered when all their roots
    /// are.
    pub fn accessible_set(&self, agent: AgentId, function: &FunctionId) -> Result<AccessibleSet> {
        if !self.graph.contains(function) {
            return Err(Error::UnknownFunction(function.clone()));
        }
        let cov = self.covering(function);
        let mut covered = BTreeSet::new();
        for g in &cov {
            if let Some(des) = self.registry.policied_des(agent, g) {
                covered.extend(des.iter().copied());
            }
        }
        let mut enclave_only: BTreeSet<DeId> = self
            .registry
            .enclave_des()
            .iter()
            .filter(|d| !covered.contains(d))
            .copied()
            .collect();
        for &d in self.registry.derived_des() {
            if self.registry.is_staged(d) {
                continue;
            }
            let roots = self.registry.roots(d);
            if roots.iter().all(|r| covered.contains(r)) {
                covered.insert(d);
            } else if roots
                .iter()
                .all(|r| covered.contains(r) || enclave_only.contains(r))
            {
                enclave_only.insert(d);
            }
        }
        Ok(AccessibleSet {
            covered,
            enclave_only,
        })
    }
}
