use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::error::{Error, Result};
use crate::model::FunctionId;

/// Function dependency DAG. An edge `caller -> callee` means `caller`
/// consumes DEs produced by `callee`; a policy on `caller` covers every
/// function reachable from it.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DependencyGraph {
    nodes: BTreeSet<FunctionId>,
    callees: BTreeMap<FunctionId, BTreeSet<FunctionId>>,
    callers: BTreeMap<FunctionId, BTreeSet<FunctionId>>,
}

impl DependencyGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, f: &FunctionId) -> bool {
        self.nodes.contains(f)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &FunctionId> {
        self.nodes.iter()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn edges(&self) -> impl Iterator<Item = (&FunctionId, &FunctionId)> {
        self.callees
            .iter()
            .flat_map(|(caller, cs)| cs.iter().map(move |c| (caller, c)))
    }

    pub fn add_node(&mut self, f: FunctionId) {
        self.nodes.insert(f);
    }

    /// Adds `caller -> callee`, refusing edges that would close a cycle.
    /// On error the graph is unchanged.
    pub fn add_edge(&mut self, caller: &FunctionId, callee: &FunctionId) -> Result<()> {
        for f in [caller, callee] {
            if !self.nodes.contains(f) {
                return Err(Error::UnknownFunction(f.clone()));
            }
        }
        if caller == callee {
            return Err(Error::Cycle(vec![caller.clone(), callee.clone()]));
        }
        if let Some(mut path) = self.path(callee, caller) {
            path.insert(0, caller.clone());
            return Err(Error::Cycle(path));
        }
        self.callees
            .entry(caller.clone())
            .or_default()
            .insert(callee.clone());
        self.callers
            .entry(callee.clone())
            .or_default()
            .insert(caller.clone());
        Ok(())
    }

    /// Shortest caller->callee path from `from` to `to`, both inclusive.
    fn path(&self, from: &FunctionId, to: &FunctionId) -> Option<Vec<FunctionId>> {
        let mut parent: BTreeMap<&FunctionId, &FunctionId> = BTreeMap::new();
        let mut queue = VecDeque::from([from]);
        let mut seen = BTreeSet::from([from]);
        while let Some(f) = queue.pop_front() {
            if f == to {
                let mut path = vec![f.clone()];
                let mut cur = f;
                while let Some(p) = parent.get(cur) {
                    path.push((*p).clone());
                    cur = p;
                }
                path.reverse();
                return Some(path);
            }
            for next in self.callees.get(f).into_iter().flatten() {
                if seen.insert(next) {
                    parent.insert(next, f);
                    queue.push_back(next);
                }
            }
        }
        None
    }

    fn reach(
        adjacency: &BTreeMap<FunctionId, BTreeSet<FunctionId>>,
        start: &FunctionId,
    ) -> BTreeSet<FunctionId> {
        let mut out = BTreeSet::new();
        let mut stack: Vec<&FunctionId> = adjacency.get(start).into_iter().flatten().collect();
        while let Some(f) = stack.pop() {
            if out.insert(f.clone()) {
                stack.extend(adjacency.get(f).into_iter().flatten());
            }
        }
        out
    }

    /// Every function reachable from `f` along caller -> callee edges,
    /// excluding `f`.
    pub fn descendants(&self, f: &FunctionId) -> Result<BTreeSet<FunctionId>> {
        if !self.contains(f) {
            return Err(Error::UnknownFunction(f.clone()));
        }
        Ok(Self::reach(&self.callees, f))
    }

    /// Every function that has `f` among its descendants. A policy on any
    /// of these, or on `f` itself, covers an intent naming `f`.
    pub fn ancestors(&self, f: &FunctionId) -> Result<BTreeSet<FunctionId>> {
        if !self.contains(f) {
            return Err(Error::UnknownFunction(f.clone()));
        }
        Ok(Self::reach(&self.callers, f))
    }

    /// `f` plus its ancestors.
    pub fn covering_functions(&self, f: &FunctionId) -> BTreeSet<FunctionId> {
        let mut set = Self::reach(&self.callers, f);
        set.insert(f.clone());
        set
    }

    /// Kahn topological order, or `None` if the graph has a cycle.
    pub fn topological_order(&self) -> Option<Vec<FunctionId>> {
        let mut indegree: BTreeMap<&FunctionId, usize> =
            self.nodes.iter().map(|n| (n, 0)).collect();
        for (_, callee) in self.edges() {
            *indegree.get_mut(callee)? += 1;
        }
        let mut ready: VecDeque<&FunctionId> = indegree
            .iter()
            .filter(|(_, d)| **d == 0)
            .map(|(n, _)| *n)
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(n) = ready.pop_front() {
            order.push(n.clone());
            for c in self.callees.get(n).into_iter().flatten() {
                let d = indegree.get_mut(c)?;
                *d -= 1;
                if *d == 0 {
                    ready.push_back(c);
                }
            }
        }
        (order.len() == self.nodes.len()).then_some(order)
    }
}
