//! No-leak checking by content tokens.
//!
//! Every registered DE in a scenario carries a unique token in its bytes.
//! A delivered byte stream leaks DE `d` if `d`'s token appears in it; that
//! is allowed only when the authorizations recorded so far cover
//! (recipient, function, d) under the descendant rule.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::matching::{oracle_match, Triple};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TraceEvent {
    Registered { de: u64, token: String },
    /// An owner authorized (agent, function, de), by writing a policy or by
    /// granting a staged result that listed the DE.
    Authorized(Triple),
    Revoked(Triple),
    Delivered {
        step: usize,
        recipient: u64,
        function: String,
        payload: Vec<u8>,
    },
}

#[derive(Clone, Debug, Default)]
pub struct LeakTrace {
    pub events: Vec<TraceEvent>,
}

impl LeakTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, e: TraceEvent) {
        self.events.push(e);
    }

    pub fn deliveries(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, TraceEvent::Delivered { .. }))
            .count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub step: usize,
    pub recipient: u64,
    pub function: String,
    pub de: u64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "LEAK step={} recipient={} function={} de={}",
            self.step, self.recipient, self.function, self.de
        )
    }
}

/// All violations of one seeded run, one line each after a header.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViolationReport {
    pub seed: u64,
    pub violations: Vec<Violation>,
}

impl fmt::Display for ViolationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed={} violations={}", self.seed, self.violations.len())?;
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

pub fn oracle_leak_check(trace: &LeakTrace, edges: &[(String, String)]) -> Vec<Violation> {
    let mut tokens: BTreeMap<u64, Vec<u8>> = BTreeMap::new();
    let mut auth: BTreeSet<Triple> = BTreeSet::new();
    let mut out = Vec::new();
    for e in &trace.events {
        match e {
            TraceEvent::Registered { de, token } => {
                tokens.insert(*de, token.as_bytes().to_vec());
            }
            TraceEvent::Authorized(t) => {
                auth.insert(t.clone());
            }
            TraceEvent::Revoked(t) => {
                auth.remove(t);
            }
            TraceEvent::Delivered {
                step,
                recipient,
                function,
                payload,
            } => {
                let policies: Vec<Triple> = auth.iter().cloned().collect();
                for (de, tok) in &tokens {
                    if contains(payload, tok)
                        && !oracle_match(&policies, edges, &(*recipient, function.clone(), *de))
                    {
                        out.push(Violation {
                            step: *step,
                            recipient: *recipient,
                            function: function.clone(),
                            de: *de,
                        });
                    }
                }
            }
        }
    }
    out
}
