use std::collections::BTreeSet;

/// (agent, function, DE).
pub type Triple = (u64, String, u64);

/// Every function reachable from `f` along caller -> callee edges, `f`
/// excluded. Plain repeated sweeps over the edge list until nothing changes.
pub fn descendants(edges: &[(String, String)], f: &str) -> BTreeSet<String> {
    let mut reach: BTreeSet<String> = BTreeSet::new();
    loop {
        let before = reach.len();
        for (caller, callee) in edges {
            if caller == f || reach.contains(caller) {
                reach.insert(callee.clone());
            }
        }
        if reach.len() == before {
            break;
        }
    }
    reach.remove(f);
    reach
}

/// Whether some policy `(a, g, d)` authorizes the intent `(a, f, d)`:
/// `g == f`, or `f` is a descendant of `g`.
pub fn oracle_match(policies: &[Triple], edges: &[(String, String)], intent: &Triple) -> bool {
    let (agent, f, de) = intent;
    policies.iter().any(|(pa, g, pd)| {
        pa == agent && pd == de && (g == f || descendants(edges, g).contains(f))
    })
}
