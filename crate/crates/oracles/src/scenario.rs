//! Seeded random action scripts.
//!
//! Actions name agents, DEs, policies and staged results by position in
//! whatever the driver has created so far; the driver reduces each index
//! modulo the current count and skips actions whose preconditions fail.
//! A script is a pure function of its seed and config.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Action {
    RegisterAgent { owner: bool, user: bool },
    RegisterDe { owner: usize, enclave: bool, token: String, filler: String },
    CreatePolicy { de: usize, grantee: usize, function: usize },
    DeletePolicy { policy: usize },
    Invoke { caller: usize, function: usize, declared: Vec<usize>, covered_only: bool },
    Decide { staged: usize, owner: usize, grant: bool },
    Fetch { agent: usize },
    Checkpoint { slots: usize },
    Crash,
    Recover,
}

#[derive(Clone, Debug)]
pub struct ScenarioConfig {
    pub steps: usize,
    pub max_agents: usize,
    pub max_des: usize,
    /// Number of functions the driver offers; `function` fields index it.
    pub functions: usize,
    pub crashes: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            steps: 40,
            max_agents: 10,
            max_des: 50,
            functions: 4,
            crashes: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScenarioScript {
    pub seed: u64,
    pub actions: Vec<Action>,
}

const WORDS: &[&str] = &["apple", "river", "stone", "cloud", "ember", "maple", "orbit", "quartz"];

fn token(rng: &mut ChaCha8Rng) -> String {
    format!("tok{:016x}", rng.gen::<u64>())
}

impl ScenarioScript {
    pub fn generate(seed: u64, cfg: &ScenarioConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut actions = Vec::with_capacity(cfg.steps + 4);
        // Every scenario starts with two owners and a user.
        actions.push(Action::RegisterAgent { owner: true, user: false });
        actions.push(Action::RegisterAgent { owner: true, user: false });
        actions.push(Action::RegisterAgent { owner: false, user: true });
        let mut agents = 3;
        let mut des = 0;
        let mut crashed = false;
        while actions.len() < cfg.steps {
            if crashed {
                actions.push(Action::Recover);
                crashed = false;
                continue;
            }
            let roll = rng.gen_range(0..100);
            let a = match roll {
                0..=5 if agents < cfg.max_agents => {
                    agents += 1;
                    let owner = rng.gen_bool(0.5);
                    Action::RegisterAgent { owner, user: !owner || rng.gen_bool(0.3) }
                }
                0..=24 if des < cfg.max_des => {
                    des += 1;
                    let filler = (0..rng.gen_range(1..4))
                        .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
                        .collect::<Vec<_>>()
                        .join(" ");
                    Action::RegisterDe {
                        owner: rng.gen(),
                        enclave: rng.gen_bool(0.4),
                        token: token(&mut rng),
                        filler,
                    }
                }
                0..=39 => Action::CreatePolicy {
                    de: rng.gen(),
                    grantee: rng.gen(),
                    function: rng.gen_range(0..cfg.functions),
                },
                40..=44 => Action::DeletePolicy { policy: rng.gen() },
                45..=74 => {
                    let n = rng.gen_range(1..4);
                    Action::Invoke {
                        caller: rng.gen(),
                        function: rng.gen_range(0..cfg.functions),
                        declared: (0..n).map(|_| rng.gen()).collect(),
                        covered_only: rng.gen_bool(0.25),
                    }
                }
                75..=86 => Action::Decide {
                    staged: rng.gen(),
                    owner: rng.gen(),
                    grant: rng.gen_bool(0.7),
                },
                87..=93 => Action::Fetch { agent: rng.gen() },
                94..=96 => Action::Checkpoint { slots: rng.gen_range(1..4) },
                _ if cfg.crashes => {
                    crashed = true;
                    Action::Crash
                }
                _ => continue,
            };
            actions.push(a);
        }
        ScenarioScript { seed, actions }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripts_replay_from_their_seed() {
        let cfg = ScenarioConfig {
            crashes: true,
            ..ScenarioConfig::default()
        };
        assert_eq!(ScenarioScript::generate(7, &cfg).actions, ScenarioScript::generate(7, &cfg).actions);
        assert_ne!(ScenarioScript::generate(7, &cfg).actions, ScenarioScript::generate(8, &cfg).actions);
    }

    #[test]
    fn every_crash_is_followed_by_recover() {
        let cfg = ScenarioConfig {
            steps: 200,
            crashes: true,
            ..ScenarioConfig::default()
        };
        for seed in 0..50 {
            let s = ScenarioScript::generate(seed, &cfg);
            for w in s.actions.windows(2) {
                if w[0] == Action::Crash {
                    assert_eq!(w[1], Action::Recover);
                }
            }
        }
    }
}
