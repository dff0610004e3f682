//! Brute-force reference checkers for the station.
//!
//! Nothing here depends on `station-core`; tests translate station data into
//! the plain types below so the checkers cannot share matching, provenance
//! or encoding code with what they check.

pub mod leak;
pub mod matching;
pub mod scenario;
pub mod state;

pub use leak::{oracle_leak_check, LeakTrace, TraceEvent, Violation, ViolationReport};
pub use matching::{descendants, oracle_match, Triple};
pub use scenario::{Action, ScenarioConfig, ScenarioScript};
pub use state::{oracle_state_hash, Field, StateSnapshot};
