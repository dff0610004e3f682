use std::collections::HashMap;

use parking_lot::RwLock;

use super::SymmetricKey;
use crate::error::{Error, Result};
use crate::model::AgentId;

/// Memory-resident store of agent symmetric keys.
///
/// Deliberately has no serialization support: the map is empty after every
/// restart and is repopulated only by agents resending their keys.
#[derive(Default)]
pub struct VolatileKeyManager {
    keys: RwLock<HashMap<AgentId, SymmetricKey>>,
}

impl std::fmt::Debug for VolatileKeyManager {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VolatileKeyManager")
            .field("agents", &self.agents())
            .finish()
    }
}

impl VolatileKeyManager {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces the key held for `agent`.
    pub fn insert(&self, agent: AgentId, key: SymmetricKey) {
        self.keys.write().insert(agent, key);
    }

    pub fn get(&self, agent: AgentId) -> Option<SymmetricKey> {
        self.keys.read().get(&agent).cloned()
    }

    pub fn require(&self, agent: AgentId) -> Result<SymmetricKey> {
        self.get(agent).ok_or(Error::KeyRequired(agent))
    }

    pub fn contains(&self, agent: AgentId) -> bool {
        self.keys.read().contains_key(&agent)
    }

    pub fn remove(&self, agent: AgentId) -> Option<SymmetricKey> {
        self.keys.write().remove(&agent)
    }

    pub fn agents(&self) -> Vec<AgentId> {
        let mut v: Vec<_> = self.keys.read().keys().copied().collect();
        v.sort();
        v
    }

    pub fn len(&self) -> usize {
        self.keys.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.keys.write().clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_lookup_remove() {
        let km = VolatileKeyManager::new();
        assert!(matches!(km.require(AgentId(1)), Err(Error::KeyRequired(_))));
        let k = SymmetricKey::generate();
        km.insert(AgentId(1), k.clone());
        km.insert(AgentId(1), k.clone());
        assert_eq!(km.len(), 1);
        assert_eq!(km.get(AgentId(1)), Some(k));
        km.remove(AgentId(1));
        assert!(km.is_empty());
    }
}
