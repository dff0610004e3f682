//! Connector registration and the function dependency graph.

mod graph;
mod manifest;

pub use graph::DependencyGraph;
pub use manifest::{
    ConnectorManifest, DependencyDecl, Entrypoint, FunctionDecl, KindDecl, ParamDecl, ParamType,
    ParamValue, Params, MANIFEST_FORMAT_VERSION,
};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::crypto::sha256;
use crate::error::{Error, Result};
use crate::model::{FunctionId, FunctionKind};

#[derive(Clone, Debug, PartialEq)]
pub struct FunctionDef {
    pub id: FunctionId,
    pub app: String,
    pub kind: FunctionKind,
    pub entrypoint: Entrypoint,
    pub params: Vec<ParamDecl>,
    pub retain_outputs: bool,
}

impl FunctionDef {
    /// Checks supplied parameters against the declared schema.
    pub fn check_params(&self, params: &Params) -> Result<()> {
        for (name, value) in params {
            let decl = self
                .params
                .iter()
                .find(|p| &p.name == name)
                .ok_or_else(|| Error::Invalid(format!("{} takes no parameter `{name}`", self.id)))?;
            let ok = decl.ty == value.type_of()
                || (decl.ty == ParamType::Float && value.type_of() == ParamType::Int);
            if !ok {
                return Err(Error::Invalid(format!(
                    "parameter `{name}` of {} must be {:?}",
                    self.id, decl.ty
                )));
            }
        }
        Ok(())
    }
}

/// Row returned by `list_functions`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionSummary {
    pub name: FunctionId,
    pub app: String,
    pub kind: FunctionKind,
    pub params: Vec<(String, String)>,
    pub calls: Vec<FunctionId>,
}

#[derive(Clone, Debug, Default)]
pub struct FunctionRegistry {
    functions: BTreeMap<FunctionId, FunctionDef>,
    apps: BTreeMap<String, BTreeSet<FunctionId>>,
    graph: DependencyGraph,
}

impl FunctionRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn graph(&self) -> &DependencyGraph {
        &self.graph
    }

    pub fn get(&self, f: &FunctionId) -> Result<&FunctionDef> {
        self.functions
            .get(f)
            .ok_or_else(|| Error::UnknownFunction(f.clone()))
    }

    pub fn contains(&self, f: &FunctionId) -> bool {
        self.functions.contains_key(f)
    }

    /// Registers every function of `manifest` and merges its dependency
    /// edges. All-or-nothing: a rejected manifest leaves the registry
    /// exactly as it was.
    pub fn register_connector(&mut self, manifest: &ConnectorManifest) -> Result<Vec<FunctionId>> {
        manifest.validate()?;
        if self.apps.contains_key(&manifest.app) {
            return Err(Error::Manifest(format!("app `{}` is already registered", manifest.app)));
        }
        let mut graph = self.graph.clone();
        let mut added = Vec::new();
        for decl in &manifest.functions {
            let id = FunctionId::new(&decl.name);
            if self.functions.contains_key(&id) {
                return Err(Error::DuplicateFunction(id));
            }
            graph.add_node(id.clone());
            added.push(id);
        }
        for dep in &manifest.dependencies {
            let caller = FunctionId::new(&dep.caller);
            let callee = FunctionId::new(&dep.callee);
            for (f, app) in [(&caller, &dep.caller_app), (&callee, &dep.callee_app)] {
                if let Some(app) = app {
                    let declared = self.apps.get(app).map(|fs| fs.contains(f)).unwrap_or(false);
                    if !declared {
                        return Err(Error::Manifest(format!(
                            "cross-app dependency names `{f}` but app `{app}` does not declare it"
                        )));
                    }
                }
            }
            graph.add_edge(&caller, &callee)?;
        }
        debug_assert!(graph.topological_order().is_some());

        self.graph = graph;
        for decl in &manifest.functions {
            let id = FunctionId::new(&decl.name);
            self.functions.insert(
                id.clone(),
                FunctionDef {
                    id,
                    app: manifest.app.clone(),
                    kind: decl.kind.into(),
                    entrypoint: decl.entrypoint.clone(),
                    params: decl.params.clone(),
                    retain_outputs: decl.retain_outputs,
                },
            );
        }
        self.apps
            .insert(manifest.app.clone(), added.iter().cloned().collect());
        Ok(added)
    }

    pub fn descendants(&self, f: &FunctionId) -> Result<BTreeSet<FunctionId>> {
        self.graph.descendants(f)
    }

    /// Stable (name-ordered) listing of every registered function.
    pub fn list_functions(&self) -> Vec<FunctionSummary> {
        self.functions
            .values()
            .map(|def| FunctionSummary {
                name: def.id.clone(),
                app: def.app.clone(),
                kind: def.kind,
                params: def
                    .params
                    .iter()
                    .map(|p| (p.name.clone(), format!("{:?}", p.ty).to_lowercase()))
                    .collect(),
                calls: self
                    .graph
                    .edges()
                    .filter(|(caller, _)| **caller == def.id)
                    .map(|(_, callee)| callee.clone())
                    .collect(),
            })
            .collect()
    }

    /// Digest over functions and edges, for "unchanged after rejection"
    /// checks.
    pub fn state_digest(&self) -> [u8; 32] {
        let mut buf = Vec::new();
        for def in self.functions.values() {
            buf.extend_from_slice(format!("{:?}\n", def).as_bytes());
        }
        for (a, b) in self.graph.edges() {
            buf.extend_from_slice(format!("{a}->{b}\n").as_bytes());
        }
        sha256(&[&buf])
    }
}
