//! Connector manifest format (version 1).
//!
//! A manifest is one TOML document per application:
//!
//! ```toml
//! format_version = 1
//! app = "search-app"
//!
//! [[functions]]
//! name = "index"
//! kind = "data_blind"              # or "data_aware"
//! entrypoint = { native = "index" }
//! retain_outputs = true            # keep outputs as derived DEs
//!
//! [[functions]]
//! name = "search"
//! kind = "data_blind"
//! entrypoint = { command = ["sh", "-c", "\"$STATION_IO\" ls"] }
//! params = [{ name = "keyword", type = "string" }]
//!
//! [[dependencies]]
//! caller = "search"
//! callee = "index"
//! # callee_app = "other-app"      # required when the callee lives elsewhere
//! # caller_app = "other-app"      # likewise for the caller
//! ```
//!
//! See `docs/connector-manifest.md` for the full schema.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FunctionId, FunctionKind};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectorManifest {
    pub format_version: u32,
    pub app: String,
    pub functions: Vec<FunctionDecl>,
    #[serde(default)]
    pub dependencies: Vec<DependencyDecl>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionDecl {
    pub name: String,
    pub kind: KindDecl,
    pub entrypoint: Entrypoint,
    #[serde(default)]
    pub params: Vec<ParamDecl>,
    #[serde(default)]
    pub retain_outputs: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindDecl {
    DataAware,
    DataBlind,
}

impl From<KindDecl> for FunctionKind {
    fn from(k: KindDecl) -> Self {
        match k {
            KindDecl::DataAware => FunctionKind::DataAware,
            KindDecl::DataBlind => FunctionKind::DataBlind,
        }
    }
}

/// How the station runs a function.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Entrypoint {
    /// An in-process function registered with the station by name.
    Native(String),
    /// argv of a subprocess started inside the sandbox root.
    Command(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamDecl {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ParamType,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamType {
    String,
    Int,
    Float,
    Bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DependencyDecl {
    pub caller: String,
    pub callee: String,
    /// App declaring `caller`, when it is not this manifest.
    #[serde(default)]
    pub caller_app: Option<String>,
    /// App declaring `callee`, when it is not this manifest.
    #[serde(default)]
    pub callee_app: Option<String>,
}

/// A primitive parameter value passed to a function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    String(String),
}

impl ParamValue {
    pub fn type_of(&self) -> ParamType {
        match self {
            ParamValue::Bool(_) => ParamType::Bool,
            ParamValue::Int(_) => ParamType::Int,
            ParamValue::Float(_) => ParamType::Float,
            ParamValue::String(_) => ParamType::String,
        }
    }

    pub fn render(&self) -> String {
        match self {
            ParamValue::Bool(b) => b.to_string(),
            ParamValue::Int(i) => i.to_string(),
            ParamValue::Float(x) => x.to_string(),
            ParamValue::String(s) => s.clone(),
        }
    }

    /// Parses a CLI `key=value` right-hand side according to `ty`.
    pub fn parse_as(raw: &str, ty: ParamType) -> Result<Self> {
        let bad = || Error::Invalid(format!("`{raw}` is not a valid {ty:?}"));
        Ok(match ty {
            ParamType::String => ParamValue::String(raw.to_string()),
            ParamType::Int => ParamValue::Int(raw.parse().map_err(|_| bad())?),
            ParamType::Float => ParamValue::Float(raw.parse().map_err(|_| bad())?),
            ParamType::Bool => ParamValue::Bool(raw.parse().map_err(|_| bad())?),
        })
    }
}

pub type Params = BTreeMap<String, ParamValue>;

fn valid_name(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 64
        && s
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

fn valid_param_name(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 64
        && s.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
        && !s.starts_with(|c: char| c.is_ascii_digit())
}

/// Rejects argv tokens naming absolute paths or parent directories.
fn check_command(function: &str, argv: &[String]) -> Result<()> {
    if argv.is_empty() || argv[0].trim().is_empty() {
        return Err(Error::Manifest(format!("function `{function}` has an empty command")));
    }
    for arg in argv {
        for token in arg.split(|c: char| c.is_whitespace() || matches!(c, '"' | '\'' | '=' | '<' | '>' | '|' | ';')) {
            if token.starts_with('/') || token.split('/').any(|seg| seg == "..") || token.starts_with('~') {
                return Err(Error::Manifest(format!(
                    "function `{function}` entrypoint references a path outside the sandbox: `{token}`"
                )));
            }
        }
    }
    Ok(())
}

impl ConnectorManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        let manifest: ConnectorManifest =
            toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest types always serialize")
    }

    /// Structural checks that need no knowledge of other apps.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported format_version {} (expected {MANIFEST_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if !valid_name(&self.app) {
            return Err(Error::Manifest(format!("invalid app name `{}`", self.app)));
        }
        if self.functions.is_empty() {
            return Err(Error::Manifest("manifest declares no functions".into()));
        }
        let mut names = BTreeSet::new();
        for f in &self.functions {
            if !valid_name(&f.name) || f.name.starts_with("station.") {
                return Err(Error::Manifest(format!("invalid function name `{}`", f.name)));
            }
            if !names.insert(f.name.as_str()) {
                return Err(Error::DuplicateFunction(FunctionId::new(&f.name)));
            }
            let mut params = BTreeSet::new();
            for p in &f.params {
                if !valid_param_name(&p.name) {
                    return Err(Error::Manifest(format!(
                        "function `{}` has invalid parameter name `{}`",
                        f.name, p.name
                    )));
                }
                if !params.insert(p.name.as_str()) {
                    return Err(Error::Manifest(format!(
                        "function `{}` declares parameter `{}` twice",
                        f.name, p.name
                    )));
                }
            }
            match &f.entrypoint {
                Entrypoint::Native(n) if n.trim().is_empty() => {
                    return Err(Error::Manifest(format!("function `{}` has an empty native name", f.name)))
                }
                Entrypoint::Native(_) => {}
                Entrypoint::Command(argv) => check_command(&f.name, argv)?,
            }
        }
        for d in &self.dependencies {
            if d.caller_app.is_some() && d.callee_app.is_some() {
                return Err(Error::Manifest(format!(
                    "dependency {} -> {} has no endpoint in app `{}`",
                    d.caller, d.callee, self.app
                )));
            }
            if d.caller_app.is_none() && !names.contains(d.caller.as_str()) {
                return Err(Error::Manifest(format!(
                    "dependency caller `{}` is not declared by app `{}` (set caller_app for cross-app dependencies)",
                    d.caller, self.app
                )));
            }
            if d.callee_app.is_none() && !names.contains(d.callee.as_str()) {
                return Err(Error::Manifest(format!(
                    "dependency callee `{}` is not declared by app `{}` (set callee_app for cross-app dependencies)",
                    d.callee, self.app
                )));
            }
        }
        Ok(())
    }
}
