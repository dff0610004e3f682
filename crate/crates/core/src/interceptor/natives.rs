//! In-process connector functions. They see inputs only through the
//! [`ExecutionContext`], exactly like subprocess connectors do.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::functions::ParamValue;

use super::ExecutionContext;

pub trait NativeFunction: Send + Sync {
    fn run(&self, io: &ExecutionContext) -> Result<()>;
}

/// First line of every index produced by the built-in `index` function.
pub const INDEX_MAGIC: &str = "station-index-v1";

fn string_param<'a>(io: &'a ExecutionContext, name: &str) -> Option<&'a str> {
    match io.params().get(name) {
        Some(ParamValue::String(s)) => Some(s),
        _ => None,
    }
}

fn int_param(io: &ExecutionContext, name: &str) -> Option<i64> {
    match io.params().get(name) {
        Some(ParamValue::Int(i)) => Some(*i),
        _ => None,
    }
}

/// Emits every visible input unchanged, one output each.
struct Download;

impl NativeFunction for Download {
    fn run(&self, io: &ExecutionContext) -> Result<()> {
        for name in io.list() {
            let bytes = io.read(&name)?;
            io.put_output(bytes.to_vec(), Some(vec![name]))?;
        }
        Ok(())
    }
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

/// Builds an inverted index (word -> input names) over every visible
/// input that is not itself an index.
struct Index;

impl NativeFunction for Index {
    fn run(&self, io: &ExecutionContext) -> Result<()> {
        let mut index: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for name in io.list() {
            let bytes = io.read(&name)?;
            let text = String::from_utf8_lossy(&bytes);
            if text.starts_with(INDEX_MAGIC) {
                continue;
            }
            for w in words(&text) {
                index.entry(w).or_default().insert(name.clone());
            }
        }
        let mut out = format!("{INDEX_MAGIC}\n");
        for (word, names) in index {
            out.push_str(&word);
            out.push('\t');
            out.push_str(&names.into_iter().collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        io.put_output(out.into_bytes(), None)
    }
}

fn parse_index(text: &str) -> Result<HashMap<&str, Vec<&str>>> {
    let mut lines = text.lines();
    if lines.next() != Some(INDEX_MAGIC) {
        return Err(Error::Sandbox("not an index".into()));
    }
    Ok(lines
        .filter_map(|l| l.split_once('\t'))
        .map(|(w, names)| (w, names.split(',').collect()))
        .collect())
}

/// Looks `query` up either in the index named by the `index` parameter or,
/// without one, by scanning every visible input.
struct Search;

impl NativeFunction for Search {
    fn run(&self, io: &ExecutionContext) -> Result<()> {
        let query = string_param(io, "query")
            .ok_or_else(|| Error::Invalid("search needs a `query` parameter".into()))?
            .to_lowercase();
        let hits: BTreeSet<String> = match int_param(io, "index") {
            Some(id) => {
                let bytes = io.read(&format!("de-{id}"))?;
                let text = String::from_utf8_lossy(&bytes);
                let index = parse_index(&text)?;
                index
                    .get(query.as_str())
                    .map(|v| v.iter().map(|s| s.to_string()).collect())
                    .unwrap_or_default()
            }
            None => {
                let mut hits = BTreeSet::new();
                for name in io.list() {
                    let bytes = io.read(&name)?;
                    if words(&String::from_utf8_lossy(&bytes)).any(|w| w == query) {
                        hits.insert(name);
                    }
                }
                hits
            }
        };
        let mut out = String::new();
        for h in hits {
            out.push_str(&h);
            out.push('\n');
        }
        io.put_output(out.into_bytes(), None)
    }
}

struct Noop;

impl NativeFunction for Noop {
    fn run(&self, _io: &ExecutionContext) -> Result<()> {
        Ok(())
    }
}

/// Concatenates the inputs named by `pick` ("all" or comma-separated DE
/// ids). Inputs it may not read are skipped; the refusal is still recorded.
struct Concat;

impl NativeFunction for Concat {
    fn run(&self, io: &ExecutionContext) -> Result<()> {
        let pick = string_param(io, "pick").unwrap_or("all");
        let names: Vec<String> = if pick == "all" {
            io.list()
        } else {
            pick.split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| format!("de-{}", s.trim()))
                .collect()
        };
        let mut out = Vec::new();
        let mut used = Vec::new();
        for name in names {
            match io.read(&name) {
                Ok(bytes) => {
                    out.extend_from_slice(&bytes);
                    used.push(name);
                }
                Err(Error::Violation(_)) => {}
                Err(e) => return Err(e),
            }
        }
        io.put_output(out, Some(used))
    }
}

/// Toy "training" over pooled CSV inputs: row count and per-column means
/// of every numeric row.
struct TrainPooledCsv;

impl NativeFunction for TrainPooledCsv {
    fn run(&self, io: &ExecutionContext) -> Result<()> {
        let mut sums: Vec<f64> = Vec::new();
        let mut rows = 0u64;
        for name in io.list() {
            let bytes = io.read(&name)?;
            for line in String::from_utf8_lossy(&bytes).lines() {
                let parsed: std::result::Result<Vec<f64>, _> =
                    line.split(',').map(|c| c.trim().parse::<f64>()).collect();
                let Ok(values) = parsed else { continue };
                if sums.is_empty() {
                    sums = vec![0.0; values.len()];
                }
                if values.len() != sums.len() {
                    continue;
                }
                for (s, v) in sums.iter_mut().zip(values) {
                    *s += v;
                }
                rows += 1;
            }
        }
        let means: Vec<String> = sums
            .iter()
            .map(|s| format!("{:.6}", if rows == 0 { 0.0 } else { s / rows as f64 }))
            .collect();
        let model = format!("rows={rows}\nmeans={}\n", means.join(","));
        io.put_output(model.into_bytes(), None)
    }
}

/// Natives available to every station, keyed by entrypoint name.
pub fn builtin_natives() -> BTreeMap<String, Arc<dyn NativeFunction>> {
    let mut m: BTreeMap<String, Arc<dyn NativeFunction>> = BTreeMap::new();
    m.insert("download".into(), Arc::new(Download));
    m.insert("index".into(), Arc::new(Index));
    m.insert("search".into(), Arc::new(Search));
    m.insert("noop".into(), Arc::new(Noop));
    m.insert("concat".into(), Arc::new(Concat));
    m.insert("train_pooled_csv".into(), Arc::new(TrainPooledCsv));
    m
}
