//! A registry digest with its own encoding, independent of the station's
//! bincode snapshot format.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Field {
    None,
    U64(u64),
    Bool(bool),
    Str(String),
    Bytes(Vec<u8>),
    List(Vec<u64>),
}

/// Named tables of rows. Row order does not matter; rows are sorted before
/// hashing.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StateSnapshot {
    pub tables: BTreeMap<String, Vec<Vec<Field>>>,
}

impl StateSnapshot {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn row(&mut self, table: &str, row: Vec<Field>) {
        self.tables.entry(table.to_string()).or_default().push(row);
    }

    /// Declares a table so that an empty one still hashes.
    pub fn table(&mut self, table: &str) {
        self.tables.entry(table.to_string()).or_default();
    }
}

fn put_len(h: &mut Sha256, n: usize) {
    h.update((n as u64).to_le_bytes());
}

fn put_field(h: &mut Sha256, f: &Field) {
    match f {
        Field::None => h.update([0u8]),
        Field::U64(v) => {
            h.update([1u8]);
            h.update(v.to_le_bytes());
        }
        Field::Bool(b) => h.update([2u8, *b as u8]),
        Field::Str(s) => {
            h.update([3u8]);
            put_len(h, s.len());
            h.update(s.as_bytes());
        }
        Field::Bytes(b) => {
            h.update([4u8]);
            put_len(h, b.len());
            h.update(b);
        }
        Field::List(v) => {
            h.update([5u8]);
            put_len(h, v.len());
            for x in v {
                h.update(x.to_le_bytes());
            }
        }
    }
}

pub fn oracle_state_hash(s: &StateSnapshot) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"oracle-state-v1");
    put_len(&mut h, s.tables.len());
    for (name, rows) in &s.tables {
        put_len(&mut h, name.len());
        h.update(name.as_bytes());
        let mut rows = rows.clone();
        rows.sort();
        put_len(&mut h, rows.len());
        for row in &rows {
            put_len(&mut h, row.len());
            for f in row {
                put_field(&mut h, f);
            }
        }
    }
    h.finalize().into()
}
