//! Run traces: one JSON object per line, in the order things happened.
//!
//! A record is `{"seq":…,"tick":…,"actor":…,"event":…,"data":{…}}`. Ledger
//! events are mirrored with actor `"ledger"` and event `"ledger/<name>"`.
//! Object keys inside `data` are sorted, so the byte stream — and its
//! SHA-256 digest — depends only on the scenario and seed.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::crypto::Digest;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub seq: u64,
    pub tick: u64,
    pub actor: String,
    pub event: String,
    pub data: Value,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new() -> Trace {
        Trace::default()
    }

    pub fn push(&mut self, tick: u64, actor: &str, event: &str, data: Value) {
        self.records.push(TraceRecord {
            seq: self.records.len() as u64,
            tick,
            actor: actor.to_string(),
            event: event.to_string(),
            data,
        });
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn digest(&self) -> Digest {
        Digest::of(self.to_jsonl().as_bytes())
    }

    pub fn parse_jsonl(text: &str) -> Result<Trace, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Trace { records })
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_jsonl())
    }
}

/// Result of comparing two traces line by line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TraceDiff {
    Equal,
    /// First differing line (1-based). `None` means that trace ended first.
    Diverge {
        line: usize,
        a: Option<String>,
        b: Option<String>,
    },
}

impl fmt::Display for TraceDiff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceDiff::Equal => write!(f, "traces are identical"),
            TraceDiff::Diverge { line, a, b } => {
                let show = |s: &Option<String>| s.clone().unwrap_or_else(|| "<end of trace>".into());
                write!(f, "first divergence at line {line}\n  a: {}\n  b: {}", show(a), show(b))
            }
        }
    }
}

pub fn diff_traces(a: &str, b: &str) -> TraceDiff {
    let mut la = a.lines();
    let mut lb = b.lines();
    let mut line = 0;
    loop {
        line += 1;
        match (la.next(), lb.next()) {
            (None, None) => return TraceDiff::Equal,
            (x, y) if x == y => continue,
            (x, y) => {
                return TraceDiff::Diverge {
                    line,
                    a: x.map(str::to_string),
                    b: y.map(str::to_string),
                }
            }
        }
    }
}
