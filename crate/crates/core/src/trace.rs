//! Totally ordered run log.
//!
//! Every module appends here through the engine. The text form is
//! `<time_ms> <node|-> <module> <kind> <detail>`, one entry per line; the
//! JSON-lines form carries the same five fields under the keys `t`, `node`,
//! `module`, `kind`, `detail`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub t: u64,
    pub node: Option<String>,
    pub module: String,
    pub kind: String,
    pub detail: String,
}

impl TraceEntry {
    pub fn time(&self) -> SimTime {
        SimTime(self.t)
    }

    /// `<kind> <detail>`, the text expected-step patterns are matched against.
    pub fn step_text(&self) -> String {
        if self.detail.is_empty() {
            self.kind.clone()
        } else {
            format!("{} {}", self.kind, self.detail)
        }
    }

    pub fn to_line(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{} {} {} {}",
            self.t,
            self.node.as_deref().unwrap_or("-"),
            self.module,
            self.kind
        );
        if !self.detail.is_empty() {
            s.push(' ');
            s.push_str(&self.detail);
        }
        s
    }

    /// Inverse of [`TraceEntry::to_line`].
    pub fn parse_line(line: &str) -> Option<TraceEntry> {
        let mut parts = line.splitn(5, ' ');
        let t = parts.next()?.parse().ok()?;
        let node = match parts.next()? {
            "-" => None,
            n => Some(n.to_string()),
        };
        let module = parts.next()?.to_string();
        let kind = parts.next()?.to_string();
        let detail = parts.next().unwrap_or("").to_string();
        Some(TraceEntry { t, node, module, kind, detail })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    entries: Vec<TraceEntry>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: TraceEntry) {
        debug_assert!(self.entries.last().is_none_or(|e| e.t <= entry.t));
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[TraceEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TraceEntry> {
        self.entries.iter()
    }

    pub fn find(&self, module: &str, kind: &str) -> impl Iterator<Item = &TraceEntry> + '_ {
        let module = module.to_string();
        let kind = kind.to_string();
        self.entries.iter().filter(move |e| e.module == module && e.kind == kind)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.entries.len() * 48);
        for e in &self.entries {
            out.push_str(&e.to_line());
            out.push('\n');
        }
        out
    }

    pub fn to_json_lines(&self) -> String {
        let mut out = String::with_capacity(self.entries.len() * 80);
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("trace entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Option<Trace> {
        let entries = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(TraceEntry::parse_line)
            .collect::<Option<Vec<_>>>()?;
        Some(Trace { entries })
    }
}
