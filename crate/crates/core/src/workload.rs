//! Guest workloads and the oracles that judge them: a sequenced commit
//! stream against the replicated device, a stateless request stream, and
//! durability/availability accounting.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::block::{BlockStore, WriteId};
use crate::engine::NodeId;
use crate::time::SimTime;

pub const DEFAULT_COMMIT_INTERVAL: SimTime = SimTime(100);
pub const DEFAULT_REQUEST_INTERVAL: SimTime = SimTime(50);

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CommitEntry {
    pub seq: u64,
    pub vm: String,
    pub issued_at: SimTime,
    pub acked_at: Option<SimTime>,
    pub block: u32,
    pub write_id: WriteId,
    /// Submission was rejected (I/O error); nothing reached a disk.
    pub rejected: bool,
}

/// Client-side record of every commit, in issue order.
#[derive(Debug, Clone, Default)]
pub struct CommitJournal {
    entries: Vec<CommitEntry>,
    by_write: BTreeMap<WriteId, usize>,
}

impl CommitJournal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn issue(&mut self, vm: &str, now: SimTime, block: u32, write_id: WriteId) -> u64 {
        let seq = self.entries.len() as u64;
        self.by_write.insert(write_id, self.entries.len());
        self.entries.push(CommitEntry {
            seq,
            vm: vm.to_string(),
            issued_at: now,
            acked_at: None,
            block,
            write_id,
            rejected: false,
        });
        seq
    }

    pub fn ack(&mut self, write: WriteId, now: SimTime) -> Option<&CommitEntry> {
        let i = *self.by_write.get(&write)?;
        let e = &mut self.entries[i];
        if e.acked_at.is_none() {
            e.acked_at = Some(now);
        }
        Some(e)
    }

    pub fn reject(&mut self, write: WriteId) {
        if let Some(&i) = self.by_write.get(&write) {
            self.entries[i].rejected = true;
        }
    }

    pub fn entries(&self) -> &[CommitEntry] {
        &self.entries
    }

    pub fn get(&self, write: WriteId) -> Option<&CommitEntry> {
        self.by_write.get(&write).map(|&i| &self.entries[i])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RequestOutcome {
    Served,
    FailedNoService,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RequestEntry {
    pub seq: u64,
    pub vm: String,
    pub issued_at: SimTime,
    pub outcome: RequestOutcome,
}

#[derive(Debug, Clone, Default)]
pub struct RequestLog {
    entries: Vec<RequestEntry>,
}

impl RequestLog {
    pub fn record(&mut self, vm: &str, now: SimTime, served: bool) {
        let outcome = if served { RequestOutcome::Served } else { RequestOutcome::FailedNoService };
        let seq = self.entries.len() as u64;
        self.entries.push(RequestEntry { seq, vm: vm.to_string(), issued_at: now, outcome });
    }

    pub fn entries(&self) -> &[RequestEntry] {
        &self.entries
    }

    pub fn failed_since(&self, vm: &str, since: SimTime) -> usize {
        self.entries
            .iter()
            .filter(|e| e.vm == vm && e.issued_at >= since && e.outcome == RequestOutcome::FailedNoService)
            .count()
    }
}

/// One guest's commit generator: periodic, phase-shifted, writing its own
/// block range sequentially.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitClient {
    pub vm: String,
    pub interval: SimTime,
    pub phase: SimTime,
    pub base: u32,
    pub range: u32,
    pub issued: u64,
}

impl CommitClient {
    pub fn block_for(&self, n: u64) -> u32 {
        self.base + (n % u64::from(self.range.max(1))) as u32
    }

    /// First tick at or after `from`.
    pub fn first_tick(&self, from: SimTime) -> SimTime {
        let iv = self.interval.as_ms().max(1);
        let ph = self.phase.as_ms();
        let t = from.as_ms();
        if t <= ph {
            return SimTime(ph);
        }
        SimTime(ph + (t - ph).div_ceil(iv) * iv)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DurabilityReport {
    /// Journal seqs.
    pub lost_acked: Vec<u64>,
    pub lost_unacked: Vec<u64>,
    pub preserved: usize,
    pub rejected: usize,
    /// No UpToDate replica to judge against.
    pub indeterminate: bool,
}

/// Judges every journal entry against the surviving replica. A write also
/// counts as preserved when a later write of the same journal has since
/// replaced its block.
pub fn verify_durability(journal: &CommitJournal, surviving: Option<&BlockStore>) -> DurabilityReport {
    let mut rep = DurabilityReport::default();
    let Some(store) = surviving else {
        rep.indeterminate = true;
        return rep;
    };
    for e in journal.entries() {
        if e.rejected {
            rep.rejected += 1;
            continue;
        }
        let kept = match store.get(e.block) {
            Some(rec) if rec.write_id == e.write_id => true,
            Some(rec) if rec.write_id > e.write_id => journal.get(rec.write_id).is_some_and(|later| later.vm == e.vm),
            _ => false,
        };
        if kept {
            rep.preserved += 1;
        } else if e.acked_at.is_some() {
            rep.lost_acked.push(e.seq);
        } else {
            rep.lost_unacked.push(e.seq);
        }
    }
    rep
}

/// A guest became Running (`running = true`) or stopped being so on `node`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VmEvent {
    pub at: SimTime,
    pub node: NodeId,
    pub running: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Availability {
    pub downtime: SimTime,
    /// Injection to first Running on a different host; `None` when the
    /// guest never had to move.
    pub failover: Option<SimTime>,
    pub failed_requests: usize,
}

/// Availability of one guest from its Running transitions, measured over
/// `[from, to]`.
pub fn measure_availability(events: &[VmEvent], from: SimTime, to: SimTime) -> Availability {
    let mut running_on: Option<NodeId> = None;
    let mut idx = 0;
    while idx < events.len() && events[idx].at < from {
        let e = &events[idx];
        running_on = e.running.then(|| e.node.clone());
        idx += 1;
    }
    let host_at_injection = running_on.clone();
    let mut down_since = if running_on.is_none() { Some(from) } else { None };
    let mut downtime = 0u64;
    let mut failover = None;
    let mut went_down = running_on.is_none();
    for e in &events[idx..] {
        if e.at > to {
            break;
        }
        if e.running {
            if let Some(d) = down_since.take() {
                downtime += e.at.saturating_sub(d).as_ms();
            }
            if failover.is_none() && went_down && host_at_injection.as_ref() != Some(&e.node) {
                failover = Some(e.at.saturating_sub(from));
            }
            running_on = Some(e.node.clone());
        } else if running_on.as_ref() == Some(&e.node) {
            running_on = None;
            went_down = true;
            down_since.get_or_insert(e.at);
        }
    }
    if let Some(d) = down_since {
        downtime += to.saturating_sub(d).as_ms();
    }
    Availability { downtime: SimTime(downtime), failover, failed_requests: 0 }
}
