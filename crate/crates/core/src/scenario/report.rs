//! Run reports, and the pass that recomputes their scalars from the trace.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::cluster::RunOutcome;
use crate::engine::NodeId;
use crate::time::SimTime;
use crate::trace::Trace;
use crate::workload::{measure_availability, VmEvent};

use super::steps::{check_expected_steps, Divergence, Verdict};
use super::Scenario;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    /// Slowest guest's injection-to-running-elsewhere time.
    pub failover_ms: Option<u64>,
    /// Longest per-guest downtime after the first injection.
    pub downtime_ms: u64,
    pub lost_acked: usize,
    pub lost_unacked: usize,
    /// Longest completed resync after the first injection.
    pub resync_ms: Option<u64>,
    pub verdict: String,
    pub first_divergence: Option<Divergence>,
    pub detection_ms: Option<u64>,
    pub fence_ms: Option<u64>,
    pub start_ms: Option<u64>,
    pub resync_utilization: Option<f64>,
    pub failed_requests: usize,
    pub durability_indeterminate: bool,
    pub violations: Vec<String>,
    /// The trace-only recomputation agreed with the report.
    pub recomputed: bool,
    pub trace_entries: usize,
}

impl RunReport {
    pub fn build(sc: &Scenario, out: &RunOutcome) -> RunReport {
        let verdict = check_expected_steps(&out.trace, &sc.expected);
        let (failover, downtime) = aggregate(&out.vm_events, out.first_injection, out.end);
        let resync_ms = out
            .resyncs
            .iter()
            .filter(|r| out.first_injection.is_some_and(|t| r.started >= t))
            .filter_map(|r| r.done.map(|d| d.saturating_sub(r.started).as_ms()))
            .max();
        let resync_utilization = out
            .resyncs
            .iter()
            .filter(|r| out.first_injection.is_some_and(|t| r.started >= t))
            .filter_map(|r| r.utilization)
            .reduce(f64::max);
        let decomposition = decompose(&out.trace);
        let failed_requests = match out.first_injection {
            Some(t) => out.requests.entries().iter().filter(|e| e.issued_at >= t && e.outcome != crate::workload::RequestOutcome::Served).count(),
            None => 0,
        };
        let mut rep = RunReport {
            scenario: sc.name.clone(),
            seed: sc.seed,
            failover_ms: failover,
            downtime_ms: downtime,
            lost_acked: out.durability.lost_acked.len(),
            lost_unacked: out.durability.lost_unacked.len(),
            resync_ms,
            verdict: verdict.label().to_string(),
            first_divergence: match verdict {
                Verdict::Diverged(d) => Some(d),
                Verdict::Matched => None,
            },
            detection_ms: decomposition.map(|d| d.0),
            fence_ms: decomposition.map(|d| d.1),
            start_ms: decomposition.map(|d| d.2),
            resync_utilization,
            failed_requests,
            durability_indeterminate: out.durability.indeterminate,
            violations: out.violations.clone(),
            recomputed: false,
            trace_entries: out.trace.len(),
        };
        rep.recomputed = Recomputed::from_trace(&out.trace) == Recomputed::from_report(&rep);
        rep
    }

    pub fn exit_code(&self) -> i32 {
        if !self.violations.is_empty() {
            3
        } else if self.verdict != "Matched" {
            2
        } else {
            0
        }
    }

    pub fn to_text(&self) -> String {
        let ms = |v: Option<u64>| v.map_or("-".to_string(), |v| format!("{v} ms"));
        let mut s = format!("scenario {} (seed {}): {}\n", self.scenario, self.seed, self.verdict);
        if let Some(d) = &self.first_divergence {
            s += &format!("  first divergence: step {} \"{}\"\n", d.index + 1, d.pattern);
            if let Some(n) = &d.nearest {
                s += &format!("  nearest entry:    {n}\n");
            }
        }
        s += &format!("  failover   {}", ms(self.failover_ms));
        if let (Some(a), Some(b), Some(c)) = (self.detection_ms, self.fence_ms, self.start_ms) {
            s += &format!(" = detection {a} + fence {b} + start {c}");
        }
        s += "\n";
        s += &format!("  downtime   {} ms ({} failed requests)\n", self.downtime_ms, self.failed_requests);
        s += &format!("  lost       {} acked, {} unacked", self.lost_acked, self.lost_unacked);
        if self.durability_indeterminate {
            s += " (indeterminate: no up-to-date replica)";
        }
        s += "\n";
        s += &format!("  resync     {}", ms(self.resync_ms));
        if let Some(u) = self.resync_utilization {
            s += &format!(" at {:.1}% link utilization", u * 100.0);
        }
        s += "\n";
        for v in &self.violations {
            s += &format!("  VIOLATION  {v}\n");
        }
        if !self.recomputed {
            s += "  WARNING    trace recomputation disagrees with this report\n";
        }
        s
    }
}

/// Max failover and max downtime over guests that ran at some point,
/// measured from the first injection.
fn aggregate(
    events: &BTreeMap<String, Vec<VmEvent>>,
    first_injection: Option<SimTime>,
    end: SimTime,
) -> (Option<u64>, u64) {
    let Some(from) = first_injection else {
        return (None, 0);
    };
    let mut failover = None;
    let mut downtime = 0;
    for evs in events.values().filter(|e| !e.is_empty()) {
        let a = measure_availability(evs, from, end);
        failover = failover.max(a.failover.map(|f| f.as_ms()));
        downtime = downtime.max(a.downtime.as_ms());
    }
    (failover, downtime)
}

/// The guest whose failover took longest, split into detection, fencing
/// and start, all read from the trace.
fn decompose(trace: &Trace) -> Option<(u64, u64, u64)> {
    let entries = trace.entries();
    let inj = entries.iter().find(|e| e.module == "scenario" && e.kind == "inject")?;
    let t0 = inj.t;
    let events = vm_events(trace);
    let mut best: Option<(u64, String, NodeId)> = None;
    for (vm, evs) in &events {
        let a = measure_availability(evs, SimTime(t0), trace_end(trace));
        if let Some(f) = a.failover {
            let host = evs.iter().take_while(|e| e.at.as_ms() < t0).last().filter(|e| e.running).map(|e| e.node.clone());
            if let Some(h) = host {
                if best.as_ref().is_none_or(|b| f.as_ms() > b.0) {
                    best = Some((f.as_ms(), vm.clone(), h));
                }
            }
        }
    }
    let (total, _, host) = best?;
    let dead = entries.iter().find(|e| e.t >= t0 && e.module == "membership" && e.kind == "dead" && e.detail == host.as_str())?;
    let fenced = entries.iter().find(|e| e.t >= dead.t && e.module == "stonith" && e.kind == "fence-ok" && e.detail == host.as_str())?;
    let detect = dead.t - t0;
    let fence = fenced.t - dead.t;
    Some((detect, fence, total.checked_sub(detect + fence)?))
}

fn trace_end(trace: &Trace) -> SimTime {
    trace.entries().last().map_or(SimTime::ZERO, |e| e.time())
}

/// Guest Running transitions as the trace records them.
pub fn vm_events(trace: &Trace) -> BTreeMap<String, Vec<VmEvent>> {
    let mut out: BTreeMap<String, Vec<VmEvent>> = BTreeMap::new();
    let mut running: BTreeMap<String, NodeId> = BTreeMap::new();
    for e in trace.iter().filter(|e| e.module == "vm") {
        let mut w = e.detail.split_whitespace();
        let (Some(vm), Some(node)) = (w.next(), w.next()) else { continue };
        let node = NodeId::from(node);
        let at = e.time();
        let evs = out.entry(vm.to_string()).or_default();
        match e.kind.as_str() {
            "running" => {
                evs.push(VmEvent { at, node: node.clone(), running: true });
                running.insert(vm.to_string(), node);
            }
            "stopping" | "lost" | "failed" | "migrated" if running.get(vm) == Some(&node) => {
                evs.push(VmEvent { at, node, running: false });
                running.remove(vm);
            }
            _ => {}
        }
    }
    out
}

/// The report scalars, from either source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recomputed {
    pub failover_ms: Option<u64>,
    pub downtime_ms: u64,
    pub lost_acked: usize,
    pub lost_unacked: usize,
    pub resync_ms: Option<u64>,
}

impl Recomputed {
    pub fn from_report(r: &RunReport) -> Recomputed {
        Recomputed {
            failover_ms: r.failover_ms,
            downtime_ms: r.downtime_ms,
            lost_acked: r.lost_acked,
            lost_unacked: r.lost_unacked,
            resync_ms: r.resync_ms,
        }
    }

    pub fn from_trace(trace: &Trace) -> Recomputed {
        let first = trace.iter().find(|e| e.module == "scenario" && e.kind == "inject").map(|e| e.time());
        let end = trace.iter().find(|e| e.module == "scenario" && e.kind == "end").map_or(trace_end(trace), |e| e.time());
        let (failover_ms, downtime_ms) = aggregate(&vm_events(trace), first, end);
        let count = |kind: &str| trace.iter().filter(|e| e.module == "workload" && e.kind == kind).count();
        let resync_ms = trace
            .iter()
            .filter(|e| e.module == "drbd" && e.kind == "resync-done")
            .filter_map(|e| {
                let ms: u64 = e.detail.split_whitespace().find_map(|w| w.strip_prefix("ms="))?.parse().ok()?;
                let started = e.t.checked_sub(ms)?;
                first.is_some_and(|f| started >= f.as_ms()).then_some(ms)
            })
            .max();
        Recomputed {
            failover_ms,
            downtime_ms,
            lost_acked: count("lost-acked"),
            lost_unacked: count("lost-unacked"),
            resync_ms,
        }
    }
}
