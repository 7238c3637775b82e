//! Deterministic discrete-event core.
//!
//! The engine owns the virtual clock, the event queue, the seeded RNG, node
//! power states and the point-to-point links. It knows nothing about what
//! the payloads mean: events come back out of [`Engine::advance`] already
//! filtered (timers of dead nodes, messages to dead or cut-off receivers and
//! messages whose sender lost power before they left the wire are dropped
//! here and logged).
//!
//! Ordering is by `(at, seq)`; `seq` is a counter bumped on every schedule
//! call, so same-millisecond events run in insertion order.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::SimTime;
use crate::trace::{Trace, TraceEntry};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub String);

impl NodeId {
    pub fn new(s: impl Into<String>) -> Self {
        NodeId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Power {
    Running,
    PoweredOff,
    Rebooting { until: SimTime },
    CleanlyDown,
}

impl fmt::Display for Power {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Power::Running => f.write_str("Running"),
            Power::PoweredOff => f.write_str("PoweredOff"),
            Power::Rebooting { until } => write!(f, "Rebooting(until={})", until.as_ms()),
            Power::CleanlyDown => f.write_str("CleanlyDown"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkState {
    Up,
    Partitioned,
}

/// 100 Mb/s switch port.
pub const DEFAULT_BANDWIDTH: u64 = 12_500_000;
pub const DEFAULT_LATENCY: SimTime = SimTime(1);
pub const DEFAULT_REBOOT_DELAY: SimTime = SimTime(30_000);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkSpec {
    pub a: NodeId,
    pub b: NodeId,
    pub latency: SimTime,
    /// Bytes per second.
    pub bandwidth: u64,
}

impl LinkSpec {
    pub fn new(a: impl Into<NodeId>, b: impl Into<NodeId>) -> Self {
        LinkSpec { a: a.into(), b: b.into(), latency: DEFAULT_LATENCY, bandwidth: DEFAULT_BANDWIDTH }
    }
}

/// One message's occupancy of a link direction, in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transmission {
    pub from_a: bool,
    pub start_us: u64,
    pub end_us: u64,
    pub bytes: u64,
}

#[derive(Debug)]
struct Link {
    spec: LinkSpec,
    state: LinkState,
    /// Send queue tail per direction: `[a->b, b->a]`.
    busy_until_us: [u64; 2],
    log: Vec<Transmission>,
}

#[derive(Debug)]
struct NodeSlot {
    power: Power,
    incarnation: u32,
    /// `losses[i]` is the instant incarnation `i` ended.
    losses: Vec<SimTime>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("past event: scheduled at {at} ms but clock is {now} ms")]
    PastEvent { at: u64, now: u64 },
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("invalid link {0}: {1}")]
    InvalidLink(String, &'static str),
}

enum Kind<P> {
    Timer { node: NodeId, incarnation: u32, payload: P },
    Delivery { id: u64, from: NodeId, from_inc: u32, depart_us: u64, to: NodeId, size: u64, payload: P },
    Global(P),
    PowerOn { node: NodeId, incarnation: u32 },
}

struct Scheduled<P> {
    at: SimTime,
    seq: u64,
    kind: Kind<P>,
}

impl<P> PartialEq for Scheduled<P> {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}
impl<P> Eq for Scheduled<P> {}
impl<P> PartialOrd for Scheduled<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<P> Ord for Scheduled<P> {
    // Reversed so the std max-heap pops the earliest (at, seq).
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

/// What [`Engine::advance`] hands back to the owner of the payloads.
#[derive(Debug, PartialEq)]
pub enum Step<P> {
    Timer { node: NodeId, payload: P },
    Message { from: NodeId, to: NodeId, size: u64, payload: P },
    Global(P),
    Booted(NodeId),
}

pub struct Engine<P> {
    now: SimTime,
    next_seq: u64,
    next_msg: u64,
    queue: BinaryHeap<Scheduled<P>>,
    nodes: BTreeMap<NodeId, NodeSlot>,
    links: Vec<Link>,
    trace: Trace,
    rng: ChaCha8Rng,
    reboot_delay: SimTime,
    trace_network: bool,
}

impl<P: fmt::Display> Engine<P> {
    pub fn new(nodes: &[NodeId], links: Vec<LinkSpec>, seed: u64) -> Result<Self, SimError> {
        let mut map = BTreeMap::new();
        for n in nodes {
            map.insert(n.clone(), NodeSlot { power: Power::Running, incarnation: 0, losses: Vec::new() });
        }
        let mut built = Vec::with_capacity(links.len());
        for spec in links {
            for end in [&spec.a, &spec.b] {
                if !map.contains_key(end) {
                    return Err(SimError::UnknownNode(end.0.clone()));
                }
            }
            if spec.a == spec.b {
                return Err(SimError::InvalidLink(spec.a.0.clone(), "self loop"));
            }
            if spec.bandwidth == 0 {
                return Err(SimError::InvalidLink(format!("{}-{}", spec.a, spec.b), "zero bandwidth"));
            }
            built.push(Link { spec, state: LinkState::Up, busy_until_us: [0, 0], log: Vec::new() });
        }
        Ok(Engine {
            now: SimTime::ZERO,
            next_seq: 0,
            next_msg: 0,
            queue: BinaryHeap::new(),
            nodes: map,
            links: built,
            trace: Trace::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            reboot_delay: DEFAULT_REBOOT_DELAY,
            trace_network: true,
        })
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn into_trace(self) -> Trace {
        self.trace
    }

    pub fn reboot_delay(&self) -> SimTime {
        self.reboot_delay
    }

    pub fn set_reboot_delay(&mut self, d: SimTime) {
        self.reboot_delay = d;
    }

    /// Per-message send/deliver entries. On by default; the causality
    /// invariant needs them.
    pub fn set_trace_network(&mut self, on: bool) {
        self.trace_network = on;
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeId> {
        self.nodes.keys()
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn log(&mut self, node: Option<&NodeId>, module: &str, kind: &str, detail: impl Into<String>) {
        self.trace.push(TraceEntry {
            t: self.now.as_ms(),
            node: node.map(|n| n.0.clone()),
            module: module.to_string(),
            kind: kind.to_string(),
            detail: detail.into(),
        });
    }

    fn push(&mut self, at: SimTime, kind: Kind<P>) -> Result<(), SimError> {
        if at < self.now {
            return Err(SimError::PastEvent { at: at.as_ms(), now: self.now.as_ms() });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Scheduled { at, seq, kind });
        Ok(())
    }

    /// Timer owned by `node`; silently cancelled if the node loses power first.
    pub fn schedule_timer(&mut self, node: &NodeId, at: SimTime, payload: P) -> Result<(), SimError> {
        let incarnation = self.slot(node)?.incarnation;
        self.push(at, Kind::Timer { node: node.clone(), incarnation, payload })
    }

    /// Event owned by no node (scenario driver, external clients).
    pub fn schedule_global(&mut self, at: SimTime, payload: P) -> Result<(), SimError> {
        self.push(at, Kind::Global(payload))
    }

    fn slot(&self, node: &NodeId) -> Result<&NodeSlot, SimError> {
        self.nodes.get(node).ok_or_else(|| SimError::UnknownNode(node.0.clone()))
    }

    pub fn power(&self, node: &NodeId) -> Option<Power> {
        self.nodes.get(node).map(|s| s.power)
    }

    pub fn is_running(&self, node: &NodeId) -> bool {
        matches!(self.power(node), Some(Power::Running))
    }

    fn link_index(&self, a: &NodeId, b: &NodeId) -> Option<(usize, bool)> {
        self.links.iter().position(|l| (&l.spec.a == a && &l.spec.b == b) || (&l.spec.a == b && &l.spec.b == a)).map(
            |i| (i, &self.links[i].spec.a == a),
        )
    }

    pub fn link_state(&self, a: &NodeId, b: &NodeId) -> Option<LinkState> {
        self.link_index(a, b).map(|(i, _)| self.links[i].state)
    }

    pub fn link_spec(&self, a: &NodeId, b: &NodeId) -> Option<&LinkSpec> {
        self.link_index(a, b).map(|(i, _)| &self.links[i].spec)
    }

    pub fn set_link_state(&mut self, a: &NodeId, b: &NodeId, state: LinkState) -> Result<(), SimError> {
        let (i, _) = self
            .link_index(a, b)
            .ok_or_else(|| SimError::InvalidLink(format!("{a}-{b}"), "no such link"))?;
        self.links[i].state = state;
        let kind = match state {
            LinkState::Up => "link-up",
            LinkState::Partitioned => "link-partitioned",
        };
        self.log(None, "net", kind, format!("{a}-{b}"));
        Ok(())
    }

    /// Both ends running and the link between them up.
    pub fn reachable(&self, a: &NodeId, b: &NodeId) -> bool {
        self.is_running(a)
            && self.is_running(b)
            && matches!(self.link_state(a, b), Some(LinkState::Up))
    }

    pub fn max_latency(&self) -> SimTime {
        self.links.iter().map(|l| l.spec.latency).max().unwrap_or(SimTime::ZERO)
    }

    /// Queues `payload` on the `from -> to` direction. Returns whether a
    /// delivery was scheduled; loss is an outcome, not an error.
    pub fn send(&mut self, from: &NodeId, to: &NodeId, size: u64, payload: P) -> bool {
        debug_assert!(self.is_running(from), "send from non-running node {from}");
        if !self.is_running(from) {
            return false;
        }
        let id = self.next_msg;
        self.next_msg += 1;
        let Some((li, from_a)) = self.link_index(from, to) else {
            if self.trace_network {
                self.log(Some(from), "net", "drop", format!("id={id} {from}->{to} no-link {payload}"));
            }
            return false;
        };
        if self.links[li].state == LinkState::Partitioned {
            if self.trace_network {
                self.log(Some(from), "net", "drop", format!("id={id} {from}->{to} partitioned {payload}"));
            }
            return false;
        }
        let now_us = self.now.as_ms() * 1000;
        let link = &mut self.links[li];
        let dir = usize::from(!from_a);
        let start_us = link.busy_until_us[dir].max(now_us);
        let tx_us = ((size as u128 * 1_000_000).div_ceil(link.spec.bandwidth as u128)) as u64;
        let depart_us = start_us + tx_us;
        link.busy_until_us[dir] = depart_us;
        if size > 0 {
            link.log.push(Transmission { from_a, start_us, end_us: depart_us, bytes: size });
        }
        let arrive_us = depart_us + link.spec.latency.as_ms() * 1000;
        let deliver_ms = ((arrive_us + 500) / 1000).max(depart_us.div_ceil(1000));
        let from_inc = self.nodes[from].incarnation;
        if self.trace_network {
            self.log(Some(from), "net", "send", format!("id={id} {from}->{to} {size}B {payload}"));
        }
        let kind = Kind::Delivery { id, from: from.clone(), from_inc, depart_us, to: to.clone(), size, payload };
        self.push(SimTime(deliver_ms), kind).expect("delivery is never in the past");
        true
    }

    /// Applies a power transition now. Any transition ends the node's
    /// current incarnation: its pending timers die and bytes it had not yet
    /// put on the wire are lost.
    pub fn set_power(&mut self, node: &NodeId, power: Power) -> Result<(), SimError> {
        let now = self.now;
        let slot = self.nodes.get_mut(node).ok_or_else(|| SimError::UnknownNode(node.0.clone()))?;
        if power == Power::Running {
            if slot.power != Power::Running {
                slot.power = Power::Running;
                self.log(None, "power", "running", node.0.clone());
            }
            return Ok(());
        }
        let was_running = slot.power == Power::Running;
        let orderly = was_running && power == Power::CleanlyDown;
        // An orderly shutdown flushes what it already queued.
        let drained_us = self
            .links
            .iter()
            .filter_map(|l| {
                if &l.spec.a == node {
                    Some(l.busy_until_us[0])
                } else if &l.spec.b == node {
                    Some(l.busy_until_us[1])
                } else {
                    None
                }
            })
            .max()
            .unwrap_or(0);
        let slot = self.nodes.get_mut(node).expect("checked above");
        slot.losses.push(if orderly { now.max(SimTime(drained_us.div_ceil(1000))) } else { now });
        slot.incarnation += 1;
        slot.power = power;
        let incarnation = slot.incarnation;
        if was_running && !orderly {
            let now_us = now.as_ms() * 1000;
            for link in &mut self.links {
                let dir = if &link.spec.a == node {
                    Some(0)
                } else if &link.spec.b == node {
                    Some(1)
                } else {
                    None
                };
                if let Some(d) = dir {
                    link.busy_until_us[d] = link.busy_until_us[d].min(now_us);
                    for t in link.log.iter_mut().filter(|t| usize::from(!t.from_a) == d && t.end_us > now_us) {
                        let kept = now_us.saturating_sub(t.start_us);
                        let span = t.end_us - t.start_us;
                        t.bytes = (t.bytes * kept).checked_div(span).unwrap_or(0);
                        t.end_us = now_us.max(t.start_us);
                    }
                }
            }
        }
        let kind = match power {
            Power::PoweredOff => "off",
            Power::CleanlyDown => "clean-down",
            Power::Rebooting { .. } => "rebooting",
            Power::Running => unreachable!(),
        };
        self.log(None, "power", kind, format!("{node} {power}"));
        if let Power::Rebooting { until } = power {
            self.push(until.max(now), Kind::PowerOn { node: node.clone(), incarnation })?;
        }
        Ok(())
    }

    /// Convenience for `Rebooting { until: now + reboot_delay }`.
    pub fn reboot(&mut self, node: &NodeId) -> Result<(), SimError> {
        let until = self.now + self.reboot_delay;
        self.set_power(node, Power::Rebooting { until })
    }

    /// Pops the next live event. Dropped events are logged and skipped;
    /// `None` means the queue is exhausted (the clock stays put).
    pub fn advance(&mut self) -> Option<Step<P>> {
        while let Some(ev) = self.queue.pop() {
            debug_assert!(ev.at >= self.now);
            self.now = ev.at;
            match ev.kind {
                Kind::Timer { node, incarnation, payload } => {
                    let slot = &self.nodes[&node];
                    if slot.power == Power::Running && slot.incarnation == incarnation {
                        return Some(Step::Timer { node, payload });
                    }
                }
                Kind::Global(p) => return Some(Step::Global(p)),
                Kind::PowerOn { node, incarnation } => {
                    let slot = self.nodes.get_mut(&node).expect("known node");
                    if slot.incarnation == incarnation && matches!(slot.power, Power::Rebooting { .. }) {
                        slot.power = Power::Running;
                        self.log(None, "power", "boot", node.0.clone());
                        return Some(Step::Booted(node));
                    }
                }
                Kind::Delivery { id, from, from_inc, depart_us, to, size, payload } => {
                    let sender = &self.nodes[&from];
                    let unsent = sender.incarnation != from_inc
                        && depart_us > sender.losses[from_inc as usize].as_ms() * 1000;
                    let reason = if unsent {
                        Some("sender-lost")
                    } else if !self.is_running(&to) {
                        Some("receiver-down")
                    } else if self.link_state(&from, &to) != Some(LinkState::Up) {
                        Some("partitioned")
                    } else {
                        None
                    };
                    match reason {
                        Some(r) => {
                            if self.trace_network {
                                self.log(None, "net", "drop", format!("id={id} {from}->{to} {r} {payload}"));
                            }
                        }
                        None => {
                            if self.trace_network {
                                self.log(Some(&to), "net", "deliver", format!("id={id} {from}->{to} {payload}"));
                            }
                            return Some(Step::Message { from, to, size, payload });
                        }
                    }
                }
            }
        }
        None
    }

    /// Bytes serialized on the `a`/`b` link (both directions) inside
    /// `[from_us, to_us)`, pro-rated for partial overlap.
    pub fn link_bytes_between(&self, a: &NodeId, b: &NodeId, from_us: u64, to_us: u64) -> f64 {
        let Some((i, _)) = self.link_index(a, b) else { return 0.0 };
        self.links[i]
            .log
            .iter()
            .filter(|t| t.end_us > from_us && t.start_us < to_us)
            .map(|t| {
                let span = (t.end_us - t.start_us) as f64;
                let lo = t.start_us.max(from_us);
                let hi = t.end_us.min(to_us);
                t.bytes as f64 * (hi - lo) as f64 / span
            })
            .sum()
    }

    /// Fraction of one direction's capacity used inside the window.
    pub fn link_utilization(&self, a: &NodeId, b: &NodeId, from_us: u64, to_us: u64) -> f64 {
        let Some(spec) = self.link_spec(a, b) else { return 0.0 };
        if to_us <= from_us {
            return 0.0;
        }
        let cap = spec.bandwidth as f64 * (to_us - from_us) as f64 / 1e6;
        self.link_bytes_between(a, b, from_us, to_us) / cap
    }
}
