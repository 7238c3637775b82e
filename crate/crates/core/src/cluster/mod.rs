//! The whole cluster: heartbeat membership, the replicated device, one CRM
//! per node, fencing, guest workloads and scripted failure injection, all
//! driven by one [`Engine`].

mod controller;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::Serialize;

use crate::block::{BlockIo, BlockMsg, BlockTimer, DevEvent, Device, DeviceConfig, Role, WriteError, WriteId};
use crate::crm::{instances, Cib, FailCounts, Locations, RunState, Transition};
use crate::engine::{Engine, LinkSpec, LinkState, NodeId, Power, SimError, Step};
use crate::membership::{HeartbeatConfig, HeartbeatOutcome, Membership};
use crate::time::SimTime;
use crate::trace::Trace;
use crate::workload::{
    measure_availability, verify_durability, Availability, CommitClient, CommitJournal, DurabilityReport, RequestLog,
    VmEvent, DEFAULT_COMMIT_INTERVAL, DEFAULT_REQUEST_INTERVAL,
};

/// Blocks reserved for each guest on the shared device.
pub const VM_BLOCK_RANGE: u32 = 4096;
/// Clone monitors run more often than guest monitors.
const CLONE_MONITOR: SimTime = SimTime::from_secs(5);
const VM_MONITOR: SimTime = SimTime::from_secs(10);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Injection {
    PowerPull(NodeId),
    HeartbeatStop(NodeId),
    CleanShutdown(NodeId),
    LinkPartition(NodeId, NodeId),
    LinkHeal(NodeId, NodeId),
    DiskFault(NodeId),
    PowerOn(NodeId),
    /// Discard `victim`'s data and reconnect after split-brain.
    ResolveSplitBrain(NodeId),
}

impl fmt::Display for Injection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Injection::PowerPull(n) => write!(f, "power-pull {n}"),
            Injection::HeartbeatStop(n) => write!(f, "heartbeat-stop {n}"),
            Injection::CleanShutdown(n) => write!(f, "clean-shutdown {n}"),
            Injection::LinkPartition(a, b) => write!(f, "link-partition {a} {b}"),
            Injection::LinkHeal(a, b) => write!(f, "link-heal {a} {b}"),
            Injection::DiskFault(n) => write!(f, "disk-fault {n}"),
            Injection::PowerOn(n) => write!(f, "power-on {n}"),
            Injection::ResolveSplitBrain(n) => write!(f, "resolve-split-brain {n}"),
        }
    }
}

impl FromStr for Injection {
    type Err = String;

    /// Accepts the display form and the CamelCase names (`PowerPull node1`).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let words: Vec<&str> = s.split_whitespace().collect();
        let Some((&kind, args)) = words.split_first() else {
            return Err("empty injection".into());
        };
        let key: String = kind.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_lowercase();
        let one = |ctor: fn(NodeId) -> Injection| match args {
            [n] => Ok(ctor(NodeId::from(*n))),
            _ => Err(format!("{kind} takes one node")),
        };
        let two = |ctor: fn(NodeId, NodeId) -> Injection| match args {
            [a, b] => Ok(ctor(NodeId::from(*a), NodeId::from(*b))),
            _ => Err(format!("{kind} takes two nodes")),
        };
        match key.as_str() {
            "powerpull" => one(Injection::PowerPull),
            "heartbeatstop" => one(Injection::HeartbeatStop),
            "cleanshutdown" => one(Injection::CleanShutdown),
            "linkpartition" => two(Injection::LinkPartition),
            "linkheal" => two(Injection::LinkHeal),
            "diskfault" => one(Injection::DiskFault),
            "poweron" => one(Injection::PowerOn),
            "resolvesplitbrain" | "operatorresolvesplitbrain" => one(Injection::ResolveSplitBrain),
            _ => Err(format!("unknown injection '{kind}'")),
        }
    }
}

impl Injection {
    pub fn nodes(&self) -> Vec<&NodeId> {
        match self {
            Injection::LinkPartition(a, b) | Injection::LinkHeal(a, b) => vec![a, b],
            Injection::PowerPull(n)
            | Injection::HeartbeatStop(n)
            | Injection::CleanShutdown(n)
            | Injection::DiskFault(n)
            | Injection::PowerOn(n)
            | Injection::ResolveSplitBrain(n) => vec![n],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WorkloadSpec {
    /// Sequenced commits to the guest's block range.
    Commits { vm: String, interval: SimTime },
    /// Stateless requests served iff the guest is Running.
    Requests { vm: String, interval: SimTime },
}

impl WorkloadSpec {
    pub fn commits(vm: &str) -> Self {
        WorkloadSpec::Commits { vm: vm.into(), interval: DEFAULT_COMMIT_INTERVAL }
    }

    pub fn requests(vm: &str) -> Self {
        WorkloadSpec::Requests { vm: vm.into(), interval: DEFAULT_REQUEST_INTERVAL }
    }

    pub fn vm(&self) -> &str {
        match self {
            WorkloadSpec::Commits { vm, .. } | WorkloadSpec::Requests { vm, .. } => vm,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClusterConfig {
    pub nodes: Vec<NodeId>,
    pub links: Vec<LinkSpec>,
    pub seed: u64,
    pub ha: HeartbeatConfig,
    pub drbd: DeviceConfig,
    pub cib: Cib,
    pub reboot_delay: SimTime,
    pub workloads: Vec<WorkloadSpec>,
    pub injections: Vec<(SimTime, Injection)>,
    pub end: SimTime,
    pub trace_network: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum ClusterError {
    #[error("the replicated device needs exactly two nodes, got {0}")]
    DeviceNodes(usize),
    #[error("node '{0}' is not declared")]
    UnknownNode(String),
    #[error("workload for unknown guest '{0}'")]
    UnknownVm(String),
    #[error("guest block ranges exceed the device ({need} blocks needed, {have} available)")]
    DeviceTooSmall { need: u32, have: u32 },
    #[error("{0}")]
    Engine(#[from] SimError),
}

#[derive(Debug, Clone)]
pub(crate) enum Ev {
    Heartbeat { leaving: bool },
    HbTick,
    Block(BlockMsg),
    BlockTimer(BlockTimer),
    Inject(usize),
    InjectNow(usize),
    Commit(usize),
    Request(usize),
    OpDone { dc: NodeId, tid: u64, idx: usize, rsc: String, node: NodeId, token: u64 },
    FenceDone { dc: NodeId, tid: u64, idx: usize, target: NodeId, ok: bool, reason: String, reboot: bool },
    Monitor { rsc: String, run_id: u64 },
    CrmRetry,
    End,
}

impl fmt::Display for Ev {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ev::Heartbeat { leaving: false } => f.write_str("heartbeat"),
            Ev::Heartbeat { leaving: true } => f.write_str("heartbeat leaving"),
            Ev::HbTick => f.write_str("hb-tick"),
            Ev::Block(m) => write!(f, "{m}"),
            Ev::BlockTimer(t) => write!(f, "{t}"),
            Ev::Inject(i) | Ev::InjectNow(i) => write!(f, "inject #{i}"),
            Ev::Commit(i) => write!(f, "commit #{i}"),
            Ev::Request(i) => write!(f, "request #{i}"),
            Ev::OpDone { rsc, node, .. } => write!(f, "op-done {rsc} {node}"),
            Ev::FenceDone { target, .. } => write!(f, "fence-done {target}"),
            Ev::Monitor { rsc, .. } => write!(f, "monitor {rsc}"),
            Ev::CrmRetry => f.write_str("crm-retry"),
            Ev::End => f.write_str("end"),
        }
    }
}

struct DevIo<'a>(&'a mut Engine<Ev>);

impl BlockIo for DevIo<'_> {
    fn now(&self) -> SimTime {
        self.0.now()
    }
    fn send(&mut self, from: &NodeId, to: &NodeId, size: u64, msg: BlockMsg) {
        self.0.send(from, to, size, Ev::Block(msg));
    }
    fn set_timer(&mut self, node: &NodeId, at: SimTime, timer: BlockTimer) {
        self.0.schedule_timer(node, at, Ev::BlockTimer(timer)).expect("device timers are never in the past");
    }
    fn log(&mut self, node: Option<&NodeId>, kind: &str, detail: String) {
        self.0.log(node, "drbd", kind, detail);
    }
}

/// One running copy of a resource on one node.
#[derive(Debug, Clone)]
pub(crate) struct Placed {
    state: RunState,
    run_id: u64,
    /// Token of the operation in flight.
    op: u64,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Crm {
    locations: Locations,
    fail_counts: FailCounts,
    unclean: BTreeSet<NodeId>,
    transition: Option<Transition>,
    retry_at: SimTime,
    last_blocked: Vec<String>,
    last_idle: String,
    quorum_lost: bool,
}

#[derive(Debug, Default)]
pub(crate) struct NodeRt {
    hb: Option<Membership>,
    /// Heartbeat and CRM are alive on this node.
    stack_up: bool,
    crm: Crm,
    shutting_down: bool,
    wfc_expired: bool,
    /// Has heard every peer since boot, or waited a deadtime.
    joined: bool,
    join_deadline: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FenceRecord {
    pub requested: SimTime,
    pub done: SimTime,
    pub by: String,
    pub target: String,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResyncRecord {
    pub started: SimTime,
    pub done: Option<SimTime>,
    pub source: String,
    pub target: String,
    pub blocks: usize,
    /// Blocks the device transferred, in order.
    pub transferred: Vec<u32>,
    /// Out-of-sync blocks when the resync began.
    pub divergent: Vec<u32>,
    pub utilization: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CrashRecord {
    pub at: SimTime,
    pub node: String,
    /// The crashed side's dirty blocks, oldest first.
    pub dirty: Vec<u32>,
    /// The peer's dirty blocks, oldest first.
    pub peer_dirty: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Detection {
    pub at: SimTime,
    pub observer: String,
    pub peer: String,
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trace: Trace,
    pub end: SimTime,
    pub first_injection: Option<SimTime>,
    pub injections: Vec<(SimTime, Injection)>,
    pub journal: CommitJournal,
    pub requests: RequestLog,
    pub durability: DurabilityReport,
    pub vm_events: BTreeMap<String, Vec<VmEvent>>,
    pub availability: BTreeMap<String, Availability>,
    pub fences: Vec<FenceRecord>,
    pub resyncs: Vec<ResyncRecord>,
    pub crashes: Vec<CrashRecord>,
    pub detections: Vec<Detection>,
    pub violations: Vec<String>,
    pub final_placement: BTreeMap<String, Vec<String>>,
    pub device_status: BTreeMap<String, String>,
    pub divergent_blocks: Vec<u32>,
}

pub struct Cluster {
    eng: Engine<Ev>,
    nodes: Vec<NodeId>,
    ha: HeartbeatConfig,
    cib: Cib,
    insts: Vec<(String, usize)>,
    dev: Device,
    rt: BTreeMap<NodeId, NodeRt>,
    /// Actual resource copies, per instance and node.
    actual: BTreeMap<String, BTreeMap<NodeId, Placed>>,
    next_token: u64,
    next_tid: u64,
    next_write: u64,
    journal: CommitJournal,
    requests: RequestLog,
    commit_clients: Vec<CommitClient>,
    request_clients: Vec<(String, SimTime)>,
    injections: Vec<(SimTime, Injection)>,
    end: SimTime,
    vm_events: BTreeMap<String, Vec<VmEvent>>,
    fences: Vec<FenceRecord>,
    fence_requested: BTreeMap<(u64, usize), SimTime>,
    resyncs: Vec<ResyncRecord>,
    crashes: Vec<CrashRecord>,
    detections: Vec<Detection>,
    violations: Vec<String>,
    first_injection: Option<SimTime>,
    dirty: bool,
}

impl Cluster {
    pub fn new(cfg: ClusterConfig) -> Result<Cluster, ClusterError> {
        if cfg.nodes.len() != 2 {
            return Err(ClusterError::DeviceNodes(cfg.nodes.len()));
        }
        for (_, inj) in &cfg.injections {
            for n in inj.nodes() {
                if !cfg.nodes.contains(n) {
                    return Err(ClusterError::UnknownNode(n.to_string()));
                }
            }
        }
        let mut eng = Engine::new(&cfg.nodes, cfg.links.clone(), cfg.seed)?;
        eng.set_reboot_delay(cfg.reboot_delay);
        eng.set_trace_network(cfg.trace_network);
        let mut ha = cfg.ha.clone();
        if ha.node_list.is_empty() {
            ha.node_list = cfg.nodes.clone();
        }
        let vms: Vec<String> = cfg.cib.resources.iter().filter(|r| r.is_vm()).map(|r| r.id.clone()).collect();
        let need = VM_BLOCK_RANGE * vms.len() as u32;
        if need > cfg.drbd.block_count {
            return Err(ClusterError::DeviceTooSmall { need, have: cfg.drbd.block_count });
        }
        let vm_base: BTreeMap<String, u32> =
            vms.iter().enumerate().map(|(i, v)| (v.clone(), i as u32 * VM_BLOCK_RANGE)).collect();
        let mut commit_clients = Vec::new();
        let mut request_clients = Vec::new();
        for w in &cfg.workloads {
            let Some(&base) = vm_base.get(w.vm()) else {
                return Err(ClusterError::UnknownVm(w.vm().to_string()));
            };
            match w {
                WorkloadSpec::Commits { vm, interval } => {
                    let phase = SimTime(eng.rng().gen_range(0..interval.as_ms().max(1)));
                    commit_clients.push(CommitClient {
                        vm: vm.clone(),
                        interval: *interval,
                        phase,
                        base,
                        range: VM_BLOCK_RANGE,
                        issued: 0,
                    });
                }
                WorkloadSpec::Requests { vm, interval } => request_clients.push((vm.clone(), *interval)),
            }
        }
        let mut dev = Device::new(cfg.drbd.clone(), [cfg.nodes[0].clone(), cfg.nodes[1].clone()]);
        dev.trace_writes = cfg.trace_network;
        let insts = instances(&cfg.cib, cfg.nodes.len());
        let mut injections = cfg.injections.clone();
        injections.sort_by_key(|(t, _)| *t);
        Ok(Cluster {
            eng,
            nodes: cfg.nodes.clone(),
            ha,
            cib: cfg.cib.clone(),
            insts,
            dev,
            rt: cfg.nodes.iter().map(|n| (n.clone(), NodeRt::default())).collect(),
            actual: BTreeMap::new(),
            next_token: 1,
            next_tid: 1,
            next_write: 1,
            journal: CommitJournal::new(),
            requests: RequestLog::default(),
            commit_clients,
            request_clients,
            injections,
            end: cfg.end,
            vm_events: vms.iter().map(|v| (v.clone(), Vec::new())).collect(),
            fences: Vec::new(),
            fence_requested: BTreeMap::new(),
            resyncs: Vec::new(),
            crashes: Vec::new(),
            detections: Vec::new(),
            violations: Vec::new(),
            first_injection: None,
            dirty: true,
        })
    }

    /// Runs to the configured end time.
    pub fn run(mut self) -> Result<RunOutcome, ClusterError> {
        self.bootstrap()?;
        while let Some(step) = self.eng.advance() {
            match step {
                Step::Global(Ev::End) => break,
                Step::Timer { node, payload } => self.on_timer(node, payload)?,
                Step::Message { from, to, payload, .. } => self.on_message(from, to, payload)?,
                Step::Global(ev) => self.on_global(ev)?,
                Step::Booted(node) => self.on_boot(node)?,
            }
            self.kick()?;
        }
        Ok(self.finish())
    }

    fn bootstrap(&mut self) -> Result<(), ClusterError> {
        let now = self.eng.now();
        for n in self.nodes.clone() {
            self.start_stack(&n, now, true)?;
        }
        self.dev.start(&mut DevIo(&mut self.eng));
        for n in self.nodes.clone() {
            if let Err(e) = self.dev.set_role(&mut DevIo(&mut self.eng), &n, Role::Primary) {
                self.eng.log(Some(&n), "drbd", "promote-failed", e.to_string());
            }
        }
        for (i, (t, _)) in self.injections.iter().enumerate() {
            self.eng.schedule_global(*t, Ev::Inject(i))?;
        }
        for i in 0..self.commit_clients.len() {
            let at = self.commit_clients[i].first_tick(now);
            self.eng.schedule_global(at, Ev::Commit(i))?;
        }
        for i in 0..self.request_clients.len() {
            let at = now + self.request_clients[i].1;
            self.eng.schedule_global(at, Ev::Request(i))?;
        }
        self.eng.schedule_global(self.end, Ev::End)?;
        Ok(())
    }

    fn start_stack(&mut self, n: &NodeId, now: SimTime, joined: bool) -> Result<(), ClusterError> {
        let rt = self.rt.get_mut(n).expect("declared node");
        *rt = NodeRt {
            hb: Some(Membership::new(n.clone(), self.ha.clone(), now)),
            stack_up: true,
            joined,
            join_deadline: now + self.ha.deadtime,
            ..NodeRt::default()
        };
        self.eng.schedule_timer(n, now, Ev::HbTick)?;
        self.dirty = true;
        Ok(())
    }

    fn on_timer(&mut self, node: NodeId, ev: Ev) -> Result<(), ClusterError> {
        match ev {
            Ev::HbTick => self.hb_tick(&node),
            Ev::BlockTimer(t) => {
                let evs = self.dev.on_timer(&mut DevIo(&mut self.eng), &node, t);
                self.dev_events(evs);
                Ok(())
            }
            Ev::Monitor { rsc, run_id } => self.monitor(&node, &rsc, run_id),
            Ev::CrmRetry => {
                self.dirty = true;
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn on_message(&mut self, from: NodeId, to: NodeId, ev: Ev) -> Result<(), ClusterError> {
        match ev {
            Ev::Heartbeat { leaving } => self.heartbeat_from(&from, &to, leaving),
            Ev::Block(m) => {
                let evs = self.dev.on_message(&mut DevIo(&mut self.eng), &from, &to, m);
                self.dev_events(evs);
            }
            _ => {}
        }
        Ok(())
    }

    fn on_global(&mut self, ev: Ev) -> Result<(), ClusterError> {
        match ev {
            // Re-queued so it runs after everything already due this ms.
            Ev::Inject(i) => self.eng.schedule_global(self.eng.now(), Ev::InjectNow(i))?,
            Ev::InjectNow(i) => self.inject(i)?,
            Ev::Commit(i) => self.commit(i)?,
            Ev::Request(i) => {
                let (vm, iv) = self.request_clients[i].clone();
                let served = self.running_on(&vm).is_some();
                self.requests.record(&vm, self.eng.now(), served);
                self.eng.schedule_global(self.eng.now() + iv, Ev::Request(i))?;
            }
            Ev::OpDone { dc, tid, idx, rsc, node, token } => self.op_done(&dc, tid, idx, &rsc, &node, token)?,
            Ev::FenceDone { dc, tid, idx, target, ok, reason, reboot } => {
                self.fence_done(&dc, tid, idx, &target, ok, &reason, reboot)?
            }
            _ => {}
        }
        Ok(())
    }

    fn on_boot(&mut self, node: NodeId) -> Result<(), ClusterError> {
        let now = self.eng.now();
        self.start_stack(&node, now, false)?;
        self.dev.on_boot(&mut DevIo(&mut self.eng), &node);
        self.auto_promote();
        Ok(())
    }

    // ---- membership

    fn hb_tick(&mut self, n: &NodeId) -> Result<(), ClusterError> {
        let now = self.eng.now();
        let rt = self.rt.get_mut(n).expect("declared node");
        if !rt.stack_up {
            return Ok(());
        }
        let hb = rt.hb.as_mut().expect("stack up");
        let targets = hb.heartbeat_targets();
        let eval = hb.evaluate_peers(now);
        let keepalive = hb.config().keepalive;
        if !rt.joined && now >= rt.join_deadline {
            rt.joined = true;
            self.dirty = true;
        }
        for t in targets {
            self.eng.send(n, &t, 0, Ev::Heartbeat { leaving: false });
        }
        for p in eval.newly_warned {
            self.eng.log(Some(n), "membership", "warn", p.to_string());
        }
        for p in eval.newly_dead {
            self.eng.log(Some(n), "membership", "dead", p.to_string());
            self.detections.push(Detection { at: now, observer: n.to_string(), peer: p.to_string() });
            self.view_changed(n, &p, false);
        }
        self.eng.schedule_timer(n, now + keepalive, Ev::HbTick)?;
        Ok(())
    }

    fn heartbeat_from(&mut self, from: &NodeId, to: &NodeId, leaving: bool) {
        let now = self.eng.now();
        let rt = self.rt.get_mut(to).expect("declared node");
        if !rt.stack_up {
            return;
        }
        let hb = rt.hb.as_mut().expect("stack up");
        if leaving {
            if hb.mark_left(from) {
                self.eng.log(Some(to), "membership", "left", from.to_string());
                self.view_changed(to, from, true);
            }
            return;
        }
        let outcome = hb.record_heartbeat(from, now);
        if !rt.joined && hb.peers().all(|p| p.last_seen > rt.join_deadline.saturating_sub(self.ha.deadtime)) {
            rt.joined = true;
            self.dirty = true;
        }
        if outcome == HeartbeatOutcome::Rejoined {
            self.eng.log(Some(to), "membership", "rejoin", from.to_string());
            let crm = &mut self.rt.get_mut(to).expect("declared node").crm;
            crm.unclean.remove(from);
            if let Some(t) = crm.transition.as_mut() {
                t.abort_requested = true;
            }
            self.dirty = true;
        }
    }

    /// `peer` left `observer`'s view.
    fn view_changed(&mut self, observer: &NodeId, peer: &NodeId, clean: bool) {
        let crm = &mut self.rt.get_mut(observer).expect("declared node").crm;
        if clean {
            crm.locations.retain(|_, (n, _)| n != peer);
        } else {
            crm.unclean.insert(peer.clone());
        }
        if let Some(t) = crm.transition.as_mut() {
            t.abort_requested = true;
        }
        self.dirty = true;
    }

    pub(crate) fn view(&self, n: &NodeId) -> BTreeSet<NodeId> {
        match self.rt.get(n) {
            Some(NodeRt { stack_up: true, hb: Some(hb), .. }) => hb.alive(),
            _ => BTreeSet::new(),
        }
    }

    // ---- replicated device

    fn dev_events(&mut self, evs: Vec<DevEvent>) {
        let now = self.eng.now();
        for e in evs {
            match e {
                DevEvent::Acked { write, .. } => {
                    self.journal.ack(write, now);
                }
                DevEvent::IoFailed { node, write } => {
                    self.journal.reject(write);
                    self.dirty = true;
                    self.eng.log(Some(&node), "workload", "io-failed", format!("{write}"));
                }
                DevEvent::ResyncStarted { source, target, blocks } => {
                    let divergent = self.dev.side(&source).map(|s| s.dirty.to_vec()).unwrap_or_default();
                    self.resyncs.push(ResyncRecord {
                        started: now,
                        done: None,
                        source: source.to_string(),
                        target: target.to_string(),
                        blocks,
                        transferred: Vec::new(),
                        divergent,
                        utilization: None,
                    });
                    self.dirty = true;
                }
                DevEvent::ResyncDone { source, target, started, .. } => {
                    let log = &self.dev.resync_log;
                    let transferred: Vec<u32> =
                        log.iter().filter(|(t, _)| *t >= started && *t <= now).map(|(_, b)| *b).collect();
                    let util = self.eng.link_utilization(&source, &target, started.as_ms() * 1000, now.as_ms() * 1000);
                    if let Some(r) = self.resyncs.iter_mut().rev().find(|r| r.done.is_none()) {
                        r.done = Some(now);
                        r.transferred = transferred;
                        r.utilization = Some(util);
                    }
                    self.check_bitmaps("resync-done");
                    self.dirty = true;
                }
                DevEvent::WfcExpired { node } => {
                    self.rt.get_mut(&node).expect("declared node").wfc_expired = true;
                    self.dirty = true;
                }
                DevEvent::Handshake { .. } | DevEvent::Disconnected { .. } | DevEvent::SplitBrain { .. } => {
                    self.dirty = true;
                }
            }
        }
        self.auto_promote();
    }

    /// Promotes every up-to-date Secondary that may serve guests.
    fn auto_promote(&mut self) {
        use crate::block::{ConnState, DiskState};
        for n in self.nodes.clone() {
            let Some(s) = self.dev.side(&n) else { continue };
            let wfc = self.rt.get(&n).is_some_and(|r| r.wfc_expired);
            let eligible = s.up
                && s.role == Role::Secondary
                && s.disk == DiskState::UpToDate
                && (matches!(s.conn, ConnState::Connected | ConnState::SyncSource)
                    || (s.conn == ConnState::WFConnection && wfc));
            if eligible && self.dev.set_role(&mut DevIo(&mut self.eng), &n, Role::Primary).is_ok() {
                self.dirty = true;
            }
        }
    }

    /// Every out-of-sync block must be marked dirty on some side.
    fn check_bitmaps(&mut self, when: &str) {
        let [a, b] = self.dev.sides();
        if !(a.up && b.up) || a.disk == crate::block::DiskState::Detached || b.disk == crate::block::DiskState::Detached
        {
            return;
        }
        for blk in self.dev.divergent_blocks() {
            if !a.dirty.contains(blk) && !b.dirty.contains(blk) {
                let msg = format!("bitmap: block {blk} differs but is clean on both sides ({when})");
                self.violation(msg);
                return;
            }
        }
    }

    fn violation(&mut self, msg: String) {
        self.eng.log(None, "invariant", "violation", msg.clone());
        self.violations.push(msg);
    }

    // ---- workloads

    fn commit(&mut self, i: usize) -> Result<(), ClusterError> {
        let now = self.eng.now();
        let c = &mut self.commit_clients[i];
        let vm = c.vm.clone();
        let next = now + c.interval;
        if let Some(host) = self.running_on(&vm) {
            let c = &mut self.commit_clients[i];
            let block = c.block_for(c.issued);
            c.issued += 1;
            let write = WriteId(self.next_write);
            self.next_write += 1;
            self.journal.issue(&vm, now, block, write);
            match self.dev.submit_write(&mut DevIo(&mut self.eng), &host, block, write) {
                Ok(evs) => self.dev_events(evs),
                Err(e) => {
                    self.journal.reject(write);
                    self.eng.log(Some(&host), "workload", "rejected", format!("{vm} {write} {e}"));
                    if matches!(e, WriteError::IoError(_) | WriteError::WrongRole(_)) {
                        self.vm_failed(&vm, &host, &e.to_string());
                    }
                }
            }
        }
        self.eng.schedule_global(next, Ev::Commit(i))?;
        Ok(())
    }

    pub(crate) fn running_on(&self, inst: &str) -> Option<NodeId> {
        self.actual.get(inst)?.iter().find(|(_, c)| c.state == RunState::Running).map(|(n, _)| n.clone())
    }

    fn vm_failed(&mut self, inst: &str, node: &NodeId, why: &str) {
        if let Some(c) = self.actual.get_mut(inst).and_then(|m| m.get_mut(node)) {
            if c.state == RunState::Running {
                c.state = RunState::Failed;
                self.eng.log(Some(node), "vm", "failed", format!("{inst} {node} {why}"));
                self.vm_event(inst, node, false);
            }
        }
    }

    pub(crate) fn vm_event(&mut self, inst: &str, node: &NodeId, running: bool) {
        if let Some(ev) = self.vm_events.get_mut(inst) {
            ev.push(VmEvent { at: self.eng.now(), node: node.clone(), running });
        }
    }

    // ---- injections

    fn inject(&mut self, i: usize) -> Result<(), ClusterError> {
        let now = self.eng.now();
        let inj = self.injections[i].1.clone();
        self.first_injection.get_or_insert(now);
        let target = inj.nodes().first().map(|n| (*n).clone());
        self.eng.log(target.as_ref(), "scenario", "inject", inj.to_string());
        match inj {
            Injection::PowerPull(n) => {
                if self.eng.is_running(&n) {
                    self.eng.set_power(&n, Power::PoweredOff)?;
                    self.node_down(&n);
                }
            }
            Injection::PowerOn(n) => {
                if matches!(self.eng.power(&n), Some(Power::PoweredOff | Power::CleanlyDown)) {
                    self.eng.set_power(&n, Power::Rebooting { until: now })?;
                }
            }
            Injection::HeartbeatStop(n) => {
                let rt = self.rt.get_mut(&n).expect("declared node");
                rt.stack_up = false;
                rt.crm = Crm::default();
                self.eng.log(Some(&n), "membership", "stopped", n.to_string());
            }
            Injection::CleanShutdown(n) => {
                let rt = self.rt.get_mut(&n).expect("declared node");
                if rt.stack_up {
                    rt.shutting_down = true;
                    self.dirty = true;
                }
            }
            Injection::LinkPartition(a, b) => self.eng.set_link_state(&a, &b, LinkState::Partitioned)?,
            Injection::LinkHeal(a, b) => self.eng.set_link_state(&a, &b, LinkState::Up)?,
            Injection::DiskFault(n) => {
                let evs = self.dev.handle_io_error(&mut DevIo(&mut self.eng), &n);
                self.dev_events(evs);
            }
            Injection::ResolveSplitBrain(n) => {
                if !self.dev.resolve_split_brain(&mut DevIo(&mut self.eng), &n) {
                    self.eng.log(Some(&n), "scenario", "resolve-ignored", n.to_string());
                }
                self.dirty = true;
            }
        }
        Ok(())
    }

    /// Everything volatile on `n` is gone.
    fn node_down(&mut self, n: &NodeId) {
        let dirty = self.dev.side(n).map(|s| s.dirty.to_vec()).unwrap_or_default();
        let peer_dirty =
            self.dev.sides().iter().find(|s| &s.node != n).map(|s| s.dirty.to_vec()).unwrap_or_default();
        self.crashes.push(CrashRecord { at: self.eng.now(), node: n.to_string(), dirty, peer_dirty });
        self.dev.on_power_loss(n);
        let lost: Vec<String> =
            self.actual.iter().filter(|(_, m)| m.contains_key(n)).map(|(k, _)| k.clone()).collect();
        for inst in lost {
            let c = self.actual.get_mut(&inst).and_then(|m| m.remove(n)).expect("listed");
            self.eng.log(Some(n), "vm", "lost", format!("{inst} {n}"));
            if c.state == RunState::Running {
                self.vm_event(&inst, n, false);
            }
        }
        let rt = self.rt.get_mut(n).expect("declared node");
        *rt = NodeRt::default();
        self.dirty = true;
    }

    /// Leaves the cluster once a shutting-down node hosts nothing.
    fn finish_shutdowns(&mut self) -> Result<(), ClusterError> {
        for n in self.nodes.clone() {
            let rt = &self.rt[&n];
            if !(rt.shutting_down && rt.stack_up && self.eng.is_running(&n)) || rt.crm.transition.is_some() {
                continue;
            }
            let busy = self.actual.values().any(|m| m.get(&n).is_some_and(|c| c.state.is_active()));
            if busy {
                continue;
            }
            let peers = rt.hb.as_ref().map(|h| h.heartbeat_targets()).unwrap_or_default();
            for p in peers {
                self.eng.send(&n, &p, 0, Ev::Heartbeat { leaving: true });
            }
            self.dev.shutdown(&mut DevIo(&mut self.eng), &n);
            self.eng.set_power(&n, Power::CleanlyDown)?;
            self.node_down(&n);
            self.crashes.pop();
        }
        Ok(())
    }

    fn finish(mut self) -> RunOutcome {
        let end = self.eng.now();
        self.check_bitmaps("end");
        let survivor = self.surviving_store_owner();
        let durability = verify_durability(&self.journal, survivor.and_then(|n| self.dev.side(&n)).map(|s| &s.store));
        for (kind, seqs) in [("lost-acked", &durability.lost_acked), ("lost-unacked", &durability.lost_unacked)] {
            for &seq in seqs {
                let e = &self.journal.entries()[seq as usize];
                let detail = format!("{} seq={seq} blk={} {}", e.vm, e.block, e.write_id);
                self.eng.log(None, "workload", kind, detail);
            }
        }
        self.eng.log(None, "scenario", "end", String::new());
        let from = self.first_injection.unwrap_or(SimTime::ZERO);
        let mut availability = BTreeMap::new();
        for (vm, evs) in &self.vm_events {
            let mut a = measure_availability(evs, from, end);
            a.failed_requests = self.requests.failed_since(vm, from);
            availability.insert(vm.clone(), a);
        }
        let final_placement = self
            .actual
            .iter()
            .map(|(k, m)| {
                let on = m.iter().filter(|(_, c)| c.state == RunState::Running).map(|(n, _)| n.to_string());
                (k.clone(), on.collect())
            })
            .collect();
        let device_status =
            self.nodes.iter().filter_map(|n| self.dev.status(n).map(|s| (n.to_string(), s))).collect();
        let divergent_blocks = self.dev.divergent_blocks();
        RunOutcome {
            end,
            first_injection: self.first_injection,
            injections: self.injections,
            journal: self.journal,
            requests: self.requests,
            durability,
            vm_events: self.vm_events,
            availability,
            fences: self.fences,
            resyncs: self.resyncs,
            crashes: self.crashes,
            detections: self.detections,
            violations: self.violations,
            final_placement,
            device_status,
            divergent_blocks,
            trace: self.eng.into_trace(),
        }
    }

    /// The replica the durability oracle judges: the up-to-date side that
    /// last wrote, preferring one that is up.
    fn surviving_store_owner(&self) -> Option<NodeId> {
        use crate::block::DiskState;
        let mut cands: Vec<_> = self.dev.sides().iter().filter(|s| s.disk == DiskState::UpToDate).collect();
        cands.sort_by_key(|s| (!s.up, std::cmp::Reverse(s.current_tag())));
        cands.first().map(|s| s.node.clone())
    }
}
