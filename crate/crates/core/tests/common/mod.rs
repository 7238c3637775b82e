// Shared by the integration and acceptance targets; each uses a subset.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use hasim::block::{parse_drbd_conf, BlockIo, BlockMsg, BlockTimer, DevEvent, Device, DeviceConfig, Role, WriteId};
use hasim::cluster::{ClusterConfig, Injection, WorkloadSpec};
use hasim::crm::Cib;
use hasim::membership::HeartbeatConfig;
use hasim::scenario::{load_builtin, run_scenario, RunReport, Scenario};
use hasim::cluster::RunOutcome;
use hasim::{Engine, LinkSpec, LinkState, NodeId, SimTime, Step, Trace};

pub const DRBD: &str = include_str!("../../configs/drbd.conf");
pub const HA: &str = include_str!("../../configs/ha.cf");
pub const BOOT: &str = include_str!("../../configs/bootstrap-canonical.xml");
pub const SSH: &str = include_str!("../../configs/stonith.xml");
pub const POWER: &str = include_str!("../../configs/stonith-power.xml");
pub const VMS: &str = include_str!("../../configs/vms.xml");

pub const VMS_ALL: [&str; 4] = ["vm1", "vm2", "vm3", "vm4"];

pub fn builtin(name: &str) -> Scenario {
    load_builtin(name).expect("builtin exists").expect("builtin parses")
}

pub fn run(sc: &Scenario) -> (RunReport, RunOutcome) {
    run_scenario(sc).expect("scenario runs")
}

/// The canonical two-node cluster with commits and requests on every guest.
pub fn canonical(stonith: &str, seed: u64, injections: Vec<(SimTime, Injection)>, end: SimTime) -> ClusterConfig {
    let (drbd, _) = parse_drbd_conf(DRBD).unwrap();
    let (ha, _) = HeartbeatConfig::parse(HA).unwrap();
    ClusterConfig {
        nodes: vec![NodeId::from("node1"), NodeId::from("node2")],
        links: vec![LinkSpec::new("node1", "node2")],
        seed,
        ha,
        drbd,
        cib: Cib::load(&[BOOT, stonith, VMS]).unwrap(),
        reboot_delay: SimTime::from_secs(30),
        workloads: VMS_ALL.iter().flat_map(|v| [WorkloadSpec::commits(v), WorkloadSpec::requests(v)]).collect(),
        injections,
        end,
        trace_network: false,
    }
}

/// Replays guest lifecycle lines and returns every instant at which one
/// guest was running on two nodes.
pub fn double_runs(trace: &Trace) -> Vec<String> {
    let mut on: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut bad = Vec::new();
    for e in trace.iter().filter(|e| e.module == "vm") {
        let mut w = e.detail.split_whitespace();
        let (Some(vm), Some(node)) = (w.next(), w.next()) else { continue };
        let set = on.entry(vm.to_string()).or_default();
        match e.kind.as_str() {
            "running" => {
                set.insert(node.to_string());
                if set.len() > 1 {
                    bad.push(e.to_line());
                }
            }
            "stopping" | "stopped" | "lost" | "failed" | "migrated" => {
                set.remove(node);
            }
            _ => {}
        }
    }
    bad
}

/// Index of the first trace line matching `kind` and `detail` exactly.
pub fn position(trace: &Trace, kind: &str, detail: &str) -> Option<usize> {
    trace.iter().position(|e| e.kind == kind && e.detail == detail)
}

#[derive(Debug)]
pub enum RigEv {
    Msg(BlockMsg),
    Timer(BlockTimer),
    Stop,
}

impl std::fmt::Display for RigEv {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RigEv::Msg(m) => write!(f, "{m}"),
            RigEv::Timer(t) => write!(f, "{t}"),
            RigEv::Stop => f.write_str("stop"),
        }
    }
}

struct Io<'a>(&'a mut Engine<RigEv>);

impl BlockIo for Io<'_> {
    fn now(&self) -> SimTime {
        self.0.now()
    }
    fn send(&mut self, from: &NodeId, to: &NodeId, size: u64, msg: BlockMsg) {
        self.0.send(from, to, size, RigEv::Msg(msg));
    }
    fn set_timer(&mut self, node: &NodeId, at: SimTime, timer: BlockTimer) {
        self.0.schedule_timer(node, at, RigEv::Timer(timer)).expect("future");
    }
    fn log(&mut self, node: Option<&NodeId>, kind: &str, detail: String) {
        self.0.log(node, "drbd", kind, detail);
    }
}

/// A bare replicated device between nodes `a` and `b`, no cluster stack.
pub struct Rig {
    pub eng: Engine<RigEv>,
    pub dev: Device,
    pub events: Vec<(SimTime, DevEvent)>,
    pub a: NodeId,
    pub b: NodeId,
}

impl Rig {
    pub fn new(cfg: DeviceConfig, link: LinkSpec) -> Rig {
        let (a, b) = (NodeId::from("a"), NodeId::from("b"));
        let mut eng = Engine::new(&[a.clone(), b.clone()], vec![link], 1).unwrap();
        eng.set_trace_network(false);
        let mut dev = Device::new(cfg, [a.clone(), b.clone()]);
        dev.trace_writes = false;
        dev.start(&mut Io(&mut eng));
        Rig { eng, dev, events: Vec::new(), a, b }
    }

    pub fn run_until(&mut self, t: SimTime) {
        self.eng.schedule_global(t, RigEv::Stop).unwrap();
        while let Some(step) = self.eng.advance() {
            let evs = match step {
                Step::Global(RigEv::Stop) => return,
                Step::Message { from, to, payload: RigEv::Msg(m), .. } => {
                    self.dev.on_message(&mut Io(&mut self.eng), &from, &to, m)
                }
                Step::Timer { node, payload: RigEv::Timer(t) } => self.dev.on_timer(&mut Io(&mut self.eng), &node, t),
                Step::Booted(node) => {
                    self.dev.on_boot(&mut Io(&mut self.eng), &node);
                    Vec::new()
                }
                _ => Vec::new(),
            };
            let now = self.eng.now();
            self.events.extend(evs.into_iter().map(|e| (now, e)));
        }
    }

    pub fn promote(&mut self, node: &NodeId) {
        self.dev.set_role(&mut Io(&mut self.eng), node, Role::Primary).unwrap();
    }

    pub fn write(&mut self, node: &NodeId, block: u32, id: u64) {
        let evs = self.dev.submit_write(&mut Io(&mut self.eng), node, block, WriteId(id)).unwrap();
        let now = self.eng.now();
        self.events.extend(evs.into_iter().map(|e| (now, e)));
    }

    pub fn link(&mut self, state: LinkState) {
        let (a, b) = (self.a.clone(), self.b.clone());
        self.eng.set_link_state(&a, &b, state).unwrap();
    }

    pub fn resync_window(&self) -> Option<(SimTime, SimTime)> {
        self.events.iter().find_map(|(t, e)| match e {
            DevEvent::ResyncDone { started, .. } => Some((*started, *t)),
            _ => None,
        })
    }
}
