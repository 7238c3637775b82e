use std::collections::BTreeSet;
use std::fmt;

use super::*;
use crate::block::{DeviceConfig, Protocol, MIB};
use crate::engine::{Engine, LinkSpec, LinkState, Power, Step};

#[derive(Debug)]
enum Ev {
    Msg(BlockMsg),
    Timer(BlockTimer),
    Stop,
}

impl fmt::Display for Ev {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ev::Msg(m) => write!(f, "{m}"),
            Ev::Timer(t) => write!(f, "{t}"),
            Ev::Stop => f.write_str("stop"),
        }
    }
}

struct Io<'a>(&'a mut Engine<Ev>);

impl BlockIo for Io<'_> {
    fn now(&self) -> SimTime {
        self.0.now()
    }
    fn send(&mut self, from: &NodeId, to: &NodeId, size: u64, msg: BlockMsg) {
        self.0.send(from, to, size, Ev::Msg(msg));
    }
    fn set_timer(&mut self, node: &NodeId, at: SimTime, timer: BlockTimer) {
        self.0.schedule_timer(node, at, Ev::Timer(timer)).expect("future");
    }
    fn log(&mut self, node: Option<&NodeId>, kind: &str, detail: String) {
        self.0.log(node, "drbd", kind, detail);
    }
}

struct Rig {
    eng: Engine<Ev>,
    dev: Device,
    events: Vec<(SimTime, DevEvent)>,
    a: NodeId,
    b: NodeId,
}

impl Rig {
    fn new(cfg: DeviceConfig) -> Self {
        let (a, b) = (NodeId::from("a"), NodeId::from("b"));
        let mut eng = Engine::new(&[a.clone(), b.clone()], vec![LinkSpec::new("a", "b")], 7).unwrap();
        eng.set_trace_network(false);
        let mut dev = Device::new(cfg, [a.clone(), b.clone()]);
        dev.start(&mut Io(&mut eng));
        Rig { eng, dev, events: Vec::new(), a, b }
    }

    fn record(&mut self, evs: Vec<DevEvent>) {
        let now = self.eng.now();
        self.events.extend(evs.into_iter().map(|e| (now, e)));
    }

    fn run_until(&mut self, t: SimTime) {
        self.eng.schedule_global(t, Ev::Stop).unwrap();
        while let Some(step) = self.eng.advance() {
            let evs = match step {
                Step::Global(Ev::Stop) => return,
                Step::Message { from, to, payload: Ev::Msg(m), .. } => {
                    self.dev.on_message(&mut Io(&mut self.eng), &from, &to, m)
                }
                Step::Timer { node, payload: Ev::Timer(t) } => self.dev.on_timer(&mut Io(&mut self.eng), &node, t),
                Step::Booted(node) => {
                    self.dev.on_boot(&mut Io(&mut self.eng), &node);
                    Vec::new()
                }
                _ => Vec::new(),
            };
            self.record(evs);
        }
    }

    fn write(&mut self, node: &NodeId, block: u32, id: u64) -> Result<(), WriteError> {
        let evs = self.dev.submit_write(&mut Io(&mut self.eng), node, block, WriteId(id))?;
        self.record(evs);
        Ok(())
    }

    fn promote(&mut self, node: &NodeId) -> Result<(), RoleError> {
        self.dev.set_role(&mut Io(&mut self.eng), node, Role::Primary)
    }

    fn ack_time(&self, id: u64) -> Option<SimTime> {
        self.events.iter().find_map(|(t, e)| match e {
            DevEvent::Acked { write, .. } if write.0 == id => Some(*t),
            _ => None,
        })
    }

    fn partition(&mut self, state: LinkState) {
        self.eng.set_link_state(&self.a, &self.b, state).unwrap();
    }

    fn power_off(&mut self, node: &NodeId) {
        self.eng.set_power(node, Power::PoweredOff).unwrap();
        self.dev.on_power_loss(node);
    }

    /// Differing blocks are always covered by some side's dirty bitmap.
    fn bitmap_sound(&self) -> bool {
        let [x, y] = self.dev.sides();
        let dirty: BTreeSet<u32> = x.dirty.iter().chain(y.dirty.iter()).collect();
        self.dev.divergent_blocks().iter().all(|b| dirty.contains(b))
    }

    fn resync_done(&self) -> Option<(SimTime, SimTime)> {
        self.events.iter().find_map(|(t, e)| match e {
            DevEvent::ResyncDone { started, .. } => Some((*started, *t)),
            _ => None,
        })
    }
}

fn cfg(protocol: Protocol) -> DeviceConfig {
    DeviceConfig { protocol, ..DeviceConfig::default() }
}

#[test]
fn protocol_c_acks_after_round_trip() {
    let mut r = Rig::new(cfg(Protocol::C));
    let a = r.a.clone();
    r.promote(&a).unwrap();
    r.write(&a, 0, 1).unwrap();
    r.run_until(SimTime(50));
    assert_eq!(r.ack_time(1), Some(SimTime(2)));
    assert!(r.dev.divergent_blocks().is_empty());
    assert!(r.dev.side(&a).unwrap().dirty.is_empty());
}

#[test]
fn protocol_a_acks_on_local_completion() {
    let mut r = Rig::new(cfg(Protocol::A));
    let a = r.a.clone();
    r.promote(&a).unwrap();
    r.write(&a, 0, 1).unwrap();
    assert_eq!(r.ack_time(1), Some(SimTime::ZERO));
    // still dirty until the peer confirms
    assert!(r.dev.side(&a).unwrap().dirty.contains(0));
    r.run_until(SimTime(50));
    assert!(r.dev.side(&a).unwrap().dirty.is_empty());
}

#[test]
fn protocol_b_waits_for_receipt() {
    let mut r = Rig::new(cfg(Protocol::B));
    let a = r.a.clone();
    r.promote(&a).unwrap();
    r.write(&a, 0, 1).unwrap();
    assert_eq!(r.ack_time(1), None);
    r.run_until(SimTime(50));
    assert_eq!(r.ack_time(1), Some(SimTime(2)));
}

#[test]
fn secondary_cannot_write_and_second_primary_refused() {
    let mut r = Rig::new(cfg(Protocol::C));
    let (a, b) = (r.a.clone(), r.b.clone());
    assert_eq!(r.write(&a, 0, 1), Err(WriteError::WrongRole(a.clone())));
    r.promote(&a).unwrap();
    assert_eq!(r.promote(&b), Err(RoleError::PeerIsPrimary));
    assert!(matches!(r.write(&a, 1 << 20, 2), Err(WriteError::OutOfRange { .. })));
}

#[test]
fn status_line_format() {
    let mut r = Rig::new(cfg(Protocol::C));
    let a = r.a.clone();
    r.promote(&a).unwrap();
    assert_eq!(r.dev.status(&a).unwrap(), "cs:Connected st:Primary/Secondary ds:UpToDate/UpToDate");
    r.power_off(&r.b.clone());
    r.run_until(SimTime::from_secs(11));
    assert_eq!(r.dev.status(&a).unwrap(), "cs:WFConnection st:Primary/Unknown ds:UpToDate/DUnknown");
}

#[test]
fn peer_loss_detected_by_ping_timeout() {
    let mut r = Rig::new(cfg(Protocol::C));
    let (a, b) = (r.a.clone(), r.b.clone());
    r.promote(&a).unwrap();
    r.power_off(&b);
    r.run_until(SimTime::from_secs(12));
    let lost = r.events.iter().find(|(_, e)| matches!(e, DevEvent::Disconnected { .. })).unwrap().0;
    assert_eq!(lost, SimTime(10_500));
}

#[test]
fn pending_write_completes_locally_on_disconnect() {
    let mut r = Rig::new(cfg(Protocol::C));
    let a = r.a.clone();
    r.promote(&a).unwrap();
    r.partition(LinkState::Partitioned);
    r.write(&a, 3, 1).unwrap();
    r.run_until(SimTime::from_secs(7));
    assert_eq!(r.ack_time(1), Some(SimTime::from_secs(6)));
    assert!(r.dev.side(&a).unwrap().dirty.contains(3));
    assert!(r.bitmap_sound());
}

/// Writes `blocks` distinct blocks on `a` while the peer is unreachable,
/// then heals the link and returns once the handshake has had time to run.
fn diverge_then_heal(protocol: Protocol, blocks: u32) -> Rig {
    let mut r = Rig::new(cfg(protocol));
    let a = r.a.clone();
    r.promote(&a).unwrap();
    r.partition(LinkState::Partitioned);
    r.run_until(SimTime::from_secs(11));
    for blk in 0..blocks {
        r.write(&a, blk, u64::from(blk) + 1).unwrap();
    }
    assert_eq!(r.dev.side(&a).unwrap().dirty.len(), blocks as usize);
    r.partition(LinkState::Up);
    r
}

#[test]
fn resync_of_100_mib_takes_ten_seconds() {
    let blocks = (100 * MIB / 4096) as u32;
    let mut r = diverge_then_heal(Protocol::C, blocks);
    r.run_until(SimTime::from_secs(60));
    let (start, done) = r.resync_done().expect("resync finished");
    let took = done.saturating_sub(start).as_ms();
    assert!((9_900..=10_100).contains(&took), "resync took {took} ms");
    assert_eq!(r.dev.resync_bytes_total, 100 * MIB);
    assert!(r.dev.divergent_blocks().is_empty());
    let b = r.dev.side(&r.b).unwrap();
    assert_eq!(b.disk, DiskState::UpToDate);
    assert_eq!(b.generation, r.dev.side(&r.a).unwrap().generation);
}

#[test]
fn resync_is_oldest_first() {
    let mut r = diverge_then_heal(Protocol::C, 300);
    r.run_until(SimTime::from_secs(40));
    let order: Vec<u32> = r.dev.resync_log.iter().map(|(_, b)| *b).collect();
    assert_eq!(order, (0..300).collect::<Vec<_>>());
}

#[test]
fn target_dies_midway_leaves_untransferred_dirty() {
    let blocks = (100 * MIB / 4096) as u32;
    let mut r = diverge_then_heal(Protocol::C, blocks);
    r.run_until(SimTime::from_secs(21));
    let started = r
        .events
        .iter()
        .find_map(|(t, e)| matches!(e, DevEvent::ResyncStarted { .. }).then_some(*t))
        .expect("resync started");
    r.run_until(started + SimTime::from_secs(5));
    let b = r.b.clone();
    r.power_off(&b);
    r.run_until(started + SimTime::from_secs(30));
    let moved: BTreeSet<u32> = r.dev.resync_log.iter().map(|(_, b)| *b).collect();
    let dirty: BTreeSet<u32> = r.dev.side(&r.a).unwrap().dirty.iter().collect();
    let all: BTreeSet<u32> = (0..blocks).collect();
    assert!(moved.len() > blocks as usize / 3 && moved.len() < blocks as usize * 2 / 3);
    assert!(moved.is_disjoint(&dirty));
    assert_eq!(&moved | &dirty, all);
    assert!(r.bitmap_sound());
}

#[test]
fn reboot_resumes_resync_after_interruption() {
    let mut r = diverge_then_heal(Protocol::C, 10_000);
    r.run_until(SimTime::from_secs(23));
    let b = r.b.clone();
    r.eng.set_power(&b, Power::Rebooting { until: SimTime::from_secs(40) }).unwrap();
    r.dev.on_power_loss(&b);
    assert_eq!(r.dev.side(&b).unwrap().disk, DiskState::Inconsistent);
    assert_eq!(r.promote(&b), Err(RoleError::NodeDown(b.clone())));
    r.run_until(SimTime::from_secs(120));
    assert!(r.dev.divergent_blocks().is_empty());
    assert_eq!(r.dev.side(&b).unwrap().disk, DiskState::UpToDate);
}

#[test]
fn split_brain_disconnects_then_operator_resolves() {
    let mut r = Rig::new(cfg(Protocol::C));
    let (a, b) = (r.a.clone(), r.b.clone());
    r.promote(&a).unwrap();
    r.partition(LinkState::Partitioned);
    r.run_until(SimTime::from_secs(11));
    r.promote(&b).unwrap();
    r.write(&a, 1, 1).unwrap();
    r.write(&b, 2, 2).unwrap();
    r.partition(LinkState::Up);
    r.run_until(SimTime::from_secs(40));
    assert!(r.events.iter().any(|(_, e)| *e == DevEvent::SplitBrain { primaries: 2 }));
    for s in r.dev.sides() {
        assert_eq!(s.conn, ConnState::StandAlone);
    }
    assert_eq!(r.dev.divergent_blocks(), vec![1, 2]);
    assert!(r.dev.resolve_split_brain(&mut Io(&mut r.eng), &b));
    r.run_until(SimTime::from_secs(60));
    assert!(r.dev.divergent_blocks().is_empty());
    assert!(r.dev.side(&b).unwrap().store.contains_write(1, WriteId(1)));
    assert!(r.dev.side(&b).unwrap().store.get(2).is_none());
}

#[test]
fn resync_toward_a_primary_is_refused() {
    let mut r = Rig::new(cfg(Protocol::C));
    let (a, b) = (r.a.clone(), r.b.clone());
    r.promote(&a).unwrap();
    r.partition(LinkState::Partitioned);
    r.run_until(SimTime::from_secs(11));
    r.write(&a, 1, 1).unwrap();
    // b promotes without writing: its tag moves but a's history lacks it
    r.promote(&b).unwrap();
    r.dev.set_role(&mut Io(&mut r.eng), &a, Role::Secondary).unwrap();
    r.partition(LinkState::Up);
    r.run_until(SimTime::from_secs(40));
    assert!(r.events.iter().any(|(_, e)| *e == DevEvent::SplitBrain { primaries: 1 }));
}

#[test]
fn detached_primary_writes_through_peer() {
    let mut r = Rig::new(cfg(Protocol::C));
    let a = r.a.clone();
    r.promote(&a).unwrap();
    r.dev.handle_io_error(&mut Io(&mut r.eng), &a);
    r.write(&a, 4, 1).unwrap();
    r.run_until(SimTime(50));
    assert_eq!(r.ack_time(1), Some(SimTime(2)));
    assert!(r.dev.side(&r.b).unwrap().store.contains_write(4, WriteId(1)));
    // The writer's own disk is stale for that block until a resync.
    assert!(r.dev.side(&r.b).unwrap().dirty.contains(4));
    r.partition(LinkState::Partitioned);
    r.run_until(SimTime::from_secs(11));
    assert_eq!(r.write(&a, 5, 2), Err(WriteError::IoError(a.clone())));
}

#[test]
fn detached_secondary_keeps_primary_bitmap() {
    let mut r = Rig::new(cfg(Protocol::C));
    let (a, b) = (r.a.clone(), r.b.clone());
    r.promote(&a).unwrap();
    r.dev.handle_io_error(&mut Io(&mut r.eng), &b);
    r.write(&a, 9, 1).unwrap();
    assert_eq!(r.ack_time(1), Some(SimTime::ZERO));
    assert!(r.dev.side(&a).unwrap().dirty.contains(9));
}

#[test]
fn wfc_timeout_fires_when_peer_absent() {
    let mut r = Rig::new(cfg(Protocol::C));
    let (a, b) = (r.a.clone(), r.b.clone());
    r.power_off(&b);
    r.eng.set_power(&a, Power::Rebooting { until: SimTime::from_secs(5) }).unwrap();
    r.dev.on_power_loss(&a);
    r.run_until(SimTime::from_secs(70));
    let t = r.events.iter().find_map(|(t, e)| matches!(e, DevEvent::WfcExpired { .. }).then_some(*t));
    assert_eq!(t, Some(SimTime::from_secs(65)));
}

#[test]
fn crash_before_send_loses_protocol_a_write() {
    let mut r = Rig::new(cfg(Protocol::A));
    let (a, b) = (r.a.clone(), r.b.clone());
    r.promote(&a).unwrap();
    r.run_until(SimTime(1_000));
    r.write(&a, 0, 1).unwrap();
    r.write(&a, 1, 2).unwrap();
    assert!(r.ack_time(2).is_some());
    r.power_off(&a);
    r.run_until(SimTime(1_100));
    let bs = &r.dev.side(&b).unwrap().store;
    assert!(!bs.contains_write(1, WriteId(2)));
    assert!(r.dev.side(&a).unwrap().dirty.contains(1));
}

#[test]
fn handshake_classification() {
    let c = DeviceConfig::default();
    let mut x = Side::new(NodeId::from("x"), &c);
    let mut y = Side::new(NodeId::from("y"), &c);
    assert_eq!(classify_handshake(&x, &y), HandshakeResult::AlreadyInSync);
    x.generation = vec![5, 1];
    assert_eq!(
        classify_handshake(&x, &y),
        HandshakeResult::ResyncNeeded { source: x.node.clone(), target: y.node.clone() }
    );
    y.generation = vec![6, 1];
    assert_eq!(classify_handshake(&x, &y), HandshakeResult::SplitBrain);
    y.discard_my_data = true;
    assert_eq!(
        classify_handshake(&x, &y),
        HandshakeResult::ResyncNeeded { source: x.node.clone(), target: y.node.clone() }
    );
    y.discard_my_data = false;
    y.generation = vec![5, 1];
    y.dirty.mark(3, None);
    assert_eq!(
        classify_handshake(&x, &y),
        HandshakeResult::ResyncNeeded { source: y.node.clone(), target: x.node.clone() }
    );
}

