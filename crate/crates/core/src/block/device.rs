use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use super::{
    ActivityLog, BlockRecord, BlockStore, ConnState, DeviceConfig, DirtyBitmap, DiskState, Protocol, Role, SbAction,
    WriteId,
};
use crate::engine::NodeId;
use crate::time::SimTime;

/// Generation history kept behind the current tag.
const HISTORY_DEPTH: usize = 4;
const ACK_SIZE: u64 = 32;
const PING_SIZE: u64 = 16;

/// What the device needs from its host simulation.
pub trait BlockIo {
    fn now(&self) -> SimTime;
    fn send(&mut self, from: &NodeId, to: &NodeId, size: u64, msg: BlockMsg);
    fn set_timer(&mut self, node: &NodeId, at: SimTime, timer: BlockTimer);
    fn log(&mut self, node: Option<&NodeId>, kind: &str, detail: String);
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockMsg {
    Data { epoch: u64, write: WriteId, block: u32, rec: BlockRecord },
    RecvAck { epoch: u64, write: WriteId },
    ApplyAck { epoch: u64, write: WriteId, block: u32 },
    Ping { epoch: u64 },
    Pong { epoch: u64 },
    ConnectReq { boot: u64 },
    Disconnect { epoch: u64 },
    ResyncData { epoch: u64, block: u32, rec: Option<BlockRecord> },
    ResyncAck { epoch: u64, block: u32, rec: Option<BlockRecord> },
}

impl fmt::Display for BlockMsg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockMsg::Data { write, block, .. } => write!(f, "drbd-data {write} blk={block}"),
            BlockMsg::RecvAck { write, .. } => write!(f, "drbd-recv-ack {write}"),
            BlockMsg::ApplyAck { write, block, .. } => write!(f, "drbd-write-ack {write} blk={block}"),
            BlockMsg::Ping { .. } => f.write_str("drbd-ping"),
            BlockMsg::Pong { .. } => f.write_str("drbd-pong"),
            BlockMsg::ConnectReq { boot } => write!(f, "drbd-connect boot={boot}"),
            BlockMsg::Disconnect { .. } => f.write_str("drbd-disconnect"),
            BlockMsg::ResyncData { block, .. } => write!(f, "drbd-rs-data blk={block}"),
            BlockMsg::ResyncAck { block, .. } => write!(f, "drbd-rs-ack blk={block}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockTimer {
    LocalDone { write: WriteId },
    PeerApplyDone { epoch: u64, write: WriteId, block: u32 },
    PingTick { epoch: u64 },
    PingTimeout { epoch: u64, ping: u64 },
    RequestTimeout { epoch: u64, write: WriteId },
    ConnectTick,
    ResyncTick { epoch: u64 },
    WfcTimeout { boot: u64 },
}

impl fmt::Display for BlockTimer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HandshakeResult {
    AlreadyInSync,
    ResyncNeeded { source: NodeId, target: NodeId },
    SplitBrain,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DevEvent {
    Acked { node: NodeId, write: WriteId },
    IoFailed { node: NodeId, write: WriteId },
    Handshake { result: HandshakeResult },
    ResyncStarted { source: NodeId, target: NodeId, blocks: usize },
    ResyncDone { source: NodeId, target: NodeId, bytes: u64, started: SimTime },
    Disconnected { node: NodeId },
    SplitBrain { primaries: usize },
    WfcExpired { node: NodeId },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WriteError {
    #[error("wrong role: {0} is not Primary")]
    WrongRole(NodeId),
    #[error("I/O error on {0}: no usable disk")]
    IoError(NodeId),
    #[error("block {block} out of range (device has {count})")]
    OutOfRange { block: u32, count: u32 },
    #[error("{0} is down")]
    NodeDown(NodeId),
    #[error("{0} is not a replica of this device")]
    UnknownNode(NodeId),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RoleError {
    #[error("peer is primary")]
    PeerIsPrimary,
    #[error("inconsistent data")]
    InconsistentData,
    #[error("no local disk and no up-to-date peer")]
    NoDisk,
    #[error("{0} is down")]
    NodeDown(NodeId),
    #[error("{0} is not a replica of this device")]
    UnknownNode(NodeId),
}

#[derive(Debug, Clone)]
struct Pending {
    block: u32,
    local_done: bool,
    replicated: bool,
    diskless: bool,
    recv_acked: bool,
    applied: bool,
    client_acked: bool,
}

/// One node's half of the device.
#[derive(Debug, Clone)]
pub struct Side {
    pub node: NodeId,
    pub role: Role,
    pub conn: ConnState,
    pub disk: DiskState,
    /// Current tag first, then history, newest first.
    pub generation: Vec<u64>,
    pub dirty: DirtyBitmap,
    pub activity_log: ActivityLog,
    pub store: BlockStore,
    pub up: bool,
    pending: BTreeMap<WriteId, Pending>,
    in_flight: BTreeSet<u32>,
    epoch: Option<u64>,
    bumped_since_disconnect: bool,
    ping_seq: u64,
    awaiting_pong: Option<u64>,
    discard_my_data: bool,
    last_write_at: Option<SimTime>,
    boot_count: u64,
    peer_boot: u64,
    resync_budget: u64,
    last_resync_tick: SimTime,
    resync_started: SimTime,
    resync_bytes: u64,
}

impl Side {
    fn new(node: NodeId, cfg: &DeviceConfig) -> Self {
        Side {
            node,
            role: Role::Secondary,
            conn: ConnState::Connected,
            disk: DiskState::UpToDate,
            generation: vec![1],
            dirty: DirtyBitmap::new(),
            activity_log: ActivityLog::new(cfg.al_extents),
            store: BlockStore::new(cfg.block_count),
            up: true,
            pending: BTreeMap::new(),
            in_flight: BTreeSet::new(),
            epoch: Some(0),
            bumped_since_disconnect: false,
            ping_seq: 0,
            awaiting_pong: None,
            discard_my_data: false,
            last_write_at: None,
            boot_count: 0,
            peer_boot: 0,
            resync_budget: 0,
            last_resync_tick: SimTime::ZERO,
            resync_started: SimTime::ZERO,
            resync_bytes: 0,
        }
    }

    pub fn current_tag(&self) -> u64 {
        self.generation[0]
    }

    pub fn pending_writes(&self) -> usize {
        self.pending.len()
    }
}

/// Classifies a reconnection from the two sides' generation tags, disk
/// states and dirty bitmaps.
pub fn classify_handshake(a: &Side, b: &Side) -> HandshakeResult {
    let resync = |src: &Side, dst: &Side| HandshakeResult::ResyncNeeded {
        source: src.node.clone(),
        target: dst.node.clone(),
    };
    if a.discard_my_data {
        return resync(b, a);
    }
    if b.discard_my_data {
        return resync(a, b);
    }
    match (a.disk == DiskState::Inconsistent, b.disk == DiskState::Inconsistent) {
        (true, false) => return resync(b, a),
        (false, true) => return resync(a, b),
        _ => {}
    }
    let (ca, cb) = (a.current_tag(), b.current_tag());
    if ca == cb {
        return match (a.dirty.is_empty(), b.dirty.is_empty()) {
            (true, true) => HandshakeResult::AlreadyInSync,
            (false, true) => resync(a, b),
            (true, false) => resync(b, a),
            (false, false) => {
                if b.last_write_at > a.last_write_at {
                    resync(b, a)
                } else {
                    resync(a, b)
                }
            }
        };
    }
    if b.generation[1..].contains(&ca) {
        resync(b, a)
    } else if a.generation[1..].contains(&cb) {
        resync(a, b)
    } else {
        HandshakeResult::SplitBrain
    }
}

/// The two replicas of one resource.
#[derive(Debug, Clone)]
pub struct Device {
    cfg: DeviceConfig,
    sides: [Side; 2],
    next_tag: u64,
    next_epoch: u64,
    /// Blocks moved by resync, in transfer-ack order.
    pub resync_log: Vec<(SimTime, u32)>,
    pub resync_bytes_total: u64,
    /// Log every applied write.
    pub trace_writes: bool,
}

impl Device {
    /// A freshly created, connected, in-sync Secondary/Secondary pair.
    pub fn new(cfg: DeviceConfig, nodes: [NodeId; 2]) -> Self {
        let [a, b] = nodes;
        let sides = [Side::new(a, &cfg), Side::new(b, &cfg)];
        Device { cfg, sides, next_tag: 2, next_epoch: 1, resync_log: Vec::new(), resync_bytes_total: 0, trace_writes: true }
    }

    pub fn config(&self) -> &DeviceConfig {
        &self.cfg
    }

    pub fn side(&self, node: &NodeId) -> Option<&Side> {
        self.index(node).map(|i| &self.sides[i])
    }

    pub fn sides(&self) -> &[Side; 2] {
        &self.sides
    }

    pub fn index(&self, node: &NodeId) -> Option<usize> {
        self.sides.iter().position(|s| &s.node == node)
    }

    fn peer_of(i: usize) -> usize {
        1 - i
    }

    /// Starts the keepalive pings of the initial connection.
    pub fn start(&mut self, io: &mut dyn BlockIo) {
        for i in 0..2 {
            if let Some(e) = self.sides[i].epoch {
                let at = io.now() + self.cfg.ping_int;
                io.set_timer(&self.sides[i].node.clone(), at, BlockTimer::PingTick { epoch: e });
            }
        }
    }

    fn log(&self, io: &mut dyn BlockIo, i: usize, kind: &str, detail: String) {
        io.log(Some(&self.sides[i].node), kind, detail);
    }

    fn bump(&mut self, io: &mut dyn BlockIo, i: usize, why: &str) {
        let tag = self.next_tag;
        self.next_tag += 1;
        let gen = &mut self.sides[i].generation;
        gen.insert(0, tag);
        gen.truncate(HISTORY_DEPTH + 1);
        self.sides[i].bumped_since_disconnect = true;
        let detail = format!("{} {:?} ({why})", self.sides[i].node, self.sides[i].generation);
        self.log(io, i, "generation", detail);
    }

    fn connected_pair(&self, i: usize) -> bool {
        let p = Self::peer_of(i);
        self.sides[i].conn.is_connected() && self.sides[p].up && self.sides[i].epoch == self.sides[p].epoch
    }

    pub fn status(&self, node: &NodeId) -> Option<String> {
        let i = self.index(node)?;
        let me = &self.sides[i];
        let peer = &self.sides[Self::peer_of(i)];
        let (peer_role, peer_disk) = if me.conn.is_connected() {
            (peer.role.to_string(), peer.disk.to_string())
        } else {
            ("Unknown".to_string(), "DUnknown".to_string())
        };
        Some(format!("cs:{} st:{}/{} ds:{}/{}", me.conn, me.role, peer_role, me.disk, peer_disk))
    }

    pub fn set_role(&mut self, io: &mut dyn BlockIo, node: &NodeId, role: Role) -> Result<(), RoleError> {
        let i = self.index(node).ok_or_else(|| RoleError::UnknownNode(node.clone()))?;
        if !self.sides[i].up {
            return Err(RoleError::NodeDown(node.clone()));
        }
        if role == Role::Primary && self.sides[i].role != Role::Primary {
            let p = Self::peer_of(i);
            let connected = self.connected_pair(i);
            match self.sides[i].disk {
                DiskState::Inconsistent => return Err(RoleError::InconsistentData),
                DiskState::Detached if !(connected && self.sides[p].disk == DiskState::UpToDate) => {
                    return Err(RoleError::NoDisk)
                }
                _ => {}
            }
            if connected && self.sides[p].role == Role::Primary && !self.cfg.allow_two_primaries {
                return Err(RoleError::PeerIsPrimary);
            }
            if !connected {
                self.bump(io, i, "promote while disconnected");
            }
        }
        self.sides[i].role = role;
        let status = self.status(node).expect("known node");
        self.log(io, i, "role", format!("{node} {role} {status}"));
        Ok(())
    }

    /// Policy verdict for a split-brain seen with `primaries` Primary sides.
    pub fn apply_after_sb_policy(&self, primaries: usize) -> SbAction {
        match self.cfg.after_sb[primaries.min(2)] {
            super::AfterSbPolicy::Disconnect => SbAction::Disconnect,
        }
    }

    pub fn submit_write(
        &mut self,
        io: &mut dyn BlockIo,
        node: &NodeId,
        block: u32,
        write: WriteId,
    ) -> Result<Vec<DevEvent>, WriteError> {
        let i = self.index(node).ok_or_else(|| WriteError::UnknownNode(node.clone()))?;
        let p = Self::peer_of(i);
        let now = io.now();
        if !self.sides[i].up {
            return Err(WriteError::NodeDown(node.clone()));
        }
        if self.sides[i].role != Role::Primary {
            return Err(WriteError::WrongRole(node.clone()));
        }
        if block >= self.cfg.block_count {
            return Err(WriteError::OutOfRange { block, count: self.cfg.block_count });
        }
        let connected = self.connected_pair(i);
        let peer_disk = self.sides[p].disk;
        let rec = BlockRecord::new(write, i as u8, block);
        let mut events = Vec::new();

        if self.sides[i].disk == DiskState::Detached {
            if !(connected && peer_disk == DiskState::UpToDate) {
                self.log(io, i, "io-error", format!("{node} {write} blk={block} no disk"));
                return Err(WriteError::IoError(node.clone()));
            }
            let epoch = self.sides[i].epoch.expect("connected");
            self.sides[i].pending.insert(
                write,
                Pending {
                    block,
                    local_done: true,
                    replicated: true,
                    diskless: true,
                    recv_acked: false,
                    applied: false,
                    client_acked: false,
                },
            );
            let to = self.sides[p].node.clone();
            io.send(node, &to, self.cfg.block_size, BlockMsg::Data { epoch, write, block, rec });
            io.set_timer(node, now + self.cfg.request_timeout, BlockTimer::RequestTimeout { epoch, write });
            return Ok(events);
        }

        if !connected && !self.sides[i].bumped_since_disconnect {
            self.bump(io, i, "write while disconnected");
        }
        let replicate = connected && peer_disk != DiskState::Detached;
        let extent = block / self.cfg.blocks_per_extent();
        let side = &mut self.sides[i];
        side.dirty.mark(block, Some(write));
        side.activity_log.touch(extent);
        side.last_write_at = Some(now);
        side.pending.insert(
            write,
            Pending {
                block,
                local_done: false,
                replicated: replicate,
                diskless: false,
                recv_acked: false,
                applied: false,
                client_acked: false,
            },
        );
        if replicate {
            let epoch = side.epoch.expect("connected");
            let to = self.sides[p].node.clone();
            io.send(node, &to, self.cfg.block_size, BlockMsg::Data { epoch, write, block, rec });
            io.set_timer(node, now + self.cfg.request_timeout, BlockTimer::RequestTimeout { epoch, write });
        }
        if self.cfg.local_write_latency == SimTime::ZERO {
            self.local_done(io, i, write, rec, &mut events);
        } else {
            io.set_timer(node, now + self.cfg.local_write_latency, BlockTimer::LocalDone { write });
        }
        Ok(events)
    }

    fn local_done(&mut self, io: &mut dyn BlockIo, i: usize, write: WriteId, rec: BlockRecord, ev: &mut Vec<DevEvent>) {
        let Some(p) = self.sides[i].pending.get_mut(&write) else { return };
        p.local_done = true;
        let block = p.block;
        self.sides[i].store.put(block, Some(rec));
        let detail = format!("{write} blk={block} on {}", self.sides[i].node);
        if self.trace_writes {
            self.log(io, i, "apply", detail);
        }
        self.check_complete(i, write, ev);
    }

    fn check_complete(&mut self, i: usize, write: WriteId, ev: &mut Vec<DevEvent>) {
        let protocol = self.cfg.protocol;
        let node = self.sides[i].node.clone();
        let Some(p) = self.sides[i].pending.get_mut(&write) else { return };
        let ready = if p.diskless {
            p.applied
        } else if !p.replicated {
            p.local_done
        } else {
            match protocol {
                Protocol::A => p.local_done,
                Protocol::B => p.local_done && p.recv_acked,
                Protocol::C => p.local_done && p.applied,
            }
        };
        if ready && !p.client_acked {
            p.client_acked = true;
            ev.push(DevEvent::Acked { node, write });
        }
        if p.client_acked && p.local_done && (!p.replicated || p.applied) {
            self.sides[i].pending.remove(&write);
        }
    }

    pub fn on_message(&mut self, io: &mut dyn BlockIo, from: &NodeId, to: &NodeId, msg: BlockMsg) -> Vec<DevEvent> {
        let mut ev = Vec::new();
        let (Some(i), Some(_)) = (self.index(to), self.index(from)) else { return ev };
        if !self.sides[i].up {
            return ev;
        }
        let my_epoch = self.sides[i].epoch;
        match msg {
            BlockMsg::Data { epoch, write, block, rec } => {
                if my_epoch != Some(epoch) || self.sides[i].disk == DiskState::Detached {
                    return ev;
                }
                if self.cfg.protocol == Protocol::B {
                    io.send(to, from, ACK_SIZE, BlockMsg::RecvAck { epoch, write });
                }
                if self.cfg.local_write_latency == SimTime::ZERO {
                    self.peer_apply(io, i, from, epoch, write, block, Some(rec));
                } else {
                    self.sides[i].store.put(block, Some(rec));
                    let at = io.now() + self.cfg.local_write_latency;
                    io.set_timer(to, at, BlockTimer::PeerApplyDone { epoch, write, block });
                }
            }
            BlockMsg::RecvAck { epoch, write } => {
                if my_epoch == Some(epoch) {
                    if let Some(p) = self.sides[i].pending.get_mut(&write) {
                        p.recv_acked = true;
                    }
                    self.check_complete(i, write, &mut ev);
                }
            }
            BlockMsg::ApplyAck { epoch, write, block } => {
                if my_epoch == Some(epoch) {
                    self.sides[i].dirty.clear_if(block, Some(write));
                    if let Some(p) = self.sides[i].pending.get_mut(&write) {
                        p.recv_acked = true;
                        p.applied = true;
                    }
                    self.check_complete(i, write, &mut ev);
                }
            }
            BlockMsg::Ping { epoch } => {
                if my_epoch == Some(epoch) {
                    io.send(to, from, PING_SIZE, BlockMsg::Pong { epoch });
                }
            }
            BlockMsg::Pong { epoch } => {
                if my_epoch == Some(epoch) {
                    self.sides[i].awaiting_pong = None;
                }
            }
            BlockMsg::Disconnect { epoch } => {
                if my_epoch == Some(epoch) {
                    self.connection_lost(io, i, "peer disconnected", &mut ev);
                }
            }
            BlockMsg::ConnectReq { boot } => {
                let p = Self::peer_of(i);
                if self.sides[i].conn == ConnState::StandAlone {
                    return ev;
                }
                if self.sides[i].conn.is_connected() {
                    if boot == self.sides[i].peer_boot {
                        return ev;
                    }
                    self.connection_lost(io, i, "peer reconnecting", &mut ev);
                }
                if self.sides[p].up && self.sides[p].conn == ConnState::WFConnection {
                    self.handshake(io, &mut ev);
                }
            }
            BlockMsg::ResyncData { epoch, block, rec } => {
                if my_epoch == Some(epoch) && self.sides[i].conn == ConnState::SyncTarget {
                    self.sides[i].store.put(block, rec);
                    io.send(to, from, ACK_SIZE, BlockMsg::ResyncAck { epoch, block, rec });
                }
            }
            BlockMsg::ResyncAck { epoch, block, rec } => {
                if my_epoch == Some(epoch) && self.sides[i].conn == ConnState::SyncSource {
                    let side = &mut self.sides[i];
                    side.in_flight.remove(&block);
                    if side.store.get(block).copied() == rec {
                        side.dirty.remove(block);
                    }
                    side.resync_bytes += self.cfg.block_size;
                    self.resync_bytes_total += self.cfg.block_size;
                    self.resync_log.push((io.now(), block));
                    self.maybe_finish_resync(io, i, &mut ev);
                }
            }
        }
        ev
    }

    #[allow(clippy::too_many_arguments)]
    fn peer_apply(
        &mut self,
        io: &mut dyn BlockIo,
        i: usize,
        primary: &NodeId,
        epoch: u64,
        write: WriteId,
        block: u32,
        rec: Option<BlockRecord>,
    ) {
        if let Some(r) = rec {
            self.sides[i].store.put(block, Some(r));
        }
        // A diskless writer's own disk never sees this block.
        if self.sides[Self::peer_of(i)].disk == DiskState::Detached {
            self.sides[i].dirty.mark(block, Some(write));
        }
        let me = self.sides[i].node.clone();
        if self.trace_writes {
            self.log(io, i, "apply", format!("{write} blk={block} on {me}"));
        }
        io.send(&me, primary, ACK_SIZE, BlockMsg::ApplyAck { epoch, write, block });
    }

    pub fn on_timer(&mut self, io: &mut dyn BlockIo, node: &NodeId, timer: BlockTimer) -> Vec<DevEvent> {
        let mut ev = Vec::new();
        let Some(i) = self.index(node) else { return ev };
        if !self.sides[i].up {
            return ev;
        }
        let now = io.now();
        let my_epoch = self.sides[i].epoch;
        match timer {
            BlockTimer::LocalDone { write } => {
                let rec = self.sides[i].pending.get(&write).map(|p| BlockRecord::new(write, i as u8, p.block));
                if let Some(rec) = rec {
                    self.local_done(io, i, write, rec, &mut ev);
                }
            }
            BlockTimer::PeerApplyDone { epoch, write, block } => {
                if my_epoch == Some(epoch) {
                    let primary = self.sides[Self::peer_of(i)].node.clone();
                    self.peer_apply(io, i, &primary, epoch, write, block, None);
                }
            }
            BlockTimer::PingTick { epoch } => {
                if my_epoch == Some(epoch) {
                    let side = &mut self.sides[i];
                    side.ping_seq += 1;
                    let ping = side.ping_seq;
                    side.awaiting_pong = Some(ping);
                    let peer = self.sides[Self::peer_of(i)].node.clone();
                    io.send(node, &peer, PING_SIZE, BlockMsg::Ping { epoch });
                    io.set_timer(node, now + self.cfg.ping_timeout, BlockTimer::PingTimeout { epoch, ping });
                    io.set_timer(node, now + self.cfg.ping_int, BlockTimer::PingTick { epoch });
                }
            }
            BlockTimer::PingTimeout { epoch, ping } => {
                if my_epoch == Some(epoch) && self.sides[i].awaiting_pong == Some(ping) {
                    self.connection_lost(io, i, "ping timeout", &mut ev);
                }
            }
            BlockTimer::RequestTimeout { epoch, write } => {
                let stuck = self.sides[i].pending.get(&write).is_some_and(|p| p.replicated && !p.applied);
                if my_epoch == Some(epoch) && stuck {
                    self.connection_lost(io, i, "request timeout", &mut ev);
                }
            }
            BlockTimer::ConnectTick => {
                if self.sides[i].conn == ConnState::WFConnection {
                    let peer = self.sides[Self::peer_of(i)].node.clone();
                    let boot = self.sides[i].boot_count;
                    io.send(node, &peer, PING_SIZE, BlockMsg::ConnectReq { boot });
                    io.set_timer(node, now + self.cfg.connect_int, BlockTimer::ConnectTick);
                }
            }
            BlockTimer::ResyncTick { epoch } => {
                if my_epoch == Some(epoch) && self.sides[i].conn == ConnState::SyncSource {
                    self.resync_tick(io, i, &mut ev);
                    io.set_timer(node, now + self.cfg.resync_tick, BlockTimer::ResyncTick { epoch });
                }
            }
            BlockTimer::WfcTimeout { boot } => {
                if self.sides[i].boot_count == boot && self.sides[i].conn == ConnState::WFConnection {
                    ev.push(DevEvent::WfcExpired { node: node.clone() });
                }
            }
        }
        ev
    }

    /// Sends up to `sync_rate * elapsed` bytes of dirty blocks, oldest first.
    fn resync_tick(&mut self, io: &mut dyn BlockIo, i: usize, ev: &mut Vec<DevEvent>) {
        let now = io.now();
        let bs = self.cfg.block_size;
        let p = Self::peer_of(i);
        let peer = self.sides[p].node.clone();
        let me = self.sides[i].node.clone();
        let epoch = self.sides[i].epoch.expect("syncing");
        let side = &mut self.sides[i];
        let elapsed = now.saturating_sub(side.last_resync_tick).as_ms();
        side.last_resync_tick = now;
        side.resync_budget += self.cfg.sync_rate * elapsed / 1000;
        let candidates: Vec<u32> = side
            .dirty
            .iter()
            .filter(|b| !side.in_flight.contains(b))
            .take((side.resync_budget / bs) as usize)
            .collect();
        if candidates.is_empty() {
            side.resync_budget = 0;
        }
        for b in candidates {
            side.resync_budget -= bs;
            side.in_flight.insert(b);
            let rec = side.store.get(b).copied();
            io.send(&me, &peer, bs, BlockMsg::ResyncData { epoch, block: b, rec });
        }
        self.maybe_finish_resync(io, i, ev);
    }

    fn maybe_finish_resync(&mut self, io: &mut dyn BlockIo, i: usize, ev: &mut Vec<DevEvent>) {
        let p = Self::peer_of(i);
        if !(self.sides[i].dirty.is_empty() && self.sides[i].in_flight.is_empty()) {
            return;
        }
        let generation = self.sides[i].generation.clone();
        self.sides[i].conn = ConnState::Connected;
        self.sides[p].conn = ConnState::Connected;
        self.sides[p].disk = DiskState::UpToDate;
        self.sides[p].generation = generation;
        self.sides[p].dirty.clear();
        let (bytes, started) = (self.sides[i].resync_bytes, self.sides[i].resync_started);
        let (source, target) = (self.sides[i].node.clone(), self.sides[p].node.clone());
        let took = io.now().saturating_sub(started).as_ms();
        self.log(io, i, "resync-done", format!("{source}->{target} bytes={bytes} ms={took}"));
        ev.push(DevEvent::ResyncDone { source, target, bytes, started });
    }

    fn connection_lost(&mut self, io: &mut dyn BlockIo, i: usize, why: &str, ev: &mut Vec<DevEvent>) {
        let node = self.sides[i].node.clone();
        let side = &mut self.sides[i];
        if side.conn.is_connected() {
            side.conn = ConnState::WFConnection;
        }
        side.epoch = None;
        side.awaiting_pong = None;
        side.bumped_since_disconnect = false;
        side.in_flight.clear();
        side.resync_budget = 0;
        let writes: Vec<WriteId> = side.pending.keys().copied().collect();
        for w in writes {
            let side = &mut self.sides[i];
            let p = side.pending.get_mut(&w).expect("listed");
            if p.diskless {
                side.pending.remove(&w);
                ev.push(DevEvent::IoFailed { node: node.clone(), write: w });
                continue;
            }
            p.replicated = false;
            self.check_complete(i, w, ev);
        }
        let status = self.status(&node).expect("known");
        self.log(io, i, "disconnect", format!("{node} {why} {status}"));
        if self.sides[i].conn == ConnState::WFConnection {
            io.set_timer(&node, io.now() + self.cfg.connect_int, BlockTimer::ConnectTick);
        }
        ev.push(DevEvent::Disconnected { node });
    }

    /// Both sides are up and waiting; compare and act.
    fn handshake(&mut self, io: &mut dyn BlockIo, ev: &mut Vec<DevEvent>) {
        let result = classify_handshake(&self.sides[0], &self.sides[1]);
        self.sides[0].discard_my_data = false;
        self.sides[1].discard_my_data = false;
        let now = io.now();
        io.log(None, "handshake", format!("{result:?}"));
        ev.push(DevEvent::Handshake { result: result.clone() });
        match result {
            HandshakeResult::SplitBrain => {
                let primaries = self.sides.iter().filter(|s| s.role == Role::Primary).count();
                io.log(None, "split-brain", format!("primaries={primaries}"));
                match self.apply_after_sb_policy(primaries) {
                    SbAction::Disconnect => self.both_standalone(io, &format!("after-sb-{primaries}pri disconnect")),
                }
                ev.push(DevEvent::SplitBrain { primaries });
            }
            HandshakeResult::AlreadyInSync => {
                let epoch = self.open_epoch(io);
                for s in &mut self.sides {
                    s.conn = ConnState::Connected;
                    if s.disk != DiskState::Detached {
                        s.disk = DiskState::UpToDate;
                    }
                }
                let _ = epoch;
                self.log_status(io);
            }
            HandshakeResult::ResyncNeeded { ref source, ref target } => {
                let si = self.index(source).expect("known");
                let ti = self.index(target).expect("known");
                if self.sides[ti].role == Role::Primary {
                    self.both_standalone(io, "rr-conflict disconnect");
                    return;
                }
                let target_dirty = std::mem::take(&mut self.sides[ti].dirty);
                self.sides[si].dirty.absorb(&target_dirty);
                let epoch = self.open_epoch(io);
                let blocks = self.sides[si].dirty.len();
                if blocks == 0 {
                    self.sides[si].conn = ConnState::Connected;
                    self.sides[ti].conn = ConnState::Connected;
                    self.sides[ti].disk = DiskState::UpToDate;
                    self.sides[ti].generation = self.sides[si].generation.clone();
                    self.log_status(io);
                    return;
                }
                self.sides[si].conn = ConnState::SyncSource;
                self.sides[ti].conn = ConnState::SyncTarget;
                self.sides[ti].disk = DiskState::Inconsistent;
                let s = &mut self.sides[si];
                s.resync_started = now;
                s.resync_bytes = 0;
                s.resync_budget = 0;
                s.last_resync_tick = now.saturating_sub(self.cfg.resync_tick);
                io.log(
                    Some(&self.sides[si].node),
                    "resync-start",
                    format!("{source}->{target} blocks={blocks} bytes={}", blocks as u64 * self.cfg.block_size),
                );
                io.set_timer(source, now, BlockTimer::ResyncTick { epoch });
                ev.push(DevEvent::ResyncStarted { source: source.clone(), target: target.clone(), blocks });
                self.log_status(io);
            }
        }
    }

    fn open_epoch(&mut self, io: &mut dyn BlockIo) -> u64 {
        let epoch = self.next_epoch;
        self.next_epoch += 1;
        let at = io.now() + self.cfg.ping_int;
        let boots = [self.sides[1].boot_count, self.sides[0].boot_count];
        for (s, peer_boot) in self.sides.iter_mut().zip(boots) {
            s.peer_boot = peer_boot;
            s.epoch = Some(epoch);
            s.awaiting_pong = None;
            s.bumped_since_disconnect = false;
            io.set_timer(&s.node, at, BlockTimer::PingTick { epoch });
        }
        epoch
    }

    fn both_standalone(&mut self, io: &mut dyn BlockIo, why: &str) {
        for s in &mut self.sides {
            s.conn = ConnState::StandAlone;
            s.epoch = None;
            s.in_flight.clear();
        }
        io.log(None, "standalone", why.to_string());
        self.log_status(io);
    }

    fn log_status(&self, io: &mut dyn BlockIo) {
        for i in 0..2 {
            if self.sides[i].up {
                let st = self.status(&self.sides[i].node).expect("known");
                self.log(io, i, "status", format!("{} {st}", self.sides[i].node));
            }
        }
    }

    /// Local disk failure under `on-io-error detach`.
    pub fn handle_io_error(&mut self, io: &mut dyn BlockIo, node: &NodeId) -> Vec<DevEvent> {
        let Some(i) = self.index(node) else { return Vec::new() };
        self.sides[i].disk = DiskState::Detached;
        let st = self.status(node).expect("known");
        self.log(io, i, "detach", format!("{node} on-io-error detach {st}"));
        Vec::new()
    }

    /// Operator split-brain recovery: `victim` drops its changes and
    /// reconnects as the resync target.
    pub fn resolve_split_brain(&mut self, io: &mut dyn BlockIo, victim: &NodeId) -> bool {
        let Some(v) = self.index(victim) else { return false };
        if !self.sides.iter().all(|s| s.up) {
            return false;
        }
        self.sides[v].role = Role::Secondary;
        self.sides[v].discard_my_data = true;
        let now = io.now();
        for s in &mut self.sides {
            s.conn = ConnState::WFConnection;
            s.epoch = None;
        }
        io.log(Some(victim), "sb-resolve", format!("{victim} discard-my-data"));
        for s in &self.sides {
            io.set_timer(&s.node, now, BlockTimer::ConnectTick);
        }
        true
    }

    /// Abrupt power loss: volatile state goes, on-disk metadata (bitmap,
    /// activity log, generations, disk state) stays.
    pub fn on_power_loss(&mut self, node: &NodeId) {
        let Some(i) = self.index(node) else { return };
        let s = &mut self.sides[i];
        s.up = false;
        s.role = Role::Secondary;
        s.conn = ConnState::StandAlone;
        s.epoch = None;
        s.pending.clear();
        s.in_flight.clear();
        s.awaiting_pong = None;
    }

    /// Graceful `drbdadm down`: tells a connected peer, then goes away.
    pub fn shutdown(&mut self, io: &mut dyn BlockIo, node: &NodeId) {
        let Some(i) = self.index(node) else { return };
        if let Some(epoch) = self.sides[i].epoch {
            let peer = self.sides[Self::peer_of(i)].node.clone();
            io.send(node, &peer, PING_SIZE, BlockMsg::Disconnect { epoch });
        }
        self.log(io, i, "down", format!("{node}"));
        self.on_power_loss(node);
    }

    /// Node (re)booted: comes up Secondary and starts looking for its peer.
    pub fn on_boot(&mut self, io: &mut dyn BlockIo, node: &NodeId) {
        let Some(i) = self.index(node) else { return };
        let now = io.now();
        let s = &mut self.sides[i];
        s.up = true;
        s.role = Role::Secondary;
        s.conn = ConnState::WFConnection;
        s.epoch = None;
        s.boot_count += 1;
        let boot = s.boot_count;
        io.set_timer(node, now, BlockTimer::ConnectTick);
        io.set_timer(node, now + self.cfg.degr_wfc_timeout, BlockTimer::WfcTimeout { boot });
        let st = self.status(node).expect("known");
        self.log(io, i, "status", format!("{node} {st}"));
    }

    /// Blocks whose contents differ between the two stores.
    pub fn divergent_blocks(&self) -> Vec<u32> {
        self.sides[0].store.diff(&self.sides[1].store)
    }
}

#[cfg(test)]
#[path = "device_tests.rs"]
mod tests;
