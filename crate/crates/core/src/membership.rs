//! Heartbeat failure detector and quorum evaluation.
//!
//! Each node keeps a [`Membership`]: one [`PeerRecord`] per configured peer
//! plus an epoch that moves on every view change. Liveness is purely a
//! function of silence: a peer not heard from for longer than `deadtime` is
//! declared dead, once, at the next evaluation.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::engine::NodeId;
use crate::time::{parse_duration, BareUnit, SimTime};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeartbeatConfig {
    pub keepalive: SimTime,
    pub warntime: SimTime,
    pub deadtime: SimTime,
    pub node_list: Vec<NodeId>,
}

impl Default for HeartbeatConfig {
    fn default() -> Self {
        HeartbeatConfig {
            keepalive: SimTime::from_secs(1),
            warntime: SimTime::from_secs(6),
            deadtime: SimTime::from_secs(10),
            node_list: Vec::new(),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HaConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("timing must satisfy 0 < keepalive < warntime <= deadtime (got {keepalive}/{warntime}/{deadtime} ms)")]
    Timing { keepalive: u64, warntime: u64, deadtime: u64 },
}

impl HeartbeatConfig {
    pub fn validate(&self) -> Result<(), HaConfigError> {
        let ok = self.keepalive > SimTime::ZERO && self.keepalive < self.warntime && self.warntime <= self.deadtime;
        if ok {
            Ok(())
        } else {
            Err(HaConfigError::Timing {
                keepalive: self.keepalive.as_ms(),
                warntime: self.warntime.as_ms(),
                deadtime: self.deadtime.as_ms(),
            })
        }
    }

    /// Parses the ha.cf subset. Returns the config and any warnings for
    /// directives that were not understood.
    pub fn parse(text: &str) -> Result<(HeartbeatConfig, Vec<String>), HaConfigError> {
        let mut cfg = HeartbeatConfig::default();
        let mut warnings = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut words = line.split_whitespace();
            let directive = words.next().unwrap_or_default();
            let args: Vec<&str> = words.collect();
            let duration = |args: &[&str]| -> Result<SimTime, HaConfigError> {
                match args {
                    [v] => parse_duration(v, BareUnit::Secs).ok_or_else(|| HaConfigError::Syntax {
                        line: line_no,
                        msg: format!("bad duration {v:?} for {directive}"),
                    }),
                    _ => Err(HaConfigError::Syntax { line: line_no, msg: format!("{directive} takes one value") }),
                }
            };
            match directive {
                "keepalive" => cfg.keepalive = duration(&args)?,
                "warntime" => cfg.warntime = duration(&args)?,
                "deadtime" => cfg.deadtime = duration(&args)?,
                "node" => {
                    if args.is_empty() {
                        return Err(HaConfigError::Syntax { line: line_no, msg: "node needs at least one id".into() });
                    }
                    for a in args {
                        let id = NodeId::from(a);
                        if !cfg.node_list.contains(&id) {
                            cfg.node_list.push(id);
                        }
                    }
                }
                // Interface name and CRM switch are accepted and have no
                // effect on the model.
                "bcast" | "crm" => {}
                other => warnings.push(format!("line {line_no}: unknown directive {other:?} ignored")),
            }
        }
        cfg.validate()?;
        Ok((cfg, warnings))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeerStatus {
    Alive,
    Warned,
    Dead,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerRecord {
    pub peer: NodeId,
    pub last_seen: SimTime,
    pub status: PeerStatus,
    /// Set when the peer announced a graceful leave instead of going silent.
    pub left_cleanly: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeartbeatOutcome {
    UnknownSender,
    Refreshed,
    /// Peer was dead and is back; the view changed.
    Rejoined,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Evaluation {
    pub newly_dead: Vec<NodeId>,
    pub newly_warned: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct Membership {
    owner: NodeId,
    config: HeartbeatConfig,
    peers: BTreeMap<NodeId, PeerRecord>,
    epoch: u64,
}

impl Membership {
    /// Starts with every configured peer considered alive as of `now`.
    pub fn new(owner: NodeId, config: HeartbeatConfig, now: SimTime) -> Self {
        let peers = config
            .node_list
            .iter()
            .filter(|n| **n != owner)
            .map(|p| {
                (p.clone(), PeerRecord { peer: p.clone(), last_seen: now, status: PeerStatus::Alive, left_cleanly: false })
            })
            .collect();
        Membership { owner, config, peers, epoch: 0 }
    }

    pub fn owner(&self) -> &NodeId {
        &self.owner
    }

    pub fn config(&self) -> &HeartbeatConfig {
        &self.config
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn peer(&self, id: &NodeId) -> Option<&PeerRecord> {
        self.peers.get(id)
    }

    pub fn peers(&self) -> impl Iterator<Item = &PeerRecord> {
        self.peers.values()
    }

    /// Owner plus every peer not declared dead.
    pub fn alive(&self) -> BTreeSet<NodeId> {
        let mut s: BTreeSet<NodeId> =
            self.peers.values().filter(|p| p.status != PeerStatus::Dead).map(|p| p.peer.clone()).collect();
        s.insert(self.owner.clone());
        s
    }

    pub fn total(&self) -> usize {
        self.peers.len() + 1
    }

    /// Broadcast fan-out for one tick.
    pub fn heartbeat_targets(&self) -> Vec<NodeId> {
        self.peers.keys().cloned().collect()
    }

    pub fn record_heartbeat(&mut self, from: &NodeId, now: SimTime) -> HeartbeatOutcome {
        let Some(rec) = self.peers.get_mut(from) else {
            return HeartbeatOutcome::UnknownSender;
        };
        rec.last_seen = now;
        if rec.status == PeerStatus::Dead {
            rec.status = PeerStatus::Alive;
            rec.left_cleanly = false;
            self.epoch += 1;
            HeartbeatOutcome::Rejoined
        } else {
            rec.status = PeerStatus::Alive;
            HeartbeatOutcome::Refreshed
        }
    }

    pub fn evaluate_peers(&mut self, now: SimTime) -> Evaluation {
        let mut out = Evaluation::default();
        for rec in self.peers.values_mut() {
            if rec.status == PeerStatus::Dead {
                continue;
            }
            let silence = now.saturating_sub(rec.last_seen);
            if silence > self.config.deadtime {
                rec.status = PeerStatus::Dead;
                self.epoch += 1;
                out.newly_dead.push(rec.peer.clone());
            } else if silence > self.config.warntime && rec.status == PeerStatus::Alive {
                rec.status = PeerStatus::Warned;
                out.newly_warned.push(rec.peer.clone());
            }
        }
        out
    }

    /// Graceful leave: the peer told us it is going away. Returns whether
    /// the view changed.
    pub fn mark_left(&mut self, peer: &NodeId) -> bool {
        match self.peers.get_mut(peer) {
            Some(rec) if rec.status != PeerStatus::Dead => {
                rec.status = PeerStatus::Dead;
                rec.left_cleanly = true;
                self.epoch += 1;
                true
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoQuorumPolicy {
    Stop,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuorumVerdict {
    Proceed,
    StopAll,
}

/// Strict majority of configured nodes, else the policy decides.
pub fn has_quorum(alive: usize, total: usize, policy: NoQuorumPolicy) -> QuorumVerdict {
    if alive * 2 > total {
        return QuorumVerdict::Proceed;
    }
    match policy {
        NoQuorumPolicy::Stop => QuorumVerdict::StopAll,
        NoQuorumPolicy::Ignore => QuorumVerdict::Proceed,
    }
}
