//! STONITH devices: forcibly power-cycle a node before its resources are
//! taken over elsewhere.

use std::fmt;

use crate::engine::{NodeId, Power};
use crate::time::SimTime;

pub const DEFAULT_COMMAND_LATENCY: SimTime = SimTime(500);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FenceKind {
    /// `external/ssh`: asks the target to reboot itself over the network.
    SshReset,
    /// Remote power switch; works whatever state the target is in.
    PowerSwitch,
}

impl FenceKind {
    /// Maps a CIB `type` attribute to a device kind.
    pub fn from_agent_type(t: &str) -> Option<FenceKind> {
        match t {
            "external/ssh" | "ssh" => Some(FenceKind::SshReset),
            "power-switch" | "external/power-switch" => Some(FenceKind::PowerSwitch),
            _ => None,
        }
    }
}

impl fmt::Display for FenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FenceKind::SshReset => "SshReset",
            FenceKind::PowerSwitch => "PowerSwitch",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum StonithAction {
    #[default]
    Reboot,
    Off,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FenceDevice {
    pub kind: FenceKind,
    pub hostlist: Vec<NodeId>,
    pub action: StonithAction,
    pub op_timeout: SimTime,
    pub command_latency: SimTime,
}

impl FenceDevice {
    pub fn validate(&self) -> Result<(), String> {
        if self.hostlist.is_empty() {
            return Err("fence device hostlist is empty".into());
        }
        if self.op_timeout == SimTime::ZERO {
            return Err("fence op timeout must be positive".into());
        }
        Ok(())
    }

    pub fn covers(&self, node: &NodeId) -> bool {
        self.hostlist.contains(node)
    }
}

/// What the requester can observe about the target when the command runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TargetView {
    pub power: Power,
    /// Requester has an Up link to the target.
    pub reachable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FenceOutcome {
    /// Completes at `at`; the target's power then becomes `power`.
    Succeeded { at: SimTime, power: FencedPower },
    Failed { at: SimTime, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FencedPower {
    Reboot,
    Off,
}

impl FenceOutcome {
    pub fn at(&self) -> SimTime {
        match self {
            FenceOutcome::Succeeded { at, .. } | FenceOutcome::Failed { at, .. } => *at,
        }
    }

    pub fn succeeded(&self) -> bool {
        matches!(self, FenceOutcome::Succeeded { .. })
    }
}

/// Decides how a fence request issued at `now` ends.
pub fn fence(device: &FenceDevice, target: &NodeId, view: TargetView, now: SimTime) -> FenceOutcome {
    if !device.covers(target) {
        return FenceOutcome::Failed { at: now, reason: "unknown target".into() };
    }
    let power = match device.action {
        StonithAction::Reboot => FencedPower::Reboot,
        StonithAction::Off => FencedPower::Off,
    };
    match device.kind {
        FenceKind::PowerSwitch => FenceOutcome::Succeeded { at: now + device.command_latency, power },
        FenceKind::SshReset => {
            if view.reachable && view.power == Power::Running {
                FenceOutcome::Succeeded { at: now + device.command_latency, power }
            } else {
                FenceOutcome::Failed { at: now + device.op_timeout, reason: "unreachable".into() }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev(kind: FenceKind) -> FenceDevice {
        FenceDevice {
            kind,
            hostlist: vec![NodeId::from("node1"), NodeId::from("node2")],
            action: StonithAction::Reboot,
            op_timeout: SimTime::from_secs(20),
            command_latency: DEFAULT_COMMAND_LATENCY,
        }
    }

    const UP: TargetView = TargetView { power: Power::Running, reachable: true };
    const OFF: TargetView = TargetView { power: Power::PoweredOff, reachable: true };

    #[test]
    fn ssh_reaches_silent_live_node() {
        let out = fence(&dev(FenceKind::SshReset), &NodeId::from("node1"), UP, SimTime(1000));
        assert_eq!(out, FenceOutcome::Succeeded { at: SimTime(1500), power: FencedPower::Reboot });
    }

    #[test]
    fn ssh_cannot_kill_pulled_cord_or_partitioned() {
        let n = NodeId::from("node1");
        let out = fence(&dev(FenceKind::SshReset), &n, OFF, SimTime(0));
        assert_eq!(out, FenceOutcome::Failed { at: SimTime::from_secs(20), reason: "unreachable".into() });
        let cut = TargetView { power: Power::Running, reachable: false };
        assert!(!fence(&dev(FenceKind::SshReset), &n, cut, SimTime(0)).succeeded());
    }

    #[test]
    fn power_switch_always_works() {
        for view in [UP, OFF, TargetView { power: Power::Running, reachable: false }] {
            assert!(fence(&dev(FenceKind::PowerSwitch), &NodeId::from("node2"), view, SimTime(0)).succeeded());
        }
    }

    #[test]
    fn unknown_target_fails_at_once() {
        let out = fence(&dev(FenceKind::PowerSwitch), &NodeId::from("node9"), UP, SimTime(7));
        assert_eq!(out, FenceOutcome::Failed { at: SimTime(7), reason: "unknown target".into() });
    }

    #[test]
    fn kinds_from_cib_type() {
        assert_eq!(FenceKind::from_agent_type("external/ssh"), Some(FenceKind::SshReset));
        assert_eq!(FenceKind::from_agent_type("power-switch"), Some(FenceKind::PowerSwitch));
        assert_eq!(FenceKind::from_agent_type("ipmi"), None);
    }
}
