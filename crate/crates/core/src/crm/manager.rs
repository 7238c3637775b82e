use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use super::{Cib, ResourceKind, ResourceSpec, Score, TargetRole};
use crate::engine::NodeId;
use crate::membership::QuorumVerdict;
use crate::time::SimTime;

/// Lifecycle of one resource instance on its host.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RunState {
    Stopped,
    Starting,
    Running,
    Stopping,
    Migrating,
    Failed,
}

impl RunState {
    /// The instance may be executing on its host.
    pub fn is_active(self) -> bool {
        !matches!(self, RunState::Stopped)
    }

    pub fn is_transitional(self) -> bool {
        matches!(self, RunState::Starting | RunState::Stopping | RunState::Migrating)
    }
}

/// Last known location of every instance the planner has heard of.
pub type Locations = BTreeMap<String, (NodeId, RunState)>;
pub type FailCounts = BTreeMap<(String, NodeId), u32>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Fence { target: NodeId },
    Stop { rsc: String, node: NodeId },
    Start { rsc: String, node: NodeId },
    Migrate { rsc: String, from: NodeId, to: NodeId },
}

impl Action {
    /// Fence, then stop, then start/migrate.
    pub fn phase(&self) -> u8 {
        match self {
            Action::Fence { .. } => 0,
            Action::Stop { .. } => 1,
            Action::Start { .. } | Action::Migrate { .. } => 2,
        }
    }

    pub fn resource(&self) -> Option<&str> {
        match self {
            Action::Fence { .. } => None,
            Action::Stop { rsc, .. } | Action::Start { rsc, .. } | Action::Migrate { rsc, .. } => Some(rsc),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Fence { target } => write!(f, "fence {target}"),
            Action::Stop { rsc, node } => write!(f, "stop {rsc} {node}"),
            Action::Start { rsc, node } => write!(f, "start {rsc} {node}"),
            Action::Migrate { rsc, from, to } => write!(f, "migrate {rsc} {from}->{to}"),
        }
    }
}

/// Instance ids and the CIB resource each belongs to. Clones get one
/// instance per configured node slot (`id:0`, `id:1`, ...).
pub fn instances(cib: &Cib, nodes: usize) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for (i, r) in cib.resources.iter().enumerate() {
        match r.kind {
            ResourceKind::Primitive => out.push((r.id.clone(), i)),
            ResourceKind::Clone { clone_node_max } => {
                for k in 0..nodes * clone_node_max as usize {
                    out.push((format!("{}:{k}", r.id), i));
                }
            }
        }
    }
    out
}

/// Everything the DC knows when it plans.
#[derive(Debug, Clone)]
pub struct PlanInput<'a> {
    pub cib: &'a Cib,
    pub all_nodes: &'a [NodeId],
    pub members: &'a BTreeSet<NodeId>,
    /// Left the view without saying goodbye and not yet fenced.
    pub unclean: &'a BTreeSet<NodeId>,
    pub shutting_down: &'a BTreeSet<NodeId>,
    /// Nodes whose replicated device is Primary and can host guests.
    pub ready: &'a BTreeSet<NodeId>,
    pub locations: &'a Locations,
    pub fail_counts: &'a FailCounts,
    pub quorum: QuorumVerdict,
}

impl PlanInput<'_> {
    fn active_at(&self, inst: &str) -> Option<(&NodeId, RunState)> {
        self.locations.get(inst).filter(|(_, s)| s.is_active()).map(|(n, s)| (n, *s))
    }
}

/// Score of running `inst` (of `spec`) on `node`.
pub fn score(spec: &ResourceSpec, inst: &str, node: &NodeId, input: &PlanInput) -> Score {
    if !input.members.contains(node) || input.shutting_down.contains(node) {
        return Score::MinusInfinity;
    }
    if spec.is_vm() && !input.ready.contains(node) {
        return Score::MinusInfinity;
    }
    let props = &input.cib.properties;
    let mut s = match spec.location.get(node) {
        Some(p) => *p,
        None if props.symmetric_cluster => Score::ZERO,
        None => Score::MinusInfinity,
    };
    if matches!(input.locations.get(inst), Some((n, st)) if n == node && st.is_active() && *st != RunState::Failed) {
        s = s + props.default_resource_stickiness;
    }
    let fails = input.fail_counts.get(&(inst.to_string(), node.clone())).copied().unwrap_or(0);
    s + props.default_resource_failure_stickiness.times(fails)
}

/// Highest score above `-INFINITY`; ties go to the lowest node id.
pub fn choose(scores: &[(NodeId, Score)]) -> Option<NodeId> {
    let mut sorted: Vec<&(NodeId, Score)> = scores.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut best: Option<&(NodeId, Score)> = None;
    for cand in sorted {
        if cand.1 == Score::MinusInfinity {
            continue;
        }
        if best.is_none_or(|b| cand.1 > b.1) {
            best = Some(cand);
        }
    }
    best.map(|b| b.0.clone())
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Plan {
    pub actions: Vec<Action>,
    /// Why parts of the desired state could not be planned.
    pub blocked: Vec<String>,
}

impl Plan {
    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Policy engine: desired state from scores, then the ordered action list
/// (fence, stop, start) that reaches it safely.
pub fn compute_transition(input: &PlanInput) -> Plan {
    let mut plan = Plan::default();
    let cib = input.cib;
    let insts = instances(cib, input.all_nodes.len());

    if input.quorum == QuorumVerdict::StopAll {
        for (inst, _) in &insts {
            if let Some((node, st)) = input.active_at(inst) {
                if input.members.contains(node) && !st.is_transitional() {
                    plan.actions.push(Action::Stop { rsc: inst.clone(), node: node.clone() });
                }
            }
        }
        plan.blocked.push("no quorum: stopping all resources".into());
        return plan;
    }

    // Unclean nodes that can be fenced by a running device elsewhere.
    let mut fenceable = BTreeSet::new();
    if cib.properties.stonith_enabled {
        for target in input.unclean {
            let device = insts.iter().any(|(inst, parent)| {
                let spec = &cib.resources[*parent];
                let dev = spec.fence_device(cib.properties.stonith_action);
                matches!(input.locations.get(inst), Some((host, RunState::Running))
                    if host != target && input.members.contains(host))
                    && dev.is_some_and(|d| d.covers(target))
            });
            if device {
                fenceable.insert(target.clone());
                plan.actions.push(Action::Fence { target: target.clone() });
            } else {
                plan.blocked.push(format!("no fence device for {target}"));
            }
        }
    } else {
        fenceable.extend(input.unclean.iter().cloned());
    }

    // Clone instances: keep the ones on healthy members, fill members
    // lacking one.
    for (parent_idx, spec) in cib.resources.iter().enumerate() {
        let ResourceKind::Clone { clone_node_max } = spec.kind else { continue };
        let mine: Vec<&String> = insts.iter().filter(|(_, p)| *p == parent_idx).map(|(i, _)| i).collect();
        let mut per_node: BTreeMap<NodeId, u32> = BTreeMap::new();
        let mut free = Vec::new();
        for inst in &mine {
            match input.active_at(inst) {
                Some((node, st)) if input.members.contains(node) => {
                    let keep = spec.target_role == TargetRole::Started
                        && !input.shutting_down.contains(node)
                        && st != RunState::Failed;
                    if keep || st.is_transitional() {
                        *per_node.entry(node.clone()).or_default() += 1;
                    } else {
                        plan.actions.push(Action::Stop { rsc: (*inst).clone(), node: node.clone() });
                    }
                }
                Some((node, _)) if input.unclean.contains(node) => {}
                _ => free.push(*inst),
            }
        }
        if spec.target_role == TargetRole::Started {
            let mut free = free.into_iter();
            for node in input.all_nodes {
                let eligible = input.members.contains(node) && !input.shutting_down.contains(node);
                if !eligible {
                    continue;
                }
                while per_node.get(node).copied().unwrap_or(0) < clone_node_max {
                    let Some(inst) = free.next() else { break };
                    *per_node.entry(node.clone()).or_default() += 1;
                    plan.actions.push(Action::Start { rsc: inst.clone(), node: node.clone() });
                }
            }
        }
    }

    for (inst, parent) in &insts {
        let spec = &cib.resources[*parent];
        if spec.kind != ResourceKind::Primitive {
            continue;
        }
        let known = input.active_at(inst);
        if known.is_some_and(|(_, st)| st.is_transitional()) {
            continue;
        }
        let (current, failed) = match known {
            Some((n, st)) if input.members.contains(n) => (Some(n.clone()), st == RunState::Failed),
            Some((n, _)) if input.unclean.contains(n) => {
                if !fenceable.contains(n) {
                    plan.blocked.push(format!("{inst} waits for fencing of {n}"));
                    continue;
                }
                (None, false)
            }
            _ => (None, false),
        };
        let target = if spec.target_role == TargetRole::Started {
            let scores: Vec<(NodeId, Score)> =
                input.all_nodes.iter().map(|n| (n.clone(), score(spec, inst, n, input))).collect();
            choose(&scores)
        } else {
            None
        };
        match (current, target) {
            (Some(c), Some(t)) if c == t && !failed => {}
            (Some(c), Some(t)) if spec.allow_migrate && !failed => {
                plan.actions.push(Action::Migrate { rsc: inst.clone(), from: c, to: t })
            }
            (Some(c), t) => {
                plan.actions.push(Action::Stop { rsc: inst.clone(), node: c });
                if let Some(t) = t {
                    plan.actions.push(Action::Start { rsc: inst.clone(), node: t });
                }
            }
            (None, Some(t)) => plan.actions.push(Action::Start { rsc: inst.clone(), node: t }),
            (None, None) => {}
        }
    }
    plan.actions.sort_by_key(Action::phase);
    plan
}

/// Executes one plan phase by phase. Actions of a phase run in parallel;
/// the next phase starts only when every action of the current one
/// succeeded.
#[derive(Debug, Clone)]
pub struct Transition {
    pub id: u64,
    pub actions: Vec<Action>,
    phase: u8,
    pending: BTreeSet<usize>,
    results: BTreeMap<usize, bool>,
    pub abort_requested: bool,
    pub last_progress: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransitionState {
    Running,
    /// Every action succeeded.
    Complete,
    /// Something failed or an abort was requested; nothing is in flight.
    Stopped,
    /// Something failed but other actions are still in flight.
    Draining,
}

impl Transition {
    pub fn new(id: u64, actions: Vec<Action>, now: SimTime) -> Self {
        Transition {
            id,
            actions,
            phase: 0,
            pending: BTreeSet::new(),
            results: BTreeMap::new(),
            abort_requested: false,
            last_progress: now,
        }
    }

    fn any_failed(&self) -> bool {
        self.results.values().any(|ok| !ok)
    }

    /// Actions to dispatch now, with their indices.
    pub fn next_batch(&mut self, now: SimTime) -> Vec<(usize, Action)> {
        if !self.pending.is_empty() || self.abort_requested || self.any_failed() {
            return Vec::new();
        }
        while self.phase <= 2 {
            let batch: Vec<(usize, Action)> = self
                .actions
                .iter()
                .enumerate()
                .filter(|(i, a)| a.phase() == self.phase && !self.results.contains_key(i))
                .map(|(i, a)| (i, a.clone()))
                .collect();
            if batch.is_empty() {
                self.phase += 1;
                continue;
            }
            self.pending.extend(batch.iter().map(|(i, _)| *i));
            self.last_progress = now;
            return batch;
        }
        Vec::new()
    }

    pub fn complete(&mut self, idx: usize, ok: bool, now: SimTime) {
        if self.pending.remove(&idx) {
            self.results.insert(idx, ok);
            if ok {
                self.last_progress = now;
            }
        }
    }

    pub fn is_pending(&self, idx: usize) -> bool {
        self.pending.contains(&idx)
    }

    pub fn state(&self) -> TransitionState {
        let stopping = self.abort_requested || self.any_failed();
        match (stopping, self.pending.is_empty()) {
            (true, true) => TransitionState::Stopped,
            (true, false) => TransitionState::Draining,
            (false, _) if self.results.len() == self.actions.len() => TransitionState::Complete,
            _ => TransitionState::Running,
        }
    }

    pub fn succeeded(&self) -> impl Iterator<Item = &Action> {
        self.results.iter().filter(|(_, ok)| **ok).map(|(i, _)| &self.actions[*i])
    }
}

#[cfg(test)]
#[path = "manager_tests.rs"]
mod tests;
