//! Per-node cluster resource manager: the DC probes, plans and executes
//! transitions, and completion events feed back into it.

use std::collections::BTreeSet;

use super::{Cluster, ClusterError, Crm, Ev, Placed, CLONE_MONITOR, VM_MONITOR};
use crate::block::Role;
use crate::crm::{compute_transition, Action, PlanInput, RunState, Transition, TransitionState};
use crate::engine::{NodeId, Power};
use crate::fencing::{fence, FenceOutcome, FencedPower, TargetView};
use crate::membership::{has_quorum, QuorumVerdict};
use crate::time::SimTime;

/// Replans per DC per event before yielding; a safety net against plans
/// that fail instantly forever.
const MAX_ROUNDS: usize = 8;

impl Cluster {
    pub(super) fn kick(&mut self) -> Result<(), ClusterError> {
        self.finish_shutdowns()?;
        let mut rounds = 0;
        while self.dirty && rounds < MAX_ROUNDS {
            self.dirty = false;
            rounds += 1;
            for dc in self.dcs() {
                self.drive(&dc)?;
            }
            self.finish_shutdowns()?;
        }
        Ok(())
    }

    /// Nodes that consider themselves DC: lowest id of their own view.
    fn dcs(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| self.eng.is_running(n) && self.rt[*n].stack_up && self.rt[*n].joined)
            .filter(|n| self.view(n).iter().next() == Some(*n))
            .cloned()
            .collect()
    }

    fn crm(&mut self, dc: &NodeId) -> &mut Crm {
        &mut self.rt.get_mut(dc).expect("declared node").crm
    }

    fn drive(&mut self, dc: &NodeId) -> Result<(), ClusterError> {
        for _ in 0..MAX_ROUNDS {
            let now = self.eng.now();
            let state = self.crm(dc).transition.as_ref().map(|t| t.state());
            match state {
                Some(TransitionState::Running) => {
                    let t = self.crm(dc).transition.as_mut().expect("running");
                    let tid = t.id;
                    let batch = t.next_batch(now);
                    if batch.is_empty() {
                        return Ok(());
                    }
                    for (idx, action) in batch {
                        self.dispatch(dc, tid, idx, action)?;
                    }
                }
                Some(TransitionState::Complete) => {
                    let t = self.crm(dc).transition.take().expect("complete");
                    self.summarize(dc, &t);
                }
                Some(TransitionState::Stopped) => {
                    let t = self.crm(dc).transition.take().expect("stopped");
                    let fence_failed = !t.abort_requested
                        && t.actions
                            .iter()
                            .filter(|a| matches!(a, Action::Fence { .. }))
                            .any(|a| !t.succeeded().any(|s| s == a));
                    self.eng.log(Some(dc), "crm", "transition-stopped", t.id.to_string());
                    if fence_failed {
                        let retry = t.last_progress + self.cib.properties.transition_idle_timeout;
                        let retry = retry.max(now + SimTime(1));
                        self.crm(dc).retry_at = retry;
                        self.eng.schedule_timer(dc, retry, Ev::CrmRetry)?;
                        return Ok(());
                    }
                }
                Some(TransitionState::Draining) => return Ok(()),
                None => {
                    if now < self.crm(dc).retry_at {
                        return Ok(());
                    }
                    if !self.plan(dc)? {
                        return Ok(());
                    }
                }
            }
        }
        self.dirty = true;
        Ok(())
    }

    /// Refreshes the DC's picture of its members.
    fn probe(&mut self, dc: &NodeId, members: &BTreeSet<NodeId>) {
        let mut fails = self.crm(dc).fail_counts.clone();
        for m in members {
            if m != dc && self.rt[m].stack_up {
                for (k, v) in &self.rt[m].crm.fail_counts {
                    let e = fails.entry(k.clone()).or_insert(0);
                    *e = (*e).max(*v);
                }
            }
        }
        let mut locs = self.crm(dc).locations.clone();
        for (inst, _) in &self.insts {
            let here = self.actual.get(inst).and_then(|m| {
                m.iter().find(|(n, c)| members.contains(*n) && c.state.is_active()).map(|(n, c)| (n.clone(), c.state))
            });
            match here {
                Some(loc) => {
                    locs.insert(inst.clone(), loc);
                }
                None => {
                    if locs.get(inst).is_some_and(|(n, _)| members.contains(n)) {
                        locs.remove(inst);
                    }
                }
            }
        }
        let crm = self.crm(dc);
        crm.fail_counts = fails;
        crm.locations = locs;
    }

    /// Computes and starts a new transition. Returns whether one started.
    fn plan(&mut self, dc: &NodeId) -> Result<bool, ClusterError> {
        let now = self.eng.now();
        let members = self.view(dc);
        self.probe(dc, &members);
        let ready: BTreeSet<NodeId> = members
            .iter()
            .filter(|n| self.dev.side(n).is_some_and(|s| s.up && s.role == Role::Primary))
            .cloned()
            .collect();
        let shutting: BTreeSet<NodeId> = members.iter().filter(|n| self.rt[*n].shutting_down).cloned().collect();
        let quorum = has_quorum(members.len(), self.nodes.len(), self.cib.properties.no_quorum_policy);
        let crm = &self.rt[dc].crm;
        let input = PlanInput {
            cib: &self.cib,
            all_nodes: &self.nodes,
            members: &members,
            unclean: &crm.unclean,
            shutting_down: &shutting,
            ready: &ready,
            locations: &crm.locations,
            fail_counts: &crm.fail_counts,
            quorum,
        };
        let plan = compute_transition(&input);
        let lost = quorum == QuorumVerdict::StopAll;
        if lost != self.crm(dc).quorum_lost {
            self.crm(dc).quorum_lost = lost;
            let kind = if lost { "quorum-lost" } else { "quorum-regained" };
            self.eng.log(Some(dc), "crm", kind, format!("{}/{}", members.len(), self.nodes.len()));
        }
        if plan.blocked != self.crm(dc).last_blocked {
            for b in &plan.blocked {
                self.eng.log(Some(dc), "crm", "blocked", b.clone());
            }
            self.crm(dc).last_blocked = plan.blocked.clone();
        }
        if plan.is_empty() {
            let idle = self.placement_line();
            if idle != self.crm(dc).last_idle {
                self.eng.log(Some(dc), "crm", "idle", idle.clone());
                self.crm(dc).last_idle = idle;
            }
            return Ok(false);
        }
        let tid = self.next_tid;
        self.next_tid += 1;
        let list: Vec<String> = plan.actions.iter().map(|a| a.to_string()).collect();
        self.eng.log(Some(dc), "crm", "transition", format!("{tid}: {}", list.join(", ")));
        self.crm(dc).transition = Some(Transition::new(tid, plan.actions, now));
        self.crm(dc).last_idle.clear();
        Ok(true)
    }

    /// `vm1=node1 vm2=node1 ...` over running guests.
    fn placement_line(&self) -> String {
        let mut parts = Vec::new();
        for r in self.cib.resources.iter().filter(|r| r.is_vm()) {
            let on = self.running_on(&r.id).map(|n| n.to_string()).unwrap_or_else(|| "-".into());
            parts.push(format!("{}={on}", r.id));
        }
        parts.join(" ")
    }

    /// Per-node guest groups of a finished transition, stops first.
    fn summarize(&mut self, dc: &NodeId, t: &Transition) {
        let mut stopped: Vec<(NodeId, Vec<String>)> = Vec::new();
        let mut started: Vec<(NodeId, Vec<String>)> = Vec::new();
        let push = |list: &mut Vec<(NodeId, Vec<String>)>, node: &NodeId, rsc: &str| {
            match list.iter_mut().find(|(n, _)| n == node) {
                Some((_, v)) => v.push(rsc.to_string()),
                None => list.push((node.clone(), vec![rsc.to_string()])),
            }
        };
        for a in t.succeeded() {
            let vm = a.resource().is_some_and(|r| self.cib.resource(r).is_some_and(|s| s.is_vm()));
            if !vm {
                continue;
            }
            match a {
                Action::Stop { rsc, node } => push(&mut stopped, node, rsc),
                Action::Start { rsc, node } => push(&mut started, node, rsc),
                Action::Migrate { rsc, from, to } => {
                    push(&mut stopped, from, rsc);
                    push(&mut started, to, rsc);
                }
                Action::Fence { .. } => {}
            }
        }
        stopped.sort();
        started.sort();
        for (n, mut v) in stopped {
            v.sort();
            self.eng.log(Some(dc), "crm", "stopped", format!("{n} {}", v.join(" ")));
        }
        for (n, mut v) in started {
            v.sort();
            self.eng.log(Some(dc), "crm", "started", format!("{n} {}", v.join(" ")));
        }
        self.dirty = true;
    }

    fn complete(&mut self, dc: &NodeId, tid: u64, idx: usize, ok: bool) {
        let now = self.eng.now();
        if let Some(t) = self.rt.get_mut(dc).and_then(|r| r.crm.transition.as_mut()) {
            if t.id == tid {
                t.complete(idx, ok, now);
            }
        }
        self.dirty = true;
    }

    fn dispatch(&mut self, dc: &NodeId, tid: u64, idx: usize, action: Action) -> Result<(), ClusterError> {
        let now = self.eng.now();
        self.eng.log(Some(dc), "crm", "dispatch", action.to_string());
        match action {
            Action::Fence { target } => self.dispatch_fence(dc, tid, idx, &target)?,
            Action::Start { rsc, node } => {
                let spec = self.spec_of(&rsc);
                if !self.eng.is_running(&node) {
                    self.complete(dc, tid, idx, false);
                    return Ok(());
                }
                let token = self.token();
                let slot = self.actual.entry(rsc.clone()).or_default();
                slot.insert(node.clone(), Placed { state: RunState::Starting, run_id: 0, op: token });
                self.eng.log(Some(&node), "crm", "start", format!("{rsc} {node}"));
                let at = now + spec.start_duration.min(spec.start_timeout);
                self.eng.schedule_global(at, Ev::OpDone { dc: dc.clone(), tid, idx, rsc, node, token })?;
            }
            Action::Stop { rsc, node } => {
                let spec = self.spec_of(&rsc);
                let token = self.token();
                let Some(c) = self.actual.get_mut(&rsc).and_then(|m| m.get_mut(&node)) else {
                    self.complete(dc, tid, idx, true);
                    return Ok(());
                };
                let was_running = c.state == RunState::Running;
                c.state = RunState::Stopping;
                c.op = token;
                self.eng.log(Some(&node), "crm", "stop", format!("{rsc} {node}"));
                if spec.is_vm() {
                    self.eng.log(Some(&node), "vm", "stopping", format!("{rsc} {node}"));
                }
                if was_running {
                    self.vm_event(&rsc, &node, false);
                }
                let at = now + spec.stop_duration.min(spec.stop_timeout);
                self.eng.schedule_global(at, Ev::OpDone { dc: dc.clone(), tid, idx, rsc, node, token })?;
            }
            Action::Migrate { rsc, from, to } => {
                let spec = self.spec_of(&rsc);
                let token = self.token();
                let Some(c) = self.actual.get_mut(&rsc).and_then(|m| m.get_mut(&from)) else {
                    self.complete(dc, tid, idx, false);
                    return Ok(());
                };
                c.state = RunState::Migrating;
                c.op = token;
                self.eng.log(Some(&from), "crm", "migrate", format!("{rsc} {from} {to}"));
                let at = now + spec.stop_duration;
                let ev = Ev::OpDone { dc: dc.clone(), tid, idx, rsc, node: to, token };
                self.eng.schedule_global(at, ev)?;
            }
        }
        Ok(())
    }

    fn dispatch_fence(&mut self, dc: &NodeId, tid: u64, idx: usize, target: &NodeId) -> Result<(), ClusterError> {
        let now = self.eng.now();
        let members = self.view(dc);
        let action = self.cib.properties.stonith_action;
        let mut chosen = None;
        let mut hosts: Vec<&NodeId> = members.iter().filter(|m| *m != target).collect();
        hosts.sort_by_key(|m| (*m != dc, (*m).clone()));
        'outer: for m in hosts {
            for (inst, ri) in &self.insts {
                let spec = &self.cib.resources[*ri];
                let Some(dev) = spec.fence_device(action) else { continue };
                let running = self.actual.get(inst).and_then(|x| x.get(m)).is_some_and(|c| c.state == RunState::Running);
                if running && dev.covers(target) {
                    chosen = Some((m.clone(), dev));
                    break 'outer;
                }
            }
        }
        let Some((host, dev)) = chosen else {
            self.eng.log(Some(dc), "stonith", "fence-failed", format!("{target} no running device"));
            self.complete(dc, tid, idx, false);
            return Ok(());
        };
        self.eng.log(Some(&host), "stonith", "fence", format!("{} {target}", dev.kind));
        let view = TargetView {
            power: self.eng.power(target).unwrap_or(Power::PoweredOff),
            reachable: self.eng.reachable(&host, target),
        };
        let out = fence(&dev, target, view, now);
        self.fence_requested.insert((tid, idx), now);
        let ev = match &out {
            FenceOutcome::Succeeded { power, .. } => Ev::FenceDone {
                dc: dc.clone(),
                tid,
                idx,
                target: target.clone(),
                ok: true,
                reason: String::new(),
                reboot: *power == FencedPower::Reboot,
            },
            FenceOutcome::Failed { reason, .. } => Ev::FenceDone {
                dc: dc.clone(),
                tid,
                idx,
                target: target.clone(),
                ok: false,
                reason: reason.clone(),
                reboot: false,
            },
        };
        self.eng.schedule_global(out.at(), ev)?;
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn fence_done(
        &mut self,
        dc: &NodeId,
        tid: u64,
        idx: usize,
        target: &NodeId,
        ok: bool,
        reason: &str,
        reboot: bool,
    ) -> Result<(), ClusterError> {
        let now = self.eng.now();
        let requested = self.fence_requested.remove(&(tid, idx)).unwrap_or(now);
        self.fences.push(super::FenceRecord {
            requested,
            done: now,
            by: dc.to_string(),
            target: target.to_string(),
            ok,
        });
        if ok {
            self.eng.log(Some(dc), "stonith", "fence-ok", target.to_string());
            let was_up = self.eng.is_running(target);
            if reboot {
                self.eng.reboot(target)?;
            } else {
                self.eng.set_power(target, Power::PoweredOff)?;
            }
            if was_up || self.rt[target].hb.is_some() {
                self.node_down(target);
            }
            for rt in self.rt.values_mut() {
                if rt.stack_up {
                    rt.crm.unclean.remove(target);
                    rt.crm.locations.retain(|_, (n, _)| n != target);
                }
            }
        } else {
            self.eng.log(Some(dc), "stonith", "fence-failed", format!("{target} {reason}"));
        }
        self.complete(dc, tid, idx, ok);
        Ok(())
    }

    pub(super) fn op_done(
        &mut self,
        dc: &NodeId,
        tid: u64,
        idx: usize,
        rsc: &str,
        node: &NodeId,
        token: u64,
    ) -> Result<(), ClusterError> {
        let now = self.eng.now();
        let spec = self.spec_of(rsc);
        let is_vm = spec.is_vm();
        // Migrations carry the destination; the copy sits on the source.
        let holder =
            self.actual.get(rsc).and_then(|m| m.iter().find(|(_, c)| c.op == token).map(|(n, c)| (n.clone(), c.state)));
        let Some((at, state)) = holder else {
            self.complete(dc, tid, idx, false);
            return Ok(());
        };
        let mut ok = true;
        match state {
            RunState::Starting => {
                if spec.start_duration > spec.start_timeout {
                    ok = false;
                    self.set_state(rsc, &at, RunState::Failed);
                    self.eng.log(Some(&at), "vm", "failed", format!("{rsc} {at} start-timeout"));
                    self.bump_fail(rsc, &at);
                } else {
                    self.became_running(rsc, &at, now)?;
                }
            }
            RunState::Stopping => {
                if spec.stop_duration > spec.stop_timeout {
                    ok = false;
                    self.set_state(rsc, &at, RunState::Failed);
                    self.bump_fail(rsc, &at);
                } else {
                    self.actual.get_mut(rsc).expect("held").remove(&at);
                    if is_vm {
                        self.eng.log(Some(&at), "vm", "stopped", format!("{rsc} {at}"));
                    }
                }
            }
            RunState::Migrating => {
                self.actual.get_mut(rsc).expect("held").remove(&at);
                self.eng.log(Some(&at), "vm", "migrated", format!("{rsc} {at} {node}"));
                self.vm_event(rsc, &at, false);
                if self.eng.is_running(node) {
                    let token = self.token();
                    self.actual.get_mut(rsc).expect("held").insert(
                        node.clone(),
                        Placed { state: RunState::Starting, run_id: 0, op: token },
                    );
                    self.became_running(rsc, node, now)?;
                } else {
                    ok = false;
                }
            }
            _ => ok = false,
        }
        self.complete(dc, tid, idx, ok);
        Ok(())
    }

    fn became_running(&mut self, rsc: &str, node: &NodeId, now: SimTime) -> Result<(), ClusterError> {
        let spec = self.spec_of(rsc);
        let run_id = self.token();
        if let Some(c) = self.actual.get_mut(rsc).and_then(|m| m.get_mut(node)) {
            c.state = RunState::Running;
            c.run_id = run_id;
        }
        if spec.is_vm() {
            self.eng.log(Some(node), "vm", "running", format!("{rsc} {node}"));
            self.vm_event(rsc, node, true);
        }
        // Anonymous clone instances may be numbered alike on both sides of
        // a partition; only primitives are single-instance.
        let copies = self.actual[rsc].values().filter(|c| c.state == RunState::Running).count();
        if copies > 1 && spec.kind == crate::crm::ResourceKind::Primitive {
            self.violation(format!("single-instance: {rsc} running on {copies} nodes"));
        }
        let every = spec.monitor.map(|m| m.interval).unwrap_or(if spec.is_vm() { VM_MONITOR } else { CLONE_MONITOR });
        self.eng.schedule_timer(node, now + every, Ev::Monitor { rsc: rsc.to_string(), run_id })?;
        Ok(())
    }

    pub(super) fn monitor(&mut self, node: &NodeId, rsc: &str, run_id: u64) -> Result<(), ClusterError> {
        let now = self.eng.now();
        let Some(c) = self.actual.get(rsc).and_then(|m| m.get(node)) else { return Ok(()) };
        if c.run_id != run_id {
            return Ok(());
        }
        match c.state {
            RunState::Running => {
                let spec = self.spec_of(rsc);
                let every =
                    spec.monitor.map(|m| m.interval).unwrap_or(if spec.is_vm() { VM_MONITOR } else { CLONE_MONITOR });
                self.eng.log(Some(node), "crm", "monitor", format!("{rsc} {node} ok"));
                self.eng.schedule_timer(node, now + every, Ev::Monitor { rsc: rsc.to_string(), run_id })?;
            }
            RunState::Failed => {
                self.eng.log(Some(node), "crm", "monitor-failed", format!("{rsc} {node}"));
                self.bump_fail(rsc, node);
            }
            _ => {}
        }
        Ok(())
    }

    /// Records a failure of `rsc` on `node` with every CRM that can see it.
    fn bump_fail(&mut self, rsc: &str, node: &NodeId) {
        let observers: Vec<NodeId> = self.nodes.iter().filter(|n| self.view(n).contains(node)).cloned().collect();
        for o in observers {
            let crm = self.crm(&o);
            *crm.fail_counts.entry((rsc.to_string(), node.clone())).or_insert(0) += 1;
            crm.locations.insert(rsc.to_string(), (node.clone(), RunState::Failed));
        }
        self.dirty = true;
    }

    fn set_state(&mut self, rsc: &str, node: &NodeId, state: RunState) {
        if let Some(c) = self.actual.get_mut(rsc).and_then(|m| m.get_mut(node)) {
            c.state = state;
        }
    }

    fn spec_of(&self, inst: &str) -> crate::crm::ResourceSpec {
        let (_, ri) = self.insts.iter().find(|(i, _)| i == inst).expect("planned instance");
        self.cib.resources[*ri].clone()
    }

    fn token(&mut self) -> u64 {
        let t = self.next_token;
        self.next_token += 1;
        t
    }
}
