use std::collections::{BTreeMap, BTreeSet};

use roxmltree::{Document, Node};
use thiserror::Error;

use super::Score;
use crate::engine::NodeId;
use crate::fencing::{FenceDevice, FenceKind, StonithAction, DEFAULT_COMMAND_LATENCY};
use crate::membership::NoQuorumPolicy;
use crate::time::{parse_duration, BareUnit, SimTime};

pub const DEFAULT_BOOT_DURATION: SimTime = SimTime(20_000);
pub const DEFAULT_STOP_DURATION: SimTime = SimTime(5_000);
/// Fence-device instances come up almost at once.
pub const FENCE_START_DURATION: SimTime = SimTime(1_000);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CibError {
    #[error("XML error: {0}")]
    Xml(String),
    #[error("duplicate resource id {0:?}")]
    DuplicateId(String),
    #[error("resource {id:?}: unknown agent {agent:?}")]
    UnknownAgent { id: String, agent: String },
    #[error("resource {id:?}: bad op {op:?}: {msg}")]
    BadOp { id: String, op: String, msg: String },
    #[error("bad value for {name:?}: {value:?}")]
    BadValue { name: String, value: String },
    #[error("location constraint for unknown resource {0:?}")]
    UnknownResource(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterProperties {
    pub transition_idle_timeout: SimTime,
    pub default_resource_stickiness: Score,
    pub default_resource_failure_stickiness: Score,
    pub stonith_enabled: bool,
    pub stonith_action: StonithAction,
    pub symmetric_cluster: bool,
    pub no_quorum_policy: NoQuorumPolicy,
    pub stop_orphan_resources: bool,
    pub stop_orphan_actions: bool,
    pub is_managed_default: bool,
}

impl Default for ClusterProperties {
    fn default() -> Self {
        ClusterProperties {
            transition_idle_timeout: SimTime::from_secs(60),
            default_resource_stickiness: Score::ZERO,
            default_resource_failure_stickiness: Score::ZERO,
            stonith_enabled: false,
            stonith_action: StonithAction::Reboot,
            symmetric_cluster: true,
            no_quorum_policy: NoQuorumPolicy::Stop,
            stop_orphan_resources: true,
            stop_orphan_actions: true,
            is_managed_default: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResourceKind {
    Primitive,
    Clone { clone_node_max: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Agent {
    GuestVm { config_path: Option<String> },
    FenceDevice { kind: FenceKind, hostlist: Vec<NodeId> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpSpec {
    pub interval: SimTime,
    pub timeout: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TargetRole {
    #[default]
    Started,
    Stopped,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResourceSpec {
    pub id: String,
    pub kind: ResourceKind,
    pub agent: Agent,
    pub monitor: Option<OpSpec>,
    pub start_timeout: SimTime,
    pub stop_timeout: SimTime,
    pub target_role: TargetRole,
    pub allow_migrate: bool,
    pub location: BTreeMap<NodeId, Score>,
    /// How long the agent's start/stop take in simulation.
    pub start_duration: SimTime,
    pub stop_duration: SimTime,
}

impl ResourceSpec {
    pub fn is_vm(&self) -> bool {
        matches!(self.agent, Agent::GuestVm { .. })
    }

    pub fn preference(&self, node: &NodeId) -> Score {
        self.location.get(node).copied().unwrap_or(Score::ZERO)
    }

    /// Fencing parameters when this resource is a STONITH device.
    pub fn fence_device(&self, action: StonithAction) -> Option<FenceDevice> {
        match &self.agent {
            Agent::FenceDevice { kind, hostlist } => Some(FenceDevice {
                kind: *kind,
                hostlist: hostlist.clone(),
                action,
                op_timeout: self.start_timeout,
                command_latency: DEFAULT_COMMAND_LATENCY,
            }),
            Agent::GuestVm { .. } => None,
        }
    }
}

/// Merged configuration of one or more CIB documents.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Cib {
    pub properties: ClusterProperties,
    pub resources: Vec<ResourceSpec>,
    /// Attributes the simulator does not interpret, kept for the trace.
    pub ignored: Vec<String>,
}

impl Cib {
    /// Parses and merges the given XML documents in order.
    pub fn load<S: AsRef<str>>(docs: &[S]) -> Result<Cib, CibError> {
        let mut cib = Cib::default();
        let mut locations = Vec::new();
        for text in docs {
            let doc = Document::parse(text.as_ref()).map_err(|e| CibError::Xml(e.to_string()))?;
            cib.walk(doc.root_element(), &mut locations)?;
        }
        let mut seen = BTreeSet::new();
        for r in &cib.resources {
            if !seen.insert(r.id.clone()) {
                return Err(CibError::DuplicateId(r.id.clone()));
            }
        }
        for (rsc, node, score) in locations {
            let r = cib.resources.iter_mut().find(|r| r.id == rsc).ok_or(CibError::UnknownResource(rsc))?;
            r.location.insert(node, score);
        }
        Ok(cib)
    }

    pub fn resource(&self, id: &str) -> Option<&ResourceSpec> {
        self.resources.iter().find(|r| r.id == id)
    }

    fn walk(&mut self, node: Node, locations: &mut Vec<(String, NodeId, Score)>) -> Result<(), CibError> {
        match node.tag_name().name() {
            "cluster_property_set" => {
                for (name, value) in nvpairs(node) {
                    self.set_property(&name, &value)?;
                }
            }
            "primitive" => {
                let r = parse_primitive(node, ResourceKind::Primitive, &mut self.ignored)?;
                self.resources.push(r);
            }
            "clone" => {
                let mut max = 1;
                for child in node.children().filter(|c| is(c, "instance_attributes") || is(c, "meta_attributes")) {
                    for (name, value) in nvpairs(child) {
                        match name.as_str() {
                            "clone_node_max" | "clone-node-max" => max = parse_u32(&name, &value)?,
                            _ => self.ignored.push(format!("clone {}: {name}={value}", attr(node, "id"))),
                        }
                    }
                }
                if max == 0 {
                    return Err(CibError::BadValue { name: "clone_node_max".into(), value: "0".into() });
                }
                let inner = node
                    .children()
                    .find(|c| is(c, "primitive"))
                    .ok_or_else(|| CibError::Xml(format!("clone {:?} has no primitive", attr(node, "id"))))?;
                let mut r = parse_primitive(inner, ResourceKind::Clone { clone_node_max: max }, &mut self.ignored)?;
                r.id = attr(node, "id").to_string();
                self.resources.push(r);
            }
            "rsc_location" => {
                let score: Score = attr(node, "score").parse().map_err(|_| CibError::BadValue {
                    name: "score".into(),
                    value: attr(node, "score").into(),
                })?;
                locations.push((attr(node, "rsc").to_string(), NodeId::from(attr(node, "node")), score));
            }
            _ => {
                for child in node.children().filter(Node::is_element) {
                    self.walk(child, locations)?;
                }
            }
        }
        Ok(())
    }

    fn set_property(&mut self, name: &str, value: &str) -> Result<(), CibError> {
        let p = &mut self.properties;
        let bad = || CibError::BadValue { name: name.into(), value: value.into() };
        match name.replace('_', "-").as_str() {
            "transition-idle-timeout" => {
                p.transition_idle_timeout = parse_duration(value, BareUnit::Secs).filter(|d| d.as_ms() > 0).ok_or_else(bad)?
            }
            "default-resource-stickiness" => p.default_resource_stickiness = value.parse().map_err(|_| bad())?,
            "default-resource-failure-stickiness" => {
                p.default_resource_failure_stickiness = value.parse().map_err(|_| bad())?
            }
            "stonith-enabled" => p.stonith_enabled = parse_bool(value).ok_or_else(bad)?,
            "stonith-action" => {
                p.stonith_action = match value {
                    "reboot" => StonithAction::Reboot,
                    "off" | "poweroff" => StonithAction::Off,
                    _ => return Err(bad()),
                }
            }
            "symmetric-cluster" => p.symmetric_cluster = parse_bool(value).ok_or_else(bad)?,
            "no-quorum-policy" => {
                p.no_quorum_policy = match value {
                    "stop" => NoQuorumPolicy::Stop,
                    "ignore" => NoQuorumPolicy::Ignore,
                    _ => return Err(bad()),
                }
            }
            "stop-orphan-resources" => p.stop_orphan_resources = parse_bool(value).ok_or_else(bad)?,
            "stop-orphan-actions" => p.stop_orphan_actions = parse_bool(value).ok_or_else(bad)?,
            "is-managed-default" => p.is_managed_default = parse_bool(value).ok_or_else(bad)?,
            _ => self.ignored.push(format!("property {name}={value}")),
        }
        Ok(())
    }
}

fn is(n: &Node, tag: &str) -> bool {
    n.is_element() && n.tag_name().name() == tag
}

fn attr<'a>(n: Node<'a, '_>, name: &str) -> &'a str {
    n.attribute(name).unwrap_or("")
}

/// All `nvpair`s below `n`, whether wrapped in `<attributes>` or not.
fn nvpairs(n: Node) -> Vec<(String, String)> {
    n.descendants()
        .filter(|d| is(d, "nvpair"))
        .map(|d| (attr(d, "name").to_string(), attr(d, "value").to_string()))
        .collect()
}

fn parse_bool(v: &str) -> Option<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Some(true),
        "false" | "no" | "off" | "0" => Some(false),
        _ => None,
    }
}

fn parse_u32(name: &str, v: &str) -> Result<u32, CibError> {
    v.trim().parse().map_err(|_| CibError::BadValue { name: name.into(), value: v.into() })
}

fn parse_primitive(n: Node, kind: ResourceKind, ignored: &mut Vec<String>) -> Result<ResourceSpec, CibError> {
    let id = attr(n, "id").to_string();
    let class = attr(n, "class");
    let agent_type = attr(n, "type");
    let mut nv: BTreeMap<String, String> = BTreeMap::new();
    for child in n.children().filter(|c| is(c, "instance_attributes") || is(c, "meta_attributes")) {
        nv.extend(nvpairs(child));
    }
    let agent = match (class, agent_type) {
        ("ocf", "Xen") => Agent::GuestVm { config_path: nv.remove("xmfile") },
        ("stonith", t) => {
            let kind = FenceKind::from_agent_type(t)
                .ok_or_else(|| CibError::UnknownAgent { id: id.clone(), agent: format!("{class}:{t}") })?;
            let hostlist: Vec<NodeId> = nv
                .remove("hostlist")
                .unwrap_or_default()
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(NodeId::from)
                .collect();
            if hostlist.is_empty() {
                return Err(CibError::BadValue { name: "hostlist".into(), value: String::new() });
            }
            Agent::FenceDevice { kind, hostlist }
        }
        _ => return Err(CibError::UnknownAgent { id, agent: format!("{class}:{agent_type}") }),
    };
    let is_fence = matches!(agent, Agent::FenceDevice { .. });
    let mut spec = ResourceSpec {
        id: id.clone(),
        kind,
        agent,
        monitor: None,
        start_timeout: SimTime::from_secs(20),
        stop_timeout: SimTime::from_secs(20),
        target_role: TargetRole::Started,
        allow_migrate: false,
        location: BTreeMap::new(),
        start_duration: if is_fence { FENCE_START_DURATION } else { DEFAULT_BOOT_DURATION },
        stop_duration: if is_fence { FENCE_START_DURATION } else { DEFAULT_STOP_DURATION },
    };
    for op in n.descendants().filter(|d| is(d, "op")) {
        let name = attr(op, "name");
        let bad = |msg: &str| CibError::BadOp { id: id.clone(), op: name.into(), msg: msg.into() };
        let timeout = match op.attribute("timeout") {
            Some(t) => parse_duration(t, BareUnit::Secs).ok_or_else(|| bad("unparsable timeout"))?,
            None => SimTime::from_secs(20),
        };
        if timeout == SimTime::ZERO {
            return Err(bad("timeout must be positive"));
        }
        match name {
            "monitor" => {
                let interval = op
                    .attribute("interval")
                    .and_then(|i| parse_duration(i, BareUnit::Secs))
                    .filter(|i| i.as_ms() > 0)
                    .ok_or_else(|| bad("monitor needs a positive interval"))?;
                spec.monitor = Some(OpSpec { interval, timeout });
            }
            "start" => spec.start_timeout = timeout,
            "stop" => spec.stop_timeout = timeout,
            other => ignored.push(format!("{id}: op {other}")),
        }
    }
    for (name, value) in nv {
        let dur = |v: &str| {
            parse_duration(v, BareUnit::Secs).ok_or(CibError::BadValue { name: name.clone(), value: v.into() })
        };
        match name.as_str() {
            "target_role" | "target-role" => {
                spec.target_role = match value.to_ascii_lowercase().as_str() {
                    "started" => TargetRole::Started,
                    "stopped" => TargetRole::Stopped,
                    _ => return Err(CibError::BadValue { name, value }),
                }
            }
            "allow_migrate" | "allow-migrate" => {
                spec.allow_migrate = parse_bool(&value).ok_or(CibError::BadValue { name, value })?
            }
            "boot_duration" | "start_duration" => spec.start_duration = dur(&value)?,
            "stop_duration" => spec.stop_duration = dur(&value)?,
            _ => ignored.push(format!("{id}: {name}={value}")),
        }
    }
    Ok(spec)
}
