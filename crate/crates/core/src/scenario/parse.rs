//! Line-oriented scenario files.
//!
//! ```text
//! name failed-server-1
//! seed 1
//! node node1
//! node node2
//! link node1 node2 latency 1ms bandwidth 100Mbit
//! config drbd drbd.conf
//! config cib bootstrap-canonical.xml
//! config ha ha.cf
//! workload commits vm=vm1 interval=100ms protocol-from-config
//! workload requests vm=vm1 interval=50ms
//! option reboot-delay 30s
//! inject 60s power-pull node1
//! expect "dead node1"
//! end 200s
//! ```

use std::fmt;
use std::path::PathBuf;

use crate::block::{parse_drbd_conf, DeviceConfig, Protocol};
use crate::cluster::{ClusterConfig, Injection, WorkloadSpec};
use crate::crm::Cib;
use crate::engine::{LinkSpec, NodeId};
use crate::membership::HeartbeatConfig;
use crate::time::{parse_duration, BareUnit, SimTime};
use crate::workload::{DEFAULT_COMMIT_INTERVAL, DEFAULT_REQUEST_INTERVAL};

use super::builtin;

pub const DEFAULT_REBOOT_DELAY: SimTime = SimTime::from_secs(30);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub msg: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.line, self.col, self.msg)
    }
}

impl std::error::Error for ParseError {}

/// Where `config` lines are read from.
pub trait ConfigSource {
    fn read(&self, path: &str) -> Result<String, String>;
}

/// Files relative to `base`, then the embedded configs by file name.
#[derive(Debug, Clone)]
pub struct FsSource {
    pub base: PathBuf,
}

impl ConfigSource for FsSource {
    fn read(&self, path: &str) -> Result<String, String> {
        let p = self.base.join(path);
        match std::fs::read_to_string(&p) {
            Ok(s) => Ok(s),
            Err(e) => builtin::config(path).map(str::to_string).ok_or_else(|| format!("{}: {e}", p.display())),
        }
    }
}

/// Embedded configs only.
#[derive(Debug, Clone, Copy, Default)]
pub struct EmbeddedSource;

impl ConfigSource for EmbeddedSource {
    fn read(&self, path: &str) -> Result<String, String> {
        builtin::config(path).map(str::to_string).ok_or_else(|| format!("no embedded config named '{path}'"))
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub nodes: Vec<NodeId>,
    pub links: Vec<LinkSpec>,
    pub drbd: DeviceConfig,
    pub ha: HeartbeatConfig,
    pub cib: Cib,
    /// File names of the merged configs, for `show-config`.
    pub config_files: Vec<(String, String)>,
    pub workloads: Vec<WorkloadSpec>,
    pub timeline: Vec<(SimTime, Injection)>,
    pub end: SimTime,
    pub expected: Vec<String>,
    pub reboot_delay: SimTime,
    pub trace_network: bool,
    pub warnings: Vec<String>,
}

impl Scenario {
    pub fn cluster_config(&self) -> ClusterConfig {
        ClusterConfig {
            nodes: self.nodes.clone(),
            links: self.links.clone(),
            seed: self.seed,
            ha: self.ha.clone(),
            drbd: self.drbd.clone(),
            cib: self.cib.clone(),
            reboot_delay: self.reboot_delay,
            workloads: self.workloads.clone(),
            injections: self.timeline.clone(),
            end: self.end,
            trace_network: self.trace_network,
        }
    }
}

struct Tok<'a> {
    text: &'a str,
    col: usize,
}

fn tokens(line: &str) -> Vec<Tok<'_>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push(Tok { text: &line[s..i], col: s + 1 });
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(Tok { text: &line[s..], col: s + 1 });
    }
    out
}

fn err(line: usize, col: usize, msg: impl Into<String>) -> ParseError {
    ParseError { line, col, msg: msg.into() }
}

fn duration(line: usize, t: &Tok) -> Result<SimTime, ParseError> {
    parse_duration(t.text, BareUnit::Millis).ok_or_else(|| err(line, t.col, format!("bad duration '{}'", t.text)))
}

/// `12500000`, `10M`, `100Mbit`, ...: bytes per second.
fn bandwidth(line: usize, t: &Tok) -> Result<u64, ParseError> {
    let s = t.text;
    let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let bad = || err(line, t.col, format!("bad bandwidth '{s}'"));
    let n: u64 = num.parse().map_err(|_| bad())?;
    let bytes = match unit {
        "" => n,
        "K" | "k" => n * 1_000,
        "M" => n * 1_000_000,
        "G" => n * 1_000_000_000,
        "Kbit" | "kbit" => n * 1_000 / 8,
        "Mbit" => n * 1_000_000 / 8,
        "Gbit" => n * 1_000_000_000 / 8,
        _ => return Err(bad()),
    };
    if bytes == 0 {
        return Err(bad());
    }
    Ok(bytes)
}

struct Pending {
    drbd: Option<(usize, String, String)>,
    ha: Option<(usize, String, String)>,
    cib: Vec<(usize, String, String)>,
}

pub fn parse_scenario(text: &str, src: &dyn ConfigSource) -> Result<Scenario, ParseError> {
    let mut sc = Scenario {
        name: "unnamed".into(),
        seed: 1,
        nodes: Vec::new(),
        links: Vec::new(),
        drbd: DeviceConfig::default(),
        ha: HeartbeatConfig::default(),
        cib: Cib::default(),
        config_files: Vec::new(),
        workloads: Vec::new(),
        timeline: Vec::new(),
        end: SimTime::ZERO,
        expected: Vec::new(),
        reboot_delay: DEFAULT_REBOOT_DELAY,
        trace_network: false,
        warnings: Vec::new(),
    };
    let mut pending = Pending { drbd: None, ha: None, cib: Vec::new() };
    let mut protocol: Option<Protocol> = None;
    let mut end_line = None;
    let mut last_inject = SimTime::ZERO;
    let mut inject_lines = Vec::new();
    let mut link_lines = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let trimmed = raw.trim_start();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let toks = tokens(raw);
        let kw = &toks[0];
        let args = &toks[1..];
        let want = |n: usize| -> Result<(), ParseError> {
            if args.len() < n {
                let col = raw.trim_end().len() + 1;
                Err(err(ln, col, format!("'{}' needs {n} argument(s)", kw.text)))
            } else if args.len() > n {
                Err(err(ln, args[n].col, format!("unexpected '{}'", args[n].text)))
            } else {
                Ok(())
            }
        };
        match kw.text {
            "name" => {
                want(1)?;
                sc.name = args[0].text.to_string();
            }
            "seed" => {
                want(1)?;
                sc.seed = args[0].text.parse().map_err(|_| err(ln, args[0].col, "seed must be an integer"))?;
            }
            "node" => {
                if args.is_empty() {
                    want(1)?;
                }
                for a in args {
                    let id = NodeId::from(a.text);
                    if sc.nodes.contains(&id) {
                        return Err(err(ln, a.col, format!("node '{}' declared twice", a.text)));
                    }
                    sc.nodes.push(id);
                }
            }
            "link" => {
                if args.len() < 2 {
                    want(2)?;
                }
                let mut spec = LinkSpec::new(args[0].text, args[1].text);
                let mut rest = args[2..].iter();
                while let Some(k) = rest.next() {
                    let v = rest.next().ok_or_else(|| err(ln, k.col, format!("'{}' needs a value", k.text)))?;
                    match k.text {
                        "latency" => spec.latency = duration(ln, v)?,
                        "bandwidth" => spec.bandwidth = bandwidth(ln, v)?,
                        _ => return Err(err(ln, k.col, format!("unknown link property '{}'", k.text))),
                    }
                }
                link_lines.push((ln, args[0].col, args[1].col));
                sc.links.push(spec);
            }
            "config" => {
                want(2)?;
                let path = args[1].text;
                let body = src.read(path).map_err(|e| err(ln, args[1].col, format!("missing config: {e}")))?;
                let entry = (ln, path.to_string(), body);
                match args[0].text {
                    "drbd" => pending.drbd = Some(entry),
                    "ha" => pending.ha = Some(entry),
                    "cib" => pending.cib.push(entry),
                    other => return Err(err(ln, args[0].col, format!("unknown config kind '{other}'"))),
                }
            }
            "workload" => {
                if args.is_empty() {
                    want(1)?;
                }
                let mut vm = None;
                let mut interval = None;
                for a in &args[1..] {
                    match a.text.split_once('=') {
                        Some(("vm", v)) => vm = Some(v.to_string()),
                        Some(("interval", v)) => {
                            interval = Some(parse_duration(v, BareUnit::Millis).ok_or_else(|| {
                                err(ln, a.col, format!("bad duration '{v}'"))
                            })?)
                        }
                        None if a.text == "protocol-from-config" => {}
                        _ => return Err(err(ln, a.col, format!("unknown workload option '{}'", a.text))),
                    }
                }
                let vm = vm.ok_or_else(|| err(ln, kw.col, "workload needs vm=<id>"))?;
                let w = match args[0].text {
                    "commits" => WorkloadSpec::Commits { vm, interval: interval.unwrap_or(DEFAULT_COMMIT_INTERVAL) },
                    "requests" => WorkloadSpec::Requests { vm, interval: interval.unwrap_or(DEFAULT_REQUEST_INTERVAL) },
                    other => return Err(err(ln, args[0].col, format!("unknown workload kind '{other}'"))),
                };
                if matches!(&w, WorkloadSpec::Commits { interval, .. } | WorkloadSpec::Requests { interval, .. } if *interval == SimTime::ZERO)
                {
                    return Err(err(ln, kw.col, "workload interval must be positive"));
                }
                sc.workloads.push(w);
            }
            "inject" => {
                if args.len() < 2 {
                    want(2)?;
                }
                let at = duration(ln, &args[0])?;
                let rest = &raw[args[1].col - 1..];
                let inj: Injection = rest.trim().parse().map_err(|e: String| err(ln, args[1].col, e))?;
                if at < last_inject {
                    return Err(err(ln, args[0].col, "unsorted timeline: injection earlier than the previous one"));
                }
                last_inject = at;
                inject_lines.push((ln, args[1].col));
                sc.timeline.push((at, inj));
            }
            "expect" => {
                let rest = raw.trim().strip_prefix("expect").unwrap_or("").trim();
                let pat = rest
                    .strip_prefix('"')
                    .and_then(|r| r.strip_suffix('"'))
                    .ok_or_else(|| err(ln, args.first().map_or(kw.col, |a| a.col), "expect takes a quoted pattern"))?;
                sc.expected.push(pat.to_string());
            }
            "end" => {
                want(1)?;
                sc.end = duration(ln, &args[0])?;
                end_line = Some((ln, args[0].col));
            }
            "option" => {
                want(2)?;
                let v = &args[1];
                match args[0].text {
                    "reboot-delay" => sc.reboot_delay = duration(ln, v)?,
                    "protocol" => {
                        protocol = Some(match v.text {
                            "A" => Protocol::A,
                            "B" => Protocol::B,
                            "C" => Protocol::C,
                            _ => return Err(err(ln, v.col, format!("unknown protocol '{}'", v.text))),
                        })
                    }
                    "trace-network" => {
                        sc.trace_network = match v.text {
                            "on" | "true" => true,
                            "off" | "false" => false,
                            _ => return Err(err(ln, v.col, "expected on or off")),
                        }
                    }
                    other => return Err(err(ln, args[0].col, format!("unknown option '{other}'"))),
                }
            }
            other => return Err(err(ln, kw.col, format!("unknown directive '{other}'"))),
        }
    }

    if let Some((ln, name, body)) = pending.drbd {
        let (cfg, warnings) = parse_drbd_conf(&body).map_err(|e| err(ln, 1, format!("{name}: {e}")))?;
        sc.drbd = cfg;
        sc.warnings.extend(warnings.into_iter().map(|w| format!("{name}: {w}")));
        sc.config_files.push(("drbd".into(), name));
    }
    if let Some(p) = protocol {
        sc.drbd.protocol = p;
    }
    if let Some((ln, name, body)) = pending.ha {
        let (cfg, warnings) = HeartbeatConfig::parse(&body).map_err(|e| err(ln, 1, format!("{name}: {e}")))?;
        sc.ha = cfg;
        sc.warnings.extend(warnings.into_iter().map(|w| format!("{name}: {w}")));
        sc.config_files.push(("ha".into(), name));
    }
    if !pending.cib.is_empty() {
        let docs: Vec<&str> = pending.cib.iter().map(|(_, _, b)| b.as_str()).collect();
        let last = pending.cib.last().map_or(1, |c| c.0);
        sc.cib = Cib::load(&docs).map_err(|e| err(last, 1, e.to_string()))?;
        sc.config_files.extend(pending.cib.into_iter().map(|(_, n, _)| ("cib".into(), n)));
    }

    if sc.nodes.is_empty() {
        sc.nodes = if sc.ha.node_list.is_empty() {
            vec![NodeId::from("node1"), NodeId::from("node2")]
        } else {
            sc.ha.node_list.clone()
        };
    }
    for (spec, (ln, ca, cb)) in sc.links.iter().zip(&link_lines) {
        for (n, col) in [(&spec.a, *ca), (&spec.b, *cb)] {
            if !sc.nodes.contains(n) {
                return Err(err(*ln, col, format!("link names undeclared node '{n}'")));
            }
        }
    }
    if sc.links.is_empty() {
        for (i, a) in sc.nodes.iter().enumerate() {
            for b in &sc.nodes[i + 1..] {
                sc.links.push(LinkSpec::new(a.clone(), b.clone()));
            }
        }
    }
    for ((_, inj), (ln, col)) in sc.timeline.iter().zip(&inject_lines) {
        for n in inj.nodes() {
            if !sc.nodes.contains(n) {
                return Err(err(*ln, *col, format!("injection targets undeclared node '{n}'")));
            }
        }
    }
    match end_line {
        None => return Err(err(text.lines().count().max(1), 1, "missing 'end <at>'")),
        Some((ln, col)) => {
            if sc.end == SimTime::ZERO || sc.end <= last_inject {
                return Err(err(ln, col, "end must be after the last injection"));
            }
        }
    }
    Ok(sc)
}
