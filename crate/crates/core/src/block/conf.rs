//! drbd.conf subset parser.
//!
//! Directives are `word args... ;` or `word args... { ... }`, nested
//! arbitrarily; `#` starts a comment. Unknown directives are warnings, since
//! real files carry handler and tuning lines the model does not use.

use thiserror::Error;

use super::{AfterSbPolicy, DeviceConfig, PeerAddress, Protocol, KIB};
use crate::engine::NodeId;
use crate::time::{parse_duration, BareUnit, SimTime};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DrbdConfError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("no resource section found")]
    NoResource,
    #[error("invalid device config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Open,
    Close,
    Semi,
}

fn tokenize(text: &str) -> Result<Vec<(Tok, usize)>, DrbdConfError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let mut chars = line.chars().peekable();
        while let Some(&c) = chars.peek() {
            match c {
                '#' => break,
                c if c.is_whitespace() => {
                    chars.next();
                }
                '{' => {
                    chars.next();
                    out.push((Tok::Open, line_no));
                }
                '}' => {
                    chars.next();
                    out.push((Tok::Close, line_no));
                }
                ';' => {
                    chars.next();
                    out.push((Tok::Semi, line_no));
                }
                '"' => {
                    chars.next();
                    let mut s = String::new();
                    loop {
                        match chars.next() {
                            Some('"') => break,
                            Some(ch) => s.push(ch),
                            None => {
                                return Err(DrbdConfError::Syntax { line: line_no, msg: "unterminated string".into() })
                            }
                        }
                    }
                    out.push((Tok::Word(s), line_no));
                }
                _ => {
                    let mut s = String::new();
                    while let Some(&ch) = chars.peek() {
                        if ch.is_whitespace() || matches!(ch, '{' | '}' | ';' | '#' | '"') {
                            break;
                        }
                        s.push(ch);
                        chars.next();
                    }
                    out.push((Tok::Word(s), line_no));
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct Stmt {
    words: Vec<String>,
    block: Option<Vec<Stmt>>,
    line: usize,
}

impl Stmt {
    fn name(&self) -> &str {
        &self.words[0]
    }

    fn args(&self) -> &[String] {
        &self.words[1..]
    }

    fn text(&self) -> String {
        self.words.join(" ")
    }
}

fn parse_block(toks: &[(Tok, usize)], pos: &mut usize, nested: bool) -> Result<Vec<Stmt>, DrbdConfError> {
    let mut stmts = Vec::new();
    let mut words: Vec<String> = Vec::new();
    let mut start_line = 0;
    while *pos < toks.len() {
        let (tok, line) = &toks[*pos];
        *pos += 1;
        match tok {
            Tok::Word(w) => {
                if words.is_empty() {
                    start_line = *line;
                }
                words.push(w.clone());
            }
            Tok::Semi => {
                if !words.is_empty() {
                    stmts.push(Stmt { words: std::mem::take(&mut words), block: None, line: start_line });
                }
            }
            Tok::Open => {
                if words.is_empty() {
                    return Err(DrbdConfError::Syntax { line: *line, msg: "block without a name".into() });
                }
                let inner = parse_block(toks, pos, true)?;
                stmts.push(Stmt { words: std::mem::take(&mut words), block: Some(inner), line: start_line });
            }
            Tok::Close => {
                if !nested {
                    return Err(DrbdConfError::Syntax { line: *line, msg: "unbalanced '}'".into() });
                }
                if !words.is_empty() {
                    return Err(DrbdConfError::Syntax { line: *line, msg: format!("missing ';' after {:?}", words[0]) });
                }
                return Ok(stmts);
            }
        }
    }
    if nested {
        let line = toks.last().map_or(0, |t| t.1);
        return Err(DrbdConfError::Syntax { line, msg: "missing '}'".into() });
    }
    if !words.is_empty() {
        return Err(DrbdConfError::Syntax { line: start_line, msg: format!("missing ';' after {:?}", words[0]) });
    }
    Ok(stmts)
}

/// `10M` is 10 MiB/s; a bare number is KiB/s.
fn parse_rate(s: &str) -> Option<u64> {
    let (num, mult) = match s.chars().last()? {
        'K' | 'k' => (&s[..s.len() - 1], KIB),
        'M' | 'm' => (&s[..s.len() - 1], KIB * KIB),
        'G' | 'g' => (&s[..s.len() - 1], KIB * KIB * KIB),
        _ => (s, KIB),
    };
    num.parse::<u64>().ok()?.checked_mul(mult)
}

struct Interp<'a> {
    cfg: &'a mut DeviceConfig,
    warnings: &'a mut Vec<String>,
}

impl Interp<'_> {
    fn err(line: usize, msg: impl Into<String>) -> DrbdConfError {
        DrbdConfError::Syntax { line, msg: msg.into() }
    }

    fn one_arg(s: &Stmt) -> Result<&str, DrbdConfError> {
        match s.args() {
            [a] => Ok(a),
            _ => Err(Self::err(s.line, format!("{} takes one argument", s.name()))),
        }
    }

    fn warn(&mut self, s: &Stmt, section: &str) {
        self.warnings.push(format!("line {}: unknown directive {:?} in {section} ignored", s.line, s.name()));
    }

    /// DRBD expresses ping-timeout and timeout in tenths of a second.
    fn tenths(s: &Stmt) -> Result<SimTime, DrbdConfError> {
        let v: u64 = Self::one_arg(s)?.parse().map_err(|_| Self::err(s.line, "expected integer"))?;
        Ok(SimTime(v * 100))
    }

    fn secs(s: &Stmt) -> Result<SimTime, DrbdConfError> {
        parse_duration(Self::one_arg(s)?, BareUnit::Secs).ok_or_else(|| Self::err(s.line, "bad duration"))
    }

    fn section(&mut self, s: &Stmt) -> Result<(), DrbdConfError> {
        let body = s.block.as_deref().unwrap_or(&[]);
        match s.name() {
            "protocol" => {
                self.cfg.protocol = match Self::one_arg(s)? {
                    "A" => Protocol::A,
                    "B" => Protocol::B,
                    "C" => Protocol::C,
                    other => return Err(Self::err(s.line, format!("unknown protocol {other:?}"))),
                }
            }
            "handlers" => self.cfg.handlers.extend(body.iter().map(Stmt::text)),
            "startup" => {
                for d in body {
                    match d.name() {
                        "degr-wfc-timeout" => self.cfg.degr_wfc_timeout = Self::secs(d)?,
                        "wfc-timeout" => {}
                        _ => self.warn(d, "startup"),
                    }
                }
            }
            "disk" => {
                for d in body {
                    match (d.name(), d.args()) {
                        ("on-io-error", [p]) if p == "detach" => {}
                        ("on-io-error", _) => {
                            self.warnings.push(format!("line {}: only on-io-error detach is modeled", d.line))
                        }
                        _ => self.warn(d, "disk"),
                    }
                }
            }
            "net" => {
                for d in body {
                    match d.name() {
                        "allow-two-primaries" => self.cfg.allow_two_primaries = true,
                        "after-sb-0pri" | "after-sb-1pri" | "after-sb-2pri" => {
                            let idx = usize::from(d.name().as_bytes()[9] - b'0');
                            let policy = Self::one_arg(d)?;
                            if policy != "disconnect" {
                                self.warnings.push(format!(
                                    "line {}: {} {policy} not modeled, using disconnect",
                                    d.line,
                                    d.name()
                                ));
                            }
                            self.cfg.after_sb[idx] = AfterSbPolicy::Disconnect;
                        }
                        "rr-conflict" => {}
                        "ping-int" => self.cfg.ping_int = Self::secs(d)?,
                        "ping-timeout" => self.cfg.ping_timeout = Self::tenths(d)?,
                        "timeout" => self.cfg.request_timeout = Self::tenths(d)?,
                        "connect-int" => self.cfg.connect_int = Self::secs(d)?,
                        _ => self.warn(d, "net"),
                    }
                }
            }
            "syncer" => {
                for d in body {
                    match d.name() {
                        "rate" => {
                            self.cfg.sync_rate =
                                parse_rate(Self::one_arg(d)?).ok_or_else(|| Self::err(d.line, "bad rate"))?
                        }
                        "al-extents" => {
                            self.cfg.al_extents =
                                Self::one_arg(d)?.parse().map_err(|_| Self::err(d.line, "bad al-extents"))?
                        }
                        _ => self.warn(d, "syncer"),
                    }
                }
            }
            "on" => {
                let node = NodeId::new(Self::one_arg(s)?);
                let mut host = PeerAddress { node, address: None, device: None, disk: None };
                for d in body {
                    match d.name() {
                        "address" => host.address = Some(Self::one_arg(d)?.to_string()),
                        "device" => host.device = Some(Self::one_arg(d)?.to_string()),
                        "disk" => host.disk = Some(Self::one_arg(d)?.to_string()),
                        "meta-disk" | "flexible-meta-disk" => {}
                        _ => self.warn(d, "on"),
                    }
                }
                self.cfg.hosts.push(host);
            }
            _ => self.warn(s, "resource"),
        }
        Ok(())
    }
}

/// Parses the first `resource` of a drbd.conf. `common` sections seed the
/// defaults it starts from.
pub fn parse_drbd_conf(text: &str) -> Result<(DeviceConfig, Vec<String>), DrbdConfError> {
    let toks = tokenize(text)?;
    let mut pos = 0;
    let top = parse_block(&toks, &mut pos, false)?;
    let mut cfg = DeviceConfig::default();
    let mut warnings = Vec::new();
    let mut resource: Option<&Stmt> = None;
    for s in &top {
        match s.name() {
            "global" => {}
            "common" => {
                let mut it = Interp { cfg: &mut cfg, warnings: &mut warnings };
                for inner in s.block.as_deref().unwrap_or(&[]) {
                    it.section(inner)?;
                }
            }
            "resource" => {
                if resource.is_some() {
                    warnings.push(format!("line {}: additional resource ignored", s.line));
                } else {
                    resource = Some(s);
                }
            }
            _ => warnings.push(format!("line {}: unknown top-level directive {:?} ignored", s.line, s.name())),
        }
    }
    let res = resource.ok_or(DrbdConfError::NoResource)?;
    cfg.name = res.args().first().cloned().unwrap_or_else(|| "r0".into());
    {
        let mut it = Interp { cfg: &mut cfg, warnings: &mut warnings };
        for inner in res.block.as_deref().unwrap_or(&[]) {
            it.section(inner)?;
        }
    }
    cfg.validate().map_err(DrbdConfError::Invalid)?;
    Ok((cfg, warnings))
}
