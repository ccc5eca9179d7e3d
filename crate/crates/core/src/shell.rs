// SPDX-License-Identifier: Apache-2.0

//! Interactive steering and declarative experiment files.
//!
//! Every REPL reply starts with a status line whose first token is `ok` or
//! `err`. Body lines (listings, command output) are indented by two spaces.
//! `exec` streams its output as it arrives and prints the status last.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::thread;
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, mean, MetricsError};
use crate::orchestrator::{Emulation, Emulator, OrchestratorError};
use crate::runtime::OutputStream;
use crate::topology::{
    FileError, ImageSet, IpConfig, LinkModel, LinkSpec, NodeKind, NodeSpec, TopologyFile,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verb {
    Create,
    List,
    Update,
    Delete,
    Exec,
    Attach,
    LinkUp,
    LinkDown,
    Pause,
    Resume,
    Quit,
}

pub const VERBS: [Verb; 11] = [
    Verb::Create,
    Verb::List,
    Verb::Update,
    Verb::Delete,
    Verb::Exec,
    Verb::Attach,
    Verb::LinkUp,
    Verb::LinkDown,
    Verb::Pause,
    Verb::Resume,
    Verb::Quit,
];

impl Verb {
    pub fn as_str(self) -> &'static str {
        match self {
            Verb::Create => "create",
            Verb::List => "list",
            Verb::Update => "update",
            Verb::Delete => "delete",
            Verb::Exec => "exec",
            Verb::Attach => "attach",
            Verb::LinkUp => "link-up",
            Verb::LinkDown => "link-down",
            Verb::Pause => "pause",
            Verb::Resume => "resume",
            Verb::Quit => "quit",
        }
    }

    fn usage(self) -> &'static str {
        match self {
            Verb::Create => "create node <name> kind=host|switch|controller [ip=A.B.C.D/N] [image=I] | create link <name> a=<node> b=<node> [model=veth|gre|vxlan] [key=K]",
            Verb::List => "list nodes | list links | list interfaces <node>",
            Verb::Update => "update <link> state=up|down | update <switch> controller=<node> [bridge=B]",
            Verb::Delete => "delete [node|link] <name>",
            Verb::Exec => "exec <node> <command...>",
            Verb::Attach => "attach <controller> [switch...]",
            Verb::LinkUp => "link-up <link>",
            Verb::LinkDown => "link-down <link>",
            Verb::Pause => "pause <node>",
            Verb::Resume => "resume <node>",
            Verb::Quit => "quit",
        }
    }
}

impl fmt::Display for Verb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Verb {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        VERBS
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| ParseError::UnknownVerb(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("unknown verb `{0}`")]
    UnknownVerb(String),
    #[error("unbalanced quotes")]
    Quotes,
    #[error("usage: {0}")]
    Usage(&'static str),
    #[error("argument `{0}` given twice")]
    DuplicateArg(String),
}

/// A parsed command line: positional targets plus `key=value` arguments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Command {
    pub verb: Verb,
    pub target: Vec<String>,
    pub args: IndexMap<String, String>,
}

impl Command {
    /// `Ok(None)` for blank lines and `#` comments.
    pub fn parse(line: &str) -> Result<Option<Command>, ParseError> {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            return Ok(None);
        }
        let tokens = shlex::split(line).ok_or(ParseError::Quotes)?;
        let Some((head, rest)) = tokens.split_first() else {
            return Ok(None);
        };
        let verb: Verb = head.parse()?;
        Self::from_parts(verb, rest.to_vec()).map(Some)
    }

    /// Splits tokens into targets and `key=value` args and checks arity.
    /// `exec` keeps everything after the node verbatim.
    pub fn from_parts(verb: Verb, tokens: Vec<String>) -> Result<Command, ParseError> {
        let mut target = Vec::new();
        let mut args = IndexMap::new();
        if verb == Verb::Exec {
            target = tokens;
        } else {
            for t in tokens {
                match t.split_once('=') {
                    Some((k, v)) if !k.is_empty() => {
                        if args.insert(k.to_string(), v.to_string()).is_some() {
                            return Err(ParseError::DuplicateArg(k.to_string()));
                        }
                    }
                    _ => target.push(t),
                }
            }
        }
        let n = target.len();
        let first = target.first().map(String::as_str);
        let ok = match verb {
            Verb::Quit => n == 0 && args.is_empty(),
            Verb::List => matches!(
                (first, n),
                (Some("nodes" | "links"), 1) | (Some("interfaces"), 2)
            ),
            Verb::Create => matches!((first, n), (Some("node" | "link"), 2)),
            Verb::Update => n == 1 && !args.is_empty(),
            Verb::Delete => n == 1 || (n == 2 && matches!(first, Some("node" | "link"))),
            Verb::Exec => n >= 2,
            Verb::Attach => n >= 1,
            Verb::LinkUp | Verb::LinkDown | Verb::Pause | Verb::Resume => n == 1 && args.is_empty(),
        };
        if !ok {
            return Err(ParseError::Usage(verb.usage()));
        }
        Ok(Command { verb, target, args })
    }
}

#[derive(Debug, Error)]
pub enum ShellError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("{0}")]
    Arg(String),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// What a command produced: a one-line summary and body rows.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub summary: String,
    pub body: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i64>,
}

impl Reply {
    fn text(summary: impl Into<String>) -> Self {
        Self {
            summary: summary.into(),
            ..Self::default()
        }
    }
}

fn arg_err(msg: impl Into<String>) -> ShellError {
    ShellError::Arg(msg.into())
}

fn parse_kind(s: &str) -> Result<NodeKind, ShellError> {
    match s {
        "switch" => Ok(NodeKind::WhiteboxSwitch),
        other => other.parse().map_err(arg_err),
    }
}

fn reject_unknown(cmd: &Command, allowed: &[&str]) -> Result<(), ShellError> {
    match cmd.args.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(arg_err(format!("unknown argument `{k}` for {}", cmd.verb))),
        None => Ok(()),
    }
}

fn create(emu: &mut Emulation, cmd: &Command) -> Result<Reply, ShellError> {
    let name = cmd.target[1].clone();
    if cmd.target[0] == "node" {
        reject_unknown(cmd, &["kind", "ip", "image", "role"])?;
        let kind = parse_kind(
            cmd.args
                .get("kind")
                .ok_or_else(|| arg_err("`kind` is required"))?,
        )?;
        let image = cmd
            .args
            .get("image")
            .cloned()
            .unwrap_or_else(|| ImageSet::from_env().for_kind(kind).to_string());
        let mut spec = NodeSpec::new(&name, kind, image);
        if let Some(ip) = cmd.args.get("ip") {
            if kind != NodeKind::Host {
                return Err(arg_err("`ip` is only valid for hosts"));
            }
            spec.ip_config = Some(ip.parse::<IpConfig>().map_err(arg_err)?);
        } else if kind == NodeKind::Host {
            spec.ip_config = Some(emu.topology().next_host_ip());
        }
        if let Some(role) = cmd.args.get("role") {
            spec.role = role.parse().map_err(arg_err)?;
        }
        emu.add_node_live(spec)?;
        // the bus needs two members, so the first node may have no address yet
        let mgmt = emu
            .handle(&name)
            .and_then(|h| h.mgmt_ip)
            .map_or_else(|| "-".into(), |i| i.to_string());
        Ok(Reply::text(format!("created node {name} mgmt={mgmt}")))
    } else {
        reject_unknown(cmd, &["a", "b", "model", "key"])?;
        let a = cmd
            .args
            .get("a")
            .ok_or_else(|| arg_err("`a` is required"))?;
        let b = cmd
            .args
            .get("b")
            .ok_or_else(|| arg_err("`b` is required"))?;
        let model: LinkModel = cmd
            .args
            .get("model")
            .map_or(Ok(LinkModel::Veth), |m| m.parse().map_err(arg_err))?;
        let key = cmd
            .args
            .get("key")
            .map(|k| {
                k.parse::<u32>()
                    .map_err(|_| arg_err(format!("bad key `{k}`")))
            })
            .transpose()?;
        let spec = match (model.is_tunnel(), key) {
            (true, Some(k)) => LinkSpec::tunnel(&name, a, b, model, k),
            (true, None) => return Err(arg_err("tunnel links need `key`")),
            (false, Some(_)) => return Err(arg_err("`key` is only valid for tunnels")),
            (false, None) => LinkSpec::veth(&name, a, b),
        };
        emu.add_link_live(spec)?;
        let desc = emu.describe_link(&name).unwrap_or_else(|| name.clone());
        Ok(Reply::text(format!("created link {desc}")))
    }
}

fn list(emu: &Emulation, cmd: &Command) -> Result<Reply, ShellError> {
    match cmd.target[0].as_str() {
        "nodes" => {
            let body: Vec<String> = emu
                .topology()
                .nodes()
                .map(|n| {
                    let (state, mgmt) =
                        emu.handle(&n.name)
                            .map_or(("-".to_string(), "-".to_string()), |h| {
                                (
                                    h.state.to_string(),
                                    h.mgmt_ip.map_or("-".into(), |i| i.to_string()),
                                )
                            });
                    let data = n.ip_config.map_or("-".into(), |c| c.to_string());
                    format!("{} {} {state} mgmt={mgmt} data={data}", n.name, n.kind)
                })
                .collect();
            Ok(Reply {
                summary: format!("{} nodes", body.len()),
                body,
                exit_code: None,
            })
        }
        "links" => {
            let body: Vec<String> = emu
                .topology()
                .links()
                .map(|l| {
                    emu.describe_link(&l.name)
                        .unwrap_or_else(|| format!("{} -", l.name))
                })
                .collect();
            Ok(Reply {
                summary: format!("{} links", body.len()),
                body,
                exit_code: None,
            })
        }
        _ => {
            let node = &cmd.target[1];
            if emu.handle(node).is_none() {
                return Err(OrchestratorError::NoSuchNode(node.clone()).into());
            }
            let body = emu.interfaces_of(node);
            Ok(Reply {
                summary: format!("{} interfaces", body.len()),
                body,
                exit_code: None,
            })
        }
    }
}

fn update(emu: &mut Emulation, cmd: &Command) -> Result<Reply, ShellError> {
    let name = &cmd.target[0];
    if emu.link(name).is_some() {
        reject_unknown(cmd, &["state"])?;
        let up = match cmd.args.get("state").map(String::as_str) {
            Some("up") => true,
            Some("down") => false,
            _ => return Err(arg_err("links take state=up|down")),
        };
        emu.set_link_state(name, up)?;
        return Ok(Reply::text(format!(
            "link {name} {}",
            if up { "up" } else { "down" }
        )));
    }
    if emu.handle(name).is_some() {
        reject_unknown(cmd, &["controller", "bridge"])?;
        let ctl = cmd
            .args
            .get("controller")
            .ok_or_else(|| arg_err("nodes take controller=<name>"))?;
        let bridge = cmd
            .args
            .get("bridge")
            .cloned()
            .unwrap_or_else(|| emu.config().bridge.clone());
        let target = emu.get_controller_endpoint(ctl)?;
        emu.set_controller(name, &target, &bridge)?;
        return Ok(Reply::text(format!("{name} {bridge} -> {target}")));
    }
    Err(arg_err(format!("no node or link named `{name}`")))
}

fn delete(emu: &mut Emulation, cmd: &Command) -> Result<Reply, ShellError> {
    let (what, name) = match cmd.target.as_slice() {
        [w, n] => (Some(w.as_str()), n.as_str()),
        [n] => (None, n.as_str()),
        _ => unreachable!("arity checked at parse"),
    };
    let is_link = match what {
        Some("link") => true,
        Some(_) => false,
        None => emu.topology().link(name).is_some(),
    };
    if is_link {
        emu.remove_link_live(name)?;
        Ok(Reply::text(format!("deleted link {name}")))
    } else {
        emu.remove_node_live(name)?;
        Ok(Reply::text(format!("deleted node {name}")))
    }
}

fn attach(emu: &mut Emulation, cmd: &Command) -> Result<Reply, ShellError> {
    reject_unknown(cmd, &["bridge"])?;
    let ctl = &cmd.target[0];
    if cmd.target.len() == 1 && !cmd.args.contains_key("bridge") {
        let target = emu.attach_switches(ctl)?;
        return Ok(Reply::text(format!("all switches -> {target}")));
    }
    let target = emu.get_controller_endpoint(ctl)?;
    let bridge = cmd
        .args
        .get("bridge")
        .cloned()
        .unwrap_or_else(|| emu.config().bridge.clone());
    let switches: Vec<String> = if cmd.target.len() > 1 {
        cmd.target[1..].to_vec()
    } else {
        emu.topology()
            .nodes_of_kind(NodeKind::WhiteboxSwitch)
            .map(|n| n.name.clone())
            .collect()
    };
    for s in &switches {
        emu.set_controller(s, &target, &bridge)?;
    }
    Ok(Reply::text(format!("{} -> {target}", switches.join(","))))
}

/// Runs one command. `stream` receives exec output as it arrives; without
/// it, output is collected into the reply body.
pub fn dispatch(
    emu: &mut Emulation,
    cmd: &Command,
    stream: Option<&mut dyn FnMut(&str)>,
) -> Result<Reply, ShellError> {
    match cmd.verb {
        Verb::Quit => Ok(Reply::text("bye")),
        Verb::Create => create(emu, cmd),
        Verb::List => list(emu, cmd),
        Verb::Update => update(emu, cmd),
        Verb::Delete => delete(emu, cmd),
        Verb::Attach => attach(emu, cmd),
        Verb::LinkUp | Verb::LinkDown => {
            let up = cmd.verb == Verb::LinkUp;
            emu.set_link_state(&cmd.target[0], up)?;
            Ok(Reply::text(format!(
                "link {} {}",
                cmd.target[0],
                if up { "up" } else { "down" }
            )))
        }
        Verb::Pause => {
            emu.pause(&cmd.target[0])?;
            Ok(Reply::text(format!("paused {}", cmd.target[0])))
        }
        Verb::Resume => {
            emu.resume(&cmd.target[0])?;
            Ok(Reply::text(format!("resumed {}", cmd.target[0])))
        }
        Verb::Exec => {
            let node = &cmd.target[0];
            let argv = &cmd.target[1..];
            let timeout = emu.config().exec_timeout;
            let mut body = Vec::new();
            let mut pending = String::new();
            let mut sink = |_: OutputStream, chunk: &[u8]| {
                pending.push_str(&String::from_utf8_lossy(chunk));
                while let Some(i) = pending.find('\n') {
                    let line: String = pending.drain(..=i).collect();
                    body.push(line.trim_end_matches(['\n', '\r']).to_string());
                }
            };
            let out = emu.exec_streaming(node, argv, timeout, &mut sink)?;
            if !pending.is_empty() {
                body.push(std::mem::take(&mut pending));
            }
            let body = match stream {
                Some(f) => {
                    body.iter().for_each(|l| f(l));
                    Vec::new()
                }
                None => body,
            };
            Ok(Reply {
                summary: format!("exit={}", out.exit_code),
                body,
                exit_code: Some(out.exit_code),
            })
        }
    }
}

fn one_line(s: &str) -> String {
    s.replace(['\n', '\r'], " ")
}

/// Line-oriented command loop. Returns after `quit` or end of input; only
/// a failing output stream is an error.
pub fn repl<R: BufRead, W: Write>(
    emu: &mut Emulation,
    mut input: R,
    mut output: W,
) -> io::Result<()> {
    let mut buf = Vec::new();
    loop {
        buf.clear();
        if input.read_until(b'\n', &mut buf)? == 0 {
            return Ok(());
        }
        let line = String::from_utf8_lossy(&buf);
        let cmd = match Command::parse(&line) {
            Ok(None) => {
                writeln!(output, "ok")?;
                continue;
            }
            Ok(Some(c)) => c,
            Err(e) => {
                writeln!(output, "err {}", one_line(&e.to_string()))?;
                continue;
            }
        };
        if cmd.verb == Verb::Exec {
            // body first as it streams, status after
            let mut write_err = None;
            let mut stream = |l: &str| {
                if write_err.is_none() {
                    if let Err(e) = writeln!(output, "  {l}").and_then(|_| output.flush()) {
                        write_err = Some(e);
                    }
                }
            };
            let result = dispatch(emu, &cmd, Some(&mut stream));
            if let Some(e) = write_err {
                return Err(e);
            }
            match result {
                Ok(r) => writeln!(output, "ok {}", r.summary)?,
                Err(e) => writeln!(output, "err {}", one_line(&e.to_string()))?,
            }
        } else {
            match dispatch(emu, &cmd, None) {
                Ok(r) => {
                    writeln!(output, "ok {}", one_line(&r.summary))?;
                    for l in &r.body {
                        writeln!(output, "  {}", one_line(l))?;
                    }
                }
                Err(e) => writeln!(output, "err {}", one_line(&e.to_string()))?,
            }
        }
        output.flush()?;
        if cmd.verb == Verb::Quit {
            return Ok(());
        }
    }
}

/// A scalar argument in an experiment event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArgValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
    List(Vec<String>),
}

impl fmt::Display for ArgValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArgValue::Bool(b) => write!(f, "{b}"),
            ArgValue::Int(i) => write!(f, "{i}"),
            ArgValue::Float(x) => write!(f, "{x}"),
            ArgValue::Text(s) => f.write_str(s),
            ArgValue::List(v) => f.write_str(&v.join(" ")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventEntry {
    #[serde(default)]
    pub at_ms: u64,
    pub action: String,
    #[serde(default)]
    pub target: Vec<String>,
    #[serde(default)]
    pub args: BTreeMap<String, ArgValue>,
    /// Consecutive parallel events start together and run concurrently.
    #[serde(default)]
    pub parallel: bool,
}

/// Experiment document: a topology plus a timed event list.
///
/// ```toml
/// repetitions = 3
/// topology_file = "star.toml"
///
/// [[events]]
/// at_ms = 0
/// action = "ping"
/// target = ["h1", "h2"]
/// args = { count = 10 }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    #[serde(default = "one")]
    pub repetitions: usize,
    /// Attach every switch to the first controller after bring-up.
    #[serde(default = "yes")]
    pub attach_controller: bool,
    #[serde(default)]
    pub topology_file: Option<PathBuf>,
    #[serde(default)]
    pub topology: Option<TopologyFile>,
    #[serde(default)]
    pub events: Vec<EventEntry>,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

/// Measurement actions available in experiment files besides the verbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    Ping,
    Udp,
}

#[derive(Debug, Clone, PartialEq)]
enum Action {
    Command(Command),
    Measure(Measure),
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("schema violation at {field}: {reason}")]
    Field { field: String, reason: String },
    #[error(transparent)]
    Topology(#[from] FileError),
    #[error("repetition {rep}: {source}")]
    Run {
        rep: usize,
        source: OrchestratorError,
    },
}

impl ExperimentError {
    /// Schema problems lie in the file; everything else is the environment.
    pub fn is_schema(&self) -> bool {
        matches!(
            self,
            ExperimentError::Schema(_)
                | ExperimentError::Field { .. }
                | ExperimentError::Topology(
                    FileError::Schema(_) | FileError::Field { .. } | FileError::Topology(_)
                )
        )
    }
}

fn field(field: String, reason: impl Into<String>) -> ExperimentError {
    ExperimentError::Field {
        field,
        reason: reason.into(),
    }
}

impl EventEntry {
    fn action(&self, index: usize) -> Result<Action, ExperimentError> {
        let at = |f: &str| format!("events[{index}].{f}");
        match self.action.as_str() {
            "ping" | "udp" => {
                if self.target.len() != 2 {
                    return Err(field(at("target"), "needs [source, destination]"));
                }
                let allowed: &[&str] = if self.action == "ping" {
                    &["count"]
                } else {
                    &["rate_mbps", "duration_s"]
                };
                if let Some(k) = self.args.keys().find(|k| !allowed.contains(&k.as_str())) {
                    return Err(field(at(&format!("args.{k}")), "unknown argument"));
                }
                Ok(Action::Measure(if self.action == "ping" {
                    Measure::Ping
                } else {
                    Measure::Udp
                }))
            }
            name => {
                let verb: Verb = name
                    .parse()
                    .map_err(|e: ParseError| field(at("action"), e.to_string()))?;
                if verb == Verb::Quit {
                    return Err(field(at("action"), "`quit` is not an event"));
                }
                if self.parallel && verb != Verb::Exec {
                    return Err(field(
                        at("parallel"),
                        "only ping, udp and exec may run in parallel",
                    ));
                }
                let mut tokens = self.target.clone();
                if verb == Verb::Exec {
                    if let Some(cmd) = self.args.get("cmd") {
                        match cmd {
                            ArgValue::List(v) => tokens.extend(v.iter().cloned()),
                            other => tokens.extend(
                                shlex::split(&other.to_string())
                                    .ok_or_else(|| field(at("args.cmd"), "unbalanced quotes"))?,
                            ),
                        }
                    }
                    if let Some(k) = self.args.keys().find(|k| *k != "cmd") {
                        return Err(field(at(&format!("args.{k}")), "unknown argument"));
                    }
                } else {
                    tokens.extend(self.args.iter().map(|(k, v)| format!("{k}={v}")));
                }
                Command::from_parts(verb, tokens)
                    .map(Action::Command)
                    .map_err(|e| field(at("target"), e.to_string()))
            }
        }
    }

    fn get_f64(&self, key: &str) -> Option<f64> {
        match self.args.get(key)? {
            ArgValue::Int(i) => Some(*i as f64),
            ArgValue::Float(x) => Some(*x),
            ArgValue::Text(s) => s.parse().ok(),
            _ => None,
        }
    }
}

/// Outcome of one event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub index: usize,
    pub at_ms: u64,
    pub action: String,
    pub target: Vec<String>,
    pub ok: bool,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ping: Option<PingReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub udp: Option<UdpReport>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub output: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PingReport {
    pub sent: usize,
    pub received: usize,
    pub loss_percent: f64,
    pub first_ping_ms: Option<f64>,
    pub rtts_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UdpReport {
    pub requested_mbps: f64,
    pub mean_mbps: Option<f64>,
    pub samples: Vec<(u32, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub rep: usize,
    pub run_id: String,
    pub ok: bool,
    pub events: Vec<EventRecord>,
    pub teardown: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanReport {
    pub loss_percent: Option<f64>,
    pub first_ping_ms: Option<f64>,
    pub throughput_mbps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub repetitions: usize,
    pub topology: TopologyFile,
    pub runs: Vec<RunReport>,
    pub mean: MeanReport,
}

impl ExperimentReport {
    pub fn failed_runs(&self) -> usize {
        self.runs.iter().filter(|r| !r.ok).count()
    }
}

impl ExperimentFile {
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let file: Self =
            toml::from_str(text).map_err(|e| ExperimentError::Schema(e.to_string()))?;
        file.check()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    fn check(&self) -> Result<(), ExperimentError> {
        if self.repetitions == 0 {
            return Err(field("repetitions".into(), "must be at least 1"));
        }
        match (&self.topology, &self.topology_file) {
            (Some(_), Some(_)) => {
                return Err(field(
                    "topology".into(),
                    "give either `topology` or `topology_file`",
                ))
            }
            (None, None) => {
                return Err(field(
                    "topology".into(),
                    "missing; give `topology` or `topology_file`",
                ))
            }
            _ => {}
        }
        let mut last = 0;
        for (i, e) in self.events.iter().enumerate() {
            if e.at_ms < last {
                return Err(field(
                    format!("events[{i}].at_ms"),
                    "events must be in time order",
                ));
            }
            last = e.at_ms;
            e.action(i)?;
        }
        Ok(())
    }

    /// The topology document, reading `topology_file` relative to `base`.
    pub fn topology_doc(&self, base: &Path) -> Result<TopologyFile, ExperimentError> {
        match (&self.topology, &self.topology_file) {
            (Some(t), _) => Ok(t.clone()),
            (None, Some(p)) => Ok(TopologyFile::load(base.join(p))?),
            (None, None) => Err(field("topology".into(), "missing")),
        }
    }
}

fn run_event(emu: &Emulation, ev: &EventEntry, index: usize, action: &Action) -> EventRecord {
    let mut rec = EventRecord {
        index,
        at_ms: ev.at_ms,
        action: ev.action.clone(),
        target: ev.target.clone(),
        ok: true,
        message: String::new(),
        ping: None,
        udp: None,
        output: Vec::new(),
    };
    let result: Result<String, String> = match action {
        Action::Measure(Measure::Ping) => {
            let count = ev.get_f64("count").unwrap_or(10.0).max(1.0) as usize;
            metrics::ping(emu, &ev.target[0], &ev.target[1], count)
                .map(|s| {
                    let loss = s.loss_percent();
                    rec.ping = Some(PingReport {
                        sent: s.sent,
                        received: s.rtts_ms.len(),
                        loss_percent: loss,
                        first_ping_ms: s.rtts_ms.first().copied(),
                        rtts_ms: s.rtts_ms,
                    });
                    format!("{loss:.1}% loss")
                })
                .map_err(|e| e.to_string())
        }
        Action::Measure(Measure::Udp) => {
            let rate = ev.get_f64("rate_mbps").unwrap_or(10.0);
            let dur = ev.get_f64("duration_s").unwrap_or(10.0).max(1.0) as u32;
            metrics::run_udp_flow(emu, &ev.target[0], &ev.target[1], rate, dur)
                .map(|s| {
                    let m = s.mean_mbps();
                    rec.udp = Some(UdpReport {
                        requested_mbps: rate,
                        mean_mbps: m,
                        samples: s.samples,
                    });
                    format!("{:.2} Mbps", m.unwrap_or(0.0))
                })
                .map_err(|e| e.to_string())
        }
        Action::Command(cmd) => {
            // only exec reaches here without &mut; see run_timeline
            let argv = &cmd.target[1..];
            emu.exec(&cmd.target[0], argv, emu.config().exec_timeout)
                .map_err(|e| e.to_string())
                .and_then(|out| {
                    rec.output = out
                        .stdout
                        .lines()
                        .chain(out.stderr.lines())
                        .map(String::from)
                        .collect();
                    if out.success() {
                        Ok(format!("exit={}", out.exit_code))
                    } else {
                        Err(format!("exit={}", out.exit_code))
                    }
                })
        }
    };
    match result {
        Ok(m) => rec.message = m,
        Err(m) => {
            rec.ok = false;
            rec.message = m;
        }
    }
    rec
}

/// Runs the timeline; stops at the first failed event.
fn run_timeline(
    emu: &mut Emulation,
    events: &[EventEntry],
    actions: &[Action],
) -> Vec<EventRecord> {
    let start = Instant::now();
    let mut records = Vec::new();
    let mut i = 0;
    while i < events.len() {
        let at = Duration::from_millis(events[i].at_ms);
        if let Some(wait) = at.checked_sub(start.elapsed()) {
            thread::sleep(wait);
        }
        let mut group_end = i + 1;
        if events[i].parallel {
            while group_end < events.len() && events[group_end].parallel {
                group_end += 1;
            }
        }
        let batch: Vec<EventRecord> =
            if events[i].parallel || matches!(actions[i], Action::Measure(_)) {
                let shared: &Emulation = emu;
                thread::scope(|s| {
                    let hs: Vec<_> = (i..group_end)
                        .map(|j| s.spawn(move || run_event(shared, &events[j], j, &actions[j])))
                        .collect();
                    hs.into_iter()
                        .map(|h| h.join().expect("event thread"))
                        .collect()
                })
            } else {
                let Action::Command(cmd) = &actions[i] else {
                    unreachable!()
                };
                let ev = &events[i];
                let reply = dispatch(emu, cmd, None);
                vec![EventRecord {
                    index: i,
                    at_ms: ev.at_ms,
                    action: ev.action.clone(),
                    target: ev.target.clone(),
                    ok: reply.as_ref().is_ok_and(|r| r.exit_code.unwrap_or(0) == 0),
                    message: match &reply {
                        Ok(r) => r.summary.clone(),
                        Err(e) => e.to_string(),
                    },
                    ping: None,
                    udp: None,
                    output: reply.map(|r| r.body).unwrap_or_default(),
                }]
            };
        let failed = batch.iter().any(|r| !r.ok);
        records.extend(batch);
        if failed {
            break;
        }
        i = group_end;
    }
    records
}

/// Default report location: `<stem>.report.json` beside the experiment.
pub fn default_report_path(experiment: &Path) -> PathBuf {
    experiment.with_extension("report.json")
}

/// Builds the topology, plays the events, tears down, for each repetition,
/// then writes a JSON report. Event failures end that repetition early and
/// are recorded; bring-up failures abort the experiment. Teardown always
/// runs.
pub fn run_experiment_file(
    emulator: &Emulator,
    path: &Path,
    report_path: Option<&Path>,
) -> Result<(PathBuf, ExperimentReport), ExperimentError> {
    let exp = ExperimentFile::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let doc = exp.topology_doc(base)?;
    let topology = doc.to_topology(&ImageSet::from_env())?;
    if let Some(v) = topology.validate().first() {
        return Err(field(format!("topology.{}", v.subject), v.message.clone()));
    }
    let actions: Vec<Action> = exp
        .events
        .iter()
        .enumerate()
        .map(|(i, e)| e.action(i))
        .collect::<Result<_, _>>()?;

    let mut runs = Vec::with_capacity(exp.repetitions);
    for rep in 1..=exp.repetitions {
        log::info!(
            "experiment {} repetition {rep}/{}",
            path.display(),
            exp.repetitions
        );
        let mut emu = emulator
            .up(topology.clone())
            .map_err(|source| ExperimentError::Run { rep, source })?;
        let mut events = Vec::new();
        let mut attach_ok = true;
        if exp.attach_controller {
            if let Some(ctl) = emu.first_controller().map(String::from) {
                if let Err(e) = emu.attach_switches(&ctl) {
                    attach_ok = false;
                    events.push(EventRecord {
                        index: usize::MAX,
                        at_ms: 0,
                        action: "attach".into(),
                        target: vec![ctl],
                        ok: false,
                        message: e.to_string(),
                        ping: None,
                        udp: None,
                        output: Vec::new(),
                    });
                }
            }
        }
        if attach_ok {
            events.extend(run_timeline(&mut emu, &exp.events, &actions));
        }
        let teardown = match emu.down() {
            Ok(()) => "ok".to_string(),
            Err(e) => e.to_string(),
        };
        runs.push(RunReport {
            rep,
            run_id: emu.run_id().to_string(),
            ok: teardown == "ok" && events.iter().all(|e| e.ok) && events.len() >= exp.events.len(),
            events,
            teardown,
        });
    }

    let collect = |f: &dyn Fn(&EventRecord) -> Option<f64>| {
        mean(
            &runs
                .iter()
                .flat_map(|r| r.events.iter().filter_map(f))
                .collect::<Vec<_>>(),
        )
    };
    let report = ExperimentReport {
        experiment: path.display().to_string(),
        repetitions: exp.repetitions,
        topology: TopologyFile::from_topology(&topology),
        mean: MeanReport {
            loss_percent: collect(&|e| e.ping.as_ref().map(|p| p.loss_percent)),
            first_ping_ms: collect(&|e| e.ping.as_ref().and_then(|p| p.first_ping_ms)),
            throughput_mbps: collect(&|e| e.udp.as_ref().and_then(|u| u.mean_mbps)),
        },
        runs,
    };
    let out = report_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| default_report_path(path));
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&out, json).map_err(|source| ExperimentError::Io {
        path: out.display().to_string(),
        source,
    })?;
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::Fakes;
    use crate::runtime::{ContainerEngine, ExecHandler, ExecOutput};
    use crate::topology::single_switch;
    use std::sync::Arc;

    fn ping_handler() -> ExecHandler {
        Arc::new(|_node, argv| match argv.first().map(String::as_str) {
            Some("ping") => {
                let n: usize = argv
                    .iter()
                    .position(|a| a == "-c")
                    .map(|i| argv[i + 1].clone())
                    .or_else(|| {
                        argv.iter()
                            .find_map(|a| a.strip_prefix("-c").map(String::from))
                    })
                    .and_then(|c| c.parse().ok())
                    .unwrap_or(1);
                let out: String = (1..=n)
                    .map(|i| {
                        format!(
                            "64 bytes from x: icmp_seq={i} ttl=64 time={} ms\n",
                            if i == 1 { 9.0 } else { 0.1 }
                        )
                    })
                    .collect();
                Some(ExecOutput {
                    exit_code: 0,
                    stdout: out,
                    stderr: String::new(),
                })
            }
            Some("echo") => Some(ExecOutput {
                exit_code: 0,
                stdout: format!("{}\n", argv[1..].join(" ")),
                stderr: String::new(),
            }),
            _ => None,
        })
    }

    fn live() -> (Emulator, Fakes, Emulation) {
        let (emulator, fakes) = Emulator::fake();
        fakes.engine.set_exec_handler(ping_handler());
        let emu = emulator.up(single_switch()).unwrap();
        (emulator, fakes, emu)
    }

    fn session(emu: &mut Emulation, input: &str) -> Vec<String> {
        let mut out = Vec::new();
        repl(emu, input.as_bytes(), &mut out).unwrap();
        String::from_utf8(out)
            .unwrap()
            .lines()
            .map(String::from)
            .collect()
    }

    #[test]
    fn parse_rules() {
        assert_eq!(Command::parse("  ").unwrap(), None);
        assert_eq!(Command::parse("# note").unwrap(), None);
        assert_eq!(
            Command::parse("frobnicate x"),
            Err(ParseError::UnknownVerb("frobnicate".into()))
        );
        assert_eq!(Command::parse("exec h1 'a"), Err(ParseError::Quotes));
        let c = Command::parse("create node h9 kind=host ip=10.0.0.9/24")
            .unwrap()
            .unwrap();
        assert_eq!(c.target, vec!["node", "h9"]);
        assert_eq!(c.args["ip"], "10.0.0.9/24");
        let e = Command::parse("exec h1 env A=b").unwrap().unwrap();
        assert_eq!(e.target, vec!["h1", "env", "A=b"]);
        assert!(matches!(
            Command::parse("link-up"),
            Err(ParseError::Usage(_))
        ));
        assert!(matches!(Command::parse("list"), Err(ParseError::Usage(_))));
        assert!(matches!(
            Command::parse("update l1 a=1 a=2"),
            Err(ParseError::DuplicateArg(_))
        ));
        for v in VERBS {
            assert_eq!(v.as_str().parse::<Verb>().unwrap(), v);
        }
    }

    #[test]
    fn list_nodes_on_single_switch() {
        let (_e, _f, mut emu) = live();
        let out = session(&mut emu, "list nodes\n");
        assert_eq!(out[0], "ok 4 nodes");
        let names: Vec<&str> = out[1..]
            .iter()
            .map(|l| l.split_whitespace().next().unwrap())
            .collect();
        assert_eq!(names, ["sw1", "h1", "h2", "ctl1"]);
        assert!(out[2].contains("data=10.0.0.1/24"));
    }

    #[test]
    fn errors_do_not_stop_the_loop() {
        let (_e, _f, mut emu) = live();
        let out = session(
            &mut emu,
            "frobnicate x\nexec h1 ping -c1 10.0.0.2\nlink-down l1\nlist links\npause nope\nquit\nlist nodes\n",
        );
        assert!(out[0].starts_with("err unknown verb"));
        assert!(out[1].starts_with("  64 bytes"));
        assert_eq!(out[2], "ok exit=0");
        assert_eq!(out[3], "ok link l1 down");
        assert_eq!(out[4], "ok 2 links");
        assert!(out[5].starts_with("  l1 veth host down"), "{}", out[5]);
        assert!(out[7].starts_with("err"));
        assert_eq!(out[8], "ok bye");
        assert_eq!(out.len(), 9, "nothing runs after quit");
    }

    #[test]
    fn live_create_update_delete() {
        let (_e, fakes, mut emu) = live();
        let out = session(
            &mut emu,
            "create node h3 kind=host\ncreate link l3 a=sw1 b=h3\nlist interfaces h3\nupdate l3 state=down\nupdate sw1 controller=ctl1\nattach ctl1\ndelete l3\ndelete node h3\ncreate link l9 a=sw1 b=h1 model=gre\n",
        );
        assert!(
            out[0].starts_with("ok created node h3 mgmt=172.31."),
            "{}",
            out[0]
        );
        assert!(
            out[1].starts_with("ok created link l3 veth host up"),
            "{}",
            out[1]
        );
        assert_eq!(&out[2..5], ["ok 2 interfaces", "  mgmt0", "  data0"]);
        assert_eq!(out[5], "ok link l3 down");
        assert_eq!(out[6], "ok sw1 br_oper0 -> tcp:172.31.0.5:6653");
        assert_eq!(out[7], "ok all switches -> tcp:172.31.0.5:6653");
        assert_eq!(out[8], "ok deleted link l3");
        assert_eq!(out[9], "ok deleted node h3");
        assert_eq!(out[10], "err tunnel links need `key`");
        assert_eq!(emu.topology().node("h3"), None);
        assert_eq!(
            fakes.engine.list_managed(Some(emu.run_id())).unwrap().len(),
            4
        );
    }

    #[test]
    fn invalid_bytes_and_crlf() {
        let (_e, _f, mut emu) = live();
        let mut out = Vec::new();
        repl(&mut emu, &b"\xff\xfe junk\r\nlist nodes\r\n"[..], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let status: Vec<&str> = text.lines().filter(|l| !l.starts_with("  ")).collect();
        assert_eq!(status.len(), 2);
        assert!(status[0].starts_with("err"));
        assert_eq!(status[1], "ok 4 nodes");
    }

    const BASE: &str = r#"
[[topology.nodes]]
name = "sw1"
kind = "whitebox-switch"
[[topology.nodes]]
name = "h1"
kind = "host"
ip = "10.0.0.1"
mask = 24
[[topology.nodes]]
name = "h2"
kind = "host"
ip = "10.0.0.2"
mask = 24
[[topology.nodes]]
name = "ctl1"
kind = "controller"
[[topology.links]]
name = "l1"
a = "sw1"
b = "h1"
[[topology.links]]
name = "l2"
a = "sw1"
b = "h2"
"#;

    fn write_exp(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("exp.toml");
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn experiment_with_repetitions() {
        let (emulator, fakes) = Emulator::fake();
        fakes.engine.set_exec_handler(ping_handler());
        let dir = tempfile::tempdir().unwrap();
        let body = format!(
            "repetitions = 3\n\n[[events]]\naction = \"ping\"\ntarget = [\"h1\", \"h2\"]\nargs = {{ count = 10 }}\n\n[[events]]\nat_ms = 5\naction = \"link-down\"\ntarget = [\"l1\"]\n\n[[events]]\nat_ms = 5\naction = \"exec\"\ntarget = [\"h1\"]\nargs = {{ cmd = \"echo hi there\" }}\nparallel = true\n[[events]]\nat_ms = 5\naction = \"exec\"\ntarget = [\"h2\"]\nargs = {{ cmd = [\"echo\", \"x\"] }}\nparallel = true\n{BASE}"
        );
        let path = write_exp(dir.path(), &body);
        let (out, report) = run_experiment_file(&emulator, &path, None).unwrap();
        assert_eq!(out, dir.path().join("exp.report.json"));
        assert_eq!(report.runs.len(), 3);
        assert_eq!(report.failed_runs(), 0, "{:#?}", report.runs[0]);
        let ping = report.runs[0].events[0].ping.as_ref().unwrap();
        assert_eq!((ping.sent, ping.received, ping.loss_percent), (10, 10, 0.0));
        assert_eq!(report.runs[0].events[2].output, vec!["hi there"]);
        assert_eq!(report.mean.loss_percent, Some(0.0));
        assert_eq!(report.mean.first_ping_ms, Some(9.0));
        assert_eq!(fakes.engine.total_containers(), 0);
        // replays share topology and schema
        let (_, again) = run_experiment_file(&emulator, &path, None).unwrap();
        assert_eq!(again.topology, report.topology);
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
        assert_eq!(v["runs"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn failing_event_still_tears_down() {
        let (emulator, fakes) = Emulator::fake();
        let dir = tempfile::tempdir().unwrap();
        let body = format!("[[events]]\naction = \"pause\"\ntarget = [\"nope\"]\n[[events]]\naction = \"list\"\ntarget = [\"nodes\"]\n{BASE}");
        let path = write_exp(dir.path(), &body);
        let (_, report) = run_experiment_file(&emulator, &path, None).unwrap();
        assert_eq!(report.failed_runs(), 1);
        assert_eq!(report.runs[0].events.len(), 1, "stops at the failing event");
        assert_eq!(fakes.engine.total_containers(), 0);
    }

    #[test]
    fn schema_errors_name_the_field() {
        let (emulator, _) = Emulator::fake();
        let dir = tempfile::tempdir().unwrap();
        let cases = [
            (
                format!("[[events]]\naction = \"frobnicate\"\n{BASE}"),
                "events[0].action",
            ),
            (
                format!("[[events]]\naction = \"ping\"\ntarget = [\"h1\"]\n{BASE}"),
                "events[0].target",
            ),
            (format!("repetitions = 0\n{BASE}"), "repetitions"),
            ("repetitions = 2\n".to_string(), "topology"),
            (format!("bogus = 1\n{BASE}"), "bogus"),
            (
                format!(
                    "[[events]]\naction = \"link-down\"\ntarget = [\"l1\"]\nparallel = true\n{BASE}"
                ),
                "events[0].parallel",
            ),
        ];
        for (body, needle) in cases {
            let path = write_exp(dir.path(), &body);
            let err = run_experiment_file(&emulator, &path, None).unwrap_err();
            assert!(err.is_schema(), "{err}");
            assert!(err.to_string().contains(needle), "{err} lacks {needle}");
        }
    }

    #[test]
    fn topology_file_reference() {
        let (emulator, fakes) = Emulator::fake();
        let dir = tempfile::tempdir().unwrap();
        let topo = BASE.replace("topology.", "");
        fs::write(dir.path().join("star.toml"), topo).unwrap();
        let path = write_exp(
            dir.path(),
            "topology_file = \"star.toml\"\nattach_controller = false\n",
        );
        let (_, report) = run_experiment_file(&emulator, &path, None).unwrap();
        assert_eq!(report.topology.nodes.len(), 4);
        assert!(report.runs[0].ok);
        assert_eq!(fakes.engine.total_containers(), 0);
    }
}
