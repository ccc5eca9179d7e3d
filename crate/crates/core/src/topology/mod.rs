// SPDX-License-Identifier: Apache-2.0

//! Declarative model of an emulated network.
//!
//! A [`Topology`] is a plain value: node specs, link specs and a `runnable`
//! marker. Nothing in this module touches the host; the orchestrator turns
//! a validated topology into containers and links.

mod file;
mod generate;

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use file::{FileError, LinkEntry, NodeEntry, TopologyFile};
pub use generate::{
    fidelity_tree, generate, generate_mesh, generate_star, generate_tree, probe_pair,
    single_switch, Family, Probes, FIDELITY_BACKGROUND_PAIRS, REFERENCE_SWEEP_SIZES,
};

/// Image references used when a node spec does not name one.
///
/// These are configuration: the defaults can be overridden through the
/// `VEMUL_IMAGE_SWITCH`, `VEMUL_IMAGE_CONTROLLER` and `VEMUL_IMAGE_HOST`
/// environment variables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSet {
    pub switch: String,
    pub controller: String,
    pub host: String,
}

impl Default for ImageSet {
    fn default() -> Self {
        Self {
            switch: "vemul/whitebox:latest".into(),
            controller: "onosproject/onos:2.7-latest".into(),
            host: "vemul/host:latest".into(),
        }
    }
}

impl ImageSet {
    pub fn from_env() -> Self {
        let mut set = Self::default();
        if let Ok(v) = std::env::var("VEMUL_IMAGE_SWITCH") {
            set.switch = v;
        }
        if let Ok(v) = std::env::var("VEMUL_IMAGE_CONTROLLER") {
            set.controller = v;
        }
        if let Ok(v) = std::env::var("VEMUL_IMAGE_HOST") {
            set.host = v;
        }
        set
    }

    pub fn for_kind(&self, kind: NodeKind) -> &str {
        match kind {
            NodeKind::Host => &self.host,
            NodeKind::WhiteboxSwitch => &self.switch,
            NodeKind::Controller => &self.controller,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeKind {
    Host,
    WhiteboxSwitch,
    Controller,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Host => "host",
            NodeKind::WhiteboxSwitch => "whitebox-switch",
            NodeKind::Controller => "controller",
        }
    }

    /// Nodes that take part in the data plane.
    pub fn is_data_plane(self) -> bool {
        matches!(self, NodeKind::Host | NodeKind::WhiteboxSwitch)
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NodeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "host" => Ok(NodeKind::Host),
            "whitebox-switch" | "whitebox" | "switch" => Ok(NodeKind::WhiteboxSwitch),
            "controller" => Ok(NodeKind::Controller),
            other => Err(format!("unknown node kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HostRole {
    Client,
    Server,
    #[default]
    None,
}

impl FromStr for HostRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "client" => Ok(HostRole::Client),
            "server" => Ok(HostRole::Server),
            "none" => Ok(HostRole::None),
            other => Err(format!("unknown role `{other}`")),
        }
    }
}

/// Address and prefix length of a host's data interface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IpConfig {
    pub addr: Ipv4Addr,
    pub prefix_len: u8,
}

impl IpConfig {
    pub fn new(addr: Ipv4Addr, prefix_len: u8) -> Result<Self, String> {
        if prefix_len > 32 {
            return Err(format!("prefix length {prefix_len} exceeds 32"));
        }
        Ok(Self { addr, prefix_len })
    }

    /// Parses the `ip` / `mask` pair used in topology files (`"10.0.0.1"`, `"24"`).
    pub fn from_parts(ip: &str, mask: &str) -> Result<Self, String> {
        let addr: Ipv4Addr = ip
            .trim()
            .parse()
            .map_err(|_| format!("invalid address `{ip}`"))?;
        let prefix_len: u8 = mask
            .trim()
            .parse()
            .map_err(|_| format!("invalid mask `{mask}`"))?;
        Self::new(addr, prefix_len)
    }
}

impl fmt::Display for IpConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.addr, self.prefix_len)
    }
}

impl FromStr for IpConfig {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once('/') {
            Some((ip, mask)) => Self::from_parts(ip, mask),
            None => Err(format!("expected <addr>/<prefix>, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ResourceLimits {
    /// Fraction of one core, e.g. `0.5` for half a core.
    pub cpu_quota: Option<f64>,
    pub memory_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    pub kind: NodeKind,
    pub image: String,
    #[serde(default)]
    pub role: HostRole,
    pub ip_config: Option<IpConfig>,
    pub limits: Option<ResourceLimits>,
}

impl NodeSpec {
    pub fn new(name: impl Into<String>, kind: NodeKind, image: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind,
            image: image.into(),
            role: HostRole::None,
            ip_config: None,
            limits: None,
        }
    }

    pub fn whitebox(name: impl Into<String>) -> Self {
        Self::new(name, NodeKind::WhiteboxSwitch, ImageSet::from_env().switch)
    }

    pub fn controller(name: impl Into<String>) -> Self {
        Self::new(name, NodeKind::Controller, ImageSet::from_env().controller)
    }

    pub fn host(name: impl Into<String>, ip: IpConfig) -> Self {
        let mut spec = Self::new(name, NodeKind::Host, ImageSet::from_env().host);
        spec.ip_config = Some(ip);
        spec
    }

    pub fn with_role(mut self, role: HostRole) -> Self {
        self.role = role;
        self
    }

    pub fn with_limits(mut self, limits: ResourceLimits) -> Self {
        self.limits = Some(limits);
        self
    }

    pub fn with_image(mut self, image: impl Into<String>) -> Self {
        self.image = image.into();
        self
    }

    /// Checks the per-node invariants, returning the first offending field.
    pub fn check(&self) -> Result<(), (&'static str, String)> {
        if self.name.trim().is_empty() {
            return Err(("name", "must not be empty".into()));
        }
        if self
            .name
            .chars()
            .any(|c| c.is_whitespace() || c.is_control())
        {
            return Err(("name", "must not contain whitespace".into()));
        }
        if self.image.trim().is_empty() {
            return Err(("image", "must not be empty".into()));
        }
        if self.ip_config.is_some() && self.kind != NodeKind::Host {
            return Err((
                "ip_config",
                format!("only hosts carry an address, not {}", self.kind),
            ));
        }
        if self.role != HostRole::None && self.kind != NodeKind::Host {
            return Err((
                "role",
                format!("only hosts carry a role, not {}", self.kind),
            ));
        }
        if let Some(limits) = &self.limits {
            if let Some(q) = limits.cpu_quota {
                if !(q > 0.0 && q.is_finite()) {
                    return Err(("cpu_quota", format!("must be > 0, got {q}")));
                }
            }
            if limits.memory_bytes == Some(0) {
                return Err(("memory_bytes", "must be > 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkModel {
    Veth,
    GreTunnel,
    VxlanTunnel,
}

impl LinkModel {
    pub fn is_tunnel(self) -> bool {
        matches!(self, LinkModel::GreTunnel | LinkModel::VxlanTunnel)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LinkModel::Veth => "veth",
            LinkModel::GreTunnel => "gre-tunnel",
            LinkModel::VxlanTunnel => "vxlan-tunnel",
        }
    }
}

impl FromStr for LinkModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "veth" => Ok(LinkModel::Veth),
            "gre-tunnel" | "gre" => Ok(LinkModel::GreTunnel),
            "vxlan-tunnel" | "vxlan" => Ok(LinkModel::VxlanTunnel),
            other => Err(format!("unknown link model `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkClass {
    #[default]
    PointToPoint,
    Bus,
}

impl FromStr for LinkClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "point-to-point" | "p2p" => Ok(LinkClass::PointToPoint),
            "bus" => Ok(LinkClass::Bus),
            other => Err(format!("unknown link class `{other}`")),
        }
    }
}

/// Display-only link typing (host-facing vs switch-facing).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkFacing {
    Host,
    Switch,
}

impl LinkFacing {
    pub fn as_str(self) -> &'static str {
        match self {
            LinkFacing::Host => "host",
            LinkFacing::Switch => "switch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub name: String,
    pub endpoint_a: String,
    pub endpoint_b: String,
    pub model: LinkModel,
    pub class: LinkClass,
    #[serde(default)]
    pub members: Vec<String>,
    pub tunnel_key: Option<u32>,
}

impl LinkSpec {
    pub fn veth(name: impl Into<String>, a: impl Into<String>, b: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            endpoint_a: a.into(),
            endpoint_b: b.into(),
            model: LinkModel::Veth,
            class: LinkClass::PointToPoint,
            members: Vec::new(),
            tunnel_key: None,
        }
    }

    pub fn tunnel(
        name: impl Into<String>,
        a: impl Into<String>,
        b: impl Into<String>,
        model: LinkModel,
        key: u32,
    ) -> Self {
        Self {
            model,
            tunnel_key: Some(key),
            ..Self::veth(name, a, b)
        }
    }

    pub fn bus(name: impl Into<String>, members: Vec<String>) -> Self {
        Self {
            name: name.into(),
            endpoint_a: String::new(),
            endpoint_b: String::new(),
            model: LinkModel::Veth,
            class: LinkClass::Bus,
            members,
            tunnel_key: None,
        }
    }

    /// Node names this link touches.
    pub fn endpoints(&self) -> Vec<&str> {
        match self.class {
            LinkClass::PointToPoint => vec![self.endpoint_a.as_str(), self.endpoint_b.as_str()],
            LinkClass::Bus => self.members.iter().map(String::as_str).collect(),
        }
    }

    pub fn touches(&self, node: &str) -> bool {
        self.endpoints().contains(&node)
    }

    /// Host-facing when any endpoint is a host, in `topology`.
    pub fn facing(&self, topology: &Topology) -> LinkFacing {
        let host = self
            .endpoints()
            .iter()
            .any(|n| topology.node(n).map(|s| s.kind) == Some(NodeKind::Host));
        if host {
            LinkFacing::Host
        } else {
            LinkFacing::Switch
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("duplicate {what} name `{name}`")]
    DuplicateName { what: &'static str, name: String },
    #[error("invalid spec for `{name}`: field `{field}` {reason}")]
    InvalidSpec {
        name: String,
        field: &'static str,
        reason: String,
    },
    #[error("link `{link}` references unknown node `{endpoint}`")]
    UnknownEndpoint { link: String, endpoint: String },
    #[error("link `{link}` reuses tunnel key {key}")]
    DuplicateTunnelKey { link: String, key: u32 },
    #[error("link `{link}` connects `{node}` to itself")]
    SelfLoop { link: String, node: String },
    #[error("{family} topology needs at least {min} switches, got {got}")]
    SizeTooSmall {
        family: &'static str,
        got: usize,
        min: usize,
    },
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("unknown link `{0}`")]
    UnknownLink(String),
}

/// One invariant violation reported by [`Topology::validate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// Node or link name the violation is attached to.
    pub subject: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.subject, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    nodes: IndexMap<String, NodeSpec>,
    links: IndexMap<String, LinkSpec>,
    /// When set, the data-plane graph must be connected.
    pub runnable: bool,
}

impl Topology {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn runnable() -> Self {
        Self {
            runnable: true,
            ..Self::default()
        }
    }

    pub fn add_node(&mut self, spec: NodeSpec) -> Result<String, TopologyError> {
        if let Err((field, reason)) = spec.check() {
            return Err(TopologyError::InvalidSpec {
                name: spec.name,
                field,
                reason,
            });
        }
        if self.nodes.contains_key(&spec.name) {
            return Err(TopologyError::DuplicateName {
                what: "node",
                name: spec.name,
            });
        }
        let name = spec.name.clone();
        self.nodes.insert(name.clone(), spec);
        Ok(name)
    }

    pub fn add_link(&mut self, spec: LinkSpec) -> Result<String, TopologyError> {
        self.check_link(&spec)?;
        let name = spec.name.clone();
        self.links.insert(name.clone(), spec);
        Ok(name)
    }

    fn check_link(&self, spec: &LinkSpec) -> Result<(), TopologyError> {
        let invalid = |field: &'static str, reason: &str| TopologyError::InvalidSpec {
            name: spec.name.clone(),
            field,
            reason: reason.into(),
        };
        if spec.name.trim().is_empty() {
            return Err(invalid("name", "must not be empty"));
        }
        if self.links.contains_key(&spec.name) {
            return Err(TopologyError::DuplicateName {
                what: "link",
                name: spec.name.clone(),
            });
        }
        match spec.class {
            LinkClass::PointToPoint => {
                for endpoint in [&spec.endpoint_a, &spec.endpoint_b] {
                    if !self.nodes.contains_key(endpoint) {
                        return Err(TopologyError::UnknownEndpoint {
                            link: spec.name.clone(),
                            endpoint: endpoint.clone(),
                        });
                    }
                }
                if spec.endpoint_a == spec.endpoint_b {
                    return Err(TopologyError::SelfLoop {
                        link: spec.name.clone(),
                        node: spec.endpoint_a.clone(),
                    });
                }
            }
            LinkClass::Bus => {
                if spec.model.is_tunnel() {
                    return Err(invalid("model", "bus links cannot be tunnels"));
                }
                for member in &spec.members {
                    if !self.nodes.contains_key(member) {
                        return Err(TopologyError::UnknownEndpoint {
                            link: spec.name.clone(),
                            endpoint: member.clone(),
                        });
                    }
                }
                let distinct: HashSet<&String> = spec.members.iter().collect();
                if distinct.len() != spec.members.len() {
                    return Err(invalid("members", "must be distinct"));
                }
                if distinct.len() < 2 {
                    return Err(invalid("members", "needs at least 2 nodes"));
                }
            }
        }
        match (spec.model.is_tunnel(), spec.tunnel_key) {
            (true, None) => return Err(invalid("tunnel_key", "is required for tunnel links")),
            (false, Some(_)) => return Err(invalid("tunnel_key", "is only valid on tunnel links")),
            (true, Some(key)) => {
                if self.links.values().any(|l| l.tunnel_key == Some(key)) {
                    return Err(TopologyError::DuplicateTunnelKey {
                        link: spec.name.clone(),
                        key,
                    });
                }
            }
            (false, None) => {}
        }
        Ok(())
    }

    /// Removes a node and every link touching it; returns the removed link names.
    pub fn remove_node(&mut self, name: &str) -> Result<(NodeSpec, Vec<String>), TopologyError> {
        let spec = self
            .nodes
            .shift_remove(name)
            .ok_or_else(|| TopologyError::UnknownNode(name.to_string()))?;
        let doomed: Vec<String> = self
            .links
            .values()
            .filter(|l| l.touches(name))
            .map(|l| l.name.clone())
            .collect();
        for link in &doomed {
            self.links.shift_remove(link);
        }
        Ok((spec, doomed))
    }

    pub fn remove_link(&mut self, name: &str) -> Result<LinkSpec, TopologyError> {
        self.links
            .shift_remove(name)
            .ok_or_else(|| TopologyError::UnknownLink(name.to_string()))
    }

    pub fn node(&self, name: &str) -> Option<&NodeSpec> {
        self.nodes.get(name)
    }

    pub fn node_mut(&mut self, name: &str) -> Option<&mut NodeSpec> {
        self.nodes.get_mut(name)
    }

    pub fn link(&self, name: &str) -> Option<&LinkSpec> {
        self.links.get(name)
    }

    /// Nodes in insertion order.
    pub fn nodes(&self) -> impl ExactSizeIterator<Item = &NodeSpec> {
        self.nodes.values()
    }

    /// Links in insertion order.
    pub fn links(&self) -> impl ExactSizeIterator<Item = &LinkSpec> {
        self.links.values()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn count_kind(&self, kind: NodeKind) -> usize {
        self.nodes.values().filter(|n| n.kind == kind).count()
    }

    pub fn nodes_of_kind(&self, kind: NodeKind) -> impl Iterator<Item = &NodeSpec> {
        self.nodes.values().filter(move |n| n.kind == kind)
    }

    /// Point-to-point links whose endpoints are both switches.
    pub fn inter_switch_links(&self) -> usize {
        self.links
            .values()
            .filter(|l| l.class == LinkClass::PointToPoint)
            .filter(|l| {
                [&l.endpoint_a, &l.endpoint_b].iter().all(|n| {
                    self.nodes.get(n.as_str()).map(|s| s.kind) == Some(NodeKind::WhiteboxSwitch)
                })
            })
            .count()
    }

    /// Neighbour lists over point-to-point links between data-plane nodes.
    pub fn adjacency(&self) -> HashMap<&str, Vec<&str>> {
        let mut adj: HashMap<&str, Vec<&str>> = self
            .nodes
            .values()
            .filter(|n| n.kind.is_data_plane())
            .map(|n| (n.name.as_str(), Vec::new()))
            .collect();
        for link in self
            .links
            .values()
            .filter(|l| l.class == LinkClass::PointToPoint)
        {
            let (a, b) = (link.endpoint_a.as_str(), link.endpoint_b.as_str());
            if adj.contains_key(a) && adj.contains_key(b) {
                adj.get_mut(a).unwrap().push(b);
                adj.get_mut(b).unwrap().push(a);
            }
        }
        adj
    }

    /// Reports every invariant violation; an empty list means the topology is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |subject: &str, message: String| {
            out.push(Violation {
                subject: subject.to_string(),
                message,
            })
        };

        for (key, node) in &self.nodes {
            if key != &node.name {
                push(
                    key,
                    format!("indexed under a different name `{}`", node.name),
                );
            }
            if let Err((field, reason)) = node.check() {
                push(&node.name, format!("field `{field}` {reason}"));
            }
        }

        let mut keys: HashMap<u32, &str> = HashMap::new();
        for link in self.links.values() {
            match link.class {
                LinkClass::PointToPoint => {
                    for endpoint in [&link.endpoint_a, &link.endpoint_b] {
                        if !self.nodes.contains_key(endpoint) {
                            push(&link.name, format!("unknown endpoint `{endpoint}`"));
                        }
                    }
                    if link.endpoint_a == link.endpoint_b {
                        push(&link.name, "self-loop".into());
                    }
                }
                LinkClass::Bus => {
                    let distinct: BTreeSet<&String> = link.members.iter().collect();
                    if distinct.len() < 2 || distinct.len() != link.members.len() {
                        push(&link.name, "bus needs at least 2 distinct members".into());
                    }
                    for member in &link.members {
                        if !self.nodes.contains_key(member) {
                            push(&link.name, format!("unknown member `{member}`"));
                        }
                    }
                }
            }
            match (link.model.is_tunnel(), link.tunnel_key) {
                (true, Some(key)) => {
                    if let Some(first) = keys.insert(key, &link.name) {
                        push(
                            &link.name,
                            format!("tunnel key {key} already used by `{first}`"),
                        );
                    }
                }
                (true, None) => push(&link.name, "tunnel link without tunnel_key".into()),
                (false, Some(_)) => push(&link.name, "tunnel_key on a non-tunnel link".into()),
                (false, None) => {}
            }
        }

        if self.runnable {
            let adj = self.adjacency();
            if let Some(start) = self.nodes.values().find(|n| n.kind.is_data_plane()) {
                let mut seen: HashSet<&str> = HashSet::from([start.name.as_str()]);
                let mut queue = VecDeque::from([start.name.as_str()]);
                while let Some(n) = queue.pop_front() {
                    for &m in &adj[n] {
                        if seen.insert(m) {
                            queue.push_back(m);
                        }
                    }
                }
                let stranded: Vec<&str> = self
                    .nodes
                    .values()
                    .filter(|n| n.kind.is_data_plane() && !seen.contains(n.name.as_str()))
                    .map(|n| n.name.as_str())
                    .collect();
                if !stranded.is_empty() {
                    push(
                        &start.name,
                        format!(
                            "data plane is disconnected; unreachable: {}",
                            stranded.join(", ")
                        ),
                    );
                }
            }
        }
        out
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_empty()
    }

    /// Structural fingerprint: node and link specs in insertion order.
    pub fn same_structure(&self, other: &Topology) -> bool {
        self.nodes.iter().eq(other.nodes.iter()) && self.links.iter().eq(other.links.iter())
    }

    /// Next free `10.0.0.N/24` host address, in creation order.
    pub fn next_host_ip(&self) -> IpConfig {
        let used: HashSet<Ipv4Addr> = self
            .nodes
            .values()
            .filter_map(|n| n.ip_config)
            .map(|c| c.addr)
            .collect();
        (1..=254u8)
            .map(|n| Ipv4Addr::new(10, 0, 0, n))
            .find(|a| !used.contains(a))
            .map(|addr| IpConfig {
                addr,
                prefix_len: 24,
            })
            .unwrap_or(IpConfig {
                addr: Ipv4Addr::new(10, 0, 1, 1),
                prefix_len: 16,
            })
    }
}
