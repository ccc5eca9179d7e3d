// SPDX-License-Identifier: Apache-2.0

//! Binds a validated topology to live containers and links.
//!
//! [`Emulator::up`] creates every container, joins them on the management
//! bus, wires the data links and brings each node model up. Any failure
//! along the way tears down whatever was created before the error is
//! returned. The resulting [`Emulation`] is the handle for run-time changes
//! and for teardown.

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fabric::{
    Fabric, FabricError, FakeNet, IpCommandBackend, LinkHandle, LinkModelKind, LinkState,
    NetBackend, Netns, TunnelKind, MGMT_IFNAME, MGMT_SUBNET,
};
use crate::ovsdb::{
    FakeProbe, FakeSwitches, OvsdbManager, PortProbe, SwitchError, SwitchManager, TcpProbe,
    OPENFLOW_PORT,
};
use crate::par::{self, Mode};
use crate::runtime::{
    ContainerEngine, DockerEngine, EngineConfig, ExecOutput, FakeEngine, NodeHandle, OutputStream,
    RuntimeError, StatSnapshot,
};
use crate::topology::{
    LinkClass, LinkModel, LinkSpec, NodeKind, NodeSpec, Topology, TopologyError, Violation,
};

/// Bridge created on every whitebox switch at bring-up.
pub const DEFAULT_BRIDGE: &str = "br_oper0";
/// Name of the management bus link.
pub const BUS_NAME: &str = "mgmt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Building,
    Up,
    TearingDown,
    Down,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Building => "building",
            Phase::Up => "up",
            Phase::TearingDown => "tearing-down",
            Phase::Down => "down",
        })
    }
}

/// OpenFlow controller address as switches expect it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControllerTarget {
    pub ip: Ipv4Addr,
    pub port: u16,
}

impl ControllerTarget {
    pub fn new(ip: Ipv4Addr) -> Self {
        Self {
            ip,
            port: OPENFLOW_PORT,
        }
    }
}

impl fmt::Display for ControllerTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tcp:{}:{}", self.ip, self.port)
    }
}

impl FromStr for ControllerTarget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let rest = s
            .strip_prefix("tcp:")
            .ok_or_else(|| format!("controller target `{s}` must start with tcp:"))?;
        let (ip, port) = match rest.rsplit_once(':') {
            Some((ip, port)) => (ip, port.parse().map_err(|_| format!("bad port in `{s}`"))?),
            None => (rest, OPENFLOW_PORT),
        };
        let ip = ip.parse().map_err(|_| format!("bad address in `{s}`"))?;
        Ok(Self { ip, port })
    }
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("topology is not valid: {}", summarize(.0))]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("node `{node}`: {source}")]
    Node { node: String, source: RuntimeError },
    #[error("link `{link}`: {source}")]
    Link { link: String, source: FabricError },
    #[error("switch `{node}`: {source}")]
    Switch { node: String, source: SwitchError },
    #[error("controller `{node}` not ready: {reason}")]
    ControllerNotReady { node: String, reason: String },
    #[error("no such node `{0}`")]
    NoSuchNode(String),
    #[error("no such link `{0}`")]
    NoSuchLink(String),
    #[error("`{0}` is not a controller")]
    NotAController(String),
    #[error("`{0}` is not a whitebox switch")]
    NotASwitch(String),
    #[error("no such bridge `{bridge}` on `{switch}`")]
    NoSuchBridge { switch: String, bridge: String },
    #[error("`{switch}` did not connect to {target} within {timeout_ms} ms")]
    ControllerConnectTimeout {
        switch: String,
        target: String,
        timeout_ms: u64,
    },
    #[error("`{0}` has no management address")]
    NoManagementAddress(String),
    #[error("operation needs phase up, emulation is {0}")]
    WrongPhase(Phase),
    #[error("network fabric: {0}")]
    Fabric(#[source] FabricError),
    #[error("container engine: {0}")]
    Runtime(#[source] RuntimeError),
    #[error("{cause}; rollback left strays: {}", .strays.join(", "))]
    RollbackFailed {
        cause: Box<OrchestratorError>,
        strays: Vec<String>,
    },
    #[error("teardown left residue: {}", .0.join(", "))]
    Residue(Vec<String>),
}

fn summarize(v: &[Violation]) -> String {
    v.iter()
        .map(|x| format!("{}: {}", x.subject, x.message))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone)]
pub struct EmulatorConfig {
    pub bridge: String,
    pub controller_ready_timeout: Duration,
    pub controller_connect_timeout: Duration,
    pub exec_timeout: Duration,
    pub mgmt_subnet: (Ipv4Addr, u8),
    pub mode: Mode,
}

impl Default for EmulatorConfig {
    fn default() -> Self {
        Self {
            bridge: DEFAULT_BRIDGE.into(),
            controller_ready_timeout: Duration::from_secs(120),
            controller_connect_timeout: Duration::from_secs(30),
            exec_timeout: Duration::from_secs(60),
            mgmt_subnet: MGMT_SUBNET,
            mode: Mode::best_available(),
        }
    }
}

/// Fake backends wired into an [`Emulator`], kept for inspection and fault
/// injection.
#[derive(Clone)]
pub struct Fakes {
    pub engine: Arc<FakeEngine>,
    pub net: Arc<FakeNet>,
    pub switches: Arc<FakeSwitches>,
    pub probe: Arc<FakeProbe>,
}

/// Factory for emulations over a fixed set of backends.
#[derive(Clone)]
pub struct Emulator {
    pub engine: Arc<dyn ContainerEngine>,
    pub net: Arc<dyn NetBackend>,
    pub switches: Arc<dyn SwitchManager>,
    pub probe: Arc<dyn PortProbe>,
    pub config: EmulatorConfig,
}

/// Short unique id for a run; container names embed it.
pub fn new_run_id() -> String {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let nanos = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    let mut h = Sha256::new();
    h.update(nanos.to_le_bytes());
    h.update(std::process::id().to_le_bytes());
    h.update(COUNTER.fetch_add(1, Ordering::Relaxed).to_le_bytes());
    h.finalize()[..4]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl Emulator {
    pub fn new(
        engine: Arc<dyn ContainerEngine>,
        net: Arc<dyn NetBackend>,
        switches: Arc<dyn SwitchManager>,
        probe: Arc<dyn PortProbe>,
    ) -> Self {
        Self {
            engine,
            net,
            switches,
            probe,
            config: EmulatorConfig::default(),
        }
    }

    /// Local container engine, iproute2 and OVSDB over the bus.
    ///
    /// `VEMUL_OVS_DATAPATH` selects the switch datapath type (e.g. `netdev`).
    pub fn local() -> Result<Self, OrchestratorError> {
        let engine =
            DockerEngine::connect(EngineConfig::from_env()).map_err(OrchestratorError::Runtime)?;
        let switches = OvsdbManager {
            datapath_type: std::env::var("VEMUL_OVS_DATAPATH")
                .ok()
                .filter(|s| !s.is_empty()),
            ..OvsdbManager::default()
        };
        Ok(Self::new(
            Arc::new(engine),
            Arc::new(IpCommandBackend::default()),
            Arc::new(switches),
            Arc::new(TcpProbe::default()),
        ))
    }

    /// Everything in memory; nothing touches the host.
    pub fn fake() -> (Self, Fakes) {
        let fakes = Fakes {
            engine: Arc::new(FakeEngine::new()),
            net: Arc::new(FakeNet::new()),
            switches: Arc::new(FakeSwitches::new()),
            probe: Arc::new(FakeProbe::default()),
        };
        let emu = Self::new(
            fakes.engine.clone(),
            fakes.net.clone(),
            fakes.switches.clone(),
            fakes.probe.clone(),
        );
        (emu, fakes)
    }

    pub fn with_config(mut self, config: EmulatorConfig) -> Self {
        self.config = config;
        self
    }

    pub fn up(&self, topology: Topology) -> Result<Emulation, OrchestratorError> {
        self.up_as(topology, &new_run_id())
    }

    /// Like [`Emulator::up`] with a caller-chosen run id.
    pub fn up_as(&self, topology: Topology, run_id: &str) -> Result<Emulation, OrchestratorError> {
        let violations = topology.validate();
        if !violations.is_empty() {
            return Err(OrchestratorError::Invalid(violations));
        }
        let (base, prefix) = self.config.mgmt_subnet;
        let fabric = Fabric::with_subnet(self.net.clone(), run_id, base, prefix);
        fabric
            .check_privileges()
            .map_err(OrchestratorError::Fabric)?;
        let root_before = fabric.root_snapshot().map_err(OrchestratorError::Fabric)?;
        let mut emu = Emulation {
            run_id: run_id.to_string(),
            topology,
            handles: IndexMap::new(),
            links: IndexMap::new(),
            bus: None,
            phase: Phase::Building,
            phase_log: vec![Phase::Building],
            root_before,
            engine: self.engine.clone(),
            fabric,
            switches: self.switches.clone(),
            probe: self.probe.clone(),
            config: self.config.clone(),
        };
        match emu.build() {
            Ok(()) => {
                emu.enter(Phase::Up);
                Ok(emu)
            }
            Err(cause) => {
                log::warn!("bring-up of run {run_id} failed, rolling back: {cause}");
                let strays = emu.teardown();
                if strays.is_empty() {
                    Err(cause)
                } else {
                    Err(OrchestratorError::RollbackFailed {
                        cause: Box::new(cause),
                        strays,
                    })
                }
            }
        }
    }

    /// Removes managed containers (one run's, or all) and leftover bus
    /// bridges. Returns the identifiers removed.
    pub fn clean(&self, run_id: Option<&str>) -> Result<Vec<String>, OrchestratorError> {
        let stale = self
            .engine
            .list_managed(run_id)
            .map_err(OrchestratorError::Runtime)?;
        let results = par::map(self.config.mode, &stale, |h| {
            let mut h = h.clone();
            self.engine.destroy_container(&mut h).map(|_| {
                format!(
                    "container {} ({}/{})",
                    &h.container_id[..h.container_id.len().min(12)],
                    h.run_id,
                    h.node_name
                )
            })
        });
        let mut removed = Vec::new();
        for r in results {
            removed.push(r.map_err(OrchestratorError::Runtime)?);
        }
        if run_id.is_none() {
            // bus bridges are named vmb + 10 hex digits; other legs vanish with their containers
            for name in self
                .net
                .list_links(Netns::Root)
                .map_err(OrchestratorError::Fabric)?
            {
                let is_bus = name.len() == 13
                    && name.starts_with("vmb")
                    && name[3..].bytes().all(|b| b.is_ascii_hexdigit());
                if is_bus && self.net.delete_link(Netns::Root, &name).is_ok() {
                    removed.push(format!("bridge {name}"));
                }
            }
        }
        Ok(removed)
    }
}

/// A topology bound to live containers and links.
pub struct Emulation {
    run_id: String,
    topology: Topology,
    handles: IndexMap<String, NodeHandle>,
    links: IndexMap<String, LinkHandle>,
    bus: Option<LinkHandle>,
    phase: Phase,
    phase_log: Vec<Phase>,
    root_before: Vec<String>,
    engine: Arc<dyn ContainerEngine>,
    fabric: Fabric,
    switches: Arc<dyn SwitchManager>,
    probe: Arc<dyn PortProbe>,
    config: EmulatorConfig,
}

impl Emulation {
    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Every phase entered so far, in order.
    pub fn phase_log(&self) -> &[Phase] {
        &self.phase_log
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn handle(&self, node: &str) -> Option<&NodeHandle> {
        self.handles.get(node)
    }

    pub fn handles(&self) -> impl Iterator<Item = &NodeHandle> {
        self.handles.values()
    }

    pub fn link(&self, name: &str) -> Option<&LinkHandle> {
        self.links.get(name)
    }

    pub fn links(&self) -> impl Iterator<Item = &LinkHandle> {
        self.links.values()
    }

    pub fn bus(&self) -> Option<&LinkHandle> {
        self.bus.as_ref()
    }

    pub fn fabric(&self) -> &Fabric {
        &self.fabric
    }

    pub fn engine(&self) -> &Arc<dyn ContainerEngine> {
        &self.engine
    }

    pub fn config(&self) -> &EmulatorConfig {
        &self.config
    }

    /// Root-namespace interfaces recorded before bring-up.
    pub fn root_before(&self) -> &[String] {
        &self.root_before
    }

    fn enter(&mut self, phase: Phase) {
        self.phase = phase;
        self.phase_log.push(phase);
    }

    fn require_up(&self) -> Result<(), OrchestratorError> {
        if self.phase == Phase::Up {
            Ok(())
        } else {
            Err(OrchestratorError::WrongPhase(self.phase))
        }
    }

    fn node_err(node: &str) -> impl FnOnce(RuntimeError) -> OrchestratorError + '_ {
        move |source| OrchestratorError::Node {
            node: node.to_string(),
            source,
        }
    }

    fn link_err(link: &str) -> impl FnOnce(FabricError) -> OrchestratorError + '_ {
        move |source| OrchestratorError::Link {
            link: link.to_string(),
            source,
        }
    }

    fn switch_err(node: &str) -> impl FnOnce(SwitchError) -> OrchestratorError + '_ {
        move |source| match source {
            SwitchError::NoSuchBridge { switch, bridge } => {
                OrchestratorError::NoSuchBridge { switch, bridge }
            }
            source => OrchestratorError::Switch {
                node: node.to_string(),
                source,
            },
        }
    }

    fn get(&self, node: &str) -> Result<&NodeHandle, OrchestratorError> {
        self.handles
            .get(node)
            .ok_or_else(|| OrchestratorError::NoSuchNode(node.to_string()))
    }

    fn build(&mut self) -> Result<(), OrchestratorError> {
        // containers, concurrently
        let specs: Vec<NodeSpec> = self.topology.nodes().cloned().collect();
        let engine = &self.engine;
        let run_id = &self.run_id;
        let created = par::map(self.config.mode, &specs, |spec| {
            engine.create_container(spec, run_id)
        });
        let mut first_err = None;
        for (spec, result) in specs.iter().zip(created) {
            match result {
                Ok(h) => {
                    self.handles.insert(spec.name.clone(), h);
                }
                Err(e) if first_err.is_none() => first_err = Some(Self::node_err(&spec.name)(e)),
                Err(e) => log::warn!("node `{}`: {e}", spec.name),
            }
        }
        if let Some(e) = first_err {
            return Err(e);
        }

        // management bus over every node
        if self.handles.len() >= 2 {
            let members: Vec<&NodeHandle> = self.handles.values().collect();
            let bus = self
                .fabric
                .create_bus(BUS_NAME, &members)
                .map_err(Self::link_err(BUS_NAME))?;
            for b in &bus.bindings {
                if let (Some(h), Some(ip)) = (self.handles.get_mut(&b.node_name), b.addr) {
                    h.mgmt_ip = Some(ip.addr);
                }
            }
            self.bus = Some(bus);
        }

        // data links
        let specs: Vec<LinkSpec> = self.topology.links().cloned().collect();
        for spec in &specs {
            let handle = self.wire(spec)?;
            self.links.insert(spec.name.clone(), handle);
        }

        self.bring_up_all()
    }

    fn wire(&self, spec: &LinkSpec) -> Result<LinkHandle, OrchestratorError> {
        let err = Self::link_err(&spec.name);
        match spec.class {
            LinkClass::Bus => {
                let members = spec
                    .members
                    .iter()
                    .map(|m| self.get(m))
                    .collect::<Result<Vec<_>, _>>()?;
                self.fabric
                    .create_segment(&spec.name, &members)
                    .map_err(err)
            }
            LinkClass::PointToPoint => {
                let a = self.get(&spec.endpoint_a)?;
                let b = self.get(&spec.endpoint_b)?;
                match spec.model {
                    LinkModel::Veth => self.fabric.create_veth_link(&spec.name, a, b).map_err(err),
                    LinkModel::GreTunnel | LinkModel::VxlanTunnel => {
                        let kind = if spec.model == LinkModel::GreTunnel {
                            TunnelKind::Gre
                        } else {
                            TunnelKind::Vxlan
                        };
                        let key = spec.tunnel_key.unwrap_or_default();
                        self.fabric
                            .create_tunnel_link(&spec.name, a, b, kind, key)
                            .map_err(err)
                    }
                }
            }
        }
    }

    /// Data ports a node owns, in numeric order.
    fn data_ports(&self, node: &str) -> Vec<String> {
        let mut ports: Vec<(u32, String)> = self
            .links
            .values()
            .filter_map(|l| l.binding(node))
            .filter_map(|b| {
                let n = b.ifname.strip_prefix("data")?.parse().ok()?;
                Some((n, b.ifname.clone()))
            })
            .collect();
        ports.sort();
        ports.into_iter().map(|(_, name)| name).collect()
    }

    fn bring_up_switch(&self, h: &NodeHandle) -> Result<(), OrchestratorError> {
        let err = || Self::switch_err(&h.node_name);
        self.switches
            .ensure_bridge(h, &self.config.bridge)
            .map_err(err())?;
        for port in self.data_ports(&h.node_name) {
            self.switches
                .add_port(h, &self.config.bridge, &port)
                .map_err(err())?;
        }
        Ok(())
    }

    fn bring_up_host(&self, spec: &NodeSpec, h: &NodeHandle) -> Result<(), OrchestratorError> {
        let Some(ip) = spec.ip_config else {
            return Ok(());
        };
        if !self.data_ports(&h.node_name).iter().any(|p| p == "data0") {
            log::warn!(
                "host `{}` has no data0; address {ip} not assigned",
                h.node_name
            );
            return Ok(());
        }
        self.fabric
            .assign_address(h, "data0", ip)
            .map_err(Self::link_err(&h.node_name))
    }

    fn bring_up_controller(&self, h: &NodeHandle) -> Result<(), OrchestratorError> {
        self.probe
            .wait_listening(h, OPENFLOW_PORT, self.config.controller_ready_timeout)
            .map_err(|reason| OrchestratorError::ControllerNotReady {
                node: h.node_name.clone(),
                reason,
            })
    }

    fn bring_up(&self, h: &NodeHandle) -> Result<(), OrchestratorError> {
        match h.kind {
            NodeKind::WhiteboxSwitch => self.bring_up_switch(h),
            NodeKind::Host => match self.topology.node(&h.node_name) {
                Some(spec) => self.bring_up_host(spec, h),
                None => Ok(()),
            },
            NodeKind::Controller => self.bring_up_controller(h),
        }
    }

    /// Node-model bring-up; switches and controllers are handled
    /// concurrently since each waits on its own daemon.
    fn bring_up_all(&self) -> Result<(), OrchestratorError> {
        let handles: Vec<&NodeHandle> = self.handles.values().collect();
        par::map(self.config.mode, &handles, |h| self.bring_up(h))
            .into_iter()
            .collect()
    }

    /// Destroys links then containers; returns identifiers of anything left.
    fn teardown(&mut self) -> Vec<String> {
        self.enter(Phase::TearingDown);
        let mut strays = Vec::new();
        let names: Vec<String> = self.links.keys().rev().cloned().collect();
        for name in names {
            if let Some(mut l) = self.links.shift_remove(&name) {
                self.fabric.destroy_link(&mut l);
            }
        }
        if let Some(mut bus) = self.bus.take() {
            self.fabric.destroy_link(&mut bus);
        }
        let handles: Vec<NodeHandle> = self.handles.drain(..).map(|(_, h)| h).collect();
        let engine = &self.engine;
        let results = par::map(self.config.mode, &handles, |h| {
            let mut h = h.clone();
            engine.destroy_container(&mut h).err().map(|e| (h, e))
        });
        for (h, e) in results.into_iter().flatten() {
            log::warn!("destroy `{}`: {e}", h.node_name);
            strays.push(format!("container {} ({})", h.container_id, h.node_name));
        }
        match self.engine.list_managed(Some(&self.run_id)) {
            Ok(left) => {
                for h in left {
                    let id = format!("container {} ({})", h.container_id, h.node_name);
                    if !strays.contains(&id) {
                        strays.push(id);
                    }
                }
            }
            Err(e) => strays.push(format!("engine unreachable while verifying teardown: {e}")),
        }
        match self.fabric.root_residue() {
            Ok(left) => strays.extend(left.into_iter().map(|n| format!("interface {n}"))),
            Err(e) => strays.push(format!(
                "root namespace unreadable while verifying teardown: {e}"
            )),
        }
        self.enter(Phase::Down);
        strays
    }

    /// Destroys all links then all containers. Idempotent.
    pub fn down(&mut self) -> Result<(), OrchestratorError> {
        if self.phase == Phase::Down {
            return Ok(());
        }
        let strays = self.teardown();
        if strays.is_empty() {
            Ok(())
        } else {
            Err(OrchestratorError::Residue(strays))
        }
    }

    pub fn get_controller_endpoint(
        &self,
        controller: &str,
    ) -> Result<ControllerTarget, OrchestratorError> {
        let h = self.get(controller)?;
        if h.kind != NodeKind::Controller {
            return Err(OrchestratorError::NotAController(controller.to_string()));
        }
        h.mgmt_ip
            .map(ControllerTarget::new)
            .ok_or_else(|| OrchestratorError::NoManagementAddress(controller.to_string()))
    }

    /// Points a switch bridge at a controller and waits for the connection.
    pub fn set_controller(
        &mut self,
        switch: &str,
        target: &ControllerTarget,
        bridge: &str,
    ) -> Result<(), OrchestratorError> {
        self.require_up()?;
        let h = self.get(switch)?;
        if h.kind != NodeKind::WhiteboxSwitch {
            return Err(OrchestratorError::NotASwitch(switch.to_string()));
        }
        let err = || Self::switch_err(switch);
        if !self.switches.bridge_exists(h, bridge).map_err(err())? {
            return Err(OrchestratorError::NoSuchBridge {
                switch: switch.to_string(),
                bridge: bridge.to_string(),
            });
        }
        let target_text = target.to_string();
        self.switches
            .set_controller(h, bridge, &target_text)
            .map_err(err())?;
        let timeout = self.config.controller_connect_timeout;
        let deadline = Instant::now() + timeout;
        loop {
            if self
                .switches
                .controller_connected(h, bridge)
                .map_err(err())?
            {
                return Ok(());
            }
            if Instant::now() >= deadline {
                return Err(OrchestratorError::ControllerConnectTimeout {
                    switch: switch.to_string(),
                    target: target_text,
                    timeout_ms: timeout.as_millis() as u64,
                });
            }
            thread::sleep(Duration::from_millis(200).min(timeout));
        }
    }

    /// Attaches every switch's default bridge to `controller`.
    pub fn attach_switches(
        &mut self,
        controller: &str,
    ) -> Result<ControllerTarget, OrchestratorError> {
        let target = self.get_controller_endpoint(controller)?;
        let bridge = self.config.bridge.clone();
        let switches: Vec<String> = self
            .handles
            .values()
            .filter(|h| h.kind == NodeKind::WhiteboxSwitch)
            .map(|h| h.node_name.clone())
            .collect();
        for s in switches {
            self.set_controller(&s, &target, &bridge)?;
        }
        Ok(target)
    }

    /// First controller in topology order.
    pub fn first_controller(&self) -> Option<&str> {
        self.handles
            .values()
            .find(|h| h.kind == NodeKind::Controller)
            .map(|h| h.node_name.as_str())
    }

    /// Starts a node at run time and joins it to the management bus.
    pub fn add_node_live(&mut self, spec: NodeSpec) -> Result<NodeHandle, OrchestratorError> {
        self.require_up()?;
        self.topology.add_node(spec.clone())?;
        match self.start_live(&spec) {
            Ok(h) => Ok(h),
            Err(e) => {
                if let Some(mut h) = self.handles.shift_remove(&spec.name) {
                    if let Some(bus) = self.bus.as_mut() {
                        self.fabric.remove_bus_member(bus, &spec.name);
                    }
                    if let Err(de) = self.engine.destroy_container(&mut h) {
                        log::warn!("cleanup of `{}`: {de}", spec.name);
                    }
                }
                let _ = self.topology.remove_node(&spec.name);
                Err(e)
            }
        }
    }

    fn start_live(&mut self, spec: &NodeSpec) -> Result<NodeHandle, OrchestratorError> {
        let mut h = self
            .engine
            .create_container(spec, &self.run_id)
            .map_err(Self::node_err(&spec.name))?;
        self.handles.insert(spec.name.clone(), h.clone());
        match self.bus.as_mut() {
            Some(bus) => {
                let b = self
                    .fabric
                    .add_bus_member(bus, &h)
                    .map_err(Self::link_err(BUS_NAME))?;
                h.mgmt_ip = b.addr.map(|ip| ip.addr);
            }
            None if self.handles.len() >= 2 => {
                let members: Vec<&NodeHandle> = self.handles.values().collect();
                let bus = self
                    .fabric
                    .create_bus(BUS_NAME, &members)
                    .map_err(Self::link_err(BUS_NAME))?;
                for b in &bus.bindings {
                    if let (Some(x), Some(ip)) = (self.handles.get_mut(&b.node_name), b.addr) {
                        x.mgmt_ip = Some(ip.addr);
                    }
                }
                h.mgmt_ip = self.handles[&spec.name].mgmt_ip;
                self.bus = Some(bus);
            }
            None => {}
        }
        self.handles.insert(spec.name.clone(), h.clone());
        self.bring_up(&h)?;
        Ok(h)
    }

    /// Stops a node at run time, destroying its links first.
    pub fn remove_node_live(&mut self, name: &str) -> Result<(), OrchestratorError> {
        self.require_up()?;
        let (_, link_names) = self.topology.remove_node(name)?;
        for l in link_names {
            if let Some(mut handle) = self.links.shift_remove(&l) {
                self.fabric.destroy_link(&mut handle);
            }
        }
        if let Some(bus) = self.bus.as_mut() {
            self.fabric.remove_bus_member(bus, name);
        }
        if let Some(mut h) = self.handles.shift_remove(name) {
            self.engine
                .destroy_container(&mut h)
                .map_err(Self::node_err(name))?;
        }
        Ok(())
    }

    /// Wires a new link at run time, attaching switch ends to their bridge.
    pub fn add_link_live(&mut self, spec: LinkSpec) -> Result<(), OrchestratorError> {
        self.require_up()?;
        self.topology.add_link(spec.clone())?;
        let handle = match self.wire(&spec) {
            Ok(h) => h,
            Err(e) => {
                let _ = self.topology.remove_link(&spec.name);
                return Err(e);
            }
        };
        self.links.insert(spec.name.clone(), handle);
        let ends: Vec<NodeHandle> = spec
            .endpoints()
            .iter()
            .filter_map(|n| self.handles.get(*n).cloned())
            .collect();
        let result = ends.iter().try_for_each(|h| self.bring_up(h));
        if let Err(e) = result {
            let _ = self.remove_link_live(&spec.name);
            return Err(e);
        }
        Ok(())
    }

    pub fn remove_link_live(&mut self, name: &str) -> Result<(), OrchestratorError> {
        self.require_up()?;
        self.topology.remove_link(name)?;
        if let Some(mut h) = self.links.shift_remove(name) {
            self.fabric.destroy_link(&mut h);
        }
        Ok(())
    }

    pub fn set_link_state(&mut self, name: &str, up: bool) -> Result<(), OrchestratorError> {
        self.require_up()?;
        let desired = if up { LinkState::Up } else { LinkState::Down };
        let link = self
            .links
            .get_mut(name)
            .ok_or_else(|| OrchestratorError::NoSuchLink(name.to_string()))?;
        self.fabric
            .set_link_state(link, desired)
            .map_err(Self::link_err(name))
    }

    pub fn exec(
        &self,
        node: &str,
        argv: &[String],
        timeout: Duration,
    ) -> Result<ExecOutput, OrchestratorError> {
        let h = self.get(node)?;
        self.engine
            .exec(h, argv, timeout)
            .map_err(Self::node_err(node))
    }

    pub fn exec_streaming(
        &self,
        node: &str,
        argv: &[String],
        timeout: Duration,
        sink: &mut dyn FnMut(OutputStream, &[u8]),
    ) -> Result<ExecOutput, OrchestratorError> {
        let h = self.get(node)?;
        self.engine
            .exec_streaming(h, argv, timeout, sink)
            .map_err(Self::node_err(node))
    }

    pub fn pause(&mut self, node: &str) -> Result<(), OrchestratorError> {
        self.require_up()?;
        let h = self
            .handles
            .get_mut(node)
            .ok_or_else(|| OrchestratorError::NoSuchNode(node.to_string()))?;
        self.engine.pause(h).map_err(Self::node_err(node))
    }

    pub fn resume(&mut self, node: &str) -> Result<(), OrchestratorError> {
        self.require_up()?;
        let h = self
            .handles
            .get_mut(node)
            .ok_or_else(|| OrchestratorError::NoSuchNode(node.to_string()))?;
        self.engine.resume(h).map_err(Self::node_err(node))
    }

    /// One stats snapshot per running container, sampled concurrently.
    pub fn sample_all(&self, mode: Mode) -> Vec<(String, Result<StatSnapshot, RuntimeError>)> {
        let handles: Vec<&NodeHandle> = self.handles.values().filter(|h| h.is_running()).collect();
        let samples = par::map(mode, &handles, |h| self.engine.sample_stats(h));
        handles
            .iter()
            .map(|h| h.node_name.clone())
            .zip(samples)
            .collect()
    }

    /// Discrepancies between link handles and the kernel view.
    pub fn verify_links(&self) -> Vec<String> {
        self.links
            .values()
            .chain(self.bus.iter())
            .flat_map(|l| self.fabric.verify_handle(l))
            .collect()
    }

    /// `mgmt0` plus data ports of a node, as recorded by the fabric.
    pub fn interfaces_of(&self, node: &str) -> Vec<String> {
        let mut v: Vec<String> = self
            .bus
            .iter()
            .filter_map(|b| b.binding(node))
            .map(|b| b.ifname.clone())
            .collect();
        v.extend(self.data_ports(node));
        debug_assert!(v.iter().filter(|n| *n == MGMT_IFNAME).count() <= 1);
        v
    }

    /// Link model as a display string, with host/switch facing.
    pub fn describe_link(&self, name: &str) -> Option<String> {
        let l = self.links.get(name)?;
        let spec = self.topology.link(name)?;
        let model = match l.model {
            LinkModelKind::Veth => "veth",
            LinkModelKind::GreTunnel => "gre",
            LinkModelKind::VxlanTunnel => "vxlan",
            LinkModelKind::Bus => "bus",
        };
        let ends: Vec<String> = l
            .bindings
            .iter()
            .map(|b| format!("{}:{}", b.node_name, b.ifname))
            .collect();
        Some(format!(
            "{name} {model} {} {} {}",
            spec.facing(&self.topology).as_str(),
            l.state,
            ends.join(" ")
        ))
    }
}

impl Drop for Emulation {
    fn drop(&mut self) {
        if self.phase != Phase::Down {
            if let Err(e) = self.down() {
                log::error!("run {}: {e}", self.run_id);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{generate_star, single_switch, IpConfig};

    fn fake() -> (Emulator, Fakes) {
        let (emu, fakes) = Emulator::fake();
        let config = EmulatorConfig {
            controller_connect_timeout: Duration::from_millis(50),
            ..EmulatorConfig::default()
        };
        (emu.with_config(config), fakes)
    }

    #[test]
    fn target_rendering() {
        let t = ControllerTarget::new(Ipv4Addr::new(172, 31, 0, 3));
        assert_eq!(t.to_string(), "tcp:172.31.0.3:6653");
        assert_eq!(
            "tcp:172.31.0.3:6653".parse::<ControllerTarget>().unwrap(),
            t
        );
        assert_eq!(
            "tcp:10.0.0.1".parse::<ControllerTarget>().unwrap().port,
            6653
        );
        assert!("udp:1.2.3.4:1".parse::<ControllerTarget>().is_err());
    }

    #[test]
    fn example_network_comes_up_and_down() {
        let (emu, fakes) = fake();
        let before = fakes.net.interfaces(Netns::Root);
        let mut e = emu.up(single_switch()).unwrap();
        assert_eq!(e.phase(), Phase::Up);
        assert_eq!(e.handles().count(), 4);
        assert_eq!(e.links().count(), 2);
        assert_eq!(e.bus().unwrap().bindings.len(), 4);
        assert!(e.verify_links().is_empty());

        // sw1 ports in numeric order on the bridge
        let bridge = fakes.switches.bridge("sw1", DEFAULT_BRIDGE).unwrap();
        assert_eq!(bridge.ports, ["data0", "data1"]);
        // hosts addressed on data0
        let h1 = e.handle("h1").unwrap().pid.unwrap();
        assert_eq!(
            fakes.net.iface(Netns::Pid(h1), "data0").unwrap().addrs,
            vec![(Ipv4Addr::new(10, 0, 0, 1), 24)]
        );

        // the controller was created fourth, so it holds the fourth bus address
        let target = e.get_controller_endpoint("ctl1").unwrap();
        assert_eq!(target.to_string(), "tcp:172.31.0.5:6653");
        e.set_controller("sw1", &target, DEFAULT_BRIDGE).unwrap();
        assert_eq!(
            fakes
                .switches
                .bridge("sw1", DEFAULT_BRIDGE)
                .unwrap()
                .controller
                .as_deref(),
            Some("tcp:172.31.0.5:6653")
        );

        e.down().unwrap();
        e.down().unwrap();
        assert_eq!(
            e.phase_log(),
            [Phase::Building, Phase::Up, Phase::TearingDown, Phase::Down]
        );
        assert!(fakes.engine.list_managed(None).unwrap().is_empty());
        assert_eq!(fakes.net.interfaces(Netns::Root), before);
    }

    #[test]
    fn controller_errors() {
        let (emu, fakes) = fake();
        let mut e = emu.up(single_switch()).unwrap();
        assert!(matches!(
            e.get_controller_endpoint("h1"),
            Err(OrchestratorError::NotAController(_))
        ));
        assert!(matches!(
            e.get_controller_endpoint("zz"),
            Err(OrchestratorError::NoSuchNode(_))
        ));
        let t = e.get_controller_endpoint("ctl1").unwrap();
        assert!(matches!(
            e.set_controller("sw1", &t, "nope"),
            Err(OrchestratorError::NoSuchBridge { .. })
        ));
        assert!(matches!(
            e.set_controller("h1", &t, DEFAULT_BRIDGE),
            Err(OrchestratorError::NotASwitch(_))
        ));
        let dead = ControllerTarget::new(Ipv4Addr::new(172, 31, 9, 9));
        fakes.switches.mark_dead(&dead.to_string());
        assert!(matches!(
            e.set_controller("sw1", &dead, DEFAULT_BRIDGE),
            Err(OrchestratorError::ControllerConnectTimeout { .. })
        ));
    }

    #[test]
    fn invalid_topology_creates_nothing() {
        let (emu, fakes) = fake();
        let mut t = single_switch();
        t.add_node(NodeSpec::whitebox("island")).unwrap();
        assert!(matches!(emu.up(t), Err(OrchestratorError::Invalid(_))));
        assert_eq!(fakes.engine.total_containers(), 0);
    }

    #[test]
    fn failed_create_rolls_back() {
        let (emu, fakes) = fake();
        fakes.engine.fail_node("s3");
        let before = fakes.net.interfaces(Netns::Root);
        let err = emu.up(generate_star(5).unwrap()).err().unwrap();
        assert!(
            matches!(err, OrchestratorError::Node { ref node, source: RuntimeError::ImageNotFound(_) } if node == "s3")
        );
        assert!(fakes.engine.list_managed(None).unwrap().is_empty());
        assert_eq!(fakes.net.interfaces(Netns::Root), before);
    }

    #[test]
    fn any_fabric_failure_rolls_back() {
        for op in [
            "create_veth_pair",
            "rename",
            "set_master",
            "add_addr",
            "set_admin",
        ] {
            for nth in [0, 3, 7] {
                let (emu, fakes) = fake();
                let before = fakes.net.interfaces(Netns::Root);
                fakes.net.fail_on(op, nth);
                if emu.up(single_switch()).is_ok() {
                    continue;
                }
                assert!(
                    fakes.engine.list_managed(None).unwrap().is_empty(),
                    "{op}#{nth}"
                );
                assert_eq!(fakes.net.interfaces(Netns::Root), before, "{op}#{nth}");
                assert_eq!(fakes.net.populated_namespaces(), 0, "{op}#{nth}");
            }
        }
    }

    #[test]
    fn unready_controller_rolls_back() {
        let (emu, fakes) = fake();
        fakes.probe.unready.lock().unwrap().insert("ctl1".into());
        assert!(matches!(
            emu.up(single_switch()),
            Err(OrchestratorError::ControllerNotReady { .. })
        ));
        assert_eq!(fakes.engine.total_containers(), 0);
    }

    #[test]
    fn privilege_check_precedes_creation() {
        let (emu, fakes) = fake();
        fakes.net.deny_privileges();
        assert!(matches!(
            emu.up(single_switch()),
            Err(OrchestratorError::Fabric(FabricError::PrivilegeDenied(_)))
        ));
        assert_eq!(fakes.engine.total_containers(), 0);
    }

    #[test]
    fn down_survives_out_of_band_kill() {
        let (emu, fakes) = fake();
        let mut e = emu.up(single_switch()).unwrap();
        let h = e.handle("h2").unwrap().clone();
        fakes.engine.remove_out_of_band(&h.container_id);
        fakes.net.kill_netns(h.pid.unwrap());
        e.down().unwrap();
        assert!(fakes.engine.list_managed(None).unwrap().is_empty());
    }

    #[test]
    fn live_nodes_and_links() {
        let (emu, fakes) = fake();
        let mut e = emu.up(single_switch()).unwrap();
        let ip = IpConfig::new(Ipv4Addr::new(10, 0, 0, 3), 24).unwrap();
        let h3 = e.add_node_live(NodeSpec::host("h3", ip)).unwrap();
        assert_eq!(h3.mgmt_ip, Some(Ipv4Addr::new(172, 31, 0, 6)));
        e.add_link_live(LinkSpec::veth("l3", "sw1", "h3")).unwrap();
        assert_eq!(
            fakes.switches.bridge("sw1", DEFAULT_BRIDGE).unwrap().ports,
            ["data0", "data1", "data2"]
        );
        assert_eq!(
            fakes
                .net
                .iface(Netns::Pid(h3.pid.unwrap()), "data0")
                .unwrap()
                .addrs,
            vec![(ip.addr, 24)]
        );
        e.remove_node_live("h3").unwrap();
        assert!(e.link("l3").is_none());
        assert!(e.link("l1").is_some());
        assert!(fakes.net.interfaces(Netns::Pid(h3.pid.unwrap())).is_empty());
        assert!(matches!(
            e.remove_node_live("h3"),
            Err(OrchestratorError::Topology(_))
        ));
        assert_eq!(fakes.engine.list_managed(None).unwrap().len(), 4);
    }

    #[test]
    fn failed_live_add_leaves_nothing() {
        let (emu, fakes) = fake();
        let mut e = emu.up(single_switch()).unwrap();
        fakes.engine.fail_node("h9");
        let ip = IpConfig::new(Ipv4Addr::new(10, 0, 0, 9), 24).unwrap();
        assert!(e.add_node_live(NodeSpec::host("h9", ip)).is_err());
        assert!(e.topology().node("h9").is_none());
        assert_eq!(fakes.engine.list_managed(None).unwrap().len(), 4);
    }

    #[test]
    fn pause_and_link_state() {
        let (emu, fakes) = fake();
        let mut e = emu.up(single_switch()).unwrap();
        e.pause("h1").unwrap();
        assert!(e
            .exec(
                "h1",
                &crate::runtime::argv(&["true"]),
                Duration::from_secs(1)
            )
            .is_err());
        e.resume("h1").unwrap();
        e.set_link_state("l1", false).unwrap();
        let pid = e.handle("h1").unwrap().pid.unwrap();
        assert!(!fakes.net.iface(Netns::Pid(pid), "data0").unwrap().up);
        e.set_link_state("l1", true).unwrap();
        assert!(matches!(
            e.set_link_state("zz", true),
            Err(OrchestratorError::NoSuchLink(_))
        ));
        assert_eq!(
            e.describe_link("l1").unwrap(),
            "l1 veth host up sw1:data0 h1:data0"
        );
    }

    #[test]
    fn runs_are_isolated() {
        let (emu, fakes) = fake();
        let mut a = emu.up(single_switch()).unwrap();
        let b = emu.up(single_switch()).unwrap();
        assert_ne!(a.run_id(), b.run_id());
        a.down().unwrap();
        assert_eq!(
            fakes.engine.list_managed(Some(b.run_id())).unwrap().len(),
            4
        );
        assert_eq!(fakes.engine.list_managed(None).unwrap().len(), 4);
        drop(b);
        assert!(fakes.engine.list_managed(None).unwrap().is_empty());
    }

    #[test]
    fn clean_sweeps_strays() {
        let (emu, fakes) = fake();
        let e = emu.up(single_switch()).unwrap();
        std::mem::forget(e);
        fakes.engine.add_foreign("someone-else");
        let removed = emu.clean(None).unwrap();
        assert_eq!(
            removed
                .iter()
                .filter(|r| r.starts_with("container"))
                .count(),
            4
        );
        assert_eq!(
            removed.iter().filter(|r| r.starts_with("bridge")).count(),
            1
        );
        assert_eq!(fakes.engine.total_containers(), 1);
    }
}
