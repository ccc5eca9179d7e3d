// SPDX-License-Identifier: Apache-2.0

//! Virtual ports and links between container network namespaces.
//!
//! Three link models are supported: veth pairs, GRE/VXLAN tunnels riding
//! the management bus, and the management bus itself (a root-namespace
//! bridge with one `mgmt0` leg per member). All mutations serialize behind
//! one lock per [`Fabric`].

pub mod backend;
mod fake;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::runtime::NodeHandle;
use crate::topology::IpConfig;

pub use backend::{IpCommandBackend, NetBackend, Netns, TunnelKind, TunnelParams, VXLAN_PORT};
pub use fake::{FakeIface, FakeKind, FakeNet};

/// Management interface name inside every node.
pub const MGMT_IFNAME: &str = "mgmt0";
/// Default management subnet.
pub const MGMT_SUBNET: (Ipv4Addr, u8) = (Ipv4Addr::new(172, 31, 0, 0), 16);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct MacAddr(pub [u8; 6]);

impl MacAddr {
    /// Locally administered unicast address derived from the run, node and
    /// interface, so repeated runs get the same datapath identities.
    pub fn derive(run_id: &str, node: &str, ifname: &str) -> Self {
        let mut h = Sha256::new();
        h.update(run_id.as_bytes());
        h.update([0]);
        h.update(node.as_bytes());
        h.update([0]);
        h.update(ifname.as_bytes());
        let digest = h.finalize();
        let mut b = [0u8; 6];
        b.copy_from_slice(&digest[..6]);
        b[0] = (b[0] & 0xfe) | 0x02;
        MacAddr(b)
    }
}

impl fmt::Display for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            b[0], b[1], b[2], b[3], b[4], b[5]
        )
    }
}

impl FromStr for MacAddr {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut b = [0u8; 6];
        let mut parts = s.split(':');
        for byte in b.iter_mut() {
            let p = parts.next().ok_or_else(|| format!("bad MAC `{s}`"))?;
            if p.len() != 2 {
                return Err(format!("bad MAC `{s}`"));
            }
            *byte = u8::from_str_radix(p, 16).map_err(|_| format!("bad MAC `{s}`"))?;
        }
        if parts.next().is_some() {
            return Err(format!("bad MAC `{s}`"));
        }
        Ok(MacAddr(b))
    }
}

impl From<MacAddr> for String {
    fn from(m: MacAddr) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for MacAddr {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FabricError {
    #[error("privilege denied: {0}")]
    PrivilegeDenied(String),
    #[error("interface name collision: {0}")]
    IfnameCollision(String),
    #[error("cannot resolve network namespace: {0}")]
    NamespaceUnresolvable(String),
    #[error("no such interface: {0}")]
    NoSuchInterface(String),
    #[error("tunnel key {key} already used by link `{link}`")]
    KeyInUse { key: u32, link: String },
    #[error("peer unreachable: {0}")]
    PeerUnreachable(String),
    #[error("management subnet {0} exhausted")]
    SubnetExhausted(String),
    #[error("link `{0}` is already destroyed")]
    AlreadyDestroyed(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("node `{0}` is not running")]
    NodeNotRunning(String),
    #[error("network backend: {0}")]
    Backend(String),
}

/// One interface a link owns inside a node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortBinding {
    pub node_name: String,
    pub ifname: String,
    pub mac: MacAddr,
    pub addr: Option<IpConfig>,
    pub netns: Netns,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkModelKind {
    Veth,
    GreTunnel,
    VxlanTunnel,
    Bus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkState {
    Up,
    Down,
    Destroyed,
}

impl fmt::Display for LinkState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LinkState::Up => "up",
            LinkState::Down => "down",
            LinkState::Destroyed => "destroyed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkHandle {
    pub link_name: String,
    pub model: LinkModelKind,
    pub bindings: Vec<PortBinding>,
    pub state: LinkState,
    /// Bus only: root-namespace leg per member, keyed by node.
    pub root_legs: Vec<(String, String)>,
    /// Bus only: the root-namespace bridge.
    pub bridge: Option<String>,
    pub tunnel_key: Option<u32>,
    /// Bus only: members get addressed `mgmt0` ports rather than data ports.
    #[serde(default)]
    pub management: bool,
}

impl LinkHandle {
    pub fn binding(&self, node: &str) -> Option<&PortBinding> {
        self.bindings.iter().find(|b| b.node_name == node)
    }

    pub fn is_destroyed(&self) -> bool {
        self.state == LinkState::Destroyed
    }
}

/// Sequential allocator over a management subnet. Offset 1 is reserved for
/// the bus gateway, the last offset is broadcast.
#[derive(Debug, Clone)]
pub struct MgmtAllocator {
    base: u32,
    prefix_len: u8,
    next: u32,
    released: BTreeSet<u32>,
}

impl MgmtAllocator {
    pub fn new(base: Ipv4Addr, prefix_len: u8) -> Self {
        assert!(
            (1..=30).contains(&prefix_len),
            "management prefix must leave room for hosts"
        );
        let mask = u32::MAX << (32 - prefix_len);
        Self {
            base: u32::from(base) & mask,
            prefix_len,
            next: 2,
            released: BTreeSet::new(),
        }
    }

    fn last_offset(&self) -> u32 {
        (1u32 << (32 - self.prefix_len)) - 2
    }

    pub fn gateway(&self) -> Ipv4Addr {
        Ipv4Addr::from(self.base + 1)
    }

    pub fn prefix_len(&self) -> u8 {
        self.prefix_len
    }

    pub fn allocate(&mut self) -> Result<Ipv4Addr, FabricError> {
        let off = if self.next <= self.last_offset() {
            self.next += 1;
            self.next - 1
        } else if let Some(off) = self.released.pop_first() {
            off
        } else {
            return Err(FabricError::SubnetExhausted(format!(
                "{}/{}",
                Ipv4Addr::from(self.base),
                self.prefix_len
            )));
        };
        Ok(Ipv4Addr::from(self.base + off))
    }

    pub fn release(&mut self, addr: Ipv4Addr) {
        let a = u32::from(addr);
        if a > self.base + 1 && a < self.base + self.next {
            self.released.insert(a - self.base);
        }
    }
}

struct FabricState {
    next_data: HashMap<String, u32>,
    keys: HashMap<u32, String>,
    mgmt: MgmtAllocator,
    temp_counter: u64,
    /// Every root-namespace name this fabric has generated.
    root_names: BTreeSet<String>,
}

/// Link lifecycle over a [`NetBackend`] for one run.
pub struct Fabric {
    backend: Arc<dyn NetBackend>,
    run_id: String,
    state: Mutex<FabricState>,
}

impl Fabric {
    pub fn new(backend: Arc<dyn NetBackend>, run_id: impl Into<String>) -> Self {
        Self::with_subnet(backend, run_id, MGMT_SUBNET.0, MGMT_SUBNET.1)
    }

    pub fn with_subnet(
        backend: Arc<dyn NetBackend>,
        run_id: impl Into<String>,
        base: Ipv4Addr,
        prefix_len: u8,
    ) -> Self {
        Self {
            backend,
            run_id: run_id.into(),
            state: Mutex::new(FabricState {
                next_data: HashMap::new(),
                keys: HashMap::new(),
                mgmt: MgmtAllocator::new(base, prefix_len),
                temp_counter: 0,
                root_names: BTreeSet::new(),
            }),
        }
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn backend(&self) -> &Arc<dyn NetBackend> {
        &self.backend
    }

    pub fn check_privileges(&self) -> Result<(), FabricError> {
        self.backend.check_privileges()
    }

    fn lock(&self) -> MutexGuard<'_, FabricState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn netns_of(&self, node: &NodeHandle) -> Result<Netns, FabricError> {
        if !node.is_running() {
            return Err(FabricError::NodeNotRunning(node.node_name.clone()));
        }
        let pid = node.pid.ok_or_else(|| {
            FabricError::NamespaceUnresolvable(format!("`{}` has no process id", node.node_name))
        })?;
        let ns = Netns::Pid(pid);
        if !self.backend.netns_exists(ns) {
            return Err(FabricError::NamespaceUnresolvable(format!(
                "`{}` (pid {pid}) has no network namespace",
                node.node_name
            )));
        }
        Ok(ns)
    }

    /// Short unique root-namespace name, within the kernel's 15-byte limit.
    fn temp_name(&self, st: &mut FabricState, prefix: &str) -> String {
        st.temp_counter += 1;
        let mut h = Sha256::new();
        h.update(self.run_id.as_bytes());
        h.update([0]);
        h.update(st.temp_counter.to_le_bytes());
        let hex: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        let name = format!("{prefix}{}", &hex[..15 - prefix.len()]);
        st.root_names.insert(name.clone());
        name
    }

    /// Address of this process on the bus.
    pub fn gateway(&self) -> Ipv4Addr {
        self.lock().mgmt.gateway()
    }

    /// Bridge name for a bus link.
    pub fn bridge_name(&self, link: &str) -> String {
        let mut h = Sha256::new();
        h.update(self.run_id.as_bytes());
        h.update([0]);
        h.update(link.as_bytes());
        let hex: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        format!("vmb{}", &hex[..10])
    }

    fn next_data_ifname(st: &mut FabricState, node: &str) -> String {
        let n = st.next_data.entry(node.to_string()).or_insert(0);
        let name = format!("data{n}");
        *n += 1;
        name
    }

    /// Moves a root-namespace interface into `ns` under its final name,
    /// sets its MAC and brings it up.
    fn install(&self, tmp: &str, ns: Netns, ifname: &str, mac: MacAddr) -> Result<(), FabricError> {
        self.backend.move_to_netns(tmp, ns)?;
        self.backend.rename(ns, tmp, ifname)?;
        self.backend.set_mac(ns, ifname, mac)?;
        self.backend.set_admin(ns, ifname, true)
    }

    fn best_effort_delete(&self, candidates: &[(Netns, &str)]) {
        for (ns, name) in candidates {
            if let Ok(Some(_)) = self.backend.link_state(*ns, name) {
                if let Err(e) = self.backend.delete_link(*ns, name) {
                    log::warn!("cleanup of {name} in {ns} failed: {e}");
                }
            }
        }
    }

    /// Wires a veth pair between two running nodes.
    pub fn create_veth_link(
        &self,
        name: &str,
        a: &NodeHandle,
        b: &NodeHandle,
    ) -> Result<LinkHandle, FabricError> {
        if a.node_name == b.node_name {
            return Err(FabricError::IfnameCollision(format!(
                "link `{name}` joins `{}` to itself",
                a.node_name
            )));
        }
        let ns_a = self.netns_of(a)?;
        let ns_b = self.netns_of(b)?;
        let mut st = self.lock();
        let tmp_a = self.temp_name(&mut st, "vm");
        let tmp_b = self.temp_name(&mut st, "vm");
        let if_a = Self::next_data_ifname(&mut st, &a.node_name);
        let if_b = Self::next_data_ifname(&mut st, &b.node_name);
        let mac_a = MacAddr::derive(&self.run_id, &a.node_name, &if_a);
        let mac_b = MacAddr::derive(&self.run_id, &b.node_name, &if_b);

        self.backend.create_veth_pair(&tmp_a, &tmp_b)?;
        let wired = self
            .install(&tmp_a, ns_a, &if_a, mac_a)
            .and_then(|_| self.install(&tmp_b, ns_b, &if_b, mac_b));
        if let Err(e) = wired {
            self.best_effort_delete(&[
                (Netns::Root, &tmp_a),
                (Netns::Root, &tmp_b),
                (ns_a, &tmp_a),
                (ns_a, &if_a),
                (ns_b, &tmp_b),
            ]);
            return Err(e);
        }
        Ok(LinkHandle {
            link_name: name.to_string(),
            model: LinkModelKind::Veth,
            bindings: vec![
                PortBinding {
                    node_name: a.node_name.clone(),
                    ifname: if_a,
                    mac: mac_a,
                    addr: None,
                    netns: ns_a,
                },
                PortBinding {
                    node_name: b.node_name.clone(),
                    ifname: if_b,
                    mac: mac_b,
                    addr: None,
                    netns: ns_b,
                },
            ],
            state: LinkState::Up,
            root_legs: Vec::new(),
            bridge: None,
            tunnel_key: None,
            management: false,
        })
    }

    /// Keyed GRE or VXLAN tunnel whose endpoints are the peers' management
    /// addresses.
    pub fn create_tunnel_link(
        &self,
        name: &str,
        a: &NodeHandle,
        b: &NodeHandle,
        kind: TunnelKind,
        key: u32,
    ) -> Result<LinkHandle, FabricError> {
        if a.node_name == b.node_name {
            return Err(FabricError::IfnameCollision(format!(
                "link `{name}` joins `{}` to itself",
                a.node_name
            )));
        }
        let ns_a = self.netns_of(a)?;
        let ns_b = self.netns_of(b)?;
        let (ip_a, ip_b) = match (a.mgmt_ip, b.mgmt_ip) {
            (Some(x), Some(y)) => (x, y),
            _ => {
                let missing = if a.mgmt_ip.is_none() {
                    &a.node_name
                } else {
                    &b.node_name
                };
                return Err(FabricError::PeerUnreachable(format!(
                    "`{missing}` is not on the management bus"
                )));
            }
        };
        let mut st = self.lock();
        if let Some(owner) = st.keys.get(&key) {
            return Err(FabricError::KeyInUse {
                key,
                link: owner.clone(),
            });
        }
        let if_a = Self::next_data_ifname(&mut st, &a.node_name);
        let if_b = Self::next_data_ifname(&mut st, &b.node_name);
        let mac_a = MacAddr::derive(&self.run_id, &a.node_name, &if_a);
        let mac_b = MacAddr::derive(&self.run_id, &b.node_name, &if_b);
        let end = |ns: Netns, ifname: &str, mac: MacAddr, local: Ipv4Addr, remote: Ipv4Addr| {
            self.backend.create_tunnel(
                ns,
                ifname,
                TunnelParams {
                    kind,
                    key,
                    local,
                    remote,
                    underlay: MGMT_IFNAME,
                },
            )?;
            self.backend.set_mac(ns, ifname, mac)?;
            self.backend.set_admin(ns, ifname, true)
        };
        let wired =
            end(ns_a, &if_a, mac_a, ip_a, ip_b).and_then(|_| end(ns_b, &if_b, mac_b, ip_b, ip_a));
        if let Err(e) = wired {
            self.best_effort_delete(&[(ns_a, &if_a), (ns_b, &if_b)]);
            return Err(e);
        }
        st.keys.insert(key, name.to_string());
        let model = match kind {
            TunnelKind::Gre => LinkModelKind::GreTunnel,
            TunnelKind::Vxlan => LinkModelKind::VxlanTunnel,
        };
        Ok(LinkHandle {
            link_name: name.to_string(),
            model,
            bindings: vec![
                PortBinding {
                    node_name: a.node_name.clone(),
                    ifname: if_a,
                    mac: mac_a,
                    addr: None,
                    netns: ns_a,
                },
                PortBinding {
                    node_name: b.node_name.clone(),
                    ifname: if_b,
                    mac: mac_b,
                    addr: None,
                    netns: ns_b,
                },
            ],
            state: LinkState::Up,
            root_legs: Vec::new(),
            bridge: None,
            tunnel_key: Some(key),
            management: false,
        })
    }

    /// Management bus: a root-namespace bridge with an addressed `mgmt0` leg
    /// in every member. The bridge itself holds the gateway address.
    pub fn create_bus(
        &self,
        name: &str,
        members: &[&NodeHandle],
    ) -> Result<LinkHandle, FabricError> {
        self.build_bus(name, members, true)
    }

    /// Data-plane point-to-multipoint segment: a bridge with one unaddressed
    /// `data<N>` leg per member.
    pub fn create_segment(
        &self,
        name: &str,
        members: &[&NodeHandle],
    ) -> Result<LinkHandle, FabricError> {
        self.build_bus(name, members, false)
    }

    fn build_bus(
        &self,
        name: &str,
        members: &[&NodeHandle],
        management: bool,
    ) -> Result<LinkHandle, FabricError> {
        if members.len() < 2 {
            return Err(FabricError::Precondition(format!(
                "bus `{name}` needs at least 2 members, got {}",
                members.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for m in members {
            if !seen.insert(m.node_name.as_str()) {
                return Err(FabricError::Precondition(format!(
                    "`{}` listed twice on bus `{name}`",
                    m.node_name
                )));
            }
            self.netns_of(m)?;
        }
        let bridge = self.bridge_name(name);
        let mut handle = LinkHandle {
            link_name: name.to_string(),
            model: LinkModelKind::Bus,
            bindings: Vec::new(),
            state: LinkState::Up,
            root_legs: Vec::new(),
            bridge: Some(bridge.clone()),
            tunnel_key: None,
            management,
        };
        {
            let mut st = self.lock();
            st.root_names.insert(bridge.clone());
            let gateway = (st.mgmt.gateway(), st.mgmt.prefix_len());
            self.backend.create_bridge(&bridge)?;
            // the gateway address lets this process reach nodes over the bus
            let ready = self
                .backend
                .set_admin(Netns::Root, &bridge, true)
                .and_then(|_| {
                    if management {
                        self.backend
                            .add_addr(Netns::Root, &bridge, gateway.0, gateway.1)
                    } else {
                        Ok(())
                    }
                });
            if let Err(e) = ready {
                self.best_effort_delete(&[(Netns::Root, &bridge)]);
                return Err(e);
            }
        }
        for m in members {
            if let Err(e) = self.add_bus_member(&mut handle, m) {
                self.destroy_link(&mut handle);
                return Err(e);
            }
        }
        Ok(handle)
    }

    /// Attaches one more node to an existing bus.
    pub fn add_bus_member(
        &self,
        bus: &mut LinkHandle,
        node: &NodeHandle,
    ) -> Result<PortBinding, FabricError> {
        if bus.is_destroyed() {
            return Err(FabricError::AlreadyDestroyed(bus.link_name.clone()));
        }
        let bridge = match (&bus.model, &bus.bridge) {
            (LinkModelKind::Bus, Some(b)) => b.clone(),
            _ => {
                return Err(FabricError::Precondition(format!(
                    "`{}` is not a bus",
                    bus.link_name
                )))
            }
        };
        if bus.binding(&node.node_name).is_some() {
            return Err(FabricError::IfnameCollision(format!(
                "`{}` is already on `{}`",
                node.node_name, bus.link_name
            )));
        }
        let ns = self.netns_of(node)?;
        let mut st = self.lock();
        let (ifname, addr) = if bus.management {
            let ip = IpConfig {
                addr: st.mgmt.allocate()?,
                prefix_len: st.mgmt.prefix_len(),
            };
            (MGMT_IFNAME.to_string(), Some(ip))
        } else {
            (Self::next_data_ifname(&mut st, &node.node_name), None)
        };
        let leg = self.temp_name(&mut st, "vm");
        let tmp = self.temp_name(&mut st, "vm");
        let mac = MacAddr::derive(&self.run_id, &node.node_name, &ifname);
        let wired = self
            .backend
            .create_veth_pair(&leg, &tmp)
            .and_then(|_| self.backend.set_master(&leg, &bridge))
            .and_then(|_| self.backend.set_admin(Netns::Root, &leg, true))
            .and_then(|_| self.install(&tmp, ns, &ifname, mac))
            .and_then(|_| match addr {
                Some(ip) => self.backend.add_addr(ns, &ifname, ip.addr, ip.prefix_len),
                None => Ok(()),
            });
        if let Err(e) = wired {
            if let Some(ip) = addr {
                st.mgmt.release(ip.addr);
            }
            self.best_effort_delete(&[(Netns::Root, &leg), (Netns::Root, &tmp), (ns, &ifname)]);
            return Err(e);
        }
        let binding = PortBinding {
            node_name: node.node_name.clone(),
            ifname,
            mac,
            addr,
            netns: ns,
        };
        bus.root_legs.push((node.node_name.clone(), leg));
        bus.bindings.push(binding.clone());
        Ok(binding)
    }

    /// Detaches a node from a bus and releases its address.
    pub fn remove_bus_member(&self, bus: &mut LinkHandle, node: &str) {
        let mut st = self.lock();
        if let Some(pos) = bus.root_legs.iter().position(|(n, _)| n == node) {
            let (_, leg) = bus.root_legs.remove(pos);
            self.best_effort_delete(&[(Netns::Root, &leg)]);
        }
        if let Some(pos) = bus.bindings.iter().position(|b| b.node_name == node) {
            let b = bus.bindings.remove(pos);
            if let Some(ip) = b.addr {
                st.mgmt.release(ip.addr);
            }
        }
    }

    /// Administrative up/down on every interface of the link.
    pub fn set_link_state(
        &self,
        handle: &mut LinkHandle,
        desired: LinkState,
    ) -> Result<(), FabricError> {
        if handle.is_destroyed() {
            return Err(FabricError::AlreadyDestroyed(handle.link_name.clone()));
        }
        let up = match desired {
            LinkState::Up => true,
            LinkState::Down => false,
            LinkState::Destroyed => {
                return Err(FabricError::Precondition(
                    "use destroy_link to destroy a link".into(),
                ))
            }
        };
        let _st = self.lock();
        for b in &handle.bindings {
            self.backend.set_admin(b.netns, &b.ifname, up)?;
        }
        handle.state = desired;
        Ok(())
    }

    /// Removes everything the link created. Idempotent; failures are logged.
    pub fn destroy_link(&self, handle: &mut LinkHandle) {
        if handle.is_destroyed() {
            return;
        }
        let mut st = self.lock();
        match handle.model {
            LinkModelKind::Veth => {
                // deleting either end removes the pair
                let ends: Vec<(Netns, &str)> = handle
                    .bindings
                    .iter()
                    .map(|b| (b.netns, b.ifname.as_str()))
                    .collect();
                for (ns, name) in ends {
                    if matches!(self.backend.link_state(ns, name), Ok(Some(_))) {
                        if let Err(e) = self.backend.delete_link(ns, name) {
                            log::warn!("destroy {}: {e}", handle.link_name);
                        }
                    }
                }
            }
            LinkModelKind::GreTunnel | LinkModelKind::VxlanTunnel => {
                let ends: Vec<(Netns, &str)> = handle
                    .bindings
                    .iter()
                    .map(|b| (b.netns, b.ifname.as_str()))
                    .collect();
                self.best_effort_delete(&ends);
                if let Some(key) = handle.tunnel_key {
                    if st.keys.get(&key) == Some(&handle.link_name) {
                        st.keys.remove(&key);
                    }
                }
            }
            LinkModelKind::Bus => {
                for (_, leg) in &handle.root_legs {
                    self.best_effort_delete(&[(Netns::Root, leg)]);
                }
                if let Some(bridge) = &handle.bridge {
                    self.best_effort_delete(&[(Netns::Root, bridge)]);
                }
                for b in &handle.bindings {
                    if let Some(ip) = b.addr {
                        st.mgmt.release(ip.addr);
                    }
                }
            }
        }
        handle.state = LinkState::Destroyed;
    }

    /// Puts an address on an interface inside a node.
    pub fn assign_address(
        &self,
        node: &NodeHandle,
        ifname: &str,
        ip: IpConfig,
    ) -> Result<(), FabricError> {
        let ns = self.netns_of(node)?;
        let _st = self.lock();
        self.backend.add_addr(ns, ifname, ip.addr, ip.prefix_len)
    }

    /// Sets admin state on an arbitrary interface inside a node.
    pub fn set_interface_admin(
        &self,
        node: &NodeHandle,
        ifname: &str,
        up: bool,
    ) -> Result<(), FabricError> {
        let ns = self.netns_of(node)?;
        let _st = self.lock();
        self.backend.set_admin(ns, ifname, up)
    }

    /// Interfaces in a node's namespace.
    pub fn list_interfaces(&self, node: &NodeHandle) -> Result<Vec<String>, FabricError> {
        let ns = self.netns_of(node)?;
        self.backend.list_links(ns)
    }

    /// Sorted names of interfaces in the root namespace.
    pub fn root_snapshot(&self) -> Result<Vec<String>, FabricError> {
        let mut v = self.backend.list_links(Netns::Root)?;
        v.sort();
        Ok(v)
    }

    /// Interfaces this fabric created that still exist in the root namespace.
    pub fn root_residue(&self) -> Result<Vec<String>, FabricError> {
        let live = self.backend.list_links(Netns::Root)?;
        let st = self.lock();
        Ok(live
            .into_iter()
            .filter(|n| st.root_names.contains(n))
            .collect())
    }

    /// Discrepancies between a live handle and the kernel view; empty when
    /// every binding exists with its recorded name and MAC.
    pub fn verify_handle(&self, handle: &LinkHandle) -> Vec<String> {
        if handle.is_destroyed() {
            return Vec::new();
        }
        let mut problems = Vec::new();
        for b in &handle.bindings {
            match self.backend.link_state(b.netns, &b.ifname) {
                Ok(Some((mac, up))) => {
                    if mac != b.mac {
                        problems.push(format!(
                            "{}:{} has MAC {mac}, expected {}",
                            b.node_name, b.ifname, b.mac
                        ));
                    }
                    if up != (handle.state == LinkState::Up) {
                        problems.push(format!("{}:{} admin state {up}", b.node_name, b.ifname));
                    }
                }
                Ok(None) => problems.push(format!("{}:{} missing", b.node_name, b.ifname)),
                Err(e) => problems.push(format!("{}:{}: {e}", b.node_name, b.ifname)),
            }
        }
        problems
    }
}
