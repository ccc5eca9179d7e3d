// SPDX-License-Identifier: Apache-2.0

//! In-memory kernel model for exercising the fabric without privileges.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::net::Ipv4Addr;
use std::sync::Mutex;

use super::backend::{NetBackend, Netns, TunnelParams};
use super::{FabricError, MacAddr};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FakeKind {
    Physical,
    Veth { peer: u64 },
    Bridge,
    Tunnel(TunnelParams),
}

#[derive(Debug, Clone)]
pub struct FakeIface {
    pub id: u64,
    pub kind: FakeKind,
    pub mac: MacAddr,
    pub up: bool,
    pub addrs: Vec<(Ipv4Addr, u8)>,
    pub master: Option<String>,
}

#[derive(Default)]
struct World {
    spaces: HashMap<Netns, BTreeMap<String, FakeIface>>,
    dead: HashSet<u32>,
    next_id: u64,
    ops: usize,
    fail_at: Option<(String, usize)>,
    denied: bool,
}

impl World {
    fn locate(&self, id: u64) -> Option<(Netns, String)> {
        self.spaces.iter().find_map(|(ns, ifs)| {
            ifs.iter()
                .find(|(_, i)| i.id == id)
                .map(|(name, _)| (*ns, name.clone()))
        })
    }

    fn space(&mut self, ns: Netns) -> Result<&mut BTreeMap<String, FakeIface>, FabricError> {
        if let Netns::Pid(pid) = ns {
            if self.dead.contains(&pid) {
                return Err(FabricError::NamespaceUnresolvable(format!(
                    "pid {pid} is gone"
                )));
            }
        }
        Ok(self.spaces.entry(ns).or_default())
    }

    fn iface(&mut self, ns: Netns, name: &str) -> Result<&mut FakeIface, FabricError> {
        self.space(ns)?
            .get_mut(name)
            .ok_or_else(|| FabricError::NoSuchInterface(format!("{name} in {ns}")))
    }

    fn insert(&mut self, ns: Netns, name: &str, kind: FakeKind) -> Result<u64, FabricError> {
        if name.len() > 15 {
            return Err(FabricError::Backend(format!(
                "interface name `{name}` too long"
            )));
        }
        let id = self.next_id;
        let space = self.space(ns)?;
        if space.contains_key(name) {
            return Err(FabricError::IfnameCollision(format!(
                "{name} exists in {ns}"
            )));
        }
        space.insert(
            name.to_string(),
            FakeIface {
                id,
                kind,
                mac: MacAddr([0x02, 0, 0, 0, (id >> 8) as u8, id as u8]),
                up: false,
                addrs: Vec::new(),
                master: None,
            },
        );
        self.next_id += 1;
        Ok(id)
    }
}

/// Kernel stand-in: namespaces, interfaces, veth peering and bridges.
pub struct FakeNet {
    world: Mutex<World>,
}

impl Default for FakeNet {
    fn default() -> Self {
        Self::new()
    }
}

impl FakeNet {
    /// A root namespace holding `lo` and `eth0`.
    pub fn new() -> Self {
        let net = Self {
            world: Mutex::new(World::default()),
        };
        {
            let mut w = net.world.lock().unwrap();
            w.insert(Netns::Root, "lo", FakeKind::Physical).unwrap();
            w.insert(Netns::Root, "eth0", FakeKind::Physical).unwrap();
        }
        net
    }

    /// Rejects every mutation with privilege-denied.
    pub fn deny_privileges(&self) {
        self.world.lock().unwrap().denied = true;
    }

    /// Fails the `nth` (0-based) future call of operation `op`.
    pub fn fail_on(&self, op: &str, nth: usize) {
        let mut w = self.world.lock().unwrap();
        w.fail_at = Some((op.to_string(), nth));
    }

    /// Drops a namespace as if its container died.
    pub fn kill_netns(&self, pid: u32) {
        let mut w = self.world.lock().unwrap();
        if let Some(space) = w.spaces.remove(&Netns::Pid(pid)) {
            let peers: Vec<u64> = space
                .values()
                .filter_map(|i| match i.kind {
                    FakeKind::Veth { peer } => Some(peer),
                    _ => None,
                })
                .collect();
            for peer in peers {
                if let Some((ns, name)) = w.locate(peer) {
                    w.spaces.get_mut(&ns).unwrap().remove(&name);
                }
            }
        }
        w.dead.insert(pid);
    }

    pub fn iface(&self, ns: Netns, name: &str) -> Option<FakeIface> {
        self.world
            .lock()
            .unwrap()
            .spaces
            .get(&ns)
            .and_then(|s| s.get(name))
            .cloned()
    }

    pub fn interfaces(&self, ns: Netns) -> Vec<String> {
        self.world
            .lock()
            .unwrap()
            .spaces
            .get(&ns)
            .map(|s| s.keys().cloned().collect())
            .unwrap_or_default()
    }

    /// Namespace and name of the veth peer of `name` in `ns`.
    pub fn peer_of(&self, ns: Netns, name: &str) -> Option<(Netns, String)> {
        let w = self.world.lock().unwrap();
        let iface = w.spaces.get(&ns)?.get(name)?;
        match iface.kind {
            FakeKind::Veth { peer } => w.locate(peer),
            _ => None,
        }
    }

    /// Number of non-root namespaces that still hold interfaces.
    pub fn populated_namespaces(&self) -> usize {
        self.world
            .lock()
            .unwrap()
            .spaces
            .iter()
            .filter(|(ns, s)| **ns != Netns::Root && !s.is_empty())
            .count()
    }

    fn mutate<R>(
        &self,
        op: &str,
        f: impl FnOnce(&mut World) -> Result<R, FabricError>,
    ) -> Result<R, FabricError> {
        let mut w = self.world.lock().unwrap();
        if w.denied {
            return Err(FabricError::PrivilegeDenied(format!(
                "{op}: Operation not permitted"
            )));
        }
        if let Some((fail_op, nth)) = w.fail_at.clone() {
            if fail_op == op {
                if nth == 0 {
                    w.fail_at = None;
                    return Err(FabricError::Backend(format!("{op}: injected failure")));
                }
                w.fail_at = Some((fail_op, nth - 1));
            }
        }
        w.ops += 1;
        f(&mut w)
    }
}

impl NetBackend for FakeNet {
    fn check_privileges(&self) -> Result<(), FabricError> {
        if self.world.lock().unwrap().denied {
            Err(FabricError::PrivilegeDenied(
                "Operation not permitted".into(),
            ))
        } else {
            Ok(())
        }
    }

    fn netns_exists(&self, ns: Netns) -> bool {
        match ns {
            Netns::Root => true,
            Netns::Pid(pid) => !self.world.lock().unwrap().dead.contains(&pid),
        }
    }

    fn create_veth_pair(&self, a: &str, b: &str) -> Result<(), FabricError> {
        self.mutate("create_veth_pair", |w| {
            if a == b {
                return Err(FabricError::IfnameCollision(a.to_string()));
            }
            let id_a = w.next_id;
            let id_b = id_a + 1;
            w.insert(Netns::Root, a, FakeKind::Veth { peer: id_b })?;
            if let Err(e) = w.insert(Netns::Root, b, FakeKind::Veth { peer: id_a }) {
                w.spaces.get_mut(&Netns::Root).unwrap().remove(a);
                return Err(e);
            }
            Ok(())
        })
    }

    fn move_to_netns(&self, ifname: &str, ns: Netns) -> Result<(), FabricError> {
        self.mutate("move_to_netns", |w| {
            if let Netns::Pid(pid) = ns {
                if w.dead.contains(&pid) {
                    return Err(FabricError::NamespaceUnresolvable(format!("pid {pid}")));
                }
            }
            let iface = w
                .space(Netns::Root)?
                .remove(ifname)
                .ok_or_else(|| FabricError::NoSuchInterface(ifname.to_string()))?;
            let target = w.space(ns)?;
            if target.contains_key(ifname) {
                let clash = FabricError::IfnameCollision(format!("{ifname} in {ns}"));
                w.space(Netns::Root)?.insert(ifname.to_string(), iface);
                return Err(clash);
            }
            let mut iface = iface;
            // moving resets admin state and addresses, as in the kernel
            iface.up = false;
            iface.addrs.clear();
            iface.master = None;
            target.insert(ifname.to_string(), iface);
            Ok(())
        })
    }

    fn rename(&self, ns: Netns, from: &str, to: &str) -> Result<(), FabricError> {
        self.mutate("rename", |w| {
            let space = w.space(ns)?;
            if space.contains_key(to) {
                return Err(FabricError::IfnameCollision(format!("{to} in {ns}")));
            }
            let iface = space
                .remove(from)
                .ok_or_else(|| FabricError::NoSuchInterface(from.to_string()))?;
            space.insert(to.to_string(), iface);
            Ok(())
        })
    }

    fn set_mac(&self, ns: Netns, ifname: &str, mac: MacAddr) -> Result<(), FabricError> {
        self.mutate("set_mac", |w| {
            w.iface(ns, ifname)?.mac = mac;
            Ok(())
        })
    }

    fn set_admin(&self, ns: Netns, ifname: &str, up: bool) -> Result<(), FabricError> {
        self.mutate("set_admin", |w| {
            w.iface(ns, ifname)?.up = up;
            Ok(())
        })
    }

    fn add_addr(
        &self,
        ns: Netns,
        ifname: &str,
        addr: Ipv4Addr,
        prefix_len: u8,
    ) -> Result<(), FabricError> {
        self.mutate("add_addr", |w| {
            let iface = w.iface(ns, ifname)?;
            if iface.addrs.contains(&(addr, prefix_len)) {
                return Err(FabricError::Backend(format!("{addr} already on {ifname}")));
            }
            iface.addrs.push((addr, prefix_len));
            Ok(())
        })
    }

    fn flush_addrs(&self, ns: Netns, ifname: &str) -> Result<(), FabricError> {
        self.mutate("flush_addrs", |w| {
            w.iface(ns, ifname)?.addrs.clear();
            Ok(())
        })
    }

    fn create_bridge(&self, name: &str) -> Result<(), FabricError> {
        self.mutate("create_bridge", |w| {
            w.insert(Netns::Root, name, FakeKind::Bridge).map(|_| ())
        })
    }

    fn set_master(&self, ifname: &str, bridge: &str) -> Result<(), FabricError> {
        self.mutate("set_master", |w| {
            let is_bridge = matches!(
                w.space(Netns::Root)?.get(bridge).map(|i| &i.kind),
                Some(FakeKind::Bridge)
            );
            if !is_bridge {
                return Err(FabricError::NoSuchInterface(bridge.to_string()));
            }
            w.iface(Netns::Root, ifname)?.master = Some(bridge.to_string());
            Ok(())
        })
    }

    fn create_tunnel(
        &self,
        ns: Netns,
        ifname: &str,
        params: TunnelParams,
    ) -> Result<(), FabricError> {
        self.mutate("create_tunnel", |w| {
            if !w.space(ns)?.contains_key(params.underlay) {
                return Err(FabricError::NoSuchInterface(params.underlay.to_string()));
            }
            w.insert(ns, ifname, FakeKind::Tunnel(params)).map(|_| ())
        })
    }

    fn delete_link(&self, ns: Netns, ifname: &str) -> Result<(), FabricError> {
        self.mutate("delete_link", |w| {
            let iface = w
                .space(ns)?
                .remove(ifname)
                .ok_or_else(|| FabricError::NoSuchInterface(format!("{ifname} in {ns}")))?;
            match iface.kind {
                FakeKind::Veth { peer } => {
                    if let Some((pns, pname)) = w.locate(peer) {
                        w.spaces.get_mut(&pns).unwrap().remove(&pname);
                    }
                }
                FakeKind::Bridge => {
                    for i in w.spaces.get_mut(&Netns::Root).unwrap().values_mut() {
                        if i.master.as_deref() == Some(ifname) {
                            i.master = None;
                        }
                    }
                }
                _ => {}
            }
            Ok(())
        })
    }

    fn list_links(&self, ns: Netns) -> Result<Vec<String>, FabricError> {
        Ok(self.interfaces(ns))
    }

    fn link_state(&self, ns: Netns, ifname: &str) -> Result<Option<(MacAddr, bool)>, FabricError> {
        Ok(self.iface(ns, ifname).map(|i| (i.mac, i.up)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn veth_peers_die_together() {
        let net = FakeNet::new();
        net.create_veth_pair("a", "b").unwrap();
        net.move_to_netns("b", Netns::Pid(7)).unwrap();
        assert_eq!(
            net.peer_of(Netns::Root, "a"),
            Some((Netns::Pid(7), "b".into()))
        );
        net.delete_link(Netns::Pid(7), "b").unwrap();
        assert_eq!(net.interfaces(Netns::Root), vec!["eth0", "lo"]);
    }

    #[test]
    fn injected_failure_fires_once() {
        let net = FakeNet::new();
        net.fail_on("create_bridge", 1);
        net.create_bridge("br0").unwrap();
        assert!(net.create_bridge("br1").is_err());
        net.create_bridge("br2").unwrap();
    }

    #[test]
    fn names_are_limited() {
        let net = FakeNet::new();
        assert!(net.create_bridge("a-very-long-bridge-name").is_err());
    }
}
