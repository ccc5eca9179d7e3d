// SPDX-License-Identifier: Apache-2.0

//! Kernel network-configuration backends.

use std::fmt;
use std::net::Ipv4Addr;
use std::path::PathBuf;
use std::process::Command;

use serde::{Deserialize, Serialize};

use super::{FabricError, MacAddr};

/// A network namespace: the root one, or the one owned by a container process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Netns {
    Root,
    Pid(u32),
}

impl Netns {
    pub fn path(self) -> Option<PathBuf> {
        match self {
            Netns::Root => None,
            Netns::Pid(pid) => Some(PathBuf::from(format!("/proc/{pid}/ns/net"))),
        }
    }
}

impl fmt::Display for Netns {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Netns::Root => f.write_str("root"),
            Netns::Pid(pid) => write!(f, "pid:{pid}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TunnelKind {
    Gre,
    Vxlan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TunnelParams {
    pub kind: TunnelKind,
    pub key: u32,
    pub local: Ipv4Addr,
    pub remote: Ipv4Addr,
    /// Underlay device inside the namespace.
    pub underlay: &'static str,
}

pub const VXLAN_PORT: u16 = 4789;

/// Primitive interface operations. Every method that takes a [`Netns`]
/// operates inside that namespace; veth and bridge creation happen in the
/// root namespace.
pub trait NetBackend: Send + Sync {
    /// Fails with [`FabricError::PrivilegeDenied`] when namespace
    /// manipulation is not permitted.
    fn check_privileges(&self) -> Result<(), FabricError>;
    fn netns_exists(&self, ns: Netns) -> bool;
    fn create_veth_pair(&self, a: &str, b: &str) -> Result<(), FabricError>;
    /// Moves a root-namespace interface into `ns`.
    fn move_to_netns(&self, ifname: &str, ns: Netns) -> Result<(), FabricError>;
    fn rename(&self, ns: Netns, from: &str, to: &str) -> Result<(), FabricError>;
    fn set_mac(&self, ns: Netns, ifname: &str, mac: MacAddr) -> Result<(), FabricError>;
    fn set_admin(&self, ns: Netns, ifname: &str, up: bool) -> Result<(), FabricError>;
    fn add_addr(
        &self,
        ns: Netns,
        ifname: &str,
        addr: Ipv4Addr,
        prefix_len: u8,
    ) -> Result<(), FabricError>;
    fn flush_addrs(&self, ns: Netns, ifname: &str) -> Result<(), FabricError>;
    fn create_bridge(&self, name: &str) -> Result<(), FabricError>;
    fn set_master(&self, ifname: &str, bridge: &str) -> Result<(), FabricError>;
    fn create_tunnel(
        &self,
        ns: Netns,
        ifname: &str,
        params: TunnelParams,
    ) -> Result<(), FabricError>;
    fn delete_link(&self, ns: Netns, ifname: &str) -> Result<(), FabricError>;
    fn list_links(&self, ns: Netns) -> Result<Vec<String>, FabricError>;
    /// Hardware address and admin state, or `None` if the interface is absent.
    fn link_state(&self, ns: Netns, ifname: &str) -> Result<Option<(MacAddr, bool)>, FabricError>;
}

/// Drives iproute2 (`ip`), entering container namespaces with `nsenter`.
#[derive(Debug, Clone)]
pub struct IpCommandBackend {
    pub ip: PathBuf,
    pub nsenter: PathBuf,
}

impl Default for IpCommandBackend {
    fn default() -> Self {
        Self {
            ip: PathBuf::from("ip"),
            nsenter: PathBuf::from("nsenter"),
        }
    }
}

/// Maps `ip` diagnostics onto fabric errors.
pub(crate) fn classify(op: &str, stderr: &str) -> FabricError {
    let s = stderr.trim();
    let lower = s.to_ascii_lowercase();
    if lower.contains("operation not permitted") || lower.contains("permission denied") {
        FabricError::PrivilegeDenied(format!("{op}: {s}"))
    } else if lower.contains("file exists") {
        FabricError::IfnameCollision(format!("{op}: {s}"))
    } else if lower.contains("cannot open network namespace")
        || lower.contains("no such process")
        || lower.contains("reassociate")
    {
        FabricError::NamespaceUnresolvable(format!("{op}: {s}"))
    } else if lower.contains("cannot find device") || lower.contains("does not exist") {
        FabricError::NoSuchInterface(format!("{op}: {s}"))
    } else {
        FabricError::Backend(format!("{op}: {s}"))
    }
}

/// Interface names from `ip -o link show`.
pub(crate) fn parse_link_names(out: &str) -> Vec<String> {
    out.lines()
        .filter_map(|line| {
            let mut parts = line.splitn(3, ':');
            parts.next()?;
            let name = parts.next()?.trim();
            let name = name.split('@').next()?.trim();
            (!name.is_empty()).then(|| name.to_string())
        })
        .collect()
}

/// MAC and admin-up flag from one `ip -o link show dev X` line.
pub(crate) fn parse_link_state(out: &str) -> Option<(MacAddr, bool)> {
    let line = out.lines().next()?;
    let flags_start = line.find('<')?;
    let flags_end = line[flags_start..].find('>')? + flags_start;
    let up = line[flags_start + 1..flags_end]
        .split(',')
        .any(|f| f == "UP");
    let mac = line
        .split_whitespace()
        .skip_while(|w| !w.starts_with("link/"))
        .nth(1)
        .and_then(|m| m.parse().ok())
        .unwrap_or(MacAddr([0; 6]));
    Some((mac, up))
}

impl IpCommandBackend {
    fn run(&self, op: &str, ns: Netns, args: &[&str]) -> Result<String, FabricError> {
        let mut cmd = match ns.path() {
            None => Command::new(&self.ip),
            Some(path) => {
                let mut c = Command::new(&self.nsenter);
                c.arg(format!("--net={}", path.display()))
                    .arg("--")
                    .arg(&self.ip);
                c
            }
        };
        cmd.args(args);
        log::trace!("{op}: {cmd:?}");
        let out = cmd.output().map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                FabricError::Backend(format!("{op}: tool not found ({e})"))
            } else {
                FabricError::Backend(format!("{op}: {e}"))
            }
        })?;
        if out.status.success() {
            Ok(String::from_utf8_lossy(&out.stdout).into_owned())
        } else {
            Err(classify(op, &String::from_utf8_lossy(&out.stderr)))
        }
    }
}

impl NetBackend for IpCommandBackend {
    fn check_privileges(&self) -> Result<(), FabricError> {
        // SAFETY: geteuid has no preconditions
        if unsafe { libc::geteuid() } != 0 {
            return Err(FabricError::PrivilegeDenied(
                "namespace and link management needs root (CAP_NET_ADMIN and CAP_SYS_ADMIN)".into(),
            ));
        }
        self.run("probe", Netns::Root, &["-o", "link", "show"])
            .map(|_| ())
    }

    fn netns_exists(&self, ns: Netns) -> bool {
        match ns.path() {
            None => true,
            Some(p) => p.exists(),
        }
    }

    fn create_veth_pair(&self, a: &str, b: &str) -> Result<(), FabricError> {
        self.run(
            "create veth",
            Netns::Root,
            &["link", "add", a, "type", "veth", "peer", "name", b],
        )
        .map(|_| ())
    }

    fn move_to_netns(&self, ifname: &str, ns: Netns) -> Result<(), FabricError> {
        let Netns::Pid(pid) = ns else {
            return Ok(());
        };
        if !self.netns_exists(ns) {
            return Err(FabricError::NamespaceUnresolvable(format!(
                "no namespace for pid {pid}"
            )));
        }
        let pid = pid.to_string();
        self.run(
            "move to netns",
            Netns::Root,
            &["link", "set", "dev", ifname, "netns", &pid],
        )
        .map(|_| ())
    }

    fn rename(&self, ns: Netns, from: &str, to: &str) -> Result<(), FabricError> {
        self.run("rename", ns, &["link", "set", "dev", from, "name", to])
            .map(|_| ())
    }

    fn set_mac(&self, ns: Netns, ifname: &str, mac: MacAddr) -> Result<(), FabricError> {
        let mac = mac.to_string();
        self.run(
            "set mac",
            ns,
            &["link", "set", "dev", ifname, "address", &mac],
        )
        .map(|_| ())
    }

    fn set_admin(&self, ns: Netns, ifname: &str, up: bool) -> Result<(), FabricError> {
        let state = if up { "up" } else { "down" };
        self.run(
            "set admin state",
            ns,
            &["link", "set", "dev", ifname, state],
        )
        .map(|_| ())
    }

    fn add_addr(
        &self,
        ns: Netns,
        ifname: &str,
        addr: Ipv4Addr,
        prefix_len: u8,
    ) -> Result<(), FabricError> {
        let cidr = format!("{addr}/{prefix_len}");
        self.run("add address", ns, &["addr", "add", &cidr, "dev", ifname])
            .map(|_| ())
    }

    fn flush_addrs(&self, ns: Netns, ifname: &str) -> Result<(), FabricError> {
        self.run("flush addresses", ns, &["addr", "flush", "dev", ifname])
            .map(|_| ())
    }

    fn create_bridge(&self, name: &str) -> Result<(), FabricError> {
        self.run(
            "create bridge",
            Netns::Root,
            &["link", "add", "name", name, "type", "bridge"],
        )
        .map(|_| ())
    }

    fn set_master(&self, ifname: &str, bridge: &str) -> Result<(), FabricError> {
        self.run(
            "enslave",
            Netns::Root,
            &["link", "set", "dev", ifname, "master", bridge],
        )
        .map(|_| ())
    }

    fn create_tunnel(&self, ns: Netns, ifname: &str, p: TunnelParams) -> Result<(), FabricError> {
        let key = p.key.to_string();
        let local = p.local.to_string();
        let remote = p.remote.to_string();
        let port = VXLAN_PORT.to_string();
        let args: Vec<&str> = match p.kind {
            TunnelKind::Vxlan => vec![
                "link", "add", ifname, "type", "vxlan", "id", &key, "local", &local, "remote",
                &remote, "dstport", &port, "dev", p.underlay,
            ],
            TunnelKind::Gre => vec![
                "link", "add", ifname, "type", "gretap", "local", &local, "remote", &remote, "key",
                &key,
            ],
        };
        self.run("create tunnel", ns, &args).map(|_| ())
    }

    fn delete_link(&self, ns: Netns, ifname: &str) -> Result<(), FabricError> {
        self.run("delete link", ns, &["link", "del", "dev", ifname])
            .map(|_| ())
    }

    fn list_links(&self, ns: Netns) -> Result<Vec<String>, FabricError> {
        let out = self.run("list links", ns, &["-o", "link", "show"])?;
        let mut names = parse_link_names(&out);
        names.sort();
        Ok(names)
    }

    fn link_state(&self, ns: Netns, ifname: &str) -> Result<Option<(MacAddr, bool)>, FabricError> {
        match self.run("show link", ns, &["-o", "link", "show", "dev", ifname]) {
            Ok(out) => Ok(parse_link_state(&out)),
            Err(FabricError::NoSuchInterface(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }
}
