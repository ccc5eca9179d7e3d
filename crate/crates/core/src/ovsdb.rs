// SPDX-License-Identifier: Apache-2.0

//! Switch management over OVSDB, and control-port readiness probing.
//!
//! Switches are configured from outside their containers: this process sits
//! on the management bus and speaks OVSDB JSON-RPC to each switch's
//! `ovsdb-server` on TCP 6640.

use std::collections::{HashMap, HashSet};
use std::io::{BufReader, Write};
use std::net::{IpAddr, SocketAddr, TcpStream};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde_json::de::IoRead;
use serde_json::{json, Deserializer, StreamDeserializer, Value};
use thiserror::Error;

use crate::runtime::NodeHandle;

pub const OVSDB_PORT: u16 = 6640;
pub const OPENFLOW_PORT: u16 = 6653;
const DB: &str = "Open_vSwitch";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SwitchError {
    #[error("switch `{0}` unreachable: {1}")]
    Unreachable(String, String),
    #[error("no such bridge `{bridge}` on `{switch}`")]
    NoSuchBridge { switch: String, bridge: String },
    #[error("OVSDB error {error}: {details}")]
    Ovsdb { error: String, details: String },
    #[error("OVSDB protocol: {0}")]
    Protocol(String),
}

/// Bridge, port and controller configuration of whitebox switches.
pub trait SwitchManager: Send + Sync {
    /// Creates `bridge` unless it already exists.
    fn ensure_bridge(&self, switch: &NodeHandle, bridge: &str) -> Result<(), SwitchError>;
    fn bridge_exists(&self, switch: &NodeHandle, bridge: &str) -> Result<bool, SwitchError>;
    /// Attaches an existing interface as a port; a no-op if already attached.
    fn add_port(&self, switch: &NodeHandle, bridge: &str, ifname: &str) -> Result<(), SwitchError>;
    fn set_controller(
        &self,
        switch: &NodeHandle,
        bridge: &str,
        target: &str,
    ) -> Result<(), SwitchError>;
    /// Whether any controller of `bridge` reports a live connection.
    fn controller_connected(&self, switch: &NodeHandle, bridge: &str) -> Result<bool, SwitchError>;
}

/// Waits until a node accepts TCP connections on a port.
pub trait PortProbe: Send + Sync {
    fn wait_listening(&self, node: &NodeHandle, port: u16, timeout: Duration)
        -> Result<(), String>;
}

/// Connect-until-accepted probe over the management bus.
#[derive(Debug, Clone)]
pub struct TcpProbe {
    pub interval: Duration,
}

impl Default for TcpProbe {
    fn default() -> Self {
        Self {
            interval: Duration::from_millis(500),
        }
    }
}

impl PortProbe for TcpProbe {
    fn wait_listening(
        &self,
        node: &NodeHandle,
        port: u16,
        timeout: Duration,
    ) -> Result<(), String> {
        let ip = node
            .mgmt_ip
            .ok_or_else(|| format!("`{}` has no management address", node.node_name))?;
        let addr = SocketAddr::new(IpAddr::V4(ip), port);
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match TcpStream::connect_timeout(
                &addr,
                left.clamp(Duration::from_millis(10), Duration::from_secs(2)),
            ) {
                Ok(_) => return Ok(()),
                Err(e) if Instant::now() >= deadline => {
                    return Err(format!(
                        "{addr} not accepting after {} ms: {e}",
                        timeout.as_millis()
                    ))
                }
                Err(_) => thread::sleep(self.interval.min(left)),
            }
        }
    }
}

/// Elements of an OVSDB set, which may be encoded bare when it has one member.
fn set_elems(v: &Value) -> Vec<Value> {
    match v {
        Value::Array(a) if a.len() == 2 && a[0] == "set" => {
            a[1].as_array().cloned().unwrap_or_default()
        }
        Value::Array(a) if a.len() == 2 && a[0] == "uuid" => vec![v.clone()],
        Value::Null => Vec::new(),
        other => vec![other.clone()],
    }
}

fn named(id: &str) -> Value {
    json!(["named-uuid", id])
}

/// One JSON-RPC session with an `ovsdb-server`.
pub struct OvsdbClient {
    writer: TcpStream,
    reader: StreamDeserializer<'static, IoRead<BufReader<TcpStream>>, Value>,
    next_id: u64,
}

impl OvsdbClient {
    pub fn connect(addr: SocketAddr, timeout: Duration) -> Result<Self, SwitchError> {
        let unreachable =
            |e: std::io::Error| SwitchError::Unreachable(addr.to_string(), e.to_string());
        let stream = TcpStream::connect_timeout(&addr, timeout).map_err(unreachable)?;
        stream
            .set_read_timeout(Some(timeout))
            .map_err(unreachable)?;
        stream.set_nodelay(true).ok();
        let reader = stream.try_clone().map_err(unreachable)?;
        Ok(Self {
            writer: stream,
            reader: Deserializer::from_reader(BufReader::new(reader)).into_iter(),
            next_id: 1,
        })
    }

    fn send(&mut self, msg: &Value) -> Result<(), SwitchError> {
        let bytes = serde_json::to_vec(msg).expect("json values serialize");
        self.writer
            .write_all(&bytes)
            .map_err(|e| SwitchError::Protocol(format!("write: {e}")))
    }

    /// Issues a request and waits for its reply, answering echo requests
    /// and skipping notifications meanwhile.
    pub fn call(&mut self, method: &str, params: Value) -> Result<Value, SwitchError> {
        let id = self.next_id;
        self.next_id += 1;
        self.send(&json!({"method": method, "params": params, "id": id}))?;
        loop {
            let msg = match self.reader.next() {
                Some(Ok(m)) => m,
                Some(Err(e)) => return Err(SwitchError::Protocol(format!("read: {e}"))),
                None => return Err(SwitchError::Protocol("connection closed".into())),
            };
            if msg.get("method").and_then(Value::as_str) == Some("echo") {
                let reply = json!({"id": msg["id"], "result": msg["params"], "error": null});
                self.send(&reply)?;
                continue;
            }
            if msg.get("id") != Some(&json!(id)) {
                continue;
            }
            if let Some(err) = msg.get("error").filter(|e| !e.is_null()) {
                return Err(SwitchError::Ovsdb {
                    error: err.to_string(),
                    details: String::new(),
                });
            }
            return Ok(msg.get("result").cloned().unwrap_or(Value::Null));
        }
    }

    /// Runs a transaction; fails on the first operation-level error.
    pub fn transact(&mut self, ops: Vec<Value>) -> Result<Vec<Value>, SwitchError> {
        let mut params = vec![json!(DB)];
        params.extend(ops);
        let result = self.call("transact", Value::Array(params))?;
        let results = result.as_array().cloned().ok_or_else(|| {
            SwitchError::Protocol(format!("transact result not an array: {result}"))
        })?;
        for r in &results {
            if let Some(err) = r.get("error").and_then(Value::as_str) {
                return Err(SwitchError::Ovsdb {
                    error: err.to_string(),
                    details: r
                        .get("details")
                        .and_then(Value::as_str)
                        .unwrap_or("")
                        .to_string(),
                });
            }
        }
        Ok(results)
    }

    fn select_one(
        &mut self,
        table: &str,
        name: &str,
        columns: &[&str],
    ) -> Result<Option<Value>, SwitchError> {
        let r = self.transact(vec![json!({
            "op": "select",
            "table": table,
            "where": [["name", "==", name]],
            "columns": columns,
        })])?;
        Ok(r[0]["rows"]
            .as_array()
            .and_then(|rows| rows.first().cloned()))
    }

    pub fn bridge_exists(&mut self, bridge: &str) -> Result<bool, SwitchError> {
        Ok(self.select_one("Bridge", bridge, &["name"])?.is_some())
    }

    pub fn create_bridge(
        &mut self,
        bridge: &str,
        datapath_type: Option<&str>,
    ) -> Result<(), SwitchError> {
        let mut row = json!({"name": bridge, "ports": named("port")});
        if let Some(dp) = datapath_type {
            row["datapath_type"] = json!(dp);
        }
        self.transact(vec![
            json!({"op": "insert", "table": "Interface", "row": {"name": bridge, "type": "internal"}, "uuid-name": "iface"}),
            json!({"op": "insert", "table": "Port", "row": {"name": bridge, "interfaces": named("iface")}, "uuid-name": "port"}),
            json!({"op": "insert", "table": "Bridge", "row": row, "uuid-name": "br"}),
            json!({"op": "mutate", "table": DB, "where": [], "mutations": [["bridges", "insert", ["set", [named("br")]]]]}),
        ])?;
        Ok(())
    }

    pub fn port_exists(&mut self, ifname: &str) -> Result<bool, SwitchError> {
        Ok(self.select_one("Port", ifname, &["name"])?.is_some())
    }

    pub fn add_port(&mut self, bridge: &str, ifname: &str) -> Result<(), SwitchError> {
        let r = self.transact(vec![
            json!({"op": "insert", "table": "Interface", "row": {"name": ifname}, "uuid-name": "iface"}),
            json!({"op": "insert", "table": "Port", "row": {"name": ifname, "interfaces": named("iface")}, "uuid-name": "port"}),
            json!({"op": "mutate", "table": "Bridge", "where": [["name", "==", bridge]], "mutations": [["ports", "insert", ["set", [named("port")]]]]}),
        ])?;
        if r.get(2).and_then(|m| m["count"].as_u64()) == Some(0) {
            return Err(SwitchError::Ovsdb {
                error: "no bridge".into(),
                details: bridge.to_string(),
            });
        }
        Ok(())
    }

    /// Replaces the bridge's controllers with one pointing at `target`.
    pub fn set_controller(&mut self, bridge: &str, target: &str) -> Result<bool, SwitchError> {
        let r = self.transact(vec![
            json!({"op": "insert", "table": "Controller", "row": {"target": target}, "uuid-name": "ctl"}),
            json!({"op": "update", "table": "Bridge", "where": [["name", "==", bridge]], "row": {"controller": named("ctl")}}),
        ])?;
        Ok(r.get(1).and_then(|u| u["count"].as_u64()).unwrap_or(0) > 0)
    }

    /// `None` when the bridge does not exist.
    pub fn controller_connected(&mut self, bridge: &str) -> Result<Option<bool>, SwitchError> {
        let Some(row) = self.select_one("Bridge", bridge, &["controller"])? else {
            return Ok(None);
        };
        for uuid in set_elems(&row["controller"]) {
            let r = self.transact(vec![json!({
                "op": "select",
                "table": "Controller",
                "where": [["_uuid", "==", uuid]],
                "columns": ["is_connected"],
            })])?;
            let connected = r[0]["rows"]
                .as_array()
                .and_then(|rows| rows.first())
                .and_then(|row| row["is_connected"].as_bool())
                .unwrap_or(false);
            if connected {
                return Ok(Some(true));
            }
        }
        Ok(Some(false))
    }
}

/// [`SwitchManager`] speaking OVSDB to each switch's management address.
#[derive(Debug, Clone)]
pub struct OvsdbManager {
    pub port: u16,
    pub io_timeout: Duration,
    /// How long to keep retrying while a fresh switch starts its server.
    pub ready_timeout: Duration,
    /// `netdev` selects the userspace datapath; `None` leaves the default.
    pub datapath_type: Option<String>,
}

impl Default for OvsdbManager {
    fn default() -> Self {
        Self {
            port: OVSDB_PORT,
            io_timeout: Duration::from_secs(10),
            ready_timeout: Duration::from_secs(60),
            datapath_type: None,
        }
    }
}

impl OvsdbManager {
    fn client(&self, switch: &NodeHandle) -> Result<OvsdbClient, SwitchError> {
        let ip = switch.mgmt_ip.ok_or_else(|| {
            SwitchError::Unreachable(switch.node_name.clone(), "no management address".into())
        })?;
        let addr = SocketAddr::new(IpAddr::V4(ip), self.port);
        let deadline = Instant::now() + self.ready_timeout;
        loop {
            match OvsdbClient::connect(addr, self.io_timeout) {
                Ok(c) => return Ok(c),
                Err(e) if Instant::now() >= deadline => {
                    return Err(match e {
                        SwitchError::Unreachable(_, why) => {
                            SwitchError::Unreachable(switch.node_name.clone(), why)
                        }
                        other => other,
                    })
                }
                Err(_) => thread::sleep(Duration::from_millis(250)),
            }
        }
    }

    fn no_bridge(switch: &NodeHandle, bridge: &str) -> SwitchError {
        SwitchError::NoSuchBridge {
            switch: switch.node_name.clone(),
            bridge: bridge.to_string(),
        }
    }
}

impl SwitchManager for OvsdbManager {
    fn ensure_bridge(&self, switch: &NodeHandle, bridge: &str) -> Result<(), SwitchError> {
        let mut c = self.client(switch)?;
        if !c.bridge_exists(bridge)? {
            c.create_bridge(bridge, self.datapath_type.as_deref())?;
        }
        Ok(())
    }

    fn bridge_exists(&self, switch: &NodeHandle, bridge: &str) -> Result<bool, SwitchError> {
        self.client(switch)?.bridge_exists(bridge)
    }

    fn add_port(&self, switch: &NodeHandle, bridge: &str, ifname: &str) -> Result<(), SwitchError> {
        let mut c = self.client(switch)?;
        if !c.bridge_exists(bridge)? {
            return Err(Self::no_bridge(switch, bridge));
        }
        if !c.port_exists(ifname)? {
            c.add_port(bridge, ifname)?;
        }
        Ok(())
    }

    fn set_controller(
        &self,
        switch: &NodeHandle,
        bridge: &str,
        target: &str,
    ) -> Result<(), SwitchError> {
        if self.client(switch)?.set_controller(bridge, target)? {
            Ok(())
        } else {
            Err(Self::no_bridge(switch, bridge))
        }
    }

    fn controller_connected(&self, switch: &NodeHandle, bridge: &str) -> Result<bool, SwitchError> {
        self.client(switch)?
            .controller_connected(bridge)?
            .ok_or_else(|| Self::no_bridge(switch, bridge))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FakeBridge {
    pub ports: Vec<String>,
    pub controller: Option<String>,
}

/// In-memory switches. A controller counts as connected unless its target
/// was marked dead.
#[derive(Default)]
pub struct FakeSwitches {
    bridges: Mutex<HashMap<String, HashMap<String, FakeBridge>>>,
    dead_targets: Mutex<HashSet<String>>,
}

impl FakeSwitches {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn mark_dead(&self, target: &str) {
        self.dead_targets.lock().unwrap().insert(target.to_string());
    }

    pub fn bridge(&self, switch: &str, bridge: &str) -> Option<FakeBridge> {
        self.bridges
            .lock()
            .unwrap()
            .get(switch)?
            .get(bridge)
            .cloned()
    }

    fn with_bridge<R>(
        &self,
        switch: &NodeHandle,
        bridge: &str,
        f: impl FnOnce(&mut FakeBridge) -> R,
    ) -> Result<R, SwitchError> {
        let mut all = self.bridges.lock().unwrap();
        all.get_mut(&switch.node_name)
            .and_then(|b| b.get_mut(bridge))
            .map(f)
            .ok_or_else(|| OvsdbManager::no_bridge(switch, bridge))
    }
}

impl SwitchManager for FakeSwitches {
    fn ensure_bridge(&self, switch: &NodeHandle, bridge: &str) -> Result<(), SwitchError> {
        self.bridges
            .lock()
            .unwrap()
            .entry(switch.node_name.clone())
            .or_default()
            .entry(bridge.to_string())
            .or_default();
        Ok(())
    }

    fn bridge_exists(&self, switch: &NodeHandle, bridge: &str) -> Result<bool, SwitchError> {
        Ok(self.bridge(&switch.node_name, bridge).is_some())
    }

    fn add_port(&self, switch: &NodeHandle, bridge: &str, ifname: &str) -> Result<(), SwitchError> {
        self.with_bridge(switch, bridge, |b| {
            if !b.ports.iter().any(|p| p == ifname) {
                b.ports.push(ifname.to_string());
            }
        })
    }

    fn set_controller(
        &self,
        switch: &NodeHandle,
        bridge: &str,
        target: &str,
    ) -> Result<(), SwitchError> {
        self.with_bridge(switch, bridge, |b| b.controller = Some(target.to_string()))
    }

    fn controller_connected(&self, switch: &NodeHandle, bridge: &str) -> Result<bool, SwitchError> {
        let target = self.with_bridge(switch, bridge, |b| b.controller.clone())?;
        Ok(target.is_some_and(|t| !self.dead_targets.lock().unwrap().contains(&t)))
    }
}

/// Probe that answers immediately, failing for listed nodes.
#[derive(Default)]
pub struct FakeProbe {
    pub unready: Mutex<HashSet<String>>,
}

impl PortProbe for FakeProbe {
    fn wait_listening(
        &self,
        node: &NodeHandle,
        port: u16,
        _timeout: Duration,
    ) -> Result<(), String> {
        if self.unready.lock().unwrap().contains(&node.node_name) {
            Err(format!("`{}` never listened on {port}", node.node_name))
        } else {
            Ok(())
        }
    }
}
