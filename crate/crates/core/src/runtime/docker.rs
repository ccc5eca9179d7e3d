// SPDX-License-Identifier: Apache-2.0

//! [`ContainerEngine`] over the Docker engine HTTP API.

use std::collections::HashMap;
use std::io::{self, Read};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde_json::{json, Value};

use super::http::{percent_encode, HttpError, HttpResponse, UnixHttpClient};
use super::{
    container_name, cpu_percent, monotonic_ms, ContainerEngine, ContainerInfo, ContainerState,
    ExecOutput, NodeHandle, OutputStream, RuntimeError, StatSnapshot, KIND_LABEL, NODE_LABEL,
    OWNER_LABEL, STATS_WINDOW,
};
use crate::topology::{NodeKind, NodeSpec};

/// Newest engine API version this client speaks.
pub const API_VERSION_MAX: &str = "1.43";

const DEFAULT_SOCKET: &str = "/var/run/docker.sock";
const CPU_PERIOD_US: i64 = 100_000;

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub socket: PathBuf,
    pub request_timeout: Duration,
    pub pull_timeout: Duration,
    /// Pull images that are not present locally.
    pub pull_missing: bool,
    /// Command override for host containers, keeping minimal images alive.
    pub host_command: Option<Vec<String>>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            socket: PathBuf::from(DEFAULT_SOCKET),
            request_timeout: Duration::from_secs(30),
            pull_timeout: Duration::from_secs(600),
            pull_missing: true,
            host_command: Some(super::argv(&[
                "sh",
                "-c",
                "trap 'exit 0' TERM INT; while :; do sleep 3600 & wait $!; done",
            ])),
        }
    }
}

impl EngineConfig {
    /// Defaults, with the socket path taken from `VEMUL_ENGINE_SOCKET` when set.
    pub fn from_env() -> Self {
        let mut cfg = Self::default();
        if let Ok(path) = std::env::var("VEMUL_ENGINE_SOCKET") {
            if !path.is_empty() {
                cfg.socket = PathBuf::from(path);
            }
        }
        cfg
    }
}

pub struct DockerEngine {
    client: UnixHttpClient,
    config: EngineConfig,
    api_version: String,
}

fn version_tuple(v: &str) -> (u32, u32) {
    let mut parts = v.trim().split('.').map(|p| p.parse::<u32>().unwrap_or(0));
    (parts.next().unwrap_or(0), parts.next().unwrap_or(0))
}

fn http_err(e: HttpError) -> RuntimeError {
    match e {
        HttpError::Connect { .. } | HttpError::Io(_) | HttpError::TimedOut => {
            RuntimeError::EngineUnreachable(e.to_string())
        }
        HttpError::Malformed(m) => RuntimeError::Protocol(m),
    }
}

fn message_of(resp: &HttpResponse) -> String {
    serde_json::from_slice::<Value>(&resp.body)
        .ok()
        .and_then(|v| v.get("message").and_then(Value::as_str).map(str::to_string))
        .unwrap_or_else(|| resp.text().trim().to_string())
}

fn engine_err(resp: &HttpResponse) -> RuntimeError {
    RuntimeError::Engine {
        status: resp.status,
        message: message_of(resp),
    }
}

fn parse_json(resp: &HttpResponse) -> Result<Value, RuntimeError> {
    serde_json::from_slice(&resp.body)
        .map_err(|e| RuntimeError::Protocol(format!("invalid JSON: {e}")))
}

/// Splits `repo[:tag]` (a registry port is not a tag).
fn split_image(image: &str) -> (&str, &str) {
    match image.rfind(':') {
        Some(i) if !image[i..].contains('/') => (&image[..i], &image[i + 1..]),
        _ => (image, "latest"),
    }
}

fn state_from_str(s: &str) -> ContainerState {
    match s {
        "running" | "restarting" => ContainerState::Running,
        "paused" => ContainerState::Paused,
        "removing" | "dead" => ContainerState::Removed,
        _ => ContainerState::Created,
    }
}

/// Controller environment: the default image needs OpenFlow and reactive
/// forwarding switched on. Other images ignore it.
pub const CONTROLLER_ENV: [&str; 1] = ["ONOS_APPS=drivers,openflow,fwd"];

/// Body of the create call for `spec`.
pub(crate) fn create_body(spec: &NodeSpec, run_id: &str, host_command: Option<&[String]>) -> Value {
    let mut host_config = json!({
        "NetworkMode": "none",
        "CapAdd": ["NET_ADMIN", "NET_RAW", "SYS_ADMIN"],
        "Privileged": spec.kind == NodeKind::WhiteboxSwitch,
        "Init": spec.kind == NodeKind::Host,
    });
    if let Some(limits) = spec.limits {
        if let Some(q) = limits.cpu_quota {
            host_config["CpuPeriod"] = json!(CPU_PERIOD_US);
            host_config["CpuQuota"] = json!((q * CPU_PERIOD_US as f64).round() as i64);
        }
        if let Some(m) = limits.memory_bytes {
            host_config["Memory"] = json!(m);
        }
    }
    let mut body = json!({
        "Image": spec.image,
        "Hostname": spec.name,
        "Labels": {
            OWNER_LABEL: run_id,
            NODE_LABEL: spec.name,
            KIND_LABEL: spec.kind.as_str(),
        },
        "Tty": false,
        "OpenStdin": false,
        "AttachStdout": false,
        "AttachStderr": false,
        "NetworkDisabled": false,
        "HostConfig": host_config,
    });
    if spec.kind == NodeKind::Host {
        if let Some(cmd) = host_command {
            body["Cmd"] = json!(cmd);
        }
    }
    if spec.kind == NodeKind::Controller {
        body["Env"] = json!(CONTROLLER_ENV);
    }
    body
}

/// Parses one stats document into (cumulative CPU ns, resident memory bytes).
pub(crate) fn parse_stats(doc: &Value) -> Result<(u64, u64), RuntimeError> {
    let cpu = doc
        .pointer("/cpu_stats/cpu_usage/total_usage")
        .and_then(Value::as_u64)
        .ok_or_else(|| {
            RuntimeError::Protocol("stats without cpu_stats.cpu_usage.total_usage".into())
        })?;
    let usage = doc
        .pointer("/memory_stats/usage")
        .and_then(Value::as_u64)
        .unwrap_or(0);
    let stats = doc.pointer("/memory_stats/stats");
    // cgroup v2 reports inactive_file, v1 total_inactive_file / cache
    let reclaimable = ["inactive_file", "total_inactive_file", "cache"]
        .iter()
        .find_map(|k| stats.and_then(|s| s.get(*k)).and_then(Value::as_u64))
        .unwrap_or(0);
    Ok((cpu, usage.saturating_sub(reclaimable)))
}

/// Splits the engine's multiplexed exec stream into stdout/stderr frames.
pub(crate) struct Demux<R> {
    inner: R,
}

impl<R: Read> Demux<R> {
    pub(crate) fn new(inner: R) -> Self {
        Self { inner }
    }

    /// Next frame, or `None` at end of stream.
    pub(crate) fn next_frame(&mut self) -> io::Result<Option<(OutputStream, Vec<u8>)>> {
        let mut header = [0u8; 8];
        let mut filled = 0;
        while filled < header.len() {
            let n = self.inner.read(&mut header[filled..])?;
            if n == 0 {
                if filled == 0 {
                    return Ok(None);
                }
                return Err(io::Error::new(
                    io::ErrorKind::UnexpectedEof,
                    "truncated frame header",
                ));
            }
            filled += n;
        }
        let stream = match header[0] {
            2 => OutputStream::Stderr,
            _ => OutputStream::Stdout,
        };
        let len = u32::from_be_bytes([header[4], header[5], header[6], header[7]]) as usize;
        let mut payload = vec![0u8; len];
        self.inner.read_exact(&mut payload)?;
        Ok(Some((stream, payload)))
    }
}

impl DockerEngine {
    /// Connects and negotiates the API version.
    pub fn connect(config: EngineConfig) -> Result<Self, RuntimeError> {
        let client = UnixHttpClient::new(config.socket.clone(), config.request_timeout);
        let resp = client.request("GET", "/version", None).map_err(http_err)?;
        if !resp.is_success() {
            return Err(engine_err(&resp));
        }
        let doc = parse_json(&resp)?;
        let server = doc
            .get("ApiVersion")
            .and_then(Value::as_str)
            .unwrap_or(API_VERSION_MAX)
            .to_string();
        let api_version = if version_tuple(&server) < version_tuple(API_VERSION_MAX) {
            server
        } else {
            API_VERSION_MAX.to_string()
        };
        debug!(
            "engine at {} speaks API {api_version}",
            config.socket.display()
        );
        Ok(Self {
            client,
            config,
            api_version,
        })
    }

    pub fn api_version(&self) -> &str {
        &self.api_version
    }

    fn path(&self, p: &str) -> String {
        format!("/v{}{}", self.api_version, p)
    }

    fn call(
        &self,
        method: &str,
        p: &str,
        body: Option<&Value>,
    ) -> Result<HttpResponse, RuntimeError> {
        let bytes = body.map(|b| serde_json::to_vec(b).expect("JSON values serialize"));
        self.client
            .request(method, &self.path(p), bytes.as_deref())
            .map_err(http_err)
    }

    fn pull(&self, image: &str) -> Result<(), RuntimeError> {
        let (repo, tag) = split_image(image);
        let p = self.path(&format!(
            "/images/create?fromImage={}&tag={}",
            percent_encode(repo),
            percent_encode(tag)
        ));
        let deadline = Instant::now() + self.config.pull_timeout;
        let mut resp = self
            .client
            .open("POST", &p, None, deadline)
            .map_err(http_err)?;
        let mut body = Vec::new();
        resp.body
            .read_to_end(&mut body)
            .map_err(|e| RuntimeError::EngineUnreachable(e.to_string()))?;
        if !(200..300).contains(&resp.status) {
            return Err(RuntimeError::ImageNotFound(image.to_string()));
        }
        // progress is a JSON stream; failures arrive as {"error": ...}
        for line in body.split(|b| *b == b'\n') {
            if let Ok(v) = serde_json::from_slice::<Value>(line) {
                if let Some(err) = v.get("error").and_then(Value::as_str) {
                    debug!("pull of {image} failed: {err}");
                    return Err(RuntimeError::ImageNotFound(image.to_string()));
                }
            }
        }
        Ok(())
    }

    fn create_raw(&self, spec: &NodeSpec, run_id: &str) -> Result<String, RuntimeError> {
        let name = container_name(run_id, &spec.name);
        let body = create_body(spec, run_id, self.config.host_command.as_deref());
        let p = format!("/containers/create?name={}", percent_encode(&name));
        let mut pulled = false;
        loop {
            let resp = self.call("POST", &p, Some(&body))?;
            match resp.status {
                200 | 201 => {
                    let doc = parse_json(&resp)?;
                    return doc
                        .get("Id")
                        .and_then(Value::as_str)
                        .map(str::to_string)
                        .ok_or_else(|| {
                            RuntimeError::Protocol("create response without Id".into())
                        });
                }
                404 if !pulled && self.config.pull_missing => {
                    self.pull(&spec.image)?;
                    pulled = true;
                }
                404 => return Err(RuntimeError::ImageNotFound(spec.image.clone())),
                409 => return Err(RuntimeError::NameConflict(name)),
                400 | 500
                    if spec.limits.is_some() && looks_like_limit_error(&message_of(&resp)) =>
                {
                    return Err(RuntimeError::LimitRejected(message_of(&resp)))
                }
                _ => return Err(engine_err(&resp)),
            }
        }
    }

    fn remove_raw(&self, id: &str) -> Result<(), RuntimeError> {
        let resp = self.call(
            "DELETE",
            &format!("/containers/{id}?force=true&v=true"),
            None,
        )?;
        match resp.status {
            200..=299 | 404 => Ok(()),
            // removal already in progress
            409 if message_of(&resp).contains("already in progress") => Ok(()),
            _ => Err(engine_err(&resp)),
        }
    }

    fn inspect_id(&self, id: &str) -> Result<ContainerInfo, RuntimeError> {
        let resp = self.call("GET", &format!("/containers/{id}/json"), None)?;
        match resp.status {
            200 => {}
            404 => return Err(RuntimeError::NoSuchContainer(id.to_string())),
            _ => return Err(engine_err(&resp)),
        }
        let doc = parse_json(&resp)?;
        Ok(ContainerInfo {
            id: doc
                .get("Id")
                .and_then(Value::as_str)
                .unwrap_or(id)
                .to_string(),
            hostname: doc
                .pointer("/Config/Hostname")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string(),
            pid: doc
                .pointer("/State/Pid")
                .and_then(Value::as_u64)
                .filter(|p| *p > 0)
                .map(|p| p as u32),
            running: doc
                .pointer("/State/Running")
                .and_then(Value::as_bool)
                .unwrap_or(false),
            paused: doc
                .pointer("/State/Paused")
                .and_then(Value::as_bool)
                .unwrap_or(false),
            cpu_quota: doc
                .pointer("/HostConfig/CpuQuota")
                .and_then(Value::as_i64)
                .unwrap_or(0),
            cpu_period: doc
                .pointer("/HostConfig/CpuPeriod")
                .and_then(Value::as_i64)
                .unwrap_or(0),
            memory_bytes: doc
                .pointer("/HostConfig/Memory")
                .and_then(Value::as_i64)
                .unwrap_or(0),
        })
    }

    fn read_counters(&self, id: &str) -> Result<(u64, u64), RuntimeError> {
        let resp = self.call(
            "GET",
            &format!("/containers/{id}/stats?stream=false&one-shot=true"),
            None,
        )?;
        if resp.status == 404 {
            return Err(RuntimeError::NoSuchContainer(id.to_string()));
        }
        if !resp.is_success() {
            return Err(engine_err(&resp));
        }
        parse_stats(&parse_json(&resp)?)
    }

    fn exec_exit_code(&self, exec_id: &str) -> Result<(i64, Option<u32>), RuntimeError> {
        for _ in 0..50 {
            let resp = self.call("GET", &format!("/exec/{exec_id}/json"), None)?;
            if !resp.is_success() {
                return Err(engine_err(&resp));
            }
            let doc = parse_json(&resp)?;
            let running = doc.get("Running").and_then(Value::as_bool).unwrap_or(false);
            let pid = doc.get("Pid").and_then(Value::as_u64).map(|p| p as u32);
            if !running {
                if let Some(code) = doc.get("ExitCode").and_then(Value::as_i64) {
                    return Ok((code, pid));
                }
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        Err(RuntimeError::Protocol(format!(
            "exec {exec_id} never reported an exit code"
        )))
    }

    fn kill_exec(&self, exec_id: &str) {
        let Ok(resp) = self.call("GET", &format!("/exec/{exec_id}/json"), None) else {
            return;
        };
        let pid = parse_json(&resp)
            .ok()
            .and_then(|d| d.get("Pid").and_then(Value::as_u64))
            .filter(|p| *p > 1);
        if let Some(pid) = pid {
            // SAFETY: plain signal delivery to a pid reported by the engine
            let rc = unsafe { libc::kill(pid as libc::pid_t, libc::SIGKILL) };
            if rc != 0 {
                debug!(
                    "could not kill exec pid {pid}: {}",
                    io::Error::last_os_error()
                );
            }
        }
    }
}

fn looks_like_limit_error(msg: &str) -> bool {
    let m = msg.to_ascii_lowercase();
    ["memory", "cpu", "nanocpus", "quota", "period"]
        .iter()
        .any(|k| m.contains(k))
}

impl ContainerEngine for DockerEngine {
    fn create_container(&self, spec: &NodeSpec, run_id: &str) -> Result<NodeHandle, RuntimeError> {
        let id = self.create_raw(spec, run_id)?;
        let started = self.call("POST", &format!("/containers/{id}/start"), None);
        let started = match started {
            Ok(resp) if resp.is_success() || resp.status == 304 => Ok(()),
            Ok(resp) => Err(engine_err(&resp)),
            Err(e) => Err(e),
        };
        if let Err(e) = started {
            if let Err(cleanup) = self.remove_raw(&id) {
                warn!("could not remove unstarted container {id}: {cleanup}");
            }
            return Err(e);
        }
        let info = self.inspect_id(&id)?;
        Ok(NodeHandle {
            node_name: spec.name.clone(),
            kind: spec.kind,
            run_id: run_id.to_string(),
            container_id: id,
            pid: info.pid,
            mgmt_ip: None,
            state: ContainerState::Running,
        })
    }

    fn destroy_container(&self, handle: &mut NodeHandle) -> Result<(), RuntimeError> {
        if handle.state == ContainerState::Removed {
            return Ok(());
        }
        self.remove_raw(&handle.container_id)?;
        handle.state = ContainerState::Removed;
        handle.pid = None;
        Ok(())
    }

    fn exec_streaming(
        &self,
        handle: &NodeHandle,
        argv: &[String],
        timeout: Duration,
        sink: &mut dyn FnMut(OutputStream, &[u8]),
    ) -> Result<ExecOutput, RuntimeError> {
        handle.require_running()?;
        let deadline = Instant::now() + timeout;
        let created = self.call(
            "POST",
            &format!("/containers/{}/exec", handle.container_id),
            Some(&json!({
                "AttachStdin": false,
                "AttachStdout": true,
                "AttachStderr": true,
                "Tty": false,
                "Cmd": argv,
            })),
        )?;
        match created.status {
            201 | 200 => {}
            404 => return Err(RuntimeError::NoSuchContainer(handle.container_id.clone())),
            409 => {
                return Err(RuntimeError::NodeNotRunning {
                    node: handle.node_name.clone(),
                    state: handle.state,
                })
            }
            _ => return Err(engine_err(&created)),
        }
        let exec_id = parse_json(&created)?
            .get("Id")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| RuntimeError::Protocol("exec create without Id".into()))?;

        let body = serde_json::to_vec(&json!({"Detach": false, "Tty": false})).unwrap();
        let resp = self
            .client
            .open(
                "POST",
                &self.path(&format!("/exec/{exec_id}/start")),
                Some(&body),
                deadline,
            )
            .map_err(|e| match e {
                HttpError::TimedOut => RuntimeError::Timeout {
                    node: handle.node_name.clone(),
                    timeout_ms: timeout.as_millis() as u64,
                    partial: ExecOutput::default(),
                },
                other => http_err(other),
            })?;
        if resp.status == 409 {
            return Err(RuntimeError::NodeNotRunning {
                node: handle.node_name.clone(),
                state: handle.state,
            });
        }
        if !(200..300).contains(&resp.status) {
            return Err(RuntimeError::Engine {
                status: resp.status,
                message: format!("exec start failed for {exec_id}"),
            });
        }

        let mut out = ExecOutput::default();
        let mut stdout = Vec::new();
        let mut stderr = Vec::new();
        let mut demux = Demux::new(resp.body);
        loop {
            match demux.next_frame() {
                Ok(Some((stream, bytes))) => {
                    sink(stream, &bytes);
                    match stream {
                        OutputStream::Stdout => stdout.extend_from_slice(&bytes),
                        OutputStream::Stderr => stderr.extend_from_slice(&bytes),
                    }
                }
                Ok(None) => break,
                Err(e)
                    if matches!(
                        e.kind(),
                        io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock
                    ) =>
                {
                    self.kill_exec(&exec_id);
                    out.exit_code = -1;
                    out.stdout = String::from_utf8_lossy(&stdout).into_owned();
                    out.stderr = String::from_utf8_lossy(&stderr).into_owned();
                    return Err(RuntimeError::Timeout {
                        node: handle.node_name.clone(),
                        timeout_ms: timeout.as_millis() as u64,
                        partial: out,
                    });
                }
                Err(e) => return Err(RuntimeError::EngineUnreachable(e.to_string())),
            }
        }
        let (code, _) = self.exec_exit_code(&exec_id)?;
        out.exit_code = code;
        out.stdout = String::from_utf8_lossy(&stdout).into_owned();
        out.stderr = String::from_utf8_lossy(&stderr).into_owned();
        Ok(out)
    }

    fn pause(&self, handle: &mut NodeHandle) -> Result<(), RuntimeError> {
        if handle.state != ContainerState::Running {
            return Err(RuntimeError::InvalidState {
                node: handle.node_name.clone(),
                from: handle.state,
                to: ContainerState::Paused,
            });
        }
        let resp = self.call(
            "POST",
            &format!("/containers/{}/pause", handle.container_id),
            None,
        )?;
        if !resp.is_success() {
            return Err(engine_err(&resp));
        }
        handle.transition(ContainerState::Paused)
    }

    fn resume(&self, handle: &mut NodeHandle) -> Result<(), RuntimeError> {
        if handle.state != ContainerState::Paused {
            return Err(RuntimeError::InvalidState {
                node: handle.node_name.clone(),
                from: handle.state,
                to: ContainerState::Running,
            });
        }
        let resp = self.call(
            "POST",
            &format!("/containers/{}/unpause", handle.container_id),
            None,
        )?;
        if !resp.is_success() {
            return Err(engine_err(&resp));
        }
        handle.transition(ContainerState::Running)
    }

    fn sample_stats(&self, handle: &NodeHandle) -> Result<StatSnapshot, RuntimeError> {
        handle.require_running()?;
        let (cpu0, _) = self.read_counters(&handle.container_id)?;
        let t0 = Instant::now();
        std::thread::sleep(STATS_WINDOW);
        let (cpu1, mem) = self.read_counters(&handle.container_id)?;
        let wall = t0.elapsed();
        Ok(StatSnapshot {
            timestamp_ms: monotonic_ms(),
            cpu_percent: cpu_percent(cpu0, cpu1, wall),
            memory_bytes: mem,
        })
    }

    fn list_managed(&self, run_id: Option<&str>) -> Result<Vec<NodeHandle>, RuntimeError> {
        let label = match run_id {
            Some(run) => format!("{OWNER_LABEL}={run}"),
            None => OWNER_LABEL.to_string(),
        };
        let filters = json!({ "label": [label] }).to_string();
        let resp = self.call(
            "GET",
            &format!(
                "/containers/json?all=true&filters={}",
                percent_encode(&filters)
            ),
            None,
        )?;
        if !resp.is_success() {
            return Err(engine_err(&resp));
        }
        let doc = parse_json(&resp)?;
        let items = doc
            .as_array()
            .ok_or_else(|| RuntimeError::Protocol("container list is not an array".into()))?;
        let mut out = Vec::with_capacity(items.len());
        for item in items {
            let labels: HashMap<String, String> = item
                .get("Labels")
                .and_then(|l| serde_json::from_value(l.clone()).ok())
                .unwrap_or_default();
            // engines that ignore the filter must not leak foreign containers
            let Some(owner) = labels.get(OWNER_LABEL) else {
                continue;
            };
            if run_id.is_some_and(|r| r != owner) {
                continue;
            }
            let id = item
                .get("Id")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string();
            out.push(NodeHandle {
                node_name: labels
                    .get(NODE_LABEL)
                    .cloned()
                    .unwrap_or_else(|| id.clone()),
                kind: labels
                    .get(KIND_LABEL)
                    .and_then(|k| k.parse().ok())
                    .unwrap_or(NodeKind::Host),
                run_id: owner.clone(),
                container_id: id,
                pid: None,
                mgmt_ip: None,
                state: state_from_str(item.get("State").and_then(Value::as_str).unwrap_or("")),
            });
        }
        Ok(out)
    }

    fn inspect(&self, handle: &NodeHandle) -> Result<ContainerInfo, RuntimeError> {
        self.inspect_id(&handle.container_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{IpConfig, ResourceLimits};

    #[test]
    fn image_refs_split() {
        assert_eq!(
            split_image("onosproject/onos:2.7.0"),
            ("onosproject/onos", "2.7.0")
        );
        assert_eq!(split_image("alpine"), ("alpine", "latest"));
        assert_eq!(
            split_image("registry:5000/x/y"),
            ("registry:5000/x/y", "latest")
        );
        assert_eq!(
            split_image("registry:5000/x/y:1"),
            ("registry:5000/x/y", "1")
        );
    }

    #[test]
    fn version_ordering() {
        assert!(version_tuple("1.41") < version_tuple(API_VERSION_MAX));
        assert!(version_tuple("1.45") > version_tuple("1.9"));
    }

    #[test]
    fn half_core_quota_is_half_the_period() {
        let spec = NodeSpec::whitebox("sw1").with_limits(ResourceLimits {
            cpu_quota: Some(0.5),
            memory_bytes: Some(1 << 28),
        });
        let body = create_body(&spec, "run1", None);
        assert_eq!(body["HostConfig"]["CpuPeriod"], json!(100_000));
        assert_eq!(body["HostConfig"]["CpuQuota"], json!(50_000));
        assert_eq!(body["HostConfig"]["Memory"], json!(1u64 << 28));
        assert_eq!(body["HostConfig"]["NetworkMode"], json!("none"));
        assert_eq!(body["Hostname"], json!("sw1"));
        assert_eq!(body["Labels"][OWNER_LABEL], json!("run1"));
    }

    #[test]
    fn host_command_only_for_hosts() {
        let cmd = super::super::argv(&["sleep", "1"]);
        let h = NodeSpec::host("h1", "10.0.0.1/24".parse::<IpConfig>().unwrap());
        assert_eq!(
            create_body(&h, "r", Some(&cmd))["Cmd"],
            json!(["sleep", "1"])
        );
        let s = NodeSpec::whitebox("s");
        assert!(create_body(&s, "r", Some(&cmd)).get("Cmd").is_none());
        assert!(create_body(&s, "r", None).get("Env").is_none());
        let c = NodeSpec::controller("c");
        assert_eq!(create_body(&c, "r", None)["Env"], json!(CONTROLLER_ENV));
    }

    #[test]
    fn stats_parsing_v1_and_v2() {
        let v2 = json!({
            "cpu_stats": {"cpu_usage": {"total_usage": 1234}},
            "memory_stats": {"usage": 10_000, "stats": {"inactive_file": 4_000}}
        });
        assert_eq!(parse_stats(&v2).unwrap(), (1234, 6_000));
        let v1 = json!({
            "cpu_stats": {"cpu_usage": {"total_usage": 5}},
            "memory_stats": {"usage": 100, "stats": {"total_inactive_file": 30, "cache": 50}}
        });
        assert_eq!(parse_stats(&v1).unwrap(), (5, 70));
        assert!(parse_stats(&json!({})).is_err());
    }

    #[test]
    fn demux_frames() {
        let mut raw = vec![1, 0, 0, 0, 0, 0, 0, 3];
        raw.extend_from_slice(b"hi\n");
        raw.extend_from_slice(&[2, 0, 0, 0, 0, 0, 0, 2]);
        raw.extend_from_slice(b"e!");
        let mut d = Demux::new(&raw[..]);
        assert_eq!(
            d.next_frame().unwrap(),
            Some((OutputStream::Stdout, b"hi\n".to_vec()))
        );
        assert_eq!(
            d.next_frame().unwrap(),
            Some((OutputStream::Stderr, b"e!".to_vec()))
        );
        assert_eq!(d.next_frame().unwrap(), None);
        let mut short = Demux::new(&[1u8, 0, 0][..]);
        assert!(short.next_frame().is_err());
    }

    #[test]
    fn unreachable_engine() {
        let cfg = EngineConfig {
            socket: "/nonexistent/docker.sock".into(),
            ..EngineConfig::default()
        };
        assert!(matches!(
            DockerEngine::connect(cfg),
            Err(RuntimeError::EngineUnreachable(_))
        ));
    }
}
