// SPDX-License-Identifier: Apache-2.0

//! Adapter to the local container engine.
//!
//! [`ContainerEngine`] is the contract the orchestrator programs against.
//! [`DockerEngine`] implements it over the engine's HTTP API on a local unix
//! socket; [`FakeEngine`] is an in-memory stand-in used by tests and dry runs.

mod docker;
mod fake;
mod http;

use std::fmt;
use std::net::Ipv4Addr;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::{NodeKind, NodeSpec};

pub use docker::{DockerEngine, EngineConfig, API_VERSION_MAX};
pub use fake::{ExecHandler, FakeEngine, FakeStats};
pub use http::{
    percent_encode, BodyReader, HttpError, HttpResponse, StreamingResponse, UnixHttpClient,
};

/// Label key carrying the run id on every container this crate creates.
pub const OWNER_LABEL: &str = "vemul.owner";
/// Label key carrying the node name.
pub const NODE_LABEL: &str = "vemul.node";
/// Label key carrying the node kind.
pub const KIND_LABEL: &str = "vemul.kind";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContainerState {
    Created,
    Running,
    Paused,
    Removed,
}

impl fmt::Display for ContainerState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContainerState::Created => "created",
            ContainerState::Running => "running",
            ContainerState::Paused => "paused",
            ContainerState::Removed => "removed",
        })
    }
}

/// A node spec bound to a live container.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeHandle {
    pub node_name: String,
    pub kind: NodeKind,
    pub run_id: String,
    pub container_id: String,
    /// Process id of the container's init process; locates its network namespace.
    pub pid: Option<u32>,
    /// Address on the management bus, once the fabric has attached the node.
    pub mgmt_ip: Option<Ipv4Addr>,
    pub state: ContainerState,
}

impl NodeHandle {
    pub fn is_running(&self) -> bool {
        self.state == ContainerState::Running
    }

    fn require_running(&self) -> Result<(), RuntimeError> {
        if self.is_running() {
            Ok(())
        } else {
            Err(RuntimeError::NodeNotRunning {
                node: self.node_name.clone(),
                state: self.state,
            })
        }
    }

    /// Applies a pause/resume transition, enforcing the lifecycle.
    fn transition(&mut self, to: ContainerState) -> Result<(), RuntimeError> {
        use ContainerState::*;
        let ok = matches!(
            (self.state, to),
            (Running, Paused) | (Paused, Running) | (Created, Running)
        );
        if !ok {
            return Err(RuntimeError::InvalidState {
                node: self.node_name.clone(),
                from: self.state,
                to,
            });
        }
        self.state = to;
        Ok(())
    }
}

/// Captured output of a command run inside a node.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecOutput {
    pub exit_code: i64,
    pub stdout: String,
    pub stderr: String,
}

impl ExecOutput {
    pub fn success(&self) -> bool {
        self.exit_code == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputStream {
    Stdout,
    Stderr,
}

/// One resource observation of a container.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatSnapshot {
    /// Milliseconds on this process's monotonic clock.
    pub timestamp_ms: u64,
    /// Percent of one core; 200 means two full cores.
    pub cpu_percent: f64,
    pub memory_bytes: u64,
}

/// Engine-side view of a container, as reported by inspect.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerInfo {
    pub id: String,
    pub hostname: String,
    pub pid: Option<u32>,
    pub running: bool,
    pub paused: bool,
    pub cpu_quota: i64,
    pub cpu_period: i64,
    pub memory_bytes: i64,
}

#[derive(Debug, Error, Clone)]
pub enum RuntimeError {
    #[error("container engine unreachable: {0}")]
    EngineUnreachable(String),
    #[error("image not found: {0}")]
    ImageNotFound(String),
    #[error("container name conflict: {0}")]
    NameConflict(String),
    #[error("resource limit rejected: {0}")]
    LimitRejected(String),
    #[error("node `{node}` is not running (state {state})")]
    NodeNotRunning { node: String, state: ContainerState },
    #[error("command in `{node}` timed out after {timeout_ms} ms")]
    Timeout {
        node: String,
        timeout_ms: u64,
        partial: ExecOutput,
    },
    #[error("node `{node}` cannot go from {from} to {to}")]
    InvalidState {
        node: String,
        from: ContainerState,
        to: ContainerState,
    },
    #[error("no such container: {0}")]
    NoSuchContainer(String),
    #[error("engine error (status {status}): {message}")]
    Engine { status: u16, message: String },
    #[error("unexpected engine response: {0}")]
    Protocol(String),
}

impl RuntimeError {
    /// Worth retrying: the engine may come back.
    pub fn is_retriable(&self) -> bool {
        matches!(self, RuntimeError::EngineUnreachable(_))
    }
}

/// Lifecycle, exec and stats operations on node containers.
///
/// Implementations are safe for concurrent calls on distinct handles;
/// callers serialize calls on the same handle.
pub trait ContainerEngine: Send + Sync {
    /// Creates and starts a container for `spec`, labelled with `run_id`.
    fn create_container(&self, spec: &NodeSpec, run_id: &str) -> Result<NodeHandle, RuntimeError>;

    /// Removes the container. Succeeds if it is already gone.
    fn destroy_container(&self, handle: &mut NodeHandle) -> Result<(), RuntimeError>;

    /// Runs `argv` in the node, handing output to `sink` as it arrives.
    fn exec_streaming(
        &self,
        handle: &NodeHandle,
        argv: &[String],
        timeout: Duration,
        sink: &mut dyn FnMut(OutputStream, &[u8]),
    ) -> Result<ExecOutput, RuntimeError>;

    fn pause(&self, handle: &mut NodeHandle) -> Result<(), RuntimeError>;

    fn resume(&self, handle: &mut NodeHandle) -> Result<(), RuntimeError>;

    /// One snapshot; CPU is measured over a window of at least 100 ms.
    fn sample_stats(&self, handle: &NodeHandle) -> Result<StatSnapshot, RuntimeError>;

    /// Containers carrying the ownership label; only `run_id`'s when given.
    fn list_managed(&self, run_id: Option<&str>) -> Result<Vec<NodeHandle>, RuntimeError>;

    fn inspect(&self, handle: &NodeHandle) -> Result<ContainerInfo, RuntimeError>;

    fn exec(
        &self,
        handle: &NodeHandle,
        argv: &[String],
        timeout: Duration,
    ) -> Result<ExecOutput, RuntimeError> {
        self.exec_streaming(handle, argv, timeout, &mut |_, _| {})
    }
}

/// Minimum CPU sampling window.
pub const STATS_WINDOW: Duration = Duration::from_millis(100);

/// Milliseconds since the first call in this process.
pub fn monotonic_ms() -> u64 {
    static EPOCH: OnceLock<Instant> = OnceLock::new();
    EPOCH.get_or_init(Instant::now).elapsed().as_millis() as u64
}

/// CPU percent from two cumulative CPU-time readings taken `wall` apart.
pub fn cpu_percent(cpu_ns_before: u64, cpu_ns_after: u64, wall: Duration) -> f64 {
    let wall_ns = wall.as_nanos() as f64;
    if wall_ns <= 0.0 {
        return 0.0;
    }
    cpu_ns_after.saturating_sub(cpu_ns_before) as f64 / wall_ns * 100.0
}

/// Converts argv-style string slices.
pub fn argv<S: AsRef<str>>(parts: &[S]) -> Vec<String> {
    parts.iter().map(|s| s.as_ref().to_string()).collect()
}

/// Engine-side container name for a node.
pub fn container_name(run_id: &str, node: &str) -> String {
    format!("vemul-{run_id}-{node}")
}
