// SPDX-License-Identifier: Apache-2.0

//! In-memory container engine.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use super::{
    monotonic_ms, ContainerEngine, ContainerInfo, ContainerState, ExecOutput, NodeHandle,
    OutputStream, RuntimeError, StatSnapshot,
};
use crate::topology::{NodeKind, NodeSpec};

/// Answers an exec in `node`; `None` falls through to the built-in commands.
pub type ExecHandler = Arc<dyn Fn(&str, &[String]) -> Option<ExecOutput> + Send + Sync>;

/// Per-kind resource figures reported by [`FakeEngine::sample_stats`].
#[derive(Debug, Clone)]
pub struct FakeStats {
    pub cpu_percent: HashMap<NodeKind, f64>,
    pub memory_bytes: HashMap<NodeKind, u64>,
}

impl Default for FakeStats {
    fn default() -> Self {
        Self {
            cpu_percent: HashMap::from([
                (NodeKind::Host, 0.1),
                (NodeKind::WhiteboxSwitch, 0.3),
                (NodeKind::Controller, 5.0),
            ]),
            memory_bytes: HashMap::from([
                (NodeKind::Host, 2 << 20),
                (NodeKind::WhiteboxSwitch, 13 << 20),
                (NodeKind::Controller, 600 << 20),
            ]),
        }
    }
}

#[derive(Debug, Clone)]
struct FakeContainer {
    id: String,
    name: String,
    kind: NodeKind,
    labels: BTreeMap<String, String>,
    state: ContainerState,
    pid: u32,
    cpu_quota: i64,
    memory: i64,
    last_sample_ms: u64,
}

pub struct FakeEngine {
    containers: Mutex<BTreeMap<String, FakeContainer>>,
    missing_images: RwLock<HashSet<String>>,
    failing_nodes: RwLock<HashSet<String>>,
    exec_handler: RwLock<Option<ExecHandler>>,
    stats: RwLock<FakeStats>,
    /// Simulated engine latency per create call.
    pub create_delay: Duration,
    /// Simulated sampling window per stats call.
    pub sample_delay: Duration,
    next_id: AtomicU64,
    next_pid: AtomicU32,
}

impl Default for FakeEngine {
    fn default() -> Self {
        Self::new()
    }
}

impl FakeEngine {
    pub fn new() -> Self {
        Self {
            containers: Mutex::new(BTreeMap::new()),
            missing_images: RwLock::new(HashSet::new()),
            failing_nodes: RwLock::new(HashSet::new()),
            exec_handler: RwLock::new(None),
            stats: RwLock::new(FakeStats::default()),
            create_delay: Duration::ZERO,
            sample_delay: Duration::ZERO,
            next_id: AtomicU64::new(1),
            next_pid: AtomicU32::new(40_000),
        }
    }

    pub fn with_delays(mut self, create: Duration, sample: Duration) -> Self {
        self.create_delay = create;
        self.sample_delay = sample;
        self
    }

    /// Makes `image` unresolvable.
    pub fn remove_image(&self, image: &str) {
        self.missing_images
            .write()
            .unwrap()
            .insert(image.to_string());
    }

    /// Makes creation of node `name` fail with image-not-found.
    pub fn fail_node(&self, name: &str) {
        self.failing_nodes.write().unwrap().insert(name.to_string());
    }

    pub fn set_exec_handler(&self, handler: ExecHandler) {
        *self.exec_handler.write().unwrap() = Some(handler);
    }

    pub fn set_stats(&self, stats: FakeStats) {
        *self.stats.write().unwrap() = stats;
    }

    /// Adds a container without the ownership label.
    pub fn add_foreign(&self, name: &str) -> String {
        let id = self.fresh_id();
        let pid = self.next_pid.fetch_add(1, Ordering::Relaxed);
        self.containers.lock().unwrap().insert(
            id.clone(),
            FakeContainer {
                id: id.clone(),
                name: name.to_string(),
                kind: NodeKind::Host,
                labels: BTreeMap::new(),
                state: ContainerState::Running,
                pid,
                cpu_quota: 0,
                memory: 0,
                last_sample_ms: 0,
            },
        );
        id
    }

    /// Removes a container behind the emulator's back.
    pub fn remove_out_of_band(&self, container_id: &str) -> bool {
        self.containers
            .lock()
            .unwrap()
            .remove(container_id)
            .is_some()
    }

    /// Every container, labelled or not.
    pub fn total_containers(&self) -> usize {
        self.containers.lock().unwrap().len()
    }

    fn fresh_id(&self) -> String {
        format!("{:064x}", self.next_id.fetch_add(1, Ordering::Relaxed))
    }

    fn with_container<R>(
        &self,
        id: &str,
        f: impl FnOnce(&mut FakeContainer) -> Result<R, RuntimeError>,
    ) -> Result<R, RuntimeError> {
        let mut map = self.containers.lock().unwrap();
        match map.get_mut(id) {
            Some(c) => f(c),
            None => Err(RuntimeError::NoSuchContainer(id.to_string())),
        }
    }

    fn builtin(argv: &[String], timeout: Duration, node: &str) -> Result<ExecOutput, RuntimeError> {
        let ok = |stdout: String| ExecOutput {
            exit_code: 0,
            stdout,
            stderr: String::new(),
        };
        let args: Vec<&str> = argv.iter().map(String::as_str).collect();
        match args.as_slice() {
            ["true"] | [] => Ok(ok(String::new())),
            ["false"] => Ok(ExecOutput {
                exit_code: 1,
                ..Default::default()
            }),
            ["echo", rest @ ..] => Ok(ok(format!("{}\n", rest.join(" ")))),
            ["sh", "-c", script] if script.starts_with("echo ") => {
                Ok(ok(format!("{}\n", script["echo ".len()..].trim())))
            }
            ["sleep", secs] => {
                let want = Duration::from_secs_f64(secs.parse::<f64>().unwrap_or(0.0));
                if want > timeout {
                    std::thread::sleep(timeout);
                    Err(RuntimeError::Timeout {
                        node: node.to_string(),
                        timeout_ms: timeout.as_millis() as u64,
                        partial: ExecOutput {
                            exit_code: -1,
                            ..Default::default()
                        },
                    })
                } else {
                    std::thread::sleep(want);
                    Ok(ok(String::new()))
                }
            }
            [cmd, ..] => Ok(ExecOutput {
                exit_code: 127,
                stdout: String::new(),
                stderr: format!("sh: {cmd}: not found\n"),
            }),
        }
    }
}

impl ContainerEngine for FakeEngine {
    fn create_container(&self, spec: &NodeSpec, run_id: &str) -> Result<NodeHandle, RuntimeError> {
        if !self.create_delay.is_zero() {
            std::thread::sleep(self.create_delay);
        }
        if self.missing_images.read().unwrap().contains(&spec.image)
            || self.failing_nodes.read().unwrap().contains(&spec.name)
        {
            return Err(RuntimeError::ImageNotFound(spec.image.clone()));
        }
        let cname = super::container_name(run_id, &spec.name);
        let mut map = self.containers.lock().unwrap();
        if map.values().any(|c| c.name == cname) {
            return Err(RuntimeError::NameConflict(cname));
        }
        let id = self.fresh_id();
        let pid = self.next_pid.fetch_add(1, Ordering::Relaxed);
        let limits = spec.limits.unwrap_or_default();
        map.insert(
            id.clone(),
            FakeContainer {
                id: id.clone(),
                name: cname,
                kind: spec.kind,
                labels: BTreeMap::from([
                    (super::OWNER_LABEL.to_string(), run_id.to_string()),
                    (super::NODE_LABEL.to_string(), spec.name.clone()),
                    (
                        super::KIND_LABEL.to_string(),
                        spec.kind.as_str().to_string(),
                    ),
                ]),
                state: ContainerState::Running,
                pid,
                cpu_quota: limits
                    .cpu_quota
                    .map(|q| (q * 100_000.0).round() as i64)
                    .unwrap_or(0),
                memory: limits.memory_bytes.map(|m| m as i64).unwrap_or(0),
                last_sample_ms: 0,
            },
        );
        Ok(NodeHandle {
            node_name: spec.name.clone(),
            kind: spec.kind,
            run_id: run_id.to_string(),
            container_id: id,
            pid: Some(pid),
            mgmt_ip: None,
            state: ContainerState::Running,
        })
    }

    fn destroy_container(&self, handle: &mut NodeHandle) -> Result<(), RuntimeError> {
        if handle.state != ContainerState::Removed {
            self.containers.lock().unwrap().remove(&handle.container_id);
            handle.state = ContainerState::Removed;
            handle.pid = None;
        }
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
        self.with_container(&handle.container_id, |c| match c.state {
            ContainerState::Running => Ok(()),
            state => Err(RuntimeError::NodeNotRunning {
                node: handle.node_name.clone(),
                state,
            }),
        })?;
        let handler = self.exec_handler.read().unwrap().clone();
        let out = match handler.and_then(|h| h(&handle.node_name, argv)) {
            Some(out) => out,
            None => Self::builtin(argv, timeout, &handle.node_name)?,
        };
        if !out.stdout.is_empty() {
            sink(OutputStream::Stdout, out.stdout.as_bytes());
        }
        if !out.stderr.is_empty() {
            sink(OutputStream::Stderr, out.stderr.as_bytes());
        }
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
        self.with_container(&handle.container_id, |c| {
            c.state = ContainerState::Paused;
            Ok(())
        })?;
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
        self.with_container(&handle.container_id, |c| {
            c.state = ContainerState::Running;
            Ok(())
        })?;
        handle.transition(ContainerState::Running)
    }

    fn sample_stats(&self, handle: &NodeHandle) -> Result<StatSnapshot, RuntimeError> {
        handle.require_running()?;
        if !self.sample_delay.is_zero() {
            std::thread::sleep(self.sample_delay);
        }
        let stats = self.stats.read().unwrap().clone();
        self.with_container(&handle.container_id, |c| {
            if c.state != ContainerState::Running {
                return Err(RuntimeError::NodeNotRunning {
                    node: handle.node_name.clone(),
                    state: c.state,
                });
            }
            let mut cpu = stats.cpu_percent.get(&c.kind).copied().unwrap_or(0.0);
            if c.cpu_quota > 0 {
                cpu = cpu.min(c.cpu_quota as f64 / 1000.0);
            }
            let ts = monotonic_ms().max(c.last_sample_ms + 1);
            c.last_sample_ms = ts;
            Ok(StatSnapshot {
                timestamp_ms: ts,
                cpu_percent: cpu,
                memory_bytes: stats.memory_bytes.get(&c.kind).copied().unwrap_or(0),
            })
        })
    }

    fn list_managed(&self, run_id: Option<&str>) -> Result<Vec<NodeHandle>, RuntimeError> {
        let map = self.containers.lock().unwrap();
        Ok(map
            .values()
            .filter_map(|c| {
                let owner = c.labels.get(super::OWNER_LABEL)?;
                if run_id.is_some_and(|r| r != owner) {
                    return None;
                }
                Some(NodeHandle {
                    node_name: c.labels.get(super::NODE_LABEL).cloned().unwrap_or_default(),
                    kind: c.kind,
                    run_id: owner.clone(),
                    container_id: c.id.clone(),
                    pid: Some(c.pid),
                    mgmt_ip: None,
                    state: c.state,
                })
            })
            .collect())
    }

    fn inspect(&self, handle: &NodeHandle) -> Result<ContainerInfo, RuntimeError> {
        self.with_container(&handle.container_id, |c| {
            Ok(ContainerInfo {
                id: c.id.clone(),
                hostname: c.labels.get(super::NODE_LABEL).cloned().unwrap_or_default(),
                pid: Some(c.pid),
                running: c.state == ContainerState::Running,
                paused: c.state == ContainerState::Paused,
                cpu_quota: c.cpu_quota,
                cpu_period: if c.cpu_quota > 0 { 100_000 } else { 0 },
                memory_bytes: c.memory,
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::argv;
    use crate::topology::ResourceLimits;

    fn engine() -> FakeEngine {
        FakeEngine::new()
    }

    #[test]
    fn create_list_destroy() {
        let e = engine();
        assert!(e.list_managed(None).unwrap().is_empty());
        let mut handles: Vec<NodeHandle> = ["a", "b", "c"]
            .iter()
            .map(|n| e.create_container(&NodeSpec::whitebox(*n), "r1").unwrap())
            .collect();
        assert_eq!(e.list_managed(None).unwrap().len(), 3);
        e.add_foreign("postgres");
        assert_eq!(e.list_managed(None).unwrap().len(), 3);
        assert_eq!(e.total_containers(), 4);
        for h in &mut handles {
            e.destroy_container(h).unwrap();
            e.destroy_container(h).unwrap();
            assert_eq!(h.state, ContainerState::Removed);
        }
        assert!(e.list_managed(None).unwrap().is_empty());
    }

    #[test]
    fn missing_image() {
        let e = engine();
        let spec = NodeSpec::whitebox("s").with_image("does/not:exist");
        e.remove_image("does/not:exist");
        assert!(matches!(
            e.create_container(&spec, "r"),
            Err(RuntimeError::ImageNotFound(_))
        ));
    }

    #[test]
    fn exec_builtins_and_timeout() {
        let e = engine();
        let h = e.create_container(&NodeSpec::whitebox("s"), "r").unwrap();
        let t = Duration::from_secs(1);
        let out = e.exec(&h, &argv(&["true"]), t).unwrap();
        assert_eq!((out.exit_code, out.stdout.as_str()), (0, ""));
        let out = e.exec(&h, &argv(&["sh", "-c", "echo hi"]), t).unwrap();
        assert_eq!(out.stdout, "hi\n");
        let err = e
            .exec(&h, &argv(&["sleep", "10"]), Duration::from_millis(100))
            .unwrap_err();
        assert!(matches!(err, RuntimeError::Timeout { .. }));
    }

    #[test]
    fn pause_blocks_exec_and_stats() {
        let e = engine();
        let mut h = e.create_container(&NodeSpec::whitebox("s"), "r").unwrap();
        e.pause(&mut h).unwrap();
        assert_eq!(h.state, ContainerState::Paused);
        assert!(matches!(
            e.exec(&h, &argv(&["true"]), Duration::from_secs(1)),
            Err(RuntimeError::NodeNotRunning { .. })
        ));
        assert!(matches!(
            e.sample_stats(&h),
            Err(RuntimeError::NodeNotRunning { .. })
        ));
        assert!(matches!(
            e.pause(&mut h),
            Err(RuntimeError::InvalidState { .. })
        ));
        e.resume(&mut h).unwrap();
        assert!(e.exec(&h, &argv(&["true"]), Duration::from_secs(1)).is_ok());
    }

    #[test]
    fn quota_reads_back() {
        let e = engine();
        let spec = NodeSpec::whitebox("s").with_limits(ResourceLimits {
            cpu_quota: Some(0.5),
            memory_bytes: None,
        });
        let h = e.create_container(&spec, "r").unwrap();
        let info = e.inspect(&h).unwrap();
        assert_eq!(info.cpu_quota * 2, info.cpu_period);
    }

    #[test]
    fn sample_timestamps_strictly_increase() {
        let e = engine();
        let h = e.create_container(&NodeSpec::whitebox("s"), "r").unwrap();
        let a = e.sample_stats(&h).unwrap();
        let b = e.sample_stats(&h).unwrap();
        assert!(b.timestamp_ms > a.timestamp_ms);
    }

    #[test]
    fn out_of_band_removal_then_destroy() {
        let e = engine();
        let mut h = e.create_container(&NodeSpec::whitebox("s"), "r").unwrap();
        assert!(e.remove_out_of_band(&h.container_id));
        e.destroy_container(&mut h).unwrap();
        assert_eq!(h.state, ContainerState::Removed);
    }
}
