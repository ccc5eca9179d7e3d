// SPDX-License-Identifier: Apache-2.0

//! Measurement harness: scalability sweeps, first-ping latency, UDP
//! throughput and the background-load fidelity scenario, with CSV output
//! next to embedded reference figures.
//!
//! Absolute numbers depend on the machine; the harness reproduces the
//! method and prints reference values beside local ones.

use std::fmt;
use std::fs;
use std::io;
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::orchestrator::{Emulation, Emulator, OrchestratorError};
use crate::par::{self, Mode};
use crate::runtime::argv;
use crate::topology::{
    fidelity_tree, generate, Family, NodeKind, NodeSpec, Probes, Topology,
    FIDELITY_BACKGROUND_PAIRS,
};

/// Foreground rates of the fidelity study, Mbps.
pub const FIDELITY_FG_RATES: [f64; 4] = [1000.0, 1500.0, 2500.0, 3000.0];
/// Background rates of the fidelity study, Mbps per pair.
pub const FIDELITY_BG_RATES: [f64; 5] = [400.0, 600.0, 800.0, 1000.0, 1200.0];
/// Switching capacity quoted for the reference system, Mbps.
pub const REFERENCE_SWITCHING_CAPACITY_MBPS: f64 = 6600.0;
/// Repetitions per configuration in the reference study.
pub const REFERENCE_REPETITIONS: usize = 15;
/// Largest mesh swept unless explicitly overridden.
pub const MESH_CAP: usize = 65;

pub const SWEEP_HEADER: [&str; 10] = [
    "family",
    "switch_count",
    "rep",
    "cpu_percent",
    "memory_mb",
    "first_ping_ms",
    "throughput_mbps",
    "ref_cpu_percent",
    "ref_memory_mb",
    "ref_first_ping_ms",
];

pub const FIDELITY_HEADER: [&str; 5] =
    ["flow", "role", "requested_mbps", "second", "measured_mbps"];

const MIB: f64 = 1024.0 * 1024.0;
const CONTROLLER_NAME: &str = "c0";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("no such host `{0}`")]
    NoSuchHost(String),
    #[error("source and destination are both `{0}`")]
    NoSuchPair(String),
    #[error("`{dst}` unreachable from `{src}` (100% loss)")]
    Unreachable { src: String, dst: String },
    #[error("`{tool}` missing in `{node}`")]
    ToolMissing { node: String, tool: String },
    #[error("`{tool}` failed in `{node}`: {message}")]
    Tool {
        node: String,
        tool: String,
        message: String,
    },
    #[error("cannot parse {what}: {detail}")]
    Parse { what: &'static str, detail: String },
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Arithmetic mean, compensated; `None` for no values.
pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(par::kahan_sum(values.iter().copied()) / values.len() as f64)
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub src: String,
    pub dst: String,
    pub first_ping_ms: f64,
    pub subsequent_ms: Vec<f64>,
}

impl LatencyRecord {
    pub fn median_subsequent(&self) -> Option<f64> {
        median(&self.subsequent_ms)
    }

    /// The first echo took at least as long as the typical later one.
    pub fn shows_setup_penalty(&self) -> bool {
        self.median_subsequent()
            .is_some_and(|m| self.first_ping_ms >= m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowRole {
    Foreground,
    Background,
    Probe,
}

impl FlowRole {
    pub fn as_str(self) -> &'static str {
        match self {
            FlowRole::Foreground => "foreground",
            FlowRole::Background => "background",
            FlowRole::Probe => "probe",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputSeries {
    pub flow: String,
    pub role: FlowRole,
    pub requested_mbps: f64,
    /// (second index, receiver-side Mbps), ordered by second.
    pub samples: Vec<(u32, f64)>,
}

impl ThroughputSeries {
    pub fn mean_mbps(&self) -> Option<f64> {
        mean(&self.samples.iter().map(|s| s.1).collect::<Vec<_>>())
    }

    /// Share of samples within `tolerance` (relative) of the requested rate.
    pub fn fraction_within(&self, tolerance: f64) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let lo = self.requested_mbps * (1.0 - tolerance);
        let hi = self.requested_mbps * (1.0 + tolerance);
        let ok = self
            .samples
            .iter()
            .filter(|(_, m)| *m >= lo && *m <= hi)
            .count();
        ok as f64 / self.samples.len() as f64
    }
}

/// Measurements of one repetition; `None` where a measurement failed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSample {
    pub rep: usize,
    pub cpu_percent: Option<f64>,
    pub memory_mb: Option<f64>,
    pub first_ping_ms: Option<f64>,
    pub throughput_mbps: Option<f64>,
}

impl RunSample {
    pub fn is_complete(&self) -> bool {
        self.cpu_percent.is_some()
            && self.memory_mb.is_some()
            && self.first_ping_ms.is_some()
            && self.throughput_mbps.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub family: Family,
    pub switch_count: usize,
    pub repetitions: usize,
    pub runs: Vec<RunSample>,
    /// Repetitions missing at least one measurement.
    pub incomplete: usize,
    pub cpu_percent_mean: Option<f64>,
    pub memory_mb_mean: Option<f64>,
    pub latency_ms_mean: Option<f64>,
    pub throughput_mbps_mean: Option<f64>,
    pub notes: Vec<String>,
}

impl SweepResult {
    /// Each mean is taken over the repetitions that produced that metric.
    pub fn from_runs(
        family: Family,
        switch_count: usize,
        repetitions: usize,
        runs: Vec<RunSample>,
    ) -> Self {
        let col =
            |f: fn(&RunSample) -> Option<f64>| mean(&runs.iter().filter_map(f).collect::<Vec<_>>());
        Self {
            family,
            switch_count,
            repetitions,
            incomplete: repetitions
                - runs
                    .iter()
                    .filter(|r| r.is_complete())
                    .count()
                    .min(repetitions),
            cpu_percent_mean: col(|r| r.cpu_percent),
            memory_mb_mean: col(|r| r.memory_mb),
            latency_ms_mean: col(|r| r.first_ping_ms),
            throughput_mbps_mean: col(|r| r.throughput_mbps),
            runs,
            notes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefSystem {
    /// The namespace-sharing baseline emulator.
    Mininet,
    /// The container-per-node emulator this tool models.
    Containerized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefMetric {
    CpuPercent,
    MemoryMb,
    FirstPingMs,
}

impl fmt::Display for RefMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RefMetric::CpuPercent => "cpu_percent",
            RefMetric::MemoryMb => "memory_mb",
            RefMetric::FirstPingMs => "first_ping_ms",
        })
    }
}

impl FromStr for RefSystem {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mininet" => Ok(RefSystem::Mininet),
            "containerized" => Ok(RefSystem::Containerized),
            other => Err(format!("unknown reference system `{other}`")),
        }
    }
}

const REF_SIZES: [usize; 7] = [9, 17, 33, 65, 129, 257, 513];

// Rows by switch count; columns: Mininet star, mesh, tree, then the
// containerized emulator's star, mesh, tree.
const REF_CPU: [[f64; 6]; 7] = [
    [1.06, 1.14, 1.11, 2.70, 2.72, 2.71],
    [1.78, 2.35, 2.13, 5.56, 6.50, 6.31],
    [2.82, 3.88, 3.95, 15.65, 26.21, 17.05],
    [3.93, 6.63, 4.65, 41.32, 35.85, 32.42],
    [18.25, 26.67, 20.10, 36.47, 42.82, 38.23],
    [37.01, 41.06, 38.45, 83.63, 92.26, 86.16],
    [51.27, 55.5, 52.75, 169.35, 182.13, 173.22],
];

const REF_MEMORY: [[f64; 6]; 7] = [
    [116.7, 118.82, 117.3, 117.6, 117.7, 117.7],
    [129.4, 130.0, 128.2, 222.3, 224.4, 223.3],
    [129.1, 132.2, 130.9, 437.6, 450.7, 445.8],
    [155.8, 160.1, 158.1, 841.9, 863.8, 856.6],
    [210.7, 219.1, 213.9, 1725.2, 1790.0, 1754.0],
    [317.1, 323.5, 318.7, 3453.6, 3651.7, 3510.2],
    [344.1, 339.1, 347.0, 7121.8, 7276.7, 7237.4],
];

const REF_LATENCY: [[f64; 6]; 7] = [
    [18.7, 20.8, 24.9, 16.7, 16.0, 17.6],
    [29.2, 29.9, 30.8, 24.5, 25.5, 26.0],
    [63.6, 74.2, 56.6, 58.1, 59.1, 55.2],
    [77.2, 89.8, 73.9, 88.6, 89.6, 70.3],
    [143.1, 181.1, 144.0, 154.3, 159.3, 129.0],
    [344.2, 380.3, 337.5, 359.1, 364.1, 294.4],
    [650.2, 726.0, 672.5, 628.3, 635.3, 609.9],
];

/// Reference CPU, memory and first-ping values for both emulators.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceTable;

impl ReferenceTable {
    pub fn get(
        &self,
        system: RefSystem,
        family: Family,
        switch_count: usize,
        metric: RefMetric,
    ) -> Option<f64> {
        let row = REF_SIZES.iter().position(|&s| s == switch_count)?;
        let col = match family {
            Family::Star => 0,
            Family::Mesh => 1,
            Family::Tree => 2,
        } + match system {
            RefSystem::Mininet => 0,
            RefSystem::Containerized => 3,
        };
        let table = match metric {
            RefMetric::CpuPercent => &REF_CPU,
            RefMetric::MemoryMb => &REF_MEMORY,
            RefMetric::FirstPingMs => &REF_LATENCY,
        };
        Some(table[row][col])
    }

    pub fn sizes(&self) -> &'static [usize] {
        &REF_SIZES
    }
}

/// `(sequence, rtt_ms)` for every echo reply in ping output (iputils or
/// busybox), in order of arrival.
pub fn parse_ping(output: &str) -> Vec<(u32, f64)> {
    output
        .lines()
        .filter_map(|line| {
            let field = |key: &str| {
                line.split_whitespace()
                    .find_map(|w| w.strip_prefix(key))
                    .map(|v| v.trim_end_matches(|c: char| !c.is_ascii_digit() && c != '.'))
            };
            let seq = field("icmp_seq=").or_else(|| field("seq="))?.parse().ok()?;
            let rtt: f64 = field("time=")?.parse().ok()?;
            Some((seq, rtt))
        })
        .collect()
}

/// Per-second receiver throughput from an iperf3 JSON report (the server's
/// report for UDP). Trailing fragments shorter than half a second are dropped.
pub fn parse_iperf3_intervals(json: &str) -> Result<Vec<(u32, f64)>, MetricsError> {
    let parse_err = |detail: String| MetricsError::Parse {
        what: "iperf3 report",
        detail,
    };
    let v: Value = serde_json::from_str(json).map_err(|e| parse_err(e.to_string()))?;
    if let Some(err) = v.get("error").and_then(Value::as_str) {
        return Err(parse_err(err.to_string()));
    }
    let intervals = v
        .get("intervals")
        .and_then(Value::as_array)
        .ok_or_else(|| parse_err("no intervals".into()))?;
    let mut out = Vec::new();
    for iv in intervals {
        let sum = &iv["sum"];
        let (Some(start), Some(end), Some(bps)) = (
            sum["start"].as_f64(),
            sum["end"].as_f64(),
            sum["bits_per_second"].as_f64(),
        ) else {
            return Err(parse_err(format!("malformed interval {sum}")));
        };
        if end - start < 0.5 {
            continue;
        }
        out.push((start.round() as u32, bps / 1e6));
    }
    Ok(out)
}

fn host_ip(emu: &Emulation, host: &str) -> Result<Ipv4Addr, MetricsError> {
    let spec = emu
        .topology()
        .node(host)
        .filter(|s| s.kind == NodeKind::Host)
        .ok_or_else(|| MetricsError::NoSuchHost(host.to_string()))?;
    spec.ip_config
        .map(|ip| ip.addr)
        .ok_or_else(|| MetricsError::Precondition(format!("host `{host}` has no data address")))
}

fn tool_error(node: &str, tool: &str, out: &crate::runtime::ExecOutput) -> MetricsError {
    let text = format!("{}{}", out.stdout, out.stderr);
    if out.exit_code == 127 || text.contains("not found") || text.contains("executable file") {
        MetricsError::ToolMissing {
            node: node.to_string(),
            tool: tool.to_string(),
        }
    } else {
        MetricsError::Tool {
            node: node.to_string(),
            tool: tool.to_string(),
            message: text.trim().chars().take(400).collect(),
        }
    }
}

/// Echo counts and RTTs of one ping run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PingSummary {
    pub src: String,
    pub dst: String,
    pub sent: usize,
    /// RTTs in order of arrival.
    pub rtts_ms: Vec<f64>,
}

impl PingSummary {
    pub fn loss_percent(&self) -> f64 {
        if self.sent == 0 {
            return 100.0;
        }
        100.0 * self.sent.saturating_sub(self.rtts_ms.len()) as f64 / self.sent as f64
    }
}

/// Sends `count` echoes from `src` to the data address of `dst`.
pub fn ping(
    emu: &Emulation,
    src: &str,
    dst: &str,
    count: usize,
) -> Result<PingSummary, MetricsError> {
    if src == dst {
        return Err(MetricsError::NoSuchPair(src.to_string()));
    }
    if count == 0 {
        return Err(MetricsError::Precondition("need at least 1 echo".into()));
    }
    host_ip(emu, src)?;
    let ip = host_ip(emu, dst)?;
    let cmd = argv(&[
        "ping",
        "-c",
        &count.to_string(),
        "-i",
        "0.2",
        "-W",
        "2",
        &ip.to_string(),
    ]);
    let timeout = Duration::from_secs(10 + 3 * count as u64);
    let out = emu.exec(src, &cmd, timeout)?;
    let rtts_ms: Vec<f64> = parse_ping(&out.stdout).into_iter().map(|r| r.1).collect();
    if rtts_ms.is_empty() && (out.exit_code == 127 || out.stderr.contains("not found")) {
        return Err(tool_error(src, "ping", &out));
    }
    Ok(PingSummary {
        src: src.to_string(),
        dst: dst.to_string(),
        sent: count,
        rtts_ms,
    })
}

/// Pings `dst` from `src` and separates the first RTT from the rest.
pub fn measure_first_ping(
    emu: &Emulation,
    src: &str,
    dst: &str,
    echo_count: usize,
) -> Result<LatencyRecord, MetricsError> {
    if echo_count < 2 {
        return Err(MetricsError::Precondition("need at least 2 echoes".into()));
    }
    let summary = ping(emu, src, dst, echo_count)?;
    let Some((first, rest)) = summary.rtts_ms.split_first() else {
        return Err(MetricsError::Unreachable {
            src: src.to_string(),
            dst: dst.to_string(),
        });
    };
    Ok(LatencyRecord {
        src: src.to_string(),
        dst: dst.to_string(),
        first_ping_ms: *first,
        subsequent_ms: rest.to_vec(),
    })
}

/// One UDP flow of a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowRequest {
    pub flow: String,
    pub role: FlowRole,
    pub src: String,
    pub dst: String,
    pub rate_mbps: f64,
}

const IPERF_BASE_PORT: u16 = 5201;

fn run_flow(
    emu: &Emulation,
    req: &FlowRequest,
    port: u16,
    duration_s: u32,
) -> Result<ThroughputSeries, MetricsError> {
    let dst_ip = host_ip(emu, &req.dst)?;
    host_ip(emu, &req.src)?;
    let timeout = Duration::from_secs(duration_s as u64 + 30);
    let port_s = port.to_string();
    let server_cmd = argv(&["iperf3", "-s", "-1", "-J", "-p", &port_s]);
    let rate = format!("{}M", req.rate_mbps);
    let client_cmd = argv(&[
        "iperf3",
        "-u",
        "-c",
        &dst_ip.to_string(),
        "-p",
        &port_s,
        "-b",
        &rate,
        "-t",
        &duration_s.to_string(),
        "-J",
    ]);
    thread::scope(|s| {
        let server = s.spawn(|| emu.exec(&req.dst, &server_cmd, timeout));
        // the server needs a moment to listen; retry the client on refusal
        let deadline = Instant::now() + Duration::from_secs(10);
        let client = loop {
            let out = emu.exec(&req.src, &client_cmd, timeout)?;
            let refused = out.stdout.contains("connect") && out.stdout.contains("refused");
            if out.success() || !refused || Instant::now() >= deadline || server.is_finished() {
                break out;
            }
            thread::sleep(Duration::from_millis(200));
        };
        let server_out = server.join().expect("server thread")?;
        if !client.success() {
            return Err(tool_error(&req.src, "iperf3", &client));
        }
        if !server_out.success() {
            return Err(tool_error(&req.dst, "iperf3", &server_out));
        }
        let samples = parse_iperf3_intervals(&server_out.stdout)?;
        Ok(ThroughputSeries {
            flow: req.flow.clone(),
            role: req.role,
            requested_mbps: req.rate_mbps,
            samples,
        })
    })
}

/// Constant-rate UDP flow; samples are receiver-side, one per second.
pub fn run_udp_flow(
    emu: &Emulation,
    src: &str,
    dst: &str,
    rate_mbps: f64,
    duration_s: u32,
) -> Result<ThroughputSeries, MetricsError> {
    let flows = [FlowRequest {
        flow: format!("{src}->{dst}"),
        role: FlowRole::Probe,
        src: src.into(),
        dst: dst.into(),
        rate_mbps,
    }];
    run_flows(emu, &flows, duration_s).pop().expect("one flow")
}

/// Runs all flows at once and waits for every one of them.
pub fn run_flows(
    emu: &Emulation,
    flows: &[FlowRequest],
    duration_s: u32,
) -> Vec<Result<ThroughputSeries, MetricsError>> {
    if duration_s == 0 {
        return flows
            .iter()
            .map(|_| {
                Err(MetricsError::Precondition(
                    "duration must be positive".into(),
                ))
            })
            .collect();
    }
    thread::scope(|s| {
        let handles: Vec<_> = flows
            .iter()
            .enumerate()
            .map(|(i, f)| {
                s.spawn(move || {
                    if f.rate_mbps.is_nan() || f.rate_mbps <= 0.0 {
                        return Err(MetricsError::Precondition(format!(
                            "flow `{}` needs a positive rate",
                            f.flow
                        )));
                    }
                    if f.src == f.dst {
                        return Err(MetricsError::NoSuchPair(f.src.clone()));
                    }
                    run_flow(emu, f, IPERF_BASE_PORT + i as u16, duration_s)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("flow thread"))
            .collect()
    })
}

/// Receiver ceiling between two hosts under a saturating UDP flow.
pub fn measure_switching_capacity(
    emu: &Emulation,
    src: &str,
    dst: &str,
    duration_s: u32,
) -> Result<f64, MetricsError> {
    let series = run_udp_flow(emu, src, dst, 100_000.0, duration_s)?;
    series
        .mean_mbps()
        .ok_or_else(|| MetricsError::Precondition("saturating flow produced no samples".into()))
}

/// Aggregate CPU percent and memory across running containers, averaged
/// over a window sampled at a fixed interval.
pub fn sample_steady_state(
    emu: &Emulation,
    window: Duration,
    interval: Duration,
    mode: Mode,
) -> Result<(f64, f64), MetricsError> {
    let ticks = (window.as_millis() / interval.as_millis().max(1)).max(1) as usize;
    let mut cpu = Vec::with_capacity(ticks);
    let mut mem = Vec::with_capacity(ticks);
    for _ in 0..ticks {
        let started = Instant::now();
        let samples = emu.sample_all(mode);
        let ok: Vec<_> = samples
            .iter()
            .filter_map(|(_, s)| s.as_ref().ok())
            .collect();
        if ok.len() < samples.len() {
            log::warn!(
                "{} of {} containers failed to report stats",
                samples.len() - ok.len(),
                samples.len()
            );
        }
        if !ok.is_empty() {
            cpu.push(par::kahan_sum(ok.iter().map(|s| s.cpu_percent)));
            mem.push(par::kahan_sum(ok.iter().map(|s| s.memory_bytes as f64)) / MIB);
        }
        if let Some(rest) = interval.checked_sub(started.elapsed()) {
            thread::sleep(rest);
        }
    }
    match (mean(&cpu), mean(&mem)) {
        (Some(c), Some(m)) => Ok((c, m)),
        _ => Err(MetricsError::Precondition(
            "no container reported stats".into(),
        )),
    }
}

/// Adds a controller unless present and marks the topology runnable.
pub fn with_controller(mut topology: Topology) -> Topology {
    if topology.count_kind(NodeKind::Controller) == 0 {
        topology
            .add_node(NodeSpec::controller(CONTROLLER_NAME))
            .expect("controller name is free in generated topologies");
    }
    topology.runnable = true;
    topology
}

/// Brings a topology up and attaches every switch to its first controller.
pub fn start_controlled(
    emulator: &Emulator,
    topology: Topology,
) -> Result<Emulation, MetricsError> {
    let mut emu = emulator.up(with_controller(topology))?;
    let ctl = emu
        .first_controller()
        .expect("controller added")
        .to_string();
    emu.attach_switches(&ctl)?;
    Ok(emu)
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub family: Family,
    pub sizes: Vec<usize>,
    pub reps: usize,
    pub window: Duration,
    pub interval: Duration,
    pub ping_echoes: usize,
    pub flow_rate_mbps: f64,
    pub flow_duration_s: u32,
    pub allow_large_mesh: bool,
    pub mode: Mode,
}

impl SweepConfig {
    pub fn new(family: Family, sizes: Vec<usize>, reps: usize) -> Self {
        Self {
            family,
            sizes,
            reps,
            window: Duration::from_secs(30),
            interval: Duration::from_secs(1),
            ping_echoes: 11,
            flow_rate_mbps: 100.0,
            flow_duration_s: 10,
            allow_large_mesh: false,
            mode: Mode::best_available(),
        }
    }
}

fn one_repetition(
    emulator: &Emulator,
    cfg: &SweepConfig,
    size: usize,
    rep: usize,
    notes: &mut Vec<String>,
) -> RunSample {
    let mut run = RunSample {
        rep,
        ..RunSample::default()
    };
    let mut note = |what: &str, e: &dyn fmt::Display| notes.push(format!("rep {rep} {what}: {e}"));

    // resources: switches and links only
    match generate(cfg.family, size, Probes::None) {
        Ok(t) => match emulator.up(t) {
            Ok(mut emu) => {
                match sample_steady_state(&emu, cfg.window, cfg.interval, cfg.mode) {
                    Ok((c, m)) => {
                        run.cpu_percent = Some(c);
                        run.memory_mb = Some(m);
                    }
                    Err(e) => note("resources", &e),
                }
                if let Err(e) = emu.down() {
                    note("teardown", &e);
                }
            }
            Err(e) => note("bring-up", &e),
        },
        Err(e) => note("generate", &e),
    }

    // latency and throughput: probe hosts plus a controller
    let probed = generate(cfg.family, size, Probes::Attach)
        .map_err(|e| MetricsError::Precondition(e.to_string()));
    match probed.and_then(|t| start_controlled(emulator, t)) {
        Ok(mut emu) => {
            match measure_first_ping(&emu, "h1", "h2", cfg.ping_echoes) {
                Ok(l) => run.first_ping_ms = Some(l.first_ping_ms),
                Err(e) => note("latency", &e),
            }
            match run_udp_flow(&emu, "h1", "h2", cfg.flow_rate_mbps, cfg.flow_duration_s) {
                Ok(s) => run.throughput_mbps = s.mean_mbps(),
                Err(e) => note("throughput", &e),
            }
            if let Err(e) = emu.down() {
                note("teardown", &e);
            }
        }
        Err(e) => note("probe bring-up", &e),
    }
    run
}

/// For each size: `reps` repetitions, each measuring resources on a bare
/// switch fabric and then latency/throughput with probe hosts attached.
/// Failures are recorded in the result and the sweep moves on.
pub fn run_scalability_sweep(
    emulator: &Emulator,
    cfg: &SweepConfig,
) -> Result<Vec<SweepResult>, MetricsError> {
    if cfg.reps == 0 {
        return Err(MetricsError::Precondition("reps must be at least 1".into()));
    }
    if cfg.sizes.is_empty() {
        return Err(MetricsError::Precondition("no sizes given".into()));
    }
    let mut results = Vec::new();
    for &size in &cfg.sizes {
        if size < 2 {
            return Err(MetricsError::Precondition(format!(
                "size {size} is below 2"
            )));
        }
        if cfg.family == Family::Mesh && size > MESH_CAP && !cfg.allow_large_mesh {
            let mut r = SweepResult::from_runs(cfg.family, size, cfg.reps, Vec::new());
            r.notes.push(format!(
                "skipped: mesh above {MESH_CAP} switches needs the large-mesh override"
            ));
            results.push(r);
            continue;
        }
        let mut notes = Vec::new();
        let runs: Vec<RunSample> = (1..=cfg.reps)
            .map(|rep| {
                log::info!("{} S={size} rep {rep}/{}", cfg.family, cfg.reps);
                one_repetition(emulator, cfg, size, rep, &mut notes)
            })
            .collect();
        let mut r = SweepResult::from_runs(cfg.family, size, cfg.reps, runs);
        r.notes = notes;
        results.push(r);
    }
    Ok(results)
}

#[derive(Debug, Clone)]
pub struct FidelityConfig {
    pub fg_rate_mbps: f64,
    pub bg_rate_mbps: f64,
    pub duration_s: u32,
    pub scale: f64,
    /// Also run a saturating flow to report the local switching ceiling.
    pub measure_capacity: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub foreground: ThroughputSeries,
    pub background: Vec<ThroughputSeries>,
    pub requested_total_mbps: f64,
    pub capacity_mbps: Option<f64>,
    pub reference_capacity_mbps: f64,
}

/// The foreground and background flows, scaled.
pub fn fidelity_flows(cfg: &FidelityConfig) -> Vec<FlowRequest> {
    let mut flows = vec![FlowRequest {
        flow: "h1->h16".into(),
        role: FlowRole::Foreground,
        src: "h1".into(),
        dst: "h16".into(),
        rate_mbps: cfg.fg_rate_mbps * cfg.scale,
    }];
    for (c, s) in FIDELITY_BACKGROUND_PAIRS {
        flows.push(FlowRequest {
            flow: format!("h{c}->h{s}"),
            role: FlowRole::Background,
            src: format!("h{c}"),
            dst: format!("h{s}"),
            rate_mbps: cfg.bg_rate_mbps * cfg.scale,
        });
    }
    flows
}

/// One foreground flow across the core under seven concurrent background
/// flows, on the five-switch, sixteen-host tree.
pub fn run_fidelity_scenario(
    emulator: &Emulator,
    cfg: &FidelityConfig,
) -> Result<FidelityReport, MetricsError> {
    if !(cfg.scale > 0.0 && cfg.scale <= 1.0) {
        return Err(MetricsError::Precondition(format!(
            "scale {} is outside (0, 1]",
            cfg.scale
        )));
    }
    if !(cfg.fg_rate_mbps > 0.0 && cfg.bg_rate_mbps > 0.0) {
        return Err(MetricsError::Precondition("rates must be positive".into()));
    }
    let flows = fidelity_flows(cfg);
    let mut emu = start_controlled(emulator, fidelity_tree())?;
    let outcome = (|| -> Result<FidelityReport, MetricsError> {
        // one warm-up echo per pair so reactive path setup is not measured
        for f in &flows {
            let _ = measure_first_ping(&emu, &f.src, &f.dst, 2);
        }
        let mut results = run_flows(&emu, &flows, cfg.duration_s).into_iter();
        let foreground = results.next().expect("foreground flow")?;
        let background = results.collect::<Result<Vec<_>, _>>()?;
        let capacity_mbps = if cfg.measure_capacity {
            Some(measure_switching_capacity(
                &emu,
                "h1",
                "h16",
                cfg.duration_s.min(10),
            )?)
        } else {
            None
        };
        Ok(FidelityReport {
            requested_total_mbps: flows.iter().map(|f| f.rate_mbps).sum(),
            foreground,
            background,
            capacity_mbps,
            reference_capacity_mbps: REFERENCE_SWITCHING_CAPACITY_MBPS,
        })
    })();
    let down = emu.down();
    let report = outcome?;
    down?;
    Ok(report)
}

fn fmt2(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_default()
}

/// Writes per-run rows plus a mean row per configuration, and a companion
/// `.comparison.md` with local means beside both reference systems.
pub fn emit_report(
    results: &[SweepResult],
    reference: &ReferenceTable,
    out: &Path,
) -> Result<PathBuf, MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::Precondition("no results to report".into()));
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(SWEEP_HEADER)?;
    for r in results {
        let refs = |m| fmt2(reference.get(RefSystem::Containerized, r.family, r.switch_count, m));
        let (ref_cpu, ref_mem, ref_ping) = (
            refs(RefMetric::CpuPercent),
            refs(RefMetric::MemoryMb),
            refs(RefMetric::FirstPingMs),
        );
        let family = r.family.to_string();
        let size = r.switch_count.to_string();
        for run in &r.runs {
            w.write_record([
                family.as_str(),
                &size,
                &run.rep.to_string(),
                &fmt2(run.cpu_percent),
                &fmt2(run.memory_mb),
                &fmt2(run.first_ping_ms),
                &fmt2(run.throughput_mbps),
                &ref_cpu,
                &ref_mem,
                &ref_ping,
            ])?;
        }
        w.write_record([
            family.as_str(),
            &size,
            "mean",
            &fmt2(r.cpu_percent_mean),
            &fmt2(r.memory_mb_mean),
            &fmt2(r.latency_ms_mean),
            &fmt2(r.throughput_mbps_mean),
            &ref_cpu,
            &ref_mem,
            &ref_ping,
        ])?;
    }
    w.flush()?;
    fs::write(
        comparison_path(out),
        comparison_markdown(results, reference),
    )?;
    Ok(out.to_path_buf())
}

pub fn comparison_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("comparison.md")
}

fn comparison_markdown(results: &[SweepResult], reference: &ReferenceTable) -> String {
    let mut s = String::from(
        "| family | switches | metric | local mean | containerized ref | mininet ref | runs | incomplete |\n\
         |---|---|---|---|---|---|---|---|\n",
    );
    for r in results {
        for (metric, local) in [
            (RefMetric::CpuPercent, r.cpu_percent_mean),
            (RefMetric::MemoryMb, r.memory_mb_mean),
            (RefMetric::FirstPingMs, r.latency_ms_mean),
        ] {
            let get = |sys| fmt2(reference.get(sys, r.family, r.switch_count, metric));
            s.push_str(&format!(
                "| {} | {} | {metric} | {} | {} | {} | {} | {} |\n",
                r.family,
                r.switch_count,
                fmt2(local),
                get(RefSystem::Containerized),
                get(RefSystem::Mininet),
                r.runs.len(),
                r.incomplete
            ));
        }
    }
    for r in results.iter().filter(|r| !r.notes.is_empty()) {
        s.push_str(&format!("\n{} S={}:\n", r.family, r.switch_count));
        for n in &r.notes {
            s.push_str(&format!("- {n}\n"));
        }
    }
    s
}

/// Fidelity CSV: one row per flow per second.
pub fn emit_fidelity_csv(report: &FidelityReport, out: &Path) -> Result<PathBuf, MetricsError> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(FIDELITY_HEADER)?;
    for series in std::iter::once(&report.foreground).chain(&report.background) {
        for (second, mbps) in &series.samples {
            w.write_record([
                series.flow.as_str(),
                series.role.as_str(),
                &format!("{:.2}", series.requested_mbps),
                &second.to_string(),
                &format!("{mbps:.2}"),
            ])?;
        }
    }
    w.flush()?;
    Ok(out.to_path_buf())
}
