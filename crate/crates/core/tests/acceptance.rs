// SPDX-License-Identifier: Apache-2.0

//! Acceptance suite. Each test prints one `PASS`/`FAIL` line to stderr
//! (outside the test harness capture) and fails on `FAIL`.
//!
//! Tests 2 to 6 drive a real container engine, the kernel and Open vSwitch
//! images, so they are ignored by default. Run them on a prepared host with
//! `sudo -E cargo test -p vemul-core --test acceptance -- --ignored`.

use std::collections::HashSet;
use std::io::Write;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use vemul::fabric::{IpCommandBackend, NetBackend, Netns};
use vemul::metrics::{
    self, mean, FidelityConfig, RefMetric, RefSystem, ReferenceTable, RunSample, SweepConfig,
    SweepResult,
};
use vemul::orchestrator::{new_run_id, Emulator};
use vemul::runtime::argv;
use vemul::shell;
use vemul::topology::{
    fidelity_tree, generate, single_switch, Family, IpConfig, LinkSpec, NodeKind, NodeSpec, Probes,
    Topology, REFERENCE_SWEEP_SIZES,
};

fn verdict(n: u32, what: &str, started: Instant, result: Result<String, String>) {
    let secs = started.elapsed().as_secs_f64();
    let line = match &result {
        Ok(detail) => format!("PASS criterion {n}: {what} ({detail}; {secs:.2}s)\n"),
        Err(why) => format!("FAIL criterion {n}: {what} ({why}; {secs:.2}s)\n"),
    };
    let _ = std::io::stderr().write_all(line.as_bytes());
    if let Err(why) = result {
        panic!("criterion {n}: {why}");
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

#[test]
fn c1_generator_arithmetic() {
    let t0 = Instant::now();
    let r = (|| {
        for s in REFERENCE_SWEEP_SIZES {
            for family in Family::ALL {
                let t = generate(family, s, Probes::None).map_err(|e| e.to_string())?;
                let want_links = match family {
                    Family::Mesh => s * (s - 1) / 2,
                    Family::Star | Family::Tree => s - 1,
                };
                check(t.count_kind(NodeKind::WhiteboxSwitch) == s, || {
                    format!("{family} S={s}: switch count")
                })?;
                check(t.inter_switch_links() == want_links, || {
                    format!(
                        "{family} S={s}: {} links, want {want_links}",
                        t.inter_switch_links()
                    )
                })?;
                check(t.is_valid(), || {
                    format!("{family} S={s}: {:?}", t.validate())
                })?;
            }
        }
        let f = fidelity_tree();
        check(f.count_kind(NodeKind::WhiteboxSwitch) == 5, || {
            "fidelity switches".into()
        })?;
        check(f.count_kind(NodeKind::Host) == 16, || {
            "fidelity hosts".into()
        })?;
        check(f.link_count() == 20, || {
            format!("fidelity links {}", f.link_count())
        })?;
        check(f.is_valid(), || format!("{:?}", f.validate()))?;
        Ok(format!(
            "{} sizes x 3 families + fidelity tree",
            REFERENCE_SWEEP_SIZES.len()
        ))
    })();
    verdict(1, "generator arithmetic", t0, r);
}

fn local() -> Emulator {
    Emulator::local().expect("container engine reachable")
}

#[test]
#[ignore = "requires a local container engine, root, the ip tool and the node images"]
fn c2_single_switch_smoke() {
    let t0 = Instant::now();
    let emulator = local();
    let r = (|| {
        let mut emu = emulator.up(single_switch()).map_err(|e| e.to_string())?;
        let before = emu.root_before().to_vec();
        let run = emu.run_id().to_string();
        let target = emu.attach_switches("ctl1").map_err(|e| e.to_string())?;
        check(
            target.to_string().starts_with("tcp:") && target.to_string().ends_with(":6653"),
            || format!("target {target}"),
        )?;
        let ping = metrics::ping(&emu, "h1", "h2", 10).map_err(|e| e.to_string())?;
        check(ping.rtts_ms.len() == 10, || {
            format!("{}/10 echoes", ping.rtts_ms.len())
        })?;
        emu.down().map_err(|e| e.to_string())?;
        let left = emulator
            .engine
            .list_managed(Some(&run))
            .map_err(|e| e.to_string())?;
        check(left.is_empty(), || {
            format!("{} containers left", left.len())
        })?;
        let after = emu.fabric().root_snapshot().map_err(|e| e.to_string())?;
        check(after == before, || {
            format!("root interfaces changed: {before:?} -> {after:?}")
        })?;
        Ok(format!("10/10 echoes via {target}"))
    })();
    verdict(2, "single-switch smoke", t0, r);
}

#[test]
#[ignore = "requires a local container engine, root, the ip tool and the node images"]
fn c3_rollback_completeness() {
    let t0 = Instant::now();
    let emulator = local();
    let r = (|| {
        let mut t = Topology::runnable();
        let ip = |s: &str| s.parse::<IpConfig>().unwrap();
        t.add_node(NodeSpec::whitebox("sw1")).unwrap();
        t.add_node(NodeSpec::host("h1", ip("10.0.0.1/24"))).unwrap();
        t.add_node(NodeSpec::host("h2", ip("10.0.0.2/24")).with_image("vemul/absent-image:none"))
            .unwrap();
        t.add_node(NodeSpec::host("h3", ip("10.0.0.3/24"))).unwrap();
        t.add_node(NodeSpec::host("h4", ip("10.0.0.4/24"))).unwrap();
        for (i, h) in ["h1", "h2", "h3", "h4"].iter().enumerate() {
            t.add_link(LinkSpec::veth(format!("l{}", i + 1), "sw1", *h))
                .unwrap();
        }
        let root = IpCommandBackend::default();
        let before: HashSet<String> = root
            .list_links(Netns::Root)
            .map_err(|e| e.to_string())?
            .into_iter()
            .collect();
        let run = new_run_id();
        let err = match emulator.up_as(t, &run) {
            Ok(_) => return Err("bring-up succeeded with a missing image".into()),
            Err(e) => e,
        };
        let left = emulator
            .engine
            .list_managed(Some(&run))
            .map_err(|e| e.to_string())?;
        check(left.is_empty(), || {
            format!("{} containers left", left.len())
        })?;
        let after: HashSet<String> = root
            .list_links(Netns::Root)
            .map_err(|e| e.to_string())?
            .into_iter()
            .collect();
        let extra: Vec<_> = after.difference(&before).collect();
        check(extra.is_empty(), || {
            format!("leftover interfaces {extra:?}")
        })?;
        Ok(format!("rolled back after: {err}"))
    })();
    verdict(3, "rollback completeness", t0, r);
}

#[test]
#[ignore = "requires a local container engine, root, the ip tool and the node images"]
fn c4_first_ping_effect() {
    let t0 = Instant::now();
    let emulator = local();
    let idle = std::env::var("VEMUL_FLOW_IDLE_S")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(12);
    let r = (|| {
        let mut t = Topology::runnable();
        for s in ["s1", "s2", "s3"] {
            t.add_node(NodeSpec::whitebox(s)).unwrap();
        }
        t.add_node(NodeSpec::host("h1", "10.0.0.1/24".parse().unwrap()))
            .unwrap();
        t.add_node(NodeSpec::host("h2", "10.0.0.2/24".parse().unwrap()))
            .unwrap();
        t.add_node(NodeSpec::controller("c0")).unwrap();
        for (n, a, b) in [
            ("l1", "s1", "s2"),
            ("l2", "s2", "s3"),
            ("l3", "s1", "h1"),
            ("l4", "s3", "h2"),
        ] {
            t.add_link(LinkSpec::veth(n, a, b)).unwrap();
        }
        let mut emu = metrics::start_controlled(&emulator, t).map_err(|e| e.to_string())?;
        let mut hits = 0;
        for trial in 0..20 {
            if trial > 0 {
                // let reactive flows expire and forget neighbours
                std::thread::sleep(Duration::from_secs(idle));
            }
            for h in ["h1", "h2"] {
                let _ = emu.exec(
                    h,
                    &argv(&["ip", "neigh", "flush", "all"]),
                    Duration::from_secs(10),
                );
            }
            let rec =
                metrics::measure_first_ping(&emu, "h1", "h2", 11).map_err(|e| e.to_string())?;
            if rec.shows_setup_penalty() {
                hits += 1;
            }
        }
        emu.down().map_err(|e| e.to_string())?;
        check(hits >= 18, || format!("{hits}/20 trials"))?;
        Ok(format!("{hits}/20 trials"))
    })();
    verdict(4, "first-ping effect", t0, r);
}

#[test]
#[ignore = "requires a local container engine, root, the ip tool and the node images"]
fn c5_fidelity_desk_scale() {
    let t0 = Instant::now();
    let emulator = local();
    let cfg = FidelityConfig {
        fg_rate_mbps: 1000.0,
        bg_rate_mbps: 400.0,
        duration_s: 60,
        scale: 0.1,
        measure_capacity: false,
    };
    let r = metrics::run_fidelity_scenario(&emulator, &cfg)
        .map_err(|e| e.to_string())
        .and_then(|rep| {
            let f = rep.foreground.fraction_within(0.10);
            check(f >= 0.9, || {
                format!("{:.0}% of seconds within 10%", 100.0 * f)
            })?;
            Ok(format!(
                "{:.0}% of seconds within 10% of 100 Mbps",
                100.0 * f
            ))
        });
    verdict(5, "fidelity at desk scale", t0, r);
}

#[test]
#[ignore = "requires a local container engine, root, the ip tool and the node images"]
fn c6_sweep_mechanics() {
    let t0 = Instant::now();
    let emulator = local();
    let mut cfg = SweepConfig::new(Family::Star, vec![9, 17, 33], 3);
    cfg.window = Duration::from_secs(10);
    let r = (|| {
        let results = metrics::run_scalability_sweep(&emulator, &cfg).map_err(|e| e.to_string())?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let path = metrics::emit_report(&results, &ReferenceTable, &dir.path().join("sweep.csv"))
            .map_err(|e| e.to_string())?;
        let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
        check(
            text.lines().next() == Some(metrics::SWEEP_HEADER.join(",").as_str()),
            || "header".into(),
        )?;
        let mem: Vec<f64> = results
            .iter()
            .map(|r| {
                r.memory_mb_mean
                    .ok_or(format!("S={} has no memory mean", r.switch_count))
            })
            .collect::<Result<_, _>>()?;
        for w in mem.windows(2) {
            check(w[1] >= w[0] * 0.95, || {
                format!("memory means not nondecreasing: {mem:?}")
            })?;
        }
        Ok(format!("memory means {mem:.1?} MB"))
    })();
    verdict(6, "scalability sweep mechanics", t0, r);
}

#[test]
fn c7_reference_transcription() {
    let t0 = Instant::now();
    let t = ReferenceTable;
    let cells = [
        (
            RefSystem::Mininet,
            Family::Star,
            9,
            RefMetric::CpuPercent,
            1.06,
        ),
        (
            RefSystem::Containerized,
            Family::Mesh,
            513,
            RefMetric::MemoryMb,
            7276.7,
        ),
        (
            RefSystem::Containerized,
            Family::Tree,
            513,
            RefMetric::FirstPingMs,
            609.9,
        ),
    ];
    let r = cells
        .iter()
        .try_for_each(|&(sys, fam, s, m, want)| {
            let got = t.get(sys, fam, s, m);
            check(got == Some(want), || {
                format!("{sys:?} {fam} {s} {m}: {got:?} != {want}")
            })
        })
        .map(|()| "3 cells".to_string());
    verdict(7, "reference transcription", t0, r);
}

#[test]
fn c8_averaging_oracle() {
    let t0 = Instant::now();
    let mut rng = StdRng::seed_from_u64(15);
    let values: Vec<f64> = (0..15).map(|_| rng.random_range(0.1..10_000.0)).collect();
    let mut brute = 0.0;
    for v in &values {
        brute += v;
    }
    brute /= values.len() as f64;
    let runs: Vec<RunSample> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| RunSample {
            rep: i + 1,
            cpu_percent: Some(v),
            memory_mb: Some(v),
            first_ping_ms: Some(v),
            throughput_mbps: Some(v),
        })
        .collect();
    let swept = SweepResult::from_runs(Family::Star, 9, 15, runs);
    let rel = |x: f64| ((x - brute) / brute).abs();
    let r = (|| {
        let m = mean(&values).ok_or("empty")?;
        check(rel(m) <= 1e-9, || format!("mean {m} vs {brute}"))?;
        for got in [
            swept.cpu_percent_mean,
            swept.memory_mb_mean,
            swept.latency_ms_mean,
            swept.throughput_mbps_mean,
        ] {
            let got = got.ok_or("missing mean")?;
            check(rel(got) <= 1e-9, || format!("sweep mean {got} vs {brute}"))?;
        }
        check(swept.incomplete == 0, || "incomplete runs".into())?;
        Ok(format!("relative error {:.1e}", rel(m)))
    })();
    verdict(8, "averaging oracle", t0, r);
}

const WORDS: [&str; 28] = [
    "create",
    "list",
    "update",
    "delete",
    "exec",
    "attach",
    "link-up",
    "link-down",
    "pause",
    "resume",
    "node",
    "link",
    "nodes",
    "links",
    "interfaces",
    "h1",
    "h2",
    "sw1",
    "ctl1",
    "l1",
    "l2",
    "kind=host",
    "kind=switch",
    "state=down",
    "a=sw1",
    "b=h1",
    "'",
    "\"",
];

fn fuzz_line(rng: &mut StdRng) -> Vec<u8> {
    match rng.random_range(0..4) {
        0 => (0..rng.random_range(0..80))
            .map(|_| rng.random::<u8>())
            .filter(|b| *b != b'\n')
            .collect(),
        1 => Vec::new(),
        _ => {
            let n = rng.random_range(1..7);
            let mut words: Vec<String> = (0..n)
                .map(|_| WORDS[rng.random_range(0..WORDS.len())].to_string())
                .collect();
            if rng.random_bool(0.2) {
                words.push(format!("x{}=y", rng.random::<u16>()));
            }
            if rng.random_bool(0.1) {
                words.insert(0, "quit".into());
            }
            words.join(" ").into_bytes()
        }
    }
}

#[test]
fn c9_repl_totality() {
    let t0 = Instant::now();
    let mut rng = StdRng::seed_from_u64(9);
    let lines: Vec<Vec<u8>> = (0..1000).map(|_| fuzz_line(&mut rng)).collect();
    let (emulator, _fakes) = Emulator::fake();
    let r = (|| {
        let mut emu = emulator.up(single_switch()).map_err(|e| e.to_string())?;
        let mut replies = 0;
        let mut next = 0;
        while next < lines.len() {
            let mut input = Vec::new();
            for l in &lines[next..] {
                input.extend_from_slice(l);
                input.push(b'\n');
            }
            let mut out = Vec::new();
            shell::repl(&mut emu, &input[..], &mut out).map_err(|e| e.to_string())?;
            let text = String::from_utf8_lossy(&out);
            let status: Vec<&str> = text.lines().filter(|l| !l.starts_with("  ")).collect();
            if let Some(bad) = status
                .iter()
                .find(|l| !(l.starts_with("ok") || l.starts_with("err")))
            {
                return Err(format!("status line `{bad}`"));
            }
            if status.is_empty() {
                return Err("no reply".into());
            }
            replies += status.len();
            next += status.len();
            // a `quit` ends the loop early; start again on the rest
        }
        check(replies == lines.len(), || {
            format!("{replies} replies for {} lines", lines.len())
        })?;
        emu.down().map_err(|e| e.to_string())?;
        Ok(format!("{replies} replies for {} lines", lines.len()))
    })();
    verdict(9, "REPL totality", t0, r);
}
