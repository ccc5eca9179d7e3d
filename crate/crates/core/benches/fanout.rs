// SPDX-License-Identifier: Apache-2.0

//! Sequential versus parallel fan-out. Engine calls are simulated with fixed
//! latencies, so the parallel gain shows even on one core.

use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use vemul::orchestrator::{Emulator, EmulatorConfig};
use vemul::par::{self, Mode};
use vemul::runtime::FakeEngine;
use vemul::topology::{generate, Family, Probes};

const MODES: [(&str, Mode); 2] = [
    ("sequential", Mode::Sequential),
    ("parallel", Mode::Parallel),
];

fn emulator(mode: Mode, create: Duration, sample: Duration) -> Emulator {
    let (base, _fakes) = Emulator::fake();
    let engine = std::sync::Arc::new(FakeEngine::new().with_delays(create, sample));
    Emulator::new(engine, base.net, base.switches, base.probe).with_config(EmulatorConfig {
        mode,
        ..EmulatorConfig::default()
    })
}

fn bring_up(c: &mut Criterion) {
    let mut g = c.benchmark_group("up_down_star");
    g.sample_size(10);
    for size in [9usize, 33] {
        let topology = generate(Family::Star, size, Probes::None).unwrap();
        for (name, mode) in MODES {
            let emu = emulator(mode, Duration::from_millis(2), Duration::ZERO);
            g.bench_with_input(BenchmarkId::new(name, size), &topology, |b, t| {
                b.iter(|| emu.up(t.clone()).unwrap().down().unwrap())
            });
        }
    }
    g.finish();
}

fn sample_stats(c: &mut Criterion) {
    let mut g = c.benchmark_group("sample_all_star33");
    g.sample_size(10);
    let topology = generate(Family::Star, 33, Probes::None).unwrap();
    for (name, mode) in MODES {
        let emulator = emulator(mode, Duration::ZERO, Duration::from_millis(1));
        let emu = emulator.up(topology.clone()).unwrap();
        g.bench_function(name, |b| b.iter(|| emu.sample_all(mode)));
    }
    g.finish();
}

fn reduce(c: &mut Criterion) {
    let mut g = c.benchmark_group("sum_1m");
    let values: Vec<f64> = (0..1_000_000).map(|i| (i as f64).sqrt()).collect();
    for (name, mode) in MODES {
        g.bench_function(name, |b| b.iter(|| par::sum(mode, &values, |v| v.ln_1p())));
    }
    g.finish();
}

fn generate_mesh(c: &mut Criterion) {
    c.bench_function("generate_validate_mesh129", |b| {
        b.iter(|| {
            generate(Family::Mesh, 129, Probes::Attach)
                .unwrap()
                .is_valid()
        })
    });
}

criterion_group!(benches, bring_up, sample_stats, reduce, generate_mesh);
criterion_main!(benches);
