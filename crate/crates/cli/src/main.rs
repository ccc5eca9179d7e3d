// SPDX-License-Identifier: Apache-2.0

use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use vemul::metrics::{self, FidelityConfig, ReferenceTable, SweepConfig};
use vemul::orchestrator::{Emulation, Emulator, OrchestratorError};
use vemul::par::Mode;
use vemul::shell::{self, ExperimentError};
use vemul::topology::{Family, FileError, ImageSet, Topology, TopologyFile};

/// Container-based SDN network emulator.
#[derive(Debug, Parser)]
#[command(name = "vemul", version, about)]
struct Cli {
    /// Use in-memory backends; nothing on the host is touched.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Run fan-out sequentially instead of on the thread pool.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Build a topology, attach switches to its controller, then read
    /// commands from stdin until `quit` or end of input.
    Up {
        topology: PathBuf,
        /// Skip attaching switches to the first controller.
        #[arg(long)]
        no_attach: bool,
    },
    /// Run an experiment file and write its JSON report.
    Run {
        experiment: PathBuf,
        /// Report path (default: <experiment>.report.json).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Interactive shell, optionally on a topology file.
    Repl { topology: Option<PathBuf> },
    /// Scalability sweep over switch counts of one family.
    Sweep {
        family: Family,
        #[arg(long, value_delimiter = ',', default_value = "9,17,33")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 15)]
        reps: usize,
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
        /// Allow meshes above 65 switches.
        #[arg(long)]
        allow_large_mesh: bool,
        /// Steady-state sampling window, seconds.
        #[arg(long, default_value_t = 30)]
        window_s: u64,
        /// Sampling interval, milliseconds.
        #[arg(long, default_value_t = 1000)]
        interval_ms: u64,
        /// Duration of the throughput probe, seconds.
        #[arg(long, default_value_t = 10)]
        flow_s: u32,
        /// Rate of the throughput probe, Mbps.
        #[arg(long, default_value_t = 100.0)]
        flow_mbps: f64,
    },
    /// Foreground flow under background load on the 16-host tree.
    Fidelity {
        #[arg(long, default_value_t = 1000.0)]
        fg: f64,
        #[arg(long, default_value_t = 400.0)]
        bg: f64,
        #[arg(long, default_value_t = 0.1)]
        scale: f64,
        #[arg(long, default_value_t = 60)]
        duration: u32,
        #[arg(long, default_value = "fidelity.csv")]
        out: PathBuf,
        /// Also measure the switching ceiling with a saturating flow.
        #[arg(long)]
        capacity: bool,
    },
    /// Remove containers and bridges left by earlier runs.
    Clean {
        /// Only this run id.
        #[arg(long)]
        run: Option<String>,
    },
}

/// Exit code 2 for malformed input, 3 for runtime failures.
enum Failure {
    Schema(String),
    Runtime(String),
}

impl From<FileError> for Failure {
    fn from(e: FileError) -> Self {
        match e {
            FileError::Io { .. } => Failure::Runtime(e.to_string()),
            _ => Failure::Schema(e.to_string()),
        }
    }
}

impl From<OrchestratorError> for Failure {
    fn from(e: OrchestratorError) -> Self {
        match e {
            OrchestratorError::Invalid(_) | OrchestratorError::Topology(_) => {
                Failure::Schema(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        if e.is_schema() {
            Failure::Schema(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<metrics::MetricsError> for Failure {
    fn from(e: metrics::MetricsError) -> Self {
        match e {
            metrics::MetricsError::Precondition(_) => Failure::Schema(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn emulator(cli: &Cli) -> Result<Emulator, Failure> {
    let base = if cli.dry_run {
        Emulator::fake().0
    } else {
        Emulator::local()?
    };
    let mut config = base.config.clone();
    if cli.sequential {
        config.mode = Mode::Sequential;
    }
    Ok(base.with_config(config))
}

fn load_topology(path: &Path) -> Result<Topology, Failure> {
    Ok(TopologyFile::load(path)?.to_topology(&ImageSet::from_env())?)
}

fn interactive(mut emu: Emulation) -> Result<(), Failure> {
    let stdin = io::stdin();
    let stdout = io::stdout();
    let result = shell::repl(&mut emu, stdin.lock(), stdout.lock());
    let down = emu.down();
    result?;
    down?;
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Cmd::Up {
            topology,
            no_attach,
        } => {
            let t = load_topology(topology)?;
            let mut emu = emulator(cli)?.up(t)?;
            eprintln!("run {} up", emu.run_id());
            if !no_attach {
                if let Some(ctl) = emu.first_controller().map(String::from) {
                    let target = emu.attach_switches(&ctl)?;
                    eprintln!("switches attached to {target}");
                }
            }
            interactive(emu)
        }
        Cmd::Repl { topology } => {
            let t = match topology {
                Some(p) => load_topology(p)?,
                None => Topology::new(),
            };
            let emu = emulator(cli)?.up(t)?;
            eprintln!("run {} up", emu.run_id());
            interactive(emu)
        }
        Cmd::Run { experiment, report } => {
            let (path, r) =
                shell::run_experiment_file(&emulator(cli)?, experiment, report.as_deref())?;
            println!("{}", path.display());
            match r.failed_runs() {
                0 => Ok(()),
                n => Err(Failure::Runtime(format!(
                    "{n} of {} repetitions failed",
                    r.runs.len()
                ))),
            }
        }
        Cmd::Sweep {
            family,
            sizes,
            reps,
            out,
            allow_large_mesh,
            window_s,
            interval_ms,
            flow_s,
            flow_mbps,
        } => {
            if *family == Family::Mesh
                && !allow_large_mesh
                && sizes.iter().any(|&s| s > metrics::MESH_CAP)
            {
                return Err(Failure::Schema(format!(
                    "mesh sizes above {} need --allow-large-mesh",
                    metrics::MESH_CAP
                )));
            }
            let emulator = emulator(cli)?;
            let mut cfg = SweepConfig::new(*family, sizes.clone(), *reps);
            cfg.allow_large_mesh = *allow_large_mesh;
            cfg.window = Duration::from_secs(*window_s);
            cfg.interval = Duration::from_millis((*interval_ms).max(1));
            cfg.flow_duration_s = *flow_s;
            cfg.flow_rate_mbps = *flow_mbps;
            cfg.mode = emulator.config.mode;
            let results = metrics::run_scalability_sweep(&emulator, &cfg)?;
            let path = metrics::emit_report(&results, &ReferenceTable, out)?;
            println!("{}", path.display());
            println!("{}", metrics::comparison_path(&path).display());
            for r in &results {
                if r.incomplete > 0 {
                    eprintln!(
                        "{} S={}: {} of {} repetitions incomplete",
                        r.family, r.switch_count, r.incomplete, r.repetitions
                    );
                    for n in &r.notes {
                        eprintln!("  {n}");
                    }
                }
            }
            if results.iter().all(|r| {
                r.runs
                    .iter()
                    .all(|s| s.cpu_percent.is_none() && s.first_ping_ms.is_none())
            }) {
                return Err(Failure::Runtime(
                    "no repetition produced a measurement".into(),
                ));
            }
            Ok(())
        }
        Cmd::Fidelity {
            fg,
            bg,
            scale,
            duration,
            out,
            capacity,
        } => {
            let cfg = FidelityConfig {
                fg_rate_mbps: *fg,
                bg_rate_mbps: *bg,
                duration_s: *duration,
                scale: *scale,
                measure_capacity: *capacity,
            };
            let report = metrics::run_fidelity_scenario(&emulator(cli)?, &cfg)?;
            let path = metrics::emit_fidelity_csv(&report, out)?;
            println!("{}", path.display());
            let fg = &report.foreground;
            println!(
                "foreground {:.2} Mbps requested, {:.2} Mbps mean, {:.0}% of seconds within 10%",
                fg.requested_mbps,
                fg.mean_mbps().unwrap_or(0.0),
                100.0 * fg.fraction_within(0.10)
            );
            if let Some(c) = report.capacity_mbps {
                println!(
                    "switching ceiling {c:.0} Mbps (reference system: {:.0} Mbps)",
                    report.reference_capacity_mbps
                );
            }
            Ok(())
        }
        Cmd::Clean { run } => {
            for name in emulator(cli)?.clean(run.as_deref())? {
                println!("removed {name}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Schema(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
