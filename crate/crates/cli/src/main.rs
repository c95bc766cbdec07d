//! `cavlase` command-line front end.

mod config;
mod logging;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use cavlase_core::dynamics::{evolve, CoupledState, MotionMode, MotionState, NoRecorder};
use cavlase_core::io::{self, write_json, SCHEMA_VERSION};
use cavlase_core::spectrum::{analyze, correlation};
use cavlase_core::sweep::{long_time_comparison, run_scan, steady_state_oracle, CellOptions, SteadyObservables};
use cavlase_core::{QuantumState, SystemParams};
use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;

/// Environment variable overriding the output root.
const OUTPUT_ENV: &str = "CAVLASE_OUTPUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "cavlase", version, about = "Atoms in a pumped lossy cavity: motion, lasing and spectra")]
struct Cli {
    #[command(subcommand)]
    mode: Mode,
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for sampled initial momenta.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Evolution time of the selected mode, in 1/Γ.
    #[arg(long, global = true)]
    t_final: Option<f64>,
    #[arg(long, global = true)]
    fock_cutoff: Option<usize>,
    /// Output root (overrides $CAVLASE_OUTPUT_ROOT and the config file).
    #[arg(long, global = true)]
    output: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    /// Single trajectory with stability verdict.
    Trajectory,
    /// Emission spectrum of the quasi-steady state.
    Spectrum,
    /// Two-parameter ensemble scan.
    Scan,
    /// Collective versus independent long-time cooling.
    Comparison,
    /// Stable-fraction scan over detuning and pump rate.
    Stability,
    /// Steady-state photon number, g2(0) and inversion at fixed positions.
    Steady,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Trajectory => "trajectory",
            Mode::Spectrum => "spectrum",
            Mode::Scan => "scan",
            Mode::Comparison => "comparison",
            Mode::Stability => "stability",
            Mode::Steady => "steady",
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    code_version: &'a str,
    mode: &'a str,
    seed: u64,
    threads: usize,
    started_unix: u64,
    wall_time_s: f64,
    files: Vec<String>,
    warnings: Vec<String>,
}

#[derive(Serialize)]
struct ErrorRecord {
    mode: &'static str,
    error: String,
    chain: Vec<String>,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Ok(root) = std::env::var(OUTPUT_ENV) {
        config.output = PathBuf::from(root);
    }
    if let Some(o) = &cli.output {
        config.output = o.clone();
    }
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(n) = cli.fock_cutoff {
        config.system.fock_cutoff = n;
    }
    if let Some(t) = cli.t_final {
        match cli.mode {
            Mode::Trajectory => config.trajectory.t_final = t,
            Mode::Spectrum => config.spectrum.t_steady = t,
            Mode::Scan => config.scan.t_final = t,
            Mode::Stability => config.stability.t_final = t,
            Mode::Comparison => config.comparison.t_final = t,
            Mode::Steady => log::warn!("--t-final has no effect in steady mode"),
        }
    }
    config.validate()?;
    Ok(config)
}

/// Output root when the configuration could not be resolved.
fn fallback_root(cli: &Cli) -> PathBuf {
    cli.output
        .clone()
        .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| RunConfig::default().output)
}

fn momenta_or_sampled(config: &RunConfig, given: &Option<Vec<f64>>) -> Vec<f64> {
    given.clone().unwrap_or_else(|| {
        let p = &config.system;
        config.sampler().draw(p.omega_r, p.n_atoms, 0)
    })
}

fn fock_tail_warning(tail: f64, cutoff: usize) -> String {
    format!("Fock tail population reached {tail:e} at cutoff {cutoff}; consider a larger --fock-cutoff")
}

/// Runs one mode into `dir`, returning the data files written.
fn execute(mode: Mode, config: &RunConfig, dir: &Path) -> Result<Vec<String>> {
    let params = &config.system;
    let file = |name: &str| dir.join(name);
    match mode {
        Mode::Trajectory => {
            let momenta = momenta_or_sampled(config, &config.trajectory.momenta);
            let initial = CoupledState::initial(params, &momenta)?;
            let traj = evolve(&initial, params, config.trajectory.t_final, &config.evolve, &mut NoRecorder)?;
            if traj.diagnostics.fock_tail_warning {
                log::warn!("{}", fock_tail_warning(traj.diagnostics.max_fock_tail, params.fock_cutoff));
            }
            io::write_trajectory(&traj, &file("trajectory.csv"), &file("trajectory.json"))?;
            Ok(vec!["trajectory.csv".into(), "trajectory.json".into()])
        }
        Mode::Spectrum => {
            let sc = &config.spectrum;
            let mut evolve_opts = config.evolve.clone();
            let momenta = if sc.fixed_positions {
                evolve_opts.motion = MotionMode::Frozen;
                vec![0.0; params.n_atoms]
            } else {
                momenta_or_sampled(config, &sc.momenta)
            };
            let initial = CoupledState::initial(params, &momenta)?;
            let steady = if sc.t_steady > 0.0 {
                let traj = evolve(&initial, params, sc.t_steady, &evolve_opts, &mut NoRecorder)?;
                if !traj.stability.overall {
                    log::warn!("an atom left its initial well before the reference time");
                }
                traj.final_state.context("evolution returned no final state")?
            } else {
                initial
            };
            let series = correlation(params, &steady, sc.tau_max, sc.n_tau, &evolve_opts)?;
            let result = analyze(&series, params.delta, sc.zero_pad, sc.window)?;
            if !result.fit.converged {
                log::warn!("Lorentzian fit did not converge; reporting discrete peak estimates");
            }
            std::fs::write(file("correlation.csv"), io::correlation_csv(&series))?;
            io::write_spectrum(&result, params, &file("spectrum.csv"), &file("spectrum.json"))?;
            Ok(vec!["correlation.csv".into(), "spectrum.csv".into(), "spectrum.json".into()])
        }
        Mode::Scan | Mode::Stability => {
            let sc = if mode == Mode::Scan { &config.scan } else { &config.stability };
            let grid = sc.grid(params, config.seed)?;
            let options = CellOptions {
                t_final: sc.t_final,
                evolve: cavlase_core::EvolveOptions { stop_when_unstable: true, ..config.evolve.clone() },
                spectrum: sc.spectra.then(|| config.spectrum.options(&config.evolve)),
                keep_curves: false,
            };
            let result = run_scan(&grid, &config.sampler(), &options)?;
            let failed: usize = result.cells.iter().map(|c| c.n_failed).sum();
            if failed > 0 {
                log::warn!("{failed} samples failed and were counted as unstable");
            }
            let name = mode.name();
            io::write_scan(&result, &config.sampler(), &options, &file(&format!("{name}.csv")), &file(&format!("{name}.json")))?;
            Ok(vec![format!("{name}.csv"), format!("{name}.json")])
        }
        Mode::Comparison => {
            let cc = &config.comparison;
            let n_samples = (cc.t_final * cc.samples_per_time).ceil() as usize + 1;
            let options = CellOptions {
                t_final: cc.t_final,
                evolve: cavlase_core::EvolveOptions { n_samples, stop_when_unstable: true, ..config.evolve.clone() },
                spectrum: None,
                keep_curves: true,
            };
            let result = long_time_comparison(params, &config.sampler(), cc.samples, cc.n_points, &options)?;
            std::fs::write(file("comparison.csv"), io::comparison_csv(&result))?;
            write_json(&file("comparison.json"), &result)?;
            Ok(vec!["comparison.csv".into(), "comparison.json".into()])
        }
        Mode::Steady => {
            let lambda = params.wavelength();
            let positions = match &config.steady.positions {
                Some(p) => p.iter().map(|x| x * lambda).collect(),
                None => params.antinode_positions(),
            };
            MotionState::new(positions.clone(), vec![0.0; params.n_atoms])?;
            let state: QuantumState = steady_state_oracle(params, &positions)?;
            let obs = SteadyObservables::of(&state);
            if obs.g2.is_none() {
                log::warn!("photon number {:e} too small for g2(0)", obs.n);
            }
            let tail = state.fock_tail_population();
            if tail > cavlase_core::operators::FOCK_TAIL_WARNING {
                log::warn!("{}", fock_tail_warning(tail, params.fock_cutoff));
            }
            write_json(&file("steady.json"), &SteadyRecord { schema_version: SCHEMA_VERSION, params, observables: obs })?;
            Ok(vec!["steady.json".into()])
        }
    }
}

#[derive(Serialize)]
struct SteadyRecord<'a> {
    schema_version: u32,
    params: &'a SystemParams,
    #[serde(flatten)]
    observables: SteadyObservables,
}

fn run(cli: &Cli, dir_slot: &mut Option<PathBuf>) -> Result<()> {
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let clock = Instant::now();
    let config = resolve_config(cli)?;
    let threads = cli.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let dir = config.output.join(cli.mode.name());
    *dir_slot = Some(dir.clone());
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("config.toml"), config.to_toml()?)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    let mut files = pool.install(|| execute(cli.mode, &config, &dir))?;
    files.insert(0, "config.toml".into());
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        code_version: io::CODE_VERSION,
        mode: cli.mode.name(),
        seed: config.seed,
        threads,
        started_unix: started,
        wall_time_s: clock.elapsed().as_secs_f64(),
        files,
        warnings: logging::warnings(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    println!("{}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    logging::init();
    let cli = Cli::parse();
    let mut dir = None;
    match run(&cli, &mut dir) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let record = ErrorRecord {
                mode: cli.mode.name(),
                error: format!("{e:#}"),
                chain: e.chain().map(|c| c.to_string()).collect(),
            };
            let dir = dir.unwrap_or_else(|| fallback_root(&cli).join(cli.mode.name()));
            let path = dir.join("error.json");
            let written = std::fs::create_dir_all(&dir).map_err(Into::into).and_then(|()| write_json(&path, &record));
            if let Err(w) = written {
                eprintln!("could not write {}: {w}", path.display());
                eprintln!("{}", serde_json::to_string(&record).unwrap_or_default());
            }
            ExitCode::FAILURE
        }
    }
}
