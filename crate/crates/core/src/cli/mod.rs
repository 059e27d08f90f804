//! The `snls` command line.

mod diagnose;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{trajectory_csv, write_field_dump, write_json};
use crate::ldp::{brute_force_grid, ldp_bounds_probe, minimize_action};
use crate::mc::{epsilon_sweep, McSetup};
use crate::noise::{SeedSpec, SeededNoise};
use crate::skeleton::solve_skeleton;
use crate::stochastic::{solve_sde, solve_truncated, stopping_times, TruncationSpec};
use crate::trajectory::Trajectory;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_BLOW_UP: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "snls", version, about = "Stochastic NLS simulator and rare-event toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML config file; built-in defaults when absent.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set model.beta=0.1` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Master seed in `0..=2^63−1`; replaces the config's `seed`.
    #[arg(long, global = true, value_name = "SEED", value_parser = clap::value_parser!(u64).range(..=i64::MAX as u64))]
    pub seed: Option<u64>,
    /// Worker threads (0 = logical cores).
    #[arg(long, global = true, default_value_t = 0, value_name = "N")]
    pub threads: usize,
    /// Output root; each run writes into a fresh subdirectory.
    #[arg(long, global = true, env = "SNLS_OUT_DIR", default_value = "runs", value_name = "DIR")]
    pub out: PathBuf,
    /// Validate and print the resolved config without computing.
    #[arg(long, global = true)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Controlled deterministic solve.
    Skeleton,
    /// One stochastic path.
    Sde {
        /// Path index under the master seed.
        #[arg(long, default_value_t = 0)]
        path: u64,
    },
    /// One path of the truncated equation plus stopping times.
    Truncated {
        #[arg(long, default_value_t = 0)]
        path: u64,
    },
    /// Minimum-action estimate of the event's rate.
    Rate,
    /// Monte Carlo probabilities over the ε list.
    Sweep,
    /// Numerical diagnostics suite.
    Diagnose,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Skeleton => "skeleton",
            Command::Sde { .. } => "sde",
            Command::Truncated { .. } => "truncated",
            Command::Rate => "rate",
            Command::Sweep => "sweep",
            Command::Diagnose => "diagnose",
        }
    }
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::InvalidParameter { .. } | Error::Inadmissible { .. } | Error::InvalidGrid(_) => EXIT_CONFIG,
        Error::BlowUp { .. } => EXIT_BLOW_UP,
        _ => EXIT_FAILURE,
    }
}

/// Parses `args` (including the program name), runs and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(dir) => {
            if let Some(dir) = dir {
                println!("{}", dir.display());
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Loads the config, then computes unless `--dry-run`. Returns the run
/// directory when one was written.
pub fn run(cli: &Cli) -> Result<Option<PathBuf>> {
    let g = &cli.global;
    let mut overrides = g.overrides.clone();
    if let Some(seed) = g.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = RunConfig::load(g.config.as_deref(), &overrides)?;
    if g.dry_run {
        print!("{}", cfg.to_toml_string());
        return Ok(None);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(g.threads)
        .build()
        .map_err(|e| Error::config("--threads", e.to_string()))?;
    let dir = create_run_dir(&g.out, cli.command.name(), &cfg)?;
    let outcome = pool.install(|| execute(cli.command, &cfg, &dir));
    let (status, artifacts) = match &outcome {
        Ok(a) => ("ok".to_string(), a.clone()),
        Err(e) => (format!("error: {e}"), Vec::new()),
    };
    let manifest = json!({
        "subcommand": cli.command.name(),
        "status": status,
        "code_version": env!("CARGO_PKG_VERSION"),
        "created": chrono::Utc::now().to_rfc3339(),
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "threads": pool.current_num_threads(),
        "overrides": g.overrides,
        "config": serde_json::to_value(&cfg).map_err(|e| Error::Precondition(e.to_string()))?,
        "config_toml": cfg.to_toml_string(),
        "artifacts": artifacts,
    });
    write_json(&dir.join("manifest.json"), &manifest)?;
    outcome.map(|_| Some(dir))
}

fn create_run_dir(root: &Path, name: &str, cfg: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(root)?;
    let stem = format!("{}-{}-{}", chrono::Utc::now().format("%Y%m%dT%H%M%S"), name, cfg.hash());
    for k in 0.. {
        let dir = if k == 0 { root.join(&stem) } else { root.join(format!("{stem}-{k}")) };
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!()
}

struct Artifacts<'a> {
    dir: &'a Path,
    names: Vec<String>,
}

impl Artifacts<'_> {
    fn text(&mut self, name: &str, body: &str) -> Result<()> {
        fs::write(self.dir.join(name), body)?;
        self.names.push(name.to_string());
        Ok(())
    }

    fn json(&mut self, name: &str, value: &impl serde::Serialize) -> Result<()> {
        write_json(&self.dir.join(name), value)?;
        self.names.push(name.to_string());
        Ok(())
    }

    fn trajectory(&mut self, cfg: &RunConfig, traj: &Trajectory) -> Result<()> {
        self.text("trajectory.csv", &trajectory_csv(traj))?;
        if cfg.output.fields {
            let mut f = fs::File::create(self.dir.join("fields.bin"))?;
            write_field_dump(&mut f, traj, cfg.output.field_stride)?;
            self.names.push("fields.bin".into());
        }
        Ok(())
    }
}

fn mass_summary(traj: &Trajectory, pair_p: f64) -> Result<Value> {
    let h = traj.h_norms();
    let m0 = h[0] * h[0];
    let drift = h.iter().map(|v| (v * v - m0).abs()).fold(0.0, f64::max);
    Ok(json!({
        "horizon": traj.horizon(),
        "steps": traj.n_steps(),
        "initial_mass": m0,
        "final_mass": h[h.len() - 1].powi(2),
        "max_mass_drift": drift,
        "max_relative_mass_drift": if m0 > 0.0 { drift / m0 } else { 0.0 },
        "mixed_norm": traj.mixed_norm(traj.horizon(), pair_p, traj.r())?,
    }))
}

fn execute(cmd: Command, cfg: &RunConfig, dir: &Path) -> Result<Vec<String>> {
    let eq = cfg.equation()?;
    let u0 = cfg.initial_field()?;
    let ctrl = cfg.control()?;
    let opts = cfg.solver;
    let p = eq.pair().p;
    let mut out = Artifacts { dir, names: Vec::new() };
    match cmd {
        Command::Skeleton => {
            let traj = solve_skeleton(&eq, &u0, &ctrl, &opts)?;
            out.trajectory(cfg, &traj)?;
            out.json("summary.json", &mass_summary(&traj, p)?)?;
        }
        Command::Sde { path } => {
            let seed = SeedSpec::new(cfg.seed, path);
            let traj = solve_sde(&eq, &u0, &ctrl, &opts, &SeededNoise::new(seed, opts.dt)?)?;
            out.trajectory(cfg, &traj)?;
            let mut summary = mass_summary(&traj, p)?;
            summary["seed"] = json!(seed);
            out.json("summary.json", &summary)?;
        }
        Command::Truncated { path } => {
            let seed = SeedSpec::new(cfg.seed, path);
            let spec = TruncationSpec::new(cfg.truncation.radius).map_err(|e| Error::config("truncation.radius", e.to_string()))?;
            let (traj, report) = solve_truncated(&eq, &u0, &ctrl, &opts, &SeededNoise::new(seed, opts.dt)?, &spec)?;
            out.trajectory(cfg, &traj)?;
            let levels = stopping_times(&traj, p, &cfg.truncation.levels)?;
            out.json(
                "stops.json",
                &json!({ "seed": seed, "truncation": report, "levels": levels, "summary": mass_summary(&traj, p)? }),
            )?;
        }
        Command::Rate => {
            let event = cfg.event_spec(&eq, &u0)?;
            let result = minimize_action(&eq, &u0, &event, &cfg.rate)?;
            out.json("rate.json", &result)?;
            out.json("control.json", &result.control)?;
            if cfg.oracle.enabled {
                let oracle = brute_force_grid(&eq, &u0, &event, &cfg.oracle.options())?;
                out.json("oracle.json", &oracle)?;
            }
        }
        Command::Sweep => {
            let event = cfg.event_spec(&eq, &u0)?;
            let setup = McSetup {
                eq: &eq,
                u0: &u0,
                ctrl: &ctrl,
                opts: &opts.with_record(crate::trajectory::Record::Endpoints),
                event: &event,
            };
            let sweep = epsilon_sweep(&setup, &cfg.sweep.epsilons, cfg.sweep.n_paths, cfg.seed)?;
            out.text("sweep.csv", &sweep.to_csv())?;
            out.json("sweep.json", &sweep)?;
            if let Some(i_star) = cfg.sweep.i_star {
                out.json("bounds.json", &ldp_bounds_probe(i_star, &sweep)?)?;
            }
        }
        Command::Diagnose => diagnose::run_suite(cfg, &eq, &u0, &ctrl, &mut out)?,
    }
    Ok(out.names)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flags_after_subcommand() {
        let cli = Cli::try_parse_from(["snls", "sweep", "--set", "a=1", "--set", "b=2", "--threads", "2", "--dry-run"]).unwrap();
        assert_eq!(cli.global.overrides, vec!["a=1", "b=2"]);
        assert!(cli.global.dry_run);
        assert_eq!(cli.global.threads, 2);
        assert!(matches!(cli.command, Command::Sweep));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::config("k", "m")), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::BlowUp { step: 3, norm: f64::NAN }), EXIT_BLOW_UP);
        assert_eq!(exit_code(&Error::Precondition("x".into())), EXIT_FAILURE);
    }
}
