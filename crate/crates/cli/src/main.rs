//! `tpshock`: experiment runner for viscous Lax shock stability studies.

mod commands;
mod config;
mod failure;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Run;
use crate::config::RunConfig;
use crate::failure::Failure;

#[derive(Debug, Parser)]
#[command(name = "tpshock", version, about = "Stability experiments for viscous shock profiles")]
struct Cli {
    /// Worker threads (default: logical cores).
    #[arg(long, global = true, env = "TPSHOCK_THREADS")]
    threads: Option<usize>,
    /// JSON run configuration; the built-in Burgers setup when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Primary output file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Standing profile (and optional evolution snapshots) as CSV.
    Profile {
        #[arg(long)]
        tmax: Option<f64>,
        #[arg(long)]
        every: Option<f64>,
    },
    /// Floquet spectrum and stability flags of the standing profile.
    Spectrum,
    /// Intersection of the stable/unstable subspaces at one spectral value.
    Dichotomy {
        #[arg(long, allow_hyphen_values = true)]
        sigma_re: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        sigma_im: Option<f64>,
        #[arg(long = "K")]
        k: Option<usize>,
        #[arg(long)]
        circle_radius: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// One Green's function column on a time table.
    Greens {
        #[arg(long, allow_hyphen_values = true)]
        y: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        s: Option<f64>,
        #[arg(long)]
        tmax: Option<f64>,
        #[arg(long)]
        every: Option<f64>,
        #[arg(long)]
        component: Option<usize>,
    },
    /// Template bound constants for the Green's remainder.
    Templates {
        #[arg(long)]
        fit: bool,
        #[arg(long = "M")]
        m: Option<f64>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        tmax: Option<f64>,
    },
    /// Nonlinear decay of a localized perturbation.
    Decay {
        #[arg(long, allow_hyphen_values = true)]
        amplitude: Option<f64>,
        #[arg(long)]
        tmax: Option<f64>,
    },
    /// Fixed-point iteration of the modulation map.
    Iterate {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, allow_hyphen_values = true)]
        amplitude: Option<f64>,
    },
    /// Runs the acceptance suite and prints one line per criterion.
    Acceptance {
        /// Run a single criterion.
        #[arg(long)]
        only: Option<u8>,
    },
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Profile { .. } => "profile",
            Command::Spectrum => "spectrum",
            Command::Dichotomy { .. } => "dichotomy",
            Command::Greens { .. } => "greens",
            Command::Templates { .. } => "templates",
            Command::Decay { .. } => "decay",
            Command::Iterate { .. } => "iterate",
            Command::Acceptance { .. } => "acceptance",
        }
    }

    fn apply(&self, cfg: &mut RunConfig) {
        let e = &mut cfg.experiment;
        match *self {
            Command::Profile { tmax, every } => {
                set(&mut cfg.grid.t_max, tmax);
                set(&mut cfg.output.every, every);
            }
            Command::Dichotomy { sigma_re, sigma_im, k, circle_radius, samples } => {
                let d = &mut e.dichotomy;
                set(&mut d.sigma_re, sigma_re);
                set(&mut d.sigma_im, sigma_im);
                set(&mut d.k, k);
                if circle_radius.is_some() {
                    d.circle_radius = circle_radius;
                }
                set(&mut d.samples, samples);
            }
            Command::Greens { y, s, tmax, every, component } => {
                let g = &mut e.greens;
                set(&mut g.y, y);
                set(&mut g.s, s);
                set(&mut g.t_max, tmax);
                set(&mut g.every, every);
                set(&mut g.component, component);
            }
            Command::Templates { fit, m, eta, tmax } => {
                let t = &mut e.templates;
                t.fit |= fit;
                set(&mut t.m, m);
                set(&mut t.eta, eta);
                set(&mut t.t_max, tmax);
            }
            Command::Decay { amplitude, tmax } => {
                set(&mut e.decay.amplitude, amplitude);
                if tmax.is_some() {
                    set(&mut e.decay.t_max, tmax);
                    e.decay.window = None;
                }
            }
            Command::Iterate { n, amplitude } => {
                set(&mut e.iterate.n, n);
                set(&mut e.iterate.amplitude, amplitude);
            }
            Command::Spectrum | Command::Acceptance { .. } => {}
        }
    }
}

fn acceptance(only: Option<u8>, run: &Run) -> Result<bool, Failure> {
    let outcomes = match only {
        Some(id) if (1..=11).contains(&id) => {
            let o = tpshock_core::acceptance::run_criterion(id);
            println!("{o}");
            vec![o]
        }
        Some(id) => return Err(Failure::Config(format!("--only: no criterion {id} (expected 1..=11)"))),
        None => tpshock_core::acceptance::run_all(|o| println!("{o}")),
    };
    let passed = outcomes.iter().filter(|o| o.passed).count();
    println!("{passed}/{} criteria passed", outcomes.len());
    if let Some(path) = &run.out {
        output::write_json(path, &run.hash, &serde_json::json!({ "criteria": outcomes }))?;
        output::write_provenance(path, run.command, &run.cfg, &run.hash, std::slice::from_ref(path))?;
    }
    Ok(passed == outcomes.len())
}

fn execute(cli: Cli) -> Result<bool, Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Config(format!("cannot build the worker pool: {e}")))?;
    }
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?.0,
        None => RunConfig::default(),
    };
    cli.command.apply(&mut cfg);
    let cfg = cfg.resolve()?;
    let run = Run { command: cli.command.name(), hash: cfg.hash(), cfg, out: cli.out.clone() };
    let written = match cli.command {
        Command::Acceptance { only } => return acceptance(only, &run),
        Command::Profile { .. } => run.profile_cmd()?,
        Command::Spectrum => run.spectrum()?,
        Command::Dichotomy { .. } => run.dichotomy()?,
        Command::Greens { .. } => run.greens()?,
        Command::Templates { .. } => run.templates()?,
        Command::Decay { .. } => run.decay()?,
        Command::Iterate { .. } => run.iterate()?,
    };
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(f) => {
            eprintln!("tpshock: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
