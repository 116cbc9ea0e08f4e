//! Command-line front end.

pub mod commands;
pub mod config;
pub mod plots;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use tblimit::Error;

pub const EXIT_PASS: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_TOLERANCE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "tblimit", version, about = "Tight-binding defect relaxation and thermodynamic-limit studies")]
pub struct Cli {
    /// Concurrent per-radius solves (default: logical cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Homogeneous Fermi level by Bloch quadrature and by supercells.
    FermiLevel { config: PathBuf },
    /// Relax one point-defect domain.
    Relax { config: PathBuf },
    /// Fermi-level convergence study.
    MuStudy { config: PathBuf },
    /// Displacement, grand-canonical and far-field studies.
    DispStudy { config: PathBuf },
    /// Locality and pointwise-limit probes.
    Locality { config: PathBuf },
    /// Algebraic identities and symmetries on random clusters.
    Identities { config: PathBuf },
    /// Screw-dislocation checks and Fermi-level convergence.
    Dislocation { config: PathBuf },
    /// Plot scripts for study CSV files.
    Plots {
        files: Vec<PathBuf>,
        /// Guide-line slope; read from the sibling JSON summary when absent.
        #[arg(long, allow_hyphen_values = true)]
        guide_slope: Option<f64>,
    },
}

/// Exit code of a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Configuration(_)
        | Error::Parse(_)
        | Error::Domain(_)
        | Error::InvalidDefect(_)
        | Error::Index { .. }
        | Error::Io(_) => EXIT_CONFIG,
        Error::InsufficientPoints { .. } => EXIT_TOLERANCE,
        _ => EXIT_SOLVER,
    }
}

pub fn run(cli: Cli) -> i32 {
    let workers = cli.workers.unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    let result = match &cli.command {
        Command::Plots { files, guide_slope } => commands::plots(files, *guide_slope),
        cmd => {
            let (name, path) = match cmd {
                Command::FermiLevel { config } => ("fermi-level", config),
                Command::Relax { config } => ("relax", config),
                Command::MuStudy { config } => ("mu-study", config),
                Command::DispStudy { config } => ("disp-study", config),
                Command::Locality { config } => ("locality", config),
                Command::Identities { config } => ("identities", config),
                Command::Dislocation { config } => ("dislocation", config),
                Command::Plots { .. } => unreachable!(),
            };
            config::RunConfig::load(path).and_then(|(config, hash)| {
                let ctx = commands::Context { config, hash, workers, command: name.to_string() };
                match cmd {
                    Command::FermiLevel { .. } => commands::fermi_level(&ctx),
                    Command::Relax { .. } => commands::relax(&ctx),
                    Command::MuStudy { .. } => commands::mu_study(&ctx),
                    Command::DispStudy { .. } => commands::disp_study(&ctx),
                    Command::Locality { .. } => commands::locality(&ctx),
                    Command::Identities { .. } => commands::identities(&ctx),
                    Command::Dislocation { .. } => commands::dislocation(&ctx),
                    Command::Plots { .. } => unreachable!(),
                }
            })
        }
    };
    match result {
        Ok(true) => EXIT_PASS,
        Ok(false) => {
            eprintln!("tblimit: a declared tolerance failed");
            EXIT_TOLERANCE
        }
        Err(e) => {
            eprintln!("tblimit: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::Configuration("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::Domain("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::Stability { smallest_singular_value: 0.0 }), EXIT_SOLVER);
        assert_eq!(exit_code(&Error::NonConvergence { iterations: 1, residual: 1.0, best: None }), EXIT_SOLVER);
    }

    #[test]
    fn cli_parses() {
        let c = Cli::try_parse_from(["tblimit", "--workers", "2", "mu-study", "a.toml"]).unwrap();
        assert_eq!(c.workers, Some(2));
        let c = Cli::try_parse_from(["tblimit", "plots", "a.csv", "--guide-slope", "-0.5"]).unwrap();
        assert!(matches!(c.command, Command::Plots { guide_slope: Some(s), .. } if s == -0.5));
    }
}
