//! Command-line driver: resolves the config, runs one subcommand inside an
//! optional thread pool and writes CSV tables plus `manifest.json` to the
//! output directory.

use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, ValueEnum};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{parse_config, ConfigError, RunConfig};
use crate::experiments::{
    self, enkf_run, linear_demo, nonlinear_demo, write_csv, write_json, CsvRecord, StudyReport,
};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Subcommand {
    LinearDemo,
    RateStudy,
    StoppingStudy,
    ContractionStudy,
    CoverageStudy,
    Schrodinger,
    EnkfRun,
}

impl fmt::Display for Subcommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.to_possible_value().expect("no skipped variants");
        f.write_str(v.get_name())
    }
}

#[derive(Debug, Clone, PartialEq, Parser)]
#[command(
    name = "earlystop",
    version,
    about = "Discrepancy-principle early stopping experiments"
)]
pub struct CliInvocation {
    #[arg(value_enum)]
    pub subcommand: Subcommand,
    /// JSON config file; without it every setting takes its default.
    #[arg(long = "config", value_name = "PATH")]
    pub config_path: Option<PathBuf>,
    /// Dot-path override applied after the file, e.g. `--set schrodinger.dg=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory; falls back to `output_path` in the config, then `out`.
    #[arg(long = "out", value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// Replaces the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub threads: Option<u32>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("{0}")]
    Numerical(#[from] Error),

    #[error("cannot write `{}`: {source}", path.display())]
    Output {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("cannot start thread pool: {0}")]
    ThreadPool(#[from] rayon::ThreadPoolBuildError),

    #[error("run did not reach the discrepancy threshold: {0}")]
    NotConverged(String),
}

impl CliError {
    /// 0 ok, 2x config, 3 numerical, 4 non-convergence, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(e) => e.exit_code(),
            CliError::Numerical(Error::InvalidParameter { .. } | Error::OutOfRegime { .. }) => 24,
            CliError::Numerical(_) => 3,
            CliError::NotConverged(_) => 4,
            CliError::Output { .. } | CliError::ThreadPool(_) => 1,
        }
    }
}

/// Run record written next to the tables.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub subcommand: String,
    pub version: String,
    /// SHA-256 of the resolved config below, serialised compactly.
    pub config_sha256: String,
    pub seed: u64,
    pub threads: usize,
    pub files: Vec<String>,
    pub wall_time_seconds: f64,
    pub timestamp_unix: u64,
    pub config: Value,
}

/// What a successful run wrote.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub manifest: Manifest,
    /// Per-cell or per-run non-convergence notes; these do not fail the run.
    pub warnings: Vec<String>,
}

struct Writer<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl Writer<'_> {
    fn csv<T: CsvRecord>(&mut self, name: &str, rows: &[T]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        write_csv(&path, rows).map_err(|source| CliError::Output { path, source })?;
        self.files.push(name.to_owned());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let path = self.dir.join(name);
        write_json(&path, value).map_err(|source| CliError::Output { path, source })?;
        self.files.push(name.to_owned());
        Ok(())
    }

    fn study(&mut self, report: &StudyReport) -> Result<(), CliError> {
        let stem = report.kind.file_stem();
        self.csv(&format!("{stem}.csv"), &report.rows)?;
        self.csv(&format!("{stem}_summary.csv"), &report.summary)?;
        self.json(&format!("{stem}_report.json"), report)
    }
}

pub fn config_hash(config: &Value) -> String {
    let bytes = serde_json::to_vec(config).expect("JSON values serialise");
    hex::encode(Sha256::digest(&bytes))
}

/// Runs one invocation. Outputs stay inside the resolved output directory.
pub fn run(inv: &CliInvocation) -> Result<RunSummary, CliError> {
    let started = Instant::now();
    let mut overrides = inv.overrides.clone();
    if let Some(seed) = inv.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = parse_config(inv.config_path.as_deref(), &overrides)?;
    let out_dir = inv
        .out_dir
        .clone()
        .or_else(|| cfg.output_path.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out_dir).map_err(|source| CliError::Output {
        path: out_dir.clone(),
        source,
    })?;

    let mut writer = Writer {
        dir: &out_dir,
        files: Vec::new(),
    };
    let (threads, outcome) = match inv.threads {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t as usize)
                .build()?;
            pool.install(|| {
                (
                    rayon::current_num_threads(),
                    dispatch(inv.subcommand, &cfg, &mut writer),
                )
            })
        }
        None => (
            rayon::current_num_threads(),
            dispatch(inv.subcommand, &cfg, &mut writer),
        ),
    };

    // The manifest is written even when the run ends without converging.
    let config = cfg.to_value();
    let manifest = Manifest {
        subcommand: inv.subcommand.to_string(),
        version: env!("CARGO_PKG_VERSION").to_owned(),
        config_sha256: config_hash(&config),
        seed: cfg.study.seed,
        threads,
        files: writer.files.clone(),
        wall_time_seconds: started.elapsed().as_secs_f64(),
        timestamp_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
        config,
    };
    let warnings = match outcome {
        Ok(w) => w,
        Err(e @ CliError::NotConverged(_)) => {
            writer.json("manifest.json", &manifest)?;
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    writer.json("manifest.json", &manifest)?;
    Ok(RunSummary {
        out_dir,
        manifest,
        warnings,
    })
}

fn dispatch(cmd: Subcommand, cfg: &RunConfig, w: &mut Writer<'_>) -> Result<Vec<String>, CliError> {
    let study = &cfg.study;
    let mut warnings = Vec::new();
    match cmd {
        Subcommand::RateStudy => w.study(&experiments::rate_study(study)?)?,
        Subcommand::StoppingStudy => w.study(&experiments::stopping_time_study(study)?)?,
        Subcommand::ContractionStudy => w.study(&experiments::contraction_study(study)?)?,
        Subcommand::CoverageStudy => w.study(&experiments::coverage_study(study)?)?,
        Subcommand::LinearDemo => {
            let rep = linear_demo(&cfg.linear_demo_config())?;
            w.csv("linear_coefficients.csv", &rep.coefficients)?;
            w.csv("linear_residuals.csv", &rep.residuals)?;
            w.csv("linear_cells.csv", &rep.cells)?;
            for c in rep.cells.iter().filter(|c| !c.converged) {
                warnings.push(format!(
                    "linear demo cell signal={} noise={} stopped at k_max={} without reaching kappa",
                    c.signal, c.noise, c.steps
                ));
            }
        }
        Subcommand::Schrodinger => {
            let rep = nonlinear_demo(&cfg.nonlinear_demo_config())?;
            w.csv("schrodinger_grid.csv", &rep.grid)?;
            w.csv("schrodinger_residuals.csv", &rep.residuals)?;
            w.csv("schrodinger_runs.csv", &rep.runs)?;
            w.csv("schrodinger_summary.csv", &rep.by_noise)?;
            for s in rep.by_noise.iter().filter(|s| s.converged_fraction < 1.0) {
                warnings.push(format!(
                    "schrodinger noise={}: {:.0}% of runs reached kappa",
                    s.noise,
                    100.0 * s.converged_fraction
                ));
            }
        }
        Subcommand::EnkfRun => {
            let rep = enkf_run(&cfg.enkf_run_config())?;
            w.csv("enkf_coefficients.csv", &rep.coefficients)?;
            w.csv("enkf_residuals.csv", &rep.residuals)?;
            w.json("enkf_run.json", &rep)?;
            if !rep.converged {
                return Err(CliError::NotConverged(format!(
                    "residual {:e} > kappa {:e} after {} steps",
                    rep.residuals.last().map_or(f64::NAN, |r| r.residual),
                    rep.kappa,
                    rep.steps
                )));
            }
        }
    }
    Ok(warnings)
}

/// Parses `args`, runs, reports to stderr and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let inv = match CliInvocation::try_parse_from(args) {
        Ok(inv) => inv,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&inv) {
        Ok(summary) => {
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            eprintln!(
                "wrote {} files to {}",
                summary.manifest.files.len() + 1,
                summary.out_dir.display()
            );
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subcommand_names_are_kebab_case() {
        let names: Vec<String> = Subcommand::value_variants()
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(
            names,
            [
                "linear-demo",
                "rate-study",
                "stopping-study",
                "contraction-study",
                "coverage-study",
                "schrodinger",
                "enkf-run"
            ]
        );
    }

    #[test]
    fn flags_parse() {
        let inv = CliInvocation::try_parse_from([
            "earlystop",
            "rate-study",
            "--config",
            "c.json",
            "--set",
            "C=0.5",
            "--set",
            "seed=3",
            "--out",
            "o",
            "--seed",
            "9",
            "--threads",
            "2",
        ])
        .unwrap();
        assert_eq!(inv.subcommand, Subcommand::RateStudy);
        assert_eq!(inv.overrides, ["C=0.5", "seed=3"]);
        assert_eq!(inv.seed, Some(9));
        assert_eq!(inv.threads, Some(2));
        assert!(CliInvocation::try_parse_from(["earlystop", "bogus"]).is_err());
        assert!(
            CliInvocation::try_parse_from(["earlystop", "rate-study", "--threads", "0"]).is_err()
        );
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default().to_value();
        let mut b = a.clone();
        b["seed"] = 1.into();
        assert_eq!(config_hash(&a), config_hash(&a.clone()));
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::NotConverged(String::new()).exit_code(), 4);
        assert_eq!(
            CliError::Numerical(Error::SingularSystem(String::new())).exit_code(),
            3
        );
        let missing = ConfigError::MissingFile { path: "x".into() };
        assert_eq!(CliError::Config(missing).exit_code(), 20);
    }
}
