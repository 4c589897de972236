//! `rio`: run odometry on recorded streams, generate synthetic scenarios, score trajectories.
//!
//! Exit codes: 0 success, 2 parse or input error, 3 divergence, 4 stream gap (a
//! checkpoint is written next to the partial output).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use rio_core::pipeline::config::PipelineConfig;
use rio_core::pipeline::eval::{evaluate, Alignment, EvalOptions};
use rio_core::pipeline::io::{
    read_imu_file, read_radar_file, read_trajectory_file, write_imu_file, write_jsonl_file, write_map_ply_file,
    write_map_text_file, write_radar_file, write_trajectory_file,
};
use rio_core::pipeline::odometry::{resume, run, Checkpoint, RunError, RunOutput};
use rio_core::pipeline::sim::ScenarioSpec;

#[derive(Parser)]
#[command(name = "rio", version, about = "Continuous-time radar-inertial odometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file; unspecified fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration field, e.g. `--set localizability.eta=0.7`. Repeatable; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig, Failure> {
        PipelineConfig::load_with_overrides(self.config.as_deref(), &self.overrides).map_err(|e| Failure::parse(e.into()))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Estimate a trajectory and map from radar and IMU files.
    Run {
        #[arg(long)]
        radar: PathBuf,
        #[arg(long)]
        imu: PathBuf,
        /// Directory for trajectory.txt, map.txt, map.ply, diagnostics.jsonl and checkpoint.json.
        #[arg(long, default_value = "rio-out")]
        out: PathBuf,
        /// Continue from a checkpoint written by an aborted run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Generate a synthetic scenario: radar.csv, imu.csv, groundtruth.txt and scenario.toml.
    Simulate {
        #[arg(long, value_enum, default_value_t = Preset::FigureEight)]
        scenario: Preset,
        /// Scenario file; overrides the preset.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Stream length, s.
        #[arg(long)]
        duration: Option<f64>,
        /// Fraction of surface returns replaced by ghost returns.
        #[arg(long)]
        outliers: Option<f64>,
        #[arg(long, default_value = "rio-sim")]
        out: PathBuf,
    },
    /// Score an estimated trajectory against ground truth (ATE, RPE).
    Evaluate {
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        groundtruth: PathBuf,
        /// Skip the rigid alignment before computing ATE.
        #[arg(long)]
        no_align: bool,
        /// RPE segment length, m.
        #[arg(long, default_value_t = 1.0)]
        segment: f64,
        /// Association tolerance, s.
        #[arg(long, default_value_t = 0.01)]
        max_dt: f64,
    },
    /// Print the effective configuration as TOML.
    InspectConfig {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    FigureEight,
    Tunnel,
    Stationary,
}

/// An error together with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn parse(error: anyhow::Error) -> Self {
        Self { code: 2, error }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Self { code: 1, error }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { radar, imu, out, resume, config } => cmd_run(&radar, &imu, &out, resume.as_deref(), &config),
        Command::Simulate { scenario, spec, seed, duration, outliers, out } => {
            cmd_simulate(scenario, spec.as_deref(), seed, duration, outliers, &out)
        }
        Command::Evaluate { estimate, groundtruth, no_align, segment, max_dt } => {
            cmd_evaluate(&estimate, &groundtruth, no_align, segment, max_dt)
        }
        Command::InspectConfig { config } => config.load().map(|c| print!("{}", c.to_toml_string())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn write_outputs(dir: &Path, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_trajectory_file(&dir.join("trajectory.txt"), &out.trajectory)?;
    write_map_text_file(&dir.join("map.txt"), &out.map)?;
    write_map_ply_file(&dir.join("map.ply"), &out.map)?;
    write_jsonl_file(&dir.join("diagnostics.jsonl"), &out.diagnostics)?;
    Ok(())
}

fn cmd_run(radar: &Path, imu: &Path, out: &Path, checkpoint: Option<&Path>, config: &ConfigArgs) -> Result<(), Failure> {
    let config = config.load()?;
    let radar = read_radar_file(radar).map_err(|e| Failure::parse(e.into()))?;
    let imu = read_imu_file(imu).map_err(|e| Failure::parse(e.into()))?;
    info!("{} radar scans, {} IMU samples", radar.len(), imu.len());
    let result = match checkpoint {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(Failure::parse)?;
            let cp: Checkpoint = serde_json::from_str(&text).context("parsing checkpoint").map_err(Failure::parse)?;
            resume(&config, &cp, &radar, &imu)
        }
        None => run(&config, &radar, &imu),
    };
    match result {
        Ok(output) => {
            write_outputs(out, &output)?;
            info!("{} poses, {} map points written to {}", output.trajectory.len(), output.map.len(), out.display());
            Ok(())
        }
        Err(RunError::StreamGap { time, stream, knots, checkpoint, partial }) => {
            write_outputs(out, &partial)?;
            let path = out.join("checkpoint.json");
            fs::write(&path, serde_json::to_string(&checkpoint).context("serializing checkpoint")?)
                .with_context(|| format!("writing {}", path.display()))?;
            warn!("partial output and checkpoint written to {}", out.display());
            Err(Failure {
                code: 4,
                error: anyhow::anyhow!("no {stream} data for {knots} knots before t = {time:.3} s; resume with --resume {}", path.display()),
            })
        }
        Err(e) => {
            let code = e.exit_code() as u8;
            Err(Failure { code, error: e.into() })
        }
    }
}

fn cmd_simulate(
    preset: Preset,
    spec_path: Option<&Path>,
    seed: Option<u64>,
    duration: Option<f64>,
    outliers: Option<f64>,
    out: &Path,
) -> Result<(), Failure> {
    let mut spec = match spec_path {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(Failure::parse)?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display())).map_err(Failure::parse)?
        }
        None => {
            let seed = seed.unwrap_or(0);
            match preset {
                Preset::FigureEight => ScenarioSpec::figure_eight(seed),
                Preset::Tunnel => ScenarioSpec::tunnel(seed),
                Preset::Stationary => ScenarioSpec::stationary(seed),
            }
        }
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(d) = duration {
        spec.duration = d;
    }
    if let Some(f) = outliers {
        spec.outlier_fraction = f;
    }
    let scenario = spec.generate().map_err(|e| Failure::parse(e.into()))?;
    let truth = scenario.truth.trajectory(0.0, spec.duration, 100.0);
    let write = || -> Result<()> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        write_radar_file(&out.join("radar.csv"), &scenario.radar)?;
        write_imu_file(&out.join("imu.csv"), &scenario.imu)?;
        write_trajectory_file(&out.join("groundtruth.txt"), &truth)?;
        fs::write(out.join("scenario.toml"), toml::to_string_pretty(&spec).context("serializing scenario")?)
            .context("writing scenario.toml")?;
        Ok(())
    };
    write()?;
    info!("{} radar scans, {} IMU samples written to {}", scenario.radar.len(), scenario.imu.len(), out.display());
    Ok(())
}

fn cmd_evaluate(estimate: &Path, groundtruth: &Path, no_align: bool, segment: f64, max_dt: f64) -> Result<(), Failure> {
    let est = read_trajectory_file(estimate).map_err(|e| Failure::parse(e.into()))?;
    let gt = read_trajectory_file(groundtruth).map_err(|e| Failure::parse(e.into()))?;
    let opts = EvalOptions {
        max_time_diff: max_dt,
        alignment: if no_align { Alignment::None } else { Alignment::Se3 },
        segment_length: segment,
    };
    let metrics = evaluate(&est, &gt, &opts).map_err(|e| Failure::parse(e.into()))?;
    println!("{}", serde_json::to_string_pretty(&metrics).context("serializing metrics")?);
    Ok(())
}
