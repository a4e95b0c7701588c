use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use objslam::eval::{ate_rmse, export_landmark_map, run_scenario, EvalError, RunOutput, ScenarioConfig};
use objslam::world_sim::simulate_trajectory;
use objslam::world_sim::tum::{read_tum, write_tum};

/// Object-level SLAM scenario runner.
#[derive(Parser)]
#[command(name = "objslam", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the noise seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Odometry-only baseline: no landmark, CRF or association stages.
    #[arg(long)]
    disable_landmarks: bool,
}

impl ScenarioArgs {
    fn load(&self) -> Result<ScenarioConfig, EvalError> {
        let mut cfg = ScenarioConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.noise.seed = seed;
        }
        if self.disable_landmarks {
            cfg.use_landmarks = false;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write its frames and ground-truth trajectory.
    Simulate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline and write trajectories, map and report.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Output directory (defaults to the config's `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// ATE RMSE between two TUM trajectories.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Run a scenario and write only its landmark map.
    ExportMap {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Destination JSON file.
        #[arg(long)]
        out: PathBuf,
    },
}

fn summary(out: &RunOutput) -> String {
    let r = &out.report;
    format!(
        "frames={} ate_rmse_m={:.6} dead_reckoning_ate_rmse_m={:.6} landmarks={} rounds={} precision={:.3} recall={:.3}",
        r.frames,
        r.ate_rmse,
        r.dead_reckoning_ate_rmse,
        out.registry.len(),
        r.descent_rounds,
        r.association.precision,
        r.association.recall
    )
}

fn simulate(cfg: &ScenarioConfig, out: &Path) -> Result<(), EvalError> {
    let db = cfg.database();
    let world = cfg.world.build(&db)?;
    let gt = cfg.trajectory.poses();
    let sim = simulate_trajectory(&world, &gt, &cfg.camera, &cfg.noise)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("frames.json"), serde_json::to_string(&sim)?)?;
    let stamps: Vec<f64> = (0..gt.len()).map(|t| t as f64 / cfg.frame_rate).collect();
    write_tum(&out.join("trajectory_gt.tum"), &gt, &stamps)?;
    println!("frames={} written to {}", sim.frames.len(), out.display());
    Ok(())
}

fn execute(cli: Cli) -> Result<(), EvalError> {
    match cli.command {
        Command::Simulate { scenario, out } => simulate(&scenario.load()?, &out),
        Command::Run { scenario, out } => {
            let mut cfg = scenario.load()?;
            cfg.output_dir = out.or(cfg.output_dir);
            let result = run_scenario(&cfg)?;
            println!("{}", summary(&result));
            if let Some(dir) = &cfg.output_dir {
                println!("artifacts in {}", dir.display());
            }
            Ok(())
        }
        Command::Eval { est, gt } => {
            let e: Vec<_> = read_tum(&est)?.into_iter().map(|s| s.pose).collect();
            let g: Vec<_> = read_tum(&gt)?.into_iter().map(|s| s.pose).collect();
            println!("ate_rmse_m={:.9}", ate_rmse(&e, &g)?);
            Ok(())
        }
        Command::ExportMap { scenario, out } => {
            let mut cfg = scenario.load()?;
            cfg.output_dir = None;
            let result = run_scenario(&cfg)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            export_landmark_map(&result.registry, &out)?;
            println!("landmarks={} written to {}", result.registry.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
