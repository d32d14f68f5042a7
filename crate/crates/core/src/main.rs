use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use posctl::dp::{self, LpSettings, SolveSettings};
use posctl::harness::{self, ExperimentConfig, Replay};
use posctl::{ssp, Error, PositiveProblem, Result};

#[derive(Parser)]
#[command(name = "posctl", version, about = "Optimal and adaptive control of positive linear systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Vi,
    Lp,
}

#[derive(Subcommand)]
enum Command {
    /// Solve an instance and print p, q and the optimal gain as JSON.
    Solve {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, value_enum, default_value = "vi")]
        method: Method,
    },
    /// Convert an SSP instance into problem JSON.
    Convert {
        #[arg(long)]
        ssp: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Record one adaptive run: trajectory.csv and replay.json.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Run index; the run seed is `seed XOR run`.
        #[arg(long, default_value_t = 0)]
        run: usize,
    },
    /// Regret experiment: regret.csv, condition.csv and summary.json.
    Benchmark {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Replay a recorded run through the certificates; exits 3 on any violation.
    Certify {
        #[arg(long)]
        replay: PathBuf,
        /// Misspecification level; defaults to the one recorded with the run.
        #[arg(long)]
        rho: Option<f64>,
    },
}

#[derive(Serialize)]
struct SolveOutput {
    p: Vec<f64>,
    qx: Vec<f64>,
    qu: Vec<f64>,
    gain: Vec<Option<usize>>,
    gain_display: String,
}

fn load_config(path: Option<&Path>, seed: Option<u64>, episodes: Option<usize>, runs: Option<usize>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = episodes {
        cfg.episodes = e;
    }
    if let Some(r) = runs {
        cfg.runs = r;
    }
    Ok(cfg)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Solve { instance, method } => {
            let problem = PositiveProblem::load(&instance)?;
            let settings = SolveSettings::default();
            let q = match method {
                Method::Vi => dp::solve_q_model_based(&problem, &settings)?.q,
                Method::Lp => dp::solve_q_lp(&problem.model_operator(), &problem, &LpSettings::default())?,
            };
            let gain = dp::gain_from_input_costs(&problem, &q.qu);
            let p = q.value_under(&gain);
            print_json(&SolveOutput {
                p: p.iter().cloned().collect(),
                qx: q.qx.iter().cloned().collect(),
                qu: q.qu.iter().cloned().collect(),
                gain: gain.selector().to_vec(),
                gain_display: gain.to_string(),
            })?;
        }
        Command::Convert { ssp: path, out } => {
            let problem = ssp::convert(&ssp::SspInstance::load(&path)?)?;
            let text = problem.to_json_string();
            match out {
                Some(p) => std::fs::write(p, text + "\n")?,
                None => println!("{text}"),
            }
        }
        Command::Simulate { config, out_dir, seed, episodes, run } => {
            let cfg = load_config(config.as_deref(), seed, episodes, None)?;
            let replay = harness::simulate(cfg, run)?;
            std::fs::create_dir_all(&out_dir)?;
            let file = std::fs::File::create(out_dir.join("trajectory.csv"))?;
            harness::write_trajectory_csv(&replay, std::io::BufWriter::new(file))?;
            std::fs::write(out_dir.join("replay.json"), serde_json::to_string(&replay)? + "\n")?;
        }
        Command::Benchmark { config, out_dir, seed, runs, episodes } => {
            let cfg = load_config(config.as_deref(), seed, episodes, runs)?;
            let report = harness::regret_experiment(cfg)?;
            harness::write_outputs(&report, &out_dir)?;
            for a in &report.algorithms {
                println!(
                    "{}: R(H) = {:.4} [{:.4}, {:.4}], runs {} (excluded {})",
                    a.algorithm.name(),
                    a.final_regret_mean,
                    a.final_regret_ci[0],
                    a.final_regret_ci[1],
                    a.runs_included,
                    a.runs_excluded
                );
            }
        }
        Command::Certify { replay, rho } => {
            let text = std::fs::read_to_string(&replay).map_err(|e| Error::Io(format!("{}: {e}", replay.display())))?;
            let record: Replay = serde_json::from_str(&text)?;
            let report = harness::replay_certification(&record, rho.unwrap_or(record.rho), &SolveSettings::default())?;
            print_json(&report)?;
            if report.tally.violations() > 0 {
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
