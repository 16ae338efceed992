use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use csd_lab::envs::{read_trajectory_observations, write_trajectories, PointPush};
use csd_lab::pseudometric::{check_axioms, check_lower_bound, induce, FiniteDistance, FLOAT_TOL};
use csd_lab::trainer::eval::eval_skills;
use csd_lab::trainer::{
    state_coverage, train_with_progress, RunConfig, Snapshot, TrainError, SNAPSHOT_FINAL, SNAPSHOT_INITIAL,
    SNAPSHOT_NAN,
};

#[derive(Parser)]
#[command(name = "csd-lab", about = "Skill discovery experiments on toy environments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write its artifacts.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Print a progress line every this many epochs (0 = quiet).
        #[arg(long, default_value_t = 100)]
        report_every: usize,
    },
    /// Roll out skills of a saved policy deterministically.
    Eval {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        n_skills: usize,
        /// One rollout per category for discrete skills.
        #[arg(long)]
        enumerate: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Trajectory CSV path; defaults to `<snapshot>/eval_trajectories.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Induced pseudometric of a JSON distance matrix `{"n": .., "d": [[..]]}`.
    Induce {
        #[arg(long)]
        input: PathBuf,
    },
    /// Occupied-bin count of a trajectory CSV.
    Coverage {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, value_delimiter = ',')]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 0.1)]
        bin: f64,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            report_every,
        } => {
            let cfg = RunConfig::from_json(&fs::read_to_string(&config)?)?;
            let result = train_with_progress(&cfg, seed, |row| {
                if report_every > 0 && (row.epoch + 1) % report_every == 0 {
                    eprintln!(
                        "epoch {} reward {:.4} agent {} block {}",
                        row.epoch + 1,
                        row.intrinsic_reward_mean,
                        row.coverage_agent,
                        row.coverage_block
                    );
                }
            });
            match result {
                Ok(artifacts) => {
                    artifacts.write_to(&out)?;
                    if let Some(last) = artifacts.metrics.last() {
                        println!(
                            "epochs {} coverage_agent {} coverage_block {}",
                            last.epoch + 1,
                            last.coverage_agent,
                            last.coverage_block
                        );
                    }
                    Ok(())
                }
                Err(TrainError::NonFinite { ref snapshot, .. }) => {
                    fs::create_dir_all(&out)?;
                    snapshot.save(&out.join(SNAPSHOT_NAN))?;
                    Err(result.unwrap_err().into())
                }
                Err(e) => Err(e.into()),
            }
        }
        Command::Eval {
            snapshot,
            n_skills,
            enumerate,
            seed,
            out,
        } => {
            let path = [SNAPSHOT_FINAL, SNAPSHOT_INITIAL]
                .iter()
                .map(|f| snapshot.join(f))
                .find(|p| p.exists())
                .ok_or("no snapshot file in directory")?;
            let snap = Snapshot::load(&path)?;
            let cfg = &snap.config;
            let env = cfg.build_env()?;
            let trajs = eval_skills(
                &snap.agent,
                env.as_ref(),
                &cfg.skill_spec(),
                n_skills,
                cfg.episode_length,
                seed,
                enumerate,
            )?;
            let out = out.unwrap_or_else(|| snapshot.join("eval_trajectories.csv"));
            write_trajectories(fs::File::create(&out)?, &trajs)?;
            let obs: Vec<Vec<Vec<f64>>> = trajs.iter().map(|t| csd_lab::envs::observations(t)).collect();
            if env.obs_dim() == 4 {
                println!(
                    "coverage_agent {} coverage_block {}",
                    state_coverage(&obs, &PointPush::AGENT_DIMS, cfg.coverage_bin),
                    state_coverage(&obs, &PointPush::BLOCK_DIMS, cfg.coverage_bin)
                );
            }
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Induce { input } => {
            let fd = FiniteDistance::from_json(&fs::read_to_string(input)?)?;
            let im = induce(&fd);
            for row in im.matrix() {
                let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                println!("{}", cells.join(" "));
            }
            let axioms = check_axioms(&im, FLOAT_TOL);
            println!("axioms: {}", if axioms.passed() { "pass".to_string() } else { format!("{axioms:?}") });
            let lower = check_lower_bound(&fd, &im, FLOAT_TOL);
            println!("lower bound: {}", if lower.passed() { "pass".to_string() } else { format!("{lower:?}") });
            Ok(())
        }
        Command::Coverage { log, dims, bin } => {
            if dims.is_empty() || dims.len() > 2 {
                return Err("--dims takes one or two indices".into());
            }
            if !(bin > 0.0) {
                return Err("--bin must be positive".into());
            }
            let trajs = read_trajectory_observations(fs::File::open(log)?)?;
            if let Some(width) = trajs.iter().flatten().map(Vec::len).next() {
                if dims.iter().any(|&d| d >= width) {
                    return Err(format!("dims must be below {width}").into());
                }
            }
            println!("{}", state_coverage(&trajs, &dims, bin));
            Ok(())
        }
    }
}
