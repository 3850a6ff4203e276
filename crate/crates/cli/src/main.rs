use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tdmpc::config::RunConfig;
use tdmpc::experiment::{self, run_dir};
use tdmpc::safeset::SafeSetStore;
use tdmpc::tdmpc::decompose;

/// Exit status of `decompose` when nothing survives at the first position.
const EXIT_EMPTY: u8 = 2;

#[derive(Parser)]
#[command(
    name = "tdmpc",
    version,
    about = "Iterative learning MPC with task decomposition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Parent directory of the run directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Baseline plus ILMPC iterations on every training order.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Transfer a recorded safe set to a new subtask order.
    Decompose {
        #[command(flatten)]
        common: Common,
        /// Recorded safe set; defaults to the one written by `train`.
        #[arg(long)]
        safeset: Option<PathBuf>,
        /// Comma-separated order; defaults to the evaluation order.
        #[arg(long, value_delimiter = ',')]
        order: Option<Vec<usize>>,
    },
    /// Compare decomposition-initialized and baseline-initialized ILMPC.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Recorded safe set; training runs first when absent.
        #[arg(long)]
        safeset: Option<PathBuf>,
    },
    /// Re-simulate a stored execution with its stored inputs.
    Replay {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        safeset: PathBuf,
        #[arg(long, default_value_t = 0)]
        execution: usize,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)
        .with_context(|| format!("reading {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_store(path: &Path) -> Result<SafeSetStore> {
    SafeSetStore::load(path).with_context(|| format!("reading safe set {}", path.display()))
}

fn train(common: &Common) -> Result<ExitCode> {
    let cfg = load_config(common)?;
    let dir = run_dir(&common.out, &cfg);
    let outcome = experiment::train(&cfg)?;
    experiment::write_train(&dir, &cfg, &outcome)?;
    for r in &outcome.runs {
        println!("{:?}: {:?}", r.order, r.costs);
    }
    println!("wrote {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

fn decompose_cmd(
    common: &Common,
    safeset: Option<&Path>,
    order: Option<Vec<usize>>,
) -> Result<ExitCode> {
    let cfg = load_config(common)?;
    let dir = run_dir(&common.out, &cfg);
    let path = safeset.map_or_else(|| dir.join("safeset.json"), Path::to_path_buf);
    let store = load_store(&path)?;
    let order = order.unwrap_or_else(|| cfg.evaluation_order());
    let (task, model) = cfg.scenario.build(&order)?;
    let result = decompose(&store, &task, &model, &cfg.decompose)?;
    let out = dir.join("decompose");
    experiment::write_decompose(&out, &result)?;
    print!("{}", result.report());
    println!("wrote {}", out.display());
    Ok(if result.is_empty() {
        ExitCode::from(EXIT_EMPTY)
    } else {
        ExitCode::SUCCESS
    })
}

fn evaluate_cmd(common: &Common, safeset: Option<&Path>) -> Result<ExitCode> {
    let cfg = load_config(common)?;
    let dir = run_dir(&common.out, &cfg);
    let store = match safeset {
        Some(p) => load_store(p)?,
        None => {
            let outcome = experiment::train(&cfg)?;
            experiment::write_train(&dir, &cfg, &outcome)?;
            outcome.merged
        }
    };
    let order = cfg.evaluation_order();
    let outcome = experiment::evaluate(&cfg, &store, &order)?;
    let out = dir.join("evaluate");
    experiment::write_evaluate(&out, &cfg, &outcome)?;
    println!("order {order:?}");
    if let Some(a) = &outcome.tdmpc {
        println!("tdmpc:    {:?}", a.costs);
    } else {
        println!("tdmpc:    not run (decomposition cannot start the task)");
    }
    println!("baseline: {:?}", outcome.baseline.costs);
    println!("wrote {}", out.display());
    if outcome.failed() {
        bail!(
            "a closed-loop iteration failed; see {}",
            out.join("report.txt").display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn replay_cmd(common: &Common, safeset: &Path, execution: usize) -> Result<ExitCode> {
    let cfg = load_config(common)?;
    let store = load_store(safeset)?;
    let rep = experiment::replay(&cfg, &store, execution)?;
    let dir = run_dir(&common.out, &cfg).join("replay");
    std::fs::create_dir_all(&dir)?;
    let e = &store.executions[execution];
    let traj = tdmpc::safeset::Trajectory::new(
        rep.states.clone(),
        e.trajectory.inputs.clone(),
        e.trajectory.stage_costs.clone(),
    );
    let path = dir.join(format!("iter_{execution}.csv"));
    std::fs::write(&path, experiment::trajectory_csv(&traj, &e.cost_to_go))?;
    println!(
        "execution {execution}: {} steps, max deviation {:.3e}, max violation {:.3e}, target reached: {}",
        rep.steps, rep.max_deviation, rep.max_violation, rep.reached_target
    );
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { common } => train(common),
        Command::Decompose {
            common,
            safeset,
            order,
        } => decompose_cmd(common, safeset.as_deref(), order.clone()),
        Command::Evaluate { common, safeset } => evaluate_cmd(common, safeset.as_deref()),
        Command::Replay {
            common,
            safeset,
            execution,
        } => replay_cmd(common, safeset, *execution),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e:#}");
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
