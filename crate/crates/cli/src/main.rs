use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use propmix::Result;
use propmix_cli::config::{self, Mode, RunConfig};
use propmix_cli::runner;
use propmix_cli::sweep;

/// Noisy-label training harness. All behavior is declared in the config
/// file; `--seed` and `--out` override the seed list and output directory.
#[derive(Parser)]
#[command(name = "propmix", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Replace the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run label-free pretraining and save encoder checkpoints.
    Pretrain(Common),
    /// Run the configured variant end to end for every seed.
    Train(Common),
    /// Materialize the configured dataset with noise applied.
    InjectNoise(Common),
    /// Score saved checkpoints on the configured test split.
    Eval(Common),
    /// Grid over filtering thresholds, one full run per cell and seed.
    Sweep(Common),
    /// Variant-by-noise-rate comparison grid with shared seeds.
    Ablation(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Pretrain(c)
            | Command::Train(c)
            | Command::InjectNoise(c)
            | Command::Eval(c)
            | Command::Sweep(c)
            | Command::Ablation(c) => c,
        }
    }

    fn mode(&self) -> Mode {
        match self {
            Command::Pretrain(_) => Mode::Pretrain,
            Command::Train(_) => Mode::Train,
            Command::InjectNoise(_) => Mode::Inject,
            Command::Eval(_) => Mode::Eval,
            Command::Sweep(_) => Mode::Sweep,
            Command::Ablation(_) => Mode::Ablation,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let common = cli.command.common();

    // Anything wrong with the configuration exits 2 before any compute.
    let cfg = match load_and_check(common, cli.command.mode()) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };

    match dispatch(&cli.command, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("run failed: {e}");
            ExitCode::from(3)
        }
    }
}

fn load_and_check(common: &Common, mode: Mode) -> Result<RunConfig> {
    let cfg = config::load_config(&common.config, common.seed, common.out.as_deref())?;
    config::mode_preflight(&cfg, mode)?;
    Ok(cfg)
}

fn dispatch(command: &Command, cfg: &RunConfig) -> Result<()> {
    match command {
        Command::Pretrain(_) => {
            for path in runner::pretrain_all(cfg)? {
                println!("encoder: {}", path.display());
            }
        }
        Command::Train(_) => {
            for report in runner::train_all(cfg)? {
                println!(
                    "seed {}: best {:.4} last10 {:.4} epochs {} hash {} ({:.1}s)",
                    report.seed,
                    report.best_acc,
                    report.last10_acc,
                    report.epochs,
                    report.config_hash,
                    report.wall_clock_s
                );
            }
        }
        Command::InjectNoise(common) => {
            let seed = first_seed(cfg);
            let out = common.out.clone().unwrap_or_else(|| cfg.run.out_dir.clone());
            let (train, test, realized) = runner::inject_and_save(cfg, seed, &out)?;
            println!("train: {}", train.display());
            println!("test: {}", test.display());
            println!("realized noise fraction: {realized}");
        }
        Command::Eval(_) => {
            let seed = first_seed(cfg);
            let dir = runner::run_dir(&cfg.run.out_dir, seed);
            let acc = runner::eval_run(cfg, seed, &dir)?;
            println!(
                "{}",
                serde_json::json!({ "seed": seed, "test_acc": acc })
            );
        }
        Command::Sweep(_) => {
            let (rows, path) = sweep::sweep_thresholds(cfg)?;
            println!("{} runs -> {}", rows.len(), path.display());
        }
        Command::Ablation(_) => {
            let (cells, table) = sweep::run_ablation(cfg)?;
            println!("{} runs -> {}", cells.len(), table.display());
        }
    }
    Ok(())
}

fn first_seed(cfg: &RunConfig) -> u64 {
    *cfg.run.seeds.first().expect("validated nonempty")
}
