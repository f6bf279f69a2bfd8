//! Command-line driver for the membership-leakage pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use semileak::attacks::AttackKind;
use semileak::config::{ExperimentConfig, SimFn};
use semileak::defenses::DefenseKind;
use semileak::error::Result;
use semileak::runner::{
    cmd_attack, cmd_defend, cmd_prepare, cmd_report, cmd_train, DataSource, RunDir,
};
use semileak::ssl::Role;

#[derive(Parser)]
#[command(
    name = "semileak",
    about = "Membership inference auditing for semi-supervised image classifiers",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutArg {
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; defaults apply for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of augmented views per side used by the
    /// consistency attack.
    #[arg(long)]
    views: Option<usize>,
    /// Override the view-distance function.
    #[arg(long, value_parser = ["js", "cosine", "correlation", "euclidean"])]
    sim: Option<String>,
    /// Override the strong-augmentation intensity (0..=4).
    #[arg(long)]
    aug_level: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(views) = self.views {
            cfg.views = views;
        }
        if let Some(sim) = &self.sim {
            cfg.sim_fn = SimFn::parse(sim)?;
        }
        if let Some(level) = self.aug_level {
            cfg.aug_level = level;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Materialize the dataset, split it, and write the run manifest.
    Prepare {
        #[command(flatten)]
        out: OutArg,
        /// Data spec: synthetic:<n>:<classes>, or a path to binary
        /// image batches.
        #[arg(long)]
        data: String,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train the target and shadow models (resumes from checkpoints).
    Train {
        #[command(flatten)]
        out: OutArg,
        /// Which model to train.
        #[arg(long, default_value = "both", value_parser = ["target", "shadow", "both"])]
        role: String,
    },
    /// Fit attacks on the shadow model and score the target model.
    Attack {
        #[command(flatten)]
        out: OutArg,
        /// Comma-separated attacks (nn, corr, conf, ent, ment, da) or "all".
        #[arg(long, default_value = "all")]
        attacks: String,
    },
    /// Re-evaluate attacks against a defended model.
    Defend {
        #[command(flatten)]
        out: OutArg,
        /// Defense: none, topk, stacking, dpsgd, early_stop.
        #[arg(long)]
        defense: String,
        /// Parameter for topk (kept classes) or stacking (member count).
        #[arg(long)]
        k: Option<usize>,
        /// Deployment step for early_stop.
        #[arg(long)]
        stop_step: Option<usize>,
        /// Comma-separated attacks or "all".
        #[arg(long, default_value = "all")]
        attacks: String,
    },
    /// Render tables and charts from completed stages.
    Report {
        #[command(flatten)]
        out: OutArg,
    },
}

fn parse_roles(role: &str) -> Vec<Role> {
    match role {
        "target" => vec![Role::Target],
        "shadow" => vec![Role::Shadow],
        _ => vec![Role::Target, Role::Shadow],
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare { out, data, config } => {
            let cfg = config.resolve()?;
            let source = DataSource::parse(&data)?;
            let manifest = cmd_prepare(&RunDir::new(out.out), &cfg, &source)?;
            println!("prepared run {}", manifest.run_id);
        }
        Command::Train { out, role } => {
            let dir = RunDir::new(out.out);
            cmd_train(&dir, &parse_roles(&role))?;
            println!("training complete");
        }
        Command::Attack { out, attacks } => {
            let kinds = AttackKind::parse_list(&attacks)?;
            let summary = cmd_attack(&RunDir::new(out.out), &kinds)?;
            for (name, m) in &summary.per_attack {
                println!("{name}: auc {:.4} balanced_acc {:.4}", m.auc, m.balanced_acc);
            }
        }
        Command::Defend { out, defense, k, stop_step, attacks } => {
            let kind = DefenseKind::parse(&defense, k, stop_step)?;
            let kinds = AttackKind::parse_list(&attacks)?;
            let summary = cmd_defend(&RunDir::new(out.out), kind, &kinds)?;
            println!(
                "defense {} utility {:.4}",
                summary.defense, summary.utility_test_acc
            );
            for (name, m) in &summary.per_attack {
                println!("{name}: auc {:.4} balanced_acc {:.4}", m.auc, m.balanced_acc);
            }
        }
        Command::Report { out } => {
            cmd_report(&RunDir::new(out.out))?;
            println!("report written");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // Cap worker threads when requested; useful for reproducing timing
    // behavior or running inside constrained containers.
    if let Ok(threads) = std::env::var("SEMILEAK_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: SEMILEAK_THREADS must be a positive integer");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let code = err.exit_code();
            ExitCode::from(u8::try_from(code).unwrap_or(1))
        }
    }
}
