use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mode_cli::{cmd_budget, cmd_compare, cmd_pca, cmd_train, BudgetArgs, CliResult, Overrides};
use mode_core::adapters::AdapterKind;
use mode_core::analysis::SliceKind;

#[derive(Parser)]
#[command(name = "mode", version, about = "Train and compare low-rank adapter mixtures on synthetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one adapter and write its checkpoint, run report and loss curve.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Train on a single task (0-based) instead of the mixture.
        #[arg(long)]
        task: Option<usize>,
    },
    /// Train several adapters on one mixture and tabulate win rates.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Project rank slices of LoRA checkpoints onto their principal components.
    Pca {
        /// Glob matching checkpoint JSON files.
        #[arg(long)]
        checkpoints: String,
        #[arg(long, default_value = "down")]
        kind: SliceKind,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Largest expert counts fitting a parameter budget.
    Budget {
        #[arg(long)]
        input_dim: usize,
        #[arg(long)]
        output_dim: usize,
        #[arg(long)]
        budget: u64,
        #[arg(long, value_delimiter = ',', default_value = "lora,molora,molora_sd,mode")]
        families: Vec<AdapterKind>,
        #[arg(long, value_delimiter = ',', required = true)]
        r_choices: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        p_choices: Vec<usize>,
        /// Non-embedding backbone size for percentages (default P*Q).
        #[arg(long)]
        backbone: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { config, out, seed, task } => {
            let s = cmd_train(&config, &Overrides { out, seed, task })?;
            println!("final eval loss {} -> {}", s.final_eval_loss, s.out_dir.display());
        }
        Command::Compare { config, out, seed } => {
            let s = cmd_compare(&config, &Overrides { out, seed, task: None })?;
            for v in &s.variants {
                println!("{:<32} params {:>8} ({:.2}%)  eval {}", v.name, v.total_params, v.percent, v.final_eval_loss);
            }
            println!("-> {}", s.out_dir.display());
        }
        Command::Pca { checkpoints, kind, k, out } => {
            let s = cmd_pca(&checkpoints, kind, k, &out)?;
            println!(
                "{} {} slices; separation by rank index {:?}, by task {:?}",
                s.num_points,
                kind.as_str(),
                s.separation_by_rank_index,
                s.separation_by_task
            );
        }
        Command::Budget {
            input_dim,
            output_dim,
            budget,
            families,
            r_choices,
            p_choices,
            backbone,
            out,
        } => {
            let args = BudgetArgs {
                input_dim,
                output_dim,
                budget,
                families,
                r_choices,
                p_choices,
                backbone,
            };
            let rows = cmd_budget(&args, &out)?;
            println!("{} feasible configurations -> {}", rows.len(), out.join("budget.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
