//! Command-line front end for the contrastive-prompt-ensemble pipeline.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 missing/unreadable input,
//! 3 validation failure. Errors print one machine-parsable line to stderr:
//! `error <CODE>: <message>`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use conpe::config::{load_config, RunConfig};
use conpe::error::ConpeError;
use conpe::harness::EmbeddingDumpMode;
use conpe::pipeline::{self, AblationKind, RunPaths, TrainArm};

#[derive(Parser)]
#[command(name = "conpe", about = "Contrastive prompt ensembles for zero-shot visual domain adaptation", version)]
struct Cli {
    /// path to the JSON run configuration
    #[arg(long, global = true, default_value = "conpe.json")]
    config: PathBuf,

    /// config overrides, path=value (repeatable)
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    overrides: Vec<String>,

    /// worker threads for parallel stages
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the domain split and the frozen encoder
    Gen,
    /// Collect expert demonstration datasets
    Collect,
    /// Train the per-factor visual prompt pool (and language prompts)
    TrainPrompts,
    /// Train a policy arm: conpe, control, or an ensemble variant
    TrainPolicy {
        #[arg(long, default_value = "conpe")]
        arm: String,
    },
    /// Adapt a frozen pretrained policy with a policy prompt
    Adapt {
        /// checkpoint arm to adapt (must exist)
        #[arg(long, default_value = "control")]
        base: String,
    },
    /// Evaluate a checkpoint over the split
    Eval {
        #[arg(long, default_value = "conpe")]
        arm: String,
    },
    /// Run an ablation sweep: ensemble_methods, prompt_count, or noise_scale
    Ablate {
        #[arg(long)]
        kind: String,
    },
    /// Dump the attention-weight matrix of one episode as CSV
    DumpAttn {
        #[arg(long, default_value = "conpe")]
        arm: String,
        #[arg(long, default_value_t = 0)]
        domain: usize,
        #[arg(long, default_value_t = 0)]
        episode_seed: u64,
    },
    /// Dump prompted embeddings as CSV (intra or inter mode)
    DumpEmb {
        #[arg(long, default_value = "intra")]
        mode: String,
        #[arg(long, default_value_t = 32)]
        max_items: usize,
    },
    /// Collate all reports and ablations into summary.json
    Report,
    /// Check a config file and list every violated invariant
    Validate,
}

fn load(cli: &Cli) -> Result<RunConfig, ConpeError> {
    load_config(&cli.config, &cli.overrides)
}

fn run(cli: &Cli) -> Result<(), ConpeError> {
    match &cli.command {
        Command::Gen => {
            let config = load(cli)?;
            config.validate()?;
            let paths = pipeline::cmd_gen(&config)?;
            println!("wrote {} and {}", paths.split().display(), paths.encoder().display());
        }
        Command::Collect => {
            let config = load(cli)?;
            config.validate()?;
            pipeline::cmd_collect(&config)?;
            println!("datasets written under {}", RunPaths::new(&config).root.display());
        }
        Command::TrainPrompts => {
            let config = load(cli)?;
            config.validate()?;
            pipeline::cmd_train_prompts(&config, cli.workers)?;
            println!("pool written to {}", RunPaths::new(&config).pool().display());
        }
        Command::TrainPolicy { arm } => {
            let config = load(cli)?;
            config.validate()?;
            let arm = TrainArm::parse(arm)?;
            pipeline::cmd_train_policy(&config, arm)?;
            println!(
                "checkpoint written to {}",
                RunPaths::new(&config).checkpoint(&arm.name()).display()
            );
        }
        Command::Adapt { base } => {
            let config = load(cli)?;
            config.validate()?;
            pipeline::cmd_adapt(&config, base)?;
            println!(
                "adapted checkpoint written to {}",
                RunPaths::new(&config).checkpoint("adapted").display()
            );
        }
        Command::Eval { arm } => {
            let config = load(cli)?;
            config.validate()?;
            let report = pipeline::cmd_eval(&config, arm)?;
            println!(
                "success source {:.3} seen {:.3} unseen {:.3} -> {}",
                report.source.success_mean,
                report.seen_target.success_mean,
                report.unseen_target.success_mean,
                RunPaths::new(&config).report(arm).display()
            );
        }
        Command::Ablate { kind } => {
            let config = load(cli)?;
            config.validate()?;
            let kind = AblationKind::parse(kind)?;
            let path = pipeline::cmd_ablate(&config, kind)?;
            println!("ablation written to {}", path.display());
        }
        Command::DumpAttn { arm, domain, episode_seed } => {
            let config = load(cli)?;
            config.validate()?;
            let path = pipeline::cmd_dump_attention(&config, arm, *domain, *episode_seed)?;
            println!("attention dump written to {}", path.display());
        }
        Command::DumpEmb { mode, max_items } => {
            let config = load(cli)?;
            config.validate()?;
            let mode = match mode.as_str() {
                "intra" => EmbeddingDumpMode::Intra,
                "inter" => EmbeddingDumpMode::Inter,
                other => return Err(ConpeError::Usage(format!("unknown dump mode {other}"))),
            };
            let path = pipeline::cmd_dump_embeddings(&config, mode, *max_items)?;
            println!("embedding dump written to {}", path.display());
        }
        Command::Report => {
            let config = load(cli)?;
            config.validate()?;
            let path = pipeline::cmd_report(&config)?;
            println!("summary written to {}", path.display());
        }
        Command::Validate => {
            let config = load(cli)?;
            let diags = config.diagnostics();
            if diags.is_empty() {
                println!("config ok");
            } else {
                for d in &diags {
                    println!("{}: {}", d.pointer, d.message);
                }
                return Err(ConpeError::Validation(format!(
                    "{} invariant(s) violated",
                    diags.len()
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error {}: {e}", e.code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
