pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rankprompt_core::evaluator::MissPolicy;

use crate::commands::Part;
use crate::config::{BackendKind, Overrides, RunConfig};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "rankprompt",
    version,
    about = "Prompt optimization for LLM session recommenders"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub backend: Option<BackendKind>,
    #[arg(long, global = true)]
    pub model: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub beam: Option<usize>,
    #[arg(long, global = true)]
    pub pool_size: Option<usize>,
    #[arg(long, global = true)]
    pub parallelism: Option<usize>,
    /// Response cache file.
    #[arg(long, global = true)]
    pub cache: Option<PathBuf>,
    #[arg(long, global = true)]
    pub miss_policy: Option<MissPolicy>,
    #[arg(long, global = true)]
    pub mock_script: Option<PathBuf>,
    #[arg(long, global = true)]
    pub base_url: Option<String>,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            backend: self.backend,
            model: self.model.clone(),
            seed: self.seed,
            steps: self.steps,
            beam: self.beam,
            pool_size: self.pool_size,
            parallelism: self.parallelism,
            cache: self.cache.clone(),
            miss_policy: self.miss_policy,
            mock_script: self.mock_script.clone(),
            base_url: self.base_url.clone(),
        }
    }

    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        RunConfig::load(self.config.as_deref(), &self.overrides())
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a CSV interaction dump (session_id,timestamp,item_id,title) to session JSON lines.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        domain: String,
        #[arg(long)]
        output: PathBuf,
    },
    /// Optimize a ranking prompt on the training split.
    Optimize {
        /// Initial prompt; defaults to the shipped task description.
        #[arg(long)]
        prompt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize hybrid prompts from experts and select one on held-out sessions.
    Fuse {
        /// Expert prompt file; repeat for each expert. Defaults to the shipped experts.
        #[arg(long = "expert")]
        experts: Vec<PathBuf>,
        #[arg(long)]
        meta: Option<PathBuf>,
        /// Session file; repeat for each domain.
        #[arg(long = "data", required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a prompt and write a report, outcome log and diagnostics.
    Evaluate {
        #[arg(long)]
        prompt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Part,
        #[arg(long)]
        out: PathBuf,
        /// Baseline report to compute gains against.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Summarize parse validity and failure categories across reports.
    Diagnose {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Write the CSV here as well.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest {
            input,
            domain,
            output,
        } => {
            let stats = commands::cmd_ingest(&input, &domain, &output)?;
            println!(
                "{domain}: {} items, {} sessions, avg length {:.2}",
                stats.items, stats.sessions, stats.avg_length
            );
        }
        Command::Optimize { prompt, data, out } => {
            let config = cli.common.resolve()?;
            let outcome = commands::cmd_optimize(&config, prompt.as_deref(), &data, &out)?;
            println!(
                "best prompt {} (mean reward {:.4}) after {} steps",
                outcome.best.prompt_id,
                outcome.best_reward,
                outcome.history.len()
            );
        }
        Command::Fuse {
            experts,
            meta,
            data,
            out,
        } => {
            let config = cli.common.resolve()?;
            let result = commands::cmd_fuse(&config, &experts, meta.as_deref(), &data, &out)?;
            for s in &result.scored {
                println!(
                    "hybrid {:>2}: val NDCG {:.4}, HR@1 {:.4}",
                    s.index, s.val_score, s.val_hr1
                );
            }
            println!(
                "winner: hybrid {} ({:.4})",
                result.winner_index, result.winner_score
            );
        }
        Command::Evaluate {
            prompt,
            data,
            split,
            out,
            compare,
        } => {
            let config = cli.common.resolve()?;
            let artifact = commands::cmd_evaluate(
                &config,
                prompt.as_deref(),
                &data,
                split,
                &out,
                compare.as_deref(),
            )?;
            let r = &artifact.report;
            println!(
                "{}: {} sessions, {:.2}% valid",
                r.domain,
                r.n_sessions,
                r.valid_pct * 100.0
            );
            for p in &r.metrics {
                println!("HR@{k} {:.4}  NDCG@{k} {:.4}", p.hr, p.ndcg, k = p.k);
            }
            if let Some(g) = &artifact.gains {
                print!("{g}");
            }
        }
        Command::Diagnose { reports, out } => {
            print!("{}", commands::cmd_diagnose(&reports, out.as_deref())?);
        }
    }
    Ok(())
}
