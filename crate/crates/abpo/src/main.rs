//! Command-line driver for closed-loop bandit-update experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context as _, Result};
use clap::{Args, Parser, Subcommand};

use abpo::config::{self, ExperimentConfig};
use abpo::experiment;
use abpo::logging;
use abpo::metrics;
use abpo::optimizer::run_epoch;
use abpo::rng::{self, tag};
use abpo::synth;

#[derive(Parser)]
#[command(name = "abpo", about = "Anchored bandit policy optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key (repeatable), e.g. --set rounds=2.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Shorthand for --set mode=<MODE>.
    #[arg(long)]
    mode: Option<String>,
    /// Shorthand for --set rounds=<N>.
    #[arg(long)]
    rounds: Option<usize>,
    /// Shorthand for --set seeds=<LIST> (comma-separated).
    #[arg(long)]
    seeds: Option<String>,
    /// Shorthand for --set out_dir=<DIR>.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut overrides = Vec::new();
        for pair in &self.sets {
            let (key, value) = pair
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got '{pair}'"))?;
            overrides.push((key.to_string(), value.to_string()));
        }
        if let Some(mode) = &self.mode {
            overrides.push(("mode".into(), mode.clone()));
        }
        if let Some(rounds) = self.rounds {
            overrides.push(("rounds".into(), rounds.to_string()));
        }
        if let Some(seeds) = &self.seeds {
            overrides.push(("seeds".into(), seeds.clone()));
        }
        if let Some(out) = &self.out {
            overrides.push(("out_dir".into(), out.display().to_string()));
        }
        let (cfg, notices) = config::resolve(self.config.as_deref(), &overrides)?;
        for notice in notices {
            eprintln!("notice: {notice}");
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the full closed loop for every configured seed.
    Simulate(ConfigArgs),
    /// Supervised next-item initialization; writes a policy checkpoint.
    Init {
        #[command(flatten)]
        config: ConfigArgs,
        /// Where to write the fitted policy.
        #[arg(long)]
        out_policy: PathBuf,
    },
    /// Generate a bandit log under a stored policy.
    MakeLogs {
        #[command(flatten)]
        config: ConfigArgs,
        /// Logging policy checkpoint.
        #[arg(long)]
        policy: PathBuf,
        /// Where to write the log.
        #[arg(long)]
        out_log: PathBuf,
        /// Update-round tag recorded on every example.
        #[arg(long, default_value_t = 1)]
        round: usize,
    },
    /// Update a stored policy from a bandit log.
    Update {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out_policy: PathBuf,
    },
    /// Evaluate a stored policy on the held-out protocol.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        policy: PathBuf,
        /// Round label for the emitted metric rows.
        #[arg(long, default_value_t = 0)]
        round: usize,
    },
    /// Run the numerical verification grid; nonzero exit on any failure.
    VerifyTheory {
        /// Monte-Carlo draws per check.
        #[arg(long, default_value_t = 100_000)]
        num_draws: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Optional CSV report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Simulate(args) => {
            let cfg = args.resolve()?;
            let all = experiment::run_closed_loop(&cfg)?;
            for (seed, reports) in &all {
                for report in reports {
                    println!(
                        "seed {seed} round {}: hr1={:.4} hr5={:.4} ndcg5={:.4} div5={:.2} match_pos={:.4} match_neg={:.4}",
                        report.round,
                        report.hr1,
                        report.hr5,
                        report.ndcg5,
                        report.div5,
                        report.match_pos,
                        report.match_neg
                    );
                }
            }
            println!("wrote {}", cfg.out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Init { config, out_policy } => {
            let cfg = config.resolve()?;
            let seed = cfg.seeds[0];
            let seqs = synth::generate_sequences(&cfg.synth_config(), seed)?;
            let (policy, trace) = experiment::supervised_init(&seqs, &cfg, seed)?;
            experiment::save_policy(&policy, &out_policy)?;
            if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
                println!(
                    "mean log-likelihood {first:.4} -> {last:.4} over {} epochs",
                    trace.len()
                );
            }
            println!("wrote {}", out_policy.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::MakeLogs {
            config,
            policy,
            out_log,
            round,
        } => {
            let cfg = config.resolve()?;
            let seed = cfg.seeds[0];
            let policy = experiment::load_policy(&policy)?;
            let seqs = synth::generate_sequences(&cfg.synth_config(), seed)?;
            let log = logging::make_bandit_log(
                &policy,
                &seqs,
                cfg.candidate_size,
                cfg.temperature,
                round,
                rng::mix(seed, round as u64),
            )?;
            logging::write_log(&log, &out_log)?;
            let positives = log.examples.iter().filter(|ex| ex.y).count();
            println!(
                "wrote {} ({} examples, {positives} positive)",
                out_log.display(),
                log.examples.len()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Update {
            config,
            policy,
            log,
            out_policy,
        } => {
            let cfg = config.resolve()?;
            let seed = cfg.seeds[0];
            let mut current = experiment::load_policy(&policy)?;
            let log = logging::read_log(&log)?;
            let update_cfg = cfg.update_config();
            println!("{}", abpo::optimizer::EpochStats::csv_header());
            let round = log.examples.first().map_or(0, |ex| ex.round);
            for epoch in 0..cfg.epochs_per_round {
                let mut stream = rng::substream(seed, tag::GROUPS, epoch as u64);
                let (next, stats) = run_epoch(&current, &log, &update_cfg, &mut stream)?;
                current = next;
                println!("{}", stats.csv_row(round, epoch));
            }
            experiment::save_policy(&current, &out_policy)?;
            println!("wrote {}", out_policy.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            config,
            policy,
            round,
        } => {
            let cfg = config.resolve()?;
            let seed = cfg.seeds[0];
            let policy = experiment::load_policy(&policy)?;
            let seqs = synth::generate_sequences(&cfg.synth_config(), seed)?;
            let instances = experiment::build_eval_instances(&seqs, &cfg, seed)?;
            let pop = metrics::popularity_estimate(&seqs, cfg.catalog_size);
            let (hr1, hr5, ndcg5, div1, div5) =
                experiment::evaluate_policy(&policy, &instances, &pop)?;
            println!("round,metric,k,value");
            println!("{round},hr,1,{hr1}");
            println!("{round},hr,5,{hr5}");
            println!("{round},ndcg,5,{ndcg5}");
            println!("{round},div,1,{div1}");
            println!("{round},div,5,{div5}");
            Ok(ExitCode::SUCCESS)
        }
        Command::VerifyTheory {
            num_draws,
            seed,
            out,
        } => {
            let pass = experiment::verify_theory(num_draws, seed, out.as_deref())?;
            if pass {
                println!("all checks passed");
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("theory verification FAILED");
                Ok(ExitCode::FAILURE)
            }
        }
    }
}
