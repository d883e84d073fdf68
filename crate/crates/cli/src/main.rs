use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fairgen::config::RunConfig;
use fairgen::pipeline::{self, RunDir, SampleArgs, SampleVariant};
use fairgen::Error;

/// Debias a toy conditional diffusion model with rank-1 attribute adapters.
#[derive(Debug, Parser)]
#[command(name = "fairgen", version)]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the base seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Worker threads for sampling.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the base denoiser on the biased world.
    Pretrain {
        /// Continue from an existing checkpoint instead of a fresh initialisation.
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Train one adapter bank per debiased attribute.
    TrainAdapters {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Generate records, with adapters unless `--base` is given.
    Sample {
        #[arg(long)]
        base: bool,
        /// Records name; defaults to `base` or `fairgen`.
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory holding `<attribute>.bank` files.
        #[arg(long)]
        banks: Option<PathBuf>,
    },
    /// Score records with the oracle (fairness discrepancy and fidelity).
    Eval {
        #[arg(long, default_value = "fairgen")]
        name: String,
    },
    /// Collect evaluations of run directories into a benchmark table and charts.
    Report {
        /// Run directories; defaults to `--out`.
        runs: Vec<PathBuf>,
    },
    /// Compare analytic gradients with finite differences.
    GradCheck {
        #[arg(long, default_value_t = 4)]
        dim: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. }
        | Error::Distribution(_)
        | Error::Indicator(_)
        | Error::DuplicateAttribute(_)
        | Error::UnknownCondition(_)
        | Error::UnknownToken(_)
        | Error::UnknownGroup(_)
        | Error::UnknownAttribute(_)
        | Error::Timestep { .. }
        | Error::Locked(_) => 2,
        Error::ArchitectureMismatch(_)
        | Error::Format { .. }
        | Error::IncongruentBanks(_)
        | Error::TargetMismatch(_)
        | Error::AdapterShape { .. }
        | Error::IncompleteAdapter { .. }
        | Error::Dimension { .. }
        | Error::Json(_) => 3,
        Error::Divergence { .. } | Error::NonFinite { .. } => 4,
        Error::StaleTape | Error::Io(_) => 1,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    if cli.threads == 0 {
        return Err(Error::Config { key: "--threads".into(), message: "must be at least 1".into() });
    }
    if let Command::GradCheck { dim } = cli.command {
        let mut ok = true;
        for (name, report) in pipeline::cmd_grad_check(dim, cli.seed.unwrap_or(0))? {
            println!("[{name}]\n{report}");
            ok &= report.passed;
        }
        if !ok {
            return Err(Error::NonFinite { what: "gradient check mismatch".into(), step: 0 });
        }
        return Ok(());
    }
    if let Command::Report { runs } = &cli.command {
        let runs = if runs.is_empty() { vec![cli.out.clone()] } else { runs.clone() };
        let dir = RunDir::open(&cli.out)?;
        let table = pipeline::cmd_report(&dir, &runs)?;
        print!("{}", table.to_csv());
        return Ok(());
    }
    let cfg = load_config(&cli)?;
    let dir = RunDir::open(&cli.out)?;
    match &cli.command {
        Command::Pretrain { init_from } => {
            let s = pipeline::cmd_pretrain(&dir, &cfg, init_from.as_deref())?;
            println!(
                "checkpoint {} (config {}): held-out loss {:.4} -> {:.4}",
                s.checkpoint_hash, s.config_hash, s.heldout_first, s.heldout_last
            );
        }
        Command::TrainAdapters { checkpoint } => {
            for b in pipeline::cmd_train_adapters(&dir, &cfg, checkpoint.as_deref())? {
                println!(
                    "bank {} {}: orthogonality {:.3e} (random baseline {:.3e})",
                    b.attribute, b.bank_hash, b.orth, b.orth_baseline
                );
            }
        }
        Command::Sample { base, name, checkpoint, banks } => {
            let variant = if *base { SampleVariant::Base } else { SampleVariant::Debiased };
            let name = name.clone().unwrap_or_else(|| if *base { "base" } else { "fairgen" }.to_string());
            let s = pipeline::cmd_sample(
                &dir,
                &cfg,
                &SampleArgs {
                    variant,
                    name: &name,
                    checkpoint: checkpoint.as_deref(),
                    banks: banks.as_deref(),
                    threads: cli.threads,
                },
            )?;
            println!("{} records -> {}", s.n, s.records.display());
            for a in s.transferred {
                println!("warning: bank `{a}` was trained against a different checkpoint");
            }
        }
        Command::Eval { name } => {
            let r = pipeline::cmd_eval(&dir, &cfg, name)?;
            for f in &r.fd {
                println!(
                    "{}: FD {:.4} [{:.4}, {:.4}] mean posterior {:?}",
                    f.attribute, f.fd, f.ci[0], f.ci[1], f.mean_posterior
                );
            }
            match r.fidelity.mean {
                Some(v) => println!("fidelity (energy distance, lower is better): {v:.4}"),
                None => println!("fidelity: every component has too few samples to score"),
            }
        }
        Command::Report { .. } | Command::GradCheck { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
