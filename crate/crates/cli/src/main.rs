use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use coded_offload_cli::{parse_switch, run, write_outcome, Command, PrimeChoice, RunConfig};

#[derive(Parser)]
#[command(
    name = "coded-offload",
    version,
    about = "Coded linear offload: self-checks, audits, training and timing"
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,

    /// key = value config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Virtual batch size K.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Colluding workers tolerated.
    #[arg(long, global = true)]
    m: Option<usize>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, value_parser = clap::value_parser!(PrimeChoice))]
    prime: Option<PrimeChoice>,
    #[arg(long, global = true)]
    frac_bits: Option<u32>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// on | off
    #[arg(long, global = true, value_parser = parse_switch)]
    integrity: Option<bool>,
    /// two_gaussians[:N], xor[:N], moons[:N] or csv:PATH
    #[arg(long, global = true)]
    dataset: Option<String>,
    /// Output directory for reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dump coding matrices, noise and shares as CSV (reveals secrets).
    #[arg(long, global = true)]
    insecure_dump: bool,
    /// Instances per codec-check configuration.
    #[arg(long, global = true)]
    instances: Option<usize>,
    /// Samples per chi-square test.
    #[arg(long, global = true)]
    samples: Option<usize>,
    /// Single-fault and honest trials in integrity-audit.
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Worker index that corrupts every result during train.
    #[arg(long, global = true)]
    faulty_worker: Option<usize>,
    /// Debug: use a wrong backward-coefficient constraint; codec-check must fail.
    #[arg(long, global = true, hide = true)]
    mis_specified_constraint: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Sub {
    /// Decode exactness, trace identity and coefficient constraint suites.
    CodecCheck,
    /// Exact mutual information at small primes, share uniformity at the working prime.
    PrivacyAudit,
    /// Fault-injection detection and false-positive rates.
    IntegrityAudit,
    /// Encoded and plaintext training on the same seed.
    Train,
    /// Per-stage time fractions of the offload pipeline.
    Bench,
}

impl Cli {
    fn run_config(&self) -> Result<RunConfig, coded_offload_cli::CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        cfg.seed = self.seed.unwrap_or(cfg.seed);
        cfg.k = self.k.or(cfg.k);
        cfg.m = self.m.or(cfg.m);
        cfg.workers = self.workers.or(cfg.workers);
        cfg.prime = self.prime.unwrap_or(cfg.prime);
        cfg.frac_bits = self.frac_bits.unwrap_or(cfg.frac_bits);
        cfg.epochs = self.epochs.unwrap_or(cfg.epochs);
        cfg.integrity = self.integrity.unwrap_or(cfg.integrity);
        cfg.dataset = self.dataset.clone().unwrap_or(cfg.dataset);
        cfg.out_dir = self.out.clone().unwrap_or(cfg.out_dir);
        cfg.insecure_dump |= self.insecure_dump;
        cfg.instances = self.instances.unwrap_or(cfg.instances);
        cfg.samples = self.samples.unwrap_or(cfg.samples);
        if let Some(t) = self.trials {
            cfg.single_trials = t;
            cfg.honest_trials = t;
        }
        cfg.faulty_worker = self.faulty_worker.or(cfg.faulty_worker);
        cfg.mis_specified_constraint |= self.mis_specified_constraint;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cmd = match cli.command {
        Sub::CodecCheck => Command::CodecCheck,
        Sub::PrivacyAudit => Command::PrivacyAudit,
        Sub::IntegrityAudit => Command::IntegrityAudit,
        Sub::Train => Command::Train,
        Sub::Bench => Command::Bench,
    };
    let result = cli.run_config().and_then(|cfg| {
        let outcome = run(cmd, &cfg)?;
        let path = write_outcome(cmd, &cfg, &outcome)?;
        Ok((outcome, path))
    });
    match result {
        Ok((outcome, path)) => {
            println!("{}", outcome.summary);
            println!("report: {}", path.display());
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
