//! Experiment driver: flat key=value configs, seeded subcommands, JSON reports.
//!
//! A report is `{schema_version, command, config, results, passed, timing}`. Everything
//! except `timing` is a pure function of the config, so two runs can be compared after
//! [`strip_timing`].

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use coded_offload::audit::bench::{bench, BenchConfig};
use coded_offload::audit::codec_check::{codec_check, CodecCheckConfig};
use coded_offload::audit::integrity_audit::{integrity_audit, IntegrityAuditConfig};
use coded_offload::audit::privacy_audit::{privacy_audit, PrivacyAuditConfig};
use coded_offload::exec::Parallelism;
use coded_offload::field::Prime;
use coded_offload::quant::QuantParams;
use coded_offload::trainer::data::DatasetSpec;
use coded_offload::trainer::{
    calibrate_model_tau, encoded_train_with_store, ModelState, SealStore, TrainConfig, TAU_TRIALS,
};
use coded_offload::workers::WorkerBehavior;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const SCHEMA_VERSION: u32 = 1;

/// Largest accuracy gap between encoded and plaintext training that still passes.
pub const ACCURACY_GAP_LIMIT: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid value {value:?} for {key}: {msg}")]
    Value {
        key: String,
        value: String,
        msg: String,
    },
    #[error("{0}")]
    Run(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn run_err<E: fmt::Display>(e: E) -> CliError {
    CliError::Run(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrimeChoice {
    #[serde(rename = "25bit")]
    Bits25,
    #[serde(rename = "large")]
    Large,
}

impl PrimeChoice {
    pub fn prime(self) -> Prime {
        match self {
            PrimeChoice::Bits25 => Prime::p25(),
            PrimeChoice::Large => Prime::large(),
        }
    }
}

impl FromStr for PrimeChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "25bit" => Ok(PrimeChoice::Bits25),
            "large" => Ok(PrimeChoice::Large),
            _ => Err("expected 25bit or large".into()),
        }
    }
}

/// Parses `on`/`off` (also `true`/`false`, `1`/`0`).
pub fn parse_switch(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err("expected on or off".into()),
    }
}

/// Everything a run depends on. `k`, `m` and `workers` left unset take per-command
/// defaults; `out_dir` is where reports go and is not part of the echoed config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub k: Option<usize>,
    pub m: Option<usize>,
    pub workers: Option<usize>,
    pub prime: PrimeChoice,
    pub frac_bits: u32,
    pub epochs: usize,
    pub seed: u64,
    pub integrity: bool,
    pub dataset: String,
    #[serde(skip)]
    pub out_dir: PathBuf,
    pub hidden: usize,
    pub lr: f64,
    pub large_batch: usize,
    pub instances: usize,
    pub max_dim: usize,
    pub constraint_generations: usize,
    pub samples: usize,
    pub significance: f64,
    pub single_trials: usize,
    pub honest_trials: usize,
    pub double_trials: usize,
    pub reps: usize,
    pub rounds: usize,
    /// Makes this worker corrupt every result (train only).
    pub faulty_worker: Option<usize>,
    /// Debug: build backward coefficients with a wrong constraint (codec-check only).
    pub mis_specified_constraint: bool,
    /// Write coding matrices, noise and shares as CSV next to the report.
    pub insecure_dump: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            k: None,
            m: None,
            workers: None,
            prime: PrimeChoice::Bits25,
            frac_bits: 8,
            epochs: 300,
            seed: 0,
            integrity: false,
            dataset: "xor:500".into(),
            out_dir: PathBuf::from("out"),
            hidden: 16,
            lr: 0.3,
            large_batch: 10,
            instances: 1000,
            max_dim: 32,
            constraint_generations: 10_000,
            samples: 100_000,
            significance: 0.01,
            single_trials: 1000,
            honest_trials: 1000,
            double_trials: 200,
            reps: 20,
            rounds: 3,
            faulty_worker: None,
            mis_specified_constraint: false,
            insecure_dump: false,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| CliError::Value {
        key: key.into(),
        value: value.into(),
        msg: e.to_string(),
    })
}

impl RunConfig {
    /// Keys accepted in config files, in documentation order.
    pub const KEYS: &'static [&'static str] = &[
        "k",
        "m",
        "workers",
        "prime",
        "frac_bits",
        "epochs",
        "seed",
        "integrity",
        "dataset",
        "out_dir",
        "hidden",
        "lr",
        "large_batch",
        "instances",
        "max_dim",
        "constraint_generations",
        "samples",
        "significance",
        "single_trials",
        "honest_trials",
        "double_trials",
        "reps",
        "rounds",
        "faulty_worker",
        "mis_specified_constraint",
        "insecure_dump",
    ];

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let switch = |v: &str| {
            parse_switch(v).map_err(|msg| CliError::Value {
                key: key.into(),
                value: v.into(),
                msg,
            })
        };
        match key {
            "k" => self.k = Some(parse_value(key, value)?),
            "m" => self.m = Some(parse_value(key, value)?),
            "workers" => self.workers = Some(parse_value(key, value)?),
            "prime" => self.prime = parse_value(key, value)?,
            "frac_bits" => self.frac_bits = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "integrity" => self.integrity = switch(value)?,
            "dataset" => self.dataset = value.to_string(),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "hidden" => self.hidden = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "large_batch" => self.large_batch = parse_value(key, value)?,
            "instances" => self.instances = parse_value(key, value)?,
            "max_dim" => self.max_dim = parse_value(key, value)?,
            "constraint_generations" => self.constraint_generations = parse_value(key, value)?,
            "samples" => self.samples = parse_value(key, value)?,
            "significance" => self.significance = parse_value(key, value)?,
            "single_trials" => self.single_trials = parse_value(key, value)?,
            "honest_trials" => self.honest_trials = parse_value(key, value)?,
            "double_trials" => self.double_trials = parse_value(key, value)?,
            "reps" => self.reps = parse_value(key, value)?,
            "rounds" => self.rounds = parse_value(key, value)?,
            "faulty_worker" => self.faulty_worker = Some(parse_value(key, value)?),
            "mis_specified_constraint" => self.mis_specified_constraint = switch(value)?,
            "insecure_dump" => self.insecure_dump = switch(value)?,
            other => {
                return Err(CliError::Value {
                    key: other.into(),
                    value: value.into(),
                    msg: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    /// Applies a config file: one `key = value` per line, `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CliError::Parse {
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| CliError::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file<P: AsRef<Path>>(path: P) -> Result<Self, CliError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    fn quant(&self) -> Result<QuantParams, CliError> {
        QuantParams::new(self.frac_bits, self.prime.prime()).map_err(run_err)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    CodecCheck,
    PrivacyAudit,
    IntegrityAudit,
    Train,
    Bench,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::CodecCheck => "codec-check",
            Command::PrivacyAudit => "privacy-audit",
            Command::IntegrityAudit => "integrity-audit",
            Command::Train => "train",
            Command::Bench => "bench",
        }
    }
}

/// A finished run: the report, whether every embedded check passed, a one-line
/// summary, and any extra files to write beside the report.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub report: Value,
    pub passed: bool,
    pub summary: String,
    pub files: Vec<(String, String)>,
}

fn envelope(
    cmd: Command,
    cfg: &RunConfig,
    results: Value,
    passed: bool,
    timing: Value,
) -> Result<Value, CliError> {
    Ok(json!({
        "schema_version": SCHEMA_VERSION,
        "command": cmd.name(),
        "config": serde_json::to_value(cfg)?,
        "results": results,
        "passed": passed,
        "timing": timing,
    }))
}

/// The report without its `timing` field.
pub fn strip_timing(mut report: Value) -> Value {
    if let Some(obj) = report.as_object_mut() {
        obj.remove("timing");
    }
    report
}

fn verdict(passed: bool) -> &'static str {
    if passed {
        "PASS"
    } else {
        "FAIL"
    }
}

pub fn run(cmd: Command, cfg: &RunConfig) -> Result<Outcome, CliError> {
    match cmd {
        Command::CodecCheck => cmd_codec_check(cfg),
        Command::PrivacyAudit => cmd_privacy_audit(cfg),
        Command::IntegrityAudit => cmd_integrity_audit(cfg),
        Command::Train => cmd_train(cfg),
        Command::Bench => cmd_bench(cfg),
    }
}

pub fn cmd_codec_check(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let start = Instant::now();
    let defaults = CodecCheckConfig::default();
    let check = CodecCheckConfig {
        ks: cfg.k.map_or(defaults.ks, |k| vec![k]),
        ms: cfg.m.map_or(defaults.ms, |m| vec![m]),
        max_dim: cfg.max_dim,
        instances: cfg.instances,
        constraint_generations: cfg.constraint_generations,
        prime: cfg.prime.prime(),
        frac_bits: cfg.frac_bits,
        seed: cfg.seed,
        mis_specified: cfg.mis_specified_constraint,
        dump_dir: cfg.insecure_dump.then(|| cfg.out_dir.join("dump")),
        mode: Parallelism::default(),
    };
    let r = codec_check(&check).map_err(run_err)?;
    let passed = r.total_failures == 0;
    let summary = format!(
        "codec-check: decode failures {} over {} configs, trace failures {}+{} (max rel err {:.2e}), constraint failures {}/{} {}",
        r.decode.iter().map(|c| c.failures).sum::<usize>(),
        r.decode.len(),
        r.trace.field_failures,
        r.trace.float_failures,
        r.trace.max_relative_error,
        r.constraint.failures,
        r.constraint.generations,
        verdict(passed)
    );
    let timing = json!({ "elapsed_seconds": start.elapsed().as_secs_f64() });
    Ok(Outcome {
        report: envelope(
            Command::CodecCheck,
            cfg,
            serde_json::to_value(&r)?,
            passed,
            timing,
        )?,
        passed,
        summary,
        files: vec![],
    })
}

pub fn cmd_privacy_audit(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let start = Instant::now();
    let defaults = PrivacyAuditConfig::default();
    let audit = PrivacyAuditConfig {
        max_k: cfg.k.unwrap_or(defaults.max_k),
        max_m: cfg.m.unwrap_or(defaults.max_m),
        prime: cfg.prime.prime(),
        samples: cfg.samples,
        significance: cfg.significance,
        seed: cfg.seed,
        ..defaults
    };
    let r = privacy_audit(&audit).map_err(run_err)?;
    let zero_cases = r
        .exact
        .iter()
        .filter(|c| c.expectation == coded_offload::audit::privacy_audit::Expectation::Zero)
        .count();
    let summary = format!(
        "privacy-audit: exact MI failures {}/{} ({} zero-leak subsets at 0.0 bits), chi-square rejections {}/{} (bound {}) {}",
        r.exact_failures,
        r.exact.len(),
        zero_cases,
        r.chi_rejections,
        r.chi_square.len(),
        r.chi_rejection_bound,
        verdict(r.passed)
    );
    let timing = json!({ "elapsed_seconds": start.elapsed().as_secs_f64() });
    let passed = r.passed;
    Ok(Outcome {
        report: envelope(
            Command::PrivacyAudit,
            cfg,
            serde_json::to_value(&r)?,
            passed,
            timing,
        )?,
        passed,
        summary,
        files: vec![],
    })
}

pub fn cmd_integrity_audit(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let start = Instant::now();
    let defaults = IntegrityAuditConfig::default();
    let audit = IntegrityAuditConfig {
        k: cfg.k.unwrap_or(defaults.k),
        m: cfg.m.unwrap_or(defaults.m),
        prime: cfg.prime.prime(),
        frac_bits: cfg.frac_bits,
        single_trials: cfg.single_trials,
        honest_trials: cfg.honest_trials,
        double_trials: cfg.double_trials,
        seed: cfg.seed,
        ..defaults
    };
    let r = integrity_audit(&audit).map_err(run_err)?;
    let summary = format!(
        "integrity-audit: detected {}/{} single faults, {} false positives in {} honest trials, {}/{} double faults {}",
        r.single_detected,
        r.single_trials,
        r.false_positives,
        r.honest_trials,
        r.double_detected,
        r.double_trials,
        verdict(r.passed)
    );
    let timing = json!({ "elapsed_seconds": start.elapsed().as_secs_f64() });
    let passed = r.passed;
    Ok(Outcome {
        report: envelope(
            Command::IntegrityAudit,
            cfg,
            serde_json::to_value(&r)?,
            passed,
            timing,
        )?,
        passed,
        summary,
        files: vec![],
    })
}

/// The training configuration a [`RunConfig`] describes.
pub fn train_config(cfg: &RunConfig) -> Result<TrainConfig, CliError> {
    let k = cfg.k.unwrap_or(2);
    let m = cfg.m.unwrap_or(1);
    let workers = cfg.workers.unwrap_or(k + m + usize::from(cfg.integrity));
    let mut behaviors = Vec::new();
    if let Some(j) = cfg.faulty_worker {
        if j >= workers {
            return Err(CliError::Run(format!(
                "faulty worker {j} outside a pool of {workers}"
            )));
        }
        behaviors = vec![WorkerBehavior::Honest; j];
        behaviors.push(WorkerBehavior::always_faulty(1));
    }
    Ok(TrainConfig {
        k,
        m,
        workers,
        integrity: cfg.integrity,
        epochs: cfg.epochs,
        large_batch: cfg.large_batch,
        seed: cfg.seed,
        quant: cfg.quant()?,
        behaviors,
        parity_oracle: true,
        mode: Parallelism::default(),
    })
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let start = Instant::now();
    let tc = train_config(cfg)?;
    let data = DatasetSpec::parse(&cfg.dataset)
        .map_err(run_err)?
        .load(cfg.seed)
        .map_err(run_err)?;
    let model = ModelState::mlp(data.features(), cfg.hidden, data.classes, cfg.lr, cfg.seed)
        .map_err(run_err)?;
    let tau = calibrate_model_tau(&model, &tc, TAU_TRIALS).map_err(run_err)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut store = SealStore::dir(cfg.out_dir.join("sealed")).map_err(run_err)?;
    let out = encoded_train_with_store(&model, &data, &tc, &mut store).map_err(run_err)?;
    let s = out.summary();
    let gap_ok = s.accuracy_gap <= ACCURACY_GAP_LIMIT;
    let parity_ok = s.max_grad_delta_scaled <= tau;
    let integrity_ok = s.integrity_violations == 0;
    let passed = gap_ok && parity_ok && integrity_ok;
    let results = json!({
        "summary": s,
        "tau": tau,
        "checks": {
            "accuracy_gap_within_limit": gap_ok,
            "gradient_parity_within_tau": parity_ok,
            "no_integrity_violations": integrity_ok,
        },
        "first_violation": out.first_violation,
        "transcript_digest": out.transcript_digest,
        "transcript_lines": out.transcript_lines,
        "ledger_records": out.ledger.len(),
    });
    let metrics = json!({ "schema_version": SCHEMA_VERSION, "epochs": out.metrics });
    let summary = format!(
        "train: acc_enc={:.4} acc_plain={:.4} gap={:.4} max_grad_delta={:.5} scaled={:.5} tau={:.5} violations={} {}",
        s.final_acc_enc,
        s.final_acc_plain,
        s.accuracy_gap,
        s.max_grad_delta,
        s.max_grad_delta_scaled,
        tau,
        s.integrity_violations,
        verdict(passed)
    );
    let timing = json!({ "elapsed_seconds": start.elapsed().as_secs_f64() });
    Ok(Outcome {
        report: envelope(Command::Train, cfg, results, passed, timing)?,
        passed,
        summary,
        files: vec![(
            "metrics.json".into(),
            serde_json::to_string_pretty(&metrics)? + "\n",
        )],
    })
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let start = Instant::now();
    let defaults = BenchConfig::default();
    let bc = BenchConfig {
        ks: cfg.k.map_or(defaults.ks.clone(), |k| vec![k]),
        m: cfg.m.unwrap_or(defaults.m),
        reps: cfg.reps,
        rounds: cfg.rounds,
        prime: cfg.prime.prime(),
        frac_bits: cfg.frac_bits,
        seed: cfg.seed,
        ..defaults
    };
    let (r, t) = bench(&bc).map_err(run_err)?;
    let passed = r.fractions_sum_to_one;
    let summary = format!(
        "bench: encode+decode fraction {} {}",
        t.cases
            .iter()
            .map(|c| format!("K={}:{:.3}", c.k, c.encode_decode_fraction))
            .collect::<Vec<_>>()
            .join(" "),
        verdict(passed)
    );
    let timing = json!({ "elapsed_seconds": start.elapsed().as_secs_f64(), "stages": t });
    Ok(Outcome {
        report: envelope(
            Command::Bench,
            cfg,
            serde_json::to_value(&r)?,
            passed,
            timing,
        )?,
        passed,
        summary,
        files: vec![],
    })
}

/// Writes `<command>.json` and any extra files into the configured output directory.
pub fn write_outcome(
    cmd: Command,
    cfg: &RunConfig,
    outcome: &Outcome,
) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join(format!("{}.json", cmd.name()));
    std::fs::write(&path, serde_json::to_string_pretty(&outcome.report)? + "\n")?;
    for (name, contents) in &outcome.files {
        std::fs::write(cfg.out_dir.join(name), contents)?;
    }
    Ok(path)
}
