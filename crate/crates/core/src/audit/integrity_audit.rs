//! Fault-injection trials through the full coordinator, plus an exhaustive count of
//! which two-worker corruptions can slip past the redundant share.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{instance_rng, uniform_tensor};
use crate::codec::integrity::{decode_with_verification, IntegrityCoeffs, Verdict};
use crate::codec::{combinations, CodecError, EncodingCoeffs};
use crate::exec::Parallelism;
use crate::field::{FieldMatrix, Prime};
use crate::quant::QuantParams;
use crate::trainer::{Coordinator, ModelState, Phase, TrainConfig, TrainError};
use crate::workers::{FaultPattern, FaultScope, WorkerBehavior};

const SUITE_SINGLE: u64 = 6;
const SUITE_HONEST: u64 = 7;
const SUITE_DOUBLE: u64 = 8;
const SUITE_ENUM: u64 = 9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntegrityAuditConfig {
    pub k: usize,
    pub m: usize,
    pub prime: Prime,
    pub frac_bits: u32,
    pub single_trials: usize,
    pub honest_trials: usize,
    pub double_trials: usize,
    /// Small prime for the exhaustive two-fault enumeration.
    pub enumeration_prime: u64,
    pub seed: u64,
    #[serde(skip)]
    pub mode: Parallelism,
}

impl Default for IntegrityAuditConfig {
    fn default() -> Self {
        IntegrityAuditConfig {
            k: 2,
            m: 1,
            prime: Prime::p25(),
            frac_bits: 8,
            single_trials: 1000,
            honest_trials: 1000,
            double_trials: 200,
            enumeration_prime: 11,
            seed: 0,
            mode: Parallelism::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeTally {
    pub scope: FaultScope,
    pub trials: usize,
    pub detected: usize,
    /// Caught in the pass the fault was injected into.
    pub phase_matched: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEnumeration {
    pub workers: Vec<usize>,
    pub offset_pairs: usize,
    pub undetected: usize,
    /// One offset ratio per pair cancels against the parity check: `p - 1` pairs.
    pub predicted_undetected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrityAuditReport {
    pub workers: usize,
    pub single: Vec<ScopeTally>,
    pub single_trials: usize,
    pub single_detected: usize,
    pub detection_rate: f64,
    pub honest_trials: usize,
    pub false_positives: usize,
    pub double_trials: usize,
    pub double_detected: usize,
    pub enumeration_prime: u64,
    pub enumeration: Vec<PairEnumeration>,
    pub enumeration_matches_prediction: bool,
    pub passed: bool,
}

struct Fault {
    worker: usize,
    scope: FaultScope,
    offset: u64,
    pattern: FaultPattern,
}

fn train_config(
    cfg: &IntegrityAuditConfig,
    behaviors: Vec<WorkerBehavior>,
) -> Result<TrainConfig, TrainError> {
    Ok(TrainConfig {
        k: cfg.k,
        m: cfg.m,
        workers: cfg.k + cfg.m + 1,
        integrity: true,
        large_batch: cfg.k,
        seed: cfg.seed,
        quant: QuantParams::new(cfg.frac_bits, cfg.prime)?,
        behaviors,
        parity_oracle: false,
        mode: Parallelism::Sequential,
        ..TrainConfig::default()
    })
}

/// One virtual-batch step of a small MLP; the phase of the violation, if any.
fn run_trial(
    cfg: &IntegrityAuditConfig,
    model: &ModelState,
    rng: &mut crate::seed::Rng,
    faults: &[Fault],
    batch: u64,
) -> Result<Option<Phase>, TrainError> {
    let mut behaviors = vec![WorkerBehavior::Honest; cfg.k + cfg.m + 1];
    for f in faults {
        behaviors[f.worker] = WorkerBehavior::Faulty {
            corrupt_probability: 1.0,
            offset: f.offset,
            pattern: f.pattern,
            scope: f.scope,
        };
    }
    let mut coord = Coordinator::new(&train_config(cfg, behaviors)?)?;
    let x = uniform_tensor(rng, model.input_dim(), cfg.k);
    let labels: Vec<usize> = (0..cfg.k).map(|_| rng.random_range(0..2)).collect();
    match coord.virtual_batch_step(model, &x, &labels, batch) {
        Ok(_) => Ok(None),
        Err(TrainError::IntegrityViolation { phase, .. }) => Ok(Some(phase)),
        Err(e) => Err(e),
    }
}

fn random_fault(
    rng: &mut crate::seed::Rng,
    cfg: &IntegrityAuditConfig,
    scope: FaultScope,
    exclude: Option<usize>,
) -> Fault {
    let total = cfg.k + cfg.m + 1;
    // plain products only ever go to workers 0 and 1
    let candidates: Vec<usize> = match scope {
        FaultScope::Plain => vec![0, 1],
        _ => (0..total).collect(),
    };
    let candidates: Vec<usize> = candidates
        .into_iter()
        .filter(|&w| Some(w) != exclude)
        .collect();
    let worker = candidates[rng.random_range(0..candidates.len())];
    let offset = rng.random_range(1..cfg.prime.value());
    let pattern = if rng.random_bool(0.5) {
        FaultPattern::FirstEntry
    } else {
        FaultPattern::AllEntries
    };
    Fault {
        worker,
        scope,
        offset,
        pattern,
    }
}

fn expected_phase(scope: FaultScope) -> Phase {
    match scope {
        FaultScope::Forward | FaultScope::All => Phase::Forward,
        FaultScope::Backward => Phase::Backward,
        FaultScope::Plain => Phase::InputGradient,
    }
}

const SCOPES: [FaultScope; 3] = [FaultScope::Forward, FaultScope::Backward, FaultScope::Plain];

fn single_fault_trials(
    cfg: &IntegrityAuditConfig,
    model: &ModelState,
) -> Result<Vec<ScopeTally>, TrainError> {
    let outcomes = cfg.mode.map_range(cfg.single_trials, |i| {
        let mut rng = instance_rng(cfg.seed, SUITE_SINGLE, 0, i as u64);
        let scope = SCOPES[i % SCOPES.len()];
        let fault = random_fault(&mut rng, cfg, scope, None);
        run_trial(cfg, model, &mut rng, &[fault], i as u64).map(|r| (scope, r))
    });
    let mut tallies: Vec<ScopeTally> = SCOPES
        .iter()
        .map(|&scope| ScopeTally {
            scope,
            trials: 0,
            detected: 0,
            phase_matched: 0,
        })
        .collect();
    for o in outcomes {
        let (scope, phase) = o?;
        let t = tallies
            .iter_mut()
            .find(|t| t.scope == scope)
            .expect("scope listed");
        t.trials += 1;
        t.detected += usize::from(phase.is_some());
        t.phase_matched += usize::from(phase == Some(expected_phase(scope)));
    }
    Ok(tallies)
}

fn honest_trials(cfg: &IntegrityAuditConfig, model: &ModelState) -> Result<usize, TrainError> {
    let outcomes = cfg.mode.map_range(cfg.honest_trials, |i| {
        let mut rng = instance_rng(cfg.seed, SUITE_HONEST, 0, i as u64);
        run_trial(cfg, model, &mut rng, &[], i as u64)
    });
    let mut fp = 0;
    for o in outcomes {
        fp += usize::from(o?.is_some());
    }
    Ok(fp)
}

/// Two faulty workers in the same pass, independent random offsets.
fn double_fault_trials(
    cfg: &IntegrityAuditConfig,
    model: &ModelState,
) -> Result<usize, TrainError> {
    let outcomes = cfg.mode.map_range(cfg.double_trials, |i| {
        let mut rng = instance_rng(cfg.seed, SUITE_DOUBLE, 0, i as u64);
        let scope = SCOPES[i % SCOPES.len()];
        let first = random_fault(&mut rng, cfg, scope, None);
        let second = random_fault(&mut rng, cfg, scope, Some(first.worker));
        run_trial(cfg, model, &mut rng, &[first, second], i as u64)
    });
    let mut detected = 0;
    for o in outcomes {
        detected += usize::from(o?.is_some());
    }
    Ok(detected)
}

/// Every pair of workers and every pair of nonzero offsets on one forward result.
pub fn enumerate_double_faults(
    cfg: &IntegrityAuditConfig,
) -> Result<Vec<PairEnumeration>, CodecError> {
    let p = Prime::new(cfg.enumeration_prime)?;
    let pv = p.value();
    let mut rng = instance_rng(cfg.seed, SUITE_ENUM, 0, 0);
    let c = EncodingCoeffs::generate(&mut rng, cfg.k, cfg.m, p)?;
    let ic = IntegrityCoeffs::generate(&mut rng, &c)?;
    let xq = FieldMatrix::random(&mut rng, 1, cfg.k, p);
    let noise = crate::codec::NoiseBlock::generate(&mut rng, 1, cfg.m, p);
    // with W = [1] the worker results are the shares themselves
    let honest = ic.encode(&xq, &noise)?.matrix().clone();
    let total = ic.total_shares();
    let mut out = Vec::new();
    for pair in combinations(total, 2) {
        let mut undetected = 0;
        for ea in 1..pv {
            for eb in 1..pv {
                let mut y = honest.clone();
                y.set(0, pair[0], p.add(y.get(0, pair[0]), ea));
                y.set(0, pair[1], p.add(y.get(0, pair[1]), eb));
                let (_, verdict) = decode_with_verification(&y, &ic)?;
                undetected += usize::from(verdict == Verdict::Clean);
            }
        }
        out.push(PairEnumeration {
            workers: pair,
            offset_pairs: ((pv - 1) * (pv - 1)) as usize,
            undetected,
            predicted_undetected: (pv - 1) as usize,
        });
    }
    Ok(out)
}

pub fn integrity_audit(cfg: &IntegrityAuditConfig) -> Result<IntegrityAuditReport, TrainError> {
    if cfg.k == 0 || cfg.m == 0 {
        return Err(TrainError::Config("K and M must be positive".into()));
    }
    let model = ModelState::mlp(3, 4, 2, 0.1, cfg.seed)?;
    let single = single_fault_trials(cfg, &model)?;
    let single_detected: usize = single.iter().map(|t| t.detected).sum();
    let false_positives = honest_trials(cfg, &model)?;
    let double_detected = double_fault_trials(cfg, &model)?;
    let enumeration = enumerate_double_faults(cfg)?;
    let enumeration_matches_prediction = enumeration
        .iter()
        .all(|e| e.undetected == e.predicted_undetected);
    let phase_ok = single.iter().all(|t| t.phase_matched == t.trials);
    let passed = single_detected == cfg.single_trials
        && phase_ok
        && false_positives == 0
        && double_detected == cfg.double_trials
        && enumeration_matches_prediction;
    Ok(IntegrityAuditReport {
        workers: cfg.k + cfg.m + 1,
        single,
        single_trials: cfg.single_trials,
        single_detected,
        detection_rate: if cfg.single_trials == 0 {
            1.0
        } else {
            single_detected as f64 / cfg.single_trials as f64
        },
        honest_trials: cfg.honest_trials,
        false_positives,
        double_trials: cfg.double_trials,
        double_detected,
        enumeration_prime: cfg.enumeration_prime,
        enumeration,
        enumeration_matches_prediction,
        passed,
    })
}
