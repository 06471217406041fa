//! Stage timing of one offloaded dense layer (forward and weight gradient).
//!
//! Only the artifact's own pipeline is measured; times go in [`BenchTiming`], while
//! [`BenchReport`] holds the deterministic part (configuration and result digests).

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{instance_rng, uniform_tensor};
use crate::bilinear::Bilinear;
use crate::codec::{
    aggregate_gradient, decode_forward, encode, gen_backward_coeffs, CodecError, EncodingCoeffs,
    NoiseBlock,
};
use crate::exec::Parallelism;
use crate::field::{FieldMatrix, Prime};
use crate::quant::{quantize, QuantParams};
use crate::workers::{PoolError, WorkerPool};

const SUITE_BENCH: u64 = 10;

pub const STAGES: [&str; 6] = [
    "quantize",
    "encode",
    "forward_dispatch",
    "decode",
    "backward_dispatch",
    "aggregate",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchConfig {
    pub ks: Vec<usize>,
    pub m: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub warmup: usize,
    pub reps: usize,
    /// Independent measurement rounds, for the spread of the fractions.
    pub rounds: usize,
    pub prime: Prime,
    pub frac_bits: u32,
    pub seed: u64,
    #[serde(skip)]
    pub mode: Parallelism,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            ks: vec![1, 2, 4],
            m: 1,
            in_dim: 128,
            out_dim: 128,
            warmup: 3,
            reps: 20,
            rounds: 3,
            prime: Prime::p25(),
            frac_bits: 8,
            seed: 0,
            mode: Parallelism::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCase {
    pub k: usize,
    pub stages: Vec<String>,
    /// SHA-256 of the last repetition's decoded output and gradient.
    pub result_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub cases: Vec<BenchCase>,
    pub fractions_sum_to_one: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
    pub fraction: f64,
    /// Relative spread (std / mean) of this stage's fraction over the rounds.
    pub fraction_cv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingCase {
    pub k: usize,
    pub stages: Vec<StageTime>,
    pub fraction_sum: f64,
    pub encode_decode_fraction: f64,
    pub max_fraction_cv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTiming {
    pub cases: Vec<TimingCase>,
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error("{0}")]
    Config(String),
}

struct Layer {
    wq: FieldMatrix,
    x: crate::quant::RealTensor,
    delta: crate::quant::RealTensor,
}

/// One pass through all stages; adds elapsed time per stage into `acc`.
fn run_once(
    pool: &mut WorkerPool,
    c_rng: &mut crate::seed::Rng,
    layer: &Layer,
    k: usize,
    m: usize,
    q: &QuantParams,
    batch: u64,
    acc: &mut [Duration; 6],
) -> Result<Vec<u8>, BenchError> {
    let p = q.prime();
    let op = Bilinear::Dense {
        in_dim: layer.wq.cols(),
        out_dim: layer.wq.rows(),
    };
    let mut t = Instant::now();
    let mut lap = |acc: &mut [Duration; 6], i: usize| {
        acc[i] += t.elapsed();
        t = Instant::now();
    };
    let qerr = |e: crate::quant::QuantError| BenchError::Config(e.to_string());
    let xq = quantize(&layer.x, q).map_err(qerr)?;
    let dq = quantize(&layer.delta, q).map_err(qerr)?;
    lap(acc, 0);
    let coeffs = EncodingCoeffs::generate(c_rng, k, m, p)?;
    let noise = NoiseBlock::generate(c_rng, xq.rows(), m, p);
    let shares = encode(&xq, &noise, &coeffs)?.with_ids(batch, 0);
    lap(acc, 1);
    let ybar = FieldMatrix::hstack_all(&pool.dispatch_forward(&op, &layer.wq, &shares)?)
        .map_err(CodecError::from)?;
    lap(acc, 2);
    let y = decode_forward(&ybar, &coeffs)?;
    lap(acc, 3);
    let bc = gen_backward_coeffs(c_rng, &coeffs)?;
    let eqs = pool.dispatch_backward_eq(&op, &dq, bc.b(), batch, 0)?;
    lap(acc, 4);
    let g = aggregate_gradient(&eqs, &bc, k, q)?;
    lap(acc, 5);
    pool.release(batch);
    let mut h = Sha256::new();
    for v in y.data() {
        h.update(v.to_le_bytes());
    }
    for v in g.iter() {
        h.update(v.to_bits().to_le_bytes());
    }
    Ok(h.finalize().to_vec())
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn bench(cfg: &BenchConfig) -> Result<(BenchReport, BenchTiming), BenchError> {
    if cfg.reps == 0 || cfg.rounds == 0 || cfg.ks.is_empty() || cfg.m == 0 {
        return Err(BenchError::Config(
            "reps, rounds, M and the K list must be nonempty".into(),
        ));
    }
    let q = QuantParams::new(cfg.frac_bits, cfg.prime)
        .map_err(|e| BenchError::Config(e.to_string()))?;
    let mut cases = Vec::new();
    let mut timing = Vec::new();
    for (case, &k) in cfg.ks.iter().enumerate() {
        let mut rng = instance_rng(cfg.seed, SUITE_BENCH, case as u64, 0);
        let layer = Layer {
            wq: quantize(&uniform_tensor(&mut rng, cfg.out_dim, cfg.in_dim), &q)
                .map_err(|e| BenchError::Config(e.to_string()))?,
            x: uniform_tensor(&mut rng, cfg.in_dim, k),
            delta: uniform_tensor(&mut rng, cfg.out_dim, k),
        };
        let mut pool = WorkerPool::honest(k + cfg.m, cfg.seed, cfg.mode);
        pool.set_transcript_retention(false);
        let mut batch = 0u64;
        let mut digest = Vec::new();
        let mut per_round: Vec<[f64; 6]> = Vec::new();
        let mut total = [Duration::ZERO; 6];
        for _ in 0..cfg.warmup {
            let mut sink = [Duration::ZERO; 6];
            run_once(&mut pool, &mut rng, &layer, k, cfg.m, &q, batch, &mut sink)?;
            batch += 1;
        }
        for _ in 0..cfg.rounds {
            let mut acc = [Duration::ZERO; 6];
            for _ in 0..cfg.reps {
                digest = run_once(&mut pool, &mut rng, &layer, k, cfg.m, &q, batch, &mut acc)?;
                batch += 1;
            }
            let sum: f64 = acc
                .iter()
                .map(Duration::as_secs_f64)
                .sum::<f64>()
                .max(f64::MIN_POSITIVE);
            let mut frac = [0.0; 6];
            for (f, d) in frac.iter_mut().zip(&acc) {
                *f = d.as_secs_f64() / sum;
            }
            per_round.push(frac);
            for (t, d) in total.iter_mut().zip(acc) {
                *t += d;
            }
        }
        let sum: f64 = total
            .iter()
            .map(Duration::as_secs_f64)
            .sum::<f64>()
            .max(f64::MIN_POSITIVE);
        let stages: Vec<StageTime> = STAGES
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let fr: Vec<f64> = per_round.iter().map(|r| r[i]).collect();
                let (mean, std) = mean_std(&fr);
                StageTime {
                    stage: name.to_string(),
                    seconds: total[i].as_secs_f64(),
                    fraction: total[i].as_secs_f64() / sum,
                    fraction_cv: if mean > 0.0 { std / mean } else { 0.0 },
                }
            })
            .collect();
        let fraction_sum = stages.iter().map(|s| s.fraction).sum();
        let encode_decode_fraction = stages[1].fraction + stages[3].fraction;
        // tiny stages have noisy ratios; the spread is reported for stages above 5%
        let max_fraction_cv = stages
            .iter()
            .filter(|s| s.fraction >= 0.05)
            .map(|s| s.fraction_cv)
            .fold(0.0, f64::max);
        timing.push(TimingCase {
            k,
            stages,
            fraction_sum,
            encode_decode_fraction,
            max_fraction_cv,
        });
        cases.push(BenchCase {
            k,
            stages: STAGES.iter().map(|s| s.to_string()).collect(),
            result_digest: hex::encode(digest),
        });
    }
    let fractions_sum_to_one = timing.iter().all(|t| (t.fraction_sum - 1.0).abs() <= 0.01);
    Ok((
        BenchReport {
            cases,
            fractions_sum_to_one,
        },
        BenchTiming { cases: timing },
    ))
}
