//! Decode exactness, the gradient trace identity and the coefficient constraint,
//! each checked against an integer oracle that never touches the codec.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{instance_rng, integer_matmul, lifted_equals, uniform_tensor};
use crate::bilinear::Bilinear;
use crate::codec::{
    aggregate_gradient_field, decode_forward, dense_backward_equation, encode, gen_backward_coeffs,
    BackwardCoeffs, CodecError, EncodingCoeffs, NoiseBlock,
};
use crate::exec::Parallelism;
use crate::field::{FieldMatrix, Prime};
use crate::quant::{dequantize, dequantize_exact, fits_budget, quantize, QuantParams};
use crate::seed::Rng;

const SUITE_DECODE: u64 = 1;
const SUITE_TRACE: u64 = 2;
const SUITE_CONSTRAINT: u64 = 3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodecCheckConfig {
    pub ks: Vec<usize>,
    pub ms: Vec<usize>,
    pub max_dim: usize,
    /// Decode instances per (K, M) pair, and trace-identity instances in total.
    pub instances: usize,
    pub constraint_generations: usize,
    pub prime: Prime,
    pub frac_bits: u32,
    pub seed: u64,
    /// Builds `B` with `Γ` instead of `Γ^-1`; trace and constraint checks must then fail.
    pub mis_specified: bool,
    #[serde(skip)]
    pub dump_dir: Option<PathBuf>,
    #[serde(skip)]
    pub mode: Parallelism,
}

impl Default for CodecCheckConfig {
    fn default() -> Self {
        CodecCheckConfig {
            ks: vec![1, 2, 3, 4],
            ms: vec![1, 2],
            max_dim: 32,
            instances: 1000,
            constraint_generations: 10_000,
            prime: Prime::p25(),
            frac_bits: 8,
            seed: 0,
            mis_specified: false,
            dump_dir: None,
            mode: Parallelism::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeCase {
    pub k: usize,
    pub m: usize,
    pub instances: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub instances: usize,
    pub field_failures: usize,
    pub float_failures: usize,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSummary {
    pub generations: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecCheckReport {
    pub decode: Vec<DecodeCase>,
    pub trace: TraceSummary,
    pub constraint: ConstraintSummary,
    pub total_failures: usize,
}

/// Float replica tolerance, relative to the largest oracle entry.
pub const FLOAT_REL_TOL: f64 = 1e-9;

impl CodecCheckConfig {
    fn pairs(&self) -> Vec<(usize, usize)> {
        self.ks
            .iter()
            .flat_map(|&k| self.ms.iter().map(move |&m| (k, m)))
            .collect()
    }

    fn quant(&self) -> Result<QuantParams, CodecError> {
        let q = QuantParams::new(self.frac_bits, self.prime)
            .map_err(|e| CodecError::InvalidConfig(e.to_string()))?;
        // unit-range operands, the widest inner product is max_dim * K terms
        let widest = self.max_dim * self.ks.iter().copied().max().unwrap_or(1);
        if !fits_budget(&q, widest, 1.0, 1.0, 0.0) {
            return Err(CodecError::InvalidConfig(format!(
                "frac_bits {} overflows p for {widest}-term products",
                self.frac_bits
            )));
        }
        Ok(q)
    }

    fn validate(&self) -> Result<(), CodecError> {
        if self.ks.is_empty() || self.ms.is_empty() || self.max_dim == 0 {
            return Err(CodecError::InvalidConfig(
                "need at least one K, one M and max_dim >= 1".into(),
            ));
        }
        if self.ks.contains(&0) || self.ms.contains(&0) {
            return Err(CodecError::InvalidConfig("K and M must be positive".into()));
        }
        Ok(())
    }

    fn backward(&self, rng: &mut Rng, c: &EncodingCoeffs) -> Result<BackwardCoeffs, CodecError> {
        let bc = gen_backward_coeffs(rng, c)?;
        if !self.mis_specified {
            return Ok(bc);
        }
        let p = c.prime();
        let cols = c.a_inv().select_columns(&(0..c.k()).collect::<Vec<_>>());
        let b = FieldMatrix::diagonal(bc.gamma(), p).matmul(&cols)?;
        Ok(BackwardCoeffs::from_parts_unchecked(b, bc.gamma().to_vec()))
    }
}

struct DecodeInstance {
    coeffs: EncodingCoeffs,
    noise: NoiseBlock,
    shares: FieldMatrix,
    wq: FieldMatrix,
    decoded: FieldMatrix,
    ok: bool,
}

fn decode_instance(
    cfg: &CodecCheckConfig,
    q: &QuantParams,
    k: usize,
    m: usize,
    rng: &mut Rng,
) -> Result<DecodeInstance, CodecError> {
    use rand::Rng as _;
    let in_dim = rng.random_range(1..=cfg.max_dim);
    let out_dim = rng.random_range(1..=cfg.max_dim);
    let quantize = |t| quantize(&t, q).map_err(|e| CodecError::InvalidConfig(e.to_string()));
    let xq = quantize(uniform_tensor(rng, in_dim, k))?;
    let wq = quantize(uniform_tensor(rng, out_dim, in_dim))?;
    let coeffs = EncodingCoeffs::generate(rng, k, m, cfg.prime)?;
    let noise = NoiseBlock::generate(rng, in_dim, m, cfg.prime);
    let shares = encode(&xq, &noise, &coeffs)?;
    let ybar = Bilinear::Dense { in_dim, out_dim }.forward_field(&wq, shares.matrix())?;
    let decoded = decode_forward(&ybar, &coeffs)?;
    let ok = lifted_equals(&decoded, &integer_matmul(&wq.lift(), &xq.lift()));
    Ok(DecodeInstance {
        coeffs,
        noise,
        shares: shares.matrix().clone(),
        wq,
        decoded,
        ok,
    })
}

fn dump(
    dir: &std::path::Path,
    k: usize,
    m: usize,
    inst: &DecodeInstance,
) -> Result<(), CodecError> {
    std::fs::create_dir_all(dir).map_err(|e| CodecError::InvalidConfig(e.to_string()))?;
    let files = [
        ("a", inst.coeffs.a()),
        ("a_inv", inst.coeffs.a_inv()),
        ("noise", inst.noise.matrix()),
        ("shares", &inst.shares),
        ("w", &inst.wq),
        ("decoded", &inst.decoded),
    ];
    for (name, mat) in files {
        std::fs::write(dir.join(format!("k{k}_m{m}_{name}.csv")), mat.to_csv())
            .map_err(|e| CodecError::InvalidConfig(e.to_string()))?;
    }
    Ok(())
}

/// Decode exactness for every `(K, M)` pair: `decode_forward` must return `W X` with
/// no wraparound, compared as integers.
pub fn decode_exactness(cfg: &CodecCheckConfig) -> Result<Vec<DecodeCase>, CodecError> {
    cfg.validate()?;
    let q = cfg.quant()?;
    let mut cases = Vec::new();
    for (case, (k, m)) in cfg.pairs().into_iter().enumerate() {
        let results = cfg.mode.map_range(cfg.instances, |i| {
            let mut rng = instance_rng(cfg.seed, SUITE_DECODE, case as u64, i as u64);
            decode_instance(cfg, &q, k, m, &mut rng).map(|inst| inst.ok)
        });
        let mut failures = 0;
        for r in results {
            failures += usize::from(!r?);
        }
        if let (Some(dir), true) = (&cfg.dump_dir, cfg.instances > 0) {
            let mut rng = instance_rng(cfg.seed, SUITE_DECODE, case as u64, 0);
            dump(dir, k, m, &decode_instance(cfg, &q, k, m, &mut rng)?)?;
        }
        cases.push(DecodeCase {
            k,
            m,
            instances: cfg.instances,
            failures,
        });
    }
    Ok(cases)
}

/// `(field exact, float relative error)` for one trace-identity instance.
fn trace_instance(
    cfg: &CodecCheckConfig,
    q: &QuantParams,
    k: usize,
    m: usize,
    rng: &mut Rng,
) -> Result<(bool, f64), CodecError> {
    use rand::Rng as _;
    let in_dim = rng.random_range(1..=cfg.max_dim);
    let out_dim = rng.random_range(1..=cfg.max_dim);
    let quantize = |t| quantize(&t, q).map_err(|e| CodecError::InvalidConfig(e.to_string()));
    let xq = quantize(uniform_tensor(rng, in_dim, k))?;
    let dq = quantize(uniform_tensor(rng, out_dim, k))?;
    let coeffs = EncodingCoeffs::generate(rng, k, m, cfg.prime)?;
    let noise = NoiseBlock::generate(rng, in_dim, m, cfg.prime);
    let shares = encode(&xq, &noise, &coeffs)?;
    let bc = cfg.backward(rng, &coeffs)?;
    let eqs = (0..shares.len())
        .map(|j| dense_backward_equation(&dq, bc.beta_row(j), &shares.share(j)))
        .collect::<Result<Vec<_>, _>>()?;
    let sum = aggregate_gradient_field(&eqs, &bc)?;

    // sum_i δ_i x_i^T = D X^T over the integers
    let oracle = integer_matmul(&dq.lift(), &xq.transpose().lift());
    let exact = lifted_equals(&sum, &oracle);

    let (dr, xr) = (dequantize(&dq, q), dequantize(&xq, q));
    let float_oracle = dr.dot(&xr.t());
    let replica = dequantize_exact(&sum, 2 * q.frac_bits());
    let scale = float_oracle
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let err = (&replica - &float_oracle)
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs()))
        / scale;
    Ok((exact, err))
}

/// `sum_j γ_j Eq_j` against `sum_i δ_i x_i^T`, cycling through the `(K, M)` pairs.
pub fn trace_identity(cfg: &CodecCheckConfig) -> Result<TraceSummary, CodecError> {
    cfg.validate()?;
    let q = cfg.quant()?;
    let pairs = cfg.pairs();
    let results = cfg.mode.map_range(cfg.instances, |i| {
        let (k, m) = pairs[i % pairs.len()];
        let mut rng = instance_rng(cfg.seed, SUITE_TRACE, 0, i as u64);
        trace_instance(cfg, &q, k, m, &mut rng)
    });
    let mut summary = TraceSummary {
        instances: cfg.instances,
        field_failures: 0,
        float_failures: 0,
        max_relative_error: 0.0,
    };
    for r in results {
        let (exact, err) = r?;
        summary.field_failures += usize::from(!exact);
        summary.float_failures += usize::from(!(err <= FLOAT_REL_TOL));
        summary.max_relative_error = summary.max_relative_error.max(err);
    }
    Ok(summary)
}

/// `B^T Γ A^T == [I | 0]`, entry by entry in `i128`.
fn constraint_oracle(c: &EncodingCoeffs, bc: &BackwardCoeffs) -> bool {
    let p = c.prime().value() as i128;
    let (a, b, g) = (c.a(), bc.b(), bc.gamma());
    let s = c.shares();
    (0..c.k()).all(|i| {
        (0..s).all(|t| {
            let v: i128 = (0..s)
                .map(|j| b.get(j, i) as i128 * g[j] as i128 % p * a.get(t, j) as i128 % p)
                .sum::<i128>()
                % p;
            v == i128::from(i == t)
        })
    })
}

pub fn constraint_generations(cfg: &CodecCheckConfig) -> Result<ConstraintSummary, CodecError> {
    cfg.validate()?;
    let pairs = cfg.pairs();
    let results = cfg.mode.map_range(cfg.constraint_generations, |i| {
        let (k, m) = pairs[i % pairs.len()];
        let mut rng = instance_rng(cfg.seed, SUITE_CONSTRAINT, 0, i as u64);
        let c = EncodingCoeffs::generate(&mut rng, k, m, cfg.prime)?;
        let bc = cfg.backward(&mut rng, &c)?;
        Ok::<_, CodecError>(constraint_oracle(&c, &bc))
    });
    let mut failures = 0;
    for r in results {
        failures += usize::from(!r?);
    }
    Ok(ConstraintSummary {
        generations: cfg.constraint_generations,
        failures,
    })
}

pub fn codec_check(cfg: &CodecCheckConfig) -> Result<CodecCheckReport, CodecError> {
    let decode = decode_exactness(cfg)?;
    let trace = trace_identity(cfg)?;
    let constraint = constraint_generations(cfg)?;
    let total_failures = decode.iter().map(|c| c.failures).sum::<usize>()
        + trace.field_failures
        + trace.float_failures
        + constraint.failures;
    Ok(CodecCheckReport {
        decode,
        trace,
        constraint,
        total_failures,
    })
}
