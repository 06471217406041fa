//! Fixed-point quantization between real tensors and field matrices.
//!
//! Reals are scaled by `2^l`, rounded with the half-up rule, and embedded into
//! F_p (negatives are shifted by `p`). A bilinear product of two such values sits at
//! scale `2^(2l)`, so biases are quantized at that scale and products are brought
//! back with `Round(y * 2^-l) * 2^-l`. Exact recovery requires every decoded value
//! to stay below `p/2` in magnitude; [`overflow_budget`] is the guard for that.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{FieldError, FieldMatrix, Prime};

/// Real-valued tensor; inputs and activations are stored one sample per column.
pub type RealTensor = Array2<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("invalid quantization parameters: {0}")]
    InvalidParams(String),
    #[error("quantized magnitude {value} does not fit below p/2 = {half_p}")]
    OverflowBudget { value: f64, half_p: f64 },
    #[error("non-finite value in tensor")]
    NonFinite,
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Fractional bits `l` and prime `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantParams {
    frac_bits: u32,
    prime: Prime,
}

impl QuantParams {
    pub fn new(frac_bits: u32, prime: Prime) -> Result<Self, QuantError> {
        if frac_bits == 0 || frac_bits > 30 {
            return Err(QuantError::InvalidParams(format!(
                "l = {frac_bits} must be in 1..=30"
            )));
        }
        // a unit-magnitude product must be representable
        if 2u128 << (2 * frac_bits) >= prime.value() as u128 {
            return Err(QuantError::InvalidParams(format!(
                "2^(2l) = 2^{} is not below p/2 for p = {prime}",
                2 * frac_bits
            )));
        }
        Ok(QuantParams { frac_bits, prime })
    }

    /// l = 8 over 2^25 - 39.
    pub fn standard() -> Self {
        QuantParams {
            frac_bits: 8,
            prime: Prime::p25(),
        }
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn prime(&self) -> Prime {
        self.prime
    }

    /// `2^l` as a real.
    pub fn scale(&self) -> f64 {
        (1u64 << self.frac_bits) as f64
    }

    /// Quantization step `2^-l`.
    pub fn resolution(&self) -> f64 {
        1.0 / self.scale()
    }

    fn half_p(&self) -> f64 {
        self.prime.value() as f64 / 2.0
    }
}

/// Half-up rounding: `floor(x)` when the fractional part is below 0.5, else `floor(x) + 1`.
/// At negative half-integers this rounds toward +inf (`-1.5 -> -1`).
pub fn round_half_up(x: f64) -> i64 {
    let f = x.floor();
    if x - f < 0.5 {
        f as i64
    } else {
        f as i64 + 1
    }
}

fn quantize_scaled(x: &RealTensor, scale: f64, q: &QuantParams) -> Result<FieldMatrix, QuantError> {
    let p = q.prime;
    let half_p = q.half_p();
    let mut data = Vec::with_capacity(x.len());
    for &v in x.iter() {
        if !v.is_finite() {
            return Err(QuantError::NonFinite);
        }
        let scaled = v * scale;
        if scaled.abs() >= half_p + 1.0 {
            return Err(QuantError::OverflowBudget {
                value: scaled.abs(),
                half_p,
            });
        }
        let z = round_half_up(scaled);
        if (z.unsigned_abs() as f64) >= half_p {
            return Err(QuantError::OverflowBudget {
                value: z.unsigned_abs() as f64,
                half_p,
            });
        }
        data.push(p.embed_signed(z)?);
    }
    let (rows, cols) = x.dim();
    Ok(FieldMatrix::new(rows, cols, data, p)?)
}

/// `Field(Round(x * 2^l))`.
pub fn quantize(x: &RealTensor, q: &QuantParams) -> Result<FieldMatrix, QuantError> {
    quantize_scaled(x, q.scale(), q)
}

/// `Field(Round(b * 2^(2l)))`, so the bias lands on the scale of a product.
pub fn quantize_bias(b: &RealTensor, q: &QuantParams) -> Result<FieldMatrix, QuantError> {
    quantize_scaled(b, q.scale() * q.scale(), q)
}

/// Inverse of [`quantize`]: lift and multiply by `2^-l`.
pub fn dequantize(xq: &FieldMatrix, q: &QuantParams) -> RealTensor {
    dequantize_exact(xq, q.frac_bits)
}

/// Lift and multiply by `2^-bits` with no intermediate rounding.
pub fn dequantize_exact(xq: &FieldMatrix, bits: u32) -> RealTensor {
    let p = xq.prime();
    let inv = 1.0 / (1u128 << bits) as f64;
    let data = xq
        .data()
        .iter()
        .map(|&e| p.lift_signed(e) as f64 * inv)
        .collect();
    Array2::from_shape_vec(xq.shape(), data).expect("shape matches data")
}

/// Brings a product at scale `2^(2l)` back to reals: `Round(lift(y) * 2^-l) * 2^-l`.
pub fn dequantize_result(yq: &FieldMatrix, q: &QuantParams) -> RealTensor {
    let p = yq.prime();
    let step = q.resolution();
    let data = yq
        .data()
        .iter()
        .map(|&e| round_half_up(p.lift_signed(e) as f64 * step) as f64 * step)
        .collect();
    Array2::from_shape_vec(yq.shape(), data).expect("shape matches data")
}

/// Divides by the maximum absolute entry. An all-zero tensor is returned unchanged
/// with scale 1.
pub fn dynamic_normalize(x: &RealTensor) -> (RealTensor, f64) {
    let m = max_abs(x);
    if m == 0.0 {
        return (x.clone(), 1.0);
    }
    (x.mapv(|v| v / m), m)
}

pub fn max_abs(x: &RealTensor) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// True iff `n * round(x_bound 2^l) * round(w_bound 2^l) + 2^(2l) < p/2`, i.e. a sum of
/// `n_terms` products plus a unit bias cannot wrap around.
pub fn overflow_budget(q: &QuantParams, n_terms: usize, x_bound: f64, w_bound: f64) -> bool {
    if n_terms == 0 {
        return true;
    }
    fits_budget(q, n_terms, x_bound, w_bound, 1.0)
}

/// Generalized budget with an explicit bias bound at scale `2^(2l)`.
pub fn fits_budget(
    q: &QuantParams,
    n_terms: usize,
    x_bound: f64,
    w_bound: f64,
    bias_bound: f64,
) -> bool {
    let s = q.scale();
    let bias = round_half_up(bias_bound.abs() * s * s).unsigned_abs() as f64;
    if n_terms == 0 {
        return 2.0 * bias < q.prime.value() as f64;
    }
    let xq = round_half_up(x_bound.abs() * s).unsigned_abs() as u128;
    let wq = round_half_up(w_bound.abs() * s).unsigned_abs() as u128;
    let total = (n_terms as u128)
        .saturating_mul(xq)
        .saturating_mul(wq)
        .saturating_add(bias as u128);
    total.saturating_mul(2) < q.prime.value() as u128
}
