//! Exact mutual information between colluding workers' shares and the inputs.
//!
//! At a small prime the whole input space `F_p^(N x K)` (uniform prior) and noise
//! space `F_p^(N x M)` can be enumerated. For a fixed coding matrix the joint
//! distribution of `(X, view)` is tabulated by counting, and the mutual information
//! is computed from integer counts. A term contributes exactly `0.0` whenever
//! `n(x, v) * n = n(x) * n(v)`, so perfect secrecy yields an exact zero.

use std::collections::HashMap;

use rand::Rng;

use super::{combinations, CodecError, EncodingCoeffs};
use crate::exec::Parallelism;
use crate::field::Prime;

/// Maximum number of noise states, and of input states, that will be enumerated.
pub const MI_STATE_LIMIT: u128 = 1_000_000;

/// Joint (input, noise) states allowed in one enumeration.
const JOINT_LIMIT: u128 = 20_000_000;

fn digits(mut idx: u64, p: u64, out: &mut [u64]) {
    for d in out.iter_mut() {
        *d = idx % p;
        idx /= p;
    }
}

/// Exact `I(X; shares_subset)` in bits for the given coefficients, with `X` uniform
/// over `F_p^(dim x K)` and the noise uniform over `F_p^(dim x M)`.
pub fn mutual_information_for_subset(
    c: &EncodingCoeffs,
    dim: usize,
    subset: &[usize],
    mode: Parallelism,
) -> Result<f64, CodecError> {
    let p = c.prime();
    let pv = p.value();
    let (k, m) = (c.k(), c.m());
    if subset.iter().any(|&j| j >= c.shares()) {
        return Err(CodecError::InvalidConfig(format!(
            "subset {subset:?} exceeds S = {}",
            c.shares()
        )));
    }
    let noise_states = (pv as u128)
        .checked_pow((m * dim) as u32)
        .unwrap_or(u128::MAX);
    let input_states = (pv as u128)
        .checked_pow((k * dim) as u32)
        .unwrap_or(u128::MAX);
    let view_space = (pv as u128)
        .checked_pow((subset.len() * dim) as u32)
        .unwrap_or(u128::MAX);
    for states in [noise_states, input_states] {
        if states > MI_STATE_LIMIT {
            return Err(CodecError::TooLarge {
                states,
                limit: MI_STATE_LIMIT,
            });
        }
    }
    let joint = noise_states * input_states;
    if joint > JOINT_LIMIT || view_space > u64::MAX as u128 {
        return Err(CodecError::TooLarge {
            states: joint,
            limit: JOINT_LIMIT,
        });
    }
    let a = c.a();

    // per-input histogram of views
    let per_input: Vec<HashMap<u64, u64>> = mode.map_range(input_states as usize, |xi| {
        let mut x = vec![0u64; dim * k];
        digits(xi as u64, pv, &mut x);
        let mut r = vec![0u64; dim * m];
        let mut hist = HashMap::new();
        for ri in 0..noise_states as u64 {
            digits(ri, pv, &mut r);
            let mut key = 0u64;
            for d in 0..dim {
                for &j in subset {
                    let mut acc = 0u128;
                    for i in 0..k {
                        acc += x[d * k + i] as u128 * a.get(i, j) as u128;
                    }
                    for t in 0..m {
                        acc += r[d * m + t] as u128 * a.get(k + t, j) as u128;
                    }
                    key = key * pv + (acc % pv as u128) as u64;
                }
            }
            *hist.entry(key).or_insert(0) += 1;
        }
        hist
    });

    let mut marginal: HashMap<u64, u64> = HashMap::new();
    for h in &per_input {
        for (&v, &n) in h {
            *marginal.entry(v).or_insert(0) += n;
        }
    }
    let total = joint as f64;
    let n_x = noise_states as f64;
    let mut mi = 0.0;
    for h in &per_input {
        let mut keys: Vec<&u64> = h.keys().collect();
        keys.sort_unstable();
        for v in keys {
            let n_xv = h[v] as f64;
            let n_v = marginal[v] as f64;
            let ratio = (n_xv * total) / (n_x * n_v);
            mi += (n_xv / total) * ratio.log2();
        }
    }
    // -0.0 or rounding noise below zero cannot be real information
    Ok(if mi <= 0.0 { 0.0 } else { mi })
}

/// Draws fresh coefficients at prime `p` and returns the largest exact mutual
/// information over all colluding subsets of `subset_size` shares.
pub fn exhaustive_mutual_information<R: Rng + ?Sized>(
    rng: &mut R,
    p: Prime,
    k: usize,
    m: usize,
    dim: usize,
    subset_size: usize,
) -> Result<f64, CodecError> {
    let c = EncodingCoeffs::generate(rng, k, m, p)?;
    if subset_size == 0 || subset_size > c.shares() {
        return Err(CodecError::InvalidConfig(format!(
            "subset size {subset_size} not in 1..={}",
            c.shares()
        )));
    }
    let mut worst: f64 = 0.0;
    for subset in combinations(c.shares(), subset_size) {
        worst = worst.max(mutual_information_for_subset(
            &c,
            dim,
            &subset,
            Parallelism::default(),
        )?);
    }
    Ok(worst)
}
