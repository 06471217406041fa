//! Coordinator-side encoding and decoding.
//!
//! A virtual batch of `K` quantized inputs (columns of `X`) is mixed with `M` uniform
//! noise columns `R` into `S = K + M` shares, `X̄ = [X | R] A`. Any bilinear map with a
//! fixed left operand commutes with the mixing, so `W X̄ A^-1 = [W X | W R]`.
//!
//! For weight gradients each worker `j` returns `Eq_j = <sum_i β_{j,i} δ_i, x̄_j>` and
//! the coordinator sums `γ_j Eq_j`; the coefficients satisfy `Bᵀ Γ Aᵀ = [I_K | 0]`,
//! which makes the weighted sum collapse to `sum_i <δ_i, x_i>` exactly over F_p.

pub mod integrity;
pub mod privacy;

pub use integrity::{
    decode_with_verification, extend_for_integrity, extend_with_column, IntegrityCoeffs,
    SubsetBackward, Verdict,
};
pub use privacy::{exhaustive_mutual_information, mutual_information_for_subset, MI_STATE_LIMIT};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{FieldError, FieldMatrix, Prime, MAX_RESAMPLES};
use crate::quant::{dequantize_exact, QuantError, QuantParams, RealTensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("coefficient generation failed after {attempts} attempts")]
    GenerationFailure { attempts: usize },
    #[error("enumeration of {states} states exceeds the limit of {limit}")]
    TooLarge { states: u128, limit: u128 },
}

/// Secret mixing matrix for one layer of one virtual batch.
///
/// Rows `0..K` form `A₁` (data coefficients), rows `K..S` form `A₂` (noise coefficients).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingCoeffs {
    k: usize,
    m: usize,
    a: FieldMatrix,
    a_inv: FieldMatrix,
}

/// Every `M`-column submatrix of `A₂` is nonsingular, so any set of at most `M`
/// shares carries a full-rank noise component.
pub(crate) fn noise_rows_are_mds(a2: &FieldMatrix) -> bool {
    let m = a2.rows();
    let s = a2.cols();
    if m > s {
        return false;
    }
    combinations(s, m)
        .iter()
        .all(|cols| a2.select_columns(cols).rank() == m)
}

/// All `r`-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, r: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if r > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..r).collect();
    loop {
        out.push(idx.clone());
        let mut i = r;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + n - r {
                break;
            }
            if i == 0 && idx[0] == n - r {
                return out;
            }
        }
        idx[i] += 1;
        for j in i + 1..r {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

impl EncodingCoeffs {
    /// Draws `A` uniformly, resampling until it is invertible and every `M`-column
    /// block of `A₂` is nonsingular.
    pub fn generate<R: Rng + ?Sized>(
        rng: &mut R,
        k: usize,
        m: usize,
        prime: Prime,
    ) -> Result<Self, CodecError> {
        if k == 0 || m == 0 {
            return Err(CodecError::InvalidConfig(format!(
                "K = {k} and M = {m} must both be >= 1"
            )));
        }
        let s = k + m;
        for _ in 0..MAX_RESAMPLES {
            let a = FieldMatrix::random(rng, s, s, prime);
            let Ok(a_inv) = a.inverse() else { continue };
            let a2 = a.select_rows(&(k..s).collect::<Vec<_>>());
            if !noise_rows_are_mds(&a2) {
                continue;
            }
            return Ok(EncodingCoeffs { k, m, a, a_inv });
        }
        Err(CodecError::GenerationFailure {
            attempts: MAX_RESAMPLES,
        })
    }

    /// Wraps a caller-chosen `A`; requires invertibility and `rank(A₂) = M`.
    pub fn from_matrix(a: FieldMatrix, k: usize, m: usize) -> Result<Self, CodecError> {
        if k == 0 || m == 0 || a.shape() != (k + m, k + m) {
            return Err(CodecError::InvalidConfig(format!(
                "A must be {0}x{0} with K, M >= 1, got {1:?}",
                k + m,
                a.shape()
            )));
        }
        let a_inv = a.inverse()?;
        let a2 = a.select_rows(&(k..k + m).collect::<Vec<_>>());
        if a2.rank() != m {
            return Err(CodecError::InvalidConfig("A2 is not full rank".into()));
        }
        Ok(EncodingCoeffs { k, m, a, a_inv })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Share count `S = K + M`.
    pub fn shares(&self) -> usize {
        self.k + self.m
    }

    pub fn prime(&self) -> Prime {
        self.a.prime()
    }

    pub fn a(&self) -> &FieldMatrix {
        &self.a
    }

    pub fn a_inv(&self) -> &FieldMatrix {
        &self.a_inv
    }

    pub fn a1(&self) -> FieldMatrix {
        self.a.select_rows(&(0..self.k).collect::<Vec<_>>())
    }

    pub fn a2(&self) -> FieldMatrix {
        self.a
            .select_rows(&(self.k..self.shares()).collect::<Vec<_>>())
    }

    /// Whether every `M`-column block of `A₂` is nonsingular.
    pub fn noise_is_mds(&self) -> bool {
        noise_rows_are_mds(&self.a2())
    }
}

/// `N x M` block of uniform noise columns; never leaves the coordinator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoiseBlock(FieldMatrix);

impl NoiseBlock {
    pub fn generate<R: Rng + ?Sized>(rng: &mut R, n: usize, m: usize, prime: Prime) -> Self {
        NoiseBlock(FieldMatrix::random(rng, n, m, prime))
    }

    pub fn from_matrix(r: FieldMatrix) -> Self {
        NoiseBlock(r)
    }

    pub fn matrix(&self) -> &FieldMatrix {
        &self.0
    }
}

/// Encoded shares of one layer input; share `j` is column `j` and goes to worker `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShareSet {
    encoded: FieldMatrix,
    pub batch_id: u64,
    pub layer_id: usize,
}

impl ShareSet {
    pub fn new(encoded: FieldMatrix, batch_id: u64, layer_id: usize) -> Self {
        ShareSet {
            encoded,
            batch_id,
            layer_id,
        }
    }

    pub fn len(&self) -> usize {
        self.encoded.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.encoded.cols() == 0
    }

    /// Share dimension `N`.
    pub fn dim(&self) -> usize {
        self.encoded.rows()
    }

    pub fn share(&self, j: usize) -> FieldMatrix {
        self.encoded.column(j)
    }

    /// All shares side by side (`N x S`).
    pub fn matrix(&self) -> &FieldMatrix {
        &self.encoded
    }

    pub fn with_ids(mut self, batch_id: u64, layer_id: usize) -> Self {
        self.batch_id = batch_id;
        self.layer_id = layer_id;
        self
    }
}

/// Public `B` (`S x K`, entries `β_{j,i}`) and secret diagonal `Γ`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackwardCoeffs {
    b: FieldMatrix,
    gamma: Vec<u64>,
}

impl BackwardCoeffs {
    pub fn b(&self) -> &FieldMatrix {
        &self.b
    }

    pub fn gamma(&self) -> &[u64] {
        &self.gamma
    }

    /// Row `j` of `B`: the coefficients worker `j` applies to the deltas.
    pub fn beta_row(&self, j: usize) -> &[u64] {
        self.b.row(j)
    }

    /// Assembles coefficients without checking the constraint; for harness sanity runs.
    pub fn from_parts_unchecked(b: FieldMatrix, gamma: Vec<u64>) -> Self {
        BackwardCoeffs { b, gamma }
    }

    /// Test hook: perturbs one β entry by +1.
    pub fn perturbed(&self, j: usize, i: usize) -> Self {
        let mut out = self.clone();
        let p = out.b.prime();
        let v = p.add(out.b.get(j, i), 1);
        out.b.set(j, i, v);
        out
    }
}

fn check_prime(m: &FieldMatrix, p: Prime, what: &str) -> Result<(), CodecError> {
    if m.prime() != p {
        return Err(CodecError::ShapeMismatch(format!(
            "{what} uses prime {} instead of {p}",
            m.prime()
        )));
    }
    Ok(())
}

/// `X̄ = [Xq | R] A`.
pub fn encode(
    xq: &FieldMatrix,
    r: &NoiseBlock,
    c: &EncodingCoeffs,
) -> Result<ShareSet, CodecError> {
    let r = r.matrix();
    check_prime(xq, c.prime(), "input")?;
    check_prime(r, c.prime(), "noise")?;
    if xq.cols() != c.k || r.cols() != c.m || xq.rows() != r.rows() {
        return Err(CodecError::ShapeMismatch(format!(
            "input {:?} and noise {:?} do not fit K = {}, M = {}",
            xq.shape(),
            r.shape(),
            c.k,
            c.m
        )));
    }
    let stacked = xq.hstack(r)?;
    Ok(ShareSet::new(stacked.matmul(&c.a)?, 0, 0))
}

/// `Ȳ A^-1`, keeping the first `K` columns; the noise products `W R` are dropped.
pub fn decode_forward(ybar: &FieldMatrix, c: &EncodingCoeffs) -> Result<FieldMatrix, CodecError> {
    Ok(decode_full(ybar, c)?.select_columns(&(0..c.k).collect::<Vec<_>>()))
}

/// `Ȳ A^-1` with all `S` columns (data products followed by noise products).
pub fn decode_full(ybar: &FieldMatrix, c: &EncodingCoeffs) -> Result<FieldMatrix, CodecError> {
    check_prime(ybar, c.prime(), "results")?;
    if ybar.cols() != c.shares() {
        return Err(CodecError::ShapeMismatch(format!(
            "expected {} result columns, got {}",
            c.shares(),
            ybar.cols()
        )));
    }
    Ok(ybar.matmul(&c.a_inv)?)
}

fn random_nonzero<R: Rng + ?Sized>(rng: &mut R, p: Prime) -> u64 {
    rng.random_range(1..p.value())
}

/// `B = Γ^-1 · (first K columns of A^-1)` for a square `A` with known inverse.
fn backward_from_inverse(
    a_inv: &FieldMatrix,
    k: usize,
    gamma: Vec<u64>,
) -> Result<BackwardCoeffs, CodecError> {
    let p = a_inv.prime();
    let s = a_inv.rows();
    if gamma.len() != s || gamma.iter().any(|&g| g % p.value() == 0) {
        return Err(CodecError::InvalidConfig(
            "Γ must have S nonzero entries".into(),
        ));
    }
    let inv_gamma: Vec<u64> = gamma.iter().map(|&g| p.inv(g)).collect::<Result<_, _>>()?;
    let cols = a_inv.select_columns(&(0..k).collect::<Vec<_>>());
    let b = FieldMatrix::diagonal(&inv_gamma, p).matmul(&cols)?;
    Ok(BackwardCoeffs { b, gamma })
}

/// Checks `Bᵀ Γ Aᵀ = [I_K | 0]` for a square coding matrix `a`.
pub(crate) fn constraint_holds(a: &FieldMatrix, k: usize, bc: &BackwardCoeffs) -> bool {
    let p = a.prime();
    let s = a.rows();
    if bc.b.shape() != (s, k) || bc.gamma.len() != s || bc.gamma.contains(&0) || bc.b.prime() != p {
        return false;
    }
    let lhs =
        bc.b.transpose()
            .matmul(&FieldMatrix::diagonal(&bc.gamma, p))
            .and_then(|m| m.matmul(&a.transpose()));
    matches!(lhs, Ok(m) if m == FieldMatrix::selector(k, s, p))
}

/// Fresh random nonzero `Γ` and the matching `B`.
pub fn gen_backward_coeffs<R: Rng + ?Sized>(
    rng: &mut R,
    c: &EncodingCoeffs,
) -> Result<BackwardCoeffs, CodecError> {
    let p = c.prime();
    let gamma = (0..c.shares()).map(|_| random_nonzero(rng, p)).collect();
    let bc = backward_from_inverse(&c.a_inv, c.k, gamma)?;
    if !constraint_holds(&c.a, c.k, &bc) {
        return Err(CodecError::GenerationFailure { attempts: 1 });
    }
    Ok(bc)
}

/// `B` for a caller-chosen `Γ`.
pub fn backward_coeffs_with_gamma(
    c: &EncodingCoeffs,
    gamma: Vec<u64>,
) -> Result<BackwardCoeffs, CodecError> {
    let bc = backward_from_inverse(&c.a_inv, c.k, gamma)?;
    if !constraint_holds(&c.a, c.k, &bc) {
        return Err(CodecError::GenerationFailure { attempts: 1 });
    }
    Ok(bc)
}

pub fn verify_coeff_constraint(c: &EncodingCoeffs, bc: &BackwardCoeffs) -> bool {
    constraint_holds(&c.a, c.k, bc)
}

/// `sum_j γ_j Eq_j` over F_p.
pub fn aggregate_gradient_field(
    eqs: &[FieldMatrix],
    bc: &BackwardCoeffs,
) -> Result<FieldMatrix, CodecError> {
    if eqs.len() != bc.gamma.len() {
        return Err(CodecError::ShapeMismatch(format!(
            "{} worker equations for {} coefficients",
            eqs.len(),
            bc.gamma.len()
        )));
    }
    let first = eqs
        .first()
        .ok_or_else(|| CodecError::ShapeMismatch("no worker equations".into()))?;
    let mut acc = FieldMatrix::zeros(first.rows(), first.cols(), first.prime());
    for (eq, &g) in eqs.iter().zip(&bc.gamma) {
        if eq.shape() != first.shape() {
            return Err(CodecError::ShapeMismatch(format!(
                "equation shapes {:?} vs {:?}",
                eq.shape(),
                first.shape()
            )));
        }
        acc = acc.add(&eq.scale(g))?;
    }
    Ok(acc)
}

/// Decoded average gradient `(1/K) sum_i <δ_i, x_i>`: field sum, lift, scale by
/// `2^(-2l)`, then divide by `K` in real arithmetic.
pub fn aggregate_gradient(
    eqs: &[FieldMatrix],
    bc: &BackwardCoeffs,
    k: usize,
    q: &QuantParams,
) -> Result<RealTensor, CodecError> {
    let sum = aggregate_gradient_field(eqs, bc)?;
    Ok(dequantize_exact(&sum, 2 * q.frac_bits()) / k as f64)
}

/// Worker-side equation for a dense layer: `(δ β_j)` outer `x̄_j`.
pub fn dense_backward_equation(
    delta_q: &FieldMatrix,
    beta_row: &[u64],
    share: &FieldMatrix,
) -> Result<FieldMatrix, CodecError> {
    let p = delta_q.prime();
    let beta = FieldMatrix::new(beta_row.len(), 1, beta_row.to_vec(), p)?;
    let mixed = delta_q.matmul(&beta)?;
    Ok(mixed.matmul(&share.transpose())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;

    fn p11() -> Prime {
        Prime::new(11).unwrap()
    }

    fn running_coeffs() -> EncodingCoeffs {
        let a = FieldMatrix::from_rows(&[[2, 1], [3, 4]], p11()).unwrap();
        EncodingCoeffs::from_matrix(a, 1, 1).unwrap()
    }

    fn scalar(v: u64) -> FieldMatrix {
        FieldMatrix::new(1, 1, vec![v], p11()).unwrap()
    }

    #[test]
    fn forced_matrix_inverse() {
        let c = running_coeffs();
        assert_eq!(
            c.a_inv(),
            &FieldMatrix::from_rows(&[[3, 2], [6, 7]], p11()).unwrap()
        );
    }

    #[test]
    fn generated_coeffs_are_valid_and_deterministic() {
        let c1 = EncodingCoeffs::generate(&mut rng_from_seed(3), 3, 2, Prime::p25()).unwrap();
        let c2 = EncodingCoeffs::generate(&mut rng_from_seed(3), 3, 2, Prime::p25()).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(c1.a2().rank(), 2);
        assert!(c1.noise_is_mds());
        assert_eq!(
            c1.a().matmul(c1.a_inv()).unwrap(),
            FieldMatrix::identity(5, Prime::p25())
        );
        assert!(EncodingCoeffs::generate(&mut rng_from_seed(3), 0, 1, Prime::p25()).is_err());
    }

    #[test]
    fn running_example_encode() {
        let c = running_coeffs();
        let r = NoiseBlock::from_matrix(scalar(5));
        let shares = encode(&scalar(3), &r, &c).unwrap();
        assert_eq!(shares.matrix().data(), &[10, 1]);
    }

    #[test]
    fn zero_and_identity_encoding() {
        let c = running_coeffs();
        let zero = encode(&scalar(0), &NoiseBlock::from_matrix(scalar(0)), &c).unwrap();
        assert!(zero.matrix().is_zero());
        let id = EncodingCoeffs::from_matrix(FieldMatrix::identity(2, p11()), 1, 1).unwrap();
        let s = encode(&scalar(3), &NoiseBlock::from_matrix(scalar(5)), &id).unwrap();
        assert_eq!(s.matrix().data(), &[3, 5]);
    }

    #[test]
    fn running_example_decode() {
        let c = running_coeffs();
        let ybar = FieldMatrix::from_rows(&[[9, 2]], p11()).unwrap();
        assert_eq!(decode_full(&ybar, &c).unwrap().data(), &[6, 10]);
        assert_eq!(decode_forward(&ybar, &c).unwrap().data(), &[6]);
        assert!(decode_forward(&FieldMatrix::zeros(3, 2, p11()), &c)
            .unwrap()
            .is_zero());
        assert!(matches!(
            decode_forward(&FieldMatrix::zeros(1, 3, p11()), &c),
            Err(CodecError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn identity_weight_recovers_input() {
        let mut rng = rng_from_seed(17);
        let p = Prime::p25();
        let c = EncodingCoeffs::generate(&mut rng, 3, 2, p).unwrap();
        let x = FieldMatrix::random(&mut rng, 6, 3, p);
        let r = NoiseBlock::generate(&mut rng, 6, 2, p);
        let shares = encode(&x, &r, &c).unwrap();
        let ybar = FieldMatrix::identity(6, p).matmul(shares.matrix()).unwrap();
        assert_eq!(decode_forward(&ybar, &c).unwrap(), x);
    }

    #[test]
    fn running_example_backward_coeffs() {
        let c = running_coeffs();
        let bc = backward_coeffs_with_gamma(&c, vec![1, 1]).unwrap();
        assert_eq!(bc.b().data(), &[3, 6]);
        assert!(verify_coeff_constraint(&c, &bc));
        let id = EncodingCoeffs::from_matrix(FieldMatrix::identity(3, p11()), 2, 1).unwrap();
        let bc = backward_coeffs_with_gamma(&id, vec![1, 1, 1]).unwrap();
        assert_eq!(
            bc.b(),
            &FieldMatrix::from_rows(&[[1, 0], [0, 1], [0, 0]], p11()).unwrap()
        );
    }

    #[test]
    fn constraint_is_exact() {
        let mut rng = rng_from_seed(21);
        let c = EncodingCoeffs::generate(&mut rng, 2, 2, Prime::p25()).unwrap();
        let bc = gen_backward_coeffs(&mut rng, &c).unwrap();
        assert!(verify_coeff_constraint(&c, &bc));
        assert!(!verify_coeff_constraint(&c, &bc.perturbed(1, 0)));
        assert!(backward_coeffs_with_gamma(&c, vec![1, 0, 1, 1]).is_err());
        let mut zero_gamma = bc.clone();
        zero_gamma.gamma[2] = 0;
        assert!(!verify_coeff_constraint(&c, &zero_gamma));
    }

    #[test]
    fn running_example_aggregate() {
        let c = running_coeffs();
        let bc = backward_coeffs_with_gamma(&c, vec![1, 1]).unwrap();
        let delta = scalar(4);
        let shares = [scalar(10), scalar(1)];
        let eqs: Vec<FieldMatrix> = (0..2)
            .map(|j| dense_backward_equation(&delta, bc.beta_row(j), &shares[j]).unwrap())
            .collect();
        assert_eq!(eqs[0].data(), &[10]);
        assert_eq!(eqs[1].data(), &[2]);
        // δ·x = 4·3 = 12 ≡ 1
        assert_eq!(aggregate_gradient_field(&eqs, &bc).unwrap().data(), &[1]);
    }

    #[test]
    fn zero_equations_aggregate_to_zero() {
        let c = running_coeffs();
        let bc = backward_coeffs_with_gamma(&c, vec![3, 5]).unwrap();
        let eqs = vec![FieldMatrix::zeros(2, 2, p11()); 2];
        assert!(aggregate_gradient_field(&eqs, &bc).unwrap().is_zero());
        assert!(aggregate_gradient_field(&eqs[..1], &bc).is_err());
    }

    #[test]
    fn combinations_enumerate_subsets() {
        assert_eq!(combinations(4, 2).len(), 6);
        assert_eq!(combinations(3, 3), vec![vec![0, 1, 2]]);
        assert_eq!(combinations(3, 1), vec![vec![0], vec![1], vec![2]]);
        assert!(combinations(2, 3).is_empty());
        assert_eq!(combinations(5, 0), vec![Vec::<usize>::new()]);
    }
}
