//! Redundant-share integrity checking.
//!
//! One extra share `x̄_{S+1} = [X | R] c` gives `S + 1` equations for `S` unknowns.
//! The coordinator decodes with shares `{1..S}` and with `{1..S-1, S+1}` and compares
//! the full decoded rows. Because every `S`-column submatrix of the extended matrix is
//! invertible, the parity vector of the code has no zero entry, so any single nonzero
//! additive corruption makes the two decodings differ.

use rand::Rng;

use super::{
    backward_from_inverse, constraint_holds, decode_full, noise_rows_are_mds, random_nonzero,
    BackwardCoeffs, CodecError, EncodingCoeffs, NoiseBlock, ShareSet,
};
use crate::field::{FieldMatrix, MAX_RESAMPLES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Verdict {
    Clean,
    Violation,
}

/// Base coefficients plus one redundant coding column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntegrityCoeffs {
    base: EncodingCoeffs,
    a_ext: FieldMatrix,
    alt_members: Vec<usize>,
    alt_inv: FieldMatrix,
}

/// Backward coefficients for the decoding that uses the share indices in `members`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsetBackward {
    pub members: Vec<usize>,
    pub coeffs: BackwardCoeffs,
}

impl SubsetBackward {
    /// `B` spread over `total` workers; non-members get a zero row (and return zero).
    pub fn b_full(&self, total: usize) -> FieldMatrix {
        let b = self.coeffs.b();
        let mut full = FieldMatrix::zeros(total, b.cols(), b.prime());
        for (row, &j) in self.members.iter().enumerate() {
            for i in 0..b.cols() {
                full.set(j, i, b.get(row, i));
            }
        }
        full
    }

    /// `sum_j γ_j Eq_j` over members, given one equation per worker index.
    pub fn aggregate_field(&self, eqs_full: &[FieldMatrix]) -> Result<FieldMatrix, CodecError> {
        let eqs: Vec<FieldMatrix> = self
            .members
            .iter()
            .map(|&j| {
                eqs_full.get(j).cloned().ok_or_else(|| {
                    CodecError::ShapeMismatch(format!("missing equation from worker {j}"))
                })
            })
            .collect::<Result<_, _>>()?;
        super::aggregate_gradient_field(&eqs, &self.coeffs)
    }
}

fn validate_extension(base: &EncodingCoeffs, a_ext: &FieldMatrix) -> bool {
    let s = base.shares();
    (0..=s).all(|drop| {
        let keep: Vec<usize> = (0..=s).filter(|&c| c != drop).collect();
        a_ext.select_columns(&keep).inverse().is_ok()
    })
}

fn build(base: &EncodingCoeffs, column: &[u64]) -> Result<IntegrityCoeffs, CodecError> {
    let s = base.shares();
    let p = base.prime();
    if column.len() != s {
        return Err(CodecError::ShapeMismatch(format!(
            "extra column has {} entries, expected {s}",
            column.len()
        )));
    }
    let col = FieldMatrix::new(s, 1, column.to_vec(), p)?;
    let a_ext = base.a().hstack(&col)?;
    if !validate_extension(base, &a_ext) {
        return Err(CodecError::InvalidConfig(
            "some S-column submatrix of the extended matrix is singular".into(),
        ));
    }
    let alt_members: Vec<usize> = (0..s - 1).chain(std::iter::once(s)).collect();
    let alt_inv = a_ext.select_columns(&alt_members).inverse()?;
    Ok(IntegrityCoeffs {
        base: base.clone(),
        a_ext,
        alt_members,
        alt_inv,
    })
}

/// Extends `c` with a caller-chosen coding column.
pub fn extend_with_column(
    c: &EncodingCoeffs,
    column: &[u64],
) -> Result<IntegrityCoeffs, CodecError> {
    build(c, column)
}

/// Draws a redundant column (resampled until every `S`-column submatrix is invertible
/// and the noise rows stay MDS across all `S + 1` shares) and encodes `S + 1` shares.
pub fn extend_for_integrity<R: Rng + ?Sized>(
    xq: &FieldMatrix,
    r: &NoiseBlock,
    c: &EncodingCoeffs,
    rng: &mut R,
) -> Result<(ShareSet, IntegrityCoeffs), CodecError> {
    let ic = IntegrityCoeffs::generate(rng, c)?;
    let shares = ic.encode(xq, r)?;
    Ok((shares, ic))
}

impl IntegrityCoeffs {
    pub fn generate<R: Rng + ?Sized>(rng: &mut R, c: &EncodingCoeffs) -> Result<Self, CodecError> {
        let s = c.shares();
        let p = c.prime();
        for _ in 0..MAX_RESAMPLES {
            let col: Vec<u64> = (0..s).map(|_| rng.random_range(0..p.value())).collect();
            let Ok(ic) = build(c, &col) else { continue };
            let a2 = ic.a_ext.select_rows(&(c.k()..s).collect::<Vec<_>>());
            if noise_rows_are_mds(&a2) {
                return Ok(ic);
            }
        }
        Err(CodecError::GenerationFailure {
            attempts: MAX_RESAMPLES,
        })
    }

    pub fn base(&self) -> &EncodingCoeffs {
        &self.base
    }

    /// `S x (S + 1)` extended coding matrix.
    pub fn extended(&self) -> &FieldMatrix {
        &self.a_ext
    }

    pub fn total_shares(&self) -> usize {
        self.base.shares() + 1
    }

    /// Share indices of the primary decoding.
    pub fn primary_members(&self) -> Vec<usize> {
        (0..self.base.shares()).collect()
    }

    /// Share indices of the check decoding.
    pub fn alt_members(&self) -> &[usize] {
        &self.alt_members
    }

    /// `[Xq | R] A_ext`: the base shares followed by the redundant one.
    pub fn encode(&self, xq: &FieldMatrix, r: &NoiseBlock) -> Result<ShareSet, CodecError> {
        let base = super::encode(xq, r, &self.base)?;
        let extra = xq
            .hstack(r.matrix())?
            .matmul(&self.a_ext.column(self.base.shares()))?;
        Ok(ShareSet::new(base.matrix().hstack(&extra)?, 0, 0))
    }

    /// Backward coefficients for both decodings. Γ entries of workers in both subsets
    /// are forced to differ, so a corrupted common equation shifts the two sums apart.
    pub fn gen_backward_pair<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
    ) -> Result<(SubsetBackward, SubsetBackward), CodecError> {
        let p = self.base.prime();
        let k = self.base.k();
        let s = self.base.shares();
        let primary = super::gen_backward_coeffs(rng, &self.base)?;
        let mut gamma_alt = Vec::with_capacity(s);
        for (pos, _) in self.alt_members.iter().enumerate() {
            let mut g = random_nonzero(rng, p);
            if pos < s - 1 {
                while g == primary.gamma()[pos] {
                    g = random_nonzero(rng, p);
                }
            }
            gamma_alt.push(g);
        }
        let alt = backward_from_inverse(&self.alt_inv, k, gamma_alt)?;
        let a_alt = self.a_ext.select_columns(&self.alt_members);
        if !constraint_holds(&a_alt, k, &alt) {
            return Err(CodecError::GenerationFailure { attempts: 1 });
        }
        Ok((
            SubsetBackward {
                members: self.primary_members(),
                coeffs: primary,
            },
            SubsetBackward {
                members: self.alt_members.clone(),
                coeffs: alt,
            },
        ))
    }
}

/// Decodes with both share subsets; `Violation` iff the full decoded rows differ.
/// The returned data columns come from the primary subset.
pub fn decode_with_verification(
    ybar_ext: &FieldMatrix,
    ic: &IntegrityCoeffs,
) -> Result<(FieldMatrix, Verdict), CodecError> {
    let s = ic.base.shares();
    if ybar_ext.cols() != s + 1 {
        return Err(CodecError::ShapeMismatch(format!(
            "expected {} result columns, got {}",
            s + 1,
            ybar_ext.cols()
        )));
    }
    let primary = decode_full(&ybar_ext.select_columns(&ic.primary_members()), &ic.base)?;
    let alt = ybar_ext
        .select_columns(&ic.alt_members)
        .matmul(&ic.alt_inv)?;
    let verdict = if primary == alt {
        Verdict::Clean
    } else {
        Verdict::Violation
    };
    let data = primary.select_columns(&(0..ic.base.k()).collect::<Vec<_>>());
    Ok((data, verdict))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{decode_forward, encode};
    use crate::field::Prime;
    use crate::seed::rng_from_seed;

    fn p11() -> Prime {
        Prime::new(11).unwrap()
    }

    fn running() -> (EncodingCoeffs, FieldMatrix, NoiseBlock) {
        let a = FieldMatrix::from_rows(&[[2, 1], [3, 4]], p11()).unwrap();
        let c = EncodingCoeffs::from_matrix(a, 1, 1).unwrap();
        let x = FieldMatrix::new(1, 1, vec![3], p11()).unwrap();
        let r = NoiseBlock::from_matrix(FieldMatrix::new(1, 1, vec![5], p11()).unwrap());
        (c, x, r)
    }

    #[test]
    fn running_example_extra_share() {
        let (c, x, r) = running();
        let ic = extend_with_column(&c, &[1, 1]).unwrap();
        let shares = ic.encode(&x, &r).unwrap();
        assert_eq!(shares.len(), 3);
        assert_eq!(shares.matrix().data(), &[10, 1, 8]);
    }

    #[test]
    fn singular_extension_rejected() {
        let (c, _, _) = running();
        // [2,3] duplicates column 0
        assert!(extend_with_column(&c, &[2, 3]).is_err());
        assert!(extend_with_column(&c, &[0, 0]).is_err());
    }

    #[test]
    fn dropping_extra_share_reproduces_base_encoding() {
        let mut rng = rng_from_seed(5);
        let p = Prime::p25();
        let c = EncodingCoeffs::generate(&mut rng, 2, 2, p).unwrap();
        let x = FieldMatrix::random(&mut rng, 4, 2, p);
        let r = NoiseBlock::generate(&mut rng, 4, 2, p);
        let (ext, ic) = extend_for_integrity(&x, &r, &c, &mut rng).unwrap();
        assert_eq!(ext.len(), c.shares() + 1);
        let base = encode(&x, &r, &c).unwrap();
        assert_eq!(
            ext.matrix().select_columns(&ic.primary_members()),
            *base.matrix()
        );
    }

    #[test]
    fn honest_results_are_clean() {
        let (c, x, r) = running();
        let ic = extend_with_column(&c, &[1, 1]).unwrap();
        let shares = ic.encode(&x, &r).unwrap();
        let w = FieldMatrix::new(1, 1, vec![2], p11()).unwrap();
        let ybar = w.matmul(shares.matrix()).unwrap();
        let (data, verdict) = decode_with_verification(&ybar, &ic).unwrap();
        assert_eq!(verdict, Verdict::Clean);
        let plain = decode_forward(&ybar.select_columns(&[0, 1]), &c).unwrap();
        assert_eq!(data, plain);
        assert_eq!(data.data(), &[6]);
    }

    #[test]
    fn every_single_worker_corruption_is_detected_exhaustively() {
        let (c, x, r) = running();
        let ic = extend_with_column(&c, &[1, 1]).unwrap();
        let w = FieldMatrix::new(1, 1, vec![2], p11()).unwrap();
        let ybar = w.matmul(ic.encode(&x, &r).unwrap().matrix()).unwrap();
        for worker in 0..3 {
            for e in 1..11 {
                let mut bad = ybar.clone();
                bad.set(0, worker, p11().add(bad.get(0, worker), e));
                let (_, verdict) = decode_with_verification(&bad, &ic).unwrap();
                assert_eq!(verdict, Verdict::Violation, "worker {worker}, e {e}");
            }
        }
    }

    /// Enumerates every valid extension column and every single-worker error at p = 11.
    #[test]
    fn single_faults_detected_for_every_valid_extension() {
        let (c, x, r) = running();
        let p = p11();
        let mut valid = 0;
        for c0 in 0..11 {
            for c1 in 0..11 {
                let Ok(ic) = extend_with_column(&c, &[c0, c1]) else {
                    continue;
                };
                valid += 1;
                let ybar = ic.encode(&x, &r).unwrap().matrix().clone();
                for worker in 0..3 {
                    for e in 1..11 {
                        let mut bad = ybar.clone();
                        bad.set(0, worker, p.add(bad.get(0, worker), e));
                        assert_eq!(
                            decode_with_verification(&bad, &ic).unwrap().1,
                            Verdict::Violation
                        );
                    }
                }
            }
        }
        assert!(valid > 0);
    }

    #[test]
    fn backward_pair_satisfies_both_constraints() {
        let mut rng = rng_from_seed(13);
        let p = Prime::p25();
        let c = EncodingCoeffs::generate(&mut rng, 3, 1, p).unwrap();
        let ic = IntegrityCoeffs::generate(&mut rng, &c).unwrap();
        let (b1, b2) = ic.gen_backward_pair(&mut rng).unwrap();
        assert!(constraint_holds(ic.base.a(), 3, &b1.coeffs));
        assert!(constraint_holds(
            &ic.extended().select_columns(&b2.members),
            3,
            &b2.coeffs
        ));
        for pos in 0..c.shares() - 1 {
            assert_ne!(b1.coeffs.gamma()[pos], b2.coeffs.gamma()[pos]);
        }
        let full = b2.b_full(ic.total_shares());
        assert!(full.row(c.shares() - 1).iter().all(|&v| v == 0));
    }

    #[test]
    fn wrong_column_count_is_shape_error() {
        let (c, _, _) = running();
        let ic = extend_with_column(&c, &[1, 1]).unwrap();
        assert!(decode_with_verification(&FieldMatrix::zeros(1, 2, p11()), &ic).is_err());
    }
}
