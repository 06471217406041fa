//! Exact mutual information at toy primes and share uniformity at the working prime.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::instance_rng;
use crate::codec::privacy::mutual_information_for_subset;
use crate::codec::{combinations, CodecError, EncodingCoeffs};
use crate::exec::Parallelism;
use crate::field::Prime;
use crate::stats::{binomial_upper_bound, chi_square, ResidueBins};

const SUITE_EXACT: u64 = 4;
const SUITE_CHI: u64 = 5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrivacyAuditConfig {
    pub exact_primes: Vec<u64>,
    pub max_k: usize,
    pub max_m: usize,
    /// Fresh coding matrices per exact case.
    pub draws: usize,
    pub prime: Prime,
    pub samples: usize,
    pub significance: f64,
    /// Confidence of the binomial bound on the number of rejections.
    pub reject_confidence: f64,
    pub seed: u64,
    #[serde(skip)]
    pub mode: Parallelism,
}

impl Default for PrivacyAuditConfig {
    fn default() -> Self {
        PrivacyAuditConfig {
            exact_primes: vec![5, 7],
            max_k: 2,
            max_m: 2,
            draws: 2,
            prime: Prime::p25(),
            samples: 100_000,
            significance: 0.01,
            reject_confidence: 0.999,
            seed: 0,
            mode: Parallelism::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expectation {
    /// At most `M` colluders: the view must be independent of the input.
    Zero,
    /// `M + 1` colluders can cancel the noise.
    Leak,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiCase {
    pub p: u64,
    pub k: usize,
    pub m: usize,
    pub draw: usize,
    pub subset: Vec<usize>,
    pub mi_bits: f64,
    pub expectation: Expectation,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiCase {
    pub k: usize,
    pub m: usize,
    pub input: String,
    pub subset: Vec<usize>,
    pub bins: usize,
    pub samples: usize,
    pub statistic: f64,
    pub p_value: f64,
    pub rejected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyAuditReport {
    pub exact: Vec<MiCase>,
    pub exact_failures: usize,
    pub chi_square: Vec<ChiCase>,
    pub chi_rejections: usize,
    pub chi_rejection_bound: u64,
    pub passed: bool,
}

/// Exact `I(X; view)` for every subset of size `1..=M+1` at each small prime, `dim = 1`.
pub fn exact_mutual_information(cfg: &PrivacyAuditConfig) -> Result<Vec<MiCase>, CodecError> {
    let mut jobs = Vec::new();
    for &pv in &cfg.exact_primes {
        for k in 1..=cfg.max_k {
            for m in 1..=cfg.max_m {
                for draw in 0..cfg.draws {
                    jobs.push((pv, k, m, draw));
                }
            }
        }
    }
    let per_job = cfg.mode.map_range(jobs.len(), |idx| {
        let (pv, k, m, draw) = jobs[idx];
        let p = Prime::new(pv)?;
        let mut rng = instance_rng(cfg.seed, SUITE_EXACT, idx as u64, 0);
        let c = EncodingCoeffs::generate(&mut rng, k, m, p)?;
        let mut out = Vec::new();
        for size in 1..=(m + 1).min(c.shares()) {
            let expectation = if size <= m {
                Expectation::Zero
            } else {
                Expectation::Leak
            };
            for subset in combinations(c.shares(), size) {
                let mi_bits =
                    mutual_information_for_subset(&c, 1, &subset, Parallelism::Sequential)?;
                let ok = match expectation {
                    Expectation::Zero => mi_bits == 0.0,
                    Expectation::Leak => mi_bits > 0.0,
                };
                out.push(MiCase {
                    p: pv,
                    k,
                    m,
                    draw,
                    subset,
                    mi_bits,
                    expectation,
                    ok,
                });
            }
        }
        Ok::<_, CodecError>(out)
    });
    let mut cases = Vec::new();
    for r in per_job {
        cases.extend(r?);
    }
    Ok(cases)
}

/// Per-axis bin count for a joint test over `size` shares (about 64 cells in total).
fn bins_per_axis(size: usize) -> usize {
    match size {
        1 => 64,
        2 => 8,
        _ => 4,
    }
}

/// Chi-square uniformity of every colluding view of size `<= M`, with the input held
/// fixed and only the noise varying. Inputs: all zero, and one random draw.
pub fn share_uniformity(cfg: &PrivacyAuditConfig) -> Result<Vec<ChiCase>, CodecError> {
    let p = cfg.prime;
    let mut jobs = Vec::new();
    for k in 1..=cfg.max_k {
        for m in 1..=cfg.max_m {
            for input in ["zero", "random"] {
                jobs.push((k, m, input));
            }
        }
    }
    let per_job = cfg.mode.map_range(jobs.len(), |idx| {
        let (k, m, input) = jobs[idx];
        let mut rng = instance_rng(cfg.seed, SUITE_CHI, idx as u64, 0);
        let c = EncodingCoeffs::generate(&mut rng, k, m, p)?;
        let x: Vec<u64> = (0..k)
            .map(|_| {
                if input == "zero" {
                    0
                } else {
                    rng.random_range(0..p.value())
                }
            })
            .collect();
        let s = c.shares();
        let subsets: Vec<Vec<usize>> = (1..=m).flat_map(|size| combinations(s, size)).collect();
        let axes: Vec<ResidueBins> = subsets
            .iter()
            .map(|sub| ResidueBins::new(p, bins_per_axis(sub.len())))
            .collect();
        let mut counts: Vec<Vec<u64>> = subsets
            .iter()
            .zip(&axes)
            .map(|(sub, ax)| vec![0u64; ax.len().pow(sub.len() as u32)])
            .collect();
        let a = c.a();
        let mut row = vec![0u64; k + m];
        row[..k].copy_from_slice(&x);
        let mut share = vec![0u64; s];
        for _ in 0..cfg.samples {
            for r in row[k..].iter_mut() {
                *r = rng.random_range(0..p.value());
            }
            for (j, sh) in share.iter_mut().enumerate() {
                *sh = (0..k + m).fold(0, |acc, t| p.add(acc, p.mul(row[t], a.get(t, j))));
            }
            for ((sub, ax), cnt) in subsets.iter().zip(&axes).zip(counts.iter_mut()) {
                let cell = sub
                    .iter()
                    .fold(0, |acc, &j| acc * ax.len() + ax.bin(share[j]));
                cnt[cell] += 1;
            }
        }
        let cases: Vec<ChiCase> = subsets
            .into_iter()
            .zip(&axes)
            .zip(counts)
            .map(|((subset, ax), cnt)| {
                let probs: Vec<f64> = (0..cnt.len())
                    .map(|cell| {
                        let mut rest = cell;
                        let mut pr = 1.0;
                        for _ in 0..subset.len() {
                            pr *= ax.probs()[rest % ax.len()];
                            rest /= ax.len();
                        }
                        pr
                    })
                    .collect();
                let (statistic, p_value) = chi_square(&cnt, &probs);
                ChiCase {
                    k,
                    m,
                    input: input.to_string(),
                    bins: cnt.len(),
                    subset,
                    samples: cfg.samples,
                    statistic,
                    p_value,
                    rejected: p_value < cfg.significance,
                }
            })
            .collect();
        Ok::<_, CodecError>(cases)
    });
    let mut cases = Vec::new();
    for r in per_job {
        cases.extend(r?);
    }
    Ok(cases)
}

pub fn privacy_audit(cfg: &PrivacyAuditConfig) -> Result<PrivacyAuditReport, CodecError> {
    if !(0.0..1.0).contains(&cfg.significance) || cfg.samples == 0 {
        return Err(CodecError::InvalidConfig(
            "significance must be in [0, 1) and samples positive".into(),
        ));
    }
    let exact = exact_mutual_information(cfg)?;
    let exact_failures = exact.iter().filter(|c| !c.ok).count();
    let chi = share_uniformity(cfg)?;
    let chi_rejections = chi.iter().filter(|c| c.rejected).count();
    let chi_rejection_bound =
        binomial_upper_bound(chi.len() as u64, cfg.significance, cfg.reject_confidence);
    let passed = exact_failures == 0 && chi_rejections as u64 <= chi_rejection_bound;
    Ok(PrivacyAuditReport {
        exact,
        exact_failures,
        chi_square: chi,
        chi_rejections,
        chi_rejection_bound,
        passed,
    })
}
