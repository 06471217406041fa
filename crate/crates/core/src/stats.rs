//! Goodness-of-fit helpers for share uniformity audits.

use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};

use crate::field::Prime;

/// Pearson chi-square statistic and upper-tail p-value of `observed` against
/// expected probabilities `probs` (which must sum to 1).
pub fn chi_square(observed: &[u64], probs: &[f64]) -> (f64, f64) {
    assert_eq!(observed.len(), probs.len());
    let n: u64 = observed.iter().sum();
    let stat: f64 = observed
        .iter()
        .zip(probs)
        .map(|(&o, &pr)| {
            let e = pr * n as f64;
            let d = o as f64 - e;
            d * d / e
        })
        .sum();
    let dof = (observed.len() - 1) as f64;
    let p = ChiSquared::new(dof).expect("dof > 0").sf(stat);
    (stat, p)
}

/// Chi-square on explicit expected frequencies.
pub fn chi_square_expected(observed: &[f64], expected: &[f64]) -> (f64, f64) {
    let stat: f64 = observed
        .iter()
        .zip(expected)
        .map(|(o, e)| (o - e) * (o - e) / e)
        .sum();
    let dof = (observed.len() - 1) as f64;
    (stat, ChiSquared::new(dof).expect("dof > 0").sf(stat))
}

/// Equal-width binning of residues: `bin(v) = floor(v * bins / p)`.
#[derive(Debug, Clone)]
pub struct ResidueBins {
    p: u64,
    bins: usize,
    probs: Vec<f64>,
}

impl ResidueBins {
    pub fn new(prime: Prime, bins: usize) -> Self {
        let p = prime.value();
        let bins = bins.clamp(2, p as usize);
        // bin b covers v with b*p <= v*bins < (b+1)*p
        let start = |b: u64| (b as u128 * p as u128).div_ceil(bins as u128) as u64;
        let probs = (0..bins as u64)
            .map(|b| (start(b + 1) - start(b)) as f64 / p as f64)
            .collect();
        ResidueBins { p, bins, probs }
    }

    pub fn bin(&self, v: u64) -> usize {
        ((v as u128 * self.bins as u128) / self.p as u128) as usize
    }

    pub fn len(&self) -> usize {
        self.bins
    }

    pub fn is_empty(&self) -> bool {
        self.bins == 0
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Histogram and chi-square p-value of `values` under uniformity.
    pub fn test<I: IntoIterator<Item = u64>>(&self, values: I) -> UniformityResult {
        let mut counts = vec![0u64; self.bins];
        let mut n = 0;
        for v in values {
            counts[self.bin(v)] += 1;
            n += 1;
        }
        let (statistic, p_value) = chi_square(&counts, &self.probs);
        UniformityResult {
            samples: n,
            statistic,
            p_value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct UniformityResult {
    pub samples: u64,
    pub statistic: f64,
    pub p_value: f64,
}

/// Smallest `c` with `P(Binomial(n, rate) <= c) >= confidence`.
pub fn binomial_upper_bound(n: u64, rate: f64, confidence: f64) -> u64 {
    let dist = Binomial::new(rate, n).expect("valid binomial");
    (0..=n).find(|&c| dist.cdf(c) >= confidence).unwrap_or(n)
}
