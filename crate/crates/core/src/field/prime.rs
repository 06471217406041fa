use std::fmt;

use serde::{Deserialize, Serialize};

use super::FieldError;

/// A prime modulus. Residues are `u64` values in `[0, p)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u64", into = "u64")]
pub struct Prime(u64);

/// Largest 25-bit prime, 2^25 - 39. Default field.
pub const P25: u64 = 33_554_393;

/// Mersenne prime 2^61 - 1, for configurations that outgrow the 25-bit budget.
pub const P61: u64 = (1u64 << 61) - 1;

const MR_BASES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

fn mul_mod_u64(a: u64, b: u64, m: u64) -> u64 {
    ((a as u128 * b as u128) % m as u128) as u64
}

fn pow_mod_u64(mut base: u64, mut exp: u64, m: u64) -> u64 {
    let mut acc = 1 % m;
    base %= m;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod_u64(acc, base, m);
        }
        base = mul_mod_u64(base, base, m);
        exp >>= 1;
    }
    acc
}

/// Deterministic Miller-Rabin; the fixed base set is exact for every `u64`.
pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    for &b in &MR_BASES {
        if n.is_multiple_of(b) {
            return n == b;
        }
    }
    let mut d = n - 1;
    let mut s = 0;
    while d.is_multiple_of(2) {
        d /= 2;
        s += 1;
    }
    'witness: for &a in &MR_BASES {
        let mut x = pow_mod_u64(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mul_mod_u64(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

#[allow(clippy::should_implement_trait)]
impl Prime {
    pub fn new(p: u64) -> Result<Self, FieldError> {
        if p < 5 {
            return Err(FieldError::PrimeTooSmall(p));
        }
        if !is_prime(p) {
            return Err(FieldError::NotPrime(p));
        }
        Ok(Prime(p))
    }

    /// 2^25 - 39.
    pub fn p25() -> Self {
        Prime(P25)
    }

    /// 2^61 - 1.
    pub fn large() -> Self {
        Prime(P61)
    }

    #[inline]
    pub fn value(self) -> u64 {
        self.0
    }

    #[inline]
    pub fn add(self, a: u64, b: u64) -> u64 {
        let s = a + b;
        if s >= self.0 {
            s - self.0
        } else {
            s
        }
    }

    #[inline]
    pub fn sub(self, a: u64, b: u64) -> u64 {
        if a >= b {
            a - b
        } else {
            a + self.0 - b
        }
    }

    #[inline]
    pub fn neg(self, a: u64) -> u64 {
        if a == 0 {
            0
        } else {
            self.0 - a
        }
    }

    #[inline]
    pub fn mul(self, a: u64, b: u64) -> u64 {
        mul_mod_u64(a, b, self.0)
    }

    pub fn pow(self, a: u64, exp: u64) -> u64 {
        pow_mod_u64(a, exp, self.0)
    }

    /// Multiplicative inverse via Fermat's little theorem.
    pub fn inv(self, a: u64) -> Result<u64, FieldError> {
        if a.is_multiple_of(self.0) {
            return Err(FieldError::ZeroInverse);
        }
        Ok(self.pow(a, self.0 - 2))
    }

    /// Maps a signed integer with `|z| < p` to its residue (negatives get `+p`).
    pub fn embed_signed(self, z: i64) -> Result<u64, FieldError> {
        if z.unsigned_abs() >= self.0 {
            return Err(FieldError::OutOfRange {
                value: z as i128,
                p: self.0,
            });
        }
        Ok(if z < 0 {
            (z + self.0 as i64) as u64
        } else {
            z as u64
        })
    }

    /// Signed representative in `(-p/2, p/2)`: residues above `p/2` have `p` subtracted.
    #[inline]
    pub fn lift_signed(self, e: u64) -> i64 {
        if e > self.0 / 2 {
            e as i64 - self.0 as i64
        } else {
            e as i64
        }
    }

    /// Reduces any integer into `[0, p)`.
    pub fn reduce_i128(self, z: i128) -> u64 {
        z.rem_euclid(self.0 as i128) as u64
    }

    /// Number of products of two residues that fit in a `u128` accumulator.
    pub(crate) fn accumulation_window(self) -> usize {
        let max_prod = (self.0 as u128 - 1) * (self.0 as u128 - 1);
        let window = if max_prod == 0 {
            u128::MAX
        } else {
            u128::MAX / max_prod
        };
        window.clamp(1, 1 << 20) as usize
    }
}

impl TryFrom<u64> for Prime {
    type Error = FieldError;
    fn try_from(p: u64) -> Result<Self, Self::Error> {
        Prime::new(p)
    }
}

impl From<Prime> for u64 {
    fn from(p: Prime) -> u64 {
        p.0
    }
}

impl fmt::Display for Prime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}
