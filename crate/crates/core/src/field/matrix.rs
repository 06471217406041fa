use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FieldError, Prime};
use crate::exec::Parallelism;

/// Maximum resamples for rejection-sampled random matrices.
pub const MAX_RESAMPLES: usize = 64;

/// Dense row-major matrix of residues modulo a prime.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FieldMatrix {
    rows: usize,
    cols: usize,
    data: Vec<u64>,
    prime: Prime,
}

/// Signed integer matrix, the lifted image of a [`FieldMatrix`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i64>,
}

impl FieldMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<u64>, prime: Prime) -> Result<Self, FieldError> {
        if rows * cols != data.len() {
            return Err(FieldError::BadLength {
                expected: rows * cols,
                got: data.len(),
            });
        }
        if let Some(&bad) = data.iter().find(|&&e| e >= prime.value()) {
            return Err(FieldError::InvalidResidue {
                value: bad,
                p: prime.value(),
            });
        }
        Ok(FieldMatrix {
            rows,
            cols,
            data,
            prime,
        })
    }

    /// Builds from arbitrary unsigned values, reducing each mod p.
    pub fn from_reduced(rows: usize, cols: usize, data: Vec<u64>, prime: Prime) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix length");
        let p = prime.value();
        let data = data.into_iter().map(|e| e % p).collect();
        FieldMatrix {
            rows,
            cols,
            data,
            prime,
        }
    }

    /// Builds from nested rows of residues, e.g. `[[2, 1], [3, 4]]`.
    pub fn from_rows<R: AsRef<[u64]>>(rows: &[R], prime: Prime) -> Result<Self, FieldError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.as_ref().len() != cols {
                return Err(FieldError::BadLength {
                    expected: cols,
                    got: r.as_ref().len(),
                });
            }
            data.extend_from_slice(r.as_ref());
        }
        FieldMatrix::new(rows.len(), cols, data, prime)
    }

    pub fn from_signed(s: &SignedMatrix, prime: Prime) -> Result<Self, FieldError> {
        let data = s
            .data
            .iter()
            .map(|&z| prime.embed_signed(z))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(FieldMatrix {
            rows: s.rows,
            cols: s.cols,
            data,
            prime,
        })
    }

    pub fn zeros(rows: usize, cols: usize, prime: Prime) -> Self {
        FieldMatrix {
            rows,
            cols,
            data: vec![0; rows * cols],
            prime,
        }
    }

    pub fn identity(n: usize, prime: Prime) -> Self {
        let mut m = FieldMatrix::zeros(n, n, prime);
        for i in 0..n {
            m.data[i * n + i] = 1;
        }
        m
    }

    /// `[I_k | 0]`, a k x n selector.
    pub fn selector(k: usize, n: usize, prime: Prime) -> Self {
        let mut m = FieldMatrix::zeros(k, n, prime);
        for i in 0..k.min(n) {
            m.data[i * n + i] = 1;
        }
        m
    }

    pub fn diagonal(diag: &[u64], prime: Prime) -> Self {
        let n = diag.len();
        let mut m = FieldMatrix::zeros(n, n, prime);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d % prime.value();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn prime(&self) -> Prime {
        self.prime
    }

    pub fn data(&self) -> &[u64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: u64) {
        assert!(v < self.prime.value(), "residue out of range");
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[u64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&e| e == 0)
    }

    /// Column `c` as an `rows x 1` matrix.
    pub fn column(&self, c: usize) -> FieldMatrix {
        let data = (0..self.rows).map(|r| self.get(r, c)).collect();
        FieldMatrix {
            rows: self.rows,
            cols: 1,
            data,
            prime: self.prime,
        }
    }

    pub fn select_columns(&self, idx: &[usize]) -> FieldMatrix {
        let mut data = Vec::with_capacity(self.rows * idx.len());
        for r in 0..self.rows {
            for &c in idx {
                data.push(self.get(r, c));
            }
        }
        FieldMatrix {
            rows: self.rows,
            cols: idx.len(),
            data,
            prime: self.prime,
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> FieldMatrix {
        let mut data = Vec::with_capacity(self.cols * idx.len());
        for &r in idx {
            data.extend_from_slice(self.row(r));
        }
        FieldMatrix {
            rows: idx.len(),
            cols: self.cols,
            data,
            prime: self.prime,
        }
    }

    /// Side-by-side concatenation `[self | other]`.
    pub fn hstack(&self, other: &FieldMatrix) -> Result<FieldMatrix, FieldError> {
        self.check_prime(other)?;
        if self.rows != other.rows {
            return Err(FieldError::ShapeMismatch {
                op: "hstack",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(FieldMatrix {
            rows: self.rows,
            cols,
            data,
            prime: self.prime,
        })
    }

    /// Concatenates single columns (all `n x 1`, or all `n x c`) left to right.
    pub fn hstack_all(parts: &[FieldMatrix]) -> Result<FieldMatrix, FieldError> {
        let first = parts.first().ok_or(FieldError::Empty)?;
        let mut acc = first.clone();
        for p in &parts[1..] {
            acc = acc.hstack(p)?;
        }
        Ok(acc)
    }

    pub fn transpose(&self) -> FieldMatrix {
        let mut data = vec![0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        FieldMatrix {
            rows: self.cols,
            cols: self.rows,
            data,
            prime: self.prime,
        }
    }

    fn check_prime(&self, other: &FieldMatrix) -> Result<(), FieldError> {
        if self.prime != other.prime {
            return Err(FieldError::PrimeMismatch {
                left: self.prime.value(),
                right: other.prime.value(),
            });
        }
        Ok(())
    }

    fn zip_with(
        &self,
        other: &FieldMatrix,
        op: &'static str,
        f: impl Fn(u64, u64) -> u64,
    ) -> Result<FieldMatrix, FieldError> {
        self.check_prime(other)?;
        if self.shape() != other.shape() {
            return Err(FieldError::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(FieldMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
            prime: self.prime,
        })
    }

    pub fn add(&self, other: &FieldMatrix) -> Result<FieldMatrix, FieldError> {
        let p = self.prime;
        self.zip_with(other, "add", |a, b| p.add(a, b))
    }

    pub fn sub(&self, other: &FieldMatrix) -> Result<FieldMatrix, FieldError> {
        let p = self.prime;
        self.zip_with(other, "sub", |a, b| p.sub(a, b))
    }

    pub fn neg(&self) -> FieldMatrix {
        let p = self.prime;
        let data = self.data.iter().map(|&a| p.neg(a)).collect();
        FieldMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
            prime: self.prime,
        }
    }

    pub fn scale(&self, s: u64) -> FieldMatrix {
        let p = self.prime;
        let s = s % p.value();
        let data = self.data.iter().map(|&a| p.mul(a, s)).collect();
        FieldMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
            prime: self.prime,
        }
    }

    /// Adds a column vector (`rows x 1`) to every column.
    pub fn add_column_broadcast(&self, col: &FieldMatrix) -> Result<FieldMatrix, FieldError> {
        self.check_prime(col)?;
        if col.cols != 1 || col.rows != self.rows {
            return Err(FieldError::ShapeMismatch {
                op: "add_column_broadcast",
                left: self.shape(),
                right: col.shape(),
            });
        }
        let p = self.prime;
        let mut out = self.clone();
        for r in 0..self.rows {
            let b = col.data[r];
            for v in &mut out.data[r * self.cols..(r + 1) * self.cols] {
                *v = p.add(*v, b);
            }
        }
        Ok(out)
    }

    /// Exact product mod p, using the default execution mode.
    pub fn matmul(&self, other: &FieldMatrix) -> Result<FieldMatrix, FieldError> {
        self.matmul_with(other, Parallelism::default())
    }

    pub fn matmul_with(
        &self,
        other: &FieldMatrix,
        mode: Parallelism,
    ) -> Result<FieldMatrix, FieldError> {
        self.check_prime(other)?;
        if self.cols != other.rows {
            return Err(FieldError::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (n, m) = (self.rows, other.cols);
        let inner = self.cols;
        let p = self.prime.value() as u128;
        let window = self.prime.accumulation_window();
        let bt = other.transpose();
        let mut data = vec![0u64; n * m];
        // small products are not worth a thread hop
        let mode = if n * m * inner < 4096 {
            Parallelism::Sequential
        } else {
            mode
        };
        mode.for_each_chunk_mut(&mut data, m.max(1), |r, out_row| {
            let a_row = &self.data[r * inner..(r + 1) * inner];
            for (c, out) in out_row.iter_mut().enumerate() {
                let b_col = &bt.data[c * inner..(c + 1) * inner];
                let mut acc: u128 = 0;
                for (chunk_a, chunk_b) in a_row.chunks(window).zip(b_col.chunks(window)) {
                    for (&x, &y) in chunk_a.iter().zip(chunk_b) {
                        acc += x as u128 * y as u128;
                    }
                    acc %= p;
                }
                *out = acc as u64;
            }
        });
        Ok(FieldMatrix {
            rows: n,
            cols: m,
            data,
            prime: self.prime,
        })
    }

    /// Gauss-Jordan inverse with first-nonzero pivot selection by row order.
    pub fn inverse(&self) -> Result<FieldMatrix, FieldError> {
        if self.rows != self.cols {
            return Err(FieldError::NotSquare(self.shape()));
        }
        let n = self.rows;
        let p = self.prime;
        let w = 2 * n;
        let mut aug = vec![0u64; n * w];
        for r in 0..n {
            aug[r * w..r * w + n].copy_from_slice(self.row(r));
            aug[r * w + n + r] = 1;
        }
        for col in 0..n {
            let pivot = (col..n)
                .find(|&r| aug[r * w + col] != 0)
                .ok_or(FieldError::Singular)?;
            if pivot != col {
                for k in 0..w {
                    aug.swap(pivot * w + k, col * w + k);
                }
            }
            let inv = p.inv(aug[col * w + col])?;
            for k in 0..w {
                aug[col * w + k] = p.mul(aug[col * w + k], inv);
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let factor = aug[r * w + col];
                if factor == 0 {
                    continue;
                }
                for k in 0..w {
                    let sub = p.mul(factor, aug[col * w + k]);
                    aug[r * w + k] = p.sub(aug[r * w + k], sub);
                }
            }
        }
        let mut data = Vec::with_capacity(n * n);
        for r in 0..n {
            data.extend_from_slice(&aug[r * w + n..(r + 1) * w]);
        }
        Ok(FieldMatrix {
            rows: n,
            cols: n,
            data,
            prime: p,
        })
    }

    /// Row-echelon rank over F_p.
    pub fn rank(&self) -> usize {
        let p = self.prime;
        let (n, m) = (self.rows, self.cols);
        let mut a = self.data.clone();
        let mut rank = 0;
        for col in 0..m {
            if rank == n {
                break;
            }
            let Some(pivot) = (rank..n).find(|&r| a[r * m + col] != 0) else {
                continue;
            };
            if pivot != rank {
                for k in 0..m {
                    a.swap(pivot * m + k, rank * m + k);
                }
            }
            let inv = p.inv(a[rank * m + col]).expect("pivot is nonzero");
            for r in rank + 1..n {
                let factor = p.mul(a[r * m + col], inv);
                if factor == 0 {
                    continue;
                }
                for k in col..m {
                    let sub = p.mul(factor, a[rank * m + k]);
                    a[r * m + k] = p.sub(a[r * m + k], sub);
                }
            }
            rank += 1;
        }
        rank
    }

    /// Lifts every entry to its signed representative.
    pub fn lift(&self) -> SignedMatrix {
        SignedMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|&e| self.prime.lift_signed(e))
                .collect(),
        }
    }

    /// Uniform residues from `rng`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, prime: Prime) -> Self {
        let p = prime.value();
        let data = (0..rows * cols).map(|_| rng.random_range(0..p)).collect();
        FieldMatrix {
            rows,
            cols,
            data,
            prime,
        }
    }

    /// Uniform random invertible matrix by rejection sampling.
    pub fn random_invertible<R: Rng + ?Sized>(
        rng: &mut R,
        n: usize,
        prime: Prime,
    ) -> Result<Self, FieldError> {
        for _ in 0..MAX_RESAMPLES {
            let m = FieldMatrix::random(rng, n, n, prime);
            if m.inverse().is_ok() {
                return Ok(m);
            }
        }
        Err(FieldError::GenerationFailure {
            attempts: MAX_RESAMPLES,
        })
    }

    /// Text dump: a `rows,cols,p` preamble line, then one CSV line per row.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{},{}\n", self.rows, self.cols, self.prime);
        for r in 0..self.rows {
            let line: Vec<String> = self.row(r).iter().map(u64::to_string).collect();
            let _ = writeln!(s, "{}", line.join(","));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, FieldError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head = lines
            .next()
            .ok_or(FieldError::Parse("missing header".into()))?;
        let nums = parse_u64_line(head)?;
        let [rows, cols, p] = nums[..] else {
            return Err(FieldError::Parse(format!(
                "header must be rows,cols,p: {head:?}"
            )));
        };
        let prime = Prime::new(p)?;
        let mut data = Vec::with_capacity((rows * cols) as usize);
        for line in lines {
            let vals = parse_u64_line(line)?;
            if vals.len() as u64 != cols {
                return Err(FieldError::Parse(format!(
                    "expected {cols} values, got {}",
                    vals.len()
                )));
            }
            data.extend(vals);
        }
        FieldMatrix::new(rows as usize, cols as usize, data, prime)
    }
}

fn parse_u64_line(line: &str) -> Result<Vec<u64>, FieldError> {
    line.split(',')
        .map(|t| {
            t.trim()
                .parse::<u64>()
                .map_err(|e| FieldError::Parse(format!("{t:?}: {e}")))
        })
        .collect()
}

impl SignedMatrix {
    pub fn get(&self, r: usize, c: usize) -> i64 {
        self.data[r * self.cols + c]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;

    fn p(n: u64) -> Prime {
        Prime::new(n).unwrap()
    }

    #[test]
    fn hand_computed_product_is_identity() {
        let a = FieldMatrix::from_rows(&[[2, 1], [3, 4]], p(11)).unwrap();
        let b = FieldMatrix::from_rows(&[[3, 2], [6, 7]], p(11)).unwrap();
        assert_eq!(a.matmul(&b).unwrap(), FieldMatrix::identity(2, p(11)));
    }

    #[test]
    fn identity_and_zero_products() {
        let mut rng = rng_from_seed(1);
        let a = FieldMatrix::random(&mut rng, 3, 4, Prime::p25());
        assert_eq!(
            a.matmul(&FieldMatrix::identity(4, Prime::p25())).unwrap(),
            a
        );
        assert!(a
            .matmul(&FieldMatrix::zeros(4, 2, Prime::p25()))
            .unwrap()
            .is_zero());
    }

    #[test]
    fn shape_and_prime_mismatch() {
        let a = FieldMatrix::zeros(2, 3, p(11));
        assert!(matches!(
            a.matmul(&FieldMatrix::zeros(2, 3, p(11))),
            Err(FieldError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            a.matmul(&FieldMatrix::zeros(3, 3, p(13))),
            Err(FieldError::PrimeMismatch { .. })
        ));
    }

    #[test]
    fn inverse_examples() {
        let a = FieldMatrix::from_rows(&[[2, 1], [3, 4]], p(11)).unwrap();
        let expect = FieldMatrix::from_rows(&[[3, 2], [6, 7]], p(11)).unwrap();
        assert_eq!(a.inverse().unwrap(), expect);
        assert_eq!(
            FieldMatrix::identity(3, p(11)).inverse().unwrap(),
            FieldMatrix::identity(3, p(11))
        );
        assert!(matches!(
            FieldMatrix::zeros(2, 2, p(11)).inverse(),
            Err(FieldError::Singular)
        ));
        assert!(matches!(
            FieldMatrix::zeros(2, 3, p(11)).inverse(),
            Err(FieldError::NotSquare(_))
        ));
    }

    #[test]
    fn inverse_needs_row_swap() {
        let a = FieldMatrix::from_rows(&[[0, 1], [1, 0]], p(7)).unwrap();
        assert_eq!(a.inverse().unwrap(), a);
    }

    #[test]
    fn rank_examples() {
        assert_eq!(FieldMatrix::identity(3, p(7)).rank(), 3);
        assert_eq!(
            FieldMatrix::from_rows(&[[1, 2], [2, 4]], p(7))
                .unwrap()
                .rank(),
            1
        );
        // rows independent over F_5: second row is not a multiple of the first
        let m = FieldMatrix::from_rows(&[[1, 2, 3, 4], [0, 1, 0, 1]], p(5)).unwrap();
        assert_eq!(m.rank(), 2);
        assert_eq!(FieldMatrix::zeros(3, 3, p(5)).rank(), 0);
        // dependent only modulo 5: [1,2] and [3,1] (3*[1,2] = [3,6] = [3,1])
        assert_eq!(
            FieldMatrix::from_rows(&[[1, 2], [3, 1]], p(5))
                .unwrap()
                .rank(),
            1
        );
    }

    #[test]
    fn random_is_seed_deterministic() {
        let a = FieldMatrix::random(&mut rng_from_seed(9), 4, 4, Prime::p25());
        let b = FieldMatrix::random(&mut rng_from_seed(9), 4, 4, Prime::p25());
        assert_eq!(a, b);
        let inv = FieldMatrix::random_invertible(&mut rng_from_seed(3), 3, Prime::p25()).unwrap();
        assert_eq!(inv.rank(), 3);
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let a = FieldMatrix::from_rows(&[[2, 1, 0], [3, 4, 10]], p(11)).unwrap();
        let text = a.to_csv();
        assert!(text.starts_with("2,3,11\n"));
        assert_eq!(FieldMatrix::from_csv(&text).unwrap(), a);
        assert!(FieldMatrix::from_csv("2,2,11\n1,2\n3,11\n").is_err());
        assert!(FieldMatrix::from_csv("2,2,12\n1,2\n3,4\n").is_err());
    }

    #[test]
    fn new_rejects_unreduced_entries() {
        assert!(matches!(
            FieldMatrix::new(1, 2, vec![3, 11], p(11)),
            Err(FieldError::InvalidResidue { value: 11, p: 11 })
        ));
    }

    #[test]
    fn parallel_and_sequential_products_agree() {
        let mut rng = rng_from_seed(5);
        let a = FieldMatrix::random(&mut rng, 40, 50, Prime::large());
        let b = FieldMatrix::random(&mut rng, 50, 30, Prime::large());
        assert_eq!(
            a.matmul_with(&b, Parallelism::Sequential).unwrap(),
            a.matmul_with(&b, Parallelism::Parallel).unwrap()
        );
    }
}
