//! Exact arithmetic and linear algebra over a prime field.

mod matrix;
mod prime;

pub use matrix::{FieldMatrix, SignedMatrix, MAX_RESAMPLES};
pub use prime::{is_prime, Prime, P25, P61};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FieldError {
    #[error("zero has no multiplicative inverse")]
    ZeroInverse,
    #[error("integer {value} is outside (-{p}, {p})")]
    OutOfRange { value: i128, p: u64 },
    #[error("{value} is not a residue modulo {p}")]
    InvalidResidue { value: u64, p: u64 },
    #[error("{0} is not prime")]
    NotPrime(u64),
    #[error("prime {0} is below the minimum of 5")]
    PrimeTooSmall(u64),
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("prime mismatch: {left} vs {right}")]
    PrimeMismatch { left: u64, right: u64 },
    #[error("matrix of shape {0:?} is not square")]
    NotSquare((usize, usize)),
    #[error("matrix is singular")]
    Singular,
    #[error("no acceptable random matrix after {attempts} attempts")]
    GenerationFailure { attempts: usize },
    #[error("expected {expected} elements, got {got}")]
    BadLength { expected: usize, got: usize },
    #[error("empty input")]
    Empty,
    #[error("parse error: {0}")]
    Parse(String),
}
