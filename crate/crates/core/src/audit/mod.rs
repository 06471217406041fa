//! Seeded self-check suites behind the command-line driver.
//!
//! Every suite is a pure function of its config: instance `i` draws from its own
//! stream, so reports are identical across runs and execution modes.

pub mod bench;
pub mod codec_check;
pub mod integrity_audit;
pub mod privacy_audit;

use ndarray::Array2;
use rand::Rng as _;

use crate::field::{FieldMatrix, SignedMatrix};
use crate::quant::RealTensor;
use crate::seed::{domain, stream_id, stream_rng, Rng};

/// Stream for instance `i` of case `case` inside suite `suite`.
pub(crate) fn instance_rng(seed: u64, suite: u64, case: u64, i: u64) -> Rng {
    stream_rng(seed, stream_id(domain::TRIAL, suite << 40 | case << 32 | i))
}

pub(crate) fn uniform_tensor(rng: &mut Rng, rows: usize, cols: usize) -> RealTensor {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..=1.0))
}

/// Integer product of two lifted matrices; the independent oracle for field matmul.
pub(crate) fn integer_matmul(a: &SignedMatrix, b: &SignedMatrix) -> Vec<i128> {
    assert_eq!(a.cols, b.rows);
    let mut out = vec![0i128; a.rows * b.cols];
    for i in 0..a.rows {
        for t in 0..a.cols {
            let av = a.data[i * a.cols + t] as i128;
            for j in 0..b.cols {
                out[i * b.cols + j] += av * b.data[t * b.cols + j] as i128;
            }
        }
    }
    out
}

pub(crate) fn lifted_equals(m: &FieldMatrix, oracle: &[i128]) -> bool {
    m.lift()
        .data
        .iter()
        .zip(oracle)
        .all(|(&a, &b)| a as i128 == b)
        && m.data().len() == oracle.len()
}
