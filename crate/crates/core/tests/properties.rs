//! Property tests: field axioms, lifting, matmul against a wide-integer oracle,
//! quantization bounds, codec roundtrip, the gradient trace identity and the
//! coefficient constraint.

use coded_offload::codec::{
    aggregate_gradient_field, decode_forward, decode_full, dense_backward_equation, encode,
    gen_backward_coeffs, verify_coeff_constraint, EncodingCoeffs, NoiseBlock,
};
use coded_offload::field::{FieldMatrix, Prime, P25, P61};
use coded_offload::quant::{
    dequantize, dequantize_result, dynamic_normalize, max_abs, quantize, round_half_up, QuantParams,
};
use coded_offload::seed::rng_from_seed;
use ndarray::Array2;
use proptest::prelude::*;

fn prime() -> impl Strategy<Value = Prime> {
    prop_oneof![Just(Prime::p25()), Just(Prime::large())]
}

fn residue_triple() -> impl Strategy<Value = (Prime, u64, u64, u64)> {
    prime().prop_flat_map(|p| {
        let r = 0..p.value();
        (Just(p), r.clone(), r.clone(), r)
    })
}

/// `rows x cols` matrix of residues plus the raw entries.
fn matrix(p: Prime, rows: usize, cols: usize) -> impl Strategy<Value = FieldMatrix> {
    proptest::collection::vec(0..p.value(), rows * cols)
        .prop_map(move |d| FieldMatrix::new(rows, cols, d, p).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn field_axioms((p, a, b, c) in residue_triple()) {
        prop_assert_eq!(p.add(a, b), p.add(b, a));
        prop_assert_eq!(p.mul(a, b), p.mul(b, a));
        prop_assert_eq!(p.add(p.add(a, b), c), p.add(a, p.add(b, c)));
        prop_assert_eq!(p.mul(p.mul(a, b), c), p.mul(a, p.mul(b, c)));
        prop_assert_eq!(p.mul(a, p.add(b, c)), p.add(p.mul(a, b), p.mul(a, c)));
        prop_assert_eq!(p.add(a, p.neg(a)), 0);
        prop_assert_eq!(p.sub(a, b), p.add(a, p.neg(b)));
        prop_assert_eq!(p.mul(a, 1), a);
        if a != 0 {
            prop_assert_eq!(p.mul(a, p.inv(a).unwrap()), 1);
        } else {
            prop_assert!(p.inv(a).is_err());
        }
    }

    #[test]
    fn products_match_wide_integers((p, a, b, _) in residue_triple()) {
        let wide = (a as u128 * b as u128 % p.value() as u128) as u64;
        prop_assert_eq!(p.mul(a, b), wide);
        prop_assert_eq!(p.add(a, b), ((a as u128 + b as u128) % p.value() as u128) as u64);
    }

    #[test]
    fn lift_inverts_embed(p in prime(), frac in -1.0f64..1.0) {
        let half = (p.value() / 2) as f64;
        let z = (frac * half) as i64;
        let e = p.embed_signed(z).unwrap();
        prop_assert!(e < p.value());
        prop_assert_eq!(p.lift_signed(e), z);
    }

    #[test]
    fn matmul_matches_integer_oracle(
        (a, b) in (prime(), 1usize..6, 1usize..6, 1usize..6)
            .prop_flat_map(|(p, r, k, c)| (matrix(p, r, k), matrix(p, k, c)))
    ) {
        let p = a.prime().value() as u128;
        let got = a.matmul(&b).unwrap();
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let want = (0..a.cols()).fold(0u128, |acc, t| (acc + a.get(i, t) as u128 * b.get(t, j) as u128) % p);
                prop_assert_eq!(got.get(i, j) as u128, want);
            }
        }
    }

    #[test]
    fn inverse_is_two_sided(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = rng_from_seed(seed);
        let p = Prime::p25();
        let a = FieldMatrix::random_invertible(&mut rng, n, p).unwrap();
        let inv = a.inverse().unwrap();
        prop_assert_eq!(a.matmul(&inv).unwrap(), FieldMatrix::identity(n, p));
        prop_assert_eq!(inv.matmul(&a).unwrap(), FieldMatrix::identity(n, p));
    }

    #[test]
    fn quantization_error_is_half_a_step(values in proptest::collection::vec(-1.0e4f64..1.0e4, 1..64), l in 1u32..10) {
        let q = QuantParams::new(l, Prime::p25()).unwrap();
        let x = Array2::from_shape_vec((values.len(), 1), values).unwrap();
        let back = dequantize(&quantize(&x, &q).unwrap(), &q);
        for (u, v) in x.iter().zip(back.iter()) {
            prop_assert!((u - v).abs() <= 0.5 * q.resolution() + 1e-12);
        }
    }

    #[test]
    fn quantize_is_odd_off_half_steps(v in -100.0f64..100.0) {
        let q = QuantParams::standard();
        let scaled = v * q.scale();
        prop_assume!((scaled - scaled.floor() - 0.5).abs() > 1e-9);
        let x = Array2::from_elem((1, 1), v);
        let pos = quantize(&x, &q).unwrap();
        let neg = quantize(&x.mapv(|t| -t), &q).unwrap();
        prop_assert_eq!(neg, pos.neg());
    }

    #[test]
    fn round_half_up_rule(v in -1.0e6f64..1.0e6) {
        let r = round_half_up(v) as f64;
        let f = v.floor();
        prop_assert_eq!(r, if v - f < 0.5 { f } else { f + 1.0 });
        prop_assert!((r - v).abs() <= 0.5);
    }

    #[test]
    fn result_dequantization_lands_on_the_grid(z in -1_000_000i64..1_000_000) {
        let q = QuantParams::standard();
        let y = FieldMatrix::new(1, 1, vec![Prime::p25().embed_signed(z).unwrap()], Prime::p25()).unwrap();
        let r = dequantize_result(&y, &q)[[0, 0]];
        let exact = z as f64 * q.resolution() * q.resolution();
        prop_assert!((r - exact).abs() <= 0.5 * q.resolution() + 1e-12);
        prop_assert_eq!((r * q.scale()).fract(), 0.0);
    }

    #[test]
    fn normalization_bounds_entries(values in proptest::collection::vec(-1.0e6f64..1.0e6, 1..32)) {
        let x = Array2::from_shape_vec((1, values.len()), values).unwrap();
        let (n, s) = dynamic_normalize(&x);
        prop_assert!(max_abs(&n) <= 1.0 + 1e-12);
        for (u, v) in x.iter().zip(n.iter()) {
            prop_assert!((v * s - u).abs() <= 1e-9 * u.abs().max(1.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decode_recovers_the_product(seed in any::<u64>(), k in 1usize..5, m in 1usize..3, n in 1usize..9, o in 1usize..9, large in any::<bool>()) {
        let p = if large { Prime::large() } else { Prime::p25() };
        let mut rng = rng_from_seed(seed);
        let c = EncodingCoeffs::generate(&mut rng, k, m, p).unwrap();
        let x = FieldMatrix::random(&mut rng, n, k, p);
        let w = FieldMatrix::random(&mut rng, o, n, p);
        let r = NoiseBlock::generate(&mut rng, n, m, p);
        let shares = encode(&x, &r, &c).unwrap();
        let ybar = w.matmul(shares.matrix()).unwrap();
        prop_assert_eq!(decode_forward(&ybar, &c).unwrap(), w.matmul(&x).unwrap());
        // the noise columns come back as W R
        let full = decode_full(&ybar, &c).unwrap();
        let noise_cols: Vec<usize> = (k..k + m).collect();
        prop_assert_eq!(full.select_columns(&noise_cols), w.matmul(r.matrix()).unwrap());
    }

    #[test]
    fn trace_identity_holds(seed in any::<u64>(), k in 1usize..5, m in 1usize..3, n in 1usize..7, o in 1usize..7) {
        let p = Prime::p25();
        let mut rng = rng_from_seed(seed);
        let c = EncodingCoeffs::generate(&mut rng, k, m, p).unwrap();
        let x = FieldMatrix::random(&mut rng, n, k, p);
        let d = FieldMatrix::random(&mut rng, o, k, p);
        let shares = encode(&x, &NoiseBlock::generate(&mut rng, n, m, p), &c).unwrap();
        let bc = gen_backward_coeffs(&mut rng, &c).unwrap();
        prop_assert!(verify_coeff_constraint(&c, &bc));
        let eqs: Vec<FieldMatrix> = (0..shares.len())
            .map(|j| dense_backward_equation(&d, bc.beta_row(j), &shares.share(j)).unwrap())
            .collect();
        prop_assert_eq!(aggregate_gradient_field(&eqs, &bc).unwrap(), d.matmul(&x.transpose()).unwrap());
    }

    #[test]
    fn constraint_holds_for_every_generation(seed in any::<u64>(), k in 1usize..5, m in 1usize..3) {
        let mut rng = rng_from_seed(seed);
        let c = EncodingCoeffs::generate(&mut rng, k, m, Prime::p25()).unwrap();
        let bc = gen_backward_coeffs(&mut rng, &c).unwrap();
        prop_assert!(verify_coeff_constraint(&c, &bc));
        prop_assert!(c.noise_is_mds());
        prop_assert!(bc.gamma().iter().all(|&g| g != 0));
    }
}

#[test]
fn primes_are_the_documented_constants() {
    assert_eq!(P25, (1 << 25) - 39);
    assert_eq!(P61, (1 << 61) - 1);
}
