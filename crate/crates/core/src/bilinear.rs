//! Bilinear layer operations, in both F_p and real arithmetic.
//!
//! Inputs are stored one sample per column. A dense layer is `W x`; a convolution is
//! lowered with im2col to the same matrix product on a per-sample patch matrix, which
//! keeps it bilinear in `(W, x)` and therefore encodable.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::field::{FieldError, FieldMatrix};

/// Shape of a valid (unpadded) 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - self.kernel) / self.stride + 1
    }

    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Rows of the patch matrix: `in_ch * kernel^2`.
    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn input_len(&self) -> usize {
        self.in_ch * self.height * self.width
    }

    pub fn output_len(&self) -> usize {
        self.out_ch * self.positions()
    }

    pub fn is_valid(&self) -> bool {
        self.in_ch > 0
            && self.out_ch > 0
            && self.kernel > 0
            && self.stride > 0
            && self.kernel <= self.height
            && self.kernel <= self.width
    }

    /// `(patch_len x positions)` row-major patch matrix of one flattened `(c, h, w)` input.
    pub fn im2col<T: Copy>(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.input_len());
        let (k, s) = (self.kernel, self.stride);
        let (oh, ow) = (self.out_height(), self.out_width());
        let positions = oh * ow;
        let mut out = Vec::with_capacity(self.patch_len() * positions);
        for c in 0..self.in_ch {
            for ki in 0..k {
                for kj in 0..k {
                    for y in 0..oh {
                        for xx in 0..ow {
                            out.push(
                                x[c * self.height * self.width
                                    + (y * s + ki) * self.width
                                    + xx * s
                                    + kj],
                            );
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`ConvGeometry::im2col`]: scatters patch values back, summing overlaps.
    pub fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let (k, s) = (self.kernel, self.stride);
        let (oh, ow) = (self.out_height(), self.out_width());
        let mut out = vec![0.0; self.input_len()];
        let mut idx = 0;
        for c in 0..self.in_ch {
            for ki in 0..k {
                for kj in 0..k {
                    for y in 0..oh {
                        for xx in 0..ow {
                            out[c * self.height * self.width
                                + (y * s + ki) * self.width
                                + xx * s
                                + kj] += cols[idx];
                            idx += 1;
                        }
                    }
                }
            }
        }
        out
    }
}

/// The bilinear operator of an offloadable layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bilinear {
    Dense { in_dim: usize, out_dim: usize },
    Conv(ConvGeometry),
}

fn column_of(x: &FieldMatrix, c: usize) -> Vec<u64> {
    (0..x.rows()).map(|r| x.get(r, c)).collect()
}

impl Bilinear {
    pub fn input_dim(&self) -> usize {
        match self {
            Bilinear::Dense { in_dim, .. } => *in_dim,
            Bilinear::Conv(g) => g.input_len(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Bilinear::Dense { out_dim, .. } => *out_dim,
            Bilinear::Conv(g) => g.output_len(),
        }
    }

    pub fn weight_shape(&self) -> (usize, usize) {
        match self {
            Bilinear::Dense { in_dim, out_dim } => (*out_dim, *in_dim),
            Bilinear::Conv(g) => (g.out_ch, g.patch_len()),
        }
    }

    /// Number of products summed into one output entry.
    pub fn n_terms(&self) -> usize {
        self.weight_shape().1
    }

    /// Bias length (one per output row of the weight).
    pub fn bias_len(&self) -> usize {
        self.weight_shape().0
    }

    /// `<W, x>` per column over F_p.
    pub fn forward_field(
        &self,
        w: &FieldMatrix,
        x: &FieldMatrix,
    ) -> Result<FieldMatrix, FieldError> {
        match self {
            Bilinear::Dense { .. } => w.matmul(x),
            Bilinear::Conv(g) => {
                let p = x.prime();
                let mut cols = Vec::with_capacity(x.cols());
                for c in 0..x.cols() {
                    let patches = FieldMatrix::new(
                        g.patch_len(),
                        g.positions(),
                        g.im2col(&column_of(x, c)),
                        p,
                    )?;
                    let y = w.matmul(&patches)?;
                    cols.push(FieldMatrix::new(g.output_len(), 1, y.into_data(), p)?);
                }
                FieldMatrix::hstack_all(&cols)
            }
        }
    }

    /// Weight-shaped `sum_c <delta_c, x_c>` over F_p.
    pub fn grad_field(
        &self,
        delta: &FieldMatrix,
        x: &FieldMatrix,
    ) -> Result<FieldMatrix, FieldError> {
        match self {
            Bilinear::Dense { .. } => delta.matmul(&x.transpose()),
            Bilinear::Conv(g) => {
                let p = x.prime();
                let (r, c) = self.weight_shape();
                let mut acc = FieldMatrix::zeros(r, c, p);
                for col in 0..x.cols() {
                    let patches = FieldMatrix::new(
                        g.patch_len(),
                        g.positions(),
                        g.im2col(&column_of(x, col)),
                        p,
                    )?;
                    let d = FieldMatrix::new(g.out_ch, g.positions(), column_of(delta, col), p)?;
                    acc = acc.add(&d.matmul(&patches.transpose())?)?;
                }
                Ok(acc)
            }
        }
    }

    pub fn forward_real(&self, w: &Array2<f64>, x: &Array2<f64>) -> Array2<f64> {
        match self {
            Bilinear::Dense { .. } => w.dot(x),
            Bilinear::Conv(g) => {
                let mut out = Array2::zeros((g.output_len(), x.ncols()));
                for (c, col) in x.columns().into_iter().enumerate() {
                    let v: Vec<f64> = col.iter().copied().collect();
                    let patches =
                        Array2::from_shape_vec((g.patch_len(), g.positions()), g.im2col(&v))
                            .expect("im2col shape");
                    let y = w.dot(&patches);
                    for (i, val) in y.iter().enumerate() {
                        out[[i, c]] = *val;
                    }
                }
                out
            }
        }
    }

    pub fn grad_real(&self, delta: &Array2<f64>, x: &Array2<f64>) -> Array2<f64> {
        match self {
            Bilinear::Dense { .. } => delta.dot(&x.t()),
            Bilinear::Conv(g) => {
                let mut acc = Array2::zeros(self.weight_shape());
                for c in 0..x.ncols() {
                    let v: Vec<f64> = x.column(c).iter().copied().collect();
                    let patches =
                        Array2::from_shape_vec((g.patch_len(), g.positions()), g.im2col(&v))
                            .expect("im2col shape");
                    let d: Vec<f64> = delta.column(c).iter().copied().collect();
                    let d =
                        Array2::from_shape_vec((g.out_ch, g.positions()), d).expect("delta shape");
                    acc = acc + d.dot(&patches.t());
                }
                acc
            }
        }
    }

    /// Gradient with respect to the layer input: `W^T delta` (col2im'd for convolutions).
    pub fn input_grad_real(&self, w: &Array2<f64>, delta: &Array2<f64>) -> Array2<f64> {
        match self {
            Bilinear::Dense { .. } => w.t().dot(delta),
            Bilinear::Conv(g) => {
                let mut out = Array2::zeros((g.input_len(), delta.ncols()));
                for c in 0..delta.ncols() {
                    let d: Vec<f64> = delta.column(c).iter().copied().collect();
                    let d =
                        Array2::from_shape_vec((g.out_ch, g.positions()), d).expect("delta shape");
                    let cols = w.t().dot(&d);
                    let img = g.col2im(cols.as_slice().expect("standard layout"));
                    for (i, v) in img.into_iter().enumerate() {
                        out[[i, c]] = v;
                    }
                }
                out
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Prime;
    use crate::seed::rng_from_seed;
    use rand::Rng;

    fn geom() -> ConvGeometry {
        ConvGeometry {
            in_ch: 1,
            height: 6,
            width: 6,
            out_ch: 2,
            kernel: 3,
            stride: 1,
        }
    }

    /// Direct nested-loop convolution.
    fn naive_conv(g: &ConvGeometry, w: &Array2<f64>, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.output_len()];
        for o in 0..g.out_ch {
            for y in 0..g.out_height() {
                for xx in 0..g.out_width() {
                    let mut acc = 0.0;
                    for c in 0..g.in_ch {
                        for ki in 0..g.kernel {
                            for kj in 0..g.kernel {
                                let wv = w[[o, c * g.kernel * g.kernel + ki * g.kernel + kj]];
                                let xv = x[c * g.height * g.width
                                    + (y * g.stride + ki) * g.width
                                    + xx * g.stride
                                    + kj];
                                acc += wv * xv;
                            }
                        }
                    }
                    out[o * g.positions() + y * g.out_width() + xx] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_convolution() {
        let mut rng = rng_from_seed(11);
        for stride in [1, 2] {
            let g = ConvGeometry { stride, ..geom() };
            for _ in 0..20 {
                let w =
                    Array2::from_shape_fn(g.weight_shape_pair(), |_| rng.random_range(-1.0..1.0));
                let x: Vec<f64> = (0..g.input_len())
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect();
                let xm = Array2::from_shape_vec((g.input_len(), 1), x.clone()).unwrap();
                let y = Bilinear::Conv(g).forward_real(&w, &xm);
                let direct = naive_conv(&g, &w, &x);
                for (a, b) in y.iter().zip(&direct) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry {
            in_ch: 2,
            height: 5,
            width: 5,
            out_ch: 1,
            kernel: 2,
            stride: 1,
        };
        let mut rng = rng_from_seed(2);
        let x: Vec<f64> = (0..g.input_len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let y: Vec<f64> = (0..g.patch_len() * g.positions())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let lhs: f64 = g.im2col(&x).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(g.col2im(&y)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn conv_input_grad_matches_finite_difference() {
        let g = geom();
        let op = Bilinear::Conv(g);
        let mut rng = rng_from_seed(4);
        let w = Array2::from_shape_fn(g.weight_shape_pair(), |_| rng.random_range(-1.0..1.0));
        let x = Array2::from_shape_fn((g.input_len(), 1), |_| rng.random_range(-1.0..1.0));
        let d = Array2::from_shape_fn((g.output_len(), 1), |_| rng.random_range(-1.0..1.0));
        // loss = <d, conv(w, x)> is linear, so the gradients are exact
        let gx = op.input_grad_real(&w, &d);
        let gw = op.grad_real(&d, &x);
        let loss = |w: &Array2<f64>, x: &Array2<f64>| (&op.forward_real(w, x) * &d).sum();
        let h = 1e-6;
        for i in [0, 7, 20, 35] {
            let mut xp = x.clone();
            xp[[i, 0]] += h;
            let fd = (loss(&w, &xp) - loss(&w, &x)) / h;
            assert!((fd - gx[[i, 0]]).abs() < 1e-6);
        }
        for (r, c) in [(0, 0), (1, 4), (1, 8)] {
            let mut wp = w.clone();
            wp[[r, c]] += h;
            let fd = (loss(&wp, &x) - loss(&w, &x)) / h;
            assert!((fd - gw[[r, c]]).abs() < 1e-6);
        }
    }

    #[test]
    fn field_and_integer_conv_agree() {
        let g = geom();
        let op = Bilinear::Conv(g);
        let p = Prime::p25();
        let mut rng = rng_from_seed(8);
        let wi: Vec<i64> = (0..g.out_ch * g.patch_len())
            .map(|_| rng.random_range(-50..50))
            .collect();
        let xi: Vec<i64> = (0..g.input_len() * 2)
            .map(|_| rng.random_range(-50..50))
            .collect();
        let embed = |v: &[i64], r, c| {
            FieldMatrix::new(
                r,
                c,
                v.iter().map(|&z| p.embed_signed(z).unwrap()).collect(),
                p,
            )
            .unwrap()
        };
        let wf = embed(&wi, g.out_ch, g.patch_len());
        let xf = embed(&xi, g.input_len(), 2);
        let yf = op.forward_field(&wf, &xf).unwrap().lift();
        let wr = Array2::from_shape_vec(
            (g.out_ch, g.patch_len()),
            wi.iter().map(|&v| v as f64).collect(),
        )
        .unwrap();
        let xr = Array2::from_shape_vec((g.input_len(), 2), xi.iter().map(|&v| v as f64).collect())
            .unwrap();
        let yr = op.forward_real(&wr, &xr);
        for (a, b) in yf.data.iter().zip(yr.iter()) {
            assert_eq!(*a as f64, *b);
        }
        let d = embed(&xi[..g.output_len() * 2], g.output_len(), 2);
        let gf = op.grad_field(&d, &xf).unwrap().lift();
        let dr = Array2::from_shape_vec(
            (g.output_len(), 2),
            xi[..g.output_len() * 2].iter().map(|&v| v as f64).collect(),
        )
        .unwrap();
        let gr = op.grad_real(&dr, &xr);
        for (a, b) in gf.data.iter().zip(gr.iter()) {
            assert_eq!(*a as f64, *b);
        }
    }

    impl ConvGeometry {
        fn weight_shape_pair(&self) -> (usize, usize) {
            Bilinear::Conv(*self).weight_shape()
        }
    }
}
