//! Floating-point reference path with the same architecture, seeds and batching.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{sgd_step, Dataset, Gradients, LayerGrad, LayerKind, ModelState, TrainConfig};
use crate::quant::RealTensor;
use crate::seed::{domain, stream_id, stream_rng};

/// Coordinator-side state of a non-linear layer, needed for its derivative.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum ActCache {
    Relu {
        pre: RealTensor,
    },
    Pool {
        argmax: Vec<Vec<usize>>,
        input_len: usize,
    },
}

pub(crate) fn activation_forward(kind: &LayerKind, x: &RealTensor) -> (RealTensor, ActCache) {
    match kind {
        LayerKind::ReLU => (x.mapv(|v| v.max(0.0)), ActCache::Relu { pre: x.clone() }),
        LayerKind::MaxPool(g) => {
            let mut out = Array2::zeros((g.output_len(), x.ncols()));
            let mut argmax = Vec::with_capacity(x.ncols());
            for (c, col) in x.axis_iter(Axis(1)).enumerate() {
                let v: Vec<f64> = col.iter().copied().collect();
                let (vals, arg) = g.forward(&v);
                for (i, val) in vals.into_iter().enumerate() {
                    out[[i, c]] = val;
                }
                argmax.push(arg);
            }
            (
                out,
                ActCache::Pool {
                    argmax,
                    input_len: g.input_len(),
                },
            )
        }
        LayerKind::Dense { .. } | LayerKind::Conv2D(_) => {
            unreachable!("linear layers are not activations")
        }
    }
}

pub(crate) fn activation_backward(cache: &ActCache, delta: &RealTensor) -> RealTensor {
    match cache {
        ActCache::Relu { pre } => {
            let mut d = delta.clone();
            d.zip_mut_with(pre, |g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
            d
        }
        ActCache::Pool { argmax, input_len } => {
            let mut out = Array2::zeros((*input_len, delta.ncols()));
            for (c, arg) in argmax.iter().enumerate() {
                for (o, &i) in arg.iter().enumerate() {
                    out[[i, c]] += delta[[o, c]];
                }
            }
            out
        }
    }
}

/// Mean cross-entropy of softmax(logits), the per-sample gradient `softmax - onehot`,
/// and the number of correct argmax predictions.
pub fn softmax_cross_entropy(logits: &RealTensor, labels: &[usize]) -> (f64, RealTensor, usize) {
    let mut grad = Array2::zeros(logits.dim());
    let mut loss = 0.0;
    let mut correct = 0;
    for (c, col) in logits.axis_iter(Axis(1)).enumerate() {
        let max = col.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let exps: Vec<f64> = col.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let label = labels[c];
        loss += sum.ln() - (col[label] - max);
        for (r, e) in exps.iter().enumerate() {
            grad[[r, c]] = e / sum - f64::from(u8::from(r == label));
        }
        // first maximal index, matching a stable argmax
        let pred = col
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > col[best] { i } else { best });
        correct += usize::from(pred == label);
    }
    (loss / labels.len().max(1) as f64, grad, correct)
}

pub(crate) struct PlainCache {
    inputs: Vec<RealTensor>,
    acts: Vec<Option<ActCache>>,
}

pub(crate) fn forward_plain(model: &ModelState, x: &RealTensor) -> (RealTensor, PlainCache) {
    let mut cur = x.clone();
    let mut inputs = Vec::with_capacity(model.layers.len());
    let mut acts = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        inputs.push(cur.clone());
        match layer.spec.bilinear() {
            Some(op) => {
                let mut y =
                    op.forward_real(layer.w.as_ref().expect("linear layer has weights"), &cur);
                if let Some(b) = &layer.b {
                    add_bias(&mut y, b, &op);
                }
                acts.push(None);
                cur = y;
            }
            None => {
                let (y, cache) = activation_forward(&layer.spec.kind, &cur);
                acts.push(Some(cache));
                cur = y;
            }
        }
    }
    (cur, PlainCache { inputs, acts })
}

/// Adds a per-weight-row bias; a convolution repeats it over every output position.
pub(crate) fn add_bias(y: &mut RealTensor, b: &RealTensor, op: &crate::bilinear::Bilinear) {
    let rows = b.nrows();
    let reps = op.output_dim() / rows;
    for mut col in y.axis_iter_mut(Axis(1)) {
        for (i, v) in col.iter_mut().enumerate() {
            *v += b[[i / reps, 0]];
        }
    }
}

/// Bias gradient `(1/K) sum_i δ_i`, summed over output positions for convolutions.
pub(crate) fn bias_grad(delta: &RealTensor, rows: usize) -> RealTensor {
    let k = delta.ncols() as f64;
    let reps = delta.nrows() / rows;
    let mut g = Array2::zeros((rows, 1));
    for ((r, _), v) in delta.indexed_iter() {
        g[[r / reps, 0]] += v / k;
    }
    g
}

pub(crate) fn backward_plain(
    model: &ModelState,
    cache: &PlainCache,
    dlogits: &RealTensor,
) -> Gradients {
    let k = dlogits.ncols() as f64;
    let mut delta = dlogits.clone();
    let mut grads = vec![None; model.layers.len()];
    for (l, layer) in model.layers.iter().enumerate().rev() {
        match (layer.spec.bilinear(), &cache.acts[l]) {
            (Some(op), _) => {
                let w = layer.w.as_ref().expect("linear layer has weights");
                let gw = op.grad_real(&delta, &cache.inputs[l]) / k;
                let gb = layer.b.as_ref().map(|b| bias_grad(&delta, b.nrows()));
                grads[l] = Some(LayerGrad { w: gw, b: gb });
                if l > 0 {
                    delta = op.input_grad_real(w, &delta);
                }
            }
            (None, Some(act)) => delta = activation_backward(act, &delta),
            (None, None) => unreachable!("activation without cache"),
        }
    }
    Gradients { layers: grads }
}

/// Average gradient of one batch (columns of `x`).
pub fn plain_gradients(model: &ModelState, x: &RealTensor, labels: &[usize]) -> (Gradients, f64) {
    let (logits, cache) = forward_plain(model, x);
    let (loss, dlogits, _) = softmax_cross_entropy(&logits, labels);
    (backward_plain(model, &cache, &dlogits), loss)
}

/// Mean loss and accuracy over the whole dataset.
pub fn evaluate(model: &ModelState, data: &Dataset) -> (f64, f64) {
    if data.is_empty() {
        return (0.0, 0.0);
    }
    let (logits, _) = forward_plain(model, &data.x);
    let (loss, _, correct) = softmax_cross_entropy(&logits, &data.labels);
    (loss, correct as f64 / data.len() as f64)
}

/// Sample order for `epoch`; the trailing partial large batch is dropped.
pub(crate) fn epoch_batches(
    seed: u64,
    epoch: usize,
    n: usize,
    large_batch: usize,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, stream_id(domain::DATA, 1 << 32 | epoch as u64));
    order.shuffle(&mut rng);
    order
        .chunks_exact(large_batch)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Mean of per-virtual-batch mean gradients.
pub(crate) fn mean_gradients(parts: &[Gradients]) -> Gradients {
    let n = parts.len() as f64;
    let mut acc = parts[0].clone();
    for g in &parts[1..] {
        for (a, b) in acc.layers.iter_mut().zip(&g.layers) {
            if let (Some(a), Some(b)) = (a.as_mut(), b) {
                a.w += &b.w;
                if let (Some(x), Some(y)) = (a.b.as_mut(), b.b.as_ref()) {
                    *x += y;
                }
            }
        }
    }
    for a in acc.layers.iter_mut().flatten() {
        a.w /= n;
        if let Some(b) = a.b.as_mut() {
            *b /= n;
        }
    }
    acc
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlainEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub acc: f64,
}

/// Float-only training with the encoded path's batching: virtual batches of `K`,
/// large-batch gradient = mean of virtual-batch means, one SGD step per large batch.
/// Row 0 reports the initial model.
pub fn plaintext_reference_train(
    model0: &ModelState,
    data: &Dataset,
    cfg: &TrainConfig,
) -> (ModelState, Vec<PlainEpoch>) {
    let mut model = model0.clone();
    let (loss, acc) = evaluate(&model, data);
    let mut metrics = vec![PlainEpoch {
        epoch: 0,
        loss,
        acc,
    }];
    for epoch in 1..=cfg.epochs {
        for large in epoch_batches(cfg.seed, epoch, data.len(), cfg.large_batch) {
            let parts: Vec<Gradients> = large
                .chunks(cfg.k)
                .map(|idx| {
                    let (x, labels) = data.batch(idx);
                    plain_gradients(&model, &x, &labels).0
                })
                .collect();
            let lr = model.lr;
            sgd_step(&mut model, &mean_gradients(&parts), lr);
        }
        let (loss, acc) = evaluate(&model, data);
        metrics.push(PlainEpoch { epoch, loss, acc });
    }
    (model, metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bilinear::ConvGeometry;
    use crate::trainer::{LayerSpec, PoolGeometry};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng as _;

    fn loss_of(model: &ModelState, x: &RealTensor, labels: &[usize]) -> f64 {
        let (logits, _) = forward_plain(model, x);
        softmax_cross_entropy(&logits, labels).0
    }

    /// Central differences on every parameter.
    fn check_gradients(model: &ModelState, x: &RealTensor, labels: &[usize]) {
        let (g, _) = plain_gradients(model, x, labels);
        let h = 1e-6;
        for (l, layer) in model.layers.iter().enumerate() {
            let Some(w) = &layer.w else { continue };
            for idx in (0..w.len()).step_by(3) {
                let (r, c) = (idx / w.ncols(), idx % w.ncols());
                let mut plus = model.clone();
                plus.layers[l].w.as_mut().unwrap()[[r, c]] += h;
                let mut minus = model.clone();
                minus.layers[l].w.as_mut().unwrap()[[r, c]] -= h;
                let fd = (loss_of(&plus, x, labels) - loss_of(&minus, x, labels)) / (2.0 * h);
                assert_abs_diff_eq!(g.layers[l].as_ref().unwrap().w[[r, c]], fd, epsilon = 1e-6);
            }
            if let Some(b) = &layer.b {
                for r in 0..b.nrows() {
                    let mut plus = model.clone();
                    plus.layers[l].b.as_mut().unwrap()[[r, 0]] += h;
                    let mut minus = model.clone();
                    minus.layers[l].b.as_mut().unwrap()[[r, 0]] -= h;
                    let fd = (loss_of(&plus, x, labels) - loss_of(&minus, x, labels)) / (2.0 * h);
                    assert_abs_diff_eq!(
                        g.layers[l].as_ref().unwrap().b.as_ref().unwrap()[[r, 0]],
                        fd,
                        epsilon = 1e-6
                    );
                }
            }
        }
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut model = ModelState::mlp(2, 5, 3, 0.1, 7).unwrap();
        let mut rng = crate::seed::rng_from_seed(1);
        for b in model.layers.iter_mut().filter_map(|l| l.b.as_mut()) {
            b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        let x = Array2::from_shape_fn((2, 4), |_| rng.random_range(-1.0..1.0));
        check_gradients(&model, &x, &[0, 2, 1, 1]);
    }

    #[test]
    fn conv_pool_gradients_match_finite_differences() {
        let conv = ConvGeometry {
            in_ch: 1,
            height: 6,
            width: 6,
            out_ch: 2,
            kernel: 3,
            stride: 1,
        };
        let pool = PoolGeometry {
            channels: 2,
            height: 4,
            width: 4,
            window: 2,
        };
        let net = [
            LayerSpec::conv(conv),
            LayerSpec::relu(),
            LayerSpec::max_pool(pool),
            LayerSpec::dense(8, 2),
        ];
        let model = ModelState::init(&net, 0.1, 3).unwrap();
        let mut rng = crate::seed::rng_from_seed(2);
        let x = Array2::from_shape_fn((36, 2), |_| rng.random_range(-1.0..1.0));
        check_gradients(&model, &x, &[1, 0]);
    }

    #[test]
    fn softmax_reference_values() {
        // logits (0, ln 3): softmax (1/4, 3/4)
        let logits = array![[0.0], [3f64.ln()]];
        let (loss, grad, correct) = softmax_cross_entropy(&logits, &[1]);
        assert_abs_diff_eq!(loss, -(0.75f64).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(grad[[0, 0]], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(grad[[1, 0]], -0.25, epsilon = 1e-15);
        assert_eq!(correct, 1);
    }

    #[test]
    fn zero_epochs_returns_the_initial_model() {
        let model = ModelState::mlp(2, 4, 2, 0.1, 0).unwrap();
        let data = Dataset::xor(40, 0);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (out, metrics) = plaintext_reference_train(&model, &data, &cfg);
        assert_eq!(out, model);
        assert_eq!(metrics.len(), 1);
    }

    #[test]
    fn reference_training_is_deterministic() {
        let model = ModelState::mlp(2, 8, 2, 0.2, 0).unwrap();
        let data = Dataset::two_moons(60, 0.1, 0);
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        assert_eq!(
            plaintext_reference_train(&model, &data, &cfg),
            plaintext_reference_train(&model, &data, &cfg)
        );
    }

    #[test]
    fn xor_is_learned_by_a_small_network() {
        let data = Dataset::xor(500, 0);
        let model = ModelState::mlp(2, 16, 2, 0.5, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 150,
            k: 2,
            large_batch: 10,
            ..TrainConfig::default()
        };
        let (_, metrics) = plaintext_reference_train(&model, &data, &cfg);
        assert!(metrics.last().unwrap().acc >= 0.95, "{:?}", metrics.last());
    }
}
