//! The coordinator: encoded forward and backward passes and the training loop.
//!
//! Every Dense or Conv2D product that touches sensitive inputs goes through
//! `encode -> dispatch -> decode`. Weight gradients come back only as the
//! γ-weighted sum of worker equations, so the coordinator never forms a
//! per-input outer product. Activations, their derivatives, biases and the
//! loss run on the coordinator in real arithmetic. The unencoded `W^T δ`
//! products run at a single worker.

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::plain::{
    activation_backward, activation_forward, bias_grad, epoch_batches, evaluate,
    plaintext_reference_train, softmax_cross_entropy, ActCache, PlainEpoch,
};
use super::seal::{seal_gradient, update_aggregation, SealStore};
use super::{
    sgd_step, Dataset, EpochMetrics, Gradients, LayerGrad, LayerSpec, ModelState, Phase,
    TrainConfig, TrainError,
};
use crate::bilinear::Bilinear;
use crate::codec::integrity::{decode_with_verification, IntegrityCoeffs, Verdict};
use crate::codec::{
    aggregate_gradient_field, decode_forward, encode, gen_backward_coeffs, EncodingCoeffs,
    NoiseBlock,
};
use crate::field::FieldMatrix;
use crate::quant::{
    dequantize_exact, dequantize_result, dynamic_normalize, fits_budget, max_abs, quantize,
    quantize_bias, QuantError, QuantParams, RealTensor,
};
use crate::seed::{domain, rng_from_seed, stream_id, stream_rng, Rng};
use crate::workers::{CollusionLedger, WorkerPool};

enum LayerCache {
    Linear {
        input: RealTensor,
        coeffs: EncodingCoeffs,
        integrity: Option<IntegrityCoeffs>,
        /// The shares encode `input / x_scale`.
        x_scale: f64,
    },
    Act(ActCache),
}

/// Coordinator state of one virtual batch between its forward and backward pass.
pub struct ForwardCache {
    pub batch_id: u64,
    pub logits: RealTensor,
    layers: Vec<LayerCache>,
    rng: Rng,
}

/// Gradients of one virtual batch and the largest weight-gradient deviation from
/// the plaintext product on the same operands (0 when the oracle is off).
#[derive(Debug, Clone)]
pub struct BackwardResult {
    pub grads: Gradients,
    pub max_parity_delta: f64,
    /// Deviation divided by [`operand_scale`] of the layer it came from.
    pub max_parity_scaled: f64,
}

/// Quantization error of `(1/K) sum δ x^T` grows as `2^-(l+1) (|δ| + |x|)`; this is that
/// magnitude relative to unit-range operands, floored at 1.
pub fn operand_scale(x: &RealTensor, delta: &RealTensor) -> f64 {
    ((max_abs(x) + max_abs(delta)) / 2.0).max(1.0)
}

fn violation(batch: u64, layer: usize, phase: Phase) -> TrainError {
    TrainError::IntegrityViolation {
        batch,
        layer,
        phase,
    }
}

/// Bias at the product scale `2^(2l)`, repeated over output positions.
fn expanded_bias(
    b: &RealTensor,
    op: &Bilinear,
    scale: f64,
    q: &QuantParams,
) -> Result<FieldMatrix, TrainError> {
    let reps = op.output_dim() / b.nrows();
    let col = Array2::from_shape_fn((op.output_dim(), 1), |(i, _)| b[[i / reps, 0]] / scale);
    Ok(quantize_bias(&col, q)?)
}

/// Owns the worker pool and runs offloads for one training run.
pub struct Coordinator {
    cfg: TrainConfig,
    pool: WorkerPool,
}

impl Coordinator {
    pub fn new(cfg: &TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let pool = WorkerPool::new(&cfg.pool_behaviors(), cfg.seed, cfg.mode)?;
        Ok(Coordinator {
            cfg: cfg.clone(),
            pool,
        })
    }

    pub fn pool(&self) -> &WorkerPool {
        &self.pool
    }

    pub fn pool_mut(&mut self) -> &mut WorkerPool {
        &mut self.pool
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Drops the workers' cached shares of a finished virtual batch.
    pub fn release(&mut self, batch_id: u64) {
        self.pool.release(batch_id);
    }

    #[allow(clippy::too_many_arguments)]
    fn offload_forward(
        &mut self,
        rng: &mut Rng,
        op: &Bilinear,
        w: &RealTensor,
        b: Option<&RealTensor>,
        x: &RealTensor,
        batch: u64,
        layer: usize,
    ) -> Result<(RealTensor, EncodingCoeffs, Option<IntegrityCoeffs>, f64), TrainError> {
        let q = self.cfg.quant;
        let n = op.n_terms();
        let bias_bound = b.map_or(0.0, max_abs);
        let (mut xs, mut sx) = (x.clone(), 1.0);
        let (mut ws, mut sw) = (w.clone(), 1.0);
        if !fits_budget(&q, n, max_abs(x), max_abs(w), bias_bound) {
            (xs, sx) = dynamic_normalize(x);
            (ws, sw) = dynamic_normalize(w);
            if !fits_budget(&q, n, max_abs(&xs), max_abs(&ws), bias_bound / (sx * sw)) {
                return Err(QuantError::OverflowBudget {
                    value: bias_bound / (sx * sw),
                    half_p: q.prime().value() as f64 / 2.0,
                }
                .into());
            }
        }
        let xq = quantize(&xs, &q)?;
        let wq = quantize(&ws, &q)?;
        let p = q.prime();
        let coeffs = EncodingCoeffs::generate(rng, self.cfg.k, self.cfg.m, p)?;
        let noise = NoiseBlock::generate(rng, xq.rows(), self.cfg.m, p);
        let (yq, integrity) = if self.cfg.integrity {
            let ic = IntegrityCoeffs::generate(rng, &coeffs)?;
            let shares = ic.encode(&xq, &noise)?.with_ids(batch, layer);
            let ybar = FieldMatrix::hstack_all(&self.pool.dispatch_forward(op, &wq, &shares)?)?;
            let (yq, verdict) = decode_with_verification(&ybar, &ic)?;
            if verdict == Verdict::Violation {
                return Err(violation(batch, layer, Phase::Forward));
            }
            (yq, Some(ic))
        } else {
            let shares = encode(&xq, &noise, &coeffs)?.with_ids(batch, layer);
            let ybar = FieldMatrix::hstack_all(&self.pool.dispatch_forward(op, &wq, &shares)?)?;
            (decode_forward(&ybar, &coeffs)?, None)
        };
        let yq = match b {
            Some(b) => yq.add_column_broadcast(&expanded_bias(b, op, sx * sw, &q)?)?,
            None => yq,
        };
        let y = dequantize_result(&yq, &q) * (sx * sw);
        Ok((y, coeffs, integrity, sx))
    }

    /// Runs the network on a virtual batch (`K` columns), offloading every linear layer.
    pub fn forward_pass(
        &mut self,
        model: &ModelState,
        x: &RealTensor,
        batch_id: u64,
    ) -> Result<ForwardCache, TrainError> {
        if x.ncols() != self.cfg.k {
            return Err(TrainError::Config(format!(
                "batch has {} inputs, K = {}",
                x.ncols(),
                self.cfg.k
            )));
        }
        let mut rng = stream_rng(self.cfg.seed, stream_id(domain::COORDINATOR, batch_id));
        let mut cur = x.clone();
        let mut layers = Vec::with_capacity(model.layers.len());
        for (l, layer) in model.layers.iter().enumerate() {
            match layer.spec.bilinear() {
                Some(op) => {
                    let w = layer.w.as_ref().expect("linear layer has weights");
                    let out =
                        self.offload_forward(&mut rng, &op, w, layer.b.as_ref(), &cur, batch_id, l);
                    let (y, coeffs, integrity, x_scale) = match out {
                        Ok(v) => v,
                        Err(e) => {
                            self.pool.release(batch_id);
                            return Err(e);
                        }
                    };
                    layers.push(LayerCache::Linear {
                        input: cur,
                        coeffs,
                        integrity,
                        x_scale,
                    });
                    cur = y;
                }
                None => {
                    let (y, cache) = activation_forward(&layer.spec.kind, &cur);
                    layers.push(LayerCache::Act(cache));
                    cur = y;
                }
            }
        }
        Ok(ForwardCache {
            batch_id,
            logits: cur,
            layers,
            rng,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn offload_weight_grad(
        &mut self,
        rng: &mut Rng,
        op: &Bilinear,
        delta: &RealTensor,
        coeffs: &EncodingCoeffs,
        integrity: Option<&IntegrityCoeffs>,
        x_bound: f64,
        x_scale: f64,
        batch: u64,
        layer: usize,
    ) -> Result<RealTensor, TrainError> {
        let q = self.cfg.quant;
        let k = self.cfg.k;
        let terms = k * (op.output_dim() / op.bias_len());
        let (mut ds, mut sd) = (delta.clone(), 1.0);
        if !fits_budget(&q, terms, max_abs(delta), x_bound, 0.0) {
            (ds, sd) = dynamic_normalize(delta);
            if !fits_budget(&q, terms, max_abs(&ds), x_bound, 0.0) {
                return Err(QuantError::OverflowBudget {
                    value: x_bound,
                    half_p: q.prime().value() as f64 / 2.0,
                }
                .into());
            }
        }
        let dq = quantize(&ds, &q)?;
        let sum = match integrity {
            Some(ic) => {
                let total = ic.total_shares();
                let (first, second) = ic.gen_backward_pair(rng)?;
                let e1 =
                    self.pool
                        .dispatch_backward_eq(op, &dq, &first.b_full(total), batch, layer)?;
                let e2 =
                    self.pool
                        .dispatch_backward_eq(op, &dq, &second.b_full(total), batch, layer)?;
                let s1 = first.aggregate_field(&e1)?;
                if s1 != second.aggregate_field(&e2)? {
                    return Err(violation(batch, layer, Phase::Backward));
                }
                s1
            }
            None => {
                let bc = gen_backward_coeffs(rng, coeffs)?;
                let eqs = self
                    .pool
                    .dispatch_backward_eq(op, &dq, bc.b(), batch, layer)?;
                aggregate_gradient_field(&eqs, &bc)?
            }
        };
        Ok(dequantize_exact(&sum, 2 * q.frac_bits()) * (x_scale * sd / k as f64))
    }

    fn input_grad(
        &mut self,
        op: &Bilinear,
        w: &RealTensor,
        delta: &RealTensor,
        batch: u64,
        layer: usize,
    ) -> Result<RealTensor, TrainError> {
        let d = self
            .pool
            .dispatch_input_grad(0, op, w, delta, batch, layer)?;
        if self.cfg.integrity {
            let check = self
                .pool
                .dispatch_input_grad(1, op, w, delta, batch, layer)?;
            if check != d {
                return Err(violation(batch, layer, Phase::InputGradient));
            }
        }
        Ok(d)
    }

    fn backward_inner(
        &mut self,
        model: &ModelState,
        cache: &mut ForwardCache,
        dlogits: &RealTensor,
    ) -> Result<BackwardResult, TrainError> {
        let batch = cache.batch_id;
        let k = self.cfg.k as f64;
        let mut delta = dlogits.clone();
        let mut grads = vec![None; model.layers.len()];
        let mut max_parity_delta = 0.0f64;
        let mut max_parity_scaled = 0.0f64;
        for l in (0..model.layers.len()).rev() {
            let layer = &model.layers[l];
            match &cache.layers[l] {
                LayerCache::Act(act) => delta = activation_backward(act, &delta),
                LayerCache::Linear {
                    input,
                    coeffs,
                    integrity,
                    x_scale,
                } => {
                    let op = layer
                        .spec
                        .bilinear()
                        .expect("linear cache belongs to a linear layer");
                    let w = layer.w.as_ref().expect("linear layer has weights");
                    let x_bound = max_abs(input) / x_scale;
                    let gw = self.offload_weight_grad(
                        &mut cache.rng,
                        &op,
                        &delta,
                        coeffs,
                        integrity.as_ref(),
                        x_bound,
                        *x_scale,
                        batch,
                        l,
                    )?;
                    if self.cfg.parity_oracle {
                        let reference = op.grad_real(&delta, input) / k;
                        let dev = gw
                            .iter()
                            .zip(reference.iter())
                            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                        max_parity_delta = max_parity_delta.max(dev);
                        max_parity_scaled =
                            max_parity_scaled.max(dev / operand_scale(input, &delta));
                    }
                    let gb = layer.b.as_ref().map(|b| bias_grad(&delta, b.nrows()));
                    grads[l] = Some(LayerGrad { w: gw, b: gb });
                    if l > 0 {
                        delta = self.input_grad(&op, w, &delta, batch, l)?;
                    }
                }
            }
        }
        Ok(BackwardResult {
            grads: Gradients { layers: grads },
            max_parity_delta,
            max_parity_scaled,
        })
    }

    /// Weight gradients of a virtual batch from the loss gradient `dlogits`
    /// (`softmax - onehot`, one column per input); releases the batch's shares.
    pub fn backward_virtual_batch(
        &mut self,
        model: &ModelState,
        mut cache: ForwardCache,
        dlogits: &RealTensor,
    ) -> Result<BackwardResult, TrainError> {
        let out = self.backward_inner(model, &mut cache, dlogits);
        self.pool.release(cache.batch_id);
        out
    }

    /// Forward, loss and backward for one virtual batch: `(gradients, loss, correct)`.
    pub fn virtual_batch_step(
        &mut self,
        model: &ModelState,
        x: &RealTensor,
        labels: &[usize],
        batch_id: u64,
    ) -> Result<(BackwardResult, f64, usize), TrainError> {
        let cache = self.forward_pass(model, x, batch_id)?;
        let (loss, dlogits, correct) = softmax_cross_entropy(&cache.logits, labels);
        let res = self.backward_virtual_batch(model, cache, &dlogits)?;
        Ok((res, loss, correct))
    }
}

/// Result of a paired encoded / plaintext run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelState,
    pub plain_model: ModelState,
    pub metrics: Vec<EpochMetrics>,
    /// Largest per-step weight-gradient deviation over the whole run.
    pub max_grad_delta: f64,
    pub max_grad_delta_scaled: f64,
    pub integrity_violations: usize,
    pub first_violation: Option<String>,
    pub ledger: CollusionLedger,
    pub transcript_digest: String,
    pub transcript_lines: u64,
}

/// Summary rows used when serializing a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_acc_enc: f64,
    pub final_acc_plain: f64,
    pub accuracy_gap: f64,
    pub max_grad_delta: f64,
    pub max_grad_delta_scaled: f64,
    pub integrity_violations: usize,
}

impl TrainOutcome {
    pub fn summary(&self) -> RunSummary {
        let last = self.metrics.last().expect("metrics has the initial row");
        RunSummary {
            final_acc_enc: last.acc_enc,
            final_acc_plain: last.acc_plain,
            accuracy_gap: (last.acc_enc - last.acc_plain).abs(),
            max_grad_delta: self.max_grad_delta,
            max_grad_delta_scaled: self.max_grad_delta_scaled,
            integrity_violations: self.integrity_violations,
        }
    }
}

/// [`encoded_train_with_store`] with sealed gradients kept in memory.
pub fn encoded_train(
    model0: &ModelState,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    encoded_train_with_store(model0, data, cfg, &mut SealStore::memory())
}

/// Trains through the coordinator with large-batch sealed aggregation, alongside the
/// plaintext reference on identical batches. An integrity violation aborts the
/// large-batch step (no update) and is counted in that epoch's metrics.
pub fn encoded_train_with_store(
    model0: &ModelState,
    data: &Dataset,
    cfg: &TrainConfig,
    store: &mut SealStore,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if data.features() != model0.input_dim() {
        return Err(TrainError::Data(format!(
            "{} features for a network with {} inputs",
            data.features(),
            model0.input_dim()
        )));
    }
    if data.labels.iter().any(|&l| l >= model0.output_dim()) {
        return Err(TrainError::Data(
            "labels exceed the network's outputs".into(),
        ));
    }
    let (plain_model, plain) = plaintext_reference_train(model0, data, cfg);
    let mut coord = Coordinator::new(cfg)?;
    coord.pool_mut().set_transcript_retention(false);
    let mut model = model0.clone();
    let row = |epoch: usize,
               enc: (f64, f64),
               plain: &PlainEpoch,
               delta: (f64, f64),
               violations: usize| EpochMetrics {
        epoch,
        loss_enc: enc.0,
        loss_plain: plain.loss,
        acc_enc: enc.1,
        acc_plain: plain.acc,
        max_grad_delta: delta.0,
        max_grad_delta_scaled: delta.1,
        integrity_violations: violations,
    };
    let mut metrics = vec![row(0, evaluate(&model, data), &plain[0], (0.0, 0.0), 0)];
    let v = cfg.virtual_batches();
    let mut batch_id = 0u64;
    let mut run_delta = 0.0f64;
    let mut run_scaled = 0.0f64;
    let mut total_violations = 0;
    let mut first_violation = None;
    for epoch in 1..=cfg.epochs {
        let mut epoch_delta = 0.0f64;
        let mut epoch_scaled = 0.0f64;
        let mut violations = 0;
        for large in epoch_batches(cfg.seed, epoch, data.len(), cfg.large_batch) {
            store.clear()?;
            let mut aborted = false;
            for (vi, idx) in large.chunks(cfg.k).enumerate() {
                let (x, labels) = data.batch(idx);
                let id = batch_id;
                batch_id += 1;
                match coord.virtual_batch_step(&model, &x, &labels, id) {
                    Ok((res, _, _)) => {
                        epoch_delta = epoch_delta.max(res.max_parity_delta);
                        epoch_scaled = epoch_scaled.max(res.max_parity_scaled);
                        store.evict(&seal_gradient(&res.grads, vi))?;
                    }
                    Err(e) if e.is_integrity_violation() => {
                        violations += 1;
                        first_violation.get_or_insert_with(|| e.to_string());
                        aborted = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            if !aborted {
                let total = update_aggregation(&store.reload_all(v)?, v)?;
                let lr = model.lr;
                sgd_step(&mut model, &total, lr);
            }
        }
        store.clear()?;
        run_delta = run_delta.max(epoch_delta);
        run_scaled = run_scaled.max(epoch_scaled);
        total_violations += violations;
        metrics.push(row(
            epoch,
            evaluate(&model, data),
            &plain[epoch],
            (epoch_delta, epoch_scaled),
            violations,
        ));
    }
    Ok(TrainOutcome {
        model,
        plain_model,
        metrics,
        max_grad_delta: run_delta,
        max_grad_delta_scaled: run_scaled,
        integrity_violations: total_violations,
        first_violation,
        ledger: coord.pool().ledger().clone(),
        transcript_digest: coord.pool().transcript_digest(),
        transcript_lines: coord.pool().transcript_lines(),
    })
}

/// Random `(W, X, δ)` triples per tolerance calibration.
pub const TAU_TRIALS: usize = 100;

/// Gradient-parity tolerance: twice the largest deviation between the encoded and
/// plaintext weight gradient of `op` over `trials` random unit-range `(W, X, δ)`.
pub fn calibrate_tau(op: Bilinear, cfg: &TrainConfig, trials: usize) -> Result<f64, TrainError> {
    let spec = match op {
        Bilinear::Dense { in_dim, out_dim } => LayerSpec::dense(in_dim, out_dim),
        Bilinear::Conv(g) => LayerSpec::conv(g),
    }
    .without_bias();
    let mut model = ModelState::init(&[spec], 0.0, 0)?;
    let cfg = TrainConfig {
        parity_oracle: true,
        behaviors: Vec::new(),
        ..cfg.clone()
    };
    let mut coord = Coordinator::new(&cfg)?;
    coord.pool_mut().set_transcript_retention(false);
    let mut rng = rng_from_seed(cfg.seed ^ 0x7461_7500);
    let (rows, cols) = op.weight_shape();
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut uniform =
            |shape: (usize, usize)| Array2::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0));
        model.layers[0].w = Some(uniform((rows, cols)));
        let x = uniform((op.input_dim(), cfg.k));
        let delta = uniform((op.output_dim(), cfg.k));
        let cache = coord.forward_pass(&model, &x, t as u64)?;
        worst = worst.max(
            coord
                .backward_virtual_batch(&model, cache, &delta)?
                .max_parity_delta,
        );
    }
    Ok(2.0 * worst)
}

/// Largest per-layer tolerance over the linear layers of `model`.
pub fn calibrate_model_tau(
    model: &ModelState,
    cfg: &TrainConfig,
    trials: usize,
) -> Result<f64, TrainError> {
    let mut tau = 0.0f64;
    for op in model.layers.iter().filter_map(|l| l.spec.bilinear()) {
        tau = tau.max(calibrate_tau(op, cfg, trials)?);
    }
    Ok(tau)
}
