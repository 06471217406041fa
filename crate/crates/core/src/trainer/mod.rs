//! Small-network training with every sensitive linear operation offloaded.

pub mod data;
pub mod encoded;
pub mod plain;
pub mod seal;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::bilinear::{Bilinear, ConvGeometry};
use crate::codec::CodecError;
use crate::exec::Parallelism;
use crate::field::FieldError;
use crate::quant::{QuantError, QuantParams, RealTensor};
use crate::seed::{domain, stream_id, stream_rng};
use crate::workers::{PoolError, WorkerBehavior};

pub use data::Dataset;
pub use encoded::{
    calibrate_model_tau, calibrate_tau, encoded_train, encoded_train_with_store, operand_scale,
    Coordinator, ForwardCache, TrainOutcome, TAU_TRIALS,
};
pub use plain::{evaluate, plaintext_reference_train};
pub use seal::{seal_gradient, unseal_gradient, update_aggregation, SealStore, SealedGradient};

/// Which pass a violation was caught in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Forward,
    Backward,
    InputGradient,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("integrity violation at batch {batch}, layer {layer}, {phase:?} pass")]
    IntegrityViolation {
        batch: u64,
        layer: usize,
        phase: Phase,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid model: {0}")]
    Model(String),
    #[error("sealed gradient {index} failed its checksum")]
    ChecksumMismatch { index: usize },
    #[error("virtual batch {0} is missing from the aggregation")]
    MissingBatch(usize),
    #[error("malformed sealed blob: {0}")]
    Blob(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TrainError {
    pub fn is_integrity_violation(&self) -> bool {
        matches!(self, TrainError::IntegrityViolation { .. })
    }
}

/// Square max-pool geometry over a `(c, h, w)` input; stride equals the window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
}

impl PoolGeometry {
    pub fn out_height(&self) -> usize {
        self.height / self.window
    }

    pub fn out_width(&self) -> usize {
        self.width / self.window
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn output_len(&self) -> usize {
        self.channels * self.out_height() * self.out_width()
    }

    /// Max over each window of one column; returns values and flat argmax indices.
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
        let (oh, ow, k) = (self.out_height(), self.out_width(), self.window);
        let mut vals = Vec::with_capacity(self.output_len());
        let mut arg = Vec::with_capacity(self.output_len());
        for c in 0..self.channels {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = (f64::NEG_INFINITY, 0);
                    for di in 0..k {
                        for dj in 0..k {
                            let idx = (c * self.height + i * k + di) * self.width + j * k + dj;
                            if x[idx] > best.0 {
                                best = (x[idx], idx);
                            }
                        }
                    }
                    vals.push(best.0);
                    arg.push(best.1);
                }
            }
        }
        (vals, arg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Dense { in_dim: usize, out_dim: usize },
    Conv2D(ConvGeometry),
    ReLU,
    MaxPool(PoolGeometry),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub has_bias: bool,
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Dense { in_dim, out_dim },
            has_bias: true,
        }
    }

    pub fn conv(g: ConvGeometry) -> Self {
        LayerSpec {
            kind: LayerKind::Conv2D(g),
            has_bias: true,
        }
    }

    pub fn relu() -> Self {
        LayerSpec {
            kind: LayerKind::ReLU,
            has_bias: false,
        }
    }

    pub fn max_pool(g: PoolGeometry) -> Self {
        LayerSpec {
            kind: LayerKind::MaxPool(g),
            has_bias: false,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.has_bias = false;
        self
    }

    /// The bilinear operator of a Dense or Conv2D layer.
    pub fn bilinear(&self) -> Option<Bilinear> {
        match self.kind {
            LayerKind::Dense { in_dim, out_dim } => Some(Bilinear::Dense { in_dim, out_dim }),
            LayerKind::Conv2D(g) => Some(Bilinear::Conv(g)),
            _ => None,
        }
    }
}

/// Parameters of one layer (activations carry none).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub spec: LayerSpec,
    pub w: Option<RealTensor>,
    /// Column vector with one entry per weight row.
    pub b: Option<RealTensor>,
}

/// Weights, biases and learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub layers: Vec<Layer>,
    pub lr: f64,
}

impl ModelState {
    /// Checks the layer chain and draws uniform fan-in scaled weights from `seed`.
    pub fn init(specs: &[LayerSpec], lr: f64, seed: u64) -> Result<Self, TrainError> {
        let mut rng = stream_rng(seed, stream_id(domain::INIT, 0));
        let mut dim: Option<usize> = None;
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let (input, output) = match spec.kind {
                LayerKind::Dense { in_dim, out_dim } => (Some(in_dim), out_dim),
                LayerKind::Conv2D(g) => {
                    if !g.is_valid() {
                        return Err(TrainError::Model(format!(
                            "layer {i}: invalid convolution {g:?}"
                        )));
                    }
                    (Some(g.input_len()), g.output_len())
                }
                LayerKind::ReLU => match dim {
                    Some(d) => (Some(d), d),
                    None => {
                        return Err(TrainError::Model(
                            "a network cannot start with an activation".into(),
                        ))
                    }
                },
                LayerKind::MaxPool(g) => {
                    if g.window == 0 || g.out_height() == 0 || g.out_width() == 0 || g.channels == 0
                    {
                        return Err(TrainError::Model(format!(
                            "layer {i}: invalid pooling {g:?}"
                        )));
                    }
                    (Some(g.input_len()), g.output_len())
                }
            };
            if output == 0 || input == Some(0) {
                return Err(TrainError::Model(format!(
                    "layer {i}: dimensions must be positive"
                )));
            }
            if let (Some(prev), Some(inp)) = (dim, input) {
                if prev != inp {
                    return Err(TrainError::Model(format!(
                        "layer {i} expects {inp} inputs, previous layer gives {prev}"
                    )));
                }
            }
            dim = Some(output);
            let (w, b) = match spec.bilinear() {
                Some(op) => {
                    let (rows, cols) = op.weight_shape();
                    let bound = (6.0 / cols as f64).sqrt();
                    let w =
                        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound));
                    let b = spec.has_bias.then(|| Array2::zeros((rows, 1)));
                    (Some(w), b)
                }
                None => (None, None),
            };
            layers.push(Layer { spec: *spec, w, b });
        }
        if layers.is_empty() {
            return Err(TrainError::Model("empty network".into()));
        }
        Ok(ModelState { layers, lr })
    }

    pub fn input_dim(&self) -> usize {
        match self.layers[0].spec.kind {
            LayerKind::Dense { in_dim, .. } => in_dim,
            LayerKind::Conv2D(g) => g.input_len(),
            LayerKind::MaxPool(g) => g.input_len(),
            LayerKind::ReLU => 0,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l.spec.kind {
                LayerKind::Dense { out_dim, .. } => Some(out_dim),
                LayerKind::Conv2D(g) => Some(g.output_len()),
                LayerKind::MaxPool(g) => Some(g.output_len()),
                LayerKind::ReLU => None,
            })
            .unwrap_or(0)
    }

    /// A `in -> hidden -> classes` perceptron with one ReLU.
    pub fn mlp(
        in_dim: usize,
        hidden: usize,
        classes: usize,
        lr: f64,
        seed: u64,
    ) -> Result<Self, TrainError> {
        ModelState::init(
            &[
                LayerSpec::dense(in_dim, hidden),
                LayerSpec::relu(),
                LayerSpec::dense(hidden, classes),
            ],
            lr,
            seed,
        )
    }
}

/// Gradient of one parameterized layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGrad {
    pub w: RealTensor,
    pub b: Option<RealTensor>,
}

/// Per-layer gradients; `None` for layers without parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    pub layers: Vec<Option<LayerGrad>>,
}

impl Gradients {
    pub fn zeros_like(model: &ModelState) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| {
                    l.w.as_ref().map(|w| LayerGrad {
                        w: Array2::zeros(w.dim()),
                        b: l.b.as_ref().map(|b| Array2::zeros(b.dim())),
                    })
                })
                .collect(),
        }
    }

    /// Largest elementwise difference over all weights and biases; infinite on a shape mismatch.
    pub fn max_abs_diff(&self, other: &Gradients) -> f64 {
        if self.layers.len() != other.layers.len() {
            return f64::INFINITY;
        }
        let diff = |a: &RealTensor, b: &RealTensor| {
            if a.dim() != b.dim() {
                return f64::INFINITY;
            }
            a.iter()
                .zip(b.iter())
                .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        };
        let mut worst = 0.0f64;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            match (a, b) {
                (None, None) => {}
                (Some(a), Some(b)) => {
                    worst = worst.max(diff(&a.w, &b.w));
                    match (&a.b, &b.b) {
                        (Some(x), Some(y)) => worst = worst.max(diff(x, y)),
                        (None, None) => {}
                        _ => return f64::INFINITY,
                    }
                }
                _ => return f64::INFINITY,
            }
        }
        worst
    }
}

/// `W <- W - lr * grad` for every parameterized layer.
pub fn sgd_step(model: &mut ModelState, grads: &Gradients, lr: f64) {
    for (layer, g) in model.layers.iter_mut().zip(&grads.layers) {
        if let (Some(w), Some(g)) = (layer.w.as_mut(), g) {
            w.scaled_add(-lr, &g.w);
            if let (Some(b), Some(gb)) = (layer.b.as_mut(), g.b.as_ref()) {
                b.scaled_add(-lr, gb);
            }
        }
    }
}

/// Training knobs shared by the encoded and plaintext paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Virtual batch size `K`.
    pub k: usize,
    /// Colluding workers tolerated.
    pub m: usize,
    /// Pool size `K'`.
    pub workers: usize,
    pub integrity: bool,
    pub epochs: usize,
    /// Inputs per SGD step; a multiple of `k`.
    pub large_batch: usize,
    pub seed: u64,
    pub quant: QuantParams,
    /// Worker behaviors by index; missing entries are honest.
    pub behaviors: Vec<WorkerBehavior>,
    /// Compare every encoded weight gradient with the plaintext product on the same operands.
    pub parity_oracle: bool,
    #[serde(skip, default)]
    pub mode: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 2,
            m: 1,
            workers: 4,
            integrity: false,
            epochs: 10,
            large_batch: 10,
            seed: 0,
            quant: QuantParams::standard(),
            behaviors: Vec::new(),
            parity_oracle: true,
            mode: Parallelism::default(),
        }
    }
}

impl TrainConfig {
    /// Shares per offload: `K + M`, plus one with integrity.
    pub fn shares_needed(&self) -> usize {
        self.k + self.m + usize::from(self.integrity)
    }

    pub fn virtual_batches(&self) -> usize {
        self.large_batch / self.k.max(1)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.k == 0 || self.m == 0 {
            return Err(TrainError::Config("K and M must be at least 1".into()));
        }
        if self.shares_needed() > self.workers {
            return Err(TrainError::Config(format!(
                "K + M{} = {} exceeds the {} available workers",
                if self.integrity { " + 1" } else { "" },
                self.shares_needed(),
                self.workers
            )));
        }
        if self.large_batch == 0 || !self.large_batch.is_multiple_of(self.k) {
            return Err(TrainError::Config(format!(
                "large batch {} is not a multiple of K = {}",
                self.large_batch, self.k
            )));
        }
        if self.behaviors.len() > self.workers {
            return Err(TrainError::Config("more behaviors than workers".into()));
        }
        Ok(())
    }

    pub fn pool_behaviors(&self) -> Vec<WorkerBehavior> {
        let mut b = self.behaviors.clone();
        b.resize(self.workers, WorkerBehavior::Honest);
        b
    }
}

/// One row of the paired training metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_enc: f64,
    pub loss_plain: f64,
    pub acc_enc: f64,
    pub acc_plain: f64,
    pub max_grad_delta: f64,
    /// `max_grad_delta` with each layer's deviation divided by its operand scale.
    pub max_grad_delta_scaled: f64,
    pub integrity_violations: usize,
}
