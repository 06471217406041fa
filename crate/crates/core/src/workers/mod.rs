//! Simulated untrusted workers.
//!
//! Workers are in-process actors. The dispatch boundary passes only field
//! matrices and public coefficients; coordinator secrets never cross it. Each
//! worker owns its share cache and RNG, so a dispatch may run workers
//! concurrently while results, ledger appends and transcript lines are still
//! produced in worker-index order.

pub mod audit;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bilinear::Bilinear;
use crate::codec::ShareSet;
use crate::exec::Parallelism;
use crate::field::{FieldError, FieldMatrix};
use crate::quant::RealTensor;
use crate::seed::{domain, stream_id, stream_rng, Rng};

use rand::Rng as _;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PoolError {
    #[error("{needed} shares need {needed} workers, pool has {available}")]
    PoolTooSmall { needed: usize, available: usize },
    #[error("worker {worker} has no cached share for batch {batch}, layer {layer}")]
    MissingCache {
        worker: usize,
        batch: u64,
        layer: usize,
    },
    #[error("worker {worker} already holds a share for batch {batch}, layer {layer}")]
    DuplicateShare {
        worker: usize,
        batch: u64,
        layer: usize,
    },
    #[error("worker {0} does not exist")]
    NoSuchWorker(usize),
    #[error("corruption offset {offset} vanishes modulo {p}")]
    ZeroCorruption { offset: u64, p: u64 },
    #[error("invalid corruption probability {0}")]
    InvalidProbability(f64),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Where an additive fault lands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultPattern {
    /// `offset` added to the first entry of the result.
    FirstEntry,
    /// `offset` added to every entry of the result.
    AllEntries,
}

/// Which dispatches a faulty worker tampers with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultScope {
    All,
    Forward,
    Backward,
    Plain,
}

impl FaultScope {
    fn covers(self, d: Direction) -> bool {
        match self {
            FaultScope::All => true,
            FaultScope::Forward => d == Direction::ForwardOut,
            FaultScope::Backward => d == Direction::BackwardOut,
            FaultScope::Plain => d == Direction::PlainOut,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WorkerBehavior {
    Honest,
    Faulty {
        corrupt_probability: f64,
        offset: u64,
        pattern: FaultPattern,
        scope: FaultScope,
    },
    /// Computes honestly and records every share it receives.
    Colluding,
}

impl WorkerBehavior {
    /// A worker that corrupts every result by `offset` in its first entry.
    pub fn always_faulty(offset: u64) -> Self {
        WorkerBehavior::Faulty {
            corrupt_probability: 1.0,
            offset,
            pattern: FaultPattern::FirstEntry,
            scope: FaultScope::All,
        }
    }

    /// Like [`WorkerBehavior::always_faulty`], restricted to one kind of dispatch.
    pub fn always_faulty_in(offset: u64, scope: FaultScope) -> Self {
        WorkerBehavior::Faulty {
            corrupt_probability: 1.0,
            offset,
            pattern: FaultPattern::FirstEntry,
            scope,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    ForwardIn,
    ForwardOut,
    BackwardIn,
    BackwardOut,
    PlainIn,
    PlainOut,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::ForwardIn => "fwd_in",
            Direction::ForwardOut => "fwd_out",
            Direction::BackwardIn => "bwd_in",
            Direction::BackwardOut => "bwd_out",
            Direction::PlainIn => "plain_in",
            Direction::PlainOut => "plain_out",
        }
    }
}

/// One line of the dispatch transcript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub batch: u64,
    pub layer: usize,
    pub worker: usize,
    pub direction: Direction,
    pub checksum: String,
}

impl TranscriptRecord {
    pub fn line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.batch,
            self.layer,
            self.worker,
            self.direction.as_str(),
            self.checksum
        )
    }
}

/// What a colluding worker saw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LedgerKind {
    Share,
    Backward,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub worker_id: usize,
    pub batch_id: u64,
    pub layer_id: usize,
    pub kind: LedgerKind,
    /// The encoded share held by the worker.
    pub share: FieldMatrix,
    /// Public backward coefficients `B`, for backward records.
    pub public_b: Option<FieldMatrix>,
}

/// Append-only record of everything colluding workers observed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollusionLedger {
    records: Vec<LedgerRecord>,
}

impl CollusionLedger {
    pub fn records(&self) -> &[LedgerRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn append(&mut self, r: LedgerRecord) {
        self.records.push(r);
    }
}

#[derive(Debug, Clone)]
struct Worker {
    id: usize,
    behavior: WorkerBehavior,
    rng: Rng,
    cache: HashMap<(u64, usize), FieldMatrix>,
}

fn checksum_u64(parts: &[&[u64]]) -> String {
    let mut h = Sha256::new();
    for part in parts {
        h.update((part.len() as u64).to_le_bytes());
        for v in *part {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(&h.finalize()[..8])
}

fn checksum_f64(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_bits().to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

impl Worker {
    /// Returns the field offset to add if this dispatch is corrupted.
    fn draw_fault(&mut self, d: Direction) -> Option<(u64, FaultPattern)> {
        match self.behavior {
            WorkerBehavior::Faulty {
                corrupt_probability,
                offset,
                pattern,
                scope,
            } if scope.covers(d) => {
                let hit = self.rng.random_bool(corrupt_probability);
                hit.then_some((offset, pattern))
            }
            _ => None,
        }
    }

    fn corrupt_field(&mut self, mut y: FieldMatrix, d: Direction) -> FieldMatrix {
        if let Some((offset, pattern)) = self.draw_fault(d) {
            let p = y.prime();
            let off = offset % p.value();
            let (rows, cols) = y.shape();
            let n = match pattern {
                FaultPattern::FirstEntry => 1.min(rows * cols),
                FaultPattern::AllEntries => rows * cols,
            };
            for idx in 0..n {
                let (r, c) = (idx / cols, idx % cols);
                y.set(r, c, p.add(y.get(r, c), off));
            }
        }
        y
    }

    fn corrupt_real(&mut self, mut y: RealTensor) -> RealTensor {
        if let Some((offset, pattern)) = self.draw_fault(Direction::PlainOut) {
            match pattern {
                FaultPattern::FirstEntry => {
                    if let Some(v) = y.iter_mut().next() {
                        *v += offset as f64;
                    }
                }
                FaultPattern::AllEntries => y.mapv_inplace(|v| v + offset as f64),
            }
        }
        y
    }

    fn colluding(&self) -> bool {
        matches!(self.behavior, WorkerBehavior::Colluding)
    }
}

/// Output of one worker's part of a dispatch.
struct WorkerOutcome<T> {
    result: T,
    record: Option<LedgerRecord>,
    transcript: [TranscriptRecord; 2],
}

/// The `K'` simulated accelerators.
#[derive(Debug, Clone)]
pub struct WorkerPool {
    workers: Vec<Worker>,
    ledger: CollusionLedger,
    transcript: Vec<TranscriptRecord>,
    retain_transcript: bool,
    transcript_digest: Sha256,
    transcript_lines: u64,
    mode: Parallelism,
}

impl WorkerPool {
    /// One worker per behavior; worker `i` draws faults from its own stream of `seed`.
    pub fn new(
        behaviors: &[WorkerBehavior],
        seed: u64,
        mode: Parallelism,
    ) -> Result<Self, PoolError> {
        for b in behaviors {
            if let WorkerBehavior::Faulty {
                corrupt_probability,
                offset,
                ..
            } = *b
            {
                if !(0.0..=1.0).contains(&corrupt_probability) {
                    return Err(PoolError::InvalidProbability(corrupt_probability));
                }
                if offset == 0 {
                    return Err(PoolError::ZeroCorruption { offset, p: 0 });
                }
            }
        }
        let workers = behaviors
            .iter()
            .enumerate()
            .map(|(id, &behavior)| Worker {
                id,
                behavior,
                rng: stream_rng(seed, stream_id(domain::WORKER, id as u64)),
                cache: HashMap::new(),
            })
            .collect();
        Ok(WorkerPool {
            workers,
            ledger: CollusionLedger::default(),
            transcript: Vec::new(),
            retain_transcript: true,
            transcript_digest: Sha256::new(),
            transcript_lines: 0,
            mode,
        })
    }

    pub fn honest(n: usize, seed: u64, mode: Parallelism) -> Self {
        WorkerPool::new(&vec![WorkerBehavior::Honest; n], seed, mode)
            .expect("honest behaviors are valid")
    }

    pub fn len(&self) -> usize {
        self.workers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.workers.is_empty()
    }

    pub fn mode(&self) -> Parallelism {
        self.mode
    }

    pub fn behavior(&self, worker: usize) -> Option<WorkerBehavior> {
        self.workers.get(worker).map(|w| w.behavior)
    }

    pub fn ledger(&self) -> &CollusionLedger {
        &self.ledger
    }

    /// Retained transcript records; empty when retention is off.
    pub fn transcript(&self) -> &[TranscriptRecord] {
        &self.transcript
    }

    /// Keep individual transcript records (the running digest is always kept).
    pub fn set_transcript_retention(&mut self, retain: bool) {
        self.retain_transcript = retain;
    }

    /// SHA-256 over every transcript line so far, retained or not.
    pub fn transcript_digest(&self) -> String {
        hex::encode(self.transcript_digest.clone().finalize())
    }

    pub fn transcript_lines(&self) -> u64 {
        self.transcript_lines
    }

    fn log(&mut self, r: TranscriptRecord) {
        self.transcript_digest.update(r.line().as_bytes());
        self.transcript_digest.update(b"\n");
        self.transcript_lines += 1;
        if self.retain_transcript {
            self.transcript.push(r);
        }
    }

    /// Newline-delimited `batch,layer,worker,direction,checksum` records.
    pub fn transcript_text(&self) -> String {
        self.transcript.iter().map(|r| r.line() + "\n").collect()
    }

    /// Number of shares currently cached across the pool.
    pub fn cached_shares(&self) -> usize {
        self.workers.iter().map(|w| w.cache.len()).sum()
    }

    pub fn has_share(&self, worker: usize, batch: u64, layer: usize) -> bool {
        self.workers
            .get(worker)
            .is_some_and(|w| w.cache.contains_key(&(batch, layer)))
    }

    /// Drops every cached share of `batch`.
    pub fn release(&mut self, batch: u64) {
        for w in &mut self.workers {
            w.cache.retain(|&(b, _), _| b != batch);
        }
    }

    fn check_capacity(&self, needed: usize) -> Result<(), PoolError> {
        if needed > self.workers.len() {
            return Err(PoolError::PoolTooSmall {
                needed,
                available: self.workers.len(),
            });
        }
        Ok(())
    }

    fn check_faults(&self, p: u64) -> Result<(), PoolError> {
        for w in &self.workers {
            if let WorkerBehavior::Faulty { offset, .. } = w.behavior {
                if offset % p == 0 {
                    return Err(PoolError::ZeroCorruption { offset, p });
                }
            }
        }
        Ok(())
    }

    fn absorb<T>(&mut self, outcomes: Vec<WorkerOutcome<T>>) -> Vec<T> {
        // appends happen here, on the coordinator, in worker-index order
        let mut results = Vec::with_capacity(outcomes.len());
        for o in outcomes {
            if let Some(r) = o.record {
                self.ledger.append(r);
            }
            for t in o.transcript {
                self.log(t);
            }
            results.push(o.result);
        }
        results
    }

    /// Worker `j` receives share `j`, caches it and returns `<Wq, x̄_j>`.
    pub fn dispatch_forward(
        &mut self,
        op: &Bilinear,
        wq: &FieldMatrix,
        shares: &ShareSet,
    ) -> Result<Vec<FieldMatrix>, PoolError> {
        let s = shares.len();
        self.check_capacity(s)?;
        self.check_faults(wq.prime().value())?;
        let key = (shares.batch_id, shares.layer_id);
        for w in &self.workers[..s] {
            if w.cache.contains_key(&key) {
                return Err(PoolError::DuplicateShare {
                    worker: w.id,
                    batch: key.0,
                    layer: key.1,
                });
            }
        }
        let outcomes = self.mode.map_mut(
            &mut self.workers[..s],
            |j, w| -> Result<WorkerOutcome<FieldMatrix>, PoolError> {
                let share = shares.share(j);
                let y = op.forward_field(wq, &share)?;
                let y = w.corrupt_field(y, Direction::ForwardOut);
                let transcript = [
                    TranscriptRecord {
                        batch: key.0,
                        layer: key.1,
                        worker: w.id,
                        direction: Direction::ForwardIn,
                        checksum: checksum_u64(&[wq.data(), share.data()]),
                    },
                    TranscriptRecord {
                        batch: key.0,
                        layer: key.1,
                        worker: w.id,
                        direction: Direction::ForwardOut,
                        checksum: checksum_u64(&[y.data()]),
                    },
                ];
                let record = w.colluding().then(|| LedgerRecord {
                    worker_id: w.id,
                    batch_id: key.0,
                    layer_id: key.1,
                    kind: LedgerKind::Share,
                    share: share.clone(),
                    public_b: None,
                });
                w.cache.insert(key, share);
                Ok(WorkerOutcome {
                    result: y,
                    record,
                    transcript,
                })
            },
        );
        let outcomes = outcomes.into_iter().collect::<Result<Vec<_>, _>>()?;
        Ok(self.absorb(outcomes))
    }

    /// Worker `j` returns `Eq_j = <δ_q β_j, x̄_j>` using its cached share; one worker
    /// per row of `b`.
    pub fn dispatch_backward_eq(
        &mut self,
        op: &Bilinear,
        delta_q: &FieldMatrix,
        b: &FieldMatrix,
        batch_id: u64,
        layer_id: usize,
    ) -> Result<Vec<FieldMatrix>, PoolError> {
        let s = b.rows();
        self.check_capacity(s)?;
        self.check_faults(delta_q.prime().value())?;
        if b.cols() != delta_q.cols() {
            return Err(FieldError::ShapeMismatch {
                op: "backward",
                left: delta_q.shape(),
                right: b.shape(),
            }
            .into());
        }
        let key = (batch_id, layer_id);
        for w in &self.workers[..s] {
            if !w.cache.contains_key(&key) {
                return Err(PoolError::MissingCache {
                    worker: w.id,
                    batch: batch_id,
                    layer: layer_id,
                });
            }
        }
        let outcomes = self.mode.map_mut(
            &mut self.workers[..s],
            |j, w| -> Result<WorkerOutcome<FieldMatrix>, PoolError> {
                let share = &w.cache[&key];
                let beta = FieldMatrix::new(b.cols(), 1, b.row(j).to_vec(), b.prime())?;
                let mixed = delta_q.matmul(&beta)?;
                let eq = op.grad_field(&mixed, share)?;
                let record = w.colluding().then(|| LedgerRecord {
                    worker_id: w.id,
                    batch_id,
                    layer_id,
                    kind: LedgerKind::Backward,
                    share: share.clone(),
                    public_b: Some(b.clone()),
                });
                let eq = w.corrupt_field(eq, Direction::BackwardOut);
                let transcript = [
                    TranscriptRecord {
                        batch: batch_id,
                        layer: layer_id,
                        worker: w.id,
                        direction: Direction::BackwardIn,
                        checksum: checksum_u64(&[delta_q.data(), b.row(j)]),
                    },
                    TranscriptRecord {
                        batch: batch_id,
                        layer: layer_id,
                        worker: w.id,
                        direction: Direction::BackwardOut,
                        checksum: checksum_u64(&[eq.data()]),
                    },
                ];
                Ok(WorkerOutcome {
                    result: eq,
                    record,
                    transcript,
                })
            },
        );
        let outcomes = outcomes.into_iter().collect::<Result<Vec<_>, _>>()?;
        Ok(self.absorb(outcomes))
    }

    fn plain<F>(
        &mut self,
        worker: usize,
        batch: u64,
        layer: usize,
        inputs: &[&RealTensor],
        f: F,
    ) -> Result<RealTensor, PoolError>
    where
        F: FnOnce() -> RealTensor,
    {
        let w = self
            .workers
            .get_mut(worker)
            .ok_or(PoolError::NoSuchWorker(worker))?;
        let flat: Vec<f64> = inputs.iter().flat_map(|t| t.iter().copied()).collect();
        let y = w.corrupt_real(f());
        let y_flat: Vec<f64> = y.iter().copied().collect();
        let id = w.id;
        self.log(TranscriptRecord {
            batch,
            layer,
            worker: id,
            direction: Direction::PlainIn,
            checksum: checksum_f64(&flat),
        });
        self.log(TranscriptRecord {
            batch,
            layer,
            worker: id,
            direction: Direction::PlainOut,
            checksum: checksum_f64(&y_flat),
        });
        Ok(y)
    }

    /// Unencoded product `a · b` at a single worker, for non-sensitive operands.
    pub fn dispatch_plain_linear(
        &mut self,
        worker: usize,
        a: &RealTensor,
        b: &RealTensor,
        batch: u64,
        layer: usize,
    ) -> Result<RealTensor, PoolError> {
        self.plain(worker, batch, layer, &[a, b], || a.dot(b))
    }

    /// Unencoded `W^T δ` (col2im'd for convolutions) at a single worker.
    pub fn dispatch_input_grad(
        &mut self,
        worker: usize,
        op: &Bilinear,
        w: &RealTensor,
        delta: &RealTensor,
        batch: u64,
        layer: usize,
    ) -> Result<RealTensor, PoolError> {
        self.plain(worker, batch, layer, &[w, delta], || {
            op.input_grad_real(w, delta)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode, EncodingCoeffs, NoiseBlock};
    use crate::field::Prime;
    use crate::seed::rng_from_seed;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    fn p11() -> Prime {
        Prime::new(11).unwrap()
    }

    fn running_shares() -> ShareSet {
        let a = FieldMatrix::from_rows(&[[2, 1], [3, 4]], p11()).unwrap();
        let c = EncodingCoeffs::from_matrix(a, 1, 1).unwrap();
        let x = FieldMatrix::new(1, 1, vec![3], p11()).unwrap();
        let r = NoiseBlock::from_matrix(FieldMatrix::new(1, 1, vec![5], p11()).unwrap());
        encode(&x, &r, &c).unwrap()
    }

    const DENSE11: Bilinear = Bilinear::Dense {
        in_dim: 1,
        out_dim: 1,
    };

    #[test]
    fn running_example_forward_and_backward() {
        let shares = running_shares();
        let mut pool = WorkerPool::honest(2, 0, Parallelism::Sequential);
        let w = FieldMatrix::new(1, 1, vec![2], p11()).unwrap();
        let y = pool.dispatch_forward(&DENSE11, &w, &shares).unwrap();
        assert_eq!(
            y.iter().map(|m| m.get(0, 0)).collect::<Vec<_>>(),
            vec![9, 2]
        );
        let delta = FieldMatrix::new(1, 1, vec![4], p11()).unwrap();
        let b = FieldMatrix::from_rows(&[[3], [6]], p11()).unwrap();
        let eq = pool
            .dispatch_backward_eq(&DENSE11, &delta, &b, 0, 0)
            .unwrap();
        assert_eq!(
            eq.iter().map(|m| m.get(0, 0)).collect::<Vec<_>>(),
            vec![10, 2]
        );
    }

    #[test]
    fn identity_weight_echoes_and_zero_shares_give_zero() {
        let p = Prime::p25();
        let mut rng = rng_from_seed(1);
        let enc = FieldMatrix::random(&mut rng, 4, 3, p);
        let shares = ShareSet::new(enc.clone(), 1, 0);
        let mut pool = WorkerPool::honest(3, 0, Parallelism::default());
        let op = Bilinear::Dense {
            in_dim: 4,
            out_dim: 4,
        };
        let y = pool
            .dispatch_forward(&op, &FieldMatrix::identity(4, p), &shares)
            .unwrap();
        for (j, yj) in y.iter().enumerate() {
            assert_eq!(yj, &enc.column(j));
        }
        let zero = ShareSet::new(FieldMatrix::zeros(4, 3, p), 2, 0);
        let w = FieldMatrix::random(&mut rng, 4, 4, p);
        assert!(pool
            .dispatch_forward(&op, &w, &zero)
            .unwrap()
            .iter()
            .all(FieldMatrix::is_zero));
    }

    #[test]
    fn zero_delta_and_zero_beta_give_zero_equations() {
        let shares = running_shares();
        let mut pool = WorkerPool::honest(2, 0, Parallelism::Sequential);
        pool.dispatch_forward(&DENSE11, &FieldMatrix::identity(1, p11()), &shares)
            .unwrap();
        let b = FieldMatrix::from_rows(&[[3], [6]], p11()).unwrap();
        let eq = pool
            .dispatch_backward_eq(&DENSE11, &FieldMatrix::zeros(1, 1, p11()), &b, 0, 0)
            .unwrap();
        assert!(eq.iter().all(FieldMatrix::is_zero));
        let b = FieldMatrix::from_rows(&[[3], [0]], p11()).unwrap();
        let delta = FieldMatrix::new(1, 1, vec![4], p11()).unwrap();
        let eq = pool
            .dispatch_backward_eq(&DENSE11, &delta, &b, 0, 0)
            .unwrap();
        assert!(!eq[0].is_zero());
        assert!(eq[1].is_zero());
    }

    #[test]
    fn one_share_rule_and_cache_errors() {
        let shares = running_shares();
        let mut pool = WorkerPool::honest(2, 0, Parallelism::Sequential);
        let w = FieldMatrix::identity(1, p11());
        pool.dispatch_forward(&DENSE11, &w, &shares).unwrap();
        assert_eq!(
            pool.dispatch_forward(&DENSE11, &w, &shares),
            Err(PoolError::DuplicateShare {
                worker: 0,
                batch: 0,
                layer: 0
            })
        );
        let b = FieldMatrix::from_rows(&[[3], [6]], p11()).unwrap();
        let delta = FieldMatrix::new(1, 1, vec![4], p11()).unwrap();
        assert!(matches!(
            pool.dispatch_backward_eq(&DENSE11, &delta, &b, 0, 1),
            Err(PoolError::MissingCache {
                worker: 0,
                batch: 0,
                layer: 1
            })
        ));
        pool.release(0);
        assert_eq!(pool.cached_shares(), 0);
        pool.dispatch_forward(&DENSE11, &w, &shares).unwrap();

        let mut tiny = WorkerPool::honest(1, 0, Parallelism::Sequential);
        assert_eq!(
            tiny.dispatch_forward(&DENSE11, &w, &shares),
            Err(PoolError::PoolTooSmall {
                needed: 2,
                available: 1
            })
        );
    }

    #[test]
    fn faulty_worker_corrupts_with_nonzero_offset() {
        let shares = running_shares();
        let behaviors = [WorkerBehavior::Honest, WorkerBehavior::always_faulty(3)];
        let mut pool = WorkerPool::new(&behaviors, 0, Parallelism::Sequential).unwrap();
        let w = FieldMatrix::new(1, 1, vec![2], p11()).unwrap();
        let y = pool.dispatch_forward(&DENSE11, &w, &shares).unwrap();
        assert_eq!(
            y.iter().map(|m| m.get(0, 0)).collect::<Vec<_>>(),
            vec![9, 5]
        );

        let mut bad = WorkerPool::new(
            &[WorkerBehavior::always_faulty(11), WorkerBehavior::Honest],
            0,
            Parallelism::Sequential,
        )
        .unwrap();
        assert!(matches!(
            bad.dispatch_forward(&DENSE11, &w, &shares),
            Err(PoolError::ZeroCorruption { .. })
        ));
        assert!(WorkerPool::new(
            &[WorkerBehavior::always_faulty(0)],
            0,
            Parallelism::Sequential
        )
        .is_err());
    }

    #[test]
    fn plain_linear_matches_local_product() {
        let mut rng = rng_from_seed(5);
        let a = Array2::from_shape_fn((4, 4), |_| rng.random_range(-1.0..1.0));
        let b = Array2::from_shape_fn((4, 4), |_| rng.random_range(-1.0..1.0));
        let mut pool = WorkerPool::honest(1, 0, Parallelism::Sequential);
        let y = pool.dispatch_plain_linear(0, &a, &b, 0, 0).unwrap();
        let expected = a.dot(&b);
        for (u, v) in y.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-12);
        }
        let id = Array2::eye(4);
        assert_eq!(pool.dispatch_plain_linear(0, &id, &b, 0, 0).unwrap(), b);

        let mut faulty = WorkerPool::new(
            &[WorkerBehavior::always_faulty(1)],
            0,
            Parallelism::Sequential,
        )
        .unwrap();
        let y = faulty.dispatch_plain_linear(0, &id, &b, 0, 0).unwrap();
        assert_ne!(y, b);
        assert!(pool.dispatch_plain_linear(3, &a, &b, 0, 0).is_err());
    }

    fn run_transcript(mode: Parallelism) -> (Vec<FieldMatrix>, String, CollusionLedger) {
        let p = Prime::p25();
        let mut rng = rng_from_seed(9);
        let behaviors = [
            WorkerBehavior::Colluding,
            WorkerBehavior::Faulty {
                corrupt_probability: 0.5,
                offset: 17,
                pattern: FaultPattern::AllEntries,
                scope: FaultScope::All,
            },
            WorkerBehavior::Honest,
            WorkerBehavior::Colluding,
            WorkerBehavior::Honest,
        ];
        let mut pool = WorkerPool::new(&behaviors, 42, mode).unwrap();
        let op = Bilinear::Dense {
            in_dim: 16,
            out_dim: 8,
        };
        let mut out = Vec::new();
        for batch in 0..6 {
            let shares = ShareSet::new(FieldMatrix::random(&mut rng, 16, 5, p), batch, 0);
            let w = FieldMatrix::random(&mut rng, 8, 16, p);
            out.extend(pool.dispatch_forward(&op, &w, &shares).unwrap());
            let delta = FieldMatrix::random(&mut rng, 8, 3, p);
            let b = FieldMatrix::random(&mut rng, 5, 3, p);
            out.extend(
                pool.dispatch_backward_eq(&op, &delta, &b, batch, 0)
                    .unwrap(),
            );
            pool.release(batch);
        }
        (out, pool.transcript_text(), pool.ledger().clone())
    }

    #[test]
    fn transcript_is_identical_across_modes() {
        let (ya, ta, la) = run_transcript(Parallelism::Sequential);
        let (yb, tb, lb) = run_transcript(Parallelism::Parallel);
        assert_eq!(ya, yb);
        assert_eq!(ta, tb);
        assert_eq!(la, lb);
        assert_eq!(ta.lines().count(), 6 * 2 * 5 * 2);
        let id = Array2::eye(2);
        let mut kept = WorkerPool::honest(1, 0, Parallelism::Sequential);
        kept.dispatch_plain_linear(0, &id, &id, 0, 0).unwrap();
        assert_eq!(
            kept.transcript_digest(),
            hex::encode(Sha256::digest(kept.transcript_text().as_bytes()))
        );
        let mut dropped = WorkerPool::honest(1, 0, Parallelism::Sequential);
        dropped.set_transcript_retention(false);
        dropped.dispatch_plain_linear(0, &id, &id, 0, 0).unwrap();
        assert!(dropped.transcript().is_empty());
        assert_eq!(dropped.transcript_lines(), 2);
        assert_eq!(dropped.transcript_digest(), kept.transcript_digest());
        let first = ta.lines().next().unwrap();
        let fields: Vec<&str> = first.split(',').collect();
        assert_eq!(&fields[..4], &["0", "0", "0", "fwd_in"]);
        assert_eq!(fields[4].len(), 16);
    }

    #[test]
    fn ledger_records_only_colluders_in_worker_order() {
        let (_, _, ledger) = run_transcript(Parallelism::Parallel);
        assert_eq!(ledger.len(), 6 * 2 * 2);
        let ids: Vec<usize> = ledger
            .records()
            .iter()
            .take(2)
            .map(|r| r.worker_id)
            .collect();
        assert_eq!(ids, vec![0, 3]);
        assert!(ledger
            .records()
            .iter()
            .all(|r| (r.kind == LedgerKind::Backward) == r.public_b.is_some()));
    }

    #[test]
    fn honest_pool_matches_coordinator_recomputation() {
        let p = Prime::p25();
        let mut rng = rng_from_seed(11);
        let enc = FieldMatrix::random(&mut rng, 10, 4, p);
        let w = FieldMatrix::random(&mut rng, 6, 10, p);
        let mut pool = WorkerPool::honest(5, 3, Parallelism::default());
        let y = pool
            .dispatch_forward(
                &Bilinear::Dense {
                    in_dim: 10,
                    out_dim: 6,
                },
                &w,
                &ShareSet::new(enc.clone(), 0, 0),
            )
            .unwrap();
        assert_eq!(
            FieldMatrix::hstack_all(&y).unwrap(),
            w.matmul(&enc).unwrap()
        );
    }
}
