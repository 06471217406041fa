//! What colluding workers could learn from their ledger.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng as _;
use serde::Serialize;

use super::{CollusionLedger, LedgerKind};
use crate::codec::combinations;
use crate::field::Prime;
use crate::seed::rng_from_seed;
use crate::stats::{ResidueBins, UniformityResult};

/// Exact combination checks run only while `p^|T|` stays below this.
const EXACT_COMBINATION_LIMIT: u64 = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorkerUniformity {
    pub worker: usize,
    pub result: UniformityResult,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CombinationUniformity {
    pub workers: Vec<usize>,
    pub coefficients: Vec<u64>,
    pub result: UniformityResult,
    /// At small primes: whether every nonzero combination is exactly uniform.
    pub exact_uniform: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CollusionReport {
    pub per_worker: Vec<WorkerUniformity>,
    pub combinations: Vec<CombinationUniformity>,
}

impl CollusionReport {
    pub fn is_empty(&self) -> bool {
        self.per_worker.is_empty() && self.combinations.is_empty()
    }

    pub fn min_p_value(&self) -> Option<f64> {
        self.per_worker
            .iter()
            .map(|w| w.result.p_value)
            .chain(self.combinations.iter().map(|c| c.result.p_value))
            .reduce(f64::min)
    }
}

/// Forward shares grouped by (batch, layer), then by worker.
type Views = BTreeMap<(u64, usize), BTreeMap<usize, Vec<u64>>>;

fn share_views(ledger: &CollusionLedger) -> Views {
    let mut views: Views = BTreeMap::new();
    for r in ledger
        .records()
        .iter()
        .filter(|r| r.kind == LedgerKind::Share)
    {
        views
            .entry((r.batch_id, r.layer_id))
            .or_default()
            .insert(r.worker_id, r.share.data().to_vec());
    }
    views
}

/// Rows of `(share_{w_1}, ..., share_{w_t})` for every group in which all of `workers` recorded.
fn joint_rows<'a>(
    views: &'a Views,
    workers: &'a [usize],
) -> impl Iterator<Item = Vec<&'a [u64]>> + 'a {
    views.values().filter_map(move |g| {
        workers
            .iter()
            .map(|w| g.get(w).map(Vec::as_slice))
            .collect()
    })
}

fn combine(p: Prime, coeffs: &[u64], shares: &[&[u64]]) -> Vec<u64> {
    let n = shares[0].len();
    (0..n)
        .map(|d| {
            coeffs
                .iter()
                .zip(shares)
                .fold(0, |acc, (&c, s)| p.add(acc, p.mul(c, s[d])))
        })
        .collect()
}

/// True iff every nonzero combination of the workers' shares, at every position, is
/// exactly uniform over the recorded groups. `None` when the search is too large.
pub fn combinations_exactly_uniform(
    ledger: &CollusionLedger,
    workers: &[usize],
    p: Prime,
) -> Option<bool> {
    find_nonuniform_combination(ledger, workers, p).map(|found| found.is_none())
}

/// First nonzero coefficient vector whose combination is not exactly uniform.
pub fn find_nonuniform_combination(
    ledger: &CollusionLedger,
    workers: &[usize],
    p: Prime,
) -> Option<Option<Vec<u64>>> {
    let pv = p.value();
    let space = pv
        .checked_pow(workers.len() as u32)
        .filter(|&s| s <= EXACT_COMBINATION_LIMIT)?;
    let views = share_views(ledger);
    let rows: Vec<Vec<&[u64]>> = joint_rows(&views, workers).collect();
    if rows.is_empty() {
        return Some(None);
    }
    let dim = rows[0][0].len();
    let mut coeffs = vec![0u64; workers.len()];
    for idx in 1..space {
        let mut t = idx;
        for c in coeffs.iter_mut() {
            *c = t % pv;
            t /= pv;
        }
        let mut hist = vec![vec![0u64; pv as usize]; dim];
        for row in &rows {
            for (d, v) in combine(p, &coeffs, row).into_iter().enumerate() {
                hist[d][v as usize] += 1;
            }
        }
        if hist.iter().any(|h| h.iter().any(|&n| n != h[0])) {
            return Some(Some(coeffs));
        }
    }
    Some(None)
}

/// Chi-square uniformity of each colluder's shares and of one random nonzero
/// combination for every subset of at most `max_subset` colluders.
pub fn collusion_report(
    ledger: &CollusionLedger,
    max_subset: usize,
    p: Prime,
    bins: usize,
    seed: u64,
) -> CollusionReport {
    if ledger.is_empty() {
        return CollusionReport::default();
    }
    let binning = ResidueBins::new(p, bins);
    let views = share_views(ledger);
    let workers: Vec<usize> = views
        .values()
        .flat_map(|g| g.keys().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let per_worker = workers
        .iter()
        .map(|&w| WorkerUniformity {
            worker: w,
            result: binning.test(views.values().filter_map(|g| g.get(&w)).flatten().copied()),
        })
        .collect();

    let mut rng = rng_from_seed(seed);
    let mut combos = Vec::new();
    for size in 2..=max_subset.min(workers.len()) {
        for pick in combinations(workers.len(), size) {
            let subset: Vec<usize> = pick.iter().map(|&i| workers[i]).collect();
            let coefficients: Vec<u64> =
                (0..size).map(|_| rng.random_range(1..p.value())).collect();
            let values: Vec<u64> = joint_rows(&views, &subset)
                .flat_map(|row| combine(p, &coefficients, &row))
                .collect();
            if values.is_empty() {
                continue;
            }
            combos.push(CombinationUniformity {
                exact_uniform: combinations_exactly_uniform(ledger, &subset, p),
                workers: subset,
                coefficients,
                result: binning.test(values),
            });
        }
    }
    CollusionReport {
        per_worker,
        combinations: combos,
    }
}

/// Histogram of the joint view of `workers` over all recorded groups.
pub fn view_distribution(ledger: &CollusionLedger, workers: &[usize]) -> BTreeMap<Vec<u64>, u64> {
    let views = share_views(ledger);
    let mut hist = BTreeMap::new();
    for row in joint_rows(&views, workers) {
        *hist.entry(row.concat()).or_insert(0) += 1;
    }
    hist
}

/// Whether two ledgers induce the same distribution of the joint view of `workers`.
pub fn views_identical(a: &CollusionLedger, b: &CollusionLedger, workers: &[usize]) -> bool {
    view_distribution(a, workers) == view_distribution(b, workers)
}
