//! Synthetic classification datasets and a CSV loader.

use std::path::Path;

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::quant::RealTensor;
use crate::seed::{domain, stream_id, stream_rng};

/// Features stored one sample per column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: RealTensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

/// Named generators selectable from configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DatasetSpec {
    TwoGaussians { n: usize },
    Xor { n: usize },
    TwoMoons { n: usize, noise: f64 },
    Csv(String),
}

impl DatasetSpec {
    /// Parses `two_gaussians`, `xor`, `moons` (optionally `:N`) or `csv:PATH`.
    pub fn parse(s: &str) -> Result<Self, TrainError> {
        let (name, arg) = s.split_once(':').map_or((s, None), |(a, b)| (a, Some(b)));
        let n = |default: usize| -> Result<usize, TrainError> {
            arg.map_or(Ok(default), |a| {
                a.parse()
                    .map_err(|_| TrainError::Data(format!("bad sample count {a:?}")))
            })
        };
        match name {
            "two_gaussians" | "gaussians" => Ok(DatasetSpec::TwoGaussians { n: n(500)? }),
            "xor" => Ok(DatasetSpec::Xor { n: n(500)? }),
            "moons" | "two_moons" => Ok(DatasetSpec::TwoMoons {
                n: n(500)?,
                noise: 0.1,
            }),
            "csv" => arg
                .map(|p| DatasetSpec::Csv(p.to_string()))
                .ok_or_else(|| TrainError::Data("csv needs a path".into())),
            other => Err(TrainError::Data(format!("unknown dataset {other:?}"))),
        }
    }

    pub fn load(&self, seed: u64) -> Result<Dataset, TrainError> {
        match self {
            DatasetSpec::TwoGaussians { n } => Ok(Dataset::two_gaussians(*n, seed)),
            DatasetSpec::Xor { n } => Ok(Dataset::xor(*n, seed)),
            DatasetSpec::TwoMoons { n, noise } => Ok(Dataset::two_moons(*n, *noise, seed)),
            DatasetSpec::Csv(path) => Dataset::from_csv(path),
        }
    }
}

fn from_points(points: Vec<([f64; 2], usize)>) -> Dataset {
    let n = points.len();
    let mut x = Array2::zeros((2, n));
    let mut labels = Vec::with_capacity(n);
    for (i, (p, l)) in points.into_iter().enumerate() {
        x[[0, i]] = p[0];
        x[[1, i]] = p[1];
        labels.push(l);
    }
    Dataset {
        x,
        labels,
        classes: 2,
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.x.nrows()
    }

    /// Columns `idx` as a batch.
    pub fn batch(&self, idx: &[usize]) -> (RealTensor, Vec<usize>) {
        let x = self.x.select(ndarray::Axis(1), idx);
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Alternating classes with means `(-1, -1)` and `(1, 1)`, unit-scale spread.
    pub fn two_gaussians(n: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, stream_id(domain::DATA, 1));
        let noise = Normal::new(0.0, 0.6).expect("valid normal");
        from_points(
            (0..n)
                .map(|i| {
                    let label = i % 2;
                    let mu = if label == 0 { -0.8 } else { 0.8 };
                    (
                        [mu + noise.sample(&mut rng), mu + noise.sample(&mut rng)],
                        label,
                    )
                })
                .collect(),
        )
    }

    /// Uniform points in `[-1, 1]^2`; label 1 when the coordinates share a sign.
    pub fn xor(n: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, stream_id(domain::DATA, 2));
        from_points(
            (0..n)
                .map(|_| {
                    let a: f64 = rng.random_range(-1.0..1.0);
                    let b: f64 = rng.random_range(-1.0..1.0);
                    ([a, b], usize::from(a * b > 0.0))
                })
                .collect(),
        )
    }

    /// Two interleaved half circles, centered and scaled to roughly `[-1, 1]`.
    pub fn two_moons(n: usize, noise: f64, seed: u64) -> Self {
        let mut rng = stream_rng(seed, stream_id(domain::DATA, 3));
        let jitter = Normal::new(0.0, noise.max(0.0)).expect("valid normal");
        from_points(
            (0..n)
                .map(|i| {
                    let label = i % 2;
                    let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
                    let (x, y) = if label == 0 {
                        (t.cos(), t.sin())
                    } else {
                        (1.0 - t.cos(), 0.5 - t.sin())
                    };
                    let x = (x - 0.5) / 1.5 + jitter.sample(&mut rng) / 1.5;
                    let y = (y - 0.25) / 1.5 + jitter.sample(&mut rng) / 1.5;
                    ([x, y], label)
                })
                .collect(),
        )
    }

    /// Reads a file with header `f1,...,fd,label`.
    pub fn from_csv<P: AsRef<Path>>(path: P) -> Result<Self, TrainError> {
        let mut reader =
            csv::Reader::from_path(path.as_ref()).map_err(|e| TrainError::Data(e.to_string()))?;
        let headers = reader
            .headers()
            .map_err(|e| TrainError::Data(e.to_string()))?
            .clone();
        let d = headers.len().saturating_sub(1);
        let expected: Vec<String> = (1..=d)
            .map(|i| format!("f{i}"))
            .chain(["label".to_string()])
            .collect();
        if d == 0 || headers.iter().ne(expected.iter().map(String::as_str)) {
            return Err(TrainError::Data(format!(
                "header must be f1..fd,label, got {:?}",
                headers.iter().collect::<Vec<_>>()
            )));
        }
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| TrainError::Data(e.to_string()))?;
            for f in rec.iter().take(d) {
                let v: f64 = f.trim().parse().map_err(|_| {
                    TrainError::Data(format!("row {}: bad feature {f:?}", line + 1))
                })?;
                if !v.is_finite() {
                    return Err(TrainError::Data(format!(
                        "row {}: non-finite feature",
                        line + 1
                    )));
                }
                feats.push(v);
            }
            let l = &rec[d];
            labels.push(
                l.trim()
                    .parse::<usize>()
                    .map_err(|_| TrainError::Data(format!("row {}: bad label {l:?}", line + 1)))?,
            );
        }
        if labels.is_empty() {
            return Err(TrainError::Data("no rows".into()));
        }
        let n = labels.len();
        // rows were read sample-major; store one sample per column
        let x = Array2::from_shape_vec((n, d), feats)
            .expect("row lengths checked")
            .reversed_axes()
            .as_standard_layout()
            .to_owned();
        let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
        Ok(Dataset { x, labels, classes })
    }

    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| TrainError::Data(e.to_string()))?;
        let header: Vec<String> = (1..=self.features())
            .map(|i| format!("f{i}"))
            .chain(["label".to_string()])
            .collect();
        w.write_record(&header)
            .map_err(|e| TrainError::Data(e.to_string()))?;
        for (i, label) in self.labels.iter().enumerate() {
            let row: Vec<String> = self
                .x
                .column(i)
                .iter()
                .map(|v| format!("{v:?}"))
                .chain([label.to_string()])
                .collect();
            w.write_record(&row)
                .map_err(|e| TrainError::Data(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}
