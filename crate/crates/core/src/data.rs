//! Datasets: the toy regression problem, split classification task
//! sequences and CSV ingestion.

use std::f64::consts::PI;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::svi::{make_batches, Batch};
use crate::tensor::Tensor;

/// Inputs (`N×D`) with targets (`N×d`, or `N` class indices).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Tensor,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Tensor) -> Result<Self> {
        if inputs.rank() != 2 {
            return Err(Error::Contract(format!("inputs must be N×D, got {:?}", inputs.shape())));
        }
        if targets.rank() == 0 || targets.rows() != inputs.rows() {
            return Err(Error::Contract(format!(
                "{} inputs but targets of shape {:?}",
                inputs.rows(),
                targets.shape()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_width(&self) -> usize {
        self.inputs.cols()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(idx),
            targets: self.targets.select_rows(idx),
        }
    }

    pub fn batches(&self, batch_size: usize) -> Result<Vec<Batch>> {
        make_batches(&self.inputs, &self.targets, batch_size)
    }

    /// Number of classes implied by integer targets (`max + 1`).
    pub fn num_classes(&self) -> usize {
        self.targets.data().iter().fold(0.0f64, |a, &b| a.max(b)) as usize + 1
    }

    pub fn concat(parts: &[&Dataset]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat of zero datasets".into()))?;
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.input_width() != first.input_width() || p.targets.shape()[1..] != first.targets.shape()[1..] {
                return Err(Error::Contract("concat of datasets with different widths".into()));
            }
            x.extend_from_slice(p.inputs.data());
            y.extend_from_slice(p.targets.data());
            n += p.len();
        }
        let mut ys = first.targets.shape().to_vec();
        ys[0] = n;
        Self::new(Tensor::new(vec![n, first.input_width()], x)?, Tensor::new(ys, y)?)
    }
}

/// Lower and upper input clusters of the toy regression problem.
pub const TOY_CLUSTERS: [(f64, f64); 2] = [(-1.0, -0.7), (0.5, 1.0)];
pub const TOY_NOISE_SD: f64 = 0.1;

pub fn toy_function(x: f64) -> f64 {
    (4.0 * x + 0.8).cos()
}

/// `n_per_cluster` inputs from each cluster with `y ~ N(cos(4x + 0.8), 0.1²)`.
pub fn gen_toy_regression(n_per_cluster: usize, seed: u64) -> Result<Dataset> {
    if n_per_cluster == 0 {
        return Err(Error::Config("need at least one point per cluster".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, TOY_NOISE_SD).expect("valid sd");
    let mut xs = Vec::with_capacity(2 * n_per_cluster);
    for &(lo, hi) in &TOY_CLUSTERS {
        let u = Uniform::new_inclusive(lo, hi).expect("valid range");
        xs.extend((0..n_per_cluster).map(|_| u.sample(&mut rng)));
    }
    let ys: Vec<f64> = xs.iter().map(|&x| toy_function(x) + noise.sample(&mut rng)).collect();
    let n = xs.len();
    Dataset::new(Tensor::matrix(n, 1, xs)?, Tensor::matrix(n, 1, ys)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    GaussianBlobs,
    TwoMoonsRotations,
}

impl FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_blobs" | "gaussian-blobs" => Ok(Self::GaussianBlobs),
            "two_moons_rotations" | "two-moons-rotations" => Ok(Self::TwoMoonsRotations),
            other => Err(Error::Config(format!("unknown split kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub train: Dataset,
    pub test: Dataset,
}

/// Separation between the two blobs of a task, in units of the blob sd.
pub const BLOB_SEPARATION: f64 = 4.0;

/// A sequence of binary classification tasks over 2-d inputs, each with
/// `n` training and `n` test points.
///
/// Gaussian blobs: task `t` places a blob pair around its own center with
/// the classes `BLOB_SEPARATION` sds apart along a random direction.
/// Two moons: task `t` rotates the two-moons pattern by `π t / num_tasks`
/// around its own center.
pub fn gen_split_tasks(kind: SplitKind, num_tasks: usize, n: usize, seed: u64) -> Result<Vec<Task>> {
    if num_tasks < 2 {
        return Err(Error::Config("a task sequence needs at least 2 tasks".into()));
    }
    if n < 2 {
        return Err(Error::Config("each task needs at least 2 examples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut tasks = Vec::with_capacity(num_tasks);
    for t in 0..num_tasks {
        let ring = 2.0 * PI * t as f64 / num_tasks as f64;
        let center = [4.0 * ring.cos(), 4.0 * ring.sin()];
        let (dir, rot) = match kind {
            SplitKind::GaussianBlobs => {
                let phi: f64 = rng.random_range(0.0..2.0 * PI);
                ([phi.cos(), phi.sin()], 0.0)
            }
            SplitKind::TwoMoonsRotations => ([0.0, 0.0], PI * t as f64 / num_tasks as f64),
        };
        let draw = |count: usize, rng: &mut ChaCha8Rng| -> Result<Dataset> {
            let mut x = Vec::with_capacity(count * 2);
            let mut y = Vec::with_capacity(count);
            for i in 0..count {
                let label = (i % 2) as f64;
                let sign = 2.0 * label - 1.0;
                let (px, py) = match kind {
                    SplitKind::GaussianBlobs => {
                        let h = BLOB_SEPARATION / 2.0 * sign;
                        (
                            center[0] + h * dir[0] + normal.sample(rng),
                            center[1] + h * dir[1] + normal.sample(rng),
                        )
                    }
                    SplitKind::TwoMoonsRotations => {
                        let a: f64 = rng.random_range(0.0..PI);
                        let (mx, my) = if label == 0.0 {
                            (a.cos(), a.sin())
                        } else {
                            (1.0 - a.cos(), 0.5 - a.sin())
                        };
                        let (mx, my) = (mx - 0.5 + 0.1 * normal.sample(rng), my - 0.25 + 0.1 * normal.sample(rng));
                        (
                            center[0] + mx * rot.cos() - my * rot.sin(),
                            center[1] + mx * rot.sin() + my * rot.cos(),
                        )
                    }
                };
                x.push(px);
                x.push(py);
                y.push(label);
            }
            Dataset::new(Tensor::matrix(count, 2, x)?, Tensor::vector(y))
        };
        let train = draw(n, &mut rng)?;
        let test = draw(n, &mut rng)?;
        tasks.push(Task { train, test });
    }
    Ok(tasks)
}

/// Reads a headed CSV of numbers. All columns except `target_column` become
/// features, in file order. Parse errors name the 1-based data row (the
/// header is not counted) and the column.
pub fn load_csv(path: &Path, target_column: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .clone();
    if headers.is_empty() || headers.iter().all(str::is_empty) {
        return Err(Error::Format(format!("{}: empty file", path.display())));
    }
    let target = headers
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| Error::Config(format!("target column {target_column:?} not in {}", path.display())))?;
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            column: String::new(),
            detail: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row,
                column: String::new(),
                detail: format!("{} cells, expected {}", record.len(), headers.len()),
            });
        }
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| Error::Parse {
                row,
                column: headers[c].to_string(),
                detail: format!("not a finite number: {cell:?}"),
            })?;
            if c == target {
                y.push(v);
            } else {
                x.push(v);
            }
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Format(format!("{}: no data rows", path.display())));
    }
    Dataset::new(Tensor::matrix(rows, headers.len() - 1, x)?, Tensor::matrix(rows, 1, y)?)
}
