//! Synthetic low-dimensional datasets, few-shot subsampling and CSV I/O.

use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::Tensor;
pub use crate::losses::{LabeledBatch, OutlierPool, PoolSource};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    GaussianMixture,
    Ring,
    UniformNoise,
    LowFrequencyNoise,
    Csv,
}

/// Parameters of one dataset. Fields not used by `kind` are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub kind: DatasetKind,
    pub dim: usize,
    pub size: usize,
    pub seed: u64,
    /// Gaussian-mixture component means, one per class.
    pub means: Vec<Vec<f64>>,
    /// Gaussian-mixture per-coordinate standard deviation.
    pub scale: f64,
    /// Ring center; empty means the origin.
    pub center: Vec<f64>,
    pub r_inner: f64,
    pub r_outer: f64,
    /// Uniform-noise box, applied to every coordinate.
    pub low: f64,
    pub high: f64,
    /// Low-frequency-noise amplitude and moving-average window.
    pub amplitude: f64,
    pub window: usize,
    /// Source file for `csv`.
    pub path: String,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            name: String::new(),
            kind: DatasetKind::UniformNoise,
            dim: 2,
            size: 500,
            seed: 0,
            means: Vec::new(),
            scale: 0.05,
            center: Vec::new(),
            r_inner: 0.8,
            r_outer: 1.0,
            low: -1.0,
            high: 1.0,
            amplitude: 0.5,
            window: 2,
            path: String::new(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self, key: &str) -> Result<()> {
        let err = |field: &str, msg: String| Err(Error::config(format!("{key}.{field}"), msg));
        if self.kind != DatasetKind::Csv {
            if self.size == 0 {
                return err("size", "must be ≥ 1".into());
            }
            if self.dim == 0 {
                return err("dim", "must be ≥ 1".into());
            }
        }
        match self.kind {
            DatasetKind::GaussianMixture => {
                if self.means.is_empty() {
                    return err("means", "need at least one component mean".into());
                }
                if let Some(m) = self.means.iter().find(|m| m.len() != self.dim) {
                    return err("means", format!("mean {m:?} does not have dimension {}", self.dim));
                }
                if !(self.scale > 0.0) {
                    return err("scale", "must be > 0".into());
                }
            }
            DatasetKind::Ring => {
                if !(0.0 <= self.r_inner && self.r_inner <= self.r_outer) {
                    return err("r_inner", "need 0 ≤ r_inner ≤ r_outer".into());
                }
                if !self.center.is_empty() && self.center.len() != self.dim {
                    return err("center", format!("must have dimension {}", self.dim));
                }
            }
            DatasetKind::UniformNoise => {
                if !(self.low < self.high) {
                    return err("low", "need low < high".into());
                }
            }
            DatasetKind::LowFrequencyNoise => {
                if !(self.amplitude >= 0.0) {
                    return err("amplitude", "must be ≥ 0".into());
                }
                if self.window == 0 || self.window > self.dim {
                    return err("window", format!("must lie in [1, {}]", self.dim));
                }
            }
            DatasetKind::Csv => {
                if self.path.is_empty() {
                    return err("path", "csv datasets need a path".into());
                }
            }
        }
        Ok(())
    }
}

/// Equal-sized Gaussian clusters labeled by component index (remainder
/// points go to the first components).
pub fn gen_gaussian_mixture(spec: &DatasetSpec) -> Result<LabeledBatch> {
    if spec.means.is_empty() {
        return Err(Error::InvalidArgument("mixture needs at least one component".into()));
    }
    if !(spec.scale > 0.0) {
        return Err(Error::InvalidArgument("mixture scale must be positive".into()));
    }
    let d = spec.means[0].len();
    if d == 0 || spec.means.iter().any(|m| m.len() != d) {
        return Err(Error::InvalidArgument("component means must share a positive dimension".into()));
    }
    let k = spec.means.len();
    let mut rng = rng::seeded(spec.seed);
    let mut data = Vec::with_capacity(spec.size * d);
    let mut labels = Vec::with_capacity(spec.size);
    for (c, mean) in spec.means.iter().enumerate() {
        let count = spec.size / k + usize::from(c < spec.size % k);
        for _ in 0..count {
            for &mu in mean {
                data.push(mu + spec.scale * rng.sample::<f64, _>(StandardNormal));
            }
            labels.push(c);
        }
    }
    LabeledBatch::new(Tensor::matrix(labels.len(), d, data)?, labels)
}

/// Points with uniformly random direction and radius uniform in
/// `[r_inner, r_outer]` around `center`.
pub fn gen_ring(spec: &DatasetSpec) -> Result<OutlierPool> {
    if !(0.0 <= spec.r_inner && spec.r_inner <= spec.r_outer) {
        return Err(Error::InvalidArgument(format!(
            "invalid ring radii [{}, {}]",
            spec.r_inner, spec.r_outer
        )));
    }
    let d = spec.dim;
    let center = if spec.center.is_empty() {
        vec![0.0; d]
    } else {
        spec.center.clone()
    };
    if center.len() != d || d == 0 {
        return Err(Error::InvalidArgument("ring center dimension mismatch".into()));
    }
    let mut rng = rng::seeded(spec.seed);
    let mut data = Vec::with_capacity(spec.size * d);
    for _ in 0..spec.size {
        let dir = loop {
            let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect::<Vec<_>>();
            }
        };
        let radius = if spec.r_inner == spec.r_outer {
            spec.r_inner
        } else {
            rng.random_range(spec.r_inner..=spec.r_outer)
        };
        for (c, u) in center.iter().zip(dir) {
            data.push(c + radius * u);
        }
    }
    OutlierPool::new(d, data, PoolSource::OutlierDataset)
}

/// I.i.d. uniform points in the box `[low, high]^dim`.
pub fn gen_uniform_noise(spec: &DatasetSpec) -> Result<OutlierPool> {
    if !(spec.low < spec.high) || spec.dim == 0 {
        return Err(Error::InvalidArgument("invalid uniform box".into()));
    }
    let mut rng = rng::seeded(spec.seed);
    let data = (0..spec.size * spec.dim)
        .map(|_| rng.random_range(spec.low..spec.high))
        .collect();
    OutlierPool::new(spec.dim, data, PoolSource::OutlierDataset)
}

/// Circular moving average of width `window`.
fn smooth(noise: &[f64], window: usize) -> Vec<f64> {
    let d = noise.len();
    (0..d)
        .map(|i| (0..window).map(|t| noise[(i + t) % d]).sum::<f64>() / window as f64)
        .collect()
}

/// Each normal sample plus `amplitude` times Gaussian noise smoothed by a
/// circular moving average across coordinates, which suppresses the
/// high-frequency part of the perturbation.
pub fn gen_low_frequency_noise(spec: &DatasetSpec, normals: &LabeledBatch) -> Result<OutlierPool> {
    let d = normals.dim();
    if spec.window == 0 || spec.window > d {
        return Err(Error::InvalidArgument(format!(
            "smoothing window {} must lie in [1, {d}]",
            spec.window
        )));
    }
    if !(spec.amplitude >= 0.0) {
        return Err(Error::InvalidArgument("amplitude must be ≥ 0".into()));
    }
    let mut rng = rng::seeded(spec.seed);
    let mut data = Vec::with_capacity(normals.len() * d);
    for r in 0..normals.len() {
        let noise: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let smoothed = smooth(&noise, spec.window);
        for (x, s) in normals.inputs().row(r).iter().zip(smoothed) {
            data.push(x + spec.amplitude * s);
        }
    }
    OutlierPool::new(d, data, PoolSource::OutlierDataset)
}

/// Uniform subset of `n` rows drawn without replacement.
pub fn sample_few_shots(pool: &OutlierPool, n: usize, seed: u64) -> Result<OutlierPool> {
    if n > pool.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {n} few-shots from a pool of {}",
            pool.len()
        )));
    }
    let mut rng = rng::seeded(seed);
    let picked = index::sample(&mut rng, pool.len(), n).into_vec();
    Ok(pool.select(&picked))
}

/// Contents of a CSV file: labeled when the header ends with `label`.
#[derive(Clone, Debug, PartialEq)]
pub enum CsvData {
    Labeled(LabeledBatch),
    Unlabeled(OutlierPool),
}

pub fn load_csv(path: &Path) -> Result<CsvData> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => parse_err(1, format!("{other:?}")),
        })?;
    let header = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let columns = header.len();
    let labeled = header.iter().last() == Some("label");
    if let Some(pos) = header.iter().position(|h| h == "label") {
        if pos + 1 != columns {
            return Err(parse_err(1, "`label` must be the final column".into()));
        }
    }
    let dim = if labeled { columns - 1 } else { columns };
    if dim == 0 {
        return Err(parse_err(1, "no feature columns".into()));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != columns {
            return Err(parse_err(
                line,
                format!("expected {columns} columns, found {}", record.len()),
            ));
        }
        for field in record.iter().take(dim) {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line, format!("not a number: `{field}`")))?;
            data.push(v);
        }
        if labeled {
            let field = &record[dim];
            labels.push(
                field
                    .parse::<usize>()
                    .map_err(|_| parse_err(line, format!("not a class label: `{field}`")))?,
            );
        }
    }
    if labeled {
        if labels.is_empty() {
            return Err(parse_err(1, "labeled file has no rows".into()));
        }
        let rows = labels.len();
        Ok(CsvData::Labeled(LabeledBatch::new(
            Tensor::matrix(rows, dim, data)?,
            labels,
        )?))
    } else {
        Ok(CsvData::Unlabeled(OutlierPool::new(dim, data, PoolSource::OutlierDataset)?))
    }
}

fn write_rows(path: &Path, dim: usize, rows: usize, row: impl Fn(usize) -> (Vec<f64>, Option<usize>)) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Serialize(format!("{other:?}")),
    })?;
    let labeled = rows > 0 && row(0).1.is_some();
    let mut header: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    if labeled {
        header.push("label".into());
    }
    let to_err = |e: csv::Error| Error::Serialize(e.to_string());
    w.write_record(&header).map_err(to_err)?;
    for r in 0..rows {
        let (values, label) = row(r);
        let mut fields: Vec<String> = values.iter().map(|v| format!("{v:e}")).collect();
        if let Some(l) = label {
            fields.push(l.to_string());
        }
        w.write_record(&fields).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `x0,…,x{d-1},label` with shortest round-trip float formatting.
pub fn save_labeled_csv(batch: &LabeledBatch, path: &Path) -> Result<()> {
    write_rows(path, batch.dim(), batch.len(), |r| {
        (batch.inputs().row(r).to_vec(), Some(batch.labels()[r]))
    })
}

pub fn save_pool_csv(pool: &OutlierPool, path: &Path) -> Result<()> {
    write_rows(path, pool.dim(), pool.len(), |r| (pool.row(r).to_vec(), None))
}

pub fn save_csv(data: &CsvData, path: &Path) -> Result<()> {
    match data {
        CsvData::Labeled(b) => save_labeled_csv(b, path),
        CsvData::Unlabeled(p) => save_pool_csv(p, path),
    }
}
