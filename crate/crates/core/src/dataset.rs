//! Input-output records, their CSV/JSON on-disk form, and per-channel
//! standardization.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Val,
    Test,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Val => "val",
            Role::Test => "test",
        }
    }
}

/// Sampled record `(u_k, y_k)`, `k = 0..N`. `y_clean` is the noiseless
/// output and is only used for oracle checks, never for fitting.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub u: Tensor,
    pub y: Tensor,
    pub y_clean: Option<Tensor>,
    pub ts: f64,
    pub role: Role,
}

/// Sidecar metadata written next to each CSV record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub ts: f64,
    pub snr_db: f64,
    pub role: Role,
    pub index: usize,
    pub phase_seed: u64,
    pub state_seed: u64,
    pub noise_seed: u64,
    pub config_hash: String,
}

impl Dataset {
    pub fn new(u: Tensor, y: Tensor, ts: f64, role: Role) -> Result<Self> {
        if u.rows() != y.rows() {
            return Err(Error::Shape(format!(
                "input has {} samples, output has {}",
                u.rows(),
                y.rows()
            )));
        }
        if !(ts > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sampling time must be positive, got {ts}"
            )));
        }
        Ok(Self {
            u,
            y,
            y_clean: None,
            ts,
            role,
        })
    }

    pub fn len(&self) -> usize {
        self.u.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.u.rows() == 0
    }

    pub fn n_u(&self) -> usize {
        self.u.cols()
    }

    pub fn n_y(&self) -> usize {
        self.y.cols()
    }

    /// Writes `t,u1..,y1..[,y1_clean..]` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.n_u()).map(|i| format!("u{i}")));
        header.extend((1..=self.n_y()).map(|i| format!("y{i}")));
        if self.y_clean.is_some() {
            header.extend((1..=self.n_y()).map(|i| format!("y{i}_clean")));
        }
        w.write_record(&header).map_err(|e| Error::format(path, e))?;
        for k in 0..self.len() {
            let mut row = vec![(k as f64 * self.ts).to_string()];
            row.extend(self.u.row_slice(k).iter().map(f64::to_string));
            row.extend(self.y.row_slice(k).iter().map(f64::to_string));
            if let Some(clean) = &self.y_clean {
                row.extend(clean.row_slice(k).iter().map(f64::to_string));
            }
            w.write_record(&row).map_err(|e| Error::format(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, ts: f64, role: Role) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
        let header = r.headers().map_err(|e| Error::format(path, e))?.clone();
        let n_u = header.iter().filter(|h| h.starts_with('u')).count();
        let n_y = header
            .iter()
            .filter(|h| h.starts_with('y') && !h.ends_with("_clean"))
            .count();
        let n_clean = header.iter().filter(|h| h.ends_with("_clean")).count();
        if header.get(0) != Some("t") || n_u == 0 || n_y == 0 || (n_clean != 0 && n_clean != n_y) {
            return Err(Error::format(path, format!("unexpected header {header:?}")));
        }
        let (mut u, mut y, mut clean) = (Vec::new(), Vec::new(), Vec::new());
        let mut rows = 0;
        for record in r.records() {
            let record = record.map_err(|e| Error::format(path, e))?;
            let values: Vec<f64> = record
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|e| Error::format(path, format!("row {rows}: {e}")))
                })
                .collect::<Result<_>>()?;
            if values.len() != 1 + n_u + n_y + n_clean {
                return Err(Error::format(path, format!("row {rows} has {} fields", values.len())));
            }
            u.extend_from_slice(&values[1..1 + n_u]);
            y.extend_from_slice(&values[1 + n_u..1 + n_u + n_y]);
            clean.extend_from_slice(&values[1 + n_u + n_y..]);
            rows += 1;
        }
        let mut ds = Dataset::new(Tensor::from_vec(rows, n_u, u), Tensor::from_vec(rows, n_y, y), ts, role)?;
        if n_clean > 0 {
            ds.y_clean = Some(Tensor::from_vec(rows, n_y, clean));
        }
        Ok(ds)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

/// Paths of the CSV record and its metadata sidecar.
pub fn record_paths(dir: &Path, role: Role, index: usize) -> (PathBuf, PathBuf) {
    let stem = format!("{}{index}", role.as_str());
    (dir.join(format!("{stem}.csv")), dir.join(format!("{stem}.json")))
}

/// Per-channel affine standardization fitted on training records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub u_mean: Vec<f64>,
    pub u_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

fn channel_stats(records: &[&Tensor]) -> (Vec<f64>, Vec<f64>) {
    let cols = records[0].cols();
    let n: usize = records.iter().map(|t| t.rows()).sum();
    let mut mean = vec![0.0; cols];
    for t in records {
        for k in 0..t.rows() {
            for (m, v) in mean.iter_mut().zip(t.row_slice(k)) {
                *m += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; cols];
    for t in records {
        for k in 0..t.rows() {
            for ((s, v), m) in var.iter_mut().zip(t.row_slice(k)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
    }
    let std = var.iter().map(|s| (s / n as f64).sqrt()).collect();
    (mean, std)
}

fn apply(t: &Tensor, mean: &[f64], scale: &[f64], inverse: bool) -> Tensor {
    let mut out = t.clone();
    let cols = t.cols();
    for row in out.data_mut().chunks_mut(cols) {
        for ((v, m), s) in row.iter_mut().zip(mean).zip(scale) {
            *v = if inverse { *v * s + m } else { (*v - m) / s };
        }
    }
    out
}

impl Normalizer {
    pub fn fit(records: &[Dataset]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidArgument("no records to fit the normalizer on".into()));
        }
        let us: Vec<&Tensor> = records.iter().map(|d| &d.u).collect();
        let ys: Vec<&Tensor> = records.iter().map(|d| &d.y).collect();
        let (u_mean, mut u_std) = channel_stats(&us);
        let (y_mean, y_std) = channel_stats(&ys);
        if y_std.iter().any(|s| *s == 0.0) {
            return Err(Error::Numerical("an output channel has zero variance".into()));
        }
        // all-zero inputs are left unscaled
        u_std.iter_mut().filter(|s| **s == 0.0).for_each(|s| *s = 1.0);
        Ok(Self {
            u_mean,
            u_std,
            y_mean,
            y_std,
        })
    }

    pub fn identity(n_u: usize, n_y: usize) -> Self {
        Self {
            u_mean: vec![0.0; n_u],
            u_std: vec![1.0; n_u],
            y_mean: vec![0.0; n_y],
            y_std: vec![1.0; n_y],
        }
    }

    pub fn normalize(&self, d: &Dataset) -> Dataset {
        Dataset {
            u: apply(&d.u, &self.u_mean, &self.u_std, false),
            y: apply(&d.y, &self.y_mean, &self.y_std, false),
            y_clean: d.y_clean.as_ref().map(|c| apply(c, &self.y_mean, &self.y_std, false)),
            ts: d.ts,
            role: d.role,
        }
    }

    pub fn denormalize_y(&self, y: &Tensor) -> Tensor {
        apply(y, &self.y_mean, &self.y_std, true)
    }
}
