//! End-to-end study: data generation, linear estimate, training runs, SNR
//! sweep and figure tables. Every command reads and writes files under an
//! output root (see [`output_root`]).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::dataset::{read_json, record_paths, write_json, Dataset, DatasetMeta, Normalizer, Role};
use crate::error::{Error, Result};
use crate::linear_ident::{d2c, log_grid, subspace_id};
use crate::msd::{make_experiment_set, MsdConfig};
use crate::ph_construct::{linear_ph_from_ct, passivity_report, KypOptions, LinearPH, PassivityReport};
use crate::phnn_model::{Checkpoint, Mode, ModelDims, PhnnParams};
use crate::training::{
    pretrain_encoder, read_log, simulate, simulation_nrmse, tail, train, write_log, PretrainReport, TrainConfig,
    TrainData,
};

/// Environment variable overriding the configured output root.
pub const OUT_ENV: &str = "PHNN_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_x: usize,
    pub encoder_hidden: usize,
    pub matrix_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_x: 6,
            encoder_hidden: 64,
            matrix_hidden: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentConfig {
    /// Past and future block rows of the subspace method.
    pub horizon: usize,
    /// Points of the logarithmic frequency grid used for diagnostics.
    pub grid_points: usize,
    pub kyp: KypOptions,
}

impl Default for IdentConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            grid_points: 100,
            kyp: KypOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub msd: MsdConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub ident: IdentConfig,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub snrs: Vec<f64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            msd: MsdConfig::default(),
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            ident: IdentConfig::default(),
            modes: Mode::ALL.to_vec(),
            seeds: vec![1, 2, 3],
            snrs: vec![10.0, 20.0, 30.0, 40.0],
            output_dir: PathBuf::from("phnn-out"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        cfg.validate().map_err(|e| Error::format(path, e))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.msd.validate()?;
        self.train.validate()?;
        if self.model.n_x == 0 || self.model.encoder_hidden == 0 || self.model.matrix_hidden == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.ident.horizon < self.model.n_x {
            return Err(Error::Config(format!(
                "subspace horizon {} cannot resolve {} states",
                self.ident.horizon, self.model.n_x
            )));
        }
        if self.modes.is_empty() || self.seeds.is_empty() || self.snrs.is_empty() {
            return Err(Error::Config("modes, seeds and snrs must be non-empty".into()));
        }
        Ok(())
    }

    /// SHA-256 of the configuration without its output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let text = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn model_dims(&self) -> ModelDims {
        let n_y = self.msd.n_masses();
        ModelDims {
            n_x: self.model.n_x,
            n_p: n_y,
            n_u: 1,
            n_a: self.train.n_a,
            n_b: self.train.n_b,
            encoder_hidden: self.model.encoder_hidden,
            matrix_hidden: self.model.matrix_hidden,
        }
    }

    /// Copy with a different noise level.
    pub fn with_snr(&self, snr_db: f64) -> Self {
        let mut c = self.clone();
        c.msd.snr_db = snr_db;
        c
    }
}

/// `$PHNN_OUT` if set, otherwise the configured directory.
pub fn output_root(cfg: &ExperimentConfig) -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.output_dir.clone())
}

/// Directory structure below one output root.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn linear_dir(&self) -> PathBuf {
        self.root.join("linear")
    }

    pub fn linear_ph_path(&self) -> PathBuf {
        self.linear_dir().join("linear_ph.json")
    }

    pub fn run_dir(&self, mode: Mode, seed: u64) -> PathBuf {
        self.root.join("runs").join(mode.as_str()).join(format!("seed{seed}"))
    }

    pub fn sweep_dir(&self) -> PathBuf {
        self.root.join("sweep")
    }

    /// Layout of one sweep cell.
    pub fn sweep_cell(&self, snr_db: f64) -> Layout {
        Layout::new(self.sweep_dir().join(format!("snr{snr_db}")))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub config_hash: String,
    pub snr_db: f64,
    pub data_seed: u64,
    pub records: Vec<String>,
}

/// Generates the train/validation/test records with sidecar metadata.
pub fn cmd_generate(cfg: &ExperimentConfig, layout: &Layout) -> Result<DataManifest> {
    cfg.validate()?;
    let dir = layout.data_dir();
    create_dir(&dir)?;
    let hash = cfg.hash();
    let mut records = Vec::new();
    for mut rec in make_experiment_set(&cfg.msd)? {
        rec.meta.config_hash = hash.clone();
        let (csv, meta) = record_paths(&dir, rec.meta.role, rec.meta.index);
        rec.dataset.write_csv(&csv)?;
        write_json(&meta, &rec.meta)?;
        records.push(csv.file_name().expect("file name").to_string_lossy().into_owned());
    }
    let manifest = DataManifest {
        config_hash: hash,
        snr_db: cfg.msd.snr_db,
        data_seed: cfg.msd.data_seed,
        records,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Records of one study, raw and standardized with statistics of the
/// training records.
pub struct StudyData {
    pub train: Vec<Dataset>,
    pub val: Vec<Dataset>,
    pub test: Vec<Dataset>,
    pub normalizer: Normalizer,
}

impl StudyData {
    pub fn load(cfg: &ExperimentConfig, layout: &Layout) -> Result<Self> {
        let dir = layout.data_dir();
        let read_role = |role: Role, count: usize| -> Result<Vec<Dataset>> {
            (0..count)
                .map(|i| {
                    let (csv, meta) = record_paths(&dir, role, i);
                    if !csv.exists() {
                        return Err(Error::InvalidArgument(format!(
                            "{} is missing; run `generate` first",
                            csv.display()
                        )));
                    }
                    let meta: DatasetMeta = read_json(&meta)?;
                    Dataset::read_csv(&csv, meta.ts, role)
                })
                .collect()
        };
        let raw_train = read_role(Role::Train, cfg.msd.n_train)?;
        let raw_val = read_role(Role::Val, cfg.msd.n_val)?;
        let raw_test = read_role(Role::Test, cfg.msd.n_test)?;
        let normalizer = Normalizer::fit(&raw_train)?;
        let norm = |v: Vec<Dataset>| v.iter().map(|d| normalizer.normalize(d)).collect::<Vec<_>>();
        Ok(Self {
            train: norm(raw_train),
            val: norm(raw_val),
            test: norm(raw_test),
            normalizer,
        })
    }

    pub fn ts(&self) -> f64 {
        self.train[0].ts
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinestReport {
    pub config_hash: String,
    pub direct: bool,
    pub passivity: PassivityReport,
    pub io_deviation: Option<f64>,
    pub singular_values: Vec<f64>,
    pub warnings: Vec<String>,
    /// Free-run validation NRMSE of the exported model from a zero state.
    pub val_nrmse_zero_state: f64,
}

/// Linear port-Hamiltonian estimate from the standardized training records.
pub fn estimate_linear_ph(cfg: &ExperimentConfig, data: &StudyData) -> Result<(LinearPH, Vec<f64>, Vec<String>)> {
    let est = subspace_id(&data.train, cfg.model.n_x, cfg.ident.horizon)?;
    let ct = d2c(&est.model)?.pad_inputs(data.train[0].n_y());
    let nyquist = std::f64::consts::PI / data.ts();
    let grid = log_grid(1e-2, nyquist, cfg.ident.grid_points);
    let lin = linear_ph_from_ct(&ct, &grid, &cfg.ident.kyp)?;
    Ok((lin, est.singular_values, est.warnings))
}

fn zero_state_nrmse(lin: &LinearPH, data: &StudyData, rk4_steps: usize) -> Result<f64> {
    let pairs: Vec<(Tensor, Tensor)> = data
        .val
        .iter()
        .map(|d| {
            let (_, y) = crate::training::simulate_linear_ph(lin, &d.u, &vec![0.0; lin.n_x()], d.ts, rk4_steps)?;
            Ok((data.normalizer.denormalize_y(&d.y), data.normalizer.denormalize_y(&y)))
        })
        .collect::<Result<_>>()?;
    let refs: Vec<(&Tensor, &Tensor)> = pairs.iter().map(|(a, b)| (a, b)).collect();
    crate::training::nrmse_pooled(&refs)
}

/// Subspace estimate → continuous time → KYP → PH realization, or with
/// `direct` the constant-matrix model trained on the data.
pub fn cmd_linest(cfg: &ExperimentConfig, layout: &Layout, direct: bool) -> Result<LinestReport> {
    cfg.validate()?;
    let data = StudyData::load(cfg, layout)?;
    let dir = layout.linear_dir();
    create_dir(&dir)?;
    let (lin, singular_values, mut warnings, name) = if direct {
        let seed = cfg.seeds[0];
        let tc = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let params = PhnnParams::init(Mode::LinearDirect, cfg.model_dims(), None, seed)?;
        let state = train(
            params,
            &tc,
            &TrainData {
                train: &data.train,
                val: &data.val,
                normalizer: &data.normalizer,
            },
        )?;
        write_log(&dir.join("log_direct.csv"), &state.log)?;
        Checkpoint::new(state.best_params.clone(), seed, &cfg.hash(), state.best_iter)
            .write(&dir.join("checkpoint_direct.json"))?;
        let lin = state.best_params.direct_as_linear_ph()?;
        let w = state.aborted.into_iter().collect();
        (lin, Vec::new(), w, "linear_ph_direct")
    } else {
        let (lin, sv, w) = estimate_linear_ph(cfg, &data)?;
        (lin, sv, w, "linear_ph")
    };
    warnings.extend(lin.diagnostics.warnings.iter().cloned());
    lin.write(&dir.join(format!("{name}.json")))?;
    let report = LinestReport {
        config_hash: cfg.hash(),
        direct,
        passivity: passivity_report(&lin),
        io_deviation: lin.diagnostics.io_deviation,
        singular_values,
        warnings,
        val_nrmse_zero_state: zero_state_nrmse(&lin, &data, cfg.train.rk4_steps).unwrap_or(f64::INFINITY),
    };
    let suffix = if direct { "_direct" } else { "" };
    write_json(&dir.join(format!("passivity{suffix}.json")), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub config_hash: String,
    pub snr_db: f64,
    pub test_nrmse: f64,
    pub best_val_nrmse: f64,
    pub best_iter: usize,
    /// Validation NRMSE before the first update.
    pub initial_val_nrmse: f64,
    pub pretrain: Option<PretrainReport>,
    pub train_seconds: f64,
    pub skipped_updates: usize,
    pub aborted: Option<String>,
}

fn write_test_trace(path: &Path, ts: f64, first: usize, y: &Tensor, y_hat: &Tensor) -> Result<()> {
    let io = |e: csv::Error| Error::format(path, e);
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let n_y = y.cols();
    let mut header = vec!["t".to_string()];
    header.extend((1..=n_y).map(|i| format!("y{i}")));
    header.extend((1..=n_y).map(|i| format!("y{i}_hat")));
    w.write_record(&header).map_err(io)?;
    for k in 0..y.rows() {
        let mut row = vec![((first + k) as f64 * ts).to_string()];
        row.extend(y.row_slice(k).iter().map(f64::to_string));
        row.extend(y_hat.row_slice(k).iter().map(f64::to_string));
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One full training run: initialization, encoder pretraining (nn-linear-init),
/// training with validation-based selection, and test evaluation.
pub fn cmd_train(cfg: &ExperimentConfig, layout: &Layout, mode: Mode, seed: u64) -> Result<RunSummary> {
    cfg.validate()?;
    let data = StudyData::load(cfg, layout)?;
    let lin = match mode {
        Mode::NnLinearInit => {
            let path = layout.linear_ph_path();
            if !path.exists() {
                return Err(Error::InvalidArgument(format!(
                    "{} is missing; run `linest` first",
                    path.display()
                )));
            }
            Some(LinearPH::read(&path)?)
        }
        _ => None,
    };
    let tc = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let mut params = PhnnParams::init(mode, cfg.model_dims(), lin.as_ref(), seed)?;
    let pretrain = match &lin {
        Some(l) => Some(pretrain_encoder(&mut params, l, &data.train, &tc)?),
        None => None,
    };
    let state = train(
        params,
        &tc,
        &TrainData {
            train: &data.train,
            val: &data.val,
            normalizer: &data.normalizer,
        },
    )?;

    let dir = layout.run_dir(mode, seed);
    create_dir(&dir)?;
    let hash = cfg.hash();
    write_log(&dir.join("log.csv"), &state.log)?;
    Checkpoint::new(state.best_params.clone(), seed, &hash, state.best_iter).write(&dir.join("checkpoint.json"))?;

    let lag = state.best_params.dims.lag();
    let preds = simulate(&state.best_params, &data.test, tc.rk4_steps)?;
    let test_nrmse = simulation_nrmse(&state.best_params, &data.test, &data.normalizer, tc.rk4_steps)?;
    write_test_trace(
        &dir.join("test_sim.csv"),
        data.ts(),
        lag,
        &data.normalizer.denormalize_y(&tail(&data.test[0].y, lag)),
        &data.normalizer.denormalize_y(&preds[0]),
    )?;
    let summary = RunSummary {
        mode,
        seed,
        config_hash: hash,
        snr_db: cfg.msd.snr_db,
        test_nrmse,
        best_val_nrmse: state.best_val_nrmse,
        best_iter: state.best_iter,
        initial_val_nrmse: state.log.first().and_then(|r| r.val_nrmse).unwrap_or(f64::NAN),
        pretrain,
        train_seconds: state.seconds,
        skipped_updates: state.skipped,
        aborted: state.aborted.clone(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    if let Some(reason) = state.aborted {
        return Err(Error::Numerical(format!(
            "training aborted ({reason}); best checkpoint written to {}",
            dir.display()
        )));
    }
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub snr_db: f64,
    pub mean: f64,
    pub min: f64,
    pub noise_floor: f64,
    pub test_nrmse: Vec<f64>,
    pub failures: Vec<String>,
}

/// Noise floor `10^{−SNR/20}` of the NRMSE against noisy measurements.
pub fn noise_floor(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 20.0)
}

/// For each SNR: generate, estimate, and train nn-linear-init for every
/// seed. Failing cells are recorded and the sweep continues.
pub fn cmd_sweep(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &snr in &cfg.snrs {
        let cell_cfg = cfg.with_snr(snr);
        let cell = layout.sweep_cell(snr);
        let mut row = SweepRow {
            snr_db: snr,
            mean: f64::NAN,
            min: f64::NAN,
            noise_floor: noise_floor(snr),
            test_nrmse: Vec::new(),
            failures: Vec::new(),
        };
        let prepared = cmd_generate(&cell_cfg, &cell).and_then(|_| cmd_linest(&cell_cfg, &cell, false));
        match prepared {
            Err(e) => row.failures.push(format!("linear estimate: {e}")),
            Ok(_) => {
                for &seed in &cfg.seeds {
                    match cmd_train(&cell_cfg, &cell, Mode::NnLinearInit, seed) {
                        Ok(s) => row.test_nrmse.push(s.test_nrmse),
                        Err(e) => row.failures.push(format!("seed {seed}: {e}")),
                    }
                }
            }
        }
        if !row.test_nrmse.is_empty() {
            row.mean = row.test_nrmse.iter().sum::<f64>() / row.test_nrmse.len() as f64;
            row.min = row.test_nrmse.iter().cloned().fold(f64::INFINITY, f64::min);
        }
        log::info!(
            "sweep {snr} dB: mean {:.4e}, min {:.4e}, floor {:.4e}",
            row.mean,
            row.min,
            row.noise_floor
        );
        rows.push(row);
    }
    let dir = layout.sweep_dir();
    create_dir(&dir)?;
    write_json(
        &dir.join("table.json"),
        &serde_json::json!({ "config_hash": cfg.hash(), "seeds": cfg.seeds, "rows": rows }),
    )?;
    let path = dir.join("table.csv");
    let io = |e: csv::Error| Error::format(&path, e);
    let mut w = csv::Writer::from_path(&path).map_err(io)?;
    w.write_record(["snr_db", "mean_nrmse", "min_nrmse", "noise_floor", "runs", "failures"])
        .map_err(io)?;
    for r in &rows {
        w.write_record([
            r.snr_db.to_string(),
            format!("{:e}", r.mean),
            format!("{:e}", r.min),
            format!("{:e}", r.noise_floor),
            r.test_nrmse.len().to_string(),
            r.failures.len().to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

/// Five-number summary plus mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
}

/// Linear-interpolated quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let (mean, std) = mean_std(values);
    Some(BoxStats {
        n: s.len(),
        min: s[0],
        q1: quantile(&s, 0.25),
        median: quantile(&s, 0.5),
        q3: quantile(&s, 0.75),
        max: s[s.len() - 1],
        mean,
        std,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub runs: Vec<RunSummary>,
    pub boxplot: Vec<(Mode, BoxStats)>,
    /// Modes without any completed run.
    pub missing: Vec<Mode>,
}

fn completed_runs(layout: &Layout, mode: Mode) -> Result<Vec<(PathBuf, RunSummary)>> {
    let dir = layout.root.join("runs").join(mode.as_str());
    let Ok(entries) = fs::read_dir(&dir) else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        let summary = path.join("summary.json");
        if summary.exists() {
            let s: RunSummary = read_json(&summary)?;
            if s.aborted.is_none() {
                out.push((path, s));
            }
        }
    }
    out.sort_by_key(|(_, s)| s.seed);
    Ok(out)
}

fn read_trace(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::format(path, e))?
        .iter()
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::format(path, e))?;
        rows.push(
            rec.iter()
                .map(|s| s.parse::<f64>().map_err(|e| Error::format(path, e)))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok((header, rows))
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let io = |e: csv::Error| Error::format(path, e);
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Aggregates completed runs into plain CSV tables: per-mode convergence
/// curves and test traces (mean and standard deviation across seeds) and a
/// boxplot table of test NRMSE.
pub fn cmd_report(layout: &Layout, modes: &[Mode]) -> Result<ReportSummary> {
    let out = layout.report_dir();
    create_dir(&out)?;
    let mut summary = ReportSummary {
        runs: Vec::new(),
        boxplot: Vec::new(),
        missing: Vec::new(),
    };
    for &mode in modes {
        let runs = completed_runs(layout, mode)?;
        if runs.is_empty() {
            log::warn!("no completed runs for {mode}");
            summary.missing.push(mode);
            continue;
        }

        // convergence: validation NRMSE per logged iteration
        let logs: Vec<Vec<(usize, f64)>> = runs
            .iter()
            .map(|(dir, _)| {
                read_log(&dir.join("log.csv"))
                    .map(|l| l.into_iter().filter_map(|r| r.val_nrmse.map(|v| (r.iter, v))).collect())
            })
            .collect::<Result<_>>()?;
        let mut rows = Vec::new();
        for (i, (iter, _)) in logs[0].iter().enumerate() {
            let vals: Vec<f64> = logs
                .iter()
                .filter_map(|l| l.get(i).filter(|(it, _)| it == iter).map(|(_, v)| *v))
                .collect();
            let (mean, std) = mean_std(&vals);
            let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            rows.push(
                [
                    iter.to_string(),
                    format!("{mean:e}"),
                    format!("{std:e}"),
                    format!("{min:e}"),
                    format!("{max:e}"),
                ]
                .to_vec(),
            );
        }
        let header: Vec<String> = ["iter", "mean", "std", "min", "max"].map(String::from).to_vec();
        write_rows(&out.join(format!("convergence_{mode}.csv")), &header, &rows)?;

        // test trace: measured output and prediction mean ± std per time
        let traces: Vec<(Vec<String>, Vec<Vec<f64>>)> = runs
            .iter()
            .map(|(dir, _)| read_trace(&dir.join("test_sim.csv")))
            .collect::<Result<_>>()?;
        let n_y = (traces[0].0.len() - 1) / 2;
        let mut header = vec!["t".to_string()];
        header.extend((1..=n_y).map(|i| format!("y{i}")));
        header.extend((1..=n_y).map(|i| format!("y{i}_mean")));
        header.extend((1..=n_y).map(|i| format!("y{i}_std")));
        let len = traces.iter().map(|t| t.1.len()).min().unwrap_or(0);
        let rows: Vec<Vec<String>> = (0..len)
            .map(|k| {
                let base = &traces[0].1[k];
                let mut row: Vec<String> = base[..=n_y].iter().map(f64::to_string).collect();
                let stats: Vec<(f64, f64)> = (0..n_y)
                    .map(|c| mean_std(&traces.iter().map(|t| t.1[k][1 + n_y + c]).collect::<Vec<_>>()))
                    .collect();
                row.extend(stats.iter().map(|s| s.0.to_string()));
                row.extend(stats.iter().map(|s| s.1.to_string()));
                row
            })
            .collect();
        write_rows(&out.join(format!("test_trace_{mode}.csv")), &header, &rows)?;

        let nrmses: Vec<f64> = runs.iter().map(|(_, s)| s.test_nrmse).collect();
        summary.boxplot.push((mode, box_stats(&nrmses).expect("non-empty")));
        summary.runs.extend(runs.into_iter().map(|(_, s)| s));
    }
    if summary.boxplot.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no completed runs under {}; missing modes: {}",
            layout.root.join("runs").display(),
            summary
                .missing
                .iter()
                .map(|m| m.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }
    let header: Vec<String> = ["mode", "n", "min", "q1", "median", "q3", "max", "mean", "std"]
        .map(String::from)
        .to_vec();
    let rows: Vec<Vec<String>> = summary
        .boxplot
        .iter()
        .map(|(m, b)| {
            vec![
                m.to_string(),
                b.n.to_string(),
                format!("{:e}", b.min),
                format!("{:e}", b.q1),
                format!("{:e}", b.median),
                format!("{:e}", b.q3),
                format!("{:e}", b.max),
                format!("{:e}", b.mean),
                format!("{:e}", b.std),
            ]
        })
        .collect();
    write_rows(&out.join("boxplot.csv"), &header, &rows)?;
    write_json(&out.join("report.json"), &summary)?;
    Ok(summary)
}
