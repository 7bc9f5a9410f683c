//! Chained mass-spring-damper benchmark with cubic damping and multisine
//! excitation of the first mass.
//!
//! The chain is wall–m1–m2–m3 with the last mass free. With `q` the
//! displacements, `p = M q̇` the momenta and `v = M⁻¹p`,
//!
//! ```text
//! q̇ = v
//! ṗ = e₁ u(t) − K q − D (v∘v∘v + v)
//! ```
//!
//! where the cube acts elementwise on the absolute mass velocities.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::dataset::{Dataset, DatasetMeta, Role};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsdConfig {
    pub masses: Vec<f64>,
    pub stiffness: Vec<f64>,
    pub damping: Vec<f64>,
    /// Fundamental frequency of the multisine (Hz).
    pub f0: f64,
    pub n_lines: usize,
    /// Record length (s).
    pub duration: f64,
    /// Sampling rate (Hz).
    pub sample_rate: f64,
    /// RK4 substeps per sampling interval.
    pub substeps: usize,
    pub snr_db: f64,
    /// Initial states are drawn uniformly from `[-x0_range, x0_range]`.
    pub x0_range: f64,
    pub data_seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for MsdConfig {
    fn default() -> Self {
        Self {
            masses: vec![2.0; 3],
            stiffness: vec![1.0; 3],
            damping: vec![0.5; 3],
            f0: 0.1,
            n_lines: 40,
            duration: 100.0,
            sample_rate: 10.0,
            substeps: 20,
            snr_db: 30.0,
            x0_range: 0.5,
            data_seed: 2024,
            n_train: 5,
            n_val: 2,
            n_test: 1,
        }
    }
}

impl MsdConfig {
    pub fn n_masses(&self) -> usize {
        self.masses.len()
    }

    pub fn ts(&self) -> f64 {
        1.0 / self.sample_rate
    }

    pub fn n_samples(&self) -> usize {
        (self.duration * self.sample_rate).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.masses.len();
        if n == 0 || self.stiffness.len() != n || self.damping.len() != n {
            return Err(Error::Config(format!(
                "masses/stiffness/damping must have equal nonzero lengths, got {}/{}/{}",
                n,
                self.stiffness.len(),
                self.damping.len()
            )));
        }
        if self.masses.iter().chain(&self.stiffness).any(|v| !(*v > 0.0)) {
            return Err(Error::Config("masses and stiffnesses must be positive".into()));
        }
        if self.damping.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("damping coefficients must be nonnegative".into()));
        }
        if self.n_lines == 0 || !(self.f0 > 0.0) || !(self.sample_rate > 0.0) || !(self.duration > 0.0) {
            return Err(Error::Config(
                "multisine and sampling parameters must be positive".into(),
            ));
        }
        if self.substeps < 10 {
            return Err(Error::Config(format!(
                "fine step must be at most Ts/10, got {} substeps",
                self.substeps
            )));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::Config("need at least one train, val and test record".into()));
        }
        Ok(())
    }
}

/// Chain matrices `(M, D, K)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainMatrices {
    pub mass: DMatrix<f64>,
    pub damping: DMatrix<f64>,
    pub stiffness: DMatrix<f64>,
}

/// Element `i` joins mass `i-1` (the wall for `i = 0`) to mass `i`.
fn chain_assembly(coeffs: &[f64]) -> DMatrix<f64> {
    let n = coeffs.len();
    let mut m = DMatrix::zeros(n, n);
    for (i, &c) in coeffs.iter().enumerate() {
        m[(i, i)] += c;
        if i > 0 {
            m[(i - 1, i - 1)] += c;
            m[(i, i - 1)] -= c;
            m[(i - 1, i)] -= c;
        }
    }
    m
}

pub fn assemble_matrices(config: &MsdConfig) -> ChainMatrices {
    ChainMatrices {
        mass: DMatrix::from_diagonal(&DVector::from_vec(config.masses.clone())),
        damping: chain_assembly(&config.damping),
        stiffness: chain_assembly(&config.stiffness),
    }
}

/// `u(t) = Σᵢ sin(2π i f₀ t + φᵢ)`, `i = 1..=phases.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Multisine {
    pub f0: f64,
    pub phases: Vec<f64>,
}

impl Multisine {
    pub fn random(f0: f64, n_lines: usize, rng: &mut impl Rng) -> Self {
        Self {
            f0,
            phases: (0..n_lines).map(|_| rng.random_range(0.0..PI)).collect(),
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.phases
            .iter()
            .enumerate()
            .map(|(i, phi)| (2.0 * PI * (i + 1) as f64 * self.f0 * t + phi).sin())
            .sum()
    }

    pub fn period(&self) -> f64 {
        1.0 / self.f0
    }
}

/// Mechanical energy `½pᵀM⁻¹p + ½qᵀKq` of a state `(q, p)`.
pub fn energy(chain: &ChainMatrices, state: &DVector<f64>) -> f64 {
    let n = chain.mass.nrows();
    let q = state.rows(0, n);
    let p = state.rows(n, n);
    let kinetic: f64 = (0..n).map(|i| p[i] * p[i] / chain.mass[(i, i)]).sum();
    0.5 * kinetic + 0.5 * q.dot(&(&chain.stiffness * q))
}

fn derivative(chain: &ChainMatrices, state: &DVector<f64>, force: f64) -> DVector<f64> {
    let n = chain.mass.nrows();
    let q = state.rows(0, n).into_owned();
    let v = DVector::from_fn(n, |i, _| state[n + i] / chain.mass[(i, i)]);
    let damper = v.map(|x| x * x * x) + &v;
    let mut pdot = -(&chain.stiffness * q) - &chain.damping * damper;
    pdot[0] += force;
    let mut out = DVector::zeros(2 * n);
    out.rows_mut(0, n).copy_from(&v);
    out.rows_mut(n, n).copy_from(&pdot);
    out
}

/// Sampled trajectory: states and forces at `t_k = k Ts`.
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub forces: Vec<f64>,
}

impl Trajectory {
    /// Mass velocities `M⁻¹p` at every sample.
    pub fn velocities(&self, chain: &ChainMatrices) -> Vec<Vec<f64>> {
        let n = chain.mass.nrows();
        self.states
            .iter()
            .map(|s| (0..n).map(|i| s[n + i] / chain.mass[(i, i)]).collect())
            .collect()
    }
}

/// RK4 integration with `substeps` fine steps per sampling interval.
pub fn simulate(
    chain: &ChainMatrices,
    force: impl Fn(f64) -> f64,
    x0: &DVector<f64>,
    ts: f64,
    n_samples: usize,
    substeps: usize,
) -> Result<Trajectory> {
    let h = ts / substeps as f64;
    let mut x = x0.clone();
    let mut states = Vec::with_capacity(n_samples);
    let mut forces = Vec::with_capacity(n_samples);
    for k in 0..n_samples {
        let t_k = k as f64 * ts;
        states.push(x.clone());
        forces.push(force(t_k));
        if k + 1 == n_samples {
            break;
        }
        for j in 0..substeps {
            let t = t_k + j as f64 * h;
            let k1 = derivative(chain, &x, force(t));
            let k2 = derivative(chain, &(&x + &k1 * (0.5 * h)), force(t + 0.5 * h));
            let k3 = derivative(chain, &(&x + &k2 * (0.5 * h)), force(t + 0.5 * h));
            let k4 = derivative(chain, &(&x + &k3 * h), force(t + h));
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite state at fine step {} (sample {k})",
                    k * substeps + j
                )));
            }
        }
    }
    Ok(Trajectory { states, forces })
}

fn channel_std(values: &[Vec<f64>], ch: usize) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().map(|v| v[ch]).sum::<f64>() / n;
    (values.iter().map(|v| (v[ch] - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// One generated record with its provenance.
pub struct GeneratedRecord {
    pub dataset: Dataset,
    pub meta: DatasetMeta,
}

/// Generates one record: random phases and initial state, noiseless
/// velocities, then Gaussian output noise at the configured SNR per channel.
pub fn generate_record(config: &MsdConfig, role: Role, index: usize, seeds: [u64; 3]) -> Result<GeneratedRecord> {
    let chain = assemble_matrices(config);
    let n = config.n_masses();
    let mut phase_rng = ChaCha8Rng::seed_from_u64(seeds[0]);
    let excitation = Multisine::random(config.f0, config.n_lines, &mut phase_rng);
    let mut state_rng = ChaCha8Rng::seed_from_u64(seeds[1]);
    let x0 = DVector::from_fn(2 * n, |_, _| state_rng.random_range(-config.x0_range..=config.x0_range));

    let n_samples = config.n_samples();
    let traj = simulate(
        &chain,
        |t| excitation.eval(t),
        &x0,
        config.ts(),
        n_samples,
        config.substeps,
    )?;
    let clean = traj.velocities(&chain);

    let ratio = 10f64.powf(-config.snr_db / 20.0);
    let sigmas: Vec<f64> = (0..n).map(|c| channel_std(&clean, c) * ratio).collect();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seeds[2]);
    let mut noisy = Vec::with_capacity(n_samples * n);
    for row in &clean {
        for (c, v) in row.iter().enumerate() {
            let e: f64 = StandardNormal.sample(&mut noise_rng);
            noisy.push(v + sigmas[c] * e);
        }
    }
    let mut dataset = Dataset::new(
        Tensor::from_vec(n_samples, 1, traj.forces),
        Tensor::from_vec(n_samples, n, noisy),
        config.ts(),
        role,
    )?;
    dataset.y_clean = Some(Tensor::from_vec(n_samples, n, clean.concat()));
    Ok(GeneratedRecord {
        dataset,
        meta: DatasetMeta {
            ts: config.ts(),
            snr_db: config.snr_db,
            role,
            index,
            phase_seed: seeds[0],
            state_seed: seeds[1],
            noise_seed: seeds[2],
            config_hash: String::new(),
        },
    })
}

/// Train, validation and test records (5/2/1 by default), each with its
/// own phase, initial-state and noise seeds derived from `data_seed`.
pub fn make_experiment_set(config: &MsdConfig) -> Result<Vec<GeneratedRecord>> {
    config.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(config.data_seed);
    let roles = std::iter::repeat_n(Role::Train, config.n_train)
        .chain(std::iter::repeat_n(Role::Val, config.n_val))
        .chain(std::iter::repeat_n(Role::Test, config.n_test));
    let mut counters = [0usize; 3];
    let mut out = Vec::new();
    for role in roles {
        let seeds = [master.next_u64(), master.next_u64(), master.next_u64()];
        let slot = role as usize;
        out.push(generate_record(config, role, counters[slot], seeds)?);
        counters[slot] += 1;
    }
    Ok(out)
}
