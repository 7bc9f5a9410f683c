#![allow(dead_code)]

use nalgebra::DMatrix;
use phnn_core::autodiff::Tensor;
use phnn_core::dataset::{Dataset, Role};
use phnn_core::linear_ident::{CtStateSpace, DtStateSpace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

/// Random stable continuous-time system: eigenvalues with real parts in
/// [-2, -0.2] and oscillatory pairs, in a random well-conditioned basis.
pub fn random_stable_ct(rng: &mut ChaCha8Rng, n: usize, nu: usize, ny: usize) -> CtStateSpace {
    let mut a = DMatrix::zeros(n, n);
    let mut i = 0;
    while i < n {
        let re = -rng.random_range(0.2..2.0);
        if i + 1 < n {
            let im = rng.random_range(0.3..3.0);
            a[(i, i)] = re;
            a[(i + 1, i + 1)] = re;
            a[(i, i + 1)] = im;
            a[(i + 1, i)] = -im;
            i += 2;
        } else {
            a[(i, i)] = re;
            i += 1;
        }
    }
    let t = DMatrix::identity(n, n) + gaussian(rng, n, n) * 0.3;
    let ti = t.clone().try_inverse().unwrap();
    CtStateSpace::new(
        &t * a * &ti,
        gaussian(rng, n, nu),
        gaussian(rng, ny, n),
        DMatrix::zeros(ny, nu),
    )
    .unwrap()
}

/// Random stable discrete-time system with pole radii in [0.5, 0.9].
pub fn random_stable_dt(rng: &mut ChaCha8Rng, n: usize, nu: usize, ny: usize, ts: f64) -> DtStateSpace {
    let mut a = DMatrix::zeros(n, n);
    let mut i = 0;
    while i < n {
        let r = rng.random_range(0.5..0.9);
        let th = rng.random_range(0.2..2.5f64);
        if i + 1 < n {
            a[(i, i)] = r * th.cos();
            a[(i + 1, i + 1)] = r * th.cos();
            a[(i, i + 1)] = r * th.sin();
            a[(i + 1, i)] = -r * th.sin();
            i += 2;
        } else {
            a[(i, i)] = r;
            i += 1;
        }
    }
    let t = DMatrix::identity(n, n) + gaussian(rng, n, n) * 0.3;
    let ti = t.clone().try_inverse().unwrap();
    DtStateSpace::new(
        &t * a * &ti,
        gaussian(rng, n, nu),
        gaussian(rng, ny, n),
        DMatrix::zeros(ny, nu),
        ts,
    )
    .unwrap()
}

pub fn record_from(sys: &DtStateSpace, u: &DMatrix<f64>, x0: &DMatrix<f64>) -> Dataset {
    let y = sys.simulate(u, x0);
    Dataset::new(Tensor::from_dmatrix(u), Tensor::from_dmatrix(&y), sys.ts, Role::Train).unwrap()
}

/// Normalized linear port-Hamiltonian realization of a random stable
/// square system.
pub fn random_linear_ph(rng: &mut ChaCha8Rng, n: usize, p: usize) -> phnn_core::ph_construct::LinearPH {
    let sys = random_stable_ct(rng, n, p, p);
    phnn_core::ph_construct::linear_ph_from_ct(&sys, &[], &Default::default()).unwrap()
}
