use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(tensor, entry)` achieving the maximum.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.value(out).item()
}

/// Compares reverse-mode gradients of `f` with central differences of
/// step `h` over every parameter entry.
///
/// The error of an entry is `|a - d| / max(|a|, |d|, 1e-12)`.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let selection: Vec<Vec<usize>> = params.iter().map(|p| (0..p.len()).collect()).collect();
    run(&f, params, h, &selection)
}

/// Like [`grad_check`] but probes at most `per_tensor` randomly chosen
/// entries of each parameter tensor.
pub fn grad_check_sampled<F>(f: F, params: &[Tensor], h: f64, per_tensor: usize, seed: u64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let selection: Vec<Vec<usize>> = params
        .iter()
        .map(|p| {
            if p.len() <= per_tensor {
                (0..p.len()).collect()
            } else {
                sample(&mut rng, p.len(), per_tensor).into_vec()
            }
        })
        .collect();
    run(&f, params, h, &selection)
}

fn run<F>(f: &F, params: &[Tensor], h: f64, selection: &[Vec<usize>]) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out)?;
    drop(tape);

    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = params.to_vec();
    for (t, entries) in selection.iter().enumerate() {
        let analytic = grads.get(vars[t]);
        for &e in entries {
            let base = params[t].data()[e];
            probe[t].data_mut()[e] = base + h;
            let plus = evaluate(f, &probe);
            probe[t].data_mut()[e] = base - h;
            let minus = evaluate(f, &probe);
            probe[t].data_mut()[e] = base;

            let a = analytic.data()[e];
            let d = (plus - minus) / (2.0 * h);
            let rel = (a - d).abs() / a.abs().max(d.abs()).max(1e-12);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max((a - d).abs());
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = (t, e);
                report.analytic = a;
                report.numeric = d;
            }
        }
    }
    Ok(report)
}
