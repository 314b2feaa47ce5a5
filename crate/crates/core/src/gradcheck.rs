//! Finite-difference gradient oracle.
//!
//! The oracle never touches the adjoint code: it reruns the forward pass
//! with one input element nudged by ±h and forms the central difference
//! `(f(x+h) - f(x-h)) / 2h`. Agreement with the tape's analytic gradient is
//! the correctness evidence for every differentiable op.
//!
//! Checks run in f64. Element picks are seeded, so failures reproduce.

use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorId};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Relative tolerance against `max(|analytic|, |numeric|)`.
    pub rel_tol: f64,
    /// Absolute escape hatch for near-zero gradients, where the relative
    /// test would compare FD noise against itself.
    pub abs_tol: f64,
    /// At most this many elements are perturbed per leaf; large leaves are
    /// sampled without replacement.
    pub max_checks_per_leaf: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-7,
            max_checks_per_leaf: 48,
            seed: 0x9d5c_03f1,
        }
    }
}

#[derive(Debug)]
pub struct GradCheckReport {
    /// Worst observed `|analytic - numeric| / max(|analytic|, |numeric|)`
    /// among elements that passed the absolute escape.
    pub max_rel_err: f64,
    pub checked_elements: usize,
}

/// Checks the analytic gradient of a scalar-valued graph against central
/// differences.
///
/// `build` must construct the graph from the provided leaves and return the
/// scalar loss; it runs once per perturbation, so it must be a pure function
/// of the leaf values.
pub fn check_gradients<F>(
    leaves: &[(Vec<f64>, Vec<usize>)],
    cfg: &GradCheckConfig,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
{
    let eval = |values: &[Vec<f64>]| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        tape.set_grad_enabled(false);
        let ids = alloc_leaves(&mut tape, leaves, values, false)?;
        let loss = build(&mut tape, &ids)?;
        if tape.numel(loss) != 1 {
            return Err(Error::invalid("gradcheck", "build must return a scalar"));
        }
        Ok(tape.data(loss)[0])
    };

    // Analytic pass.
    let base_values: Vec<Vec<f64>> = leaves.iter().map(|(v, _)| v.clone()).collect();
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::<f64>::new();
        let ids = alloc_leaves(&mut tape, leaves, &base_values, true)?;
        let loss = build(&mut tape, &ids)?;
        if tape.numel(loss) != 1 {
            return Err(Error::invalid("gradcheck", "build must return a scalar"));
        }
        tape.backward(loss)?;
        ids.iter()
            .zip(leaves)
            .map(|(&id, (v, _))| tape.grad(id).map_or(vec![0.0; v.len()], <[f64]>::to_vec))
            .collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut max_rel: f64 = 0.0;
    let mut checked = 0usize;
    for (li, (values, _)) in leaves.iter().enumerate() {
        let mut idx: Vec<usize> = (0..values.len()).collect();
        if idx.len() > cfg.max_checks_per_leaf {
            idx.shuffle(&mut rng);
            idx.truncate(cfg.max_checks_per_leaf);
            idx.sort_unstable();
        }
        for j in idx {
            let mut plus = base_values.clone();
            plus[li][j] += cfg.step;
            let mut minus = base_values.clone();
            minus[li][j] -= cfg.step;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * cfg.step);
            let a = analytic[li][j];
            let diff = (a - numeric).abs();
            checked += 1;
            if diff <= cfg.abs_tol {
                continue;
            }
            let rel = diff / a.abs().max(numeric.abs());
            max_rel = max_rel.max(rel);
            if rel > cfg.rel_tol {
                return Err(Error::Numeric(format!(
                    "gradient check failed at leaf {li} element {j}: \
                     analytic {a:.9e}, numeric {numeric:.9e}, rel err {rel:.3e}"
                )));
            }
        }
    }
    Ok(GradCheckReport { max_rel_err: max_rel, checked_elements: checked })
}

fn alloc_leaves(
    tape: &mut Tape<f64>,
    leaves: &[(Vec<f64>, Vec<usize>)],
    values: &[Vec<f64>],
    requires_grad: bool,
) -> Result<Vec<TensorId>> {
    leaves
        .iter()
        .zip(values)
        .map(|((_, shape), v)| tape.leaf(v.clone(), shape, requires_grad))
        .collect()
}

/// Fills a buffer with values bounded away from zero, for checking kinked
/// functions (relu, abs) where finite differences straddle the corner.
pub fn sample_away_from_kink(rng: &mut ChaCha8Rng, n: usize, margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = margin + rng.gen::<f64>();
            if rng.gen::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// Plain uniform values in [-1, 1).
pub fn sample_uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_accepts_a_correct_gradient() {
        let leaves = vec![(vec![0.7, -1.3, 2.1], vec![3usize])];
        let report = check_gradients(&leaves, &GradCheckConfig::default(), |t, ids| {
            let sq = t.mul(ids[0], ids[0])?;
            t.sum(sq)
        })
        .unwrap();
        assert_eq!(report.checked_elements, 3);
        assert!(report.max_rel_err < 1e-6);
    }

    #[test]
    fn oracle_rejects_a_wrong_gradient() {
        // The analytic pass runs with gradients enabled, the FD evals with
        // them disabled. Building a different function on each pass fakes a
        // broken adjoint (analytic slope 2, numeric slope 1), which the
        // oracle must flag.
        let leaves = vec![(vec![1.0, -0.5], vec![2usize])];
        let err = check_gradients(&leaves, &GradCheckConfig::default(), |t, ids| {
            let x = if t.grad_enabled() { t.scale(ids[0], 2.0)? } else { ids[0] };
            t.sum(x)
        });
        assert!(err.is_err());
    }
}
