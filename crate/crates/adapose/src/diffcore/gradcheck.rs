//! Central finite-difference gradient checking.
//!
//! Used by unit tests and the acceptance suite. The forward function is
//! re-evaluated at perturbed leaf values, so the check is independent of the
//! adjoint rules it verifies.

use super::{DiffTensor, Tape, TensorId};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of one gradient check: the largest relative error over all
/// checked coordinates.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compares the tape gradient of `f(leaves)` (a scalar) against central
/// finite differences on every coordinate of every leaf.
///
/// `f` receives a fresh tape and the leaf ids in order and must return the
/// scalar output id.
pub fn check_gradients<F>(leaves: &[DiffTensor], f: F, h: f64) -> GradCheck
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorId,
{
    let mut leaves: Vec<DiffTensor> = leaves.to_vec();
    for l in leaves.iter_mut() {
        l.requires_grad = true;
    }

    let eval = |ls: &[DiffTensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = ls.iter().map(|l| tape.leaf(l)).collect();
        let out = f(&mut tape, &ids);
        tape.scalar_value(out)
    };

    // Analytic gradients from one backward pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = leaves.iter().map(|l| tape.leaf(l)).collect();
    let out = f(&mut tape, &ids);
    tape.backward(out);
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(&leaves)
        .map(|(&id, l)| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; l.len()]))
        .collect();

    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    for (li, leaf) in leaves.iter().enumerate() {
        for ci in 0..leaf.len() {
            let mut plus = leaves.clone();
            plus[li].data[ci] += h;
            let mut minus = leaves.clone();
            minus[li].data[ci] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[li][ci];
            // Floor keeps finite-difference roundoff on near-zero
            // gradients from registering as relative error.
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            max_rel_err = max_rel_err.max((a - numeric).abs() / denom);
            checked += 1;
        }
    }
    GradCheck { max_rel_err, checked }
}

/// Like [`check_gradients`], but probes only `per_leaf` deterministically
/// chosen coordinates of each leaf. Makes finite differences affordable on
/// full network parameter sets, where two evaluations per coordinate would
/// otherwise dominate.
pub fn check_gradients_sampled<F>(
    leaves: &[DiffTensor],
    f: F,
    h: f64,
    per_leaf: usize,
    seed: u64,
) -> GradCheck
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorId,
{
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    let mut leaves: Vec<DiffTensor> = leaves.to_vec();
    for l in leaves.iter_mut() {
        l.requires_grad = true;
    }

    let eval = |ls: &[DiffTensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = ls.iter().map(|l| tape.leaf(l)).collect();
        let out = f(&mut tape, &ids);
        tape.scalar_value(out)
    };

    let mut tape = Tape::new();
    let ids: Vec<TensorId> = leaves.iter().map(|l| tape.leaf(l)).collect();
    let out = f(&mut tape, &ids);
    tape.backward(out);
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(&leaves)
        .map(|(&id, l)| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; l.len()]))
        .collect();

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    for (li, leaf) in leaves.iter().enumerate() {
        for _ in 0..per_leaf.min(leaf.len()) {
            let ci = rng.random_range(0..leaf.len());
            let mut plus = leaves.clone();
            plus[li].data[ci] += h;
            let mut minus = leaves.clone();
            minus[li].data[ci] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[li][ci];
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            max_rel_err = max_rel_err.max((a - numeric).abs() / denom);
            checked += 1;
        }
    }
    GradCheck { max_rel_err, checked }
}
