//! Central-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::{pairwise_sum, Tensor};
use crate::error::{bail, Result};

/// Which coordinates to probe.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// Up to `per_tensor` coordinates of every tensor, sampled without
    /// replacement.
    Sample { per_tensor: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over probed coordinates of `|a - n| / max(|a|, |n|, 1e-8)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// (tensor index, flat coordinate, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

const DENOM_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

fn coordinates(len: usize, coords: Coords, tensor: usize) -> Vec<usize> {
    match coords {
        Coords::All => (0..len).collect(),
        Coords::Sample { per_tensor, seed } => {
            if per_tensor >= len {
                return (0..len).collect();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (tensor as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut idx = sample(&mut rng, len, per_tensor).into_vec();
            idx.sort_unstable();
            idx
        }
    }
}

/// Shared probing loop. `eval_at(t, i, delta)` must return the additive terms
/// of the objective with coordinate `i` of tensor `t` shifted by `delta`, and
/// leave the point unchanged on return. The central difference is taken term
/// by term and then summed.
fn probe(
    analytic: &[Tensor<f64>],
    step: f64,
    coords: Coords,
    mut eval_at: impl FnMut(usize, usize, f64) -> Result<Vec<f64>>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: None };
    for (t, grad) in analytic.iter().enumerate() {
        for i in coordinates(grad.len(), coords, t) {
            let plus = eval_at(t, i, step)?;
            let minus = eval_at(t, i, -step)?;
            if plus.len() != minus.len() || !plus.iter().chain(&minus).all(|v| v.is_finite()) {
                bail!(Numeric, "non-finite objective while probing tensor {t} coordinate {i}");
            }
            let diff: Vec<f64> = plus.iter().zip(&minus).map(|(p, m)| p - m).collect();
            let numeric = pairwise_sum(&diff) / (2.0 * step);
            let a = grad.data()[i];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((t, i, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Checks the tape gradient of `f` at `point` against central differences.
pub fn grad_check<F>(f: &F, point: &[Tensor<f64>], step: f64, coords: Coords) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Var,
{
    let tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&tape, &vars);
    if !tape.scalar(out).is_finite() {
        bail!(Numeric, "objective is not finite at the probe point");
    }
    let mut grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> =
        vars.iter().zip(point).map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape()))).collect();

    let mut work = point.to_vec();
    probe(&analytic, step, coords, |t, i, delta| {
        let orig = work[t].data()[i];
        work[t].data_mut()[i] = orig + delta;
        let tape = Tape::new();
        let vars: Vec<Var> = work.iter().map(|p| tape.leaf(p.clone())).collect();
        let terms = tape.terms(f(&tape, &vars));
        work[t].data_mut()[i] = orig;
        Ok(terms)
    })
}

/// Checks parameter gradients of a model objective. `value_and_grad` returns
/// the loss and one gradient tensor per parameter; `terms` returns additive
/// terms of the loss, typically [`Tape::terms`] of the loss variable.
pub fn grad_check_params(
    store: &mut ParamStore<f64>,
    value_and_grad: impl Fn(&ParamStore<f64>) -> Result<(f64, Vec<Tensor<f64>>)>,
    terms: impl Fn(&ParamStore<f64>) -> Result<Vec<f64>>,
    step: f64,
    coords: Coords,
) -> Result<GradCheckReport> {
    let (loss, analytic) = value_and_grad(store)?;
    if !loss.is_finite() {
        bail!(Numeric, "objective is not finite at the probe point");
    }
    probe(&analytic, step, coords, |t, i, delta| {
        let id = store.id_at(t);
        let orig = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = orig + delta;
        let v = terms(store);
        store.get_mut(id).data_mut()[i] = orig;
        v
    })
}
