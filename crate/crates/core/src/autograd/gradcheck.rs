//! Central finite-difference checks of analytic gradients.

use super::params::{Gradients, ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-6)`; the floor keeps
    /// structurally-zero gradients (e.g. attention key biases) from reading as noise.
    pub rel_error: f64,
}

/// Compare `analytic` against fourth-order central differences of `loss` for every
/// trainable parameter tensor in `store`.
pub fn check_gradients<F>(store: &ParamStore, analytic: &Gradients, step: f64, mut loss: F) -> Vec<ParamCheck>
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut work = store.clone();
    let mut out = Vec::new();
    for id in store.ids() {
        if !store.is_trainable(id) {
            continue;
        }
        let numeric = numeric_gradient(&mut work, id, step, &mut loss);
        let analytic_vals: Vec<f64> = match analytic.get(id) {
            Some(g) => g.iter().copied().collect(),
            None => vec![0.0; numeric.len()],
        };
        let diff = analytic_vals
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let an = analytic_vals.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        out.push(ParamCheck {
            name: store.name(id).to_string(),
            analytic_norm: an,
            numeric_norm: nn,
            rel_error: diff / an.max(nn).max(1e-6),
        });
    }
    out
}

/// Fourth-order central stencil, `(−f₂ + 8f₁ − 8f₋₁ + f₋₂) / 12h`. Its
/// truncation error is O(h⁴), so a larger step keeps round-off small.
fn numeric_gradient<F>(work: &mut ParamStore, id: ParamId, step: f64, loss: &mut F) -> Vec<f64>
where
    F: FnMut(&ParamStore) -> f64,
{
    let n = work.get(id).len();
    let mut grad = Vec::with_capacity(n);
    for i in 0..n {
        let orig = work.get(id).as_slice().expect("standard layout")[i];
        let mut at = |offset: f64| {
            work.get_mut(id).as_slice_mut().expect("standard layout")[i] = orig + offset;
            loss(work)
        };
        let (p1, m1, p2, m2) = (at(step), at(-step), at(2.0 * step), at(-2.0 * step));
        work.get_mut(id).as_slice_mut().expect("standard layout")[i] = orig;
        grad.push((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step));
    }
    grad
}

pub fn max_rel_error(checks: &[ParamCheck]) -> f64 {
    checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
}
