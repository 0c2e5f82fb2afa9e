//! Central finite-difference oracle for reverse-mode gradients.
//!
//! Only forward values are used on the numeric side, so the check is
//! independent of every backward rule.

use super::{Graph, ParamId, ParamStore, Real, Tensor};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradReport {
    /// `‖g_rev − g_num‖₂ / max(‖g_rev‖₂, ‖g_num‖₂)` over all checked coordinates.
    pub rel_err: f64,
    /// Largest per-coordinate `|g_rev − g_num| / max(|g_rev|, |g_num|, floor)`.
    pub max_coord_err: f64,
    pub checked: usize,
    pub grad_norm: f64,
}

impl GradReport {
    fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        let diff: f64 = pairs.iter().map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = pairs.iter().map(|(a, _)| a * a).sum::<f64>().sqrt();
        let nn: f64 = pairs.iter().map(|(_, n)| n * n).sum::<f64>().sqrt();
        let scale = na.max(nn);
        let floor = 1e-6 * scale.max(1e-12);
        let max_coord_err = pairs
            .iter()
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
            .fold(0.0, f64::max);
        GradReport {
            rel_err: if scale > 0.0 { diff / scale } else { 0.0 },
            max_coord_err,
            checked: pairs.len(),
            grad_norm: na,
        }
    }
}

fn coords(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    // Evenly spaced, deterministic subset.
    (0..max).map(|i| i * n / max).collect()
}

/// Checks the gradient of `f` with respect to free inputs.
pub fn check_inputs<F>(inputs: &[(Vec<Real>, Vec<usize>)], h: Real, max_coords: usize, f: F) -> Result<GradReport>
where
    F: for<'g> Fn(&'g Graph, &[Tensor<'g>]) -> Result<Tensor<'g>>,
{
    let g = Graph::new();
    let leaves = inputs
        .iter()
        .map(|(v, s)| g.trainable(v.clone(), s))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&g, &leaves)?;
    g.backward(loss)?;
    let rev: Vec<Vec<Real>> = leaves.iter().map(|t| g.grad(*t).unwrap()).collect();

    let eval = |vals: &[Vec<Real>]| -> Result<f64> {
        let g = Graph::new();
        let ts = vals
            .iter()
            .zip(inputs)
            .map(|(v, (_, s))| g.constant(v.clone(), s))
            .collect::<Result<Vec<_>>>()?;
        Ok(f(&g, &ts)?.item() as f64)
    };
    let mut pairs = Vec::new();
    let mut vals: Vec<Vec<Real>> = inputs.iter().map(|(v, _)| v.clone()).collect();
    for (k, (v, _)) in inputs.iter().enumerate() {
        for i in coords(v.len(), max_coords) {
            let orig = vals[k][i];
            vals[k][i] = orig + h;
            let up = eval(&vals)?;
            vals[k][i] = orig - h;
            let down = eval(&vals)?;
            vals[k][i] = orig;
            pairs.push((rev[k][i] as f64, (up - down) / (2.0 * h as f64)));
        }
    }
    Ok(GradReport::from_pairs(&pairs))
}

/// Checks the gradient of `f` with respect to every trainable parameter in
/// `store` (at most `max_coords` coordinates per parameter).
pub fn check_params<F>(store: &ParamStore, h: Real, max_coords: usize, f: F) -> Result<GradReport>
where
    F: for<'g> Fn(&'g Graph, &ParamStore) -> Result<Tensor<'g>>,
{
    let g = Graph::new();
    let loss = f(&g, store)?;
    g.backward(loss)?;
    let mut rev: Vec<Vec<Real>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
    for (id, gr) in g.param_grads() {
        for (a, b) in rev[id.0].iter_mut().zip(&gr) {
            *a += b;
        }
    }
    let mut work = store.clone();
    let mut pairs = Vec::new();
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let n = work.get(id).value.len();
        for i in coords(n, max_coords) {
            let orig = work.get(id).value[i];
            work.get_mut(id).value[i] = orig + h;
            let up = f(&Graph::new(), &work)?.item() as f64;
            work.get_mut(id).value[i] = orig - h;
            let down = f(&Graph::new(), &work)?.item() as f64;
            work.get_mut(id).value[i] = orig;
            pairs.push((rev[id.0][i] as f64, (up - down) / (2.0 * h as f64)));
        }
    }
    Ok(GradReport::from_pairs(&pairs))
}
