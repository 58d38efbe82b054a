//! Central finite-difference validation of analytic gradients.

use std::collections::HashSet;

use rand::Rng as _;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};
use crate::rng::rng_from;

#[derive(Clone, Debug)]
pub struct GradSample {
    pub param: String,
    pub offset: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub samples: Vec<GradSample>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GradSample> {
        self.samples
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<F>(f: &mut F, params: &ParamStore) -> Result<f64>
where
    F: FnMut(&mut Graph, &BoundParams) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let loss = f(&mut g, &bound)?;
    Ok(g.value(loss).item())
}

/// Compares the analytic gradient of `f` to `(f(θ+eps) − f(θ−eps)) / 2eps`
/// on `sample_count` scalars picked with `seed` (a parameter tensor
/// uniformly, then an element within it).
///
/// `f` records a scalar loss on the graph it is handed. Any discrete
/// decision it makes must not depend on the perturbation.
pub fn finite_difference_check<F>(
    mut f: F,
    params: &ParamStore,
    eps: f64,
    sample_count: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &BoundParams) -> Result<Var>,
{
    if eps <= 0.0 || sample_count == 0 {
        return Err(Error::invalid("finite_difference_check needs eps > 0 and samples >= 1"));
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let loss = f(&mut g, &bound)?;
    let grads = bound.grads(&g.backward(loss)?);
    drop(g);

    let candidates: Vec<usize> = (0..params.len())
        .filter(|&i| !params.tensors()[i].is_empty())
        .collect();
    if candidates.is_empty() {
        return Err(Error::invalid("no parameters to check"));
    }
    let total = params.scalar_count();
    let mut rng = rng_from(seed);
    let mut seen = HashSet::new();
    let mut work = params.clone();
    let mut samples = Vec::with_capacity(sample_count);
    while samples.len() < sample_count {
        let ti = candidates[rng.random_range(0..candidates.len())];
        let off = rng.random_range(0..params.tensors()[ti].len());
        if !seen.insert((ti, off)) && seen.len() < total {
            continue;
        }
        let name = params.iter().nth(ti).map(|(n, _)| n.to_string()).unwrap_or_default();
        let orig = params.tensors()[ti].data()[off];
        let tag = |e: Error| match e {
            Error::NonFinite(op) => Error::NonFinite(format!("{op} at perturbed parameter {name}[{off}]")),
            other => other,
        };
        work.tensors_mut()[ti].data_mut()[off] = orig + eps;
        let plus = eval(&mut f, &work).map_err(tag)?;
        work.tensors_mut()[ti].data_mut()[off] = orig - eps;
        let minus = eval(&mut f, &work).map_err(tag)?;
        work.tensors_mut()[ti].data_mut()[off] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads[ti].data()[off];
        samples.push(GradSample {
            rel_error: relative_error(analytic, numeric),
            param: name,
            offset: off,
            analytic,
            numeric,
        });
    }
    let max_rel_error = samples.iter().map(|s| s.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        let id = store
            .add("theta", Tensor::row(vec![0.5, -1.5, 2.0, 3.25]).unwrap())
            .unwrap();
        let report = finite_difference_check(
            |g, p| {
                let sq = g.mul(p[id], p[id])?;
                g.sum(sq)
            },
            &store,
            1e-4,
            4,
            7,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // clamp has zero gradient outside its interval, so a clamp that the
        // perturbation crosses is flagged
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(1.0)).unwrap();
        let report = finite_difference_check(
            |g, p| g.clamp(p[id], 1.0, 2.0),
            &store,
            1e-3,
            1,
            0,
        )
        .unwrap();
        assert!(report.max_rel_error > 0.1);
    }

    #[test]
    fn names_parameter_on_non_finite() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(709.7)).unwrap();
        let err = finite_difference_check(|g, p| g.exp(p[id]), &store, 1.0, 1, 0).unwrap_err();
        assert!(err.to_string().contains("w[0]"), "{err}");
    }
}
