//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            weight_decay: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, plus the number of steps taken.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.tensors().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// `θ ← θ − lr·(m̂/(√v̂ + eps) + weight_decay·θ)`, with bias-corrected
/// moments `m̂`, `v̂`.
pub fn optimizer_step(params: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, cfg: &AdamWConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::invalid(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.tensors()[i].shape() {
            return Err(Error::Shape {
                op: "optimizer_step",
                lhs: params.tensors()[i].shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {}",
                params.iter().nth(i).map(|(n, _)| n).unwrap_or("?")
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for (j, th) in p.data_mut().iter_mut().enumerate() {
            let update = (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
            *th -= cfg.lr * (update + cfg.weight_decay * *th);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        let n = v.len();
        s.add("w", Tensor::matrix(1, n, v).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut s = store(vec![2.0, -1.0]);
        let mut st = AdamState::new(&s);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        optimizer_step(&mut s, &[Tensor::zeros(&[1, 2])], &mut st, &cfg).unwrap();
        let f = 1.0 - 0.1 * 0.5;
        assert_eq!(s.tensors()[0].data(), &[2.0 * f, -1.0 * f]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(vec![1.0]);
        let mut st = AdamState::new(&s);
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..Default::default()
        };
        optimizer_step(&mut s, &[Tensor::matrix(1, 1, vec![3.0]).unwrap()], &mut st, &cfg).unwrap();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps)
        let expect = 1.0 - 0.01 * 3.0 / (3.0 + 1e-8);
        assert!((s.tensors()[0].data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = store(vec![1.0]);
        let mut st = AdamState::new(&s);
        let bad = Tensor::from_parts(vec![1, 1], vec![f64::NAN]);
        let e = optimizer_step(&mut s, &[bad], &mut st, &AdamWConfig::default()).unwrap_err();
        assert!(e.to_string().contains('w') && e.is_numeric());
    }
}
