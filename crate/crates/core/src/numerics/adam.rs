use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};
use super::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

impl AdamConfig {
    /// The large-scale pretraining setting: lr 1e-5.
    pub fn reference() -> Self {
        AdamConfig {
            lr: 1e-5,
            ..Default::default()
        }
    }
}

/// First and second moment buffers for every parameter in a store.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || -> Vec<Vec<T>> { params.iter().map(|(_, _, t)| vec![T::zero(); t.len()]).collect() };
        AdamState {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn first_moment(&self, i: usize) -> &[T] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[T] {
        &self.v[i]
    }

    /// Grows the buffers when parameters were registered after creation.
    fn sync(&mut self, params: &ParamStore<T>) {
        for (_, _, t) in params.iter().skip(self.m.len()) {
            self.m.push(vec![T::zero(); t.len()]);
            self.v.push(vec![T::zero(); t.len()]);
        }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient buffer are
/// treated as having a zero gradient.
pub fn adam_step<T: Real>(params: &mut ParamStore<T>, grads: &Gradients<T>, state: &mut AdamState<T>) {
    state.sync(params);
    state.t += 1;
    let c = state.config;
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let bc1 = T::of(1.0 - c.beta1.powi(state.t as i32));
    let bc2 = T::of(1.0 - c.beta2.powi(state.t as i32));
    let (lr, eps) = (T::of(c.lr), T::of(c.eps));
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let i = id.index();
        let g = grads.get(id);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let theta = params.get_mut(id).data_mut();
        for k in 0..theta.len() {
            let gk = g.map_or(T::zero(), |g| g[k]);
            m[k] = b1 * m[k] + (T::one() - b1) * gk;
            v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            theta[k] = theta[k] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Graph, Tensor};

    fn store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("x", Tensor::new(vec![1], vec![x]).unwrap()).unwrap();
        s
    }

    #[test]
    fn first_step_is_learning_rate() {
        let mut params = store(0.0);
        let id = params.id("x").unwrap();
        let mut grads = Gradients::empty(1);
        grads.accumulate(id, &[1.0]);
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut state = AdamState::new(&params, cfg);
        adam_step(&mut params, &grads, &mut state);
        // m_hat = 1 and sqrt(v_hat) = 1 after bias correction
        let expected = -0.1 / (1.0 + 1e-7);
        assert!((params.get(id).data()[0] - expected).abs() < 1e-15);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = store(2.5);
        let mut state = AdamState::new(&params, AdamConfig::default());
        adam_step(&mut params, &Gradients::empty(1), &mut state);
        assert_eq!(params.get(params.id("x").unwrap()).data()[0], 2.5);
        assert_eq!(state.t, 1);
    }

    fn run() -> f64 {
        let mut params = store(3.0);
        let id = params.id("x").unwrap();
        let mut state = AdamState::new(&params, AdamConfig::default());
        for _ in 0..50 {
            let mut g = Graph::with_params(&params);
            let x = g.param(id);
            let sq = g.mul(x, x).unwrap();
            let loss = g.sum(sq);
            let grads = g.backward(loss).unwrap();
            drop(g);
            adam_step(&mut params, &grads, &mut state);
        }
        params.get(id).data()[0]
    }

    #[test]
    fn identical_runs_identical_params() {
        let a = run();
        assert_eq!(a.to_bits(), run().to_bits());
        assert!(a < 3.0);
    }
}
