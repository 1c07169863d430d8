//! Adam over flat parameter tensors.

use serde::{Deserialize, Serialize};

/// Exposes trainable values as flat slices in a fixed order.
pub trait Parameters {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter group.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<P: Parameters + ?Sized>(params: &P) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        AdamState {
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One bias-corrected Adam update of `params` along `grads`.
pub fn adam_step<P, G>(params: &mut P, grads: &G, state: &mut AdamState, cfg: &AdamConfig)
where
    P: Parameters + ?Sized,
    G: Parameters + ?Sized,
{
    if state.m.is_empty() {
        *state = AdamState::new(params);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let step_size = cfg.lr / c1;
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            p[i] -= step_size * m[i] / ((v[i] / c2).sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scalar(Vec<f64>);

    impl Parameters for Scalar {
        fn tensors(&self) -> Vec<&[f64]> {
            vec![&self.0]
        }
        fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = 1, v_hat = 1 => delta = -lr * 1 / (1 + eps)
        let mut p = Scalar(vec![0.0]);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        adam_step(&mut p, &Scalar(vec![1.0]), &mut st, &cfg);
        assert!((p.0[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Scalar(vec![0.3, -2.0]);
        let mut st = AdamState::new(&p);
        for _ in 0..5 {
            adam_step(&mut p, &Scalar(vec![0.0, 0.0]), &mut st, &AdamConfig::default());
        }
        assert_eq!(p.0, vec![0.3, -2.0]);
    }

    #[test]
    fn trajectories_are_reproducible() {
        let run = || {
            let mut p = Scalar(vec![1.0, 2.0]);
            let mut st = AdamState::new(&p);
            for k in 0..20 {
                let g = Scalar(p.0.iter().map(|x| 2.0 * x + k as f64 * 0.01).collect());
                adam_step(
                    &mut p,
                    &g,
                    &mut st,
                    &AdamConfig {
                        lr: 0.05,
                        ..Default::default()
                    },
                );
            }
            p.0
        };
        assert_eq!(run(), run());
    }
}
