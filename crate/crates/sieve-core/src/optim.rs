//! Minibatch optimizers: Adam and plain SGD.

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(format!("unknown optimizer tag '{other}'")),
        }
    }
}

/// Adam with bias correction; beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

pub struct Optimizer {
    kind: OptimizerKind,
    lr: f32,
    step: u64,
    state: Vec<AdamState>,
}

impl Optimizer {
    /// `sizes` lists the element count of each parameter tensor, in the order
    /// they will be passed to [`Optimizer::step`].
    pub fn new(kind: OptimizerKind, lr: f32, sizes: &[usize]) -> Self {
        let state = match kind {
            OptimizerKind::Adam => sizes
                .iter()
                .map(|&n| AdamState {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                })
                .collect(),
            OptimizerKind::Sgd => Vec::new(),
        };
        Optimizer {
            kind,
            lr,
            step: 0,
            state,
        }
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    /// Apply one update. `params` and `grads` must be index-aligned with the
    /// `sizes` the optimizer was built with.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) {
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads.iter()) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data().iter()) {
                        *pv -= self.lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                const BETA1: f64 = 0.9;
                const BETA2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                let t = self.step as i32;
                let bc1 = 1.0 - BETA1.powi(t);
                let bc2 = 1.0 - BETA2.powi(t);
                for ((p, g), st) in params
                    .iter_mut()
                    .zip(grads.iter())
                    .zip(self.state.iter_mut())
                {
                    for i in 0..g.data().len() {
                        let gv = g.data()[i] as f64;
                        st.m[i] = BETA1 * st.m[i] + (1.0 - BETA1) * gv;
                        st.v[i] = BETA2 * st.v[i] + (1.0 - BETA2) * gv * gv;
                        let mhat = st.m[i] / bc1;
                        let vhat = st.v[i] / bc2;
                        let upd = self.lr as f64 * mhat / (vhat.sqrt() + EPS);
                        p.data_mut()[i] -= upd as f32;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_moves_against_gradient() {
        let mut p = Tensor::from_vec(vec![1.0, -1.0]);
        let g = Tensor::from_vec(vec![0.5, -0.5]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, &[2]);
        opt.step(&mut [&mut p], &[&g]);
        assert_eq!(p.data(), &[0.95, -0.95]);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        // With bias correction, the first Adam update is lr * g/|g| (up to eps).
        let mut p = Tensor::from_vec(vec![0.0]);
        let g = Tensor::from_vec(vec![1e-4]);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01, &[1]);
        opt.step(&mut [&mut p], &[&g]);
        assert!((p.data()[0] + 0.01).abs() < 1e-5, "got {}", p.data()[0]);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // minimize (p - 3)^2
        let mut p = Tensor::from_vec(vec![0.0]);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, &[1]);
        for _ in 0..300 {
            let g = Tensor::from_vec(vec![2.0 * (p.data()[0] - 3.0)]);
            opt.step(&mut [&mut p], &[&g]);
        }
        assert!((p.data()[0] - 3.0).abs() < 1e-2);
    }
}
