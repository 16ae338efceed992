use serde::{Deserialize, Serialize};

use super::{NdError, Tensor};

/// Adam moment state for one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        Self::with_betas(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &[Tensor], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// Applies one bias-corrected update using (and then clearing) the
    /// gradients stored on `params`. A parameter with no stored gradient is
    /// treated as having a zero gradient.
    pub fn step(&mut self, params: &mut [Tensor], lr: f64) -> Result<(), NdError> {
        if params.len() != self.m.len() {
            return Err(NdError::ParamCount {
                expected: self.m.len(),
                got: params.len(),
            });
        }
        for (p, m) in params.iter().zip(&self.m) {
            if p.numel() != m.len() {
                return Err(NdError::Shape {
                    context: "Adam::step",
                    expected: vec![m.len()],
                    got: p.shape().to_vec(),
                });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.take_grad();
            let data = p.data_mut();
            for j in 0..data.len() {
                let gj = g.as_ref().map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f64]) -> Tensor {
        Tensor::row(values)
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut fresh = vec![param(&[1.0, -2.0])];
        let mut opt = Adam::new(&fresh);
        opt.step(&mut fresh, 0.1).unwrap();
        assert_eq!(fresh[0].data(), &[1.0, -2.0]);

        let mut ps = vec![param(&[1.0, -2.0])];
        let mut opt = Adam::new(&ps);
        ps[0].accumulate_grad(&[0.5, -0.5]).unwrap();
        opt.step(&mut ps, 0.1).unwrap();
        let (m1, v1) = (opt.first_moment()[0].clone(), opt.second_moment()[0].clone());
        opt.step(&mut ps, 0.1).unwrap();
        for j in 0..2 {
            assert!(opt.first_moment()[0][j].abs() < m1[j].abs());
            assert!(opt.second_moment()[0][j] < v1[j]);
        }
    }

    #[test]
    fn first_step_is_bounded_by_lr() {
        let lr = 1e-3;
        let grads = [3.0, -1e-4, 250.0, 0.0];
        let mut ps = vec![param(&[0.0; 4])];
        let mut opt = Adam::new(&ps);
        ps[0].accumulate_grad(&grads).unwrap();
        opt.step(&mut ps, lr).unwrap();
        for (x, g) in ps[0].data().iter().zip(grads) {
            // Closed form for t = 1: -lr * g / (|g| + eps).
            let want = -lr * g / (g.abs() + 1e-8);
            assert!((x - want).abs() <= 1e-15);
            assert!(x.abs() <= lr * (1.0 + 1e-9));
        }
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let run = || {
            let mut ps = vec![param(&[0.3, 0.7, -0.1])];
            let mut opt = Adam::new(&ps);
            for k in 0..2 {
                ps[0].accumulate_grad(&[0.1 * k as f64, -0.2, 0.05]).unwrap();
                opt.step(&mut ps, 1e-2).unwrap();
            }
            (ps, opt)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mismatched_state_is_error() {
        let mut ps = vec![param(&[0.0; 3])];
        let mut opt = Adam::new(&[param(&[0.0; 2])]);
        assert!(opt.step(&mut ps, 0.1).is_err());
    }
}
