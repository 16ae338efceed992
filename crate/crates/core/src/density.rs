//! State-conditioned diagonal Gaussian `q(s'|s)` and the controllability
//! distance derived from it.
//!
//! The mean is parameterized as a residual, `mu(s) = s + f(s)`, so a freshly
//! initialized model already predicts "nothing moves". Log-variances are
//! clamped to [`LOGVAR_MIN`, `LOGVAR_MAX`].
//!
//! With `normalize` on, the distance divides each variance by the geometric
//! mean of the variances at that state, so the normalized variances always
//! multiply to one. The likelihood itself (and therefore fitting) always
//! uses the raw variances.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ndmath::{Activation, Adam, Mlp, NdError, Tape, Tensor};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondGaussian {
    mu_net: Mlp,
    logvar_net: Mlp,
    normalize: bool,
    mu_opt: Adam,
    logvar_opt: Adam,
}

/// Mean and (clamped) log-variance rows for a batch of states.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    pub mean: Tensor,
    pub logvar: Tensor,
}

impl CondGaussian {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        hidden: &[usize],
        normalize: bool,
        rng: &mut R,
    ) -> Self {
        let mut widths = vec![state_dim];
        widths.extend_from_slice(hidden);
        widths.push(state_dim);
        let mu_net = Mlp::new(&widths, Activation::Relu, rng);
        let logvar_net = Mlp::new(&widths, Activation::Relu, rng);
        Self::from_nets(mu_net, logvar_net, normalize)
    }

    pub fn from_nets(mu_net: Mlp, logvar_net: Mlp, normalize: bool) -> Self {
        assert_eq!(mu_net.input_width(), mu_net.output_width());
        assert_eq!(logvar_net.input_width(), mu_net.input_width());
        assert_eq!(logvar_net.output_width(), mu_net.output_width());
        let mu_opt = Adam::new(mu_net.params());
        let logvar_opt = Adam::new(logvar_net.params());
        Self {
            mu_net,
            logvar_net,
            normalize,
            mu_opt,
            logvar_opt,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.mu_net.input_width()
    }

    pub fn normalize(&self) -> bool {
        self.normalize
    }

    pub fn set_normalize(&mut self, on: bool) {
        self.normalize = on;
    }

    pub fn mu_net(&self) -> &Mlp {
        &self.mu_net
    }

    pub fn logvar_net(&self) -> &Mlp {
        &self.logvar_net
    }

    pub fn params(&self, s: &Tensor) -> Result<GaussianParams, NdError> {
        let mut mean = self.mu_net.predict(s)?;
        mean.data_mut()
            .iter_mut()
            .zip(s.data())
            .for_each(|(m, x)| *m += x);
        let mut logvar = self.logvar_net.predict(s)?;
        logvar
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = v.clamp(LOGVAR_MIN, LOGVAR_MAX));
        Ok(GaussianParams { mean, logvar })
    }

    pub fn mean(&self, s: &[f64]) -> Result<Vec<f64>, NdError> {
        Ok(self.params(&Tensor::row(s))?.mean.into_data())
    }

    /// Raw (clamped) diagonal variances.
    pub fn variances(&self, s: &[f64]) -> Result<Vec<f64>, NdError> {
        let p = self.params(&Tensor::row(s))?;
        Ok(p.logvar.data().iter().map(|v| v.exp()).collect())
    }

    /// Log-variances used by the distance: normalized when enabled.
    pub fn distance_log_variances(&self, s: &[f64]) -> Result<Vec<f64>, NdError> {
        let p = self.params(&Tensor::row(s))?;
        let mut lv = p.logvar.into_data();
        if self.normalize {
            normalize_log_variances(&mut lv);
        }
        Ok(lv)
    }

    /// `-log q(s'|s)` with the raw variances.
    pub fn nll(&self, s: &[f64], s_next: &[f64]) -> Result<f64, NdError> {
        let p = self.params(&Tensor::row(s))?;
        check_len(s_next, self.state_dim())?;
        Ok(gaussian_nll(p.mean.data(), p.logvar.data(), s_next))
    }

    /// `(s' - mu(s))^T Sigma(s)^-1 (s' - mu(s))` for one pair.
    pub fn csd_distance(&self, s: &[f64], s_next: &[f64]) -> Result<f64, NdError> {
        Ok(self.csd_distances(&Tensor::row(s), &Tensor::row(s_next))?[0])
    }

    pub fn csd_distances(&self, s: &Tensor, s_next: &Tensor) -> Result<Vec<f64>, NdError> {
        let p = self.params(s)?;
        if s_next.cols() != self.state_dim() || s_next.rows() != s.rows() {
            return Err(NdError::Shape {
                context: "csd_distances next states",
                expected: vec![s.rows(), self.state_dim()],
                got: s_next.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(s.rows());
        let mut lv = vec![0.0; self.state_dim()];
        for ((mu, logvar), x) in p
            .mean
            .iter_rows()
            .zip(p.logvar.iter_rows())
            .zip(s_next.iter_rows())
        {
            lv.copy_from_slice(logvar);
            if self.normalize {
                normalize_log_variances(&mut lv);
            }
            out.push(
                x.iter()
                    .zip(mu)
                    .zip(&lv)
                    .map(|((x, m), l)| (x - m) * (x - m) * (-l).exp())
                    .sum(),
            );
        }
        Ok(out)
    }

    /// One Adam step on the mean NLL of the batch. Returns the pre-step loss.
    pub fn fit_step(&mut self, s: &Tensor, s_next: &Tensor, lr: f64) -> Result<f64, NdError> {
        if s.rows() == 0 {
            return Err(NdError::Shape {
                context: "fit_step batch",
                expected: vec![1, self.state_dim()],
                got: s.shape().to_vec(),
            });
        }
        if s_next.cols() != self.state_dim() || s_next.rows() != s.rows() {
            return Err(NdError::Shape {
                context: "fit_step next states",
                expected: vec![s.rows(), self.state_dim()],
                got: s_next.shape().to_vec(),
            });
        }
        let delta: Vec<f64> = s_next
            .data()
            .iter()
            .zip(s.data())
            .map(|(a, b)| a - b)
            .collect();
        let mut tape = Tape::new();
        let x = tape.constant(s.clone());
        let target = tape.constant(Tensor::matrix(s.rows(), s.cols(), delta)?);
        let (mu, mu_b) = self.mu_net.forward(&mut tape, x)?;
        let (lv_raw, lv_b) = self.logvar_net.forward(&mut tape, x)?;
        let logvar = tape.clamp(lv_raw, LOGVAR_MIN, LOGVAR_MAX);
        let diff = tape.sub(target, mu);
        let sq = tape.square(diff);
        let neg_lv = tape.neg(logvar);
        let inv_var = tape.exp(neg_lv);
        let quad = tape.mul(sq, inv_var);
        let per_dim = tape.add(quad, logvar);
        let per_dim = tape.add_scalar(per_dim, (2.0 * PI).ln());
        let per_sample = tape.sum_cols(per_dim);
        let mean_sum = tape.mean(per_sample);
        let loss = tape.scale(mean_sum, 0.5);
        let value = tape.value(loss).item()?;
        tape.backward(loss)?;
        mu_b.accumulate_grads(&tape, &mut self.mu_net)?;
        lv_b.accumulate_grads(&tape, &mut self.logvar_net)?;
        self.mu_opt.step(self.mu_net.params_mut(), lr)?;
        self.logvar_opt.step(self.logvar_net.params_mut(), lr)?;
        Ok(value)
    }

    /// Mean NLL over a batch without updating.
    pub fn mean_nll(&self, s: &Tensor, s_next: &Tensor) -> Result<f64, NdError> {
        let p = self.params(s)?;
        let n = s.rows().max(1) as f64;
        Ok(p.mean
            .iter_rows()
            .zip(p.logvar.iter_rows())
            .zip(s_next.iter_rows())
            .map(|((m, l), x)| gaussian_nll(m, l, x))
            .sum::<f64>()
            / n)
    }
}

fn check_len(x: &[f64], n: usize) -> Result<(), NdError> {
    if x.len() != n {
        return Err(NdError::Shape {
            context: "state dimension",
            expected: vec![n],
            got: vec![x.len()],
        });
    }
    Ok(())
}

/// Shifts log-variances so that they sum to zero (unit geometric mean).
pub fn normalize_log_variances(lv: &mut [f64]) {
    let mean = lv.iter().sum::<f64>() / lv.len().max(1) as f64;
    lv.iter_mut().for_each(|v| *v -= mean);
}

fn gaussian_nll(mean: &[f64], logvar: &[f64], x: &[f64]) -> f64 {
    0.5 * mean
        .iter()
        .zip(logvar)
        .zip(x)
        .map(|((m, l), x)| (2.0 * PI).ln() + l + (x - m) * (x - m) * (-l).exp())
        .sum::<f64>()
}
