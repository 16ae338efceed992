//! Intrinsic rewards and the distance constraint.
//!
//! Distance-maximizing methods share one mechanism: a state embedding
//! `phi: S -> R^D` rewarded by `(phi(s') - phi(s))^T z` and kept inside
//! `||phi(x) - phi(y)|| <= d(x, y)` by a Lagrange multiplier. CSD plugs in
//! the density-model distance, LSD the (optionally normalized) Euclidean
//! distance. DIAYN and ensemble disagreement are here too.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::CondGaussian;
use crate::envs::TransitionBatch;
use crate::ndmath::{log_sum_exp, Activation, Adam, Mlp, MlpBinding, NdError, Tape, Tensor, Var};
use crate::skill_space::{log_prior, SkillError, SkillKind, SkillSpec};

/// Violation tolerance when counting `||dphi|| > d`.
pub const VIOLATION_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum IntrinsicError {
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error(transparent)]
    Skill(#[from] SkillError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("ensemble needs at least 2 members, got {0}")]
    EnsembleSize(usize),
    #[error("dimension mismatch: {0}")]
    Dim(String),
}

fn dim_err(what: &str, expected: usize, got: usize) -> IntrinsicError {
    IntrinsicError::Dim(format!("{what}: expected {expected}, got {got}"))
}

/// State embedding trained against the distance constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiNet {
    net: Mlp,
    opt: Adam,
}

impl PhiNet {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        hidden: &[usize],
        skill_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut widths = vec![state_dim];
        widths.extend_from_slice(hidden);
        widths.push(skill_dim);
        Self::from_mlp(Mlp::new(&widths, Activation::Relu, rng))
    }

    pub fn from_mlp(net: Mlp) -> Self {
        let opt = Adam::new(net.params());
        Self { net, opt }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn skill_dim(&self) -> usize {
        self.net.output_width()
    }

    pub fn embed(&self, s: &[f64]) -> Result<Vec<f64>, NdError> {
        self.net.predict_one(s)
    }

    pub fn embed_batch(&self, s: &Tensor) -> Result<Tensor, NdError> {
        self.net.predict(s)
    }
}

/// `(phi(s') - phi(s))^T z`.
pub fn dsd_reward(
    phi: &PhiNet,
    s: &[f64],
    s_next: &[f64],
    z: &[f64],
) -> Result<f64, IntrinsicError> {
    if z.len() != phi.skill_dim() {
        return Err(dim_err("skill", phi.skill_dim(), z.len()));
    }
    let a = phi.embed(s)?;
    let b = phi.embed(s_next)?;
    Ok(b.iter().zip(&a).zip(z).map(|((b, a), z)| (b - a) * z).sum())
}

/// Batched [`dsd_reward`].
pub fn dsd_rewards(
    phi: &PhiNet,
    s: &Tensor,
    s_next: &Tensor,
    z: &Tensor,
) -> Result<Vec<f64>, IntrinsicError> {
    let a = phi.embed_batch(s)?;
    let b = phi.embed_batch(s_next)?;
    if z.cols() != phi.skill_dim() || z.rows() != s.rows() {
        return Err(dim_err("skill batch", phi.skill_dim(), z.cols()));
    }
    Ok(b.iter_rows()
        .zip(a.iter_rows())
        .zip(z.iter_rows())
        .map(|((b, a), z)| b.iter().zip(a).zip(z).map(|((b, a), z)| (b - a) * z).sum())
        .collect())
}

/// Lagrange multiplier and slack of the distance constraint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub lambda: f64,
    pub epsilon: f64,
}

impl DualState {
    pub fn new(lambda: f64, epsilon: f64) -> Self {
        assert!(epsilon > 0.0, "slack must be positive");
        Self {
            lambda: lambda.max(0.0),
            epsilon,
        }
    }
}

/// Any non-negative function of a state pair. Values are treated as
/// constants by the phi objective.
pub trait DistanceFn {
    fn distances(&self, s: &Tensor, s_next: &Tensor) -> Result<Vec<f64>, NdError>;
}

impl DistanceFn for CondGaussian {
    fn distances(&self, s: &Tensor, s_next: &Tensor) -> Result<Vec<f64>, NdError> {
        self.csd_distances(s, s_next)
    }
}

/// Floor applied to normalizer standard deviations.
pub const STD_FLOOR: f64 = 1e-3;

/// How states are scaled before taking Euclidean distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StateNormalizer {
    None,
    /// Fixed per-dimension standard deviations.
    Preset { std: Vec<f64> },
    /// Moving average of the per-dimension mean and second moment of `s' - s`.
    Ema {
        momentum: f64,
        mean: Vec<f64>,
        sq_mean: Vec<f64>,
        initialized: bool,
    },
}

impl StateNormalizer {
    pub fn ema(dim: usize, momentum: f64) -> Self {
        StateNormalizer::Ema {
            momentum,
            mean: vec![0.0; dim],
            sq_mean: vec![1.0; dim],
            initialized: false,
        }
    }

    /// Per-dimension standard deviation of a set of states.
    pub fn preset_from_states<R: AsRef<[f64]>>(states: &[R]) -> Self {
        let dim = states.first().map_or(0, |s| s.as_ref().len());
        let n = states.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for s in states {
            mean.iter_mut().zip(s.as_ref()).for_each(|(m, x)| *m += x / n);
        }
        let mut var = vec![0.0; dim];
        for s in states {
            var.iter_mut()
                .zip(s.as_ref())
                .zip(&mean)
                .for_each(|((v, x), m)| *v += (x - m) * (x - m) / n);
        }
        StateNormalizer::Preset {
            std: var.iter().map(|v| v.sqrt().max(STD_FLOOR)).collect(),
        }
    }

    /// Feeds a batch of transitions into the moving statistics (EMA only).
    pub fn observe(&mut self, s: &Tensor, s_next: &Tensor) {
        let StateNormalizer::Ema {
            momentum,
            mean,
            sq_mean,
            initialized,
        } = self
        else {
            return;
        };
        let n = s.rows();
        if n == 0 {
            return;
        }
        let dim = mean.len();
        let mut bm = vec![0.0; dim];
        let mut bsq = vec![0.0; dim];
        for (a, b) in s.iter_rows().zip(s_next.iter_rows()) {
            for k in 0..dim {
                let d = b[k] - a[k];
                bm[k] += d / n as f64;
                bsq[k] += d * d / n as f64;
            }
        }
        let rate = if *initialized { 1.0 - *momentum } else { 1.0 };
        for k in 0..dim {
            mean[k] += rate * (bm[k] - mean[k]);
            sq_mean[k] += rate * (bsq[k] - sq_mean[k]);
        }
        *initialized = true;
    }

    pub fn std(&self) -> Option<Vec<f64>> {
        match self {
            StateNormalizer::None => None,
            StateNormalizer::Preset { std } => Some(std.clone()),
            StateNormalizer::Ema { mean, sq_mean, .. } => Some(
                mean.iter()
                    .zip(sq_mean)
                    .map(|(m, q)| (q - m * m).max(0.0).sqrt().max(STD_FLOOR))
                    .collect(),
            ),
        }
    }
}

/// `||(s' - s) / std||`, with `std = 1` when no normalizer is set.
pub fn euclidean_distance(s: &[f64], s_next: &[f64], normalizer: &StateNormalizer) -> f64 {
    euclidean_with(s, s_next, normalizer.std().as_deref())
}

fn euclidean_with(s: &[f64], s_next: &[f64], std: Option<&[f64]>) -> f64 {
    s.iter()
        .zip(s_next)
        .enumerate()
        .map(|(k, (a, b))| {
            let d = (b - a) / std.map_or(1.0, |sd| sd[k]);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy)]
pub struct Euclidean<'a>(pub &'a StateNormalizer);

impl DistanceFn for Euclidean<'_> {
    fn distances(&self, s: &Tensor, s_next: &Tensor) -> Result<Vec<f64>, NdError> {
        let std = self.0.std();
        Ok(s.iter_rows()
            .zip(s_next.iter_rows())
            .map(|(a, b)| euclidean_with(a, b, std.as_deref()))
            .collect())
    }
}

/// `d = 1` everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConstantOne;

impl DistanceFn for ConstantOne {
    fn distances(&self, s: &Tensor, _: &Tensor) -> Result<Vec<f64>, NdError> {
        Ok(vec![1.0; s.rows()])
    }
}

/// Recorded phi loss with the per-pair slacks `d - ||dphi||`.
pub struct PhiObjective {
    pub loss: Var,
    pub binding: MlpBinding,
    pub slacks: Vec<f64>,
}

/// Records `-E[(phi(s') - phi(s))^T z + lambda * min(eps, d - ||phi(s) - phi(s')||)]`
/// on `tape`. The constraint pairs are the same `(s, s')` pairs as the
/// reward term and `distances` holds `d(s, s')` for each of them.
pub fn phi_objective(
    tape: &mut Tape,
    phi: &PhiNet,
    dual: &DualState,
    s: &Tensor,
    s_next: &Tensor,
    z: &Tensor,
    distances: &[f64],
) -> Result<PhiObjective, IntrinsicError> {
    let n = s.rows();
    if n == 0 {
        return Err(IntrinsicError::EmptyBatch);
    }
    if distances.len() != n || s_next.rows() != n || z.rows() != n {
        return Err(dim_err("batch rows", n, distances.len()));
    }
    if z.cols() != phi.skill_dim() {
        return Err(dim_err("skill", phi.skill_dim(), z.cols()));
    }
    let binding = phi.net.bind(tape);
    let xs = tape.constant(s.clone());
    let xn = tape.constant(s_next.clone());
    let zv = tape.constant(z.clone());
    let dv = tape.constant(Tensor::matrix(n, 1, distances.to_vec())?);
    let ps = binding.forward(tape, xs)?;
    let pn = binding.forward(tape, xn)?;
    let dphi = tape.sub(pn, ps);
    let aligned = tape.mul(dphi, zv);
    let reward = tape.sum_cols(aligned);
    let sq = tape.square(dphi);
    let sq_norm = tape.sum_cols(sq);
    let norm = tape.sqrt(sq_norm);
    let slack = tape.sub(dv, norm);
    let slacks = tape.value(slack).data().to_vec();
    let penalty = tape.min_scalar(slack, dual.epsilon);
    let weighted = tape.scale(penalty, dual.lambda);
    let total = tape.add(reward, weighted);
    let objective = tape.mean(total);
    let loss = tape.neg(objective);
    Ok(PhiObjective {
        loss,
        binding,
        slacks,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhiStep {
    pub loss: f64,
    pub slacks: Vec<f64>,
    pub violation_rate: f64,
}

/// Fraction of pairs with `||dphi|| > d + VIOLATION_TOL`.
pub fn violation_rate(slacks: &[f64]) -> f64 {
    if slacks.is_empty() {
        return 0.0;
    }
    slacks.iter().filter(|&&s| s < -VIOLATION_TOL).count() as f64 / slacks.len() as f64
}

/// One Adam step on the phi objective. Reports pre-step loss and slacks.
pub fn phi_update(
    phi: &mut PhiNet,
    dual: &DualState,
    s: &Tensor,
    s_next: &Tensor,
    z: &Tensor,
    distances: &[f64],
    lr: f64,
) -> Result<PhiStep, IntrinsicError> {
    let mut tape = Tape::new();
    let obj = phi_objective(&mut tape, phi, dual, s, s_next, z, distances)?;
    let loss = tape.value(obj.loss).item()?;
    tape.backward(obj.loss)?;
    obj.binding.accumulate_grads(&tape, &mut phi.net)?;
    phi.opt.step(phi.net.params_mut(), lr)?;
    Ok(PhiStep {
        loss,
        violation_rate: violation_rate(&obj.slacks),
        slacks: obj.slacks,
    })
}

/// Gradient ascent on `-lambda * E[min(eps, slack)]`, projected onto
/// `lambda >= 0`.
pub fn lambda_update(dual: &DualState, slacks: &[f64], lr_lambda: f64) -> DualState {
    if slacks.is_empty() {
        return *dual;
    }
    let mean_min = slacks.iter().map(|s| s.min(dual.epsilon)).sum::<f64>() / slacks.len() as f64;
    DualState {
        lambda: (dual.lambda - lr_lambda * mean_min).max(0.0),
        epsilon: dual.epsilon,
    }
}

/// Skill discriminator `q(z|s)`: logits for discrete skills, a unit-variance
/// Gaussian mean for continuous ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    net: Mlp,
    opt: Adam,
    spec: SkillSpec,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        hidden: &[usize],
        spec: SkillSpec,
        rng: &mut R,
    ) -> Self {
        let mut widths = vec![state_dim];
        widths.extend_from_slice(hidden);
        widths.push(spec.vector_len());
        Self::from_mlp(Mlp::new(&widths, Activation::Relu, rng), spec)
    }

    pub fn from_mlp(net: Mlp, spec: SkillSpec) -> Self {
        assert_eq!(net.output_width(), spec.vector_len());
        let opt = Adam::new(net.params());
        Self { net, opt, spec }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn spec(&self) -> &SkillSpec {
        &self.spec
    }

    /// `log q(z|s)` for each row.
    pub fn log_q(&self, s: &Tensor, z: &Tensor) -> Result<Vec<f64>, IntrinsicError> {
        let out = self.net.predict(s)?;
        if z.rows() != s.rows() || z.cols() != self.spec.vector_len() {
            return Err(dim_err("skill batch", self.spec.vector_len(), z.cols()));
        }
        out.iter_rows()
            .zip(z.iter_rows())
            .map(|(o, z)| match self.spec.kind {
                SkillKind::Discrete => {
                    let c = self.spec.category_of(z)?;
                    Ok(o[c] - log_sum_exp(o))
                }
                SkillKind::Continuous => Ok(o
                    .iter()
                    .zip(z)
                    .map(|(m, z)| -0.5 * (2.0 * PI).ln() - 0.5 * (z - m) * (z - m))
                    .sum()),
            })
            .collect()
    }

    /// One Adam step on cross-entropy (discrete) or Gaussian NLL
    /// (continuous). Returns the pre-step loss.
    pub fn update(&mut self, s: &Tensor, z: &Tensor, lr: f64) -> Result<f64, IntrinsicError> {
        let n = s.rows();
        if n == 0 {
            return Err(IntrinsicError::EmptyBatch);
        }
        if z.rows() != n || z.cols() != self.spec.vector_len() {
            return Err(dim_err("skill batch", self.spec.vector_len(), z.cols()));
        }
        let mut tape = Tape::new();
        let x = tape.constant(s.clone());
        let (out, binding) = self.net.forward(&mut tape, x)?;
        let loss = match self.spec.kind {
            SkillKind::Discrete => {
                let k = self.spec.discrete_count;
                let mut target = vec![0.0; n * k];
                for (r, zr) in z.iter_rows().enumerate() {
                    target[r * k + self.spec.category_of(zr)?] = 1.0;
                }
                let t = tape.constant(Tensor::matrix(n, k, target)?);
                let lp = tape.log_softmax(out);
                let picked = tape.mul(lp, t);
                let ll = tape.sum_cols(picked);
                let mean = tape.mean(ll);
                tape.neg(mean)
            }
            SkillKind::Continuous => {
                let t = tape.constant(z.clone());
                let diff = tape.sub(t, out);
                let sq = tape.square(diff);
                let per = tape.sum_cols(sq);
                let mean = tape.mean(per);
                let half = tape.scale(mean, 0.5);
                tape.add_scalar(half, 0.5 * (2.0 * PI).ln() * z.cols() as f64)
            }
        };
        let value = tape.value(loss).item()?;
        tape.backward(loss)?;
        binding.accumulate_grads(&tape, &mut self.net)?;
        self.opt.step(self.net.params_mut(), lr)?;
        Ok(value)
    }
}

/// One gradient step of `disc` on `(s, z)`; see [`Discriminator::update`].
pub fn discriminator_update(
    disc: &mut Discriminator,
    s: &Tensor,
    z: &Tensor,
    lr: f64,
) -> Result<f64, IntrinsicError> {
    disc.update(s, z, lr)
}

/// `log q(z|s) - log p(z)`.
pub fn diayn_reward(
    disc: &Discriminator,
    spec: &SkillSpec,
    s: &[f64],
    z: &[f64],
) -> Result<f64, IntrinsicError> {
    let lq = disc.log_q(&Tensor::row(s), &Tensor::row(z))?[0];
    Ok(lq - log_prior(spec, z)?)
}

/// Batched [`diayn_reward`].
pub fn diayn_rewards(
    disc: &Discriminator,
    spec: &SkillSpec,
    s: &Tensor,
    z: &Tensor,
) -> Result<Vec<f64>, IntrinsicError> {
    let lq = disc.log_q(s, z)?;
    lq.into_iter()
        .zip(z.iter_rows())
        .map(|(l, zr)| Ok(l - log_prior(spec, zr)?))
        .collect()
}

/// Ensemble of forward models `(s, a) -> s'`, each predicting `s' - s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynEnsemble {
    members: Vec<Mlp>,
    opts: Vec<Adam>,
}

impl DynEnsemble {
    pub fn new<R: Rng + ?Sized>(
        size: usize,
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self, IntrinsicError> {
        let mut widths = vec![state_dim + action_dim];
        widths.extend_from_slice(hidden);
        widths.push(state_dim);
        let members = (0..size)
            .map(|_| Mlp::new(&widths, Activation::Relu, rng))
            .collect();
        Self::from_members(members)
    }

    pub fn from_members(members: Vec<Mlp>) -> Result<Self, IntrinsicError> {
        if members.len() < 2 {
            return Err(IntrinsicError::EnsembleSize(members.len()));
        }
        let opts = members.iter().map(|m| Adam::new(m.params())).collect();
        Ok(Self { members, opts })
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    /// Predicted next states, one tensor per member.
    pub fn predict(&self, s: &Tensor, a: &Tensor) -> Result<Vec<Tensor>, IntrinsicError> {
        let x = s.hcat(a)?;
        self.members
            .iter()
            .map(|m| {
                let mut d = m.predict(&x)?;
                d.data_mut().iter_mut().zip(s.data()).for_each(|(d, s)| *d += s);
                Ok(d)
            })
            .collect()
    }

    /// One MSE step per member on the same batch. Returns the mean pre-step loss.
    pub fn fit_step(
        &mut self,
        s: &Tensor,
        a: &Tensor,
        s_next: &Tensor,
        lr: f64,
    ) -> Result<f64, IntrinsicError> {
        if s.rows() == 0 {
            return Err(IntrinsicError::EmptyBatch);
        }
        let x = s.hcat(a)?;
        let delta: Vec<f64> = s_next.data().iter().zip(s.data()).map(|(b, a)| b - a).collect();
        let delta = Tensor::matrix(s.rows(), s.cols(), delta)?;
        let mut total = 0.0;
        for (m, opt) in self.members.iter_mut().zip(&mut self.opts) {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let tv = tape.constant(delta.clone());
            let (y, b) = m.forward(&mut tape, xv)?;
            let diff = tape.sub(y, tv);
            let sq = tape.square(diff);
            let per = tape.sum_cols(sq);
            let loss = tape.mean(per);
            total += tape.value(loss).item()?;
            tape.backward(loss)?;
            b.accumulate_grads(&tape, m)?;
            opt.step(m.params_mut(), lr)?;
        }
        Ok(total / self.members.len() as f64)
    }
}

/// Sum over state dimensions of the population variance of the members'
/// predictions, one value per row.
pub fn disagreement_rewards(
    ens: &DynEnsemble,
    s: &Tensor,
    a: &Tensor,
) -> Result<Vec<f64>, IntrinsicError> {
    let preds = ens.predict(s, a)?;
    let (n, dim) = (s.rows(), s.cols());
    let mut out = vec![0.0; n];
    // Welford per (row, dim).
    for (r, o) in out.iter_mut().enumerate() {
        for k in 0..dim {
            let (mut mean, mut m2) = (0.0, 0.0);
            for (i, p) in preds.iter().enumerate() {
                let x = p.get(r, k);
                let delta = x - mean;
                mean += delta / (i + 1) as f64;
                m2 += delta * (x - mean);
            }
            *o += m2 / preds.len() as f64;
        }
    }
    Ok(out)
}

pub fn disagreement_reward(
    ens: &DynEnsemble,
    s: &[f64],
    a: &[f64],
) -> Result<f64, IntrinsicError> {
    Ok(disagreement_rewards(ens, &Tensor::row(s), &Tensor::row(a))?[0])
}

/// Recomputes per-transition intrinsic rewards for the batch.
pub fn batch_dsd_rewards(phi: &PhiNet, batch: &TransitionBatch) -> Result<Vec<f64>, IntrinsicError> {
    dsd_rewards(phi, &batch.s, &batch.s_next, &batch.z)
}
