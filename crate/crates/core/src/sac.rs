//! Soft actor-critic for the skill-conditioned policy `pi(a | s, z)`.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{Policy, Transition, TransitionBatch};
use crate::ndmath::{polyak_update, Activation, Adam, Mlp, MlpBinding, NdError, Tape, Tensor, Var};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Output-layer init bound for actor and critics.
pub const OUTPUT_INIT: f64 = 3e-3;

#[derive(Debug, Error)]
pub enum SacError {
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error("intrinsic reward: {0}")]
    Reward(String),
    #[error("{what}: expected {expected}, got {got}")]
    Dim {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SacConfig {
    pub gamma: f64,
    pub tau: f64,
    /// Entropy coefficient (initial value when `auto_alpha` is set).
    pub alpha: f64,
    pub auto_alpha: bool,
    pub lr: f64,
    pub hidden: Vec<usize>,
    pub random_action_prob: f64,
    pub action_noise: f64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.98,
            tau: 0.995,
            alpha: 0.02,
            auto_alpha: false,
            lr: 1e-3,
            hidden: vec![256, 256],
            random_action_prob: 0.3,
            action_noise: 0.2,
        }
    }
}

/// Fixed-capacity ring of transitions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::new(),
            next: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn extend<I: IntoIterator<Item = Transition>>(&mut self, items: I) {
        for t in items {
            self.push(t);
        }
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform draw with replacement from the filled region.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> TransitionBatch {
        let len = self.items.len();
        TransitionBatch::from_transitions((0..n).map(|_| &self.items[rng.gen_range(0..len)]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SacAgent {
    pub cfg: SacConfig,
    obs_dim: usize,
    skill_dim: usize,
    action_dim: usize,
    max_action: f64,
    actor: Mlp,
    q1: Mlp,
    q2: Mlp,
    q1_target: Mlp,
    q2_target: Mlp,
    actor_opt: Adam,
    q1_opt: Adam,
    q2_opt: Adam,
    log_alpha: Tensor,
    alpha_opt: Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SacLosses {
    pub critic: f64,
    pub actor: f64,
    pub alpha: f64,
    /// Mean `-log pi` over the batch.
    pub entropy: f64,
    pub mean_q: f64,
    pub mean_reward: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateOutcome {
    Updated(SacLosses),
    /// Buffer smaller than the batch; nothing changed.
    Skipped { have: usize, need: usize },
}

struct Sampled {
    action: Var,
    log_prob: Var,
}

impl SacAgent {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        skill_dim: usize,
        action_dim: usize,
        max_action: f64,
        cfg: SacConfig,
        rng: &mut R,
    ) -> Self {
        let widths = |input: usize, output: usize| {
            let mut w = vec![input];
            w.extend_from_slice(&cfg.hidden);
            w.push(output);
            w
        };
        let head = |w: &[usize], rng: &mut R| {
            Mlp::with_small_output(w, Activation::Relu, OUTPUT_INIT, rng)
        };
        let actor = head(&widths(obs_dim + skill_dim, 2 * action_dim), rng);
        let qw = widths(obs_dim + skill_dim + action_dim, 1);
        let q1 = head(&qw, rng);
        let q2 = head(&qw, rng);
        let log_alpha = Tensor::scalar(cfg.alpha.ln());
        Self {
            obs_dim,
            skill_dim,
            action_dim,
            max_action,
            actor_opt: Adam::new(actor.params()),
            q1_opt: Adam::new(q1.params()),
            q2_opt: Adam::new(q2.params()),
            alpha_opt: Adam::new(std::slice::from_ref(&log_alpha)),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            actor,
            q1,
            q2,
            log_alpha,
            cfg,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.data()[0].exp()
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn max_action(&self) -> f64 {
        self.max_action
    }

    pub fn actor(&self) -> &Mlp {
        &self.actor
    }

    pub fn critics(&self) -> (&Mlp, &Mlp) {
        (&self.q1, &self.q2)
    }

    pub fn critics_mut(&mut self) -> (&mut Mlp, &mut Mlp) {
        (&mut self.q1, &mut self.q2)
    }

    pub fn targets(&self) -> (&Mlp, &Mlp) {
        (&self.q1_target, &self.q2_target)
    }

    fn policy_input(&self, obs: &Tensor, z: &Tensor) -> Result<Tensor, SacError> {
        if obs.cols() != self.obs_dim {
            return Err(SacError::Dim {
                what: "observation",
                expected: self.obs_dim,
                got: obs.cols(),
            });
        }
        if z.cols() != self.skill_dim {
            return Err(SacError::Dim {
                what: "skill",
                expected: self.skill_dim,
                got: z.cols(),
            });
        }
        Ok(obs.hcat(z)?)
    }

    /// Records a reparameterized draw `max_action * tanh(mu + sigma * noise)`
    /// and its log-density (summed over action dims).
    fn sample_on_tape(
        &self,
        tape: &mut Tape,
        actor: &MlpBinding,
        input: Var,
        noise: Tensor,
    ) -> Result<Sampled, SacError> {
        let d = self.action_dim;
        let out = actor.forward(tape, input)?;
        let mu = tape.slice_cols(out, 0, d);
        let raw = tape.slice_cols(out, d, 2 * d);
        let log_std = tape.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
        let std = tape.exp(log_std);
        let eps_sq = noise.data().iter().map(|e| e * e).collect();
        let eps_sq = Tensor::matrix(noise.rows(), d, eps_sq)?;
        let eps = tape.constant(noise);
        let spread = tape.mul(std, eps);
        let u = tape.add(mu, spread);
        let squashed = tape.tanh(u);
        let action = tape.scale(squashed, self.max_action);

        // log N(u; mu, sigma) - log|d a / d u|
        // log(1 - tanh(u)^2) = 2 (ln 2 - u - softplus(-2u))
        let half_sq = tape.constant(eps_sq);
        let gauss = tape.scale(half_sq, -0.5);
        let gauss = tape.sub(gauss, log_std);
        let gauss = tape.add_scalar(gauss, -0.5 * (2.0 * PI).ln() - self.max_action.ln());
        let m2u = tape.scale(u, -2.0);
        let sp = tape.softplus(m2u);
        let jac = tape.add(u, sp);
        let jac = tape.add_scalar(jac, -std::f64::consts::LN_2);
        let jac = tape.scale(jac, 2.0);
        // gauss - 2(ln2 - u - sp) = gauss + 2(u + sp - ln2)
        let per_dim = tape.add(gauss, jac);
        let log_prob = tape.sum_cols(per_dim);
        Ok(Sampled { action, log_prob })
    }

    fn noise(&self, rows: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..rows * self.action_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        Tensor::matrix(rows, self.action_dim, data).expect("noise shape")
    }

    /// Draws actions for a batch of `(obs, z)` with their log-densities.
    pub fn sample_actions(
        &self,
        obs: &Tensor,
        z: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, Vec<f64>), SacError> {
        let noise = self.noise(obs.rows(), rng);
        self.actions_with_noise(obs, z, noise)
    }

    /// Like [`Self::sample_actions`] with caller-supplied standard-normal noise.
    pub fn actions_with_noise(
        &self,
        obs: &Tensor,
        z: &Tensor,
        noise: Tensor,
    ) -> Result<(Tensor, Vec<f64>), SacError> {
        let input = self.policy_input(obs, z)?;
        let mut tape = Tape::new();
        let x = tape.constant(input);
        let actor = self.actor.bind(&mut tape);
        let s = self.sample_on_tape(&mut tape, &actor, x, noise)?;
        Ok((
            tape.value(s.action).clone(),
            tape.value(s.log_prob).data().to_vec(),
        ))
    }

    /// `max_action * tanh(mu)`.
    pub fn deterministic_action(&self, obs: &[f64], z: &[f64]) -> Result<Vec<f64>, SacError> {
        let input = self.policy_input(&Tensor::row(obs), &Tensor::row(z))?;
        let out = self.actor.predict(&input)?;
        Ok(out.data()[..self.action_dim]
            .iter()
            .map(|m| self.max_action * m.tanh())
            .collect())
    }

    /// Gaussian mean and clamped log-std for one input.
    pub fn action_distribution(
        &self,
        obs: &[f64],
        z: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>), SacError> {
        let input = self.policy_input(&Tensor::row(obs), &Tensor::row(z))?;
        let out = self.actor.predict(&input)?.into_data();
        let (mu, ls) = out.split_at(self.action_dim);
        Ok((
            mu.to_vec(),
            ls.iter().map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect(),
        ))
    }

    /// Behaviour action: uniform with probability `random_action_prob`,
    /// otherwise a policy sample plus Gaussian noise, clipped to range.
    pub fn explore_action(
        &self,
        obs: &[f64],
        z: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>, SacError> {
        let m = self.max_action;
        if rng.gen::<f64>() < self.cfg.random_action_prob {
            return Ok((0..self.action_dim).map(|_| rng.gen_range(-m..=m)).collect());
        }
        let (a, _) = self.sample_actions(&Tensor::row(obs), &Tensor::row(z), rng)?;
        Ok(a.data()
            .iter()
            .map(|x| {
                let n: f64 = rng.sample(StandardNormal);
                (x + self.cfg.action_noise * m * n).clamp(-m, m)
            })
            .collect())
    }

    fn min_target_q(&self, obs: &Tensor, z: &Tensor, a: &Tensor) -> Result<Vec<f64>, SacError> {
        let x = obs.hcat(z)?.hcat(a)?;
        let t1 = self.q1_target.predict(&x)?;
        let t2 = self.q2_target.predict(&x)?;
        Ok(t1.data().iter().zip(t2.data()).map(|(a, b)| a.min(*b)).collect())
    }

    /// `r + gamma (1 - done) (min Q'(s', a') - alpha log pi(a'|s', z))`
    /// with `a'` from the current actor under `noise`.
    pub fn critic_targets_with_noise(
        &self,
        rewards: &[f64],
        s_next: &Tensor,
        z: &Tensor,
        done: &[bool],
        noise: Tensor,
    ) -> Result<Vec<f64>, SacError> {
        let (a, logp) = self.actions_with_noise(s_next, z, noise)?;
        let q = self.min_target_q(s_next, z, &a)?;
        let alpha = self.alpha();
        Ok(rewards
            .iter()
            .zip(&q)
            .zip(&logp)
            .zip(done)
            .map(|(((r, q), lp), d)| {
                let cont = if *d { 0.0 } else { 1.0 };
                r + self.cfg.gamma * cont * (q - alpha * lp)
            })
            .collect())
    }

    pub fn q_values(&self, obs: &Tensor, z: &Tensor, a: &Tensor) -> Result<(Vec<f64>, Vec<f64>), SacError> {
        let x = obs.hcat(z)?.hcat(a)?;
        Ok((
            self.q1.predict(&x)?.into_data(),
            self.q2.predict(&x)?.into_data(),
        ))
    }
}

/// Single-transition critic target.
pub fn critic_target(
    agent: &SacAgent,
    r: f64,
    s_next: &[f64],
    z: &[f64],
    done: bool,
    rng: &mut ChaCha8Rng,
) -> Result<f64, SacError> {
    let noise = agent.noise(1, rng);
    Ok(agent.critic_targets_with_noise(&[r], &Tensor::row(s_next), &Tensor::row(z), &[done], noise)?[0])
}

/// Records `mean((q(x) - y)^2)` on `tape`.
pub(crate) fn critic_loss_on_tape(
    tape: &mut Tape,
    q: &Mlp,
    x: &Tensor,
    y: &[f64],
) -> Result<(Var, MlpBinding), SacError> {
    let xv = tape.constant(x.clone());
    let yv = tape.constant(Tensor::matrix(y.len(), 1, y.to_vec())?);
    let (out, b) = q.forward(tape, xv)?;
    let diff = tape.sub(out, yv);
    let sq = tape.square(diff);
    Ok((tape.mean(sq), b))
}

/// One critic step, one actor step, an optional temperature step and the
/// Polyak target update. `intrinsic` recomputes rewards for the sampled
/// batch from the current reward networks.
pub fn sac_update<F, E>(
    agent: &mut SacAgent,
    buffer: &ReplayBuffer,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    mut intrinsic: F,
) -> Result<UpdateOutcome, SacError>
where
    F: FnMut(&TransitionBatch) -> Result<Vec<f64>, E>,
    E: std::fmt::Display,
{
    if buffer.len() < batch_size || batch_size == 0 {
        return Ok(UpdateOutcome::Skipped {
            have: buffer.len(),
            need: batch_size.max(1),
        });
    }
    let batch = buffer.sample(batch_size, rng);
    let rewards = intrinsic(&batch).map_err(|e| SacError::Reward(e.to_string()))?;
    if rewards.len() != batch.len() {
        return Err(SacError::Dim {
            what: "reward count",
            expected: batch.len(),
            got: rewards.len(),
        });
    }
    let losses = update_on_batch(agent, &batch, &rewards, rng)?;
    Ok(UpdateOutcome::Updated(losses))
}

/// The gradient part of [`sac_update`] on an already drawn batch.
pub fn update_on_batch(
    agent: &mut SacAgent,
    batch: &TransitionBatch,
    rewards: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<SacLosses, SacError> {
    let n = batch.len();
    let lr = agent.cfg.lr;

    let next_noise = agent.noise(n, rng);
    let y = agent.critic_targets_with_noise(rewards, &batch.s_next, &batch.z, &batch.done, next_noise)?;
    let xq = batch.s.hcat(&batch.z)?.hcat(&batch.a)?;
    let mut critic = 0.0;
    let mut mean_q = 0.0;
    for (q, opt) in [(&mut agent.q1, &mut agent.q1_opt), (&mut agent.q2, &mut agent.q2_opt)] {
        let mut tape = Tape::new();
        let (loss, b) = critic_loss_on_tape(&mut tape, q, &xq, &y)?;
        critic += tape.value(loss).item()?;
        tape.backward(loss)?;
        b.accumulate_grads(&tape, q)?;
        opt.step(q.params_mut(), lr)?;
    }
    for v in agent.q1.predict(&xq)?.data() {
        mean_q += v / n as f64;
    }

    // actor: mean(alpha log pi - min(q1, q2)); critics are frozen here
    let alpha = agent.alpha();
    let noise = agent.noise(n, rng);
    let input = agent.policy_input(&batch.s, &batch.z)?;
    let mut tape = Tape::new();
    let x = tape.constant(input);
    let sz = tape.constant(batch.s.hcat(&batch.z)?);
    let actor_b = agent.actor.bind(&mut tape);
    let sampled = agent.sample_on_tape(&mut tape, &actor_b, x, noise)?;
    let qin = tape.concat_cols(sz, sampled.action);
    let q1b = agent.q1.bind(&mut tape);
    let q2b = agent.q2.bind(&mut tape);
    let q1v = q1b.forward(&mut tape, qin)?;
    let q2v = q2b.forward(&mut tape, qin)?;
    let qmin = tape.minimum(q1v, q2v);
    let ent = tape.scale(sampled.log_prob, alpha);
    let per = tape.sub(ent, qmin);
    let actor_loss = tape.mean(per);
    let actor_value = tape.value(actor_loss).item()?;
    let logp = tape.value(sampled.log_prob).data().to_vec();
    tape.backward(actor_loss)?;
    actor_b.accumulate_grads(&tape, &mut agent.actor)?;
    agent.actor_opt.step(agent.actor.params_mut(), lr)?;

    let mean_logp = logp.iter().sum::<f64>() / n as f64;
    let mut alpha_loss = 0.0;
    if agent.cfg.auto_alpha {
        // loss = -log_alpha * (log pi + target_entropy), target = -|A|
        let target = -(agent.action_dim as f64);
        let g = -(mean_logp + target);
        alpha_loss = agent.log_alpha.data()[0] * g;
        agent.log_alpha.accumulate_grad(&[g])?;
        agent
            .alpha_opt
            .step(std::slice::from_mut(&mut agent.log_alpha), lr)?;
    }

    polyak_update(&mut agent.q1_target, &agent.q1, agent.cfg.tau);
    polyak_update(&mut agent.q2_target, &agent.q2, agent.cfg.tau);

    Ok(SacLosses {
        critic,
        actor: actor_value,
        alpha: alpha_loss,
        entropy: -mean_logp,
        mean_q,
        mean_reward: rewards.iter().sum::<f64>() / n as f64,
    })
}

/// Stochastic behaviour policy used during data collection.
pub struct Explorer<'a>(pub &'a SacAgent);

impl Policy for Explorer<'_> {
    fn act(&mut self, obs: &[f64], skill: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.0
            .explore_action(obs, skill, rng)
            .expect("policy input dims fixed at construction")
    }
}

/// Deterministic `tanh(mu)` policy used for evaluation.
pub struct Greedy<'a>(pub &'a SacAgent);

impl Policy for Greedy<'_> {
    fn act(&mut self, obs: &[f64], skill: &[f64], _: &mut ChaCha8Rng) -> Vec<f64> {
        self.0
            .deterministic_action(obs, skill)
            .expect("policy input dims fixed at construction")
    }
}
