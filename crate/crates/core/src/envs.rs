//! Deterministic toy environments.
//!
//! [`PointPush`] is a 2-D agent that carries a block when it steps into
//! contact with it, a small analog of a pushing task where moving the object
//! is a rare transition compared to moving the agent. [`GraphMdp`] is a
//! finite state graph used where exact answers are needed.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndmath::Tensor;
use crate::skill_space::SkillVector;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("action has {got} components, environment expects {expected}")]
    ActionDim { expected: usize, got: usize },
    #[error("observation has {got} components, environment expects {expected}")]
    ObsDim { expected: usize, got: usize },
    #[error("horizon {horizon} exceeds episode length {episode_length}")]
    Horizon {
        horizon: usize,
        episode_length: usize,
    },
    #[error("invalid environment: {0}")]
    Invalid(String),
    #[error("trajectory log: {0}")]
    Log(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub obs: Vec<f64>,
    pub step_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub s_next: Vec<f64>,
    pub z: Vec<f64>,
    /// True termination (not a time limit).
    pub done: bool,
}

/// Column-stacked transitions for minibatch updates.
#[derive(Debug, Clone)]
pub struct TransitionBatch {
    pub s: Tensor,
    pub a: Tensor,
    pub s_next: Tensor,
    pub z: Tensor,
    pub done: Vec<bool>,
}

impl TransitionBatch {
    pub fn from_transitions<'a, I>(items: I) -> Self
    where
        I: IntoIterator<Item = &'a Transition>,
    {
        let items: Vec<&Transition> = items.into_iter().collect();
        let stack = |f: &dyn Fn(&Transition) -> &[f64]| {
            let cols = items.first().map_or(0, |t| f(t).len());
            let mut data = Vec::with_capacity(items.len() * cols);
            for t in &items {
                data.extend_from_slice(f(t));
            }
            Tensor::matrix(items.len(), cols, data).expect("uniform transition widths")
        };
        Self {
            s: stack(&|t| &t.s),
            a: stack(&|t| &t.a),
            s_next: stack(&|t| &t.s_next),
            z: stack(&|t| &t.z),
            done: items.iter().map(|t| t.done).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.done.len()
    }

    pub fn is_empty(&self) -> bool {
        self.done.is_empty()
    }
}

pub trait Env {
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn max_action(&self) -> f64;
    fn episode_length(&self) -> usize;
    fn reset(&self, seed: u64) -> EnvState;
    fn step(&self, state: &EnvState, action: &[f64]) -> Result<EnvState, EnvError>;
}

/// Anything that maps (observation, skill) to an action.
pub trait Policy {
    fn act(&mut self, obs: &[f64], skill: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64>;
}

impl<F> Policy for F
where
    F: FnMut(&[f64], &[f64], &mut ChaCha8Rng) -> Vec<f64>,
{
    fn act(&mut self, obs: &[f64], skill: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        self(obs, skill, rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointPushConfig {
    pub contact_radius: f64,
    pub max_action: f64,
    pub episode_length: usize,
    pub agent_start: [f64; 2],
    pub block_start: [f64; 2],
}

impl Default for PointPushConfig {
    fn default() -> Self {
        Self {
            contact_radius: 0.1,
            max_action: 0.1,
            episode_length: 50,
            agent_start: [0.0, 0.0],
            block_start: [0.5, 0.0],
        }
    }
}

/// Observation layout: `[agent_x, agent_y, block_x, block_y]`, all in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointPush {
    cfg: PointPushConfig,
}

impl PointPush {
    pub const AGENT_DIMS: [usize; 2] = [0, 1];
    pub const BLOCK_DIMS: [usize; 2] = [2, 3];

    pub fn new(cfg: PointPushConfig) -> Result<Self, EnvError> {
        if !(cfg.contact_radius > 0.0) || !(cfg.max_action > 0.0) {
            return Err(EnvError::Invalid(
                "contact_radius and max_action must be positive".into(),
            ));
        }
        let inside = |p: [f64; 2]| p.iter().all(|x| (-1.0..=1.0).contains(x));
        if !inside(cfg.agent_start) || !inside(cfg.block_start) {
            return Err(EnvError::Invalid("start positions must lie in [-1, 1]^2".into()));
        }
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &PointPushConfig {
        &self.cfg
    }

    /// Same dynamics from an arbitrary state; used by tests and the goal task.
    pub fn state_at(&self, agent: [f64; 2], block: [f64; 2]) -> EnvState {
        EnvState {
            obs: vec![agent[0], agent[1], block[0], block[1]],
            step_index: 0,
        }
    }
}

impl Default for PointPush {
    fn default() -> Self {
        Self {
            cfg: PointPushConfig::default(),
        }
    }
}

impl Env for PointPush {
    fn obs_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn max_action(&self) -> f64 {
        self.cfg.max_action
    }

    fn episode_length(&self) -> usize {
        self.cfg.episode_length
    }

    fn reset(&self, _seed: u64) -> EnvState {
        self.state_at(self.cfg.agent_start, self.cfg.block_start)
    }

    fn step(&self, state: &EnvState, action: &[f64]) -> Result<EnvState, EnvError> {
        if action.len() != 2 {
            return Err(EnvError::ActionDim {
                expected: 2,
                got: action.len(),
            });
        }
        if state.obs.len() != 4 {
            return Err(EnvError::ObsDim {
                expected: 4,
                got: state.obs.len(),
            });
        }
        let m = self.cfg.max_action;
        let o = &state.obs;
        let (agent, block) = ([o[0], o[1]], [o[2], o[3]]);
        let mut next_agent = [0.0; 2];
        for k in 0..2 {
            next_agent[k] = (agent[k] + action[k].clamp(-m, m)).clamp(-1.0, 1.0);
        }
        let gap = (next_agent[0] - block[0]).hypot(next_agent[1] - block[1]);
        let next_block = if gap < self.cfg.contact_radius {
            [
                (block[0] + next_agent[0] - agent[0]).clamp(-1.0, 1.0),
                (block[1] + next_agent[1] - agent[1]).clamp(-1.0, 1.0),
            ]
        } else {
            block
        };
        Ok(EnvState {
            obs: vec![next_agent[0], next_agent[1], next_block[0], next_block[1]],
            step_index: state.step_index + 1,
        })
    }
}

/// Finite deterministic graph. Observations are one-hot state indicators;
/// the single action component in `[-1, 1]` is split evenly among the
/// outgoing edges of the current state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphMdp {
    n_states: usize,
    adjacency: Vec<Vec<usize>>,
    episode_length: usize,
}

impl GraphMdp {
    pub const MAX_STATES: usize = 16;

    pub fn new(adjacency: Vec<Vec<usize>>, episode_length: usize) -> Result<Self, EnvError> {
        let n = adjacency.len();
        if n == 0 || n > Self::MAX_STATES {
            return Err(EnvError::Invalid(format!(
                "graph must have 1..={} states, got {n}",
                Self::MAX_STATES
            )));
        }
        for (s, edges) in adjacency.iter().enumerate() {
            if let Some(&bad) = edges.iter().find(|&&t| t >= n) {
                return Err(EnvError::Invalid(format!(
                    "state {s} has an edge to missing state {bad}"
                )));
            }
        }
        Ok(Self {
            n_states: n,
            adjacency,
            episode_length,
        })
    }

    /// A line of `n` states with actions {left, stay, right}.
    pub fn chain(n: usize, episode_length: usize) -> Result<Self, EnvError> {
        let adjacency = (0..n)
            .map(|s| vec![s.saturating_sub(1), s, (s + 1).min(n.saturating_sub(1))])
            .collect();
        Self::new(adjacency, episode_length)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn adjacency(&self) -> &[Vec<usize>] {
        &self.adjacency
    }

    pub fn state_index(&self, obs: &[f64]) -> usize {
        obs.iter()
            .position(|&x| x > 0.5)
            .unwrap_or(0)
            .min(self.n_states - 1)
    }

    pub fn one_hot(&self, s: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_states];
        v[s] = 1.0;
        v
    }

    /// Index of the edge selected by action value `a`.
    pub fn edge_for(&self, state: usize, a: f64) -> Option<usize> {
        let k = self.adjacency[state].len();
        if k == 0 {
            return None;
        }
        let u = (a.clamp(-1.0, 1.0) + 1.0) / 2.0;
        Some(((u * k as f64).floor() as usize).min(k - 1))
    }
}

impl Env for GraphMdp {
    fn obs_dim(&self) -> usize {
        self.n_states
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn max_action(&self) -> f64 {
        1.0
    }

    fn episode_length(&self) -> usize {
        self.episode_length
    }

    fn reset(&self, _seed: u64) -> EnvState {
        EnvState {
            obs: self.one_hot(0),
            step_index: 0,
        }
    }

    fn step(&self, state: &EnvState, action: &[f64]) -> Result<EnvState, EnvError> {
        if action.len() != 1 {
            return Err(EnvError::ActionDim {
                expected: 1,
                got: action.len(),
            });
        }
        if state.obs.len() != self.n_states {
            return Err(EnvError::ObsDim {
                expected: self.n_states,
                got: state.obs.len(),
            });
        }
        let s = self.state_index(&state.obs);
        let next = self
            .edge_for(s, action[0])
            .map_or(s, |e| self.adjacency[s][e]);
        Ok(EnvState {
            obs: self.one_hot(next),
            step_index: state.step_index + 1,
        })
    }
}

/// Runs one episode of `horizon` steps with the skill held fixed.
pub fn rollout(
    env: &dyn Env,
    policy: &mut dyn Policy,
    skill: &SkillVector,
    horizon: usize,
    seed: u64,
) -> Result<Vec<Transition>, EnvError> {
    if horizon > env.episode_length() {
        return Err(EnvError::Horizon {
            horizon,
            episode_length: env.episode_length(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = env.reset(seed);
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let a = policy.act(&state.obs, skill.as_slice(), &mut rng);
        let next = env.step(&state, &a)?;
        out.push(Transition {
            s: state.obs,
            a,
            s_next: next.obs.clone(),
            z: skill.0.clone(),
            done: false,
        });
        state = next;
    }
    Ok(out)
}

/// Observation sequence `s_0 .. s_T` of an episode.
pub fn observations(episode: &[Transition]) -> Vec<Vec<f64>> {
    let mut obs: Vec<Vec<f64>> = episode.iter().map(|t| t.s.clone()).collect();
    if let Some(last) = episode.last() {
        obs.push(last.s_next.clone());
    }
    obs
}

/// Writes episodes as CSV with columns
/// `episode,t,obs_0..,action_0..,skill_0..`. Each episode contributes one
/// row per visited state; the row for the final state has empty action
/// cells.
pub fn write_trajectories<W: Write>(out: W, episodes: &[Vec<Transition>]) -> Result<(), EnvError> {
    let Some(first) = episodes.iter().find_map(|e| e.first()) else {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["episode", "t"])?;
        w.flush()?;
        return Ok(());
    };
    let (no, na, nz) = (first.s.len(), first.a.len(), first.z.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["episode".to_string(), "t".to_string()];
    header.extend((0..no).map(|i| format!("obs_{i}")));
    header.extend((0..na).map(|i| format!("action_{i}")));
    header.extend((0..nz).map(|i| format!("skill_{i}")));
    w.write_record(&header)?;
    for (e, ep) in episodes.iter().enumerate() {
        for (t, tr) in ep.iter().enumerate() {
            let mut row = vec![e.to_string(), t.to_string()];
            row.extend(tr.s.iter().map(|x| x.to_string()));
            row.extend(tr.a.iter().map(|x| x.to_string()));
            row.extend(tr.z.iter().map(|x| x.to_string()));
            w.write_record(&row)?;
        }
        if let Some(last) = ep.last() {
            let mut row = vec![e.to_string(), ep.len().to_string()];
            row.extend(last.s_next.iter().map(|x| x.to_string()));
            row.extend(std::iter::repeat(String::new()).take(na));
            row.extend(last.z.iter().map(|x| x.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads the observation columns of a trajectory CSV, grouped by episode.
pub fn read_trajectory_observations<R: Read>(input: R) -> Result<Vec<Vec<Vec<f64>>>, EnvError> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    let obs_cols: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("obs_"))
        .map(|(i, _)| i)
        .collect();
    let ep_col = header
        .iter()
        .position(|h| h == "episode")
        .ok_or_else(|| EnvError::Log("missing `episode` column".into()))?;
    let mut episodes: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut current: Option<String> = None;
    for rec in rdr.records() {
        let rec = rec?;
        let ep = rec.get(ep_col).unwrap_or_default().to_string();
        if current.as_deref() != Some(ep.as_str()) {
            episodes.push(Vec::new());
            current = Some(ep);
        }
        let obs = obs_cols
            .iter()
            .map(|&c| {
                let cell = rec.get(c).unwrap_or_default();
                cell.parse::<f64>()
                    .map_err(|_| EnvError::Log(format!("bad observation value `{cell}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        episodes.last_mut().expect("pushed above").push(obs);
    }
    Ok(episodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn zero_policy(_: &[f64], _: &[f64], _: &mut ChaCha8Rng) -> Vec<f64> {
        vec![0.0, 0.0]
    }

    #[test]
    fn reset_is_fixed_start() {
        let env = PointPush::default();
        let s = env.reset(0);
        assert_eq!(s.obs, vec![0.0, 0.0, 0.5, 0.0]);
        assert_eq!(s.step_index, 0);
        assert_eq!(env.reset(7), env.reset(7));
        let g = GraphMdp::chain(5, 10).unwrap();
        assert_eq!(g.state_index(&g.reset(3).obs), 0);
    }

    #[test]
    fn block_stays_without_contact() {
        let env = PointPush::default();
        let s = env.state_at([-0.5, -0.5], [0.5, 0.5]);
        let n = env.step(&s, &[0.1, 0.1]).unwrap();
        assert_eq!(&n.obs[2..], &[0.5, 0.5]);
    }

    #[test]
    fn coincident_agent_carries_block() {
        let env = PointPush::default();
        let s = env.state_at([0.3, 0.2], [0.3, 0.2]);
        let n = env.step(&s, &[0.05, 0.0]).unwrap();
        assert!((n.obs[2] - 0.35).abs() < 1e-12 && n.obs[3] == 0.2);
    }

    #[test]
    fn agent_clips_at_boundary() {
        let env = PointPush::default();
        let s = env.state_at([0.98, 0.0], [-0.5, -0.5]);
        let n = env.step(&s, &[0.1, 0.0]).unwrap();
        assert_eq!(&n.obs[..2], &[1.0, 0.0]);
        // oversized actions are clipped to max_action first
        let n = env.step(&env.state_at([0.0, 0.0], [-0.5, -0.5]), &[5.0, -5.0]).unwrap();
        assert_eq!(&n.obs[..2], &[0.1, -0.1]);
    }

    #[test]
    fn wrong_action_dim_is_error() {
        let env = PointPush::default();
        assert!(matches!(
            env.step(&env.reset(0), &[0.1]),
            Err(EnvError::ActionDim { .. })
        ));
        let g = GraphMdp::chain(3, 4).unwrap();
        assert!(g.step(&g.reset(0), &[0.0, 0.0]).is_err());
    }

    #[test]
    fn graph_edges_validated_and_followed() {
        assert!(GraphMdp::new(vec![vec![1], vec![2]], 5).is_err());
        let g = GraphMdp::chain(4, 10).unwrap();
        let s = g.reset(0);
        let right = g.step(&s, &[1.0]).unwrap();
        assert_eq!(g.state_index(&right.obs), 1);
        let stay = g.step(&right, &[0.0]).unwrap();
        assert_eq!(g.state_index(&stay.obs), 1);
        let left = g.step(&stay, &[-1.0]).unwrap();
        assert_eq!(g.state_index(&left.obs), 0);
    }

    #[test]
    fn zero_policy_rollout_stays_at_start() {
        let env = PointPush::default();
        let z = SkillVector(vec![0.3, -0.1]);
        let traj = rollout(&env, &mut zero_policy, &z, 20, 0).unwrap();
        assert_eq!(traj.len(), 20);
        for t in &traj {
            assert_eq!(t.s, env.reset(0).obs);
            assert_eq!(t.s_next, env.reset(0).obs);
            assert_eq!(t.z, z.0);
        }
        assert!(rollout(&env, &mut zero_policy, &z, 0, 0).unwrap().is_empty());
        assert!(rollout(&env, &mut zero_policy, &z, 51, 0).is_err());
    }

    #[test]
    fn rollout_matches_manual_replay() {
        let env = PointPush::default();
        let z = SkillVector(vec![1.0, 0.0]);
        let mut policy = |obs: &[f64], skill: &[f64], rng: &mut ChaCha8Rng| {
            vec![
                0.1 * skill[0] + rng.gen_range(-0.05..0.05),
                0.02 * obs[0] + rng.gen_range(-0.05..0.05),
            ]
        };
        let traj = rollout(&env, &mut policy, &z, 50, 42).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut state = env.reset(42);
        for tr in &traj {
            let a = policy(&state.obs, &z.0, &mut rng);
            assert_eq!(a, tr.a);
            assert_eq!(state.obs, tr.s);
            state = env.step(&state, &a).unwrap();
            assert_eq!(state.obs, tr.s_next);
        }
    }

    #[test]
    fn random_walk_stays_in_bounds_and_block_moves_only_on_contact() {
        let env = PointPush::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = env.reset(0);
        for step in 0..10_000 {
            if step % 50 == 0 {
                s = env.reset(0);
            }
            let a = [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)];
            let n = env.step(&s, &a).unwrap();
            assert!(n.obs.iter().all(|x| (-1.0..=1.0).contains(x)));
            let gap = (n.obs[0] - s.obs[2]).hypot(n.obs[1] - s.obs[3]);
            if gap >= env.config().contact_radius {
                assert_eq!(&n.obs[2..], &s.obs[2..]);
            }
            s = n;
        }
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let env = PointPush::default();
        let z = SkillVector(vec![0.5, 0.5]);
        let mut policy = |_: &[f64], _: &[f64], _: &mut ChaCha8Rng| vec![0.1, 0.05];
        let eps = vec![
            rollout(&env, &mut policy, &z, 5, 0).unwrap(),
            rollout(&env, &mut policy, &z, 3, 1).unwrap(),
        ];
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &eps).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("episode,t,obs_0,obs_1,obs_2,obs_3,action_0,action_1,skill_0,skill_1"));
        let back = read_trajectory_observations(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], observations(&eps[0]));
        assert_eq!(back[1], observations(&eps[1]));
    }
}
