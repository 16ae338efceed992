//! Skill rollouts for evaluation and the hierarchical goal-reaching task.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::envs::{rollout, Env, EnvState, Policy, PointPush, Transition, TransitionBatch};
use crate::sac::{sac_update, Greedy, ReplayBuffer, SacAgent, SacConfig};
use crate::skill_space::{sample_skill, SkillSpec, SKILL_RANGE};

/// `n_skills` deterministic rollouts. Skills are drawn from the prior, or
/// with `enumerate` on a discrete spec, taken as categories `0, 1, ...`.
pub fn eval_skills(
    agent: &SacAgent,
    env: &dyn Env,
    spec: &SkillSpec,
    n_skills: usize,
    horizon: usize,
    seed: u64,
    enumerate: bool,
) -> Result<Vec<Vec<Transition>>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_skills);
    for i in 0..n_skills {
        let z = if enumerate && spec.is_discrete() {
            spec.encode(i % spec.discrete_count)?
        } else {
            sample_skill(spec, &mut rng)
        };
        let ep_seed = rng.next_u64();
        out.push(rollout(env, &mut Greedy(agent), &z, horizon, ep_seed)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalTaskConfig {
    /// Goals are uniform in `[-goal_range, goal_range]^2`.
    pub goal_range: f64,
    /// Fixed goal instead of sampling one per episode.
    pub goal: Option<[f64; 2]>,
    pub success_radius: f64,
    /// Low-level steps per episode.
    pub horizon: usize,
    /// Low-level steps per high-level decision.
    pub skill_period: usize,
    pub skill_dim: usize,
    pub train_episodes: usize,
    pub eval_episodes: usize,
    pub updates_per_episode: usize,
    pub batch_size: usize,
    pub sac: SacConfig,
}

impl Default for GoalTaskConfig {
    fn default() -> Self {
        Self {
            goal_range: 0.8,
            goal: None,
            success_radius: 0.15,
            horizon: 50,
            skill_period: 10,
            skill_dim: 2,
            train_episodes: 300,
            eval_episodes: 50,
            updates_per_episode: 5,
            batch_size: 64,
            sac: SacConfig {
                hidden: vec![64, 64],
                ..SacConfig::default()
            },
        }
    }
}

impl GoalTaskConfig {
    fn block_at_goal(&self, obs: &[f64], goal: [f64; 2]) -> bool {
        (obs[2] - goal[0]).hypot(obs[3] - goal[1]) <= self.success_radius
    }

    fn sample_goal(&self, rng: &mut ChaCha8Rng) -> [f64; 2] {
        self.goal.unwrap_or_else(|| {
            let r = self.goal_range;
            [rng.gen_range(-r..=r), rng.gen_range(-r..=r)]
        })
    }
}

/// High-level decision maker: picks a skill from `(obs, goal)`.
enum Chooser<'a> {
    Explore(&'a SacAgent),
    Greedy(&'a SacAgent),
}

/// Runs one goal episode; returns whether the block reached the goal and the
/// high-level transitions (observation `obs ++ goal`, action = skill).
fn goal_episode(
    env: &PointPush,
    low: &mut dyn Policy,
    chooser: Chooser<'_>,
    task: &GoalTaskConfig,
    goal: [f64; 2],
    rng: &mut ChaCha8Rng,
) -> Result<(bool, Vec<Transition>), TrainError> {
    let mut state: EnvState = env.reset(0);
    if task.block_at_goal(&state.obs, goal) {
        return Ok((true, Vec::new()));
    }
    let with_goal = |obs: &[f64]| {
        let mut v = obs.to_vec();
        v.extend_from_slice(&goal);
        v
    };
    let mut transitions = Vec::new();
    let mut t = 0;
    while t < task.horizon {
        let hl_obs = with_goal(&state.obs);
        let raw = match chooser {
            Chooser::Explore(a) => a.explore_action(&hl_obs, &[], rng)?,
            Chooser::Greedy(a) => a.deterministic_action(&hl_obs, &[])?,
        };
        let z: Vec<f64> = raw.iter().map(|x| x.clamp(-SKILL_RANGE, SKILL_RANGE)).collect();
        let mut reached = false;
        for _ in 0..task.skill_period.max(1) {
            if t >= task.horizon {
                break;
            }
            let a = low.act(&state.obs, &z, rng);
            state = env.step(&state, &a)?;
            t += 1;
            if task.block_at_goal(&state.obs, goal) {
                reached = true;
                break;
            }
        }
        transitions.push(Transition {
            s: hl_obs,
            a: z,
            s_next: with_goal(&state.obs),
            z: Vec::new(),
            done: reached,
        });
        if reached {
            return Ok((true, transitions));
        }
    }
    Ok((false, transitions))
}

/// Trains a high-level SAC controller over skills of the frozen `low`
/// policy (reward 1 and termination when the block is within the success
/// radius of the goal) and returns its greedy success rate.
pub fn train_high_level(
    low: &mut dyn Policy,
    env: &PointPush,
    task: &GoalTaskConfig,
    seed: u64,
) -> Result<f64, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hl = SacAgent::new(env.obs_dim() + 2, 0, task.skill_dim, SKILL_RANGE, task.sac.clone(), &mut rng);
    let mut buffer = ReplayBuffer::new(100_000);
    let radius = task.success_radius;
    let reward = |b: &TransitionBatch| -> Result<Vec<f64>, String> {
        Ok(b.s_next
            .iter_rows()
            .map(|r| {
                let hit = (r[2] - r[4]).hypot(r[3] - r[5]) <= radius;
                if hit {
                    1.0
                } else {
                    0.0
                }
            })
            .collect())
    };
    for _ in 0..task.train_episodes {
        let goal = task.sample_goal(&mut rng);
        let (_, trans) = goal_episode(env, low, Chooser::Explore(&hl), task, goal, &mut rng)?;
        buffer.extend(trans);
        for _ in 0..task.updates_per_episode {
            sac_update(&mut hl, &buffer, task.batch_size, &mut rng, reward)?;
        }
    }
    evaluate_high_level(low, env, &hl, task, rng.next_u64())
}

/// Greedy success rate of a trained high-level agent.
pub fn evaluate_high_level(
    low: &mut dyn Policy,
    env: &PointPush,
    hl: &SacAgent,
    task: &GoalTaskConfig,
    seed: u64,
) -> Result<f64, TrainError> {
    if task.eval_episodes == 0 {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wins = 0usize;
    for _ in 0..task.eval_episodes {
        let goal = task.sample_goal(&mut rng);
        let (ok, _) = goal_episode(env, low, Chooser::Greedy(hl), task, goal, &mut rng)?;
        wins += usize::from(ok);
    }
    Ok(wins as f64 / task.eval_episodes as f64)
}
