//! End-to-end skill discovery runs, evaluation rollouts and the goal task.

pub mod coverage;
pub mod eval;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::CondGaussian;
use crate::envs::{rollout, write_trajectories, Env, EnvError, GraphMdp, PointPush, PointPushConfig, Transition, TransitionBatch};
use crate::intrinsic::{
    diayn_rewards, disagreement_rewards, dsd_rewards, lambda_update, phi_update, DistanceFn, DualState, DynEnsemble,
    Discriminator, Euclidean, IntrinsicError, PhiNet, StateNormalizer,
};
use crate::ndmath::{NdError, Tensor};
use crate::sac::{sac_update, Explorer, ReplayBuffer, SacAgent, SacConfig, SacError, UpdateOutcome};
use crate::skill_space::{sample_skill, Encoding, SkillError, SkillKind, SkillSpec};

pub use coverage::{state_coverage, CoverageGrid, DEFAULT_BIN};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Skill(#[from] SkillError),
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error(transparent)]
    Intrinsic(#[from] IntrinsicError),
    #[error(transparent)]
    Sac(#[from] SacError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("non-finite {quantity} during {stage:?} at epoch {epoch}")]
    NonFinite {
        epoch: usize,
        stage: Stage,
        quantity: &'static str,
        snapshot: Box<Snapshot>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Csd,
    Lsd,
    LsdPreset,
    LsdNorm,
    Diayn,
    Disagreement,
}

impl Method {
    pub fn is_dsd(self) -> bool {
        matches!(self, Method::Csd | Method::Lsd | Method::LsdPreset | Method::LsdNorm)
    }

    pub fn default_reward_coef(self) -> f64 {
        match self {
            Method::Diayn => 1500.0,
            Method::Disagreement => 200.0,
            _ => 500.0,
        }
    }

    pub fn default_encoding(self) -> Encoding {
        match self {
            Method::Diayn => Encoding::OneHot,
            _ => Encoding::ZeroCenteredOneHot,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    PointPush,
    GraphMdp,
}

/// Flat run configuration. Every field has a desk-scale default, so a config
/// file only lists what it overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub env: EnvKind,
    pub skill_kind: SkillKind,
    /// Continuous skill dimension.
    pub skill_dim: usize,
    /// Number of discrete skills.
    pub skill_count: usize,
    /// Discrete encoding; method default when absent.
    pub skill_encoding: Option<Encoding>,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub grad_steps_per_episode: usize,
    pub episode_length: usize,
    pub seeds: Vec<u64>,
    pub lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub alpha: f64,
    pub auto_alpha: bool,
    pub epsilon: f64,
    pub lambda_init: f64,
    pub lr_lambda: f64,
    /// Intrinsic reward multiplier; method default when absent.
    pub reward_coef: Option<f64>,
    pub batch_size: usize,
    pub buffer_size: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    /// Epochs before the first policy update; `epochs / 20` for CSD and 0
    /// otherwise when absent.
    pub warmup_epochs: Option<usize>,
    /// Observation indices fed to phi, the discriminator and the density
    /// model. The policy always sees the full observation.
    pub state_mask: Option<Vec<usize>>,
    pub random_action_prob: f64,
    pub action_noise: f64,
    pub density_normalize: bool,
    pub ensemble_size: usize,
    pub ema_momentum: f64,
    /// Random-action episodes used to estimate the preset normalizer.
    pub preset_episodes: usize,
    pub coverage_bin: f64,
    pub contact_radius: f64,
    pub max_action: f64,
    /// Chain length for the graph environment.
    pub graph_states: usize,
    /// Deterministic rollouts logged at the end of a run.
    pub eval_skills: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let push = PointPushConfig::default();
        Self {
            method: Method::Csd,
            env: EnvKind::PointPush,
            skill_kind: SkillKind::Continuous,
            skill_dim: 2,
            skill_count: 0,
            skill_encoding: None,
            epochs: 2000,
            episodes_per_epoch: 2,
            grad_steps_per_episode: 10,
            episode_length: push.episode_length,
            seeds: vec![0, 1, 2],
            lr: 1e-3,
            gamma: 0.98,
            tau: 0.995,
            alpha: 0.02,
            auto_alpha: false,
            epsilon: 1e-6,
            lambda_init: 3000.0,
            lr_lambda: 1e-4,
            reward_coef: None,
            batch_size: 256,
            buffer_size: 100_000,
            hidden_width: 64,
            hidden_layers: 2,
            warmup_epochs: None,
            state_mask: None,
            random_action_prob: 0.3,
            action_noise: 0.2,
            density_normalize: true,
            ensemble_size: 5,
            ema_momentum: 0.99,
            preset_episodes: 20,
            coverage_bin: DEFAULT_BIN,
            contact_radius: push.contact_radius,
            max_action: push.max_action,
            graph_states: 8,
            eval_skills: 16,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn reward_coef(&self) -> f64 {
        self.reward_coef.unwrap_or_else(|| self.method.default_reward_coef())
    }

    pub fn warmup_epochs(&self) -> usize {
        self.warmup_epochs.unwrap_or(match self.method {
            Method::Csd => self.epochs / 20,
            _ => 0,
        })
    }

    pub fn skill_spec(&self) -> SkillSpec {
        match self.skill_kind {
            SkillKind::Continuous => SkillSpec::continuous(self.skill_dim),
            SkillKind::Discrete => SkillSpec::discrete(
                self.skill_count,
                self.skill_encoding.unwrap_or(self.method.default_encoding()),
            ),
        }
    }

    pub fn hidden(&self) -> Vec<usize> {
        vec![self.hidden_width; self.hidden_layers]
    }

    pub fn grad_steps_per_epoch(&self) -> usize {
        self.grad_steps_per_episode * self.episodes_per_epoch
    }

    pub fn build_env(&self) -> Result<Box<dyn Env>, TrainError> {
        Ok(match self.env {
            EnvKind::PointPush => Box::new(PointPush::new(PointPushConfig {
                contact_radius: self.contact_radius,
                max_action: self.max_action,
                episode_length: self.episode_length,
                ..PointPushConfig::default()
            })?),
            EnvKind::GraphMdp => Box::new(GraphMdp::chain(self.graph_states, self.episode_length)?),
        })
    }

    pub fn sac_config(&self) -> SacConfig {
        SacConfig {
            gamma: self.gamma,
            tau: self.tau,
            alpha: self.alpha,
            auto_alpha: self.auto_alpha,
            lr: self.lr,
            hidden: self.hidden(),
            random_action_prob: self.random_action_prob,
            action_noise: self.action_noise,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        let positive = [
            ("lr", self.lr),
            ("gamma", self.gamma),
            ("alpha", self.alpha),
            ("epsilon", self.epsilon),
            ("lr_lambda", self.lr_lambda),
            ("coverage_bin", self.coverage_bin),
            ("contact_radius", self.contact_radius),
            ("max_action", self.max_action),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return bad(&format!("{name} must be positive and finite, got {v}"));
            }
        }
        if self.gamma > 1.0 {
            return bad("gamma must be at most 1");
        }
        if !(0.0..1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1)");
        }
        if !(self.lambda_init >= 0.0) {
            return bad("lambda_init must be non-negative");
        }
        if let Some(c) = self.reward_coef {
            if !(c > 0.0) || !c.is_finite() {
                return bad("reward_coef must be positive");
            }
        }
        if !(0.0..=1.0).contains(&self.random_action_prob) || !(self.action_noise >= 0.0) {
            return bad("random_action_prob must lie in [0, 1] and action_noise must be non-negative");
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return bad("ema_momentum must lie in [0, 1)");
        }
        let counts = [
            ("episodes_per_epoch", self.episodes_per_epoch),
            ("grad_steps_per_episode", self.grad_steps_per_episode),
            ("episode_length", self.episode_length),
            ("batch_size", self.batch_size),
            ("buffer_size", self.buffer_size),
            ("hidden_width", self.hidden_width),
        ];
        for (name, v) in counts {
            if v == 0 {
                return bad(&format!("{name} must be at least 1"));
            }
        }
        if self.method == Method::Disagreement && self.ensemble_size < 2 {
            return bad("ensemble_size must be at least 2");
        }
        self.skill_spec().validate()?;
        let obs_dim = self.build_env()?.obs_dim();
        if let Some(mask) = &self.state_mask {
            if mask.is_empty() || mask.iter().any(|&i| i >= obs_dim) {
                return bad(&format!("state_mask entries must be distinct indices below {obs_dim}"));
            }
            let mut sorted = mask.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != mask.len() {
                return bad("state_mask has duplicates");
            }
        }
        Ok(())
    }
}

/// One stage of an epoch, in the order they run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Collect,
    DensityFit,
    NormalizerUpdate,
    PhiUpdate,
    LambdaUpdate,
    DiscriminatorUpdate,
    EnsembleFit,
    SacUpdate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub epoch: usize,
    pub stage: Stage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    /// Episodes collected so far.
    pub episodes: usize,
    pub intrinsic_reward_mean: f64,
    pub lambda: Option<f64>,
    pub constraint_violation_rate: Option<f64>,
    /// Cumulative occupied bins over all training episodes.
    pub coverage_agent: usize,
    pub coverage_block: usize,
    pub density_nll: Option<f64>,
}

pub const METRICS_HEADER: [&str; 8] = [
    "epoch",
    "episodes",
    "intrinsic_reward_mean",
    "lambda",
    "constraint_violation_rate",
    "coverage_agent",
    "coverage_block",
    "density_nll",
];

/// Everything needed to resume evaluation from a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub config: RunConfig,
    pub seed: u64,
    /// Epochs completed when the snapshot was taken.
    pub epoch: usize,
    pub agent: SacAgent,
    pub phi: Option<PhiNet>,
    pub dual: Option<DualState>,
    pub density: Option<CondGaussian>,
    pub normalizer: Option<StateNormalizer>,
    pub discriminator: Option<Discriminator>,
    pub ensemble: Option<DynEnsemble>,
}

impl Snapshot {
    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub config: RunConfig,
    pub seed: u64,
    pub metrics: Vec<MetricsRow>,
    /// `(epoch, unix milliseconds)` at the end of each epoch.
    pub timings: Vec<(usize, u128)>,
    pub events: Vec<Event>,
    pub initial: Snapshot,
    /// Absent when no epoch ran.
    pub last: Option<Snapshot>,
    /// Deterministic rollouts of the final policy.
    pub trajectories: Vec<Vec<Transition>>,
}

pub const SNAPSHOT_INITIAL: &str = "snapshot_initial.json";
pub const SNAPSHOT_FINAL: &str = "snapshot_final.json";
pub const SNAPSHOT_NAN: &str = "snapshot_nan.json";

impl RunArtifacts {
    pub fn metrics_csv(&self) -> Result<String, TrainError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(METRICS_HEADER)?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.metrics {
            w.write_record([
                r.epoch.to_string(),
                r.episodes.to_string(),
                r.intrinsic_reward_mean.to_string(),
                opt(r.lambda),
                opt(r.constraint_violation_rate),
                r.coverage_agent.to_string(),
                r.coverage_block.to_string(),
                opt(r.density_nll),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes the config echo, metrics, timings, stage log, snapshots and
    /// evaluation trajectories under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir)?;
        let mut echo = serde_json::to_value(&self.config)?;
        echo["seeds"] = serde_json::json!([self.seed]);
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&echo)?)?;
        self.initial.save(&dir.join(SNAPSHOT_INITIAL))?;
        if let Some(last) = &self.last {
            fs::write(dir.join("metrics.csv"), self.metrics_csv()?)?;
            let mut t = fs::File::create(dir.join("timings.csv"))?;
            writeln!(t, "epoch,unix_ms")?;
            for (e, ms) in &self.timings {
                writeln!(t, "{e},{ms}")?;
            }
            let mut ev = fs::File::create(dir.join("events.log"))?;
            for e in &self.events {
                writeln!(ev, "{} {}", e.epoch, serde_json::to_string(&e.stage)?.trim_matches('"'))?;
            }
            last.save(&dir.join(SNAPSHOT_FINAL))?;
            write_trajectories(fs::File::create(dir.join("trajectories.csv"))?, &self.trajectories)?;
        }
        Ok(())
    }
}

/// Learners other than the policy.
struct RewardModels {
    phi: Option<PhiNet>,
    dual: DualState,
    density: Option<CondGaussian>,
    normalizer: StateNormalizer,
    discriminator: Option<Discriminator>,
    ensemble: Option<DynEnsemble>,
}

impl RewardModels {
    fn new(cfg: &RunConfig, in_dim: usize, obs_dim: usize, action_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self, TrainError> {
        let hidden = cfg.hidden();
        let spec = cfg.skill_spec();
        let mut m = RewardModels {
            phi: None,
            dual: DualState::new(cfg.lambda_init, cfg.epsilon),
            density: None,
            normalizer: StateNormalizer::None,
            discriminator: None,
            ensemble: None,
        };
        match cfg.method {
            Method::Csd | Method::Lsd | Method::LsdPreset | Method::LsdNorm => {
                m.phi = Some(PhiNet::new(in_dim, &hidden, spec.vector_len(), rng));
                if cfg.method == Method::Csd {
                    m.density = Some(CondGaussian::new(in_dim, &hidden, cfg.density_normalize, rng));
                }
                if cfg.method == Method::LsdNorm {
                    m.normalizer = StateNormalizer::ema(in_dim, cfg.ema_momentum);
                }
            }
            Method::Diayn => {
                m.discriminator = Some(Discriminator::new(in_dim, &hidden, spec, rng));
            }
            Method::Disagreement => {
                m.ensemble = Some(DynEnsemble::new(cfg.ensemble_size, obs_dim, action_dim, &hidden, rng)?);
            }
        }
        Ok(m)
    }

    /// Unscaled intrinsic rewards for `batch` (masked states in `s`, `s_next`).
    fn rewards(&self, method: Method, spec: &SkillSpec, masked: &Masked, batch: &TransitionBatch) -> Result<Vec<f64>, IntrinsicError> {
        match method {
            Method::Diayn => diayn_rewards(self.discriminator.as_ref().expect("diayn model"), spec, &masked.s_next, &batch.z),
            Method::Disagreement => disagreement_rewards(self.ensemble.as_ref().expect("ensemble"), &batch.s, &batch.a),
            _ => dsd_rewards(self.phi.as_ref().expect("phi"), &masked.s, &masked.s_next, &batch.z),
        }
    }
}

struct Masked {
    s: Tensor,
    s_next: Tensor,
}

fn mask(batch: &TransitionBatch, cols: Option<&[usize]>) -> Masked {
    match cols {
        Some(c) => Masked {
            s: batch.s.select_cols(c),
            s_next: batch.s_next.select_cols(c),
        },
        None => Masked {
            s: batch.s.clone(),
            s_next: batch.s_next.clone(),
        },
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const INIT_STREAM: u64 = 1 << 62;
const UPDATE_STREAM: u64 = 2 << 62;
const EVAL_STREAM: u64 = 3 << 62;

/// Seed of the `episode`-th rollout in `epoch`, independent of every other
/// episode's stream.
pub fn episode_seed(seed: u64, epoch: usize, episode: usize) -> u64 {
    rng_for(seed, ((epoch as u64) << 16) | episode as u64).next_u64()
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis())
}

fn ensure_finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

/// Uniform random actions, ignoring the skill.
pub fn uniform_policy(max_action: f64) -> impl FnMut(&[f64], &[f64], &mut ChaCha8Rng) -> Vec<f64> {
    move |_: &[f64], _: &[f64], rng: &mut ChaCha8Rng| {
        vec![rng.gen_range(-max_action..=max_action), rng.gen_range(-max_action..=max_action)]
    }
}

fn sample_rows(batch: &TransitionBatch, n: usize, rng: &mut ChaCha8Rng) -> TransitionBatch {
    if batch.len() <= n {
        return batch.clone();
    }
    let pick: Vec<usize> = (0..n).map(|_| rng.gen_range(0..batch.len())).collect();
    let rows = |t: &Tensor| Tensor::from_rows(&pick.iter().map(|&i| t.row_slice(i).to_vec()).collect::<Vec<_>>()).expect("rows");
    TransitionBatch {
        s: rows(&batch.s),
        a: rows(&batch.a),
        s_next: rows(&batch.s_next),
        z: rows(&batch.z),
        done: pick.iter().map(|&i| batch.done[i]).collect(),
    }
}

/// Runs a full training loop. See [`train_with_progress`].
pub fn train(cfg: &RunConfig, seed: u64) -> Result<RunArtifacts, TrainError> {
    train_with_progress(cfg, seed, |_| {})
}

/// Each epoch: collect episodes with a fixed skill per episode, then update
/// the reward models on that epoch's transitions (density fit, then phi and
/// lambda for distance methods; discriminator or ensemble otherwise), then
/// run SAC on replayed transitions with freshly recomputed rewards.
pub fn train_with_progress(
    cfg: &RunConfig,
    seed: u64,
    mut progress: impl FnMut(&MetricsRow),
) -> Result<RunArtifacts, TrainError> {
    cfg.validate()?;
    let env = cfg.build_env()?;
    let spec = cfg.skill_spec();
    let obs_dim = env.obs_dim();
    let mask_cols: Option<Vec<usize>> = cfg.state_mask.clone();
    let in_dim = mask_cols.as_ref().map_or(obs_dim, Vec::len);
    let coef = cfg.reward_coef();
    let n_steps = cfg.grad_steps_per_epoch();
    let warmup = cfg.warmup_epochs();

    let mut init_rng = rng_for(seed, INIT_STREAM);
    let mut agent = SacAgent::new(obs_dim, spec.vector_len(), env.action_dim(), env.max_action(), cfg.sac_config(), &mut init_rng);
    let mut models = RewardModels::new(cfg, in_dim, obs_dim, env.action_dim(), &mut init_rng)?;
    if cfg.method == Method::LsdPreset {
        let mut states = Vec::new();
        let mut random = uniform_policy(env.max_action());
        for k in 0..cfg.preset_episodes {
            let z = sample_skill(&spec, &mut init_rng);
            let ep = rollout(env.as_ref(), &mut random, &z, cfg.episode_length, init_rng.next_u64() ^ k as u64)?;
            for o in crate::envs::observations(&ep) {
                states.push(match &mask_cols {
                    Some(c) => c.iter().map(|&i| o[i]).collect(),
                    None => o,
                });
            }
        }
        models.normalizer = StateNormalizer::preset_from_states(&states);
    }

    let snapshot = |agent: &SacAgent, models: &RewardModels, epoch: usize| Snapshot {
        config: cfg.clone(),
        seed,
        epoch,
        agent: agent.clone(),
        phi: models.phi.clone(),
        dual: models.phi.as_ref().map(|_| models.dual),
        density: models.density.clone(),
        normalizer: models.phi.as_ref().map(|_| models.normalizer.clone()),
        discriminator: models.discriminator.clone(),
        ensemble: models.ensemble.clone(),
    };
    let initial = snapshot(&agent, &models, 0);

    let mut buffer = ReplayBuffer::new(cfg.buffer_size);
    let (agent_dims, block_dims): (Vec<usize>, Option<Vec<usize>>) = match cfg.env {
        EnvKind::PointPush => (PointPush::AGENT_DIMS.to_vec(), Some(PointPush::BLOCK_DIMS.to_vec())),
        EnvKind::GraphMdp => ((0..obs_dim).collect(), None),
    };
    let mut cov_agent = CoverageGrid::new(&agent_dims, cfg.coverage_bin);
    let mut cov_block = block_dims.map(|d| CoverageGrid::new(&d, cfg.coverage_bin));

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut timings = Vec::with_capacity(cfg.epochs);
    let mut events = Vec::new();
    let mut episodes = 0usize;

    for epoch in 0..cfg.epochs {
        let nonfinite = |stage: Stage, quantity: &'static str, agent: &SacAgent, models: &RewardModels| TrainError::NonFinite {
            epoch,
            stage,
            quantity,
            snapshot: Box::new(snapshot(agent, models, epoch)),
        };

        // collect
        let mut fresh = Vec::with_capacity(cfg.episodes_per_epoch * cfg.episode_length);
        for ep in 0..cfg.episodes_per_epoch {
            let ep_seed = episode_seed(seed, epoch, ep);
            let mut skill_rng = rng_for(ep_seed, 1);
            let z = sample_skill(&spec, &mut skill_rng);
            let traj = rollout(env.as_ref(), &mut Explorer(&agent), &z, cfg.episode_length, ep_seed)?;
            for o in crate::envs::observations(&traj) {
                cov_agent.visit(&o);
                if let Some(g) = cov_block.as_mut() {
                    g.visit(&o);
                }
            }
            fresh.extend(traj);
            episodes += 1;
        }
        buffer.extend(fresh.iter().cloned());
        events.push(Event { epoch, stage: Stage::Collect });
        let epoch_batch = TransitionBatch::from_transitions(fresh.iter());

        let mut rng = rng_for(seed, UPDATE_STREAM | epoch as u64);
        let mut density_nll = None;
        let mut violation = None;

        if let Some(density) = models.density.as_mut() {
            let mut last = 0.0;
            for _ in 0..n_steps {
                let b = sample_rows(&epoch_batch, cfg.batch_size, &mut rng);
                let m = mask(&b, mask_cols.as_deref());
                last = density.fit_step(&m.s, &m.s_next, cfg.lr)?;
            }
            if !last.is_finite() {
                return Err(nonfinite(Stage::DensityFit, "density nll", &agent, &models));
            }
            density_nll = Some(last);
            events.push(Event { epoch, stage: Stage::DensityFit });
        }
        if cfg.method == Method::LsdNorm {
            let m = mask(&epoch_batch, mask_cols.as_deref());
            models.normalizer.observe(&m.s, &m.s_next);
            events.push(Event { epoch, stage: Stage::NormalizerUpdate });
        }
        if cfg.method.is_dsd() {
            let mut rate = 0.0;
            for _ in 0..n_steps {
                let b = sample_rows(&epoch_batch, cfg.batch_size, &mut rng);
                let m = mask(&b, mask_cols.as_deref());
                let d = match &models.density {
                    Some(q) => q.distances(&m.s, &m.s_next)?,
                    None => Euclidean(&models.normalizer).distances(&m.s, &m.s_next)?,
                };
                let phi = models.phi.as_mut().expect("phi");
                let step = phi_update(phi, &models.dual, &m.s, &m.s_next, &b.z, &d, cfg.lr)?;
                if !step.loss.is_finite() || !ensure_finite(&step.slacks) {
                    return Err(nonfinite(Stage::PhiUpdate, "phi loss", &agent, &models));
                }
                models.dual = lambda_update(&models.dual, &step.slacks, cfg.lr_lambda);
                rate = step.violation_rate;
            }
            violation = Some(rate);
            events.push(Event { epoch, stage: Stage::PhiUpdate });
            events.push(Event { epoch, stage: Stage::LambdaUpdate });
        }
        if let Some(disc) = models.discriminator.as_mut() {
            for _ in 0..n_steps {
                let b = sample_rows(&epoch_batch, cfg.batch_size, &mut rng);
                let m = mask(&b, mask_cols.as_deref());
                let loss = disc.update(&m.s_next, &b.z, cfg.lr)?;
                if !loss.is_finite() {
                    return Err(nonfinite(Stage::DiscriminatorUpdate, "discriminator loss", &agent, &models));
                }
            }
            events.push(Event { epoch, stage: Stage::DiscriminatorUpdate });
        }
        if let Some(ens) = models.ensemble.as_mut() {
            for _ in 0..n_steps {
                let b = sample_rows(&epoch_batch, cfg.batch_size, &mut rng);
                let loss = ens.fit_step(&b.s, &b.a, &b.s_next, cfg.lr)?;
                if !loss.is_finite() {
                    return Err(nonfinite(Stage::EnsembleFit, "ensemble loss", &agent, &models));
                }
            }
            events.push(Event { epoch, stage: Stage::EnsembleFit });
        }

        if epoch >= warmup {
            let mut updated = false;
            for _ in 0..n_steps {
                let outcome = sac_update(&mut agent, &buffer, cfg.batch_size, &mut rng, |b: &TransitionBatch| {
                    let m = mask(b, mask_cols.as_deref());
                    models
                        .rewards(cfg.method, &spec, &m, b)
                        .map(|r| r.into_iter().map(|x| coef * x).collect::<Vec<f64>>())
                })?;
                if let UpdateOutcome::Updated(l) = outcome {
                    if ![l.critic, l.actor, l.mean_reward].iter().all(|v| v.is_finite()) {
                        return Err(nonfinite(Stage::SacUpdate, "sac loss", &agent, &models));
                    }
                    updated = true;
                }
            }
            if updated {
                events.push(Event { epoch, stage: Stage::SacUpdate });
            }
        }

        let m = mask(&epoch_batch, mask_cols.as_deref());
        let rewards = models.rewards(cfg.method, &spec, &m, &epoch_batch)?;
        let intrinsic_reward_mean = coef * rewards.iter().sum::<f64>() / rewards.len().max(1) as f64;
        let row = MetricsRow {
            epoch,
            episodes,
            intrinsic_reward_mean,
            lambda: models.phi.as_ref().map(|_| models.dual.lambda),
            constraint_violation_rate: violation,
            coverage_agent: cov_agent.count(),
            coverage_block: cov_block.as_ref().map_or(0, CoverageGrid::count),
            density_nll,
        };
        progress(&row);
        metrics.push(row);
        timings.push((epoch, now_ms()));
    }

    let (last, trajectories) = if cfg.epochs > 0 {
        let mut eval_rng = rng_for(seed, EVAL_STREAM);
        let trajs = eval::eval_skills(&agent, env.as_ref(), &spec, cfg.eval_skills, cfg.episode_length, eval_rng.next_u64(), false)?;
        (Some(snapshot(&agent, &models, cfg.epochs)), trajs)
    } else {
        (None, Vec::new())
    };

    Ok(RunArtifacts {
        config: cfg.clone(),
        seed,
        metrics,
        timings,
        events,
        initial,
        last,
        trajectories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(method: Method) -> RunConfig {
        RunConfig {
            method,
            epochs: 3,
            batch_size: 32,
            hidden_width: 16,
            episode_length: 20,
            warmup_epochs: Some(0),
            eval_skills: 2,
            preset_episodes: 2,
            ..RunConfig::default()
        }
    }

    #[test]
    fn zero_epochs_leaves_only_echo_and_initial_snapshot() {
        let cfg = RunConfig {
            epochs: 0,
            ..tiny(Method::Csd)
        };
        let art = train(&cfg, 4).unwrap();
        assert!(art.metrics.is_empty() && art.events.is_empty() && art.last.is_none());
        let dir = tempfile::tempdir().unwrap();
        art.write_to(dir.path()).unwrap();
        let mut names: Vec<String> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names, vec!["config.json".to_string(), SNAPSHOT_INITIAL.to_string()]);
    }

    #[test]
    fn two_csd_epochs_are_bit_identical() {
        let cfg = RunConfig {
            epochs: 2,
            ..tiny(Method::Csd)
        };
        let a = train(&cfg, 11).unwrap();
        let b = train(&cfg, 11).unwrap();
        assert_eq!(a.metrics_csv().unwrap(), b.metrics_csv().unwrap());
        assert_eq!(a.last, b.last);
        let c = train(&cfg, 12).unwrap();
        assert_ne!(a.last, c.last);
    }

    #[test]
    fn stages_follow_algorithm_order() {
        let art = train(&tiny(Method::Csd), 0).unwrap();
        let order = [
            Stage::Collect,
            Stage::DensityFit,
            Stage::PhiUpdate,
            Stage::LambdaUpdate,
            Stage::SacUpdate,
        ];
        for epoch in 1..3 {
            let stages: Vec<Stage> = art.events.iter().filter(|e| e.epoch == epoch).map(|e| e.stage).collect();
            assert_eq!(stages, order);
        }
        // events are globally sorted by epoch
        assert!(art.events.windows(2).all(|w| w[0].epoch <= w[1].epoch));
    }

    #[test]
    fn warmup_delays_policy_updates() {
        let cfg = RunConfig {
            warmup_epochs: Some(2),
            ..tiny(Method::Csd)
        };
        let art = train(&cfg, 0).unwrap();
        let sac_epochs: Vec<usize> = art.events.iter().filter(|e| e.stage == Stage::SacUpdate).map(|e| e.epoch).collect();
        assert_eq!(sac_epochs, vec![2]);
        assert_eq!(RunConfig::default().warmup_epochs(), 100);
        let lsd = RunConfig {
            method: Method::Lsd,
            ..RunConfig::default()
        };
        assert_eq!(lsd.warmup_epochs(), 0);
    }

    #[test]
    fn every_method_runs() {
        for method in [
            Method::Csd,
            Method::Lsd,
            Method::LsdPreset,
            Method::LsdNorm,
            Method::Diayn,
            Method::Disagreement,
        ] {
            let art = train(&tiny(method), 1).unwrap();
            assert_eq!(art.metrics.len(), 3, "{method:?}");
            assert!(art.metrics.iter().all(|r| r.intrinsic_reward_mean.is_finite()));
            assert_eq!(art.metrics[0].lambda.is_some(), method.is_dsd());
            assert_eq!(art.metrics[0].density_nll.is_some(), method == Method::Csd);
        }
        let discrete = RunConfig {
            skill_kind: SkillKind::Discrete,
            skill_count: 4,
            ..tiny(Method::Diayn)
        };
        train(&discrete, 2).unwrap();
        let graph = RunConfig {
            env: EnvKind::GraphMdp,
            skill_kind: SkillKind::Discrete,
            skill_count: 3,
            ..tiny(Method::Csd)
        };
        let art = train(&graph, 3).unwrap();
        assert!(art.metrics.last().unwrap().coverage_agent >= 1);
        assert_eq!(art.metrics.last().unwrap().coverage_block, 0);
    }

    #[test]
    fn coverage_never_decreases() {
        let cfg = RunConfig {
            epochs: 6,
            ..tiny(Method::Lsd)
        };
        let art = train(&cfg, 5).unwrap();
        for w in art.metrics.windows(2) {
            assert!(w[0].coverage_agent <= w[1].coverage_agent);
            assert!(w[0].coverage_block <= w[1].coverage_block);
            assert_eq!(w[1].episodes, w[0].episodes + cfg.episodes_per_epoch);
        }
    }

    #[test]
    fn mask_only_reaches_reward_models() {
        let cfg = RunConfig {
            state_mask: Some(vec![2, 3]),
            ..tiny(Method::Csd)
        };
        let art = train(&cfg, 6).unwrap();
        let last = art.last.unwrap();
        assert_eq!(last.phi.unwrap().net().input_width(), 2);
        assert_eq!(last.density.unwrap().state_dim(), 2);
        assert_eq!(last.agent.actor().input_width(), 4 + 2);
        let bad = RunConfig {
            state_mask: Some(vec![4]),
            ..tiny(Method::Csd)
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_parsing_and_echo() {
        assert!(RunConfig::from_json(r#"{"method": "lsd", "bogus": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"lr": -1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"tau": 1.5}"#).is_err());
        let cfg = RunConfig::from_json(r#"{"method": "lsd_norm", "epochs": 3}"#).unwrap();
        assert_eq!(cfg.method, Method::LsdNorm);
        assert_eq!(cfg.reward_coef(), 500.0);
        assert_eq!(RunConfig::from_json(r#"{"method": "diayn"}"#).unwrap().reward_coef(), 1500.0);

        let cfg = RunConfig {
            epochs: 2,
            ..tiny(Method::Csd)
        };
        let art = train(&cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        art.write_to(dir.path()).unwrap();
        let echo_text = fs::read_to_string(dir.path().join("config.json")).unwrap();
        let echo: serde_json::Value = serde_json::from_str(&echo_text).unwrap();
        let fields = serde_json::to_value(RunConfig::default()).unwrap();
        for key in fields.as_object().unwrap().keys() {
            assert!(echo.get(key).is_some(), "{key} missing from echo");
        }
        let again = train(&RunConfig::from_json(&echo_text).unwrap(), 9).unwrap();
        assert_eq!(
            fs::read_to_string(dir.path().join("metrics.csv")).unwrap(),
            again.metrics_csv().unwrap()
        );
        let header = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(header.lines().next().unwrap(), METRICS_HEADER.join(","));
        let timings = fs::read_to_string(dir.path().join("timings.csv")).unwrap();
        assert_eq!(timings.lines().count(), 3);
        let snap = Snapshot::load(&dir.path().join(SNAPSHOT_FINAL)).unwrap();
        assert_eq!(Some(snap), art.last);
    }

    #[test]
    fn divergence_aborts_with_snapshot() {
        let cfg = RunConfig {
            lr: 1e300,
            ..tiny(Method::Csd)
        };
        match train(&cfg, 0) {
            Err(TrainError::NonFinite { snapshot, stage, .. }) => {
                assert_eq!(snapshot.config, cfg);
                assert!(matches!(stage, Stage::DensityFit | Stage::PhiUpdate | Stage::SacUpdate));
            }
            other => panic!("expected a non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn episode_streams_are_distinct() {
        let mut seen = std::collections::BTreeSet::new();
        for epoch in 0..50 {
            for ep in 0..4 {
                assert!(seen.insert(episode_seed(7, epoch, ep)));
            }
        }
        assert_eq!(episode_seed(7, 3, 1), episode_seed(7, 3, 1));
    }
}
