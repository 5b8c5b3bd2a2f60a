//! Deterministic-policy-gradient learner with target networks and replay.

mod checkpoint;
mod mlp;
mod replay;

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION, MAGIC,
};
pub use mlp::{flatten, hstack, Adam, ForwardCache, Head, Layer, Mlp};
pub use replay::{Experience, ReplayBuffer};

use crate::env::{Controller, Observation};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("need {need} samples in the replay buffer, have {have}")]
    InsufficientSamples { have: usize, need: usize },
    #[error("invalid agent config: {0}")]
    Config(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetUpdate {
    /// Copy online into target every `period` updates.
    HardPeriodic { period: u64 },
    /// `θ′ ← τθ + (1 − τ)θ′` after every update.
    Soft { tau: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Ou,
    Gaussian,
}

/// Action-space exploration noise. `sigma_*` are fractions of the half
/// action range `(u − v)/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    pub sigma_start: f64,
    pub sigma_end: f64,
    pub decay_episodes: usize,
    /// Mean-reversion rate per control step of the Ornstein-Uhlenbeck process.
    pub ou_theta: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            kind: NoiseKind::Gaussian,
            sigma_start: 0.3,
            sigma_end: 0.02,
            decay_episodes: 300,
            ou_theta: 0.15,
        }
    }
}

impl NoiseConfig {
    /// Linear decay from `sigma_start` to `sigma_end`, then constant.
    pub fn sigma(&self, episode: usize) -> f64 {
        if self.decay_episodes == 0 || episode >= self.decay_episodes {
            return self.sigma_end;
        }
        let f = episode as f64 / self.decay_episodes as f64;
        self.sigma_start + (self.sigma_end - self.sigma_start) * f
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub gamma: f64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    /// Transitions collected before the first update.
    pub warmup: usize,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub target_update: TargetUpdate,
    pub noise: NoiseConfig,
    /// `[v, u]`, pu.
    pub action_bounds: [f64; 2],
    pub hidden: Vec<usize>,
    pub final_init: f64,
    /// Multiplier applied to rewards before they enter the replay buffer.
    pub reward_scale: f64,
    /// Weight of the `mean((a / half_range)²)` penalty subtracted from the
    /// actor objective; keeps the policy off the bounds unless the critic
    /// shows a clear gain.
    pub action_l2: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            buffer_capacity: 100_000,
            batch_size: 64,
            warmup: 1_000,
            lr_actor: 1e-4,
            lr_critic: 1e-3,
            target_update: TargetUpdate::Soft { tau: 0.005 },
            noise: NoiseConfig::default(),
            action_bounds: [-0.2, 0.2],
            hidden: vec![64, 64],
            final_init: 3e-3,
            reward_scale: 0.01,
            action_l2: 0.1,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: String| Err(AgentError::Config(m));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return bad(format!(
                "batch {} with buffer capacity {}",
                self.batch_size, self.buffer_capacity
            ));
        }
        if !(self.lr_actor > 0.0 && self.lr_critic > 0.0) {
            return bad("learning rates must be positive".into());
        }
        match self.target_update {
            TargetUpdate::Soft { tau } if !(tau > 0.0 && tau <= 1.0) => {
                return bad(format!("tau {tau} outside (0, 1]"))
            }
            TargetUpdate::HardPeriodic { period: 0 } => {
                return bad("hard target period must be ≥ 1".into())
            }
            _ => {}
        }
        let n = &self.noise;
        if !(n.sigma_start >= 0.0 && n.sigma_end >= 0.0 && (0.0..=1.0).contains(&n.ou_theta)) {
            return bad(format!("noise {n:?}"));
        }
        let [v, u] = self.action_bounds;
        if !(v < u) {
            return bad(format!("action bounds [{v}, {u}]"));
        }
        if !(self.reward_scale > 0.0) {
            return bad(format!(
                "reward_scale {} must be positive",
                self.reward_scale
            ));
        }
        if !(self.action_l2 >= 0.0) {
            return bad(format!("action_l2 {} must be non-negative", self.action_l2));
        }
        if self.hidden.contains(&0) {
            return bad("hidden layers must be non-empty".into());
        }
        Ok(())
    }
}

/// Actor, critic, their targets and optimizer state.
#[derive(Debug, Clone)]
pub struct Agent {
    pub config: AgentConfig,
    pub actor: Mlp,
    pub critic: Mlp,
    pub actor_target: Mlp,
    pub critic_target: Mlp,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
    pub buffer: ReplayBuffer,
    /// Critic updates performed so far.
    pub updates: u64,
    rng: ChaCha8Rng,
    noise_state: Vec<f64>,
}

impl Agent {
    pub fn new(
        obs_dim: usize,
        act_dim: usize,
        config: AgentConfig,
        seed: u64,
    ) -> Result<Self, AgentError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [v, u] = config.action_bounds;
        let dims = |input: usize, output: usize| {
            std::iter::once(input)
                .chain(config.hidden.iter().copied())
                .chain(std::iter::once(output))
                .collect::<Vec<_>>()
        };
        let actor = Mlp::new(
            &dims(obs_dim, act_dim),
            Head::TanhScaled { lo: v, hi: u },
            Some(config.final_init),
            &mut rng,
        );
        let critic = Mlp::new(
            &dims(obs_dim + act_dim, 1),
            Head::Identity,
            Some(config.final_init),
            &mut rng,
        );
        Ok(Self::from_parts(config, actor, critic, rng))
    }

    fn from_parts(config: AgentConfig, actor: Mlp, critic: Mlp, rng: ChaCha8Rng) -> Self {
        Self {
            actor_opt: Adam::new(&actor, config.lr_actor),
            critic_opt: Adam::new(&critic, config.lr_critic),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            buffer: ReplayBuffer::new(config.buffer_capacity),
            noise_state: vec![0.0; actor.output_dim()],
            actor,
            critic,
            config,
            updates: 0,
            rng,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.actor.output_dim()
    }

    /// Fails unless the networks match the given observation and action sizes.
    pub fn check_dims(&self, obs_dim: usize, act_dim: usize) -> Result<(), AgentError> {
        if self.obs_dim() != obs_dim {
            return Err(AgentError::Shape {
                expected: obs_dim,
                got: self.obs_dim(),
            });
        }
        if self.act_dim() != act_dim {
            return Err(AgentError::Shape {
                expected: act_dim,
                got: self.act_dim(),
            });
        }
        Ok(())
    }

    /// Reseeds the exploration and sampling stream.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Clears the temporally correlated noise at an episode boundary.
    pub fn begin_episode(&mut self) {
        self.noise_state.iter_mut().for_each(|x| *x = 0.0);
    }

    pub fn q_value(&self, s: &[f64], a: &[f64]) -> Result<f64, AgentError> {
        let x: Vec<f64> = s.iter().chain(a).copied().collect();
        Ok(self.critic.forward_one(&x)?[0])
    }

    pub fn greedy(&self, s: &[f64]) -> Result<Vec<f64>, AgentError> {
        self.actor.forward_one(s)
    }

    /// `μ(s)` plus scheduled exploration noise when `explore`, clipped to the
    /// action bounds.
    pub fn select_action(
        &mut self,
        s: &[f64],
        episode: usize,
        explore: bool,
    ) -> Result<Vec<f64>, AgentError> {
        let mut a = self.greedy(s)?;
        if !explore {
            return Ok(a);
        }
        let [v, u] = self.config.action_bounds;
        let n = self.config.noise;
        let sigma = n.sigma(episode) * 0.5 * (u - v);
        for (ai, x) in a.iter_mut().zip(&mut self.noise_state) {
            let z: f64 = self.rng.sample(StandardNormal);
            let noise = match n.kind {
                NoiseKind::Ou => {
                    *x += -n.ou_theta * *x + sigma * z;
                    *x
                }
                NoiseKind::Gaussian => sigma * z,
            };
            *ai = (*ai + noise).clamp(v, u);
        }
        Ok(a)
    }

    pub fn remember(&mut self, e: Experience) -> Result<(), AgentError> {
        self.buffer.push(e)
    }

    /// Critic, actor and target updates on one sampled minibatch. Returns the
    /// critic loss, or `None` while the buffer is warming up.
    pub fn train_step(&mut self) -> Result<Option<f64>, AgentError> {
        let m = self.config.batch_size;
        if self.buffer.len() < m.max(self.config.warmup) {
            return Ok(None);
        }
        let idx = self.buffer.sample_indices(m, &mut self.rng)?;
        let batch = self.buffer.batch(&idx);
        let loss = self.critic_update(&batch)?;
        self.actor_update(&batch)?;
        self.update_targets();
        if !loss.is_finite() {
            return Err(AgentError::NonFinite("critic loss"));
        }
        Ok(Some(loss))
    }

    /// Bellman targets `r + γ(1 − done)·Q′(s′, μ′(s′))` from the target networks.
    pub fn targets(&self, batch: &Batch) -> Result<Array1<f64>, AgentError> {
        let a_next = self.actor_target.forward(batch.s_next.view())?;
        let q_next = self
            .critic_target
            .forward(hstack(batch.s_next.view(), a_next.view()).view())?;
        let g = self.config.gamma;
        Ok(Array1::from_shape_fn(batch.len(), |i| {
            batch.r[i]
                + if batch.done[i] {
                    0.0
                } else {
                    g * q_next[[i, 0]]
                }
        }))
    }

    /// Gradient of the mean squared Bellman error w.r.t. the critic, and the
    /// loss itself.
    pub fn critic_gradient(&self, batch: &Batch) -> Result<(Vec<Layer>, f64), AgentError> {
        let y = self.targets(batch)?;
        let (q, cache) = self
            .critic
            .forward_cached(hstack(batch.s.view(), batch.a.view()).view())?;
        let m = batch.len() as f64;
        let err = &y - &q.column(0);
        let loss = err.iter().map(|e| e * e).sum::<f64>() / m;
        let upstream = (err.mapv(|e| -2.0 * e / m)).insert_axis(ndarray::Axis(1));
        Ok((self.critic.backward(&cache, upstream.view()).0, loss))
    }

    /// One optimizer step on the critic; returns the pre-update loss.
    pub fn critic_update(&mut self, batch: &Batch) -> Result<f64, AgentError> {
        let (grads, loss) = self.critic_gradient(batch)?;
        self.critic_opt.step(&mut self.critic, &grads);
        self.updates += 1;
        Ok(loss)
    }

    /// Gradient of the sampled objective
    /// `(1/M) Σ_i [Q(s_i, μ(s_i)) − λ Σ_j (μ_j(s_i) / h)²]` w.r.t. the actor
    /// parameters, with `λ = action_l2` and `h` the half action range.
    pub fn actor_gradient(&self, s: ArrayView2<f64>) -> Result<Vec<Layer>, AgentError> {
        let (a, actor_cache) = self.actor.forward_cached(s)?;
        let (_, critic_cache) = self.critic.forward_cached(hstack(s, a.view()).view())?;
        let m = s.nrows() as f64;
        let upstream = Array2::from_elem((s.nrows(), 1), 1.0 / m);
        let (_, dx) = self.critic.backward(&critic_cache, upstream.view());
        let mut da = dx.slice(s![.., s.ncols()..]).to_owned();
        if self.config.action_l2 > 0.0 {
            let [v, u] = self.config.action_bounds;
            let h = 0.5 * (u - v);
            da.scaled_add(-2.0 * self.config.action_l2 / (h * h * m), &a);
        }
        Ok(self.actor.backward(&actor_cache, da.view()).0)
    }

    /// One ascent step on the actor with the critic frozen; returns the
    /// gradient norm.
    pub fn actor_update(&mut self, batch: &Batch) -> Result<f64, AgentError> {
        let grads = self.actor_gradient(batch.s.view())?;
        let norm = flatten(&grads).iter().map(|g| g * g).sum::<f64>().sqrt();
        let descent: Vec<Layer> = grads
            .into_iter()
            .map(|l| Layer { w: -l.w, b: -l.b })
            .collect();
        self.actor_opt.step(&mut self.actor, &descent);
        Ok(norm)
    }

    pub fn update_targets(&mut self) {
        match self.config.target_update {
            TargetUpdate::Soft { tau } => {
                self.actor_target.blend_from(&self.actor, tau);
                self.critic_target.blend_from(&self.critic, tau);
            }
            TargetUpdate::HardPeriodic { period } => {
                if self.updates.is_multiple_of(period) {
                    self.actor_target = self.actor.clone();
                    self.critic_target = self.critic.clone();
                }
            }
        }
    }

    pub fn policy(&self, speed_scale: f64) -> GreedyPolicy {
        GreedyPolicy {
            actor: self.actor.clone(),
            speed_scale,
        }
    }
}

/// Minibatch in matrix form.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub s: Array2<f64>,
    pub a: Array2<f64>,
    pub r: Array1<f64>,
    pub s_next: Array2<f64>,
    pub done: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    /// Stacks `items` in order; all must share the sizes of the first.
    pub fn from_experiences(items: &[Experience]) -> Self {
        let rows = |f: &dyn Fn(&Experience) -> &Vec<f64>| {
            let width = items.first().map_or(0, |e| f(e).len());
            Array2::from_shape_fn((items.len(), width), |(i, j)| f(&items[i])[j])
        };
        Self {
            s: rows(&|e| &e.s),
            a: rows(&|e| &e.a),
            r: items.iter().map(|e| e.r).collect(),
            s_next: rows(&|e| &e.s_next),
            done: items.iter().map(|e| e.done).collect(),
        }
    }
}

/// Noise-free actor used for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyPolicy {
    pub actor: Mlp,
    pub speed_scale: f64,
}

impl Controller for GreedyPolicy {
    fn act(&mut self, obs: &Observation) -> Vec<f64> {
        self.actor
            .forward_one(&obs.features(self.speed_scale))
            .expect("policy sized for the environment")
    }
}
