//! Episode loop that couples the environment and the agent.

use std::time::Instant;

use thiserror::Error;

use crate::agent::{Agent, AgentConfig, AgentError, Experience};
use crate::env::{EnvConfig, EnvError, Environment};
use crate::metrics::EpisodeRecord;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("episode hook failed: {0}")]
    Hook(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub episodes: usize,
    pub seed: u64,
    /// Disable to fill the log with zeros and keep it reproducible.
    pub log_wall_time: bool,
    /// Gradient updates per control step once the buffer is warm.
    pub updates_per_step: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 500,
            seed: 0,
            log_wall_time: false,
            updates_per_step: 1,
        }
    }
}

pub struct TrainOutcome {
    pub records: Vec<EpisodeRecord>,
    pub agent: Agent,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Scenario seed of episode `index` in stream `stream` of run `run`.
pub fn episode_seed(run: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(run) ^ stream) ^ index)
}

pub const TRAIN_STREAM: u64 = 1;
pub const EVAL_STREAM: u64 = 2;

/// Trains from scratch; `hook` runs after every episode with its record.
pub fn train<F>(
    env_config: &EnvConfig,
    agent_config: &AgentConfig,
    tc: &TrainConfig,
    mut hook: F,
) -> Result<TrainOutcome, TrainError>
where
    F: FnMut(&EpisodeRecord, &Agent) -> Result<(), TrainError>,
{
    let mut env = Environment::new(env_config.clone())?;
    let mut agent = Agent::new(
        env.observation_dim(),
        env.action_dim(),
        agent_config.clone(),
        tc.seed,
    )?;
    let scale = env_config.obs_speed_scale;
    let zero = vec![0.0; env.action_dim()];
    let mut records = Vec::with_capacity(tc.episodes);
    for episode in 0..tc.episodes {
        let started = Instant::now();
        agent.begin_episode();
        let mut obs = env.reset(episode_seed(tc.seed, TRAIN_STREAM, episode as u64))?;
        let mut s = obs.features(scale);
        let initial_q = agent.q_value(&s, &agent.greedy(&s)?)?;
        let mut ret = 0.0;
        loop {
            let a = if obs.valid {
                agent.select_action(&s, episode, true)?
            } else {
                zero.clone()
            };
            let step = env.step(&a)?;
            let s_next = step.observation.features(scale);
            if obs.valid {
                agent.remember(Experience {
                    s,
                    a,
                    r: step.reward * agent_config.reward_scale,
                    s_next: s_next.clone(),
                    done: step.info.sync_lost,
                })?;
            }
            for _ in 0..tc.updates_per_step {
                agent.train_step()?;
            }
            ret += step.reward;
            obs = step.observation;
            s = s_next;
            if step.done {
                break;
            }
        }
        let record = EpisodeRecord {
            episode,
            ret,
            success: !env.sync_lost(),
            initial_q,
            wall_time_s: if tc.log_wall_time {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        hook(&record, &agent)?;
        records.push(record);
    }
    Ok(TrainOutcome { records, agent })
}
