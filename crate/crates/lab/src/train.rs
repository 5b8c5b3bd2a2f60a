use std::fs::File;
use std::path::{Path, PathBuf};

use lfo_core::agent::{save_checkpoint, Agent};
use lfo_core::env::EnvConfig;
use lfo_core::metrics::{success_rate, EpisodeRecord};
use lfo_core::train::{train, TrainConfig, TrainError};
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::ensure_dir;
use crate::error::LabError;

pub const TRAINING_LOG: &str = "training_log.csv";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.lfo";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.lfo";

pub struct SeedRun {
    pub seed: u64,
    pub dir: PathBuf,
    pub records: Vec<EpisodeRecord>,
    pub agent: Agent,
}

fn train_config(cfg: &ExperimentConfig, seed: u64, episodes: usize) -> TrainConfig {
    TrainConfig {
        episodes,
        seed,
        log_wall_time: cfg.log_wall_time,
        updates_per_step: cfg.updates_per_step,
    }
}

/// Trains one seed in memory without touching the disk.
pub fn train_quiet(
    cfg: &ExperimentConfig,
    env: &EnvConfig,
    seed: u64,
    episodes: usize,
) -> Result<(Vec<EpisodeRecord>, Agent), LabError> {
    let out = train(
        env,
        &cfg.agent,
        &train_config(cfg, seed, episodes),
        |_, _| Ok(()),
    )?;
    Ok((out.records, out.agent))
}

/// Trains one seed into `<out>/seed_<seed>/`: the episode log, periodic
/// checkpoints, the best checkpoint by trailing success and the final one.
pub fn train_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun, LabError> {
    let env = cfg.env_config()?;
    let dir = cfg.seed_dir(seed);
    ensure_dir(&dir)?;
    let window = cfg.success_window;
    let every = cfg.checkpoint_every;
    let mut seen: Vec<EpisodeRecord> = Vec::with_capacity(cfg.episodes);
    let mut best = f64::NEG_INFINITY;
    let hook_err = |e: lfo_core::agent::AgentError| TrainError::Hook(e.to_string());
    let out = train(
        &env,
        &cfg.agent,
        &train_config(cfg, seed, cfg.episodes),
        |record, agent| {
            seen.push(record.clone());
            let n = seen.len();
            if every > 0 && n.is_multiple_of(every) {
                save_checkpoint(agent, dir.join(format!("checkpoint_ep{n:05}.lfo")))
                    .map_err(hook_err)?;
            }
            if n >= window {
                let rate = success_rate(&seen, window).expect("window within records");
                if rate > best {
                    best = rate;
                    save_checkpoint(agent, dir.join(BEST_CHECKPOINT)).map_err(hook_err)?;
                }
            }
            if n.is_multiple_of(50) {
                log::info!(
                    "seed {seed} episode {n} return {:.2} success {}",
                    record.ret,
                    record.success
                );
            }
            Ok(())
        },
    )?;
    save_checkpoint(&out.agent, dir.join(FINAL_CHECKPOINT))?;
    if best == f64::NEG_INFINITY {
        // run shorter than the window
        save_checkpoint(&out.agent, dir.join(BEST_CHECKPOINT))?;
    }
    write_training_log(&dir.join(TRAINING_LOG), &out.records)?;
    Ok(SeedRun {
        seed,
        dir,
        records: out.records,
        agent: out.agent,
    })
}

/// Trains every configured seed; results come back in seed order.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Vec<SeedRun>, LabError> {
    ensure_dir(&cfg.out)?;
    let mut runs = cfg
        .seeds
        .par_iter()
        .map(|&s| train_seed(cfg, s))
        .collect::<Result<Vec<_>, _>>()?;
    runs.sort_by_key(|r| r.seed);
    Ok(runs)
}

pub fn write_training_log(path: &Path, records: &[EpisodeRecord]) -> Result<(), LabError> {
    let file = File::create(path).map_err(LabError::io(format!("create {}", path.display())))?;
    let mut w = csv::Writer::from_writer(file);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()
        .map_err(LabError::io(format!("write {}", path.display())))?;
    Ok(())
}

pub fn read_training_log(path: &Path) -> Result<Vec<EpisodeRecord>, LabError> {
    if !path.exists() {
        return Err(LabError::MissingInput(path.display().to_string()));
    }
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<EpisodeRecord>, _>>()?)
}

/// Mean return over the first and the last `n` episodes.
pub fn leading_trailing_means(records: &[EpisodeRecord], n: usize) -> (f64, f64) {
    let n = n.min(records.len()).max(1);
    let mean = |s: &[EpisodeRecord]| s.iter().map(|r| r.ret).sum::<f64>() / s.len() as f64;
    (mean(&records[..n]), mean(&records[records.len() - n..]))
}
