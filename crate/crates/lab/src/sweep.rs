use std::cmp::Ordering;

use lfo_core::metrics::success_rate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::ensure_dir;
use crate::error::LabError;
use crate::eval::write_rows;
use crate::train::train_quiet;

pub const SWEEP_RESULTS: &str = "sweep_results.csv";
pub const BEST_CONFIG: &str = "best_config.toml";

/// Episodes per grid point when the sweep section does not set it.
pub const DEFAULT_SWEEP_EPISODES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rank: usize,
    pub point: usize,
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub zeta: f64,
    pub gamma: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub sigma_start: f64,
    /// Trailing success rate averaged over seeds.
    pub success: f64,
    /// Trailing mean return averaged over seeds.
    pub mean_return: f64,
}

pub struct SweepOutput {
    /// Best first.
    pub rows: Vec<SweepRow>,
    pub best: ExperimentConfig,
}

/// Every combination of the swept values, each applied to a copy of `cfg`.
pub fn grid_points(cfg: &ExperimentConfig) -> Result<Vec<ExperimentConfig>, LabError> {
    let s = &cfg.sweep;
    type Setter = fn(&mut ExperimentConfig, f64);
    let axes: Vec<(&Vec<f64>, Setter)> = vec![
        (&s.alpha, |c, v| c.scenario.weights.alpha = v),
        (&s.beta, |c, v| c.scenario.weights.beta = v),
        (&s.eta, |c, v| c.scenario.weights.eta = v),
        (&s.zeta, |c, v| c.scenario.weights.zeta = v),
        (&s.gamma, |c, v| c.agent.gamma = v),
        (&s.lr_actor, |c, v| c.agent.lr_actor = v),
        (&s.lr_critic, |c, v| c.agent.lr_critic = v),
        (&s.sigma_start, |c, v| c.agent.noise.sigma_start = v),
    ];
    let axes: Vec<_> = axes
        .into_iter()
        .filter(|(vals, _)| !vals.is_empty())
        .collect();
    if axes.is_empty() {
        return Err(LabError::Config(
            "sweep grid is empty: give at least one value list".into(),
        ));
    }
    let mut points = vec![cfg.clone()];
    for (vals, set) in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                vals.iter().map(move |&v| {
                    let mut q = p.clone();
                    set(&mut q, v);
                    q
                })
            })
            .collect();
    }
    for p in &mut points {
        p.sweep = Default::default();
        p.validate()?;
    }
    Ok(points)
}

/// Short training per grid point and seed; ranked by trailing success rate,
/// then trailing return, then grid order.
pub fn sweep(cfg: &ExperimentConfig) -> Result<SweepOutput, LabError> {
    let points = grid_points(cfg)?;
    let episodes = cfg
        .sweep
        .episodes
        .unwrap_or(DEFAULT_SWEEP_EPISODES.min(cfg.episodes));
    let window = cfg.success_window.min(episodes);
    let jobs: Vec<(usize, u64)> = (0..points.len())
        .flat_map(|p| cfg.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let scores = jobs
        .par_iter()
        .map(|&(p, seed)| {
            let env = points[p].env_config()?;
            let (records, _) = train_quiet(&points[p], &env, seed, episodes)?;
            let rate = success_rate(&records, window)?;
            let tail = &records[records.len() - window..];
            Ok((
                p,
                rate,
                tail.iter().map(|r| r.ret).sum::<f64>() / window as f64,
            ))
        })
        .collect::<Result<Vec<_>, LabError>>()?;
    let n_seeds = cfg.seeds.len() as f64;
    let mut rows: Vec<SweepRow> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mine = scores.iter().filter(|s| s.0 == i);
            let (succ, ret) = mine.fold((0.0, 0.0), |acc, s| (acc.0 + s.1, acc.1 + s.2));
            let w = &p.scenario.weights;
            SweepRow {
                rank: 0,
                point: i,
                alpha: w.alpha,
                beta: w.beta,
                eta: w.eta,
                zeta: w.zeta,
                gamma: p.agent.gamma,
                lr_actor: p.agent.lr_actor,
                lr_critic: p.agent.lr_critic,
                sigma_start: p.agent.noise.sigma_start,
                success: succ / n_seeds,
                mean_return: ret / n_seeds,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        b.success
            .partial_cmp(&a.success)
            .unwrap_or(Ordering::Equal)
            .then(
                b.mean_return
                    .partial_cmp(&a.mean_return)
                    .unwrap_or(Ordering::Equal),
            )
            .then(a.point.cmp(&b.point))
    });
    for (k, r) in rows.iter_mut().enumerate() {
        r.rank = k + 1;
    }
    let best = points[rows[0].point].clone();
    Ok(SweepOutput { rows, best })
}

pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<SweepOutput, LabError> {
    ensure_dir(&cfg.out)?;
    let out = sweep(cfg)?;
    write_rows(&cfg.out.join(SWEEP_RESULTS), &out.rows)?;
    let path = cfg.out.join(BEST_CONFIG);
    std::fs::write(&path, out.best.to_toml()?)
        .map_err(LabError::io(format!("write {}", path.display())))?;
    Ok(out)
}
