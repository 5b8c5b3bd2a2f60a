use std::collections::BTreeMap;
use std::fs::File;
use std::path::PathBuf;

use lfo_core::agent::{load_checkpoint, Agent, GreedyPolicy};
use lfo_core::baselines::{tune_pid, PidController, PidGains, Pss, PssParams, TuningResult};
use lfo_core::env::{rollout, Controller, EnvConfig, Environment, Observation, ZeroController};
use lfo_core::metrics::damping_report;
use lfo_core::train::{episode_seed, EVAL_STREAM};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ControllerKind, ExperimentConfig};
use crate::error::LabError;
use crate::train::FINAL_CHECKPOINT;
use crate::{ensure_dir, slug};

pub const EVAL_REPORT: &str = "eval_report.csv";
pub const PID_TUNING: &str = "pid_tuning.csv";
pub const TRACE_DIR: &str = "traces";
pub const TRACE_INDEX: &str = "index.csv";

/// One evaluation episode. `tail_energy` is infinite and `settling_s` empty
/// when synchronism is lost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub scenario: String,
    pub channel: String,
    pub controller: String,
    pub seed: u64,
    pub success: bool,
    pub peak_dev_pu: f64,
    pub settling_s: Option<f64>,
    pub tail_energy: f64,
    pub episode: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceIndexRow {
    pub file: String,
    pub scenario: String,
    pub channel: String,
    pub controller: String,
    pub seed: u64,
    pub episode: usize,
}

pub struct EvalOutput {
    pub rows: Vec<EvalRow>,
    pub pid: Option<TuningResult>,
}

/// Stabilizer bank on the controlled units, fed from the delayed speeds.
pub struct PssController {
    units: Vec<usize>,
    bank: Vec<Pss>,
    dt: f64,
}

impl PssController {
    pub fn new(params: &PssParams, config: &EnvConfig) -> Self {
        Self {
            units: config.controlled.clone(),
            bank: config
                .controlled
                .iter()
                .map(|_| Pss::new(params.clone()))
                .collect(),
            dt: config.dt_control,
        }
    }
}

impl Controller for PssController {
    fn reset(&mut self) {
        self.bank.iter_mut().for_each(Pss::reset);
    }

    fn act(&mut self, obs: &Observation) -> Vec<f64> {
        self.units
            .iter()
            .zip(&mut self.bank)
            .map(|(&g, p)| p.step(obs.speeds[g] - 1.0, self.dt))
            .collect()
    }
}

/// PID gains from the config, or tuned without delay on the base scenario.
pub fn pid_gains(cfg: &ExperimentConfig) -> Result<(PidGains, Option<TuningResult>), LabError> {
    if let Some(g) = cfg.pid.gains {
        return Ok((g, None));
    }
    let env = cfg.env_config_with("zero", cfg.scenario.pv.share)?;
    let tuned = tune_pid(&env, &cfg.pid.grid, cfg.pid.tuning_seed)?;
    Ok((tuned.best, Some(tuned)))
}

pub fn scenario_label(cfg: &ExperimentConfig, pv_share: f64) -> String {
    let base = format!("pv{pv_share}");
    if cfg.scenario.no_fault {
        format!("nofault_{base}")
    } else {
        base
    }
}

fn checkpoint_for(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.eval
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.seed_dir(seed).join(FINAL_CHECKPOINT))
}

struct Job {
    pv_share: f64,
    channel: String,
    controller: ControllerKind,
    seed: u64,
    episode: usize,
}

/// Runs the evaluation grid {pv share} × {channel} × {controller} × {seed} ×
/// {episode} with noise-free policies. Rows come back sorted by key.
pub fn evaluate(cfg: &ExperimentConfig) -> Result<EvalOutput, LabError> {
    let controllers = if cfg.eval.controllers.is_empty() {
        vec![cfg.controller]
    } else {
        cfg.eval.controllers.clone()
    };
    let channels = if cfg.eval.channels.is_empty() {
        vec![cfg.scenario.channel.clone()]
    } else {
        cfg.eval.channels.clone()
    };
    let shares = if cfg.eval.pv_shares.is_empty() {
        vec![cfg.scenario.pv.share]
    } else {
        cfg.eval.pv_shares.clone()
    };

    let (gains, tuning) = if controllers.contains(&ControllerKind::Pid) {
        let (g, t) = pid_gains(cfg)?;
        (Some(g), t)
    } else {
        (None, None)
    };
    let mut agents: BTreeMap<u64, Agent> = BTreeMap::new();
    if controllers.contains(&ControllerKind::Rl) {
        for &seed in &cfg.seeds {
            let path = checkpoint_for(cfg, seed);
            if !path.exists() {
                return Err(LabError::MissingInput(format!(
                    "checkpoint {}",
                    path.display()
                )));
            }
            agents.insert(seed, load_checkpoint(&path)?);
        }
    }

    let mut jobs = Vec::new();
    for &pv_share in &shares {
        for channel in &channels {
            for &controller in &controllers {
                for &seed in &cfg.seeds {
                    for episode in 0..cfg.eval_episodes {
                        jobs.push(Job {
                            pv_share,
                            channel: channel.clone(),
                            controller,
                            seed,
                            episode,
                        });
                    }
                }
            }
        }
    }
    let trace_dir = cfg.out.join(TRACE_DIR);
    if cfg.eval.traces {
        ensure_dir(&trace_dir)?;
    }
    let results = jobs
        .par_iter()
        .map(|job| {
            let env_cfg = cfg.env_config_with(&job.channel, job.pv_share)?;
            let mut env = Environment::new(env_cfg.clone())?;
            let mut ctrl: Box<dyn Controller> = match job.controller {
                ControllerKind::Rl => {
                    let agent = &agents[&job.seed];
                    agent.check_dims(env.observation_dim(), env.action_dim())?;
                    Box::new(GreedyPolicy {
                        actor: agent.actor.clone(),
                        speed_scale: env_cfg.obs_speed_scale,
                    })
                }
                ControllerKind::Pid => {
                    Box::new(PidController::new(gains.expect("tuned"), &env_cfg))
                }
                ControllerKind::PssOnly => Box::new(PssController::new(&env_cfg.pss, &env_cfg)),
                ControllerKind::None => Box::new(ZeroController {
                    dim: env.action_dim(),
                }),
            };
            let seed = episode_seed(job.seed, EVAL_STREAM, job.episode as u64);
            let out = rollout(&mut env, ctrl.as_mut(), seed, true)?;
            let trace = out.trace.expect("recording enabled");
            let clear = env_cfg.fault.map_or(0.0, |f| f.clear_time());
            let (times, speeds) = (trace.times(), trace.speeds());
            let (peak, settling, tail) = if out.sync_lost {
                let peak = times
                    .iter()
                    .zip(&speeds)
                    .filter(|(t, _)| **t >= clear)
                    .flat_map(|(_, w)| w.iter().map(|x| (x - 1.0).abs()))
                    .fold(0.0, f64::max);
                (peak, None, f64::INFINITY)
            } else {
                let r = damping_report(
                    &times,
                    &speeds,
                    clear,
                    cfg.eval.settle_threshold,
                    cfg.eval.tail_window,
                )?;
                (r.peak_deviation, r.settling_time, r.tail_energy)
            };
            let row = EvalRow {
                scenario: scenario_label(cfg, job.pv_share),
                channel: job.channel.clone(),
                controller: job.controller.as_str().to_string(),
                seed: job.seed,
                success: !out.sync_lost,
                peak_dev_pu: peak,
                settling_s: settling,
                tail_energy: tail,
                episode: job.episode,
            };
            let index = if cfg.eval.traces {
                let file = format!(
                    "{}_{}_{}_seed{}_ep{}.csv",
                    slug(&row.scenario),
                    slug(&row.channel),
                    row.controller,
                    row.seed,
                    row.episode
                );
                let path = trace_dir.join(&file);
                let f = File::create(&path)
                    .map_err(LabError::io(format!("create {}", path.display())))?;
                trace
                    .write_csv(std::io::BufWriter::new(f))
                    .map_err(LabError::io(format!("write {}", path.display())))?;
                Some(TraceIndexRow {
                    file,
                    scenario: row.scenario.clone(),
                    channel: row.channel.clone(),
                    controller: row.controller.clone(),
                    seed: row.seed,
                    episode: row.episode,
                })
            } else {
                None
            };
            Ok((row, index))
        })
        .collect::<Result<Vec<_>, LabError>>()?;

    let (mut rows, index): (Vec<EvalRow>, Vec<Option<TraceIndexRow>>) = results.into_iter().unzip();
    let key = |r: &EvalRow| {
        (
            r.scenario.clone(),
            r.channel.clone(),
            r.controller.clone(),
            r.seed,
            r.episode,
        )
    };
    rows.sort_by_key(key);
    let mut index: Vec<TraceIndexRow> = index.into_iter().flatten().collect();
    index.sort_by(|a, b| a.file.cmp(&b.file));
    if cfg.eval.traces {
        write_rows(&trace_dir.join(TRACE_INDEX), &index)?;
    }
    Ok(EvalOutput { rows, pid: tuning })
}

/// Evaluates and writes the report, the tuning log and the traces.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<EvalOutput, LabError> {
    ensure_dir(&cfg.out)?;
    let out = evaluate(cfg)?;
    write_rows(&cfg.out.join(EVAL_REPORT), &out.rows)?;
    if let Some(t) = &out.pid {
        #[derive(Serialize)]
        struct Row {
            kp: f64,
            ki: f64,
            kd: f64,
            score: f64,
            selected: bool,
        }
        let rows: Vec<Row> = t
            .log
            .iter()
            .map(|(g, s)| Row {
                kp: g.kp,
                ki: g.ki,
                kd: g.kd,
                score: *s,
                selected: *g == t.best,
            })
            .collect();
        write_rows(&cfg.out.join(PID_TUNING), &rows)?;
    }
    Ok(out)
}

pub fn write_rows<T: Serialize>(path: &std::path::Path, rows: &[T]) -> Result<(), LabError> {
    let file = File::create(path).map_err(LabError::io(format!("create {}", path.display())))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()
        .map_err(LabError::io(format!("write {}", path.display())))?;
    Ok(())
}

pub fn read_eval_report(path: &std::path::Path) -> Result<Vec<EvalRow>, LabError> {
    if !path.exists() {
        return Err(LabError::MissingInput(path.display().to_string()));
    }
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<EvalRow>, _>>()?)
}
