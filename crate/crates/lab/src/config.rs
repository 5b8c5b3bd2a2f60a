//! Experiment configuration: a TOML file layered over built-in defaults, with
//! dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use lfo_core::agent::AgentConfig;
use lfo_core::baselines::{PidGains, PidGrid, PssParams};
use lfo_core::delay::{ChannelLabel, CustomMixture, GaussianMixtureDelay};
use lfo_core::env::{EnvConfig, FaultSpec, PvScenario, RewardWeights};
use lfo_core::grid::GridCase;
use serde::{Deserialize, Serialize};

use crate::error::LabError;

/// Episode budget of the full-scale study.
pub const PAPER_SCALE_EPISODES: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Rl,
    Pid,
    PssOnly,
    None,
}

impl ControllerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Rl => "rl",
            Self::Pid => "pid",
            Self::PssOnly => "pss_only",
            Self::None => "none",
        }
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rl" => Ok(Self::Rl),
            "pid" => Ok(Self::Pid),
            "pss_only" => Ok(Self::PssOnly),
            "none" => Ok(Self::None),
            other => Err(LabError::Config(format!(
                "unknown controller `{other}` (expected rl, pid, pss_only or none)"
            ))),
        }
    }
}

/// Episode scenario. Unset fields keep the case's built-in defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Preset name, `zero`, `constant:<seconds>`, `constant:<preset>` or
    /// `custom` (reads `custom_channel`).
    pub channel: String,
    pub custom_channel: Option<CustomMixture>,
    pub fault: Option<FaultSpec>,
    /// Run without any disturbance.
    pub no_fault: bool,
    pub pv: PvScenario,
    pub weights: RewardWeights,
    pub horizon: Option<f64>,
    pub dt_sim: Option<f64>,
    pub dt_control: Option<f64>,
    pub controlled: Option<Vec<usize>>,
    pub monitored_pairs: Option<Vec<(u32, u32)>>,
    pub paper_literal_reward: bool,
    pub sync_threshold: Option<f64>,
    pub pss_on_uncontrolled: Option<bool>,
    pub pss: PssParams,
    pub obs_speed_scale: Option<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            channel: "fiber_optic".into(),
            custom_channel: None,
            fault: None,
            no_fault: false,
            pv: PvScenario::default(),
            weights: RewardWeights::default(),
            horizon: None,
            dt_sim: None,
            dt_control: None,
            controlled: None,
            monitored_pairs: None,
            paper_literal_reward: false,
            sync_threshold: None,
            pss_on_uncontrolled: None,
            pss: PssParams::default(),
            obs_speed_scale: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PidSection {
    pub grid: PidGrid,
    /// Fixed gains; skips tuning when set.
    pub gains: Option<PidGains>,
    pub tuning_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Channel grid; empty means the scenario channel only.
    pub channels: Vec<String>,
    /// Controller grid; empty means the top-level controller only.
    pub controllers: Vec<ControllerKind>,
    /// PV share grid; empty means the scenario share only.
    pub pv_shares: Vec<f64>,
    /// Policy for every seed; otherwise each seed's final training checkpoint.
    pub checkpoint: Option<PathBuf>,
    pub traces: bool,
    pub settle_threshold: f64,
    pub tail_window: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            channels: Vec::new(),
            controllers: Vec::new(),
            pv_shares: Vec::new(),
            checkpoint: None,
            traces: true,
            settle_threshold: 1e-3,
            tail_window: 5.0,
        }
    }
}

/// Value lists for the cross-validation sweep; empty lists are not swept.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub episodes: Option<usize>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub eta: Vec<f64>,
    pub zeta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub lr_actor: Vec<f64>,
    pub lr_critic: Vec<f64>,
    pub sigma_start: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlotSection {
    /// Run directory trained with a constant-delay channel.
    pub constant_run: Option<PathBuf>,
    /// Run directory trained with the matching variable-delay channel.
    pub variable_run: Option<PathBuf>,
    pub svg: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Bundled case name or path to a case JSON file.
    pub case: String,
    pub scenario: ScenarioConfig,
    pub agent: AgentConfig,
    pub controller: ControllerKind,
    pub episodes: usize,
    pub eval_episodes: usize,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub checkpoint_every: usize,
    /// Trailing window for success rates and best-checkpoint selection.
    pub success_window: usize,
    pub log_wall_time: bool,
    pub updates_per_step: usize,
    pub pid: PidSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub plot: PlotSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            case: "kundur_2area".into(),
            scenario: ScenarioConfig::default(),
            agent: AgentConfig::default(),
            controller: ControllerKind::Rl,
            episodes: 500,
            eval_episodes: 1,
            seeds: vec![0],
            out: PathBuf::from("runs"),
            checkpoint_every: 50,
            success_window: 100,
            log_wall_time: false,
            updates_per_step: 1,
            pid: PidSection::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
            plot: PlotSection::default(),
        }
    }
}

/// Resolves a channel description to a delay model.
pub fn parse_channel(
    name: &str,
    custom: Option<&CustomMixture>,
) -> Result<GaussianMixtureDelay, LabError> {
    let name = name.trim();
    if name == "zero" || name == "none" {
        return Ok(GaussianMixtureDelay::zero());
    }
    if name == "custom" {
        let spec = custom.ok_or_else(|| {
            LabError::Config("channel `custom` needs scenario.custom_channel".into())
        })?;
        return Ok(GaussianMixtureDelay::custom(spec)?);
    }
    if let Some(arg) = name.strip_prefix("constant:") {
        // a preset name means its truncated mean
        if let Ok(label) = arg.parse::<ChannelLabel>() {
            return Ok(GaussianMixtureDelay::constant(
                GaussianMixtureDelay::preset(label)?.truncated_mean(),
            ));
        }
        let s: f64 = arg
            .parse()
            .map_err(|_| LabError::Config(format!("bad constant delay `{arg}`")))?;
        if !s.is_finite() || s < 0.0 {
            return Err(LabError::Config(format!(
                "constant delay must be finite and ≥ 0, got {s}"
            )));
        }
        return Ok(GaussianMixtureDelay::constant(s));
    }
    Ok(GaussianMixtureDelay::from_name(name)?)
}

impl ExperimentConfig {
    /// Reads a TOML file and applies `key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, LabError> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| LabError::Config(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| LabError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_table(value)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, LabError> {
        Self::from_table(
            text.parse::<toml::Table>()
                .map_err(|e| LabError::Config(e.to_string()))?,
        )
    }

    fn from_table(table: toml::Table) -> Result<Self, LabError> {
        let cfg: Self = serde_path_to_error::deserialize(toml::Value::Table(table))
            .map_err(|e| LabError::Config(format!("at `{}`: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, LabError> {
        toml::to_string_pretty(self).map_err(|e| LabError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), LabError> {
        if self.seeds.is_empty() {
            return Err(LabError::Config("seeds must not be empty".into()));
        }
        if self.episodes == 0 || self.eval_episodes == 0 {
            return Err(LabError::Config(
                "episodes and eval_episodes must be positive".into(),
            ));
        }
        if self.success_window == 0 {
            return Err(LabError::Config("success_window must be positive".into()));
        }
        self.agent.validate()?;
        Ok(())
    }

    /// Environment for the scenario with the given channel and PV share.
    pub fn env_config_with(&self, channel: &str, pv_share: f64) -> Result<EnvConfig, LabError> {
        let case = GridCase::load(&self.case)?;
        let mut env = if case.generators.len() == 4 {
            EnvConfig::kundur()
        } else {
            EnvConfig::ieee39()
        };
        env.case = case;
        let s = &self.scenario;
        if s.no_fault {
            env.fault = None;
        } else if let Some(f) = s.fault {
            env.fault = Some(f);
        }
        env.channel = parse_channel(channel, s.custom_channel.as_ref())?;
        env.pv = PvScenario {
            share: pv_share,
            ..s.pv
        };
        env.weights = s.weights;
        env.paper_literal_reward = s.paper_literal_reward;
        env.pss = s.pss.clone();
        if let Some(v) = s.horizon {
            env.horizon = v;
        }
        if let Some(v) = s.dt_sim {
            env.dt_sim = v;
        }
        if let Some(v) = s.dt_control {
            env.dt_control = v;
        }
        if let Some(v) = &s.controlled {
            env.controlled = v.clone();
        }
        if let Some(v) = &s.monitored_pairs {
            env.monitored_pairs = v.clone();
        }
        if let Some(v) = s.sync_threshold {
            env.sync_threshold = v;
        }
        if let Some(v) = s.pss_on_uncontrolled {
            env.pss_on_uncontrolled = v;
        }
        if let Some(v) = s.obs_speed_scale {
            env.obs_speed_scale = v;
        }
        env.validate()?;
        Ok(env)
    }

    pub fn env_config(&self) -> Result<EnvConfig, LabError> {
        self.env_config_with(&self.scenario.channel, self.scenario.pv.share)
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out.join(format!("seed_{seed}"))
    }
}

/// Sets `a.b.c = <TOML literal>`; bare words that do not parse as TOML are
/// taken as strings.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), LabError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| LabError::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(LabError::Config(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| LabError::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
