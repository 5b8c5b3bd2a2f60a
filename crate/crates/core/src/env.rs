//! Episodic damping-control task built on the grid simulator.
//!
//! Measurements travel through a delay channel before the controller sees
//! them; the reward is computed from the undelayed state.

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{Pss, PssParams};
use crate::delay::{DelayError, GaussianMixtureDelay, MeasurementBuffer};
use crate::grid::{
    electrical_power, init_dynamic_state, solve_power_flow, step_rk4, BusKind, DynamicState,
    GridCase, GridError, GridEvent, MachineParams, Network, PowerFlowOptions, C64,
};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Delay(#[from] DelayError),
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("infeasible PV scenario: {0}")]
    InfeasiblePv(String),
    #[error("action must have {expected} finite entries, got {got:?}")]
    BadAction { expected: usize, got: Vec<f64> },
    #[error("step called before reset or after the episode ended")]
    NotRunning,
}

/// Three-phase bus fault applied for `duration_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub bus: u32,
    pub start_s: f64,
    pub duration_s: f64,
    #[serde(default = "default_fault_admittance")]
    pub admittance_pu: f64,
}

fn default_fault_admittance() -> f64 {
    1e4
}

impl FaultSpec {
    pub fn clear_time(&self) -> f64 {
        self.start_s + self.duration_s
    }

    pub fn events(&self) -> [GridEvent; 2] {
        [
            GridEvent::bus_fault(self.bus, self.start_s, self.admittance_pu),
            GridEvent::fault_clear(self.bus, self.clear_time()),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PvScenario {
    /// Target PV output as a fraction of each area's load.
    pub share: f64,
    /// Half-width of the uniform per-episode level draw, as a fraction.
    pub level_spread: f64,
    /// Standard deviation of the in-episode fluctuation, as a fraction.
    pub fluctuation_std: f64,
    pub fluctuation_cutoff_hz: f64,
}

impl Default for PvScenario {
    fn default() -> Self {
        Self {
            share: 0.0,
            level_spread: 0.2,
            fluctuation_std: 0.02,
            fluctuation_cutoff_hz: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub zeta: f64,
    /// Upper action bound, pu.
    pub u: f64,
    /// Lower action bound, pu.
    pub v: f64,
    pub sync_penalty: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            beta: 50.0,
            eta: 1.0,
            zeta: 1.0,
            u: 0.2,
            v: -0.2,
            sync_penalty: 1000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub case: GridCase,
    pub dt_sim: f64,
    pub dt_control: f64,
    pub horizon: f64,
    pub fault: Option<FaultSpec>,
    pub channel: GaussianMixtureDelay,
    /// Bus id pairs whose angle separation enters the reward.
    pub monitored_pairs: Vec<(u32, u32)>,
    /// Generator indices driven by the controller.
    pub controlled: Vec<usize>,
    pub pv: PvScenario,
    pub weights: RewardWeights,
    /// Evaluate the action penalty with the region conditions `a < u` and
    /// `a > v` taken literally.
    pub paper_literal_reward: bool,
    /// Maximum rotor-angle separation, rad, before synchronism is lost.
    pub sync_threshold: f64,
    /// Fit a conventional stabilizer on every generator not in `controlled`.
    pub pss_on_uncontrolled: bool,
    pub pss: PssParams,
    /// Multiplier on speed changes in the feature vector.
    pub obs_speed_scale: f64,
}

impl EnvConfig {
    /// Two-area system, all four units controlled, bus-8 fault at 1 s.
    pub fn kundur() -> Self {
        Self {
            case: GridCase::kundur_2area(),
            dt_sim: 0.01,
            dt_control: 0.05,
            horizon: 20.0,
            fault: Some(FaultSpec {
                bus: 8,
                start_s: 1.0,
                duration_s: 0.1,
                admittance_pu: 1e4,
            }),
            channel: GaussianMixtureDelay::preset(crate::delay::ChannelLabel::FiberOptic)
                .expect("preset channel"),
            monitored_pairs: vec![(7, 9)],
            controlled: vec![0, 1, 2, 3],
            pv: PvScenario::default(),
            weights: RewardWeights::default(),
            paper_literal_reward: false,
            sync_threshold: PI,
            pss_on_uncontrolled: false,
            pss: PssParams::default(),
            obs_speed_scale: 1e3,
        }
    }

    /// New England system, unit 31 controlled, stabilizers elsewhere, bus-13
    /// fault at 1 s.
    pub fn ieee39() -> Self {
        Self {
            case: GridCase::ieee39(),
            fault: Some(FaultSpec {
                bus: 13,
                start_s: 1.0,
                duration_s: 0.1,
                admittance_pu: 1e4,
            }),
            monitored_pairs: vec![(13, 31)],
            controlled: vec![1],
            pss_on_uncontrolled: true,
            ..Self::kundur()
        }
    }

    pub fn substeps(&self) -> usize {
        (self.dt_control / self.dt_sim).round() as usize
    }

    pub fn control_steps(&self) -> usize {
        (self.horizon / self.dt_control).round() as usize
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::Config(m));
        self.case.validate()?;
        self.channel.validate()?;
        if !(self.dt_sim > 0.0 && self.dt_control > 0.0 && self.horizon > 0.0) {
            return bad(format!(
                "dt_sim {}, dt_control {} and horizon {} must be positive",
                self.dt_sim, self.dt_control, self.horizon
            ));
        }
        let ratio = self.dt_control / self.dt_sim;
        if ratio < 1.0 || (ratio - ratio.round()).abs() > 1e-9 {
            return bad(format!(
                "dt_control {} is not a multiple of dt_sim {}",
                self.dt_control, self.dt_sim
            ));
        }
        if let Some(f) = &self.fault {
            self.case.index_of_bus(f.bus)?;
            if !(f.start_s >= 0.0 && f.duration_s > 0.0 && f.admittance_pu > 0.0) {
                return bad(format!("fault {f:?}"));
            }
            if f.clear_time() >= self.horizon {
                return bad(format!(
                    "fault clears at {} s, after the horizon {} s",
                    f.clear_time(),
                    self.horizon
                ));
            }
        }
        for &(a, b) in &self.monitored_pairs {
            self.case.index_of_bus(a)?;
            self.case.index_of_bus(b)?;
        }
        let g = self.case.generators.len();
        if self.controlled.is_empty() {
            return bad("no controlled generators".into());
        }
        let mut seen = vec![false; g];
        for &i in &self.controlled {
            if i >= g || std::mem::replace(&mut seen[i], true) {
                return bad(format!(
                    "controlled generator index {i} is out of range or repeated"
                ));
            }
        }
        let w = &self.weights;
        if ![w.alpha, w.beta, w.eta, w.zeta].iter().all(|x| *x >= 0.0) || !(w.sync_penalty > 0.0) {
            return bad(format!("reward weights {w:?}"));
        }
        if !(w.v < w.u) {
            return bad(format!(
                "action bounds need v < u, got v = {}, u = {}",
                w.v, w.u
            ));
        }
        let pv = &self.pv;
        if !(0.0..1.0).contains(&pv.share)
            || !(0.0..1.0).contains(&pv.level_spread)
            || !(pv.fluctuation_std >= 0.0)
            || !(pv.fluctuation_cutoff_hz > 0.0)
        {
            return bad(format!("PV scenario {pv:?}"));
        }
        if !(self.sync_threshold > 0.0 && self.obs_speed_scale > 0.0) {
            return bad("sync_threshold and obs_speed_scale must be positive".into());
        }
        Ok(())
    }
}

/// What the controller receives at one decision instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// `|ω(t) − ω(t')|` per generator between the two latest delivered samples, pu.
    pub speed_deviations: Vec<f64>,
    /// Angle of each monitored bus relative to the inertia-weighted mean rotor
    /// angle, wrapped to `(−π, π]`.
    pub bus_angles: Vec<f64>,
    /// Delivered per-generator speeds, pu.
    pub speeds: Vec<f64>,
    /// False until the first measurement has arrived.
    pub valid: bool,
    /// Emission time of the delivered sample.
    pub emit_time: Option<f64>,
}

impl Observation {
    /// Network input: scaled speed changes followed by bus angles.
    pub fn features(&self, speed_scale: f64) -> Vec<f64> {
        self.speed_deviations
            .iter()
            .map(|d| d * speed_scale)
            .chain(self.bus_angles.iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub sync_lost: bool,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// One simulator instant.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSample {
    pub t: f64,
    pub delta: Vec<f64>,
    pub omega: Vec<f64>,
    pub eq_prime: Vec<f64>,
    pub efd: Vec<f64>,
    pub pe: Vec<f64>,
    /// Reward of the control interval containing `t`; 0 at the initial instant.
    pub reward: f64,
    /// Action held over the interval containing `t`.
    pub action: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub samples: Vec<TraceSample>,
}

impl Trace {
    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    pub fn speeds(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.omega.clone()).collect()
    }

    /// Long-format CSV, one row per generator per instant.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        let actions = self.samples.first().map_or(0, |s| s.action.len());
        write!(
            out,
            "t,gen_id,delta_rad,omega_pu,eqp_pu,efd_pu,pe_pu,reward"
        )?;
        for i in 0..actions {
            write!(out, ",action_g{i}")?;
        }
        writeln!(out)?;
        for s in &self.samples {
            for g in 0..s.omega.len() {
                write!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    s.t, g, s.delta[g], s.omega[g], s.eq_prime[g], s.efd[g], s.pe[g], s.reward
                )?;
                for a in &s.action {
                    write!(out, ",{a}")?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

/// True iff every pairwise rotor-angle separation is within `threshold`.
pub fn check_synchronism(state: &DynamicState, threshold: f64) -> bool {
    let (lo, hi) = state
        .delta
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &d| {
            (lo.min(d), hi.max(d))
        });
    state.delta.is_empty() || hi - lo <= threshold
}

/// `Σ_k γ^k r_k`.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
}

pub fn wrap_angle(x: f64) -> f64 {
    let y = x.rem_euclid(2.0 * PI);
    if y > PI {
        y - 2.0 * PI
    } else {
        y
    }
}

/// Out-of-bound action penalty, before scaling by `η`.
pub fn action_penalty(action: &[f64], u: f64, v: f64, literal: bool) -> f64 {
    action
        .iter()
        .map(|&a| {
            if literal {
                if a < u {
                    (a + u).abs()
                } else if a > v {
                    (a - v).abs()
                } else {
                    0.0
                }
            } else {
                (a - u).max(0.0) + (v - a).max(0.0)
            }
        })
        .sum()
}

/// Per-step reward from undelayed quantities.
///
/// `angle_errors` are the monitored pair separations minus their
/// pre-disturbance values.
pub fn reward(
    weights: &RewardWeights,
    omega: &[f64],
    speed_change: &[f64],
    angle_errors: &[f64],
    action: &[f64],
    literal: bool,
) -> f64 {
    let speed: f64 = omega
        .iter()
        .zip(speed_change)
        .map(|(w, dw)| weights.alpha * (1.0 - w).abs() + weights.beta * dw.abs())
        .sum();
    let angle: f64 = angle_errors.iter().map(|e| e.abs()).sum();
    -(speed
        + weights.zeta * angle
        + weights.eta * action_penalty(action, weights.u, weights.v, literal))
}

#[derive(Debug, Clone, PartialEq)]
struct Payload {
    omega: Vec<f64>,
    angles: Vec<f64>,
}

/// Per-area PV targets: `(bus, MW)` for every PV unit, scaled by `level`
/// per area.
fn pv_targets(
    case: &GridCase,
    share: f64,
    level: &HashMap<u32, f64>,
) -> Result<Vec<f64>, EnvError> {
    let mut out = vec![0.0; case.pv_units.len()];
    if share == 0.0 {
        return Ok(out);
    }
    let mut area_load: HashMap<u32, f64> = HashMap::new();
    for b in &case.buses {
        *area_load.entry(b.area).or_default() += b.p_load;
    }
    for (&area, &load) in &area_load {
        if load <= 0.0 {
            continue;
        }
        let units: Vec<usize> = (0..case.pv_units.len())
            .filter(|&k| case.area_of(case.pv_units[k].bus) == Some(area))
            .collect();
        if units.is_empty() {
            return Err(EnvError::InfeasiblePv(format!(
                "area {area} has load but no PV unit"
            )));
        }
        let rated: f64 = units.iter().map(|&k| case.pv_units[k].rated).sum();
        let total = share * load * level.get(&area).copied().unwrap_or(1.0);
        for &k in &units {
            out[k] = total * case.pv_units[k].rated / rated;
        }
    }
    Ok(out)
}

/// Nets PV output out of bus loads and lowers each area's conventional
/// dispatch by the area's PV output, shared in proportion to machine rating.
/// The slack unit absorbs its share through the power flow.
pub fn dispatch_with_pv(case: &GridCase, pv_mw: &[f64]) -> Result<GridCase, EnvError> {
    if pv_mw.len() != case.pv_units.len() {
        return Err(EnvError::Config(format!(
            "{} PV outputs for {} units",
            pv_mw.len(),
            case.pv_units.len()
        )));
    }
    let mut out = case.clone();
    let mut area_pv: HashMap<u32, f64> = HashMap::new();
    for (unit, &mw) in case.pv_units.iter().zip(pv_mw) {
        let k = case.index_of_bus(unit.bus)?;
        out.buses[k].p_load -= mw;
        *area_pv.entry(case.buses[k].area).or_default() += mw;
    }
    for (&area, &pv) in &area_pv {
        let gens: Vec<usize> = (0..case.generators.len())
            .filter(|&i| case.area_of(case.generators[i].bus) == Some(area))
            .collect();
        if gens.is_empty() {
            return Err(EnvError::InfeasiblePv(format!(
                "area {area} has PV but no generator to back down"
            )));
        }
        let rating: f64 = gens.iter().map(|&i| case.generators[i].rating).sum();
        for &i in &gens {
            let gen = &mut out.generators[i];
            gen.p_dispatch -= pv * gen.rating / rating;
            let is_slack = case.buses[case.index_of_bus(gen.bus)?].kind == BusKind::Slack;
            if !is_slack && gen.p_dispatch < 0.0 {
                return Err(EnvError::InfeasiblePv(format!(
                    "generator at bus {} would be dispatched at {:.1} MW",
                    gen.bus, gen.p_dispatch
                )));
            }
        }
    }
    Ok(out)
}

/// Damping-control environment; one instance per worker.
#[derive(Debug, Clone)]
pub struct Environment {
    config: EnvConfig,
    machines: Vec<MachineParams>,
    inertia: Vec<f64>,
    monitored_buses: Vec<u32>,
    pair_rows: Vec<(usize, usize)>,
    bus_rows: Vec<usize>,
    running: Option<Episode>,
    record: bool,
}

#[derive(Debug, Clone)]
struct Episode {
    case: GridCase,
    network: Network,
    state: DynamicState,
    rng: ChaCha8Rng,
    buffer: MeasurementBuffer<Payload>,
    schedule: Vec<(usize, GridEvent)>,
    next_event: usize,
    sim_step: usize,
    control_step: usize,
    pss: Vec<Option<Pss>>,
    pv_level: Vec<f64>,
    pv_noise: Vec<f64>,
    angle_offset: Vec<f64>,
    last_payload: Option<(f64, Payload)>,
    obs: Observation,
    done: bool,
    sync_lost: bool,
    speed_error_integral: f64,
    trace: Option<Trace>,
}

impl Environment {
    pub fn new(config: EnvConfig) -> Result<Self, EnvError> {
        config.validate()?;
        let machines = MachineParams::from_case(&config.case);
        let inertia = machines.iter().map(|m| m.h).collect();
        let mut monitored_buses = Vec::new();
        for &(a, b) in &config.monitored_pairs {
            for id in [a, b] {
                if !monitored_buses.contains(&id) {
                    monitored_buses.push(id);
                }
            }
        }
        let bus_rows = monitored_buses
            .iter()
            .map(|&id| config.case.index_of_bus(id))
            .collect::<Result<Vec<_>, _>>()?;
        let pos = |id: u32| {
            monitored_buses
                .iter()
                .position(|&b| b == id)
                .expect("collected above")
        };
        let pair_rows = config
            .monitored_pairs
            .iter()
            .map(|&(a, b)| (pos(a), pos(b)))
            .collect();
        Ok(Self {
            config,
            machines,
            inertia,
            monitored_buses,
            pair_rows,
            bus_rows,
            running: None,
            record: false,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn action_dim(&self) -> usize {
        self.config.controlled.len()
    }

    pub fn observation_dim(&self) -> usize {
        self.config.case.generators.len() + self.monitored_buses.len()
    }

    pub fn monitored_buses(&self) -> &[u32] {
        &self.monitored_buses
    }

    /// Record a full-resolution trace from the next reset on.
    pub fn set_recording(&mut self, on: bool) {
        self.record = on;
    }

    pub fn take_trace(&mut self) -> Option<Trace> {
        self.running.as_mut().and_then(|e| e.trace.take())
    }

    pub fn state(&self) -> Option<&DynamicState> {
        self.running.as_ref().map(|e| &e.state)
    }

    /// Case as dispatched for the current episode (PV netted out of loads).
    pub fn episode_case(&self) -> Option<&GridCase> {
        self.running.as_ref().map(|e| &e.case)
    }

    pub fn pv_output_mw(&self) -> Option<&[f64]> {
        self.running.as_ref().map(|e| e.network.pv_output_mw())
    }

    pub fn time(&self) -> f64 {
        self.running
            .as_ref()
            .map_or(0.0, |e| e.control_step as f64 * self.config.dt_control)
    }

    /// `∫ Σ_g |1 − ω_g| dt` so far, rectangle rule at the simulation step.
    pub fn speed_error_integral(&self) -> f64 {
        self.running
            .as_ref()
            .map_or(0.0, |e| e.speed_error_integral)
    }

    pub fn sync_lost(&self) -> bool {
        self.running.as_ref().is_some_and(|e| e.sync_lost)
    }

    /// Starts an episode: draws PV, solves the power flow, initializes the
    /// machines and clears the channel.
    pub fn reset(&mut self, seed: u64) -> Result<Observation, EnvError> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pv = cfg.pv;
        let mut level = HashMap::new();
        if pv.share > 0.0 {
            let mut areas: Vec<u32> = cfg.case.buses.iter().map(|b| b.area).collect();
            areas.sort_unstable();
            areas.dedup();
            for area in areas {
                level.insert(
                    area,
                    1.0 + pv.level_spread * (2.0 * rng.random::<f64>() - 1.0),
                );
            }
        }
        let pv_level = pv_targets(&cfg.case, pv.share, &level)?;
        let case = if pv.share > 0.0 {
            dispatch_with_pv(&cfg.case, &pv_level)?
        } else {
            cfg.case.clone()
        };
        let pf = solve_power_flow(&case, &PowerFlowOptions::default())?;
        let network = Network::with_pv(&case, &pf, pv_level.clone())?;
        let state = init_dynamic_state(&case, &pf)?;

        let n_sub = cfg.substeps();
        let mut schedule: Vec<(usize, GridEvent)> = cfg
            .fault
            .iter()
            .flat_map(|f| f.events())
            .map(|e| (((e.time / cfg.dt_sim).round().max(0.0)) as usize, e))
            .collect();
        schedule.sort_by_key(|(k, _)| *k);
        let pss = (0..case.generators.len())
            .map(|i| {
                (cfg.pss_on_uncontrolled && !cfg.controlled.contains(&i))
                    .then(|| Pss::new(cfg.pss.clone()))
            })
            .collect();
        let capacity = (cfg.channel.max_s / cfg.dt_control).ceil() as usize + 8;
        let angles = self.bus_angles_raw(&network, &state);
        let angle_offset = self
            .pair_rows
            .iter()
            .map(|&(i, j)| wrap_angle(angles[i] - angles[j]))
            .collect();
        let n_pv = pv_level.len();
        let mut ep = Episode {
            case,
            network,
            state,
            rng,
            buffer: MeasurementBuffer::new(capacity.max(n_sub)),
            schedule,
            next_event: 0,
            sim_step: 0,
            control_step: 0,
            pss,
            pv_level,
            pv_noise: vec![0.0; n_pv],
            angle_offset,
            last_payload: None,
            obs: Observation {
                speed_deviations: vec![0.0; self.machines.len()],
                bus_angles: vec![0.0; self.monitored_buses.len()],
                speeds: vec![1.0; self.machines.len()],
                valid: false,
                emit_time: None,
            },
            done: false,
            sync_lost: false,
            speed_error_integral: 0.0,
            trace: self.record.then(Trace::default),
        };
        let payload = self.payload(&ep.network, &ep.state);
        // equilibrium angles stand in until the first sample arrives
        ep.obs.bus_angles = payload.angles.clone();
        if ep.trace.is_some() {
            let s = self.sample(&ep, 0.0, &vec![0.0; self.action_dim()]);
            ep.trace.as_mut().expect("checked").samples.push(s);
        }
        self.emit_and_read(&mut ep, payload)?;
        let obs = ep.obs.clone();
        self.running = Some(ep);
        Ok(obs)
    }

    /// Holds `action` for one control interval and advances the simulator.
    pub fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        let a_dim = self.action_dim();
        if action.len() != a_dim || !action.iter().all(|a| a.is_finite()) {
            return Err(EnvError::BadAction {
                expected: a_dim,
                got: action.to_vec(),
            });
        }
        let mut ep = self.running.take().ok_or(EnvError::NotRunning)?;
        if ep.done {
            self.running = Some(ep);
            return Err(EnvError::NotRunning);
        }
        let result = self.advance(&mut ep, action);
        self.running = Some(ep);
        result
    }

    fn advance(&self, ep: &mut Episode, action: &[f64]) -> Result<StepResult, EnvError> {
        let cfg = &self.config;
        let g = self.machines.len();
        let omega_before = ep.state.omega.clone();
        let mut control = vec![0.0; g];
        for (k, &i) in cfg.controlled.iter().enumerate() {
            control[i] = action[k];
        }
        let trace_from = ep.trace.as_ref().map_or(0, |t| t.samples.len());
        for _ in 0..cfg.substeps() {
            while ep.next_event < ep.schedule.len() && ep.schedule[ep.next_event].0 <= ep.sim_step {
                ep.network.apply_event(&ep.schedule[ep.next_event].1)?;
                ep.next_event += 1;
            }
            for (i, pss) in ep.pss.iter_mut().enumerate() {
                if let Some(p) = pss {
                    control[i] = p.step(ep.state.omega[i] - 1.0, cfg.dt_sim);
                }
            }
            match step_rk4(
                &ep.state,
                ep.network.reduced(),
                &control,
                cfg.dt_sim,
                &self.machines,
            ) {
                Ok(next) => ep.state = next,
                Err(GridError::NonFinite { .. }) => {
                    ep.sync_lost = true;
                    break;
                }
                Err(e) => return Err(e.into()),
            }
            ep.sim_step += 1;
            ep.state.t = ep.sim_step as f64 * cfg.dt_sim;
            ep.speed_error_integral +=
                ep.state.omega.iter().map(|w| (1.0 - w).abs()).sum::<f64>() * cfg.dt_sim;
            if ep.trace.is_some() {
                let s = self.sample(ep, 0.0, action);
                ep.trace.as_mut().expect("checked").samples.push(s);
            }
            if !check_synchronism(&ep.state, cfg.sync_threshold) {
                ep.sync_lost = true;
                break;
            }
        }
        ep.control_step += 1;
        let t = ep.control_step as f64 * cfg.dt_control;

        let reward = if ep.sync_lost {
            -cfg.weights.sync_penalty
        } else {
            let change: Vec<f64> = ep
                .state
                .omega
                .iter()
                .zip(&omega_before)
                .map(|(a, b)| a - b)
                .collect();
            let angles = self.bus_angles_raw(&ep.network, &ep.state);
            let errors: Vec<f64> = self
                .pair_rows
                .iter()
                .zip(&ep.angle_offset)
                .map(|(&(i, j), off)| wrap_angle(angles[i] - angles[j] - off))
                .collect();
            reward(
                &cfg.weights,
                &ep.state.omega,
                &change,
                &errors,
                action,
                cfg.paper_literal_reward,
            )
        };
        if let Some(trace) = ep.trace.as_mut() {
            for s in &mut trace.samples[trace_from..] {
                s.reward = reward;
            }
        }
        ep.done = ep.sync_lost || ep.control_step >= cfg.control_steps();
        if !ep.sync_lost {
            self.update_pv(ep)?;
            let payload = self.payload(&ep.network, &ep.state);
            self.emit_and_read(ep, payload)?;
        }
        Ok(StepResult {
            observation: ep.obs.clone(),
            reward,
            done: ep.done,
            info: StepInfo {
                sync_lost: ep.sync_lost,
                t,
            },
        })
    }

    /// Advances the low-pass PV fluctuation by one control interval.
    fn update_pv(&self, ep: &mut Episode) -> Result<(), EnvError> {
        let pv = &self.config.pv;
        if ep.pv_level.is_empty() || pv.share == 0.0 || pv.fluctuation_std == 0.0 {
            return Ok(());
        }
        let a = (-2.0 * PI * pv.fluctuation_cutoff_hz * self.config.dt_control).exp();
        let gain = pv.fluctuation_std * (1.0 - a * a).sqrt();
        for x in &mut ep.pv_noise {
            let z: f64 = ep.rng.sample(StandardNormal);
            *x = a * *x + gain * z;
        }
        let mw: Vec<f64> = ep
            .pv_level
            .iter()
            .zip(&ep.pv_noise)
            .map(|(l, x)| (l * (1.0 + x)).max(0.0))
            .collect();
        ep.network.set_pv_outputs(&mw)?;
        Ok(())
    }

    fn emit_and_read(&self, ep: &mut Episode, payload: Payload) -> Result<(), EnvError> {
        let now = ep.control_step as f64 * self.config.dt_control;
        ep.buffer
            .push(now, payload, &self.config.channel, &mut ep.rng)?;
        let Some(entry) = ep.buffer.read_delayed(now) else {
            return Ok(());
        };
        let fresh = ep
            .last_payload
            .as_ref()
            .is_none_or(|(t, _)| entry.emit_time > *t);
        if !fresh {
            return Ok(());
        }
        let delivered = entry.payload.clone();
        let emit = entry.emit_time;
        let deviations = match &ep.last_payload {
            Some((_, prev)) => delivered
                .omega
                .iter()
                .zip(&prev.omega)
                .map(|(a, b)| (a - b).abs())
                .collect(),
            None => vec![0.0; delivered.omega.len()],
        };
        ep.obs = Observation {
            speed_deviations: deviations,
            bus_angles: delivered.angles.clone(),
            speeds: delivered.omega.clone(),
            valid: true,
            emit_time: Some(emit),
        };
        ep.last_payload = Some((emit, delivered));
        Ok(())
    }

    fn bus_angles_raw(&self, network: &Network, state: &DynamicState) -> Vec<f64> {
        let emf: Vec<C64> = state
            .delta
            .iter()
            .zip(&state.eq_prime)
            .map(|(&d, &e)| C64::from_polar(e, d))
            .collect();
        let v_map = &network.reduced().v_map;
        self.bus_rows
            .iter()
            .map(|&row| {
                (0..emf.len())
                    .map(|j| v_map[(row, j)] * emf[j])
                    .sum::<C64>()
                    .arg()
            })
            .collect()
    }

    fn payload(&self, network: &Network, state: &DynamicState) -> Payload {
        let h_total: f64 = self.inertia.iter().sum();
        let coi = state
            .delta
            .iter()
            .zip(&self.inertia)
            .map(|(d, h)| d * h)
            .sum::<f64>()
            / h_total;
        let angles = self
            .bus_angles_raw(network, state)
            .into_iter()
            .map(|a| wrap_angle(a - coi))
            .collect();
        Payload {
            omega: state.omega.clone(),
            angles,
        }
    }

    fn sample(&self, ep: &Episode, reward: f64, action: &[f64]) -> TraceSample {
        let (pe, _) = electrical_power(ep.network.reduced(), &ep.state);
        TraceSample {
            t: ep.state.t,
            delta: ep.state.delta.clone(),
            omega: ep.state.omega.clone(),
            eq_prime: ep.state.eq_prime.clone(),
            efd: ep.state.efd.clone(),
            pe,
            reward,
            action: action.to_vec(),
        }
    }
}

/// Maps observations to actions for the controlled generators.
pub trait Controller {
    fn reset(&mut self) {}
    fn act(&mut self, obs: &Observation) -> Vec<f64>;
}

/// Applies no stabilizing input.
#[derive(Debug, Clone, Copy)]
pub struct ZeroController {
    pub dim: usize,
}

impl Controller for ZeroController {
    fn act(&mut self, _obs: &Observation) -> Vec<f64> {
        vec![0.0; self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub rewards: Vec<f64>,
    pub total_reward: f64,
    pub sync_lost: bool,
    pub speed_error_integral: f64,
    pub trace: Option<Trace>,
}

/// Runs one episode; the controller is bypassed (zero action) while the
/// observation is not yet valid.
pub fn rollout<C: Controller + ?Sized>(
    env: &mut Environment,
    ctrl: &mut C,
    seed: u64,
    record: bool,
) -> Result<Rollout, EnvError> {
    env.set_recording(record);
    let mut obs = env.reset(seed)?;
    ctrl.reset();
    let zero = vec![0.0; env.action_dim()];
    let mut rewards = Vec::with_capacity(env.config().control_steps());
    loop {
        let action = if obs.valid {
            ctrl.act(&obs)
        } else {
            zero.clone()
        };
        let step = env.step(&action)?;
        rewards.push(step.reward);
        obs = step.observation;
        if step.done {
            break;
        }
    }
    Ok(Rollout {
        total_reward: rewards.iter().sum(),
        rewards,
        sync_lost: env.sync_lost(),
        speed_error_integral: env.speed_error_integral(),
        trace: env.take_trace(),
    })
}
