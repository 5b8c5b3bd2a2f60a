//! Comparison controllers: a discrete PID on speed error and a conventional
//! washout plus lead-lag PSS.

use serde::{Deserialize, Serialize};

use crate::env::{rollout, Controller, EnvConfig, EnvError, Environment, Observation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

impl PidGains {
    pub const ZERO: PidGains = PidGains {
        kp: 0.0,
        ki: 0.0,
        kd: 0.0,
    };
}

/// Positional PID with derivative on error and a clamped output.
///
/// The integrator is frozen on any step whose output saturates.
#[derive(Debug, Clone, PartialEq)]
pub struct Pid {
    pub gains: PidGains,
    pub integral: f64,
    pub prev_error: Option<f64>,
    pub lo: f64,
    pub hi: f64,
    pub saturated: bool,
}

impl Pid {
    pub fn new(gains: PidGains, lo: f64, hi: f64) -> Self {
        assert!(lo < hi, "PID limits must satisfy lo < hi");
        Self {
            gains,
            integral: 0.0,
            prev_error: None,
            lo,
            hi,
            saturated: false,
        }
    }

    pub fn reset(&mut self) {
        self.integral = 0.0;
        self.prev_error = None;
        self.saturated = false;
    }

    pub fn step(&mut self, error: f64, dt: f64) -> f64 {
        debug_assert!(dt > 0.0);
        let derivative = self.prev_error.map_or(0.0, |p| (error - p) / dt);
        self.prev_error = Some(error);
        let integral = self.integral + error * dt;
        let g = self.gains;
        let raw = g.kp * error + g.ki * integral + g.kd * derivative;
        let out = raw.clamp(self.lo, self.hi);
        self.saturated = out != raw;
        if !self.saturated {
            self.integral = integral;
        }
        if out.is_finite() {
            out
        } else {
            0.0
        }
    }
}

/// First-order section `(b1 s + b0) / (a1 s + a0)` discretized by the
/// bilinear transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TustinSection {
    b1: f64,
    b0: f64,
    a1: f64,
    a0: f64,
    x_prev: f64,
    y_prev: f64,
}

impl TustinSection {
    pub fn new(b1: f64, b0: f64, a1: f64, a0: f64) -> Self {
        Self {
            b1,
            b0,
            a1,
            a0,
            x_prev: 0.0,
            y_prev: 0.0,
        }
    }

    pub fn washout(tw: f64) -> Self {
        Self::new(tw, 0.0, tw, 1.0)
    }

    /// `(1 + t1 s) / (1 + t2 s)`.
    pub fn lead_lag(t1: f64, t2: f64) -> Self {
        Self::new(t1, 1.0, t2, 1.0)
    }

    pub fn reset(&mut self) {
        self.x_prev = 0.0;
        self.y_prev = 0.0;
    }

    pub fn step(&mut self, x: f64, dt: f64) -> f64 {
        let k = 2.0 / dt;
        let n0 = self.b1 * k + self.b0;
        let n1 = self.b0 - self.b1 * k;
        let d0 = self.a1 * k + self.a0;
        let d1 = self.a0 - self.a1 * k;
        let y = (n0 * x + n1 * self.x_prev - d1 * self.y_prev) / d0;
        self.x_prev = x;
        self.y_prev = y;
        y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PssParams {
    pub kpss: f64,
    pub tw: f64,
    /// Lead-lag stages `(T1, T2)`, seconds.
    pub stages: Vec<(f64, f64)>,
    pub lo: f64,
    pub hi: f64,
}

impl Default for PssParams {
    fn default() -> Self {
        Self {
            kpss: 20.0,
            tw: 10.0,
            stages: vec![(0.05, 0.02), (0.05, 0.02)],
            lo: -0.2,
            hi: 0.2,
        }
    }
}

/// Speed-input stabilizer: gain, washout, lead-lag cascade, output clamp.
#[derive(Debug, Clone, PartialEq)]
pub struct Pss {
    pub params: PssParams,
    washout: TustinSection,
    stages: Vec<TustinSection>,
}

impl Pss {
    pub fn new(params: PssParams) -> Self {
        let washout = TustinSection::washout(params.tw);
        let stages = params
            .stages
            .iter()
            .map(|&(t1, t2)| TustinSection::lead_lag(t1, t2))
            .collect();
        Self {
            params,
            washout,
            stages,
        }
    }

    pub fn reset(&mut self) {
        self.washout.reset();
        self.stages.iter_mut().for_each(TustinSection::reset);
    }

    /// `delta_omega` is `ω − 1` in pu.
    pub fn step(&mut self, delta_omega: f64, dt: f64) -> f64 {
        let mut y = self.washout.step(self.params.kpss * delta_omega, dt);
        for s in &mut self.stages {
            y = s.step(y, dt);
        }
        y.clamp(self.params.lo, self.params.hi)
    }
}

/// One PID per controlled generator, each fed `1 − ω` of its own unit from
/// the delayed observation.
#[derive(Debug, Clone, PartialEq)]
pub struct PidController {
    units: Vec<usize>,
    pids: Vec<Pid>,
    dt: f64,
}

impl PidController {
    pub fn new(gains: PidGains, config: &EnvConfig) -> Self {
        let w = &config.weights;
        Self {
            units: config.controlled.clone(),
            pids: config
                .controlled
                .iter()
                .map(|_| Pid::new(gains, w.v, w.u))
                .collect(),
            dt: config.dt_control,
        }
    }
}

impl Controller for PidController {
    fn reset(&mut self) {
        self.pids.iter_mut().for_each(Pid::reset);
    }

    fn act(&mut self, obs: &Observation) -> Vec<f64> {
        self.units
            .iter()
            .zip(&mut self.pids)
            .map(|(&g, pid)| pid.step(1.0 - obs.speeds[g], self.dt))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PidGrid {
    pub kp: Vec<f64>,
    pub ki: Vec<f64>,
    pub kd: Vec<f64>,
}

impl PidGrid {
    pub fn points(&self) -> Vec<PidGains> {
        let mut out = Vec::with_capacity(self.kp.len() * self.ki.len() * self.kd.len());
        for &kp in &self.kp {
            for &ki in &self.ki {
                for &kd in &self.kd {
                    out.push(PidGains { kp, ki, kd });
                }
            }
        }
        out
    }
}

impl Default for PidGrid {
    /// Error is `1 − ω`, so damping gains are negative.
    fn default() -> Self {
        Self {
            kp: vec![0.0, -5.0, -10.0, -20.0, -40.0, -80.0],
            ki: vec![0.0, -5.0, -20.0],
            kd: vec![0.0, -0.5, -2.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningResult {
    pub best: PidGains,
    pub best_score: f64,
    /// Every evaluated grid point with its score, in grid order.
    pub log: Vec<(PidGains, f64)>,
}

/// Integral of `Σ_g |1 − ω_g|` over one episode driven by a PID bank on the
/// controlled generators; loss of synchronism scores infinity.
pub fn pid_score(config: &EnvConfig, gains: PidGains, seed: u64) -> Result<f64, EnvError> {
    let mut env = Environment::new(config.clone())?;
    let mut ctrl = PidController::new(gains, config);
    let out = rollout(&mut env, &mut ctrl, seed, false)?;
    Ok(if out.sync_lost {
        f64::INFINITY
    } else {
        out.speed_error_integral
    })
}

/// Grid search over PID gains on the given scenario; the first grid point
/// wins ties.
pub fn tune_pid(config: &EnvConfig, grid: &PidGrid, seed: u64) -> Result<TuningResult, EnvError> {
    let mut log = Vec::new();
    let mut best = (PidGains::ZERO, f64::INFINITY);
    let mut first = true;
    for gains in grid.points() {
        let score = pid_score(config, gains, seed)?;
        if first || score < best.1 {
            best = (gains, score);
            first = false;
        }
        log.push((gains, score));
    }
    Ok(TuningResult {
        best: best.0,
        best_score: best.1,
        log,
    })
}
