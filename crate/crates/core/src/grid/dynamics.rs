//! One-axis machine dynamics with static exciters, integrated by RK4.

use std::f64::consts::PI;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{GridCase, GridError, GridEvent, Network, PowerFlowSolution, ReducedNetwork, C64};

/// Machine and exciter constants converted to the system base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MachineParams {
    pub h: f64,
    pub d: f64,
    pub xd: f64,
    pub xd_prime: f64,
    pub td0_prime: f64,
    pub ka: f64,
    pub ta: f64,
    pub efd_min: f64,
    pub efd_max: f64,
    /// Synchronous speed, rad/s.
    pub omega_s: f64,
}

impl MachineParams {
    pub fn from_case(case: &GridCase) -> Vec<Self> {
        let omega_s = 2.0 * PI * case.nominal_freq;
        case.generators
            .iter()
            .map(|g| {
                let to_sys = case.system_base / g.rating;
                Self {
                    h: g.h / to_sys,
                    d: g.d / to_sys,
                    xd: g.xd * to_sys,
                    xd_prime: g.xd_prime * to_sys,
                    td0_prime: g.td0_prime,
                    ka: g.ka,
                    ta: g.ta,
                    efd_min: g.efd_min,
                    efd_max: g.efd_max,
                    omega_s,
                }
            })
            .collect()
    }
}

/// Differential states of every machine at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicState {
    pub t: f64,
    /// Rotor angle, rad, in the synchronously rotating frame.
    pub delta: Vec<f64>,
    /// Speed, pu (1.0 = synchronous).
    pub omega: Vec<f64>,
    pub eq_prime: Vec<f64>,
    pub efd: Vec<f64>,
    /// Mechanical power, pu on the system base; constant within an episode.
    pub pm: Vec<f64>,
    /// Exciter voltage reference back-solved at initialization.
    pub vref: Vec<f64>,
}

impl DynamicState {
    pub fn generator_count(&self) -> usize {
        self.delta.len()
    }

    pub fn is_finite(&self) -> bool {
        [&self.delta, &self.omega, &self.eq_prime, &self.efd]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn emf(&self) -> DVector<C64> {
        DVector::from_iterator(
            self.delta.len(),
            self.delta
                .iter()
                .zip(&self.eq_prime)
                .map(|(&d, &e)| C64::from_polar(e, d)),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateDerivative {
    pub delta: Vec<f64>,
    pub omega: Vec<f64>,
    pub eq_prime: Vec<f64>,
    pub efd: Vec<f64>,
}

impl StateDerivative {
    pub fn max_abs(&self) -> f64 {
        [&self.delta, &self.omega, &self.eq_prime, &self.efd]
            .iter()
            .flat_map(|v| v.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

struct NetworkSolution {
    pe: Vec<f64>,
    vt: Vec<f64>,
    id: Vec<f64>,
}

fn solve_network(reduced: &ReducedNetwork, delta: &[f64], eq_prime: &[f64]) -> NetworkSolution {
    let g = delta.len();
    let emf: Vec<C64> = delta
        .iter()
        .zip(eq_prime)
        .map(|(&d, &e)| C64::from_polar(e, d))
        .collect();
    let mut pe = vec![0.0; g];
    let mut vt = vec![0.0; g];
    let mut id = vec![0.0; g];
    for i in 0..g {
        let mut cur = C64::new(0.0, 0.0);
        let mut v = C64::new(0.0, 0.0);
        let row = reduced.gen_bus[i];
        for j in 0..g {
            cur += reduced.y_red[(i, j)] * emf[j];
            v += reduced.v_map[(row, j)] * emf[j];
        }
        pe[i] = (emf[i] * cur.conj()).re;
        vt[i] = v.norm();
        // Id + jIq = j·I·e^{-jδ}
        id[i] = -(cur * C64::from_polar(1.0, -delta[i])).im;
    }
    NetworkSolution { pe, vt, id }
}

/// Electrical power and terminal voltage magnitude of every machine.
pub fn electrical_power(reduced: &ReducedNetwork, state: &DynamicState) -> (Vec<f64>, Vec<f64>) {
    let sol = solve_network(reduced, &state.delta, &state.eq_prime);
    (sol.pe, sol.vt)
}

fn raw_efd_rate(m: &MachineParams, efd: f64, vt: f64, vref: f64, vpss: f64) -> f64 {
    (m.ka * (vref + vpss - vt) - efd) / m.ta
}

/// Time derivatives of all machine states.
///
/// The exciter rate is zeroed when `Efd` sits on a limit and would be driven
/// further out.
pub fn derivatives(
    state: &DynamicState,
    reduced: &ReducedNetwork,
    control: &[f64],
    machines: &[MachineParams],
) -> Result<StateDerivative, GridError> {
    let g = state.generator_count();
    if control.len() != g {
        return Err(GridError::Dimension {
            expected: g,
            got: control.len(),
        });
    }
    let sol = solve_network(reduced, &state.delta, &state.eq_prime);
    let mut out = StateDerivative {
        delta: vec![0.0; g],
        omega: vec![0.0; g],
        eq_prime: vec![0.0; g],
        efd: vec![0.0; g],
    };
    for i in 0..g {
        let m = &machines[i];
        out.delta[i] = m.omega_s * (state.omega[i] - 1.0);
        out.omega[i] = (state.pm[i] - sol.pe[i] - m.d * (state.omega[i] - 1.0)) / (2.0 * m.h);
        out.eq_prime[i] =
            (state.efd[i] - state.eq_prime[i] - (m.xd - m.xd_prime) * sol.id[i]) / m.td0_prime;
        let raw = raw_efd_rate(m, state.efd[i], sol.vt[i], state.vref[i], control[i]);
        out.efd[i] = if (state.efd[i] >= m.efd_max && raw > 0.0)
            || (state.efd[i] <= m.efd_min && raw < 0.0)
        {
            0.0
        } else {
            raw
        };
    }
    Ok(out)
}

/// Back-solves the machine states that make the power-flow operating point an
/// equilibrium with zero stabilizing input.
pub fn init_dynamic_state(
    case: &GridCase,
    pf: &PowerFlowSolution,
) -> Result<DynamicState, GridError> {
    let machines = MachineParams::from_case(case);
    let g = case.generators.len();
    let mut state = DynamicState {
        t: 0.0,
        delta: vec![0.0; g],
        omega: vec![1.0; g],
        eq_prime: vec![0.0; g],
        efd: vec![0.0; g],
        pm: vec![0.0; g],
        vref: vec![0.0; g],
    };
    for (i, m) in machines.iter().enumerate() {
        let bus = case.index_of_bus(case.generators[i].bus)?;
        let v = pf.voltage(bus);
        let (p, q) = pf.generator_output(case, i);
        let cur = (C64::new(p, q) / v).conj();
        let e = v + C64::new(0.0, m.xd_prime) * cur;
        let delta = e.arg();
        let id = -(cur * C64::from_polar(1.0, -delta)).im;
        let efd = e.norm() + (m.xd - m.xd_prime) * id;
        if efd < m.efd_min || efd > m.efd_max {
            return Err(GridError::FieldLimit {
                gen: i,
                efd,
                min: m.efd_min,
                max: m.efd_max,
            });
        }
        state.delta[i] = delta;
        state.eq_prime[i] = e.norm();
        state.efd[i] = efd;
        state.pm[i] = (e * cur.conj()).re;
        state.vref[i] = v.norm() + efd / m.ka;
    }
    // Ka/Ta amplifies power-flow rounding in Vt; balance against the reduced
    // network the integrator actually sees.
    let net = Network::new(case, pf)?;
    let (pe, vt) = electrical_power(net.reduced(), &state);
    for (i, m) in machines.iter().enumerate() {
        state.pm[i] = pe[i];
        state.vref[i] = vt[i] + state.efd[i] / m.ka;
    }
    Ok(state)
}

/// One classical fourth-order Runge-Kutta step of `dy/dt = f(t, y)`.
pub fn rk4_step<F>(f: F, t: f64, y: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
{
    let axpy =
        |a: f64, k: &[f64]| -> Vec<f64> { y.iter().zip(k).map(|(yi, ki)| yi + a * ki).collect() };
    let k1 = f(t, y);
    let k2 = f(t + 0.5 * h, &axpy(0.5 * h, &k1));
    let k3 = f(t + 0.5 * h, &axpy(0.5 * h, &k2));
    let k4 = f(t + h, &axpy(h, &k3));
    y.iter()
        .enumerate()
        .map(|(i, yi)| yi + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Limiter {
    Free,
    AtMax,
    AtMin,
}

struct Stepper<'a> {
    reduced: &'a ReducedNetwork,
    control: &'a [f64],
    machines: &'a [MachineParams],
    pm: &'a [f64],
    vref: &'a [f64],
}

// Packed layout: [delta | omega | eq_prime | efd], each of length G.
impl Stepper<'_> {
    fn g(&self) -> usize {
        self.pm.len()
    }

    fn field(&self, y: &[f64], modes: &[Limiter]) -> Vec<f64> {
        let g = self.g();
        let (delta, rest) = y.split_at(g);
        let (omega, rest) = rest.split_at(g);
        let (eqp, efd) = rest.split_at(g);
        let sol = solve_network(self.reduced, delta, eqp);
        let mut out = vec![0.0; 4 * g];
        for i in 0..g {
            let m = &self.machines[i];
            out[i] = m.omega_s * (omega[i] - 1.0);
            out[g + i] = (self.pm[i] - sol.pe[i] - m.d * (omega[i] - 1.0)) / (2.0 * m.h);
            out[2 * g + i] = (efd[i] - eqp[i] - (m.xd - m.xd_prime) * sol.id[i]) / m.td0_prime;
            out[3 * g + i] = match modes[i] {
                Limiter::Free => raw_efd_rate(m, efd[i], sol.vt[i], self.vref[i], self.control[i]),
                Limiter::AtMax | Limiter::AtMin => 0.0,
            };
        }
        out
    }

    fn raw_rates(&self, y: &[f64]) -> Vec<f64> {
        let g = self.g();
        let sol = solve_network(self.reduced, &y[..g], &y[2 * g..3 * g]);
        (0..g)
            .map(|i| {
                raw_efd_rate(
                    &self.machines[i],
                    y[3 * g + i],
                    sol.vt[i],
                    self.vref[i],
                    self.control[i],
                )
            })
            .collect()
    }

    fn modes_at(&self, y: &[f64]) -> Vec<Limiter> {
        let g = self.g();
        let raw = self.raw_rates(y);
        (0..g)
            .map(|i| {
                let m = &self.machines[i];
                let efd = y[3 * g + i];
                if efd >= m.efd_max && raw[i] >= 0.0 {
                    Limiter::AtMax
                } else if efd <= m.efd_min && raw[i] <= 0.0 {
                    Limiter::AtMin
                } else {
                    Limiter::Free
                }
            })
            .collect()
    }

    /// Generators whose limiter mode is no longer consistent at `y`.
    fn switching(&self, y: &[f64], modes: &[Limiter]) -> Vec<usize> {
        let g = self.g();
        let mut raw = None;
        let mut out = Vec::new();
        for i in 0..g {
            let m = &self.machines[i];
            let efd = y[3 * g + i];
            let fired = match modes[i] {
                Limiter::Free => efd > m.efd_max || efd < m.efd_min,
                Limiter::AtMax => raw.get_or_insert_with(|| self.raw_rates(y))[i] < 0.0,
                Limiter::AtMin => raw.get_or_insert_with(|| self.raw_rates(y))[i] > 0.0,
            };
            if fired {
                out.push(i);
            }
        }
        out
    }

    fn advance(&self, y: &[f64], h: f64, modes: &[Limiter]) -> Vec<f64> {
        rk4_step(|_, x| self.field(x, modes), 0.0, y, h)
    }
}

const MAX_SEGMENTS: usize = 64;

/// Advances every differential state by `dt` with classical RK4.
///
/// Exciter limits are treated as a hybrid mode: a step that would carry `Efd`
/// across a limit (or release it from one) is split at the switching instant,
/// located by bisection, so the limiter does not degrade the order of the
/// integrator. `Efd` is inside its limits on return.
pub fn step_rk4(
    state: &DynamicState,
    reduced: &ReducedNetwork,
    control: &[f64],
    dt: f64,
    machines: &[MachineParams],
) -> Result<DynamicState, GridError> {
    let g = state.generator_count();
    if control.len() != g {
        return Err(GridError::Dimension {
            expected: g,
            got: control.len(),
        });
    }
    let stepper = Stepper {
        reduced,
        control,
        machines,
        pm: &state.pm,
        vref: &state.vref,
    };
    let mut y: Vec<f64> = [&state.delta, &state.omega, &state.eq_prime, &state.efd]
        .iter()
        .flat_map(|v| v.iter().copied())
        .collect();
    for i in 0..g {
        y[3 * g + i] = y[3 * g + i].clamp(machines[i].efd_min, machines[i].efd_max);
    }
    let mut modes = stepper.modes_at(&y);
    let mut remaining = dt;
    let mut segments = 0;
    while remaining > 0.0 {
        let trial = stepper.advance(&y, remaining, &modes);
        if !trial.iter().all(|x| x.is_finite()) {
            return Err(GridError::NonFinite { t: state.t });
        }
        if segments >= MAX_SEGMENTS || stepper.switching(&trial, &modes).is_empty() {
            y = trial;
            break;
        }
        // largest sub-step that keeps every limiter mode consistent
        let (mut lo, mut hi) = (0.0, remaining);
        while hi - lo > 1e-13 * dt.max(1.0) {
            let mid = 0.5 * (lo + hi);
            if stepper
                .switching(&stepper.advance(&y, mid, &modes), &modes)
                .is_empty()
            {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let fired = stepper.switching(&stepper.advance(&y, hi, &modes), &modes);
        if lo > 0.0 {
            y = stepper.advance(&y, lo, &modes);
        }
        remaining -= lo;
        for &i in &fired {
            let m = &machines[i];
            let efd = &mut y[3 * g + i];
            modes[i] = match modes[i] {
                Limiter::Free if *efd >= 0.5 * (m.efd_max + m.efd_min) => {
                    *efd = m.efd_max;
                    Limiter::AtMax
                }
                Limiter::Free => {
                    *efd = m.efd_min;
                    Limiter::AtMin
                }
                Limiter::AtMax | Limiter::AtMin => Limiter::Free,
            };
        }
        segments += 1;
    }

    let mut next = state.clone();
    next.t = state.t + dt;
    next.delta.copy_from_slice(&y[..g]);
    next.omega.copy_from_slice(&y[g..2 * g]);
    next.eq_prime.copy_from_slice(&y[2 * g..3 * g]);
    for i in 0..g {
        next.efd[i] = y[3 * g + i].clamp(machines[i].efd_min, machines[i].efd_max);
    }
    if !next.is_finite() || next.omega.iter().any(|&w| w <= 0.0) {
        return Err(GridError::NonFinite { t: next.t });
    }
    Ok(next)
}

/// Integrates with zero stabilizing input from `state` to `t_end`, applying
/// `events` at the step boundary nearest their time. Returns the state after
/// every step, starting with `state` itself.
pub fn simulate(
    network: &mut Network,
    state: DynamicState,
    machines: &[MachineParams],
    events: &[GridEvent],
    dt: f64,
    t_end: f64,
) -> Result<Vec<DynamicState>, GridError> {
    let g = state.generator_count();
    let zero = vec![0.0; g];
    let t0 = state.t;
    let steps = ((t_end - t0) / dt).round() as usize;
    let mut schedule: Vec<(usize, GridEvent)> = events
        .iter()
        .map(|e| (((e.time - t0) / dt).round().max(0.0) as usize, *e))
        .collect();
    schedule.sort_by_key(|(k, _)| *k);
    let mut next_event = 0;
    let mut out = Vec::with_capacity(steps + 1);
    let mut s = state;
    for k in 0..steps {
        while next_event < schedule.len() && schedule[next_event].0 <= k {
            network.apply_event(&schedule[next_event].1)?;
            next_event += 1;
        }
        let stepped = step_rk4(&s, network.reduced(), &zero, dt, machines)?;
        out.push(std::mem::replace(&mut s, stepped));
        s.t = t0 + (k + 1) as f64 * dt;
    }
    out.push(s);
    Ok(out)
}
