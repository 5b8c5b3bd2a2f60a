//! Newton-Raphson power flow in polar coordinates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::ybus::{branch_stamps, build_admittance};
use super::{BusKind, GridCase, GridError, C64};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowOptions {
    pub flat_start: bool,
    /// Infinity-norm tolerance on the power mismatch, pu.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        Self {
            flat_start: true,
            tol: 1e-10,
            max_iter: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSolution {
    pub vm: Vec<f64>,
    /// Radians; the slack angle is exactly zero.
    pub va: Vec<f64>,
    /// Net injection (generation minus load), pu on the system base.
    pub p_inj: Vec<f64>,
    pub q_inj: Vec<f64>,
    pub mismatch_norm: f64,
    pub iterations: usize,
}

impl PowerFlowSolution {
    pub fn voltage(&self, bus: usize) -> C64 {
        C64::from_polar(self.vm[bus], self.va[bus])
    }

    /// Machine output (P, Q) in pu at a generator bus: injection plus local load.
    pub fn generator_output(&self, case: &GridCase, gen: usize) -> (f64, f64) {
        let g = &case.generators[gen];
        let k = case.index_of_bus(g.bus).expect("validated case");
        let bus = &case.buses[k];
        (
            self.p_inj[k] + bus.p_load / case.system_base,
            self.q_inj[k] + bus.q_load / case.system_base,
        )
    }

    /// Active power leaving the `from` terminal of line `k`, in MW.
    pub fn line_flow_mw(&self, case: &GridCase, k: usize) -> f64 {
        let line = &case.lines[k];
        if !line.in_service {
            return 0.0;
        }
        let f = case.index_of_bus(line.from_bus).expect("validated case");
        let t = case.index_of_bus(line.to_bus).expect("validated case");
        let (yff, yft, _, _) = branch_stamps(line);
        let vf = self.voltage(f);
        let i_from = yff * vf + yft * self.voltage(t);
        (vf * i_from.conj()).re * case.system_base
    }

    /// Active power exported from `from_area` to `to_area` over the branches
    /// joining them, metered at the `from_area` terminals, MW.
    pub fn area_transfer_mw(&self, case: &GridCase, from_area: u32, to_area: u32) -> f64 {
        let mut total = 0.0;
        for (k, line) in case.lines.iter().enumerate() {
            let a_f = case.area_of(line.from_bus);
            let a_t = case.area_of(line.to_bus);
            if a_f == Some(from_area) && a_t == Some(to_area) {
                total += self.line_flow_mw(case, k);
            } else if a_f == Some(to_area) && a_t == Some(from_area) {
                // metered at the to-side of the stored orientation
                let f = case.index_of_bus(line.to_bus).expect("validated case");
                let t = case.index_of_bus(line.from_bus).expect("validated case");
                let (_, _, ytf, ytt) = branch_stamps(line);
                if line.in_service {
                    let vt = self.voltage(f);
                    let i = ytf * self.voltage(t) + ytt * vt;
                    total += (vt * i.conj()).re * case.system_base;
                }
            }
        }
        total
    }
}

fn specified_injections(case: &GridCase) -> (Vec<f64>, Vec<f64>) {
    let base = case.system_base;
    let mut p: Vec<f64> = case.buses.iter().map(|b| -b.p_load / base).collect();
    let q: Vec<f64> = case.buses.iter().map(|b| -b.q_load / base).collect();
    for g in &case.generators {
        let k = case.index_of_bus(g.bus).expect("validated case");
        p[k] += g.p_dispatch / base;
    }
    (p, q)
}

fn injections(y: &DMatrix<C64>, v: &DVector<C64>) -> DVector<C64> {
    let i = y * v;
    v.zip_map(&i, |vk, ik| vk * ik.conj())
}

/// Solves the bus power-flow equations by Newton-Raphson.
///
/// Slack holds `V_setpoint ∠ 0`, PV buses hold `V_setpoint` and their
/// scheduled active power, PQ buses their load. `iterations` counts Newton
/// corrections, so an already balanced start reports zero.
pub fn solve_power_flow(
    case: &GridCase,
    opts: &PowerFlowOptions,
) -> Result<PowerFlowSolution, GridError> {
    case.validate()?;
    let y = build_admittance(case)?;
    let n = case.buses.len();
    let (p_spec, q_spec) = specified_injections(case);
    let slack = case.slack_index();
    let pq: Vec<usize> = (0..n)
        .filter(|&k| case.buses[k].kind == BusKind::Pq)
        .collect();
    let pvpq: Vec<usize> = (0..n).filter(|&k| k != slack).collect();

    let mut vm: Vec<f64> = case
        .buses
        .iter()
        .map(|b| {
            if b.kind == BusKind::Pq {
                1.0
            } else {
                b.v_setpoint
            }
        })
        .collect();
    let mut va = vec![0.0; n];
    if !opts.flat_start {
        va = dc_angles(case, &y, &p_spec, slack)?;
    }

    let npvpq = pvpq.len();
    let npq = pq.len();
    let mut iterations = 0;
    loop {
        let v = DVector::from_iterator(n, (0..n).map(|k| C64::from_polar(vm[k], va[k])));
        let s = injections(&y, &v);
        let mut f = DVector::<f64>::zeros(npvpq + npq);
        for (r, &k) in pvpq.iter().enumerate() {
            f[r] = s[k].re - p_spec[k];
        }
        for (r, &k) in pq.iter().enumerate() {
            f[npvpq + r] = s[k].im - q_spec[k];
        }
        let mismatch = f.amax();
        if !mismatch.is_finite() {
            return Err(GridError::NotConverged {
                iterations,
                mismatch,
            });
        }
        if mismatch <= opts.tol {
            let p_inj = s.iter().map(|c| c.re).collect();
            let q_inj = s.iter().map(|c| c.im).collect();
            return Ok(PowerFlowSolution {
                vm,
                va,
                p_inj,
                q_inj,
                mismatch_norm: mismatch,
                iterations,
            });
        }
        if iterations >= opts.max_iter {
            return Err(GridError::NotConverged {
                iterations,
                mismatch,
            });
        }

        let (ds_dva, ds_dvm) = power_derivatives(&y, &v);
        let mut jac = DMatrix::<f64>::zeros(npvpq + npq, npvpq + npq);
        for (r, &i) in pvpq.iter().enumerate() {
            for (c, &j) in pvpq.iter().enumerate() {
                jac[(r, c)] = ds_dva[(i, j)].re;
            }
            for (c, &j) in pq.iter().enumerate() {
                jac[(r, npvpq + c)] = ds_dvm[(i, j)].re;
            }
        }
        for (r, &i) in pq.iter().enumerate() {
            for (c, &j) in pvpq.iter().enumerate() {
                jac[(npvpq + r, c)] = ds_dva[(i, j)].im;
            }
            for (c, &j) in pq.iter().enumerate() {
                jac[(npvpq + r, npvpq + c)] = ds_dvm[(i, j)].im;
            }
        }
        let dx = jac
            .lu()
            .solve(&(-f))
            .filter(|dx| dx.iter().all(|x| x.is_finite()))
            .ok_or(GridError::SingularJacobian(iterations))?;
        for (r, &k) in pvpq.iter().enumerate() {
            va[k] += dx[r];
        }
        for (r, &k) in pq.iter().enumerate() {
            vm[k] += dx[npvpq + r];
        }
        iterations += 1;
    }
}

/// Partial derivatives of the complex bus injections with respect to the
/// voltage angles and magnitudes.
fn power_derivatives(y: &DMatrix<C64>, v: &DVector<C64>) -> (DMatrix<C64>, DMatrix<C64>) {
    let n = v.len();
    let ibus = y * v;
    let vnorm = v.map(|c| c / c.norm());
    let j = C64::new(0.0, 1.0);
    let mut ds_dva = DMatrix::<C64>::zeros(n, n);
    let mut ds_dvm = DMatrix::<C64>::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            let diag = if r == c {
                C64::new(1.0, 0.0)
            } else {
                C64::new(0.0, 0.0)
            };
            // dS/dθ = j diag(V) conj(diag(I) - Y diag(V))
            ds_dva[(r, c)] = j * v[r] * (diag * ibus[r] - y[(r, c)] * v[c]).conj();
            // dS/d|V| = diag(V) conj(Y diag(V/|V|)) + conj(diag(I)) diag(V/|V|)
            ds_dvm[(r, c)] =
                v[r] * (y[(r, c)] * vnorm[c]).conj() + diag * ibus[r].conj() * vnorm[r];
        }
    }
    (ds_dva, ds_dvm)
}

/// Linearized (DC) angle estimate used as a warm start.
fn dc_angles(
    case: &GridCase,
    y: &DMatrix<C64>,
    p_spec: &[f64],
    slack: usize,
) -> Result<Vec<f64>, GridError> {
    let n = case.buses.len();
    let idx: Vec<usize> = (0..n).filter(|&k| k != slack).collect();
    let m = idx.len();
    let b = DMatrix::from_fn(m, m, |r, c| -y[(idx[r], idx[c])].im);
    let p = DVector::from_iterator(m, idx.iter().map(|&k| p_spec[k]));
    let theta = b.lu().solve(&p).ok_or(GridError::SingularJacobian(0))?;
    let mut va = vec![0.0; n];
    for (r, &k) in idx.iter().enumerate() {
        va[k] = theta[r];
    }
    Ok(va)
}
