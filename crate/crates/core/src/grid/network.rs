//! Constant-impedance network and its reduction to generator internal nodes.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use super::ybus::build_admittance_with;
use super::{EventKind, GridCase, GridError, GridEvent, PowerFlowSolution, C64};

/// Connection of a machine's internal EMF node to its terminal bus through
/// `j·xd_prime` (pu on the system base).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorBranch {
    pub bus: usize,
    pub xd_prime: f64,
}

/// Admittance among generator internal nodes after eliminating every bus.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedNetwork {
    /// `G × G`, relates internal EMFs to injected internal currents.
    pub y_red: DMatrix<C64>,
    /// Terminal bus index of each generator.
    pub gen_bus: Vec<usize>,
    /// `N × G`; bus voltages are `v_map · E`.
    pub v_map: DMatrix<C64>,
}

impl ReducedNetwork {
    pub fn generator_count(&self) -> usize {
        self.y_red.nrows()
    }

    pub fn currents(&self, emf: &DVector<C64>) -> DVector<C64> {
        &self.y_red * emf
    }

    pub fn bus_voltages(&self, emf: &DVector<C64>) -> DVector<C64> {
        &self.v_map * emf
    }
}

/// Gaussian elimination of every node not listed in `keep`.
///
/// Returns the reduced matrix (rows/cols in `keep` order) and the map from
/// kept-node voltages to eliminated-node voltages (rows in ascending index
/// order of the eliminated nodes).
pub fn kron_reduce_matrix(
    y: &DMatrix<C64>,
    keep: &[usize],
) -> Result<(DMatrix<C64>, DMatrix<C64>), GridError> {
    let n = y.nrows();
    let drop: Vec<usize> = (0..n).filter(|k| !keep.contains(k)).collect();
    let g = keep.len();
    let m = drop.len();
    let y_kk = DMatrix::from_fn(g, g, |r, c| y[(keep[r], keep[c])]);
    if m == 0 {
        return Ok((y_kk, DMatrix::zeros(0, g)));
    }
    let y_kd = DMatrix::from_fn(g, m, |r, c| y[(keep[r], drop[c])]);
    let y_dk = DMatrix::from_fn(m, g, |r, c| y[(drop[r], keep[c])]);
    let y_dd = DMatrix::from_fn(m, m, |r, c| y[(drop[r], drop[c])]);

    let scale = y_dd.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let lu = y_dd.lu();
    let u = lu.u();
    let min_pivot = (0..m)
        .map(|k| u[(k, k)].norm())
        .fold(f64::INFINITY, f64::min);
    if !(min_pivot > 1e-12 * scale.max(1.0)) {
        return Err(GridError::SingularReduction(format!(
            "pivot {min_pivot:.3e} relative to {scale:.3e}"
        )));
    }
    let x = lu
        .solve(&y_dk)
        .ok_or_else(|| GridError::SingularReduction("LU solve failed".into()))?;
    let reduced = y_kk - &y_kd * &x;
    Ok((reduced, -x))
}

/// Reduces the bus network (with `load_admittances` as bus shunts) to the
/// generator internal nodes.
pub fn kron_reduce(
    ybus: &DMatrix<C64>,
    load_admittances: &[C64],
    generators: &[GeneratorBranch],
) -> Result<ReducedNetwork, GridError> {
    let n = ybus.nrows();
    let g = generators.len();
    if load_admittances.len() != n {
        return Err(GridError::Dimension {
            expected: n,
            got: load_admittances.len(),
        });
    }
    let mut full = DMatrix::<C64>::zeros(n + g, n + g);
    full.view_mut((0, 0), (n, n)).copy_from(ybus);
    for (k, y) in load_admittances.iter().enumerate() {
        full[(k, k)] += *y;
    }
    for (i, gen) in generators.iter().enumerate() {
        let yg = C64::new(0.0, -1.0 / gen.xd_prime);
        let node = n + i;
        full[(node, node)] += yg;
        full[(gen.bus, gen.bus)] += yg;
        full[(node, gen.bus)] -= yg;
        full[(gen.bus, node)] -= yg;
    }
    let keep: Vec<usize> = (n..n + g).collect();
    let (y_red, v_map) = kron_reduce_matrix(&full, &keep)?;
    Ok(ReducedNetwork {
        y_red,
        gen_bus: generators.iter().map(|g| g.bus).collect(),
        v_map,
    })
}

/// Mutable network context: topology, shunt loads, faults and the current
/// reduced network.
#[derive(Debug, Clone)]
pub struct Network {
    case: GridCase,
    line_status: Vec<bool>,
    /// Solved voltage magnitudes used to convert MW changes into admittance.
    v0: Vec<f64>,
    load_y: Vec<C64>,
    fault_y: Vec<C64>,
    pv_mw: Vec<f64>,
    generators: Vec<GeneratorBranch>,
    ybus: DMatrix<C64>,
    reduced: ReducedNetwork,
}

impl Network {
    /// Converts bus loads to constant admittances at the solved voltages and
    /// reduces the network. `case` loads are net of any PV output.
    pub fn new(case: &GridCase, pf: &PowerFlowSolution) -> Result<Self, GridError> {
        Self::with_pv(case, pf, vec![0.0; case.pv_units.len()])
    }

    /// As [`Network::new`], recording the PV output (MW) already netted into
    /// the bus loads so that later `PvSet` events apply the difference.
    pub fn with_pv(
        case: &GridCase,
        pf: &PowerFlowSolution,
        pv_mw: Vec<f64>,
    ) -> Result<Self, GridError> {
        let n = case.buses.len();
        let base = case.system_base;
        let v0 = pf.vm.clone();
        let load_y = case
            .buses
            .iter()
            .zip(&v0)
            .map(|(b, v)| C64::new(b.p_load / base, -b.q_load / base) / (v * v))
            .collect();
        let generators = case
            .generators
            .iter()
            .map(|g| GeneratorBranch {
                bus: case.index_of_bus(g.bus).expect("validated case"),
                xd_prime: g.xd_prime * base / g.rating,
            })
            .collect();
        let line_status = case.lines.iter().map(|l| l.in_service).collect::<Vec<_>>();
        let ybus = build_admittance_with(case, &line_status)?;
        let mut net = Self {
            case: case.clone(),
            line_status,
            v0,
            load_y,
            fault_y: vec![C64::new(0.0, 0.0); n],
            pv_mw,
            generators,
            reduced: ReducedNetwork {
                y_red: DMatrix::zeros(0, 0),
                gen_bus: vec![],
                v_map: DMatrix::zeros(0, 0),
            },
            ybus,
        };
        net.check_connected(&net.line_status)?;
        net.reduced = net.reduce(&net.ybus, &net.load_y, &net.fault_y)?;
        Ok(net)
    }

    pub fn reduced(&self) -> &ReducedNetwork {
        &self.reduced
    }

    pub fn case(&self) -> &GridCase {
        &self.case
    }

    pub fn ybus(&self) -> &DMatrix<C64> {
        &self.ybus
    }

    pub fn generator_branches(&self) -> &[GeneratorBranch] {
        &self.generators
    }

    /// Total shunt admittance per bus (loads plus faults).
    pub fn shunt_admittances(&self) -> Vec<C64> {
        self.load_y
            .iter()
            .zip(&self.fault_y)
            .map(|(a, b)| a + b)
            .collect()
    }

    pub fn pv_output_mw(&self) -> &[f64] {
        &self.pv_mw
    }

    fn reduce(
        &self,
        ybus: &DMatrix<C64>,
        load_y: &[C64],
        fault_y: &[C64],
    ) -> Result<ReducedNetwork, GridError> {
        let shunts: Vec<C64> = load_y.iter().zip(fault_y).map(|(a, b)| a + b).collect();
        kron_reduce(ybus, &shunts, &self.generators)
    }

    /// Every bus must reach a generator through in-service branches.
    fn check_connected(&self, status: &[bool]) -> Result<(), GridError> {
        let n = self.case.buses.len();
        let index = self.case.bus_index();
        let mut adj = vec![Vec::new(); n];
        for (k, line) in self.case.lines.iter().enumerate() {
            if status[k] {
                let f = index[&line.from_bus];
                let t = index[&line.to_bus];
                adj[f].push(t);
                adj[t].push(f);
            }
        }
        let mut seen = vec![false; n];
        let mut queue: VecDeque<usize> = self.generators.iter().map(|g| g.bus).collect();
        for &b in &queue {
            seen[b] = true;
        }
        while let Some(b) = queue.pop_front() {
            for &nb in &adj[b] {
                if !seen[nb] {
                    seen[nb] = true;
                    queue.push_back(nb);
                }
            }
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(GridError::SingularReduction(format!(
                "bus {} is islanded from every generator",
                self.case.buses[k].id
            )));
        }
        Ok(())
    }

    /// Applies a disturbance and re-reduces. On error the context is unchanged.
    pub fn apply_event(&mut self, event: &GridEvent) -> Result<(), GridError> {
        let base = self.case.system_base;
        match event.kind {
            EventKind::BusFault | EventKind::FaultClear | EventKind::LoadStep => {
                let k = self
                    .case
                    .index_of_bus(event.target)
                    .map_err(|_| GridError::UnknownTarget(event.target))?;
                let mut load_y = self.load_y.clone();
                let mut fault_y = self.fault_y.clone();
                match event.kind {
                    EventKind::BusFault => fault_y[k] = C64::new(event.magnitude, 0.0),
                    EventKind::FaultClear => fault_y[k] = C64::new(0.0, 0.0),
                    _ => {
                        load_y[k] +=
                            C64::new(event.magnitude / base / (self.v0[k] * self.v0[k]), 0.0)
                    }
                }
                let reduced = self.reduce(&self.ybus, &load_y, &fault_y)?;
                self.load_y = load_y;
                self.fault_y = fault_y;
                self.reduced = reduced;
            }
            EventKind::LineTrip => {
                let idx = event.target as usize;
                if idx >= self.case.lines.len() {
                    return Err(GridError::UnknownTarget(event.target));
                }
                let mut status = self.line_status.clone();
                status[idx] = false;
                self.check_connected(&status)?;
                let ybus = build_admittance_with(&self.case, &status)?;
                let reduced = self.reduce(&ybus, &self.load_y, &self.fault_y)?;
                self.line_status = status;
                self.ybus = ybus;
                self.reduced = reduced;
            }
            EventKind::PvSet => {
                let unit = self
                    .case
                    .pv_units
                    .iter()
                    .position(|p| p.bus == event.target)
                    .ok_or(GridError::UnknownTarget(event.target))?;
                self.set_pv_output(unit, event.magnitude)?;
            }
        }
        Ok(())
    }

    /// Sets PV unit `unit` to `mw`, modelled as a negative conductance at its bus.
    pub fn set_pv_output(&mut self, unit: usize, mw: f64) -> Result<(), GridError> {
        if unit >= self.pv_mw.len() {
            return Err(GridError::UnknownTarget(unit as u32));
        }
        let mut all = self.pv_mw.clone();
        all[unit] = mw;
        self.set_pv_outputs(&all)
    }

    /// Sets every PV unit at once with a single re-reduction.
    pub fn set_pv_outputs(&mut self, mw: &[f64]) -> Result<(), GridError> {
        if mw.len() != self.pv_mw.len() {
            return Err(GridError::Dimension {
                expected: self.pv_mw.len(),
                got: mw.len(),
            });
        }
        let mut load_y = self.load_y.clone();
        for (unit, pv) in self.case.pv_units.iter().enumerate() {
            let k = self.case.index_of_bus(pv.bus)?;
            let delta = mw[unit] - self.pv_mw[unit];
            load_y[k] -= C64::new(
                delta / self.case.system_base / (self.v0[k] * self.v0[k]),
                0.0,
            );
        }
        let reduced = self.reduce(&self.ybus, &load_y, &self.fault_y)?;
        self.load_y = load_y;
        self.pv_mw.copy_from_slice(mw);
        self.reduced = reduced;
        Ok(())
    }
}
