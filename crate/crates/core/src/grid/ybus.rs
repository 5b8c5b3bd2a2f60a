use nalgebra::DMatrix;

use super::{GridCase, GridError, Line, C64};

/// Series admittance and the four pi-model stamps of one branch.
///
/// Returns `(y_ff, y_ft, y_tf, y_tt)` for a branch with the off-nominal tap on
/// the `from` side.
pub(crate) fn branch_stamps(line: &Line) -> (C64, C64, C64, C64) {
    let ys = C64::new(1.0, 0.0) / C64::new(line.r, line.x);
    let half_b = C64::new(0.0, line.b_shunt / 2.0);
    let tap = line.tap;
    let yff = (ys + half_b) / (tap * tap);
    let yft = -ys / tap;
    let ytt = ys + half_b;
    (yff, yft, yft, ytt)
}

/// Assembles the complex bus admittance matrix from the in-service branches.
///
/// Off-diagonal `(i, j)` holds `-y_ij` summed over parallel branches; the
/// diagonal carries the series admittances plus half the line charging.
/// Rows and columns follow the order of `case.buses`.
pub fn build_admittance(case: &GridCase) -> Result<DMatrix<C64>, GridError> {
    build_admittance_with(case, &vec![true; case.lines.len()])
}

/// Same as [`build_admittance`] with a per-line status mask applied on top of
/// `in_service`.
pub(crate) fn build_admittance_with(
    case: &GridCase,
    line_status: &[bool],
) -> Result<DMatrix<C64>, GridError> {
    let index = case.bus_index();
    if index.len() != case.buses.len() {
        let mut seen = std::collections::HashSet::new();
        for b in &case.buses {
            if !seen.insert(b.id) {
                return Err(GridError::DuplicateBus(b.id));
            }
        }
    }
    let n = case.buses.len();
    let mut y = DMatrix::<C64>::zeros(n, n);
    for (k, line) in case.lines.iter().enumerate() {
        let f = *index
            .get(&line.from_bus)
            .ok_or_else(|| GridError::UnknownBus {
                bus: line.from_bus,
                context: format!("line {k}"),
            })?;
        let t = *index
            .get(&line.to_bus)
            .ok_or_else(|| GridError::UnknownBus {
                bus: line.to_bus,
                context: format!("line {k}"),
            })?;
        if !line.in_service || !line_status[k] {
            continue;
        }
        let (yff, yft, ytf, ytt) = branch_stamps(line);
        y[(f, f)] += yff;
        y[(f, t)] += yft;
        y[(t, f)] += ytf;
        y[(t, t)] += ytt;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Bus, BusKind};

    fn two_bus(in_service: bool, b_shunt: f64) -> GridCase {
        GridCase {
            name: String::new(),
            system_base: 100.0,
            nominal_freq: 60.0,
            buses: vec![
                Bus {
                    id: 1,
                    kind: BusKind::Slack,
                    v_setpoint: 1.0,
                    p_load: 0.0,
                    q_load: 0.0,
                    area: 1,
                },
                Bus {
                    id: 2,
                    kind: BusKind::Pq,
                    v_setpoint: 1.0,
                    p_load: 0.0,
                    q_load: 0.0,
                    area: 1,
                },
            ],
            lines: vec![Line {
                from_bus: 1,
                to_bus: 2,
                r: 0.0,
                x: 0.1,
                b_shunt,
                in_service,
                tap: 1.0,
            }],
            generators: vec![],
            pv_units: vec![],
        }
    }

    #[test]
    fn single_reactive_line() {
        let y = build_admittance(&two_bus(true, 0.0)).unwrap();
        // y_series = 1/(j0.1) = -10j, off-diagonal = +10j
        assert!((y[(0, 1)] - C64::new(0.0, 10.0)).norm() < 1e-12);
        assert!((y[(0, 1)].norm() - 10.0).abs() < 1e-12);
        assert!((y[(0, 0)] - C64::new(0.0, -10.0)).norm() < 1e-12);
    }

    #[test]
    fn out_of_service_leaves_zeros() {
        let y = build_admittance(&two_bus(false, 0.3)).unwrap();
        assert!(y.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn unknown_bus_is_rejected() {
        let mut case = two_bus(true, 0.0);
        case.lines[0].to_bus = 9;
        assert!(matches!(
            build_admittance(&case),
            Err(GridError::UnknownBus { bus: 9, .. })
        ));
    }

    #[test]
    fn duplicate_bus_is_rejected() {
        let mut case = two_bus(true, 0.0);
        case.buses[1].id = 1;
        assert!(matches!(
            build_admittance(&case),
            Err(GridError::DuplicateBus(1))
        ));
    }
}
