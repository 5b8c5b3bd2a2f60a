use lfo_core::grid::*;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

fn kundur_setup() -> (
    GridCase,
    PowerFlowSolution,
    Network,
    DynamicState,
    Vec<MachineParams>,
) {
    let case = GridCase::kundur_2area();
    let pf = solve_power_flow(&case, &PowerFlowOptions::default()).unwrap();
    let net = Network::new(&case, &pf).unwrap();
    let state = init_dynamic_state(&case, &pf).unwrap();
    let machines = MachineParams::from_case(&case);
    (case, pf, net, state, machines)
}

/// Full-network phasor solve with every EMF held: returns bus voltages and
/// the current injected by each internal EMF node.
fn full_solve(net: &Network, emf: &[C64]) -> (DVector<C64>, Vec<C64>) {
    let mut a = net.ybus().clone();
    for (k, y) in net.shunt_admittances().iter().enumerate() {
        a[(k, k)] += *y;
    }
    let n = a.nrows();
    let mut rhs = DVector::<C64>::zeros(n);
    let branches = net.generator_branches();
    for (g, br) in branches.iter().enumerate() {
        let yg = c(0.0, -1.0 / br.xd_prime);
        a[(br.bus, br.bus)] += yg;
        rhs[br.bus] += yg * emf[g];
    }
    let v = a.lu().solve(&rhs).unwrap();
    let cur = branches
        .iter()
        .enumerate()
        .map(|(g, br)| c(0.0, -1.0 / br.xd_prime) * (emf[g] - v[br.bus]))
        .collect();
    (v, cur)
}

#[test]
fn kundur_admittance_matches_independent_assembly() {
    let raw: serde_json::Value =
        serde_json::from_str(include_str!("../data/kundur_2area.json")).unwrap();
    let ids: Vec<u64> = raw["buses"]
        .as_array()
        .unwrap()
        .iter()
        .map(|b| b["id"].as_u64().unwrap())
        .collect();
    let pos = |id: u64| ids.iter().position(|&x| x == id).unwrap();
    let n = ids.len();
    let mut oracle = vec![vec![c(0.0, 0.0); n]; n];
    for l in raw["lines"].as_array().unwrap() {
        if l.get("in_service").and_then(|v| v.as_bool()) == Some(false) {
            continue;
        }
        let f = pos(l["from_bus"].as_u64().unwrap());
        let t = pos(l["to_bus"].as_u64().unwrap());
        let r = l["r"].as_f64().unwrap();
        let x = l["x"].as_f64().unwrap();
        let b = l["b_shunt"].as_f64().unwrap();
        let tap = l.get("tap").and_then(|v| v.as_f64()).unwrap_or(1.0);
        let den = r * r + x * x;
        let ys = c(r / den, -x / den);
        let sh = c(0.0, b / 2.0);
        oracle[f][f] += (ys + sh) / (tap * tap);
        oracle[t][t] += ys + sh;
        oracle[f][t] -= ys / tap;
        oracle[t][f] -= ys / tap;
    }
    let y = build_admittance(&GridCase::kundur_2area()).unwrap();
    assert_eq!(y.nrows(), 11);
    for i in 0..n {
        for j in 0..n {
            assert!((y[(i, j)] - oracle[i][j]).norm() < 1e-12, "({i},{j})");
        }
    }
}

#[test]
fn kundur_tie_transfer_is_413_mw() {
    let (case, pf, ..) = kundur_setup();
    let mw = pf.area_transfer_mw(&case, 1, 2);
    assert!((mw - 413.0).abs() <= 0.01 * 413.0, "transfer {mw}");
    assert!(pf.iterations <= 10);
    assert!(pf.mismatch_norm < 1e-8);
}

#[test]
fn ieee39_converges_quickly() {
    let case = GridCase::ieee39();
    let pf = solve_power_flow(&case, &PowerFlowOptions::default()).unwrap();
    assert!(pf.iterations <= 10, "{} iterations", pf.iterations);
    assert_eq!(pf.va[case.slack_index()], 0.0);
}

#[test]
fn kron_currents_match_full_network_solve() {
    let (_, _, net, ..) = kundur_setup();
    let reduced = net.reduced();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let emf: Vec<C64> = (0..4)
            .map(|_| C64::from_polar(rng.random_range(0.5..1.5), rng.random_range(-3.0..3.0)))
            .collect();
        let (v, full) = full_solve(&net, &emf);
        let e = DVector::from_vec(emf.clone());
        let red = reduced.currents(&e);
        let vb = reduced.bus_voltages(&e);
        let scale = full.iter().map(|z| z.norm()).fold(0.0, f64::max);
        for g in 0..4 {
            assert!((red[g] - full[g]).norm() <= 1e-10 * scale);
        }
        for k in 0..v.len() {
            assert!((vb[k] - v[k]).norm() < 1e-10);
        }
    }
}

#[test]
fn reduced_matrix_is_symmetric() {
    let (_, _, net, ..) = kundur_setup();
    let y = &net.reduced().y_red;
    assert!((y - y.transpose()).iter().all(|z| z.norm() < 1e-12));
}

#[test]
fn post_fault_power_matches_full_network() {
    let (_, _, mut net, state, _) = kundur_setup();
    net.apply_event(&GridEvent::bus_fault(8, 1.0, 1e4)).unwrap();
    let (pe, vt) = electrical_power(net.reduced(), &state);
    let emf: Vec<C64> = state.emf().iter().copied().collect();
    let (v, cur) = full_solve(&net, &emf);
    for g in 0..4 {
        let p = (emf[g] * cur[g].conj()).re;
        assert!((pe[g] - p).abs() < 1e-10, "gen {g}: {} vs {p}", pe[g]);
        let bus = net.generator_branches()[g].bus;
        assert!((vt[g] - v[bus].norm()).abs() < 1e-10);
    }
}

#[test]
fn bus_fault_collapses_local_voltage() {
    let (case, _, mut net, state, _) = kundur_setup();
    net.apply_event(&GridEvent::bus_fault(8, 1.0, 1e4)).unwrap();
    let emf: Vec<C64> = state.emf().iter().copied().collect();
    let (v, _) = full_solve(&net, &emf);
    let k = case.index_of_bus(8).unwrap();
    assert!(v[k].norm() < 0.01, "|V8| = {}", v[k].norm());
    let vb = net.reduced().bus_voltages(&state.emf());
    assert!(vb[k].norm() < 0.01);
}

#[test]
fn fault_then_clear_restores_reduction() {
    let (_, _, mut net, ..) = kundur_setup();
    let before = net.reduced().y_red.clone();
    net.apply_event(&GridEvent::bus_fault(8, 1.0, 1e4)).unwrap();
    assert!((&net.reduced().y_red - &before)
        .iter()
        .any(|z| z.norm() > 1e-3));
    net.apply_event(&GridEvent::fault_clear(8, 1.1)).unwrap();
    assert!((&net.reduced().y_red - &before)
        .iter()
        .all(|z| z.norm() < 1e-12));
}

#[test]
fn tripping_radial_feeder_is_rejected() {
    let mut case = GridCase::kundur_2area();
    case.buses.push(Bus {
        id: 12,
        kind: BusKind::Pq,
        v_setpoint: 1.0,
        p_load: 20.0,
        q_load: 0.0,
        area: 1,
    });
    case.lines.push(Line {
        from_bus: 7,
        to_bus: 12,
        r: 0.001,
        x: 0.01,
        b_shunt: 0.0,
        in_service: true,
        tap: 1.0,
    });
    let pf = solve_power_flow(&case, &PowerFlowOptions::default()).unwrap();
    let mut net = Network::new(&case, &pf).unwrap();
    let before = net.reduced().clone();
    let last = (case.lines.len() - 1) as u32;
    let err = net
        .apply_event(&GridEvent::line_trip(last, 1.0))
        .unwrap_err();
    assert!(matches!(err, GridError::SingularReduction(_)));
    assert_eq!(net.reduced(), &before);
}

#[test]
fn unknown_event_target_is_rejected() {
    let (_, _, mut net, ..) = kundur_setup();
    assert!(matches!(
        net.apply_event(&GridEvent::bus_fault(99, 1.0, 1e4)),
        Err(GridError::UnknownTarget(99))
    ));
    assert!(matches!(
        net.apply_event(&GridEvent::line_trip(500, 1.0)),
        Err(GridError::UnknownTarget(500))
    ));
}

fn hold_equilibrium(case: GridCase) -> f64 {
    let pf = solve_power_flow(&case, &PowerFlowOptions::default()).unwrap();
    let mut net = Network::new(&case, &pf).unwrap();
    let state = init_dynamic_state(&case, &pf).unwrap();
    let machines = MachineParams::from_case(&case);
    let d = derivatives(&state, net.reduced(), &vec![0.0; machines.len()], &machines).unwrap();
    assert!(d.max_abs() < 1e-8, "initial derivative {}", d.max_abs());
    let tr = simulate(&mut net, state, &machines, &[], 0.01, 20.0).unwrap();
    assert_eq!(tr.len(), 2001);
    tr.iter()
        .flat_map(|s| s.omega.iter().map(|w| (w - 1.0).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn kundur_holds_equilibrium() {
    let dev = hold_equilibrium(GridCase::kundur_2area());
    assert!(dev < 1e-6, "{dev}");
}

#[test]
fn ieee39_holds_equilibrium() {
    let dev = hold_equilibrium(GridCase::ieee39());
    assert!(dev < 1e-6, "{dev}");
}

/// Fault at bus 8 from t = 0, cleared at 0.1 s, integrated to 1 s.
fn fault_trajectory_end(dt: f64) -> DynamicState {
    let (_, _, mut net, state, machines) = kundur_setup();
    let events = [
        GridEvent::bus_fault(8, 0.0, 1e4),
        GridEvent::fault_clear(8, 0.1),
    ];
    simulate(&mut net, state, &machines, &events, dt, 1.0)
        .unwrap()
        .pop()
        .unwrap()
}

fn state_error(a: &DynamicState, b: &DynamicState) -> f64 {
    let pairs = [
        (&a.delta, &b.delta),
        (&a.omega, &b.omega),
        (&a.eq_prime, &b.eq_prime),
        (&a.efd, &b.efd),
    ];
    pairs
        .iter()
        .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn rk4_converges_with_fourth_order_on_fault() {
    // 10 ms is pre-asymptotic here: the sub-step that ends on the field
    // ceiling has a length set by the exciter, not by dt
    let dt = 0.00125;
    let reference = fault_trajectory_end(dt / 8.0);
    let e1 = state_error(&fault_trajectory_end(dt), &reference);
    let e2 = state_error(&fault_trajectory_end(dt / 2.0), &reference);
    let order = (e1 / e2).log2();
    assert!(e1 / e2 >= 14.0, "ratio {}", e1 / e2);
    assert!(
        (3.8..=4.2).contains(&order),
        "order {order} (e1 {e1:e}, e2 {e2:e})"
    );
}

#[test]
fn lossless_swing_conserves_energy() {
    let mut case = GridCase::kundur_2area();
    for l in &mut case.lines {
        l.r = 0.0;
    }
    for b in &mut case.buses {
        b.p_load = 0.0;
    }
    // area 1 exports to area 2 machines acting as motors
    case.generators[0].p_dispatch = 150.0;
    case.generators[1].p_dispatch = 150.0;
    case.generators[3].p_dispatch = -150.0;
    for g in &mut case.generators {
        g.d = 0.0;
        g.td0_prime = 1e12;
    }
    let pf = solve_power_flow(&case, &PowerFlowOptions::default()).unwrap();
    let net = Network::new(&case, &pf).unwrap();
    let mut state = init_dynamic_state(&case, &pf).unwrap();
    let machines = MachineParams::from_case(&case);
    state.omega[0] += 0.002;
    state.omega[3] -= 0.002;
    let y = net.reduced().y_red.clone();
    assert!(y.iter().all(|z| z.re.abs() < 1e-12));
    let energy = |s: &DynamicState| {
        let g = s.delta.len();
        let mut w = 0.0;
        for i in 0..g {
            w += machines[i].h * machines[i].omega_s * (s.omega[i] - 1.0).powi(2)
                - s.pm[i] * s.delta[i];
            for j in i + 1..g {
                w -= s.eq_prime[i] * s.eq_prime[j] * y[(i, j)].im * (s.delta[i] - s.delta[j]).cos();
            }
        }
        w
    };
    let kinetic0: f64 = (0..4)
        .map(|i| machines[i].h * machines[i].omega_s * (state.omega[i] - 1.0).powi(2))
        .sum();
    let w0 = energy(&state);
    // exciter frozen by restoring Efd after every step
    let mut s = state;
    let mut drift: f64 = 0.0;
    for _ in 0..1000 {
        let efd = s.efd.clone();
        s = step_rk4(&s, net.reduced(), &[0.0; 4], 0.01, &machines).unwrap();
        s.efd = efd;
        drift = drift.max((energy(&s) - w0).abs());
        let spread = s.delta.iter().fold(f64::MIN, |a, &b| a.max(b))
            - s.delta.iter().fold(f64::MAX, |a, &b| a.min(b));
        assert!(
            spread < 1.5,
            "lost synchronism; the check needs a bounded swing"
        );
    }
    assert!(drift < 1e-3 * w0.abs());
    assert!((s.t - 10.0).abs() < 1e-9);
    assert!(
        drift < 1e-3 * kinetic0,
        "drift {drift:e} vs swing energy {kinetic0:e}"
    );
}

#[test]
fn simulation_reports_blow_up() {
    let (_, _, net, mut state, machines) = kundur_setup();
    state.omega[0] = f64::NAN;
    assert!(matches!(
        step_rk4(&state, net.reduced(), &[0.0; 4], 0.01, &machines),
        Err(GridError::NonFinite { .. })
    ));
}

#[test]
fn malformed_case_names_the_field() {
    let text = include_str!("../data/kundur_2area.json").replacen("\"Xd_prime\"", "\"Xd_prim\"", 1);
    match GridCase::from_json_str(&text) {
        Err(GridError::Schema { path, message }) => {
            assert!(path.contains("generators"), "{path}");
            assert!(message.contains("Xd_prime"), "{message}");
        }
        other => panic!("expected schema error, got {other:?}"),
    }
}

#[test]
fn event_schedule_is_time_ordered_and_sparse() {
    let (_, _, mut net, state, machines) = kundur_setup();
    let events = [
        GridEvent::fault_clear(8, 1.1),
        GridEvent::bus_fault(8, 1.0, 1e4),
    ];
    let tr = simulate(&mut net, state, &machines, &events, 0.01, 2.0).unwrap();
    let dev = |k: usize| {
        tr[k]
            .omega
            .iter()
            .map(|w| (w - 1.0).abs())
            .fold(0.0, f64::max)
    };
    assert!(dev(100) < 1e-9);
    assert!(dev(110) > 1e-4);
}
