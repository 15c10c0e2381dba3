//! Power-flow solver validation against independently-coded oracles:
//! a backward/forward sweep method, plain complex arithmetic, and a
//! fixed-point iteration for the 2-bus case.

mod common;

use approx::assert_relative_eq;
use num_complex::Complex64;

use common::{
    complex_bus_power, complex_ybus, load_case33, sweep_power_flow, two_bus_fixed_point,
};
use temgrid::{
    branch_flows, build_admittance, check_limits, parse_case, pf_residuals, solve_newton_pf,
    InjectionSet, OperatingBounds, VoltageState,
};

fn base_injections(net: &temgrid::Network) -> InjectionSet {
    InjectionSet {
        p_gen_kw: vec![0.0; net.n_buses()],
        q_gen_kvar: vec![0.0; net.n_buses()],
        p_load_kw: net.buses.iter().map(|b| b.p_load_kw).collect(),
        q_load_kvar: net.buses.iter().map(|b| b.q_load_kvar).collect(),
    }
}

#[test]
fn newton_matches_sweep_oracle_on_the_33_bus_feeder() {
    let net = load_case33();
    let adm = build_admittance(&net).unwrap();
    let inj = base_injections(&net);

    let start = std::time::Instant::now();
    let (v, report) = solve_newton_pf(&net, &adm, &inj).unwrap();
    let elapsed = start.elapsed();

    assert!(report.iterations <= 10, "Newton took {} iterations", report.iterations);
    assert!(elapsed.as_secs_f64() < 1.0, "solve took {elapsed:?}");

    let injections: Vec<Complex64> = (0..net.n_buses())
        .map(|i| Complex64::new(inj.net_p_kw(i), inj.net_q_kvar(i)))
        .collect();
    let sweep = sweep_power_flow(&net, &injections);

    // Same physics through a different algorithm: losses within 1%.
    let flows = branch_flows(&net, &adm, &v);
    let rel = (flows.total_loss_kw - sweep.total_loss_kw).abs() / sweep.total_loss_kw;
    assert!(rel < 0.01, "loss {} vs sweep {}", flows.total_loss_kw, sweep.total_loss_kw);

    // Minimum voltage location and magnitude agree.
    let (newton_min_bus, newton_min) = (0..net.n_buses())
        .map(|i| (i, v.v_mag(i)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let (sweep_min_bus, sweep_min) = sweep
        .v
        .iter()
        .enumerate()
        .map(|(i, c)| (i, c.norm()))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    assert_eq!(newton_min_bus, sweep_min_bus);
    assert!((newton_min - sweep_min).abs() < 1e-3, "{newton_min} vs {sweep_min}");

    // Published characteristics of this feeder at base load.
    assert!((flows.total_loss_kw - 202.7).abs() < 2.0, "loss {}", flows.total_loss_kw);
    assert!((newton_min - 0.913).abs() < 1e-3, "vmin {newton_min}");
    assert_eq!(net.buses[newton_min_bus].id, 18);
}

#[test]
fn admittance_accessors_match_complex_arithmetic() {
    let net = load_case33();
    let adm = build_admittance(&net).unwrap();
    let y = complex_ybus(&net);
    for i in 0..net.n_buses() {
        let (g, b) = adm.ybus_diag(i);
        assert_relative_eq!(g, y[i][i].re, epsilon = 1e-12);
        assert_relative_eq!(b, y[i][i].im, epsilon = 1e-12);
        for (j, g, b) in adm.ybus_neighbors(i) {
            assert_relative_eq!(g, y[i][j].re, epsilon = 1e-12);
            assert_relative_eq!(b, y[i][j].im, epsilon = 1e-12);
        }
    }
}

#[test]
fn residuals_match_complex_bus_power_at_an_arbitrary_state() {
    let net = load_case33();
    let adm = build_admittance(&net).unwrap();
    let n = net.n_buses();
    // A deliberately non-flat state exercises every term.
    let mut v = VoltageState::flat(n);
    for i in 0..n {
        v.e[i] = 1.0 - 0.002 * i as f64;
        v.f[i] = -0.001 * i as f64;
    }
    let inj = base_injections(&net);
    let r = pf_residuals(&net, &adm, &v, &inj).unwrap();

    let y = complex_ybus(&net);
    let vc: Vec<Complex64> = (0..n).map(|i| Complex64::new(v.e[i], v.f[i])).collect();
    for i in 0..n {
        let s = complex_bus_power(&y, &vc, i) * net.s_base_kw();
        assert_relative_eq!(r[i], inj.net_p_kw(i) - s.re, epsilon = 1e-8);
        assert_relative_eq!(r[n + i], inj.net_q_kvar(i) - s.im, epsilon = 1e-8);
    }
}

#[test]
fn two_bus_fixed_point_candidate_satisfies_residuals() {
    // z = 0.01 + j0.01 pu, 1 pu load at bus 2, on a 1 MVA / 1 kV base.
    let net = parse_case(
        "BASE 1 1\nBUS 1 slack 0 0 0\nBUS 2 consumer 1000 0 0\nBRANCH 1 2 0.01 0.01\n",
    )
    .unwrap();
    let adm = build_admittance(&net).unwrap();
    let v2 = two_bus_fixed_point(Complex64::new(0.01, 0.01), Complex64::new(1.0, 0.0));
    let v = VoltageState { e: vec![1.0, v2.re], f: vec![0.0, v2.im] };
    let inj = base_injections(&net);
    let r = pf_residuals(&net, &adm, &v, &inj).unwrap();
    // Non-slack entries vanish to fixed-point tolerance (pu units: /s_base).
    assert!(r[1].abs() / net.s_base_kw() < 1e-8, "P residual {}", r[1]);
    assert!(r[3].abs() / net.s_base_kw() < 1e-8, "Q residual {}", r[3]);

    // The Newton solver lands on the same voltage.
    let (vn, _) = solve_newton_pf(&net, &adm, &inj).unwrap();
    assert!((vn.e[1] - v2.re).abs() < 1e-8);
    assert!((vn.f[1] - v2.im).abs() < 1e-8);
}

#[test]
fn loss_conservation_slack_injection_minus_load_equals_losses() {
    let net = load_case33();
    let adm = build_admittance(&net).unwrap();
    let inj = base_injections(&net);
    let (v, _) = solve_newton_pf(&net, &adm, &inj).unwrap();
    let flows = branch_flows(&net, &adm, &v);

    // Slack real injection from the residual identity: at a solved state the
    // slack's calculated power equals its net export into the network.
    let r = pf_residuals(&net, &adm, &v, &inj).unwrap();
    let slack = net.slack_index();
    let slack_p_kw = inj.net_p_kw(slack) - r[slack]; // calculated slack power
    let total_load: f64 = net.buses.iter().map(|b| b.p_load_kw).sum();
    assert_relative_eq!(slack_p_kw - total_load, flows.total_loss_kw, epsilon = 1e-3);
}

#[test]
fn per_branch_losses_match_sweep_oracle() {
    let net = load_case33();
    let adm = build_admittance(&net).unwrap();
    let inj = base_injections(&net);
    let (v, _) = solve_newton_pf(&net, &adm, &inj).unwrap();
    let flows = branch_flows(&net, &adm, &v);

    let injections: Vec<Complex64> = (0..net.n_buses())
        .map(|i| Complex64::new(inj.net_p_kw(i), inj.net_q_kvar(i)))
        .collect();
    let sweep = sweep_power_flow(&net, &injections);
    for (bf, sl) in flows.branches.iter().zip(&sweep.branch_loss_kw) {
        assert!((bf.loss_kw - sl).abs() < 0.05, "branch loss {} vs sweep {}", bf.loss_kw, sl);
        assert!(bf.loss_kw >= -1e-9);
    }
}

#[test]
fn base_case_violates_a_tight_voltage_band_but_not_a_wide_one() {
    let net = load_case33();
    let adm = build_admittance(&net).unwrap();
    let inj = base_injections(&net);
    let (v, _) = solve_newton_pf(&net, &adm, &inj).unwrap();
    let n = net.n_buses();
    let free = |lo: f64, hi: f64| OperatingBounds {
        v_min_pu: lo,
        v_max_pu: hi,
        p_gen_min_kw: vec![f64::NEG_INFINITY; n],
        p_gen_max_kw: vec![f64::INFINITY; n],
        q_gen_min_kvar: vec![f64::NEG_INFINITY; n],
        q_gen_max_kvar: vec![f64::INFINITY; n],
    };
    assert!(check_limits(&net, &v, &inj, &free(0.90, 1.10)).is_empty());
    // At base load this feeder sags to ~0.913 pu, violating a 0.95 floor.
    let findings = check_limits(&net, &v, &inj, &free(0.95, 1.05));
    assert!(!findings.is_empty());
}
