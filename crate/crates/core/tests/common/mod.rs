//! Shared fixtures and independently-coded oracles for the integration
//! tests.
//!
//! Everything here deliberately avoids the crate's own power-flow math:
//! the sweeps and complex arithmetic are written from scratch so agreement
//! between this module and the library is meaningful evidence.
#![allow(dead_code)]

use num_complex::Complex64;
use std::path::PathBuf;

use temgrid::{parse_case, Network};

/// Path to a file in the workspace `scenarios/` directory.
pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

/// Loads the bundled 33-bus feeder case.
pub fn load_case33() -> Network {
    let text = std::fs::read_to_string(scenario_path("case33.txt")).expect("case33.txt readable");
    parse_case(&text).expect("case33 parses")
}

/// Builds the physical bus admittance matrix with plain complex arithmetic:
/// `Y_ii = Σ incident 1/(r+jx)`, `Y_ij = −1/(r+jx)` per branch.
pub fn complex_ybus(net: &Network) -> Vec<Vec<Complex64>> {
    let n = net.n_buses();
    let mut y = vec![vec![Complex64::new(0.0, 0.0); n]; n];
    for br in &net.branches {
        let i = net.index_of(br.from).unwrap();
        let j = net.index_of(br.to).unwrap();
        let ybr = Complex64::new(1.0, 0.0) / Complex64::new(br.r_pu, br.x_pu);
        y[i][i] += ybr;
        y[j][j] += ybr;
        y[i][j] -= ybr;
        y[j][i] -= ybr;
    }
    y
}

/// Complex bus power `S_i = V_i · conj(Σ_j Y_ij V_j)` in pu, computed from
/// the complex Ybus — an independent check of the rectangular expansions.
pub fn complex_bus_power(y: &[Vec<Complex64>], v: &[Complex64], i: usize) -> Complex64 {
    let mut isum = Complex64::new(0.0, 0.0);
    for (j, yij) in y[i].iter().enumerate() {
        isum += yij * v[j];
    }
    v[i] * isum.conj()
}

/// Result of the backward/forward sweep oracle.
pub struct SweepSolution {
    /// Complex bus voltages, pu, by bus index.
    pub v: Vec<Complex64>,
    /// Real loss per branch, kW, in case order.
    pub branch_loss_kw: Vec<f64>,
    /// Total real loss, kW.
    pub total_loss_kw: f64,
    /// Complex power injected by the slack bus, kW + j·kvar.
    pub slack_injection_kw: Complex64,
    /// Sweeps performed.
    pub iterations: usize,
}

/// Backward/forward sweep power flow for radial feeders.
///
/// `net_injection_kw[i]` is the net complex injection (generation − load)
/// at bus index `i`; the slack entry is ignored. This is a completely
/// separate numerical method from the library's Newton solver: currents are
/// accumulated leaf-to-root and voltages propagated root-to-leaf until the
/// largest voltage update falls below 1e-12 pu.
pub fn sweep_power_flow(net: &Network, net_injection_kw: &[Complex64]) -> SweepSolution {
    let n = net.n_buses();
    let s_base = net.s_base_kw();
    let slack = net.slack_index();

    // Tree structure: BFS from the slack.
    let mut children: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n]; // (child, branch idx)
    let mut parent_branch: Vec<Option<(usize, usize)>> = vec![None; n]; // (parent, branch idx)
    {
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for (k, br) in net.branches.iter().enumerate() {
            let i = net.index_of(br.from).unwrap();
            let j = net.index_of(br.to).unwrap();
            adj[i].push((j, k));
            adj[j].push((i, k));
        }
        let mut seen = vec![false; n];
        let mut queue = std::collections::VecDeque::from([slack]);
        seen[slack] = true;
        while let Some(u) = queue.pop_front() {
            for &(w, k) in &adj[u] {
                if !seen[w] {
                    seen[w] = true;
                    parent_branch[w] = Some((u, k));
                    children[u].push((w, k));
                    queue.push_back(w);
                }
            }
        }
        assert!(seen.iter().all(|&s| s), "sweep oracle needs a connected radial network");
    }

    // Depth-first post-order for the backward pass.
    let mut order = Vec::with_capacity(n);
    {
        let mut stack = vec![(slack, false)];
        while let Some((u, processed)) = stack.pop() {
            if processed {
                order.push(u);
            } else {
                stack.push((u, true));
                for &(c, _) in &children[u] {
                    stack.push((c, false));
                }
            }
        }
    }

    // Complex demand per bus in pu (positive = consuming).
    let demand: Vec<Complex64> = (0..n).map(|i| -net_injection_kw[i] / s_base).collect();

    let z: Vec<Complex64> =
        net.branches.iter().map(|br| Complex64::new(br.r_pu, br.x_pu)).collect();

    let mut v = vec![Complex64::new(1.0, 0.0); n];
    let mut branch_current = vec![Complex64::new(0.0, 0.0); net.branches.len()];
    let mut iterations = 0;
    loop {
        iterations += 1;
        // Backward: accumulate currents leaf to root.
        let mut into_bus = vec![Complex64::new(0.0, 0.0); n];
        for &u in &order {
            let draw = (demand[u] / v[u]).conj();
            let total = draw + into_bus[u];
            if let Some((p, k)) = parent_branch[u] {
                branch_current[k] = total;
                into_bus[p] += total;
            }
        }
        // Forward: propagate voltage drops root to leaf.
        let mut max_dv: f64 = 0.0;
        for &u in order.iter().rev() {
            if let Some((p, k)) = parent_branch[u] {
                let nv = v[p] - z[k] * branch_current[k];
                max_dv = max_dv.max((nv - v[u]).norm());
                v[u] = nv;
            }
        }
        if max_dv < 1e-12 || iterations >= 500 {
            break;
        }
    }

    let branch_loss_kw: Vec<f64> = branch_current
        .iter()
        .zip(&net.branches)
        .map(|(i, br)| i.norm_sqr() * br.r_pu * s_base)
        .collect();
    let total_loss_kw = branch_loss_kw.iter().sum();
    let slack_current: Complex64 =
        children[slack].iter().map(|&(_, k)| branch_current[k]).sum();
    let slack_injection_kw = v[slack] * slack_current.conj() * s_base;

    SweepSolution { v, branch_loss_kw, total_loss_kw, slack_injection_kw, iterations }
}

/// Solves the 2-bus case (slack + one load bus) by fixed-point iteration on
/// `V₂ ← 1 − z · conj(S_demand / V₂)`, all in pu.
///
/// Returns the converged complex voltage at bus 2.
pub fn two_bus_fixed_point(z_pu: Complex64, demand_pu: Complex64) -> Complex64 {
    let mut v = Complex64::new(1.0, 0.0);
    for _ in 0..500 {
        let next = Complex64::new(1.0, 0.0) - z_pu * (demand_pu / v).conj();
        if (next - v).norm() < 1e-14 {
            return next;
        }
        v = next;
    }
    v
}

/// Deterministically generates a random radial case-file text with `n`
/// buses, for property tests. `seed` controls attachment, impedances, and
/// loads via a splitmix-style generator (no external RNG needed here).
pub fn random_radial_case(n: usize, seed: u64) -> String {
    let mut state = seed.wrapping_add(0x9e3779b97f4a7c15);
    let mut next = move || {
        state = state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    };
    let mut unit = move || (next() >> 11) as f64 / (1u64 << 53) as f64;

    let mut out = String::from("BASE 10 12.66\nBUS 1 slack 0 0 0\n");
    for id in 2..=n {
        let p = 20.0 + 380.0 * unit();
        let q = 10.0 + 190.0 * unit();
        out.push_str(&format!("BUS {id} consumer {p:.3} {q:.3} 0\n"));
    }
    for id in 2..=n {
        // Attach to a uniformly random earlier bus: keeps the graph a tree.
        let parent = 1 + (unit() * (id - 1) as f64).floor() as usize;
        let r = 0.05 + 1.45 * unit();
        let x = 0.05 + 1.45 * unit();
        out.push_str(&format!("BRANCH {parent} {id} {r:.4} {x:.4}\n"));
    }
    out
}

// ---------------------------------------------------------------------------
// Scenario builders and dispatch oracles.

use temgrid::{
    derive_halfhour_prices, BatterySpec, DgSpec, PriceSchedule, ReProfile, Scenario,
    SolveOptions,
};

/// The day's 24 hourly retail buying prices, $/kWh: cheap nights, a midday
/// plateau, and a steep two-hour evening peak.
pub fn hourly_tou() -> [f64; 24] {
    [
        0.10, 0.10, 0.10, 0.10, 0.10, 0.10, 0.12, 0.14, 0.17, 0.20, 0.22, 0.24, 0.25, 0.25,
        0.24, 0.23, 0.26, 0.32, 0.42, 0.42, 0.32, 0.22, 0.14, 0.12,
    ]
}

/// Two-peak daily load shape sampled at the midpoint of half-hour step `t`.
pub fn bundled_load_scale() -> Vec<f64> {
    (0..48)
        .map(|t| {
            let u = (t as f64 + 0.5) * 0.5;
            let bump = |c: f64, w: f64| (-((u - c) / w) * ((u - c) / w)).exp();
            0.38 + 0.07 * bump(9.0, 2.5) + 0.14 * bump(19.0, 2.2)
        })
        .collect()
}

/// Bell-shaped solar availability over [6.5 h, 18 h], sampled at step
/// midpoints, peaking at `peak_kw` around noon.
pub fn pv_profile(peak_kw: f64) -> ReProfile {
    let available_kw = (0..48)
        .map(|t| {
            let u = (t as f64 + 0.5) * 0.5;
            if (6.5..18.0).contains(&u) {
                let s = (std::f64::consts::PI * (u - 6.5) / 11.5).sin();
                peak_kw * s * s
            } else {
                0.0
            }
        })
        .collect();
    ReProfile { available_kw }
}

/// The storage unit used by the bundled day: 1 MWh, 500 kW each way.
pub fn bundled_battery() -> BatterySpec {
    BatterySpec {
        capacity_kwh: 1000.0,
        eta_c: 0.9,
        eta_d: 0.9,
        degradation_cost_per_kwh: 0.1,
        p_charge_max_kw: 500.0,
        p_discharge_max_kw: 500.0,
        soc_min: 0.4,
        soc_max: 0.9,
        initial_soc: 0.65,
    }
}

/// The standing generator of the bundled day: 1 MW quadratic-cost unit
/// whose commitment charge confines economic operation to the price peak.
pub fn bundled_generator() -> DgSpec {
    DgSpec { p_min_kw: 0.0, p_max_kw: 1000.0, a: 2.45e-5, b: 0.1833, c: 26.235 }
}

/// The full-day 33-bus scenario: solar on four buses, storage on two, one
/// dispatchable generator, half-hour steps, time-of-use prices with export
/// at half of import.
///
/// Each solar array is sized at 1.2× its bus's full load. Every bus's load
/// follows the same daily shape, so all four arrays cross their local
/// demand during the same step — net exchange at the solar buses flips sign
/// together, and no step mixes a fresh exporter with a barely-importing
/// neighbor.
pub fn bundled_day_scenario() -> Scenario {
    Scenario {
        network: load_case33(),
        batteries: vec![(14, bundled_battery()), (25, bundled_battery())],
        generators: vec![(8, bundled_generator())],
        re_sources: vec![
            (18, pv_profile(108.0)),
            (22, pv_profile(108.0)),
            (25, pv_profile(504.0)),
            (33, pv_profile(72.0)),
        ],
        load_scale: bundled_load_scale(),
        prices: derive_halfhour_prices(&hourly_tou()).expect("24 hourly prices"),
        t_steps: 48,
        dt_hours: 0.5,
        v_min_pu: 0.95,
        v_max_pu: 1.05,
        max_import_kw: None,
        solver: SolveOptions {
            tol_eq: 1e-7,
            tol_ineq: 1e-7,
            n_starts: 1,
            ..SolveOptions::default()
        },
    }
}

/// Two-bus feeder hosting one battery behind a flat load — the arbitrage
/// test bed. Prices are cheap for the first half of the horizon and
/// expensive after.
pub fn battery_arbitrage_scenario() -> Scenario {
    let net = parse_case(
        "BASE 1 12.66\nBUS 1 slack 0 0 0\nBUS 2 prosumer 80 0 1\nBRANCH 1 2 0.3 0.2\n",
    )
    .expect("two-bus case parses");
    let spec = BatterySpec {
        capacity_kwh: 100.0,
        eta_c: 0.9,
        eta_d: 0.9,
        degradation_cost_per_kwh: 0.05,
        p_charge_max_kw: 50.0,
        p_discharge_max_kw: 50.0,
        soc_min: 0.4,
        soc_max: 0.9,
        initial_soc: 0.5,
    };
    let buy = vec![0.1, 0.1, 0.5, 0.5];
    let sell: Vec<f64> = buy.iter().map(|b| b / 2.0).collect();
    Scenario {
        network: net,
        batteries: vec![(2, spec)],
        generators: vec![],
        re_sources: vec![],
        load_scale: vec![1.0; 4],
        prices: PriceSchedule { buy, sell },
        t_steps: 4,
        dt_hours: 1.0,
        v_min_pu: 0.90,
        v_max_pu: 1.10,
        max_import_kw: None,
        solver: SolveOptions { tol_eq: 1e-7, tol_ineq: 1e-7, ..SolveOptions::default() },
    }
}

/// Exhaustive dynamic program over an integer-kWh storage lattice for a
/// two-bus feeder: at each step the store moves to any reachable integer
/// level, the branch flow is solved exactly, and the step is charged at
/// retail with the wear and half-loss charges included. Returns the
/// minimum horizon cost in $ with the store required to end no lower than
/// it began.
///
/// Written without the library's optimizer so agreement with it is
/// evidence: only the store-recursion convention is shared (delivering P
/// drains `eta_d·P·dt`; drawing P banks `eta_c·P·dt`).
pub fn battery_dp_cost(s: &Scenario) -> f64 {
    assert_eq!(s.network.n_buses(), 2, "oracle covers the two-bus feeder");
    assert_eq!(s.batteries.len(), 1);
    let (bus_id, spec) = &s.batteries[0];
    let bus = s.network.index_of(*bus_id).unwrap();
    let br = &s.network.branches[0];
    let z = Complex64::new(br.r_pu, br.x_pu);
    let sbase = s.network.s_base_kw();

    let lo = spec.min_kwh().round() as i64;
    let hi = spec.max_kwh().round() as i64;
    let e0 = spec.initial_kwh().round() as i64;
    let n_states = (hi - lo + 1) as usize;
    let state = |e: i64| (e - lo) as usize;

    let mut cost = vec![f64::INFINITY; n_states];
    cost[state(e0)] = 0.0;
    for t in 0..s.t_steps {
        let (ub, us) = (s.prices.buy[t], s.prices.sell[t]);
        let dt = s.dt_hours;
        let load = s.load_kw(t, bus);
        let q_load = s.load_kvar(t, bus);
        let mut next = vec![f64::INFINITY; n_states];
        for e in lo..=hi {
            let here = cost[state(e)];
            if !here.is_finite() {
                continue;
            }
            for e2 in lo..=hi {
                let drained = (e - e2) as f64; // kWh out of the store
                let p_b = if drained >= 0.0 {
                    drained / (spec.eta_d * dt)
                } else {
                    drained / (spec.eta_c * dt)
                };
                if p_b > spec.p_discharge_max_kw + 1e-9
                    || -p_b > spec.p_charge_max_kw + 1e-9
                {
                    continue;
                }
                let p_im = load - p_b;
                let demand = Complex64::new(p_im / sbase, q_load / sbase);
                let v2 = two_bus_fixed_point(z, demand);
                let i_pu = ((Complex64::new(1.0, 0.0) - v2) / z).norm();
                let loss_kw = i_pu * i_pu * br.r_pu * sbase;
                let import = if p_im >= 0.0 { p_im * ub * dt } else { p_im * us * dt };
                let wear = spec.degradation_cost_per_kwh * p_b.abs() * dt;
                let loss_charge = 0.5 * loss_kw * ub * dt;
                let step = import + wear + loss_charge;
                let total = here + step;
                if total < next[state(e2)] {
                    next[state(e2)] = total;
                }
            }
        }
        cost = next;
    }
    (e0..=hi)
        .map(|e| cost[state(e)])
        .fold(f64::INFINITY, f64::min)
}

/// Three-bus feeder with one pure consumer and one solar exporter — the
/// smallest two-sided market.
pub fn seller_buyer_scenario() -> Scenario {
    let net = parse_case(
        "BASE 1 12.66\nBUS 1 slack 0 0 0\nBUS 2 consumer 100 40 0\n\
         BUS 3 prosumer 30 10 1\nBRANCH 1 2 0.4 0.3\nBRANCH 2 3 0.5 0.35\n",
    )
    .expect("three-bus case parses");
    Scenario {
        network: net,
        batteries: vec![],
        generators: vec![],
        re_sources: vec![(3, ReProfile { available_kw: vec![150.0] })],
        load_scale: vec![1.0],
        prices: PriceSchedule { buy: vec![0.30], sell: vec![0.12] },
        t_steps: 1,
        dt_hours: 1.0,
        v_min_pu: 0.90,
        v_max_pu: 1.10,
        max_import_kw: None,
        solver: SolveOptions { tol_eq: 1e-7, tol_ineq: 1e-7, ..SolveOptions::default() },
    }
}

/// Star feeder with two identical solar prosumers on matching branches and
/// one consumer: symmetry should carry through to the settlement.
pub fn symmetric_prosumer_scenario() -> Scenario {
    let net = parse_case(
        "BASE 1 12.66\nBUS 1 slack 0 0 0\nBUS 2 prosumer 20 5 1\n\
         BUS 3 prosumer 20 5 1\nBUS 4 consumer 120 50 0\n\
         BRANCH 1 2 0.45 0.3\nBRANCH 1 3 0.45 0.3\nBRANCH 1 4 0.35 0.25\n",
    )
    .expect("four-bus case parses");
    let pv = ReProfile { available_kw: vec![100.0, 100.0] };
    Scenario {
        network: net,
        batteries: vec![],
        generators: vec![],
        re_sources: vec![(2, pv.clone()), (3, pv)],
        load_scale: vec![1.0; 2],
        prices: PriceSchedule { buy: vec![0.25; 2], sell: vec![0.10; 2] },
        t_steps: 2,
        dt_hours: 0.5,
        v_min_pu: 0.90,
        v_max_pu: 1.10,
        max_import_kw: None,
        solver: SolveOptions { tol_eq: 1e-7, tol_ineq: 1e-7, ..SolveOptions::default() },
    }
}
