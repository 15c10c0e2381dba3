//! Baseline dispatch: the horizon-wide cost-minimization program, its
//! solver driver, and extraction of dispatch plus per-bus cost ledger.
//!
//! One program covers the whole horizon. Each step contributes the bus
//! voltages (rectangular parts, slack held at 1+j0), grid exchange and
//! reactive support for device-owning buses, battery charge/discharge/
//! energy, renewable use, and generator output. Buses without devices
//! import exactly their load, so they appear only through constants.
//! Battery energy rows tie consecutive steps together; everything else is
//! step-local, which the solver exploits through its block factorization.

use crate::der::{
    battery_cost, bus_total_cost, dg_cost, import_cost, loss_cost, CostBreakdown, DgSpec,
    EPS_ON_KW,
};
use crate::market::{
    device_index, validate_scenario, DeviceIndex, DispatchSolution, MarketError, Scenario,
    StageOneResult, StageTag,
};
use crate::network::{build_admittance, AdmittanceTable, Network};
use crate::nlp::{solve_nlp, BlockStructure, NlpProblem, QuadForm, RampTerm, SolveStatus};

/// Safety margin multiplier for the derived per-bus import cap.
const IMPORT_CAP_HEADROOM: f64 = 1.25;

/// Flat addition to the derived per-bus import cap, kW.
const IMPORT_CAP_MARGIN_KW: f64 = 100.0;

/// Reactive capability of a device bus as a fraction of its real capacity.
const REACTIVE_CAP_FRACTION: f64 = 0.6;

/// Half-width of the voltage imaginary-part box, pu.
const F_BOX_PU: f64 = 0.3;

/// Variable layout of the dispatch program.
///
/// Variables are grouped per step ("stride" apart): first the rectangular
/// voltage parts of every non-slack bus, then grid import/export and
/// reactive support per device bus, then charge/discharge/energy per
/// battery, renewable use per source, and generator output. Accessors take
/// a step and a bus index and return the flat variable index.
#[derive(Debug, Clone)]
pub(crate) struct VarMap {
    pub t_steps: usize,
    pub stride: usize,
    /// Non-slack bus indices in case order.
    pub non_slack: Vec<usize>,
    ns_ord: Vec<usize>,
    der_ord: Vec<usize>,
    bat_ord: Vec<usize>,
    pv_ord: Vec<usize>,
    dg_ord: Vec<usize>,
    imp0: usize,
    exp0: usize,
    qg0: usize,
    chg0: usize,
    dis0: usize,
    en0: usize,
    re0: usize,
    dgv0: usize,
}

impl VarMap {
    pub fn new(net: &Network, dev: &DeviceIndex, t_steps: usize) -> Self {
        let nb = net.n_buses();
        let slack = net.slack_index();
        let non_slack: Vec<usize> = (0..nb).filter(|&i| i != slack).collect();
        let ordinals = |buses: &[usize]| {
            let mut ord = vec![usize::MAX; nb];
            for (k, &i) in buses.iter().enumerate() {
                ord[i] = k;
            }
            ord
        };
        let bat_buses: Vec<usize> = dev.bat.iter().map(|(i, _)| *i).collect();
        let pv_buses: Vec<usize> = dev.pv.iter().map(|(i, _)| *i).collect();
        let dg_buses: Vec<usize> = dev.dg.iter().map(|(i, _)| *i).collect();
        let (nn, nd) = (non_slack.len(), dev.der.len());
        let (nbat, npv, ndg) = (bat_buses.len(), pv_buses.len(), dg_buses.len());
        let imp0 = 2 * nn;
        let exp0 = imp0 + nd;
        let qg0 = exp0 + nd;
        let chg0 = qg0 + nd;
        let dis0 = chg0 + nbat;
        let en0 = dis0 + nbat;
        let re0 = en0 + nbat;
        let dgv0 = re0 + npv;
        VarMap {
            t_steps,
            stride: dgv0 + ndg,
            ns_ord: ordinals(&non_slack),
            non_slack,
            der_ord: ordinals(&dev.der),
            bat_ord: ordinals(&bat_buses),
            pv_ord: ordinals(&pv_buses),
            dg_ord: ordinals(&dg_buses),
            imp0,
            exp0,
            qg0,
            chg0,
            dis0,
            en0,
            re0,
            dgv0,
        }
    }

    fn base(&self, t: usize) -> usize {
        t * self.stride
    }

    /// Real voltage part of non-slack bus `bus` at step `t`.
    pub fn e(&self, t: usize, bus: usize) -> usize {
        self.base(t) + 2 * self.ns_ord[bus]
    }

    /// Imaginary voltage part of non-slack bus `bus` at step `t`.
    pub fn f(&self, t: usize, bus: usize) -> usize {
        self.base(t) + 2 * self.ns_ord[bus] + 1
    }

    /// Grid import of device bus `bus` at step `t` (≥ 0).
    pub fn imp(&self, t: usize, bus: usize) -> usize {
        self.base(t) + self.imp0 + self.der_ord[bus]
    }

    /// Grid export of device bus `bus` at step `t` (≥ 0).
    pub fn exp(&self, t: usize, bus: usize) -> usize {
        self.base(t) + self.exp0 + self.der_ord[bus]
    }

    /// Reactive support of device bus `bus` at step `t`.
    pub fn qg(&self, t: usize, bus: usize) -> usize {
        self.base(t) + self.qg0 + self.der_ord[bus]
    }

    /// Battery charging power at `bus`, step `t` (≥ 0).
    pub fn chg(&self, t: usize, bus: usize) -> usize {
        self.base(t) + self.chg0 + self.bat_ord[bus]
    }

    /// Battery discharging power at `bus`, step `t` (≥ 0).
    pub fn dis(&self, t: usize, bus: usize) -> usize {
        self.base(t) + self.dis0 + self.bat_ord[bus]
    }

    /// Stored battery energy at `bus` at the end of step `t`.
    pub fn energy(&self, t: usize, bus: usize) -> usize {
        self.base(t) + self.en0 + self.bat_ord[bus]
    }

    /// Renewable power used at `bus`, step `t`.
    pub fn re(&self, t: usize, bus: usize) -> usize {
        self.base(t) + self.re0 + self.pv_ord[bus]
    }

    /// Generator output at `bus`, step `t`.
    pub fn dgp(&self, t: usize, bus: usize) -> usize {
        self.base(t) + self.dgv0 + self.dg_ord[bus]
    }

    /// Total variable count.
    pub fn n(&self) -> usize {
        self.t_steps * self.stride
    }
}

/// Derived cap on one bus's grid import, kW.
fn import_cap_kw(s: &Scenario, dev: &DeviceIndex, bus: usize) -> f64 {
    s.max_import_kw.unwrap_or_else(|| {
        let scale_max = s.load_scale.iter().cloned().fold(0.0, f64::max);
        let peak_load = s.network.buses[bus].p_load_kw * scale_max;
        let chg = dev.battery(bus).map(|b| b.p_charge_max_kw).unwrap_or(0.0);
        IMPORT_CAP_HEADROOM * (peak_load + chg) + IMPORT_CAP_MARGIN_KW
    })
}

/// Warm-start level for a committable generator at one step, kW.
///
/// The commitment charge makes the single-bus cost bistable around zero
/// output: descent from an "off" start can never climb the charge ramp, and
/// an "on" start is only abandoned when the basin it sits in is genuinely
/// uneconomic. The start therefore has to land on the right side of the
/// kink, which a standalone retail pre-solve decides: local load displaces
/// the buying price, surplus earns the selling price, and the cheapest of
/// the candidate stationary levels (off, load-following, and the two
/// marginal-cost crossings) wins.
fn dg_start_kw(g: &DgSpec, local_load_kw: f64, u_buy: f64, u_sell: f64) -> f64 {
    let clamp = |p: f64| p.clamp(g.p_min_kw, g.p_max_kw);
    let crossing = |price: f64| {
        if g.a > 0.0 {
            clamp((price - g.b) / (2.0 * g.a))
        } else if price > g.b {
            g.p_max_kw
        } else {
            g.p_min_kw
        }
    };
    let net_cost = |p: f64| {
        let run = dg_cost(p, g).expect("candidate clamped into range");
        run - u_buy * p.min(local_load_kw) - u_sell * (p - local_load_kw).max(0.0)
    };
    let candidates = [
        g.p_min_kw,
        clamp(local_load_kw),
        crossing(u_buy).min(local_load_kw.max(g.p_min_kw)).max(g.p_min_kw),
        crossing(u_sell).max(local_load_kw.min(g.p_max_kw)),
        g.p_max_kw,
    ];
    let mut best = g.p_min_kw;
    let mut best_cost = f64::INFINITY;
    for p in candidates {
        let c = net_cost(p);
        if c < best_cost {
            best_cost = c;
            best = p;
        }
    }
    best
}

/// Largest power a bus can source at step `t` (import cap plus local
/// device capability), kW.
fn supply_cap_kw(s: &Scenario, dev: &DeviceIndex, t: usize, bus: usize) -> f64 {
    if dev.der.contains(&bus) {
        let dis = dev.battery(bus).map(|b| b.p_discharge_max_kw).unwrap_or(0.0);
        let dgm = dev.generator(bus).map(|g| g.p_max_kw).unwrap_or(0.0);
        let pv = dev.renewable(bus).map(|p| p.available_kw[t]).unwrap_or(0.0);
        import_cap_kw(s, dev, bus) + dis + dgm + pv
    } else {
        s.max_import_kw.unwrap_or(f64::INFINITY)
    }
}

/// Rejects scenarios where some bus's load exceeds everything it could
/// possibly source at some step.
fn supply_capability_check(s: &Scenario, dev: &DeviceIndex) -> Result<(), MarketError> {
    let slack = s.network.slack_index();
    for t in 0..s.t_steps {
        for i in 0..s.network.n_buses() {
            if i == slack {
                continue;
            }
            let load = s.load_kw(t, i);
            let cap = supply_cap_kw(s, dev, t, i);
            if load > cap + 1e-9 {
                return Err(MarketError::InfeasibleScenario(format!(
                    "bus {} needs {:.1} kW at step {} but can source at most {:.1} kW",
                    s.network.buses[i].id, load, t, cap
                )));
            }
        }
    }
    Ok(())
}

/// Real-power network balance for one non-slack bus and step:
/// calculated injection plus grid draw equals zero.
fn row_real_balance(
    s: &Scenario,
    adm: &AdmittanceTable,
    vm: &VarMap,
    dev: &DeviceIndex,
    t: usize,
    i: usize,
) -> QuadForm {
    let slack = s.network.slack_index();
    let sbase = s.network.s_base_kw();
    let (g_ii, _) = adm.ybus_diag(i);
    let mut r = QuadForm::default();
    r.push_quadratic(vm.e(t, i), vm.e(t, i), g_ii);
    r.push_quadratic(vm.f(t, i), vm.f(t, i), g_ii);
    for (j, g, b) in adm.ybus_neighbors(i) {
        if j == slack {
            // Slack voltage is the constant 1 + j0.
            r.push_linear(vm.e(t, i), g);
            r.push_linear(vm.f(t, i), b);
        } else {
            r.push_quadratic(vm.e(t, i), vm.e(t, j), g);
            r.push_quadratic(vm.e(t, i), vm.f(t, j), -b);
            r.push_quadratic(vm.f(t, i), vm.f(t, j), g);
            r.push_quadratic(vm.f(t, i), vm.e(t, j), b);
        }
    }
    if dev.der.contains(&i) {
        r.push_linear(vm.imp(t, i), 1.0);
        r.push_linear(vm.exp(t, i), -1.0);
    } else {
        r.constant += s.load_kw(t, i) / sbase;
    }
    r
}

/// Reactive network balance for one non-slack bus and step.
fn row_reactive_balance(
    s: &Scenario,
    adm: &AdmittanceTable,
    vm: &VarMap,
    dev: &DeviceIndex,
    t: usize,
    i: usize,
) -> QuadForm {
    let slack = s.network.slack_index();
    let sbase = s.network.s_base_kw();
    let (_, b_ii) = adm.ybus_diag(i);
    let mut r = QuadForm::default();
    r.push_quadratic(vm.e(t, i), vm.e(t, i), -b_ii);
    r.push_quadratic(vm.f(t, i), vm.f(t, i), -b_ii);
    for (j, g, b) in adm.ybus_neighbors(i) {
        if j == slack {
            r.push_linear(vm.f(t, i), g);
            r.push_linear(vm.e(t, i), -b);
        } else {
            r.push_quadratic(vm.f(t, i), vm.e(t, j), g);
            r.push_quadratic(vm.f(t, i), vm.f(t, j), -b);
            r.push_quadratic(vm.e(t, i), vm.f(t, j), -g);
            r.push_quadratic(vm.e(t, i), vm.e(t, j), -b);
        }
    }
    if dev.der.contains(&i) {
        r.push_linear(vm.qg(t, i), -1.0);
    }
    r.constant += s.load_kvar(t, i) / sbase;
    r
}

/// Device balance for one device bus and step: grid exchange plus local
/// sources meet the load.
fn row_device_balance(
    s: &Scenario,
    vm: &VarMap,
    dev: &DeviceIndex,
    t: usize,
    i: usize,
) -> QuadForm {
    let sbase = s.network.s_base_kw();
    let mut r = QuadForm::constant(-s.load_kw(t, i) / sbase);
    r.push_linear(vm.imp(t, i), 1.0);
    r.push_linear(vm.exp(t, i), -1.0);
    if dev.battery(i).is_some() {
        r.push_linear(vm.dis(t, i), 1.0);
        r.push_linear(vm.chg(t, i), -1.0);
    }
    if dev.generator(i).is_some() {
        r.push_linear(vm.dgp(t, i), 1.0);
    }
    if dev.renewable(i).is_some() {
        r.push_linear(vm.re(t, i), 1.0);
    }
    r
}

/// Builds the baseline dispatch program for a scenario.
///
/// The objective is the horizon cost in thousand $: grid imports charged at
/// the buying price, exports credited at the selling price, battery wear,
/// generator fuel with its commitment charge, and each bus's half-share of
/// incident branch losses priced at the buying price (shares falling to the
/// slack bus are never charged). Equalities enforce the network power
/// balance at every non-slack bus, the device balance at every device bus,
/// and the battery energy recursion; inequalities keep voltage magnitudes
/// inside the scenario band. Errors: [`MarketError::InvalidScenario`] for
/// structural faults, [`MarketError::InfeasibleScenario`] when some bus's
/// load exceeds everything it could source.
pub fn build_stage1(s: &Scenario) -> Result<NlpProblem, MarketError> {
    Ok(build_stage1_parts(s)?.0)
}

/// [`build_stage1`] plus the variable map and device index the extractor
/// needs.
pub(crate) fn build_stage1_parts(
    s: &Scenario,
) -> Result<(NlpProblem, VarMap, DeviceIndex), MarketError> {
    validate_scenario(s)?;
    let dev = device_index(s)?;
    supply_capability_check(s, &dev)?;

    let net = &s.network;
    let slack = net.slack_index();
    let sbase = net.s_base_kw();
    let adm =
        build_admittance(net).map_err(|e| MarketError::InvalidScenario(e.to_string()))?;
    let vm = VarMap::new(net, &dev, s.t_steps);
    let t_steps = s.t_steps;
    let dt = s.dt_hours;
    let n = vm.n();

    let mut lower = vec![0.0; n];
    let mut upper = vec![0.0; n];
    let mut x0 = vec![0.0; n];
    let mut names = vec![String::new(); n];
    let e_lo = 0.85 * s.v_min_pu;
    let e_hi = 1.05 * s.v_max_pu;

    for t in 0..t_steps {
        for &i in &vm.non_slack {
            let id = net.buses[i].id;
            let (ie, fi) = (vm.e(t, i), vm.f(t, i));
            lower[ie] = e_lo;
            upper[ie] = e_hi;
            x0[ie] = 1.0;
            names[ie] = format!("e{id}@{t}");
            lower[fi] = -F_BOX_PU;
            upper[fi] = F_BOX_PU;
            x0[fi] = 0.0;
            names[fi] = format!("f{id}@{t}");
        }
        for &i in &dev.der {
            let id = net.buses[i].id;
            let dis = dev.battery(i).map(|b| b.p_discharge_max_kw).unwrap_or(0.0);
            let dgm = dev.generator(i).map(|g| g.p_max_kw).unwrap_or(0.0);
            let gen_cap = dis + dgm + dev.pv_peak_kw(i);

            let vi = vm.imp(t, i);
            upper[vi] = import_cap_kw(s, &dev, i) / sbase;
            x0[vi] = (s.load_kw(t, i) / sbase).min(upper[vi]);
            names[vi] = format!("imp{id}@{t}");

            let vx = vm.exp(t, i);
            upper[vx] = gen_cap / sbase;
            names[vx] = format!("exp{id}@{t}");

            let vq = vm.qg(t, i);
            let qcap = REACTIVE_CAP_FRACTION * gen_cap / sbase;
            lower[vq] = -qcap;
            upper[vq] = qcap;
            names[vq] = format!("qg{id}@{t}");
        }
        for (i, b) in &dev.bat {
            let id = net.buses[*i].id;
            let vc = vm.chg(t, *i);
            upper[vc] = b.p_charge_max_kw / sbase;
            names[vc] = format!("chg{id}@{t}");
            let vd = vm.dis(t, *i);
            upper[vd] = b.p_discharge_max_kw / sbase;
            names[vd] = format!("dis{id}@{t}");
            let ve = vm.energy(t, *i);
            lower[ve] = b.min_kwh() / sbase;
            upper[ve] = b.max_kwh() / sbase;
            if t + 1 == t_steps {
                // The horizon may not run the store down below its start.
                lower[ve] = lower[ve].max(b.initial_kwh() / sbase);
            }
            x0[ve] = (b.initial_kwh() / sbase).clamp(lower[ve], upper[ve]);
            names[ve] = format!("en{id}@{t}");
        }
        for (i, p) in &dev.pv {
            let id = net.buses[*i].id;
            let vr = vm.re(t, *i);
            upper[vr] = p.available_kw[t] / sbase;
            x0[vr] = upper[vr];
            names[vr] = format!("re{id}@{t}");
        }
        for (i, g) in &dev.dg {
            let id = net.buses[*i].id;
            let vp = vm.dgp(t, *i);
            lower[vp] = g.p_min_kw / sbase;
            upper[vp] = g.p_max_kw / sbase;
            x0[vp] = dg_start_kw(g, s.load_kw(t, *i), s.prices.buy[t], s.prices.sell[t])
                / sbase;
            names[vp] = format!("dg{id}@{t}");
        }
    }

    let mut eq = Vec::with_capacity(t_steps * (2 * vm.non_slack.len() + dev.der.len()));
    for t in 0..t_steps {
        for &i in &vm.non_slack {
            eq.push(row_real_balance(s, &adm, &vm, &dev, t, i));
        }
        for &i in &vm.non_slack {
            eq.push(row_reactive_balance(s, &adm, &vm, &dev, t, i));
        }
        for &i in &dev.der {
            eq.push(row_device_balance(s, &vm, &dev, t, i));
        }
        for (i, b) in &dev.bat {
            // Stored energy recursion: the store gains eta_c·P·dt charging
            // and drains eta_d·P·dt delivering P.
            let mut r = QuadForm::default();
            r.push_linear(vm.energy(t, *i), 1.0);
            if t == 0 {
                r.constant -= b.initial_kwh() / sbase;
            } else {
                r.push_linear(vm.energy(t - 1, *i), -1.0);
            }
            r.push_linear(vm.dis(t, *i), b.eta_d * dt);
            r.push_linear(vm.chg(t, *i), -b.eta_c * dt);
            eq.push(r);
        }
    }

    let mut ineq = Vec::with_capacity(t_steps * 2 * vm.non_slack.len());
    let (vmin2, vmax2) = (s.v_min_pu * s.v_min_pu, s.v_max_pu * s.v_max_pu);
    for t in 0..t_steps {
        for &i in &vm.non_slack {
            let mut lo = QuadForm::constant(vmin2);
            lo.push_quadratic(vm.e(t, i), vm.e(t, i), -1.0);
            lo.push_quadratic(vm.f(t, i), vm.f(t, i), -1.0);
            ineq.push(lo);
            let mut hi = QuadForm::constant(-vmax2);
            hi.push_quadratic(vm.e(t, i), vm.e(t, i), 1.0);
            hi.push_quadratic(vm.f(t, i), vm.f(t, i), 1.0);
            ineq.push(hi);
        }
    }

    let mut obj = QuadForm::default();
    let mut ramps = Vec::new();
    // Thousand $ per pu·h of power at a $/kWh price.
    let money = sbase / 1000.0;
    for t in 0..t_steps {
        let kb = s.prices.buy[t] * dt * money;
        let ks = s.prices.sell[t] * dt * money;
        for &i in &dev.der {
            obj.push_linear(vm.imp(t, i), kb);
            obj.push_linear(vm.exp(t, i), -ks);
        }
        for &i in &vm.non_slack {
            if !dev.der.contains(&i) {
                obj.constant += s.load_kw(t, i) / sbase * kb;
            }
        }
        for (i, b) in &dev.bat {
            let kw = b.degradation_cost_per_kwh * dt * money;
            obj.push_linear(vm.chg(t, *i), kw);
            obj.push_linear(vm.dis(t, *i), kw);
        }
        for (i, g) in &dev.dg {
            let vp = vm.dgp(t, *i);
            if g.a != 0.0 {
                obj.push_quadratic(vp, vp, g.a * dt * sbase * sbase / 1000.0);
            }
            obj.push_linear(vp, g.b * dt * sbase / 1000.0);
            if g.c > 0.0 {
                ramps.push(RampTerm {
                    var: vp,
                    eps: EPS_ON_KW / sbase,
                    height: g.c * dt / 1000.0,
                });
            }
        }
        for br in &net.branches {
            let a = net.index_of(br.from).expect("validated");
            let b2 = net.index_of(br.to).expect("validated");
            let denom = br.r_pu * br.r_pu + br.x_pu * br.x_pu;
            if denom == 0.0 || br.r_pu == 0.0 {
                continue;
            }
            let g = br.r_pu / denom;
            // Loss charges land on the non-slack endpoints' half-shares;
            // the slack's own half-share is never billed.
            let touches_slack = a == slack || b2 == slack;
            let w = kb * if touches_slack { 0.5 * g } else { g };
            let other = if a == slack { b2 } else { a };
            if touches_slack {
                // g_eff · ((e − 1)² + f²) against the slack's fixed voltage.
                obj.push_quadratic(vm.e(t, other), vm.e(t, other), w);
                obj.push_quadratic(vm.f(t, other), vm.f(t, other), w);
                obj.push_linear(vm.e(t, other), -2.0 * w);
                obj.constant += w;
            } else {
                obj.push_quadratic(vm.e(t, a), vm.e(t, a), w);
                obj.push_quadratic(vm.e(t, b2), vm.e(t, b2), w);
                obj.push_quadratic(vm.e(t, a), vm.e(t, b2), -2.0 * w);
                obj.push_quadratic(vm.f(t, a), vm.f(t, a), w);
                obj.push_quadratic(vm.f(t, b2), vm.f(t, b2), w);
                obj.push_quadratic(vm.f(t, a), vm.f(t, b2), -2.0 * w);
            }
        }
    }

    let ranges: Vec<_> = (0..t_steps).map(|t| t * vm.stride..(t + 1) * vm.stride).collect();
    let problem = NlpProblem {
        n,
        objective: obj,
        obj_ramps: ramps,
        eq,
        ineq,
        lower,
        upper,
        x0,
        names,
        blocks: Some(BlockStructure::from_ranges(&ranges)),
    };
    Ok((problem, vm, dev))
}

/// Solves the baseline dispatch program and extracts the result.
///
/// Errors: everything [`build_stage1`] raises;
/// [`MarketError::InfeasibleScenario`] when the solver certifies the
/// program infeasible; [`MarketError::SolverFailed`] on any other
/// non-optimal terminal status.
pub fn solve_stage1(s: &Scenario) -> Result<StageOneResult, MarketError> {
    let (p, vm, dev) = build_stage1_parts(s)?;
    let report = solve_nlp(&p, &s.solver);
    match report.status {
        SolveStatus::Optimal => {}
        SolveStatus::Infeasible => {
            return Err(MarketError::InfeasibleScenario(format!(
                "dispatch program certified infeasible (balance residual {:.2e})",
                report.eq_violation
            )));
        }
        status => {
            return Err(MarketError::SolverFailed {
                stage: StageTag::Baseline,
                status,
                detail: format!(
                    "eq {:.2e} ineq {:.2e} kkt {:.2e} after {} iterations",
                    report.eq_violation,
                    report.ineq_violation,
                    report.kkt_residual,
                    report.iterations
                ),
            });
        }
    }
    let (dispatch, costs) = extract_dispatch(s, &dev, &vm, &report.x, StageTag::Baseline)?;
    Ok(StageOneResult { dispatch, costs, objective_kusd: report.objective, solve: report })
}

/// Converts a solved variable vector into the physical dispatch and the
/// per-bus cost ledger.
///
/// Simultaneous import/export at a bus is netted away, as is simultaneous
/// charge/discharge when the two battery efficiencies agree (only then does
/// netting leave the energy recursion untouched). The residual of the
/// device balance is absorbed into the grid exchange so the per-bus power
/// identity holds exactly in kW.
pub(crate) fn extract_dispatch(
    s: &Scenario,
    dev: &DeviceIndex,
    vm: &VarMap,
    x: &[f64],
    stage: StageTag,
) -> Result<(DispatchSolution, Vec<Vec<CostBreakdown>>), MarketError> {
    let net = &s.network;
    let slack = net.slack_index();
    let nb = net.n_buses();
    let sbase = net.s_base_kw();
    let adm =
        build_admittance(net).map_err(|e| MarketError::InvalidScenario(e.to_string()))?;
    let t_steps = s.t_steps;
    let zeros = || vec![vec![0.0; nb]; t_steps];

    let mut d = DispatchSolution {
        stage,
        p_import_kw: zeros(),
        p_battery_kw: zeros(),
        p_charge_kw: zeros(),
        p_discharge_kw: zeros(),
        energy_kwh: zeros(),
        p_dg_kw: zeros(),
        p_re_used_kw: zeros(),
        q_gen_kvar: zeros(),
        e_pu: zeros(),
        f_pu: zeros(),
        p_loss_kw: zeros(),
        slack_exchange_kw: vec![0.0; t_steps],
        slack_reactive_kvar: vec![0.0; t_steps],
    };

    for t in 0..t_steps {
        d.e_pu[t][slack] = 1.0;
        for &i in &vm.non_slack {
            d.e_pu[t][i] = x[vm.e(t, i)];
            d.f_pu[t][i] = x[vm.f(t, i)];
        }
        for (i, b) in &dev.bat {
            let mut chg = x[vm.chg(t, *i)] * sbase;
            let mut dis = x[vm.dis(t, *i)] * sbase;
            if b.eta_c == b.eta_d {
                let m = chg.min(dis);
                chg -= m;
                dis -= m;
            }
            d.p_charge_kw[t][*i] = chg;
            d.p_discharge_kw[t][*i] = dis;
            d.p_battery_kw[t][*i] = dis - chg;
            d.energy_kwh[t][*i] = x[vm.energy(t, *i)] * sbase;
        }
        for (i, _) in &dev.dg {
            d.p_dg_kw[t][*i] = x[vm.dgp(t, *i)] * sbase;
        }
        for (i, _) in &dev.pv {
            d.p_re_used_kw[t][*i] = x[vm.re(t, *i)] * sbase;
        }
        for &i in &dev.der {
            d.q_gen_kvar[t][i] = x[vm.qg(t, i)] * sbase;
        }
        for &i in &vm.non_slack {
            d.p_import_kw[t][i] = s.load_kw(t, i)
                - d.p_battery_kw[t][i]
                - d.p_dg_kw[t][i]
                - d.p_re_used_kw[t][i];
        }

        let v = crate::acpf::VoltageState {
            e: d.e_pu[t].clone(),
            f: d.f_pu[t].clone(),
        };
        let flows = crate::acpf::branch_flows(net, &adm, &v);
        d.p_loss_kw[t] = flows.bus_loss_kw.clone();
        let mut sp = 0.0;
        let mut sq = 0.0;
        for br in &flows.branches {
            if br.i == slack {
                sp += br.p_from_kw;
                sq += br.q_from_kvar;
            } else if br.j == slack {
                sp += br.p_to_kw;
                sq += br.q_to_kvar;
            }
        }
        d.slack_exchange_kw[t] = sp;
        d.slack_reactive_kvar[t] = sq;
    }

    let mut costs = vec![vec![CostBreakdown::default(); nb]; t_steps];
    for t in 0..t_steps {
        let (ub, us) = (s.prices.buy[t], s.prices.sell[t]);
        for &i in &vm.non_slack {
            let pim = d.p_import_kw[t][i];
            let import = import_cost(pim, if pim >= 0.0 { ub } else { us }, s.dt_hours);
            let battery = dev
                .battery(i)
                .map(|b| battery_cost(d.p_battery_kw[t][i], s.dt_hours, b))
                .unwrap_or(0.0);
            let dg = match dev.generator(i) {
                Some(g) => {
                    s.dt_hours
                        * dg_cost(d.p_dg_kw[t][i].max(0.0), g)
                            .map_err(|e| MarketError::InvalidScenario(e.to_string()))?
                }
                None => 0.0,
            };
            let loss = loss_cost(d.p_loss_kw[t][i].max(0.0), ub, s.dt_hours)
                .map_err(|e| MarketError::InvalidScenario(e.to_string()))?;
            costs[t][i] = bus_total_cost(import, battery, dg, loss);
        }
    }
    Ok((d, costs))
}
