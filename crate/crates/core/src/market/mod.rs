//! Two-stage dispatch and trading pipeline.
//!
//! Stage 1 dispatches every device over the horizon to minimize total cost
//! against retail prices (imports charged at the buying price, exports paid
//! the selling price, wear and fuel charges per device, and a per-bus share
//! of network losses). Stage 2 keeps that physical dispatch and clears a
//! local energy pool on top of it: buses importing power buy surplus from
//! buses exporting power at per-bus prices strictly inside the retail band,
//! so both sides beat their utility-only settlement. The money the pool
//! redistributes each step is exactly the retail wedge — the gap between
//! what importers would pay the utility and what exporters would earn from
//! it for the matched energy.
//!
//! The module exposes the program builders ([`build_stage1`],
//! [`build_stage2`]), the solve-and-extract drivers ([`solve_stage1`],
//! [`solve_stage2`]), the profit operator, and the per-step retail-wedge
//! accounting ([`cash_flow_imbalance`]).

mod settlement;
mod stage1;
mod stage2;

pub use settlement::{cash_flow_imbalance, TradeGroup};
pub(crate) use settlement::{settle_step, StepSettlement, IDLE_BAND_KW};
pub use stage1::{build_stage1, solve_stage1};
pub use stage2::{build_stage2, solve_stage2};

use crate::der::{BatterySpec, CostBreakdown, DgSpec, PriceSchedule, ReProfile};
use crate::network::Network;
use crate::nlp::{SolveOptions, SolveReport, SolveStatus};
use thiserror::Error;

/// Which pipeline stage produced a dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageTag {
    /// Cost-minimal dispatch settled entirely at retail prices.
    Baseline,
    /// Same physical dispatch with pool trading settled on top.
    Trading,
}

/// Complete input for one horizon run: feeder, device fleet, profiles,
/// prices, voltage band, and solver options.
///
/// Device lists are keyed by case-file bus id (1-based); at most one device
/// of each kind per bus. `load_scale[t]` multiplies every bus's base load
/// (real and reactive alike) at step `t`.
#[derive(Debug, Clone)]
pub struct Scenario {
    /// Radial feeder the run dispatches.
    pub network: Network,
    /// Batteries by bus id.
    pub batteries: Vec<(usize, BatterySpec)>,
    /// Dispatchable generators by bus id.
    pub generators: Vec<(usize, DgSpec)>,
    /// Renewable sources by bus id with their availability profiles.
    pub re_sources: Vec<(usize, ReProfile)>,
    /// Per-step multiplier applied to every bus's base load (length
    /// `t_steps`, each ≥ 0).
    pub load_scale: Vec<f64>,
    /// Retail prices per step (length `t_steps`).
    pub prices: PriceSchedule,
    /// Number of steps in the horizon.
    pub t_steps: usize,
    /// Step length in hours; `t_steps · dt_hours ≤ 24`.
    pub dt_hours: f64,
    /// Lower voltage-magnitude limit, pu.
    pub v_min_pu: f64,
    /// Upper voltage-magnitude limit, pu.
    pub v_max_pu: f64,
    /// Optional uniform cap on any one bus's grid import, kW. `None`
    /// derives a generous per-bus cap from peak load and charge rating.
    pub max_import_kw: Option<f64>,
    /// Options passed to the nonlinear solver for both stages.
    pub solver: SolveOptions,
}

impl Scenario {
    /// Real load of bus `bus` (index) at step `t`, kW.
    pub fn load_kw(&self, t: usize, bus: usize) -> f64 {
        self.network.buses[bus].p_load_kw * self.load_scale[t]
    }

    /// Reactive load of bus `bus` (index) at step `t`, kvar.
    pub fn load_kvar(&self, t: usize, bus: usize) -> f64 {
        self.network.buses[bus].q_load_kvar * self.load_scale[t]
    }
}

/// Failure modes of scenario validation, program building, and solving.
#[derive(Debug, Error)]
pub enum MarketError {
    /// The scenario violates a structural requirement (lengths, ids,
    /// parameter ranges).
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    /// The scenario cannot be supplied: a bus's load exceeds its import
    /// cap plus every local source, or the solver certified infeasibility.
    #[error("infeasible scenario: {0}")]
    InfeasibleScenario(String),
    /// Stage 2 was invoked without a baseline result for this scenario.
    #[error("missing baseline: {0}")]
    MissingBaseline(String),
    /// The solver stopped without an optimum.
    #[error("solver failed in {stage:?} stage: {status:?} ({detail})")]
    SolverFailed {
        /// Stage whose program failed.
        stage: StageTag,
        /// Terminal solver status.
        status: SolveStatus,
        /// Residual summary for diagnostics.
        detail: String,
    },
}

/// Full physical dispatch over the horizon.
///
/// All per-bus matrices are indexed `[step][bus]` with buses in case-file
/// order; entries for buses without the relevant device are zero. The slack
/// bus column is zero in every device matrix — its grid exchange is reported
/// separately per step.
///
/// Invariants (enforced by construction and re-checked by the verifier):
/// per bus and step the balance `load = import + battery + dg + re` holds
/// exactly; renewable use never exceeds availability; battery energy stays
/// inside its window and ends the horizon no lower than it began; voltage
/// magnitudes stay inside the scenario band.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchSolution {
    /// Stage that produced this dispatch.
    pub stage: StageTag,
    /// Grid exchange per bus, kW; positive imports, negative exports.
    pub p_import_kw: Vec<Vec<f64>>,
    /// Net battery terminal power, kW; positive discharging.
    pub p_battery_kw: Vec<Vec<f64>>,
    /// Charging component of the battery terminal power, kW (≥ 0).
    pub p_charge_kw: Vec<Vec<f64>>,
    /// Discharging component of the battery terminal power, kW (≥ 0).
    pub p_discharge_kw: Vec<Vec<f64>>,
    /// Stored battery energy at the end of each step, kWh.
    pub energy_kwh: Vec<Vec<f64>>,
    /// Dispatchable generation, kW.
    pub p_dg_kw: Vec<Vec<f64>>,
    /// Renewable power actually used, kW.
    pub p_re_used_kw: Vec<Vec<f64>>,
    /// Reactive generation per bus, kvar.
    pub q_gen_kvar: Vec<Vec<f64>>,
    /// Real part of the bus voltage, pu.
    pub e_pu: Vec<Vec<f64>>,
    /// Imaginary part of the bus voltage, pu.
    pub f_pu: Vec<Vec<f64>>,
    /// Per-bus half-share of incident branch losses, kW.
    pub p_loss_kw: Vec<Vec<f64>>,
    /// Real power the feeder head supplies per step, kW.
    pub slack_exchange_kw: Vec<f64>,
    /// Reactive power the feeder head supplies per step, kvar.
    pub slack_reactive_kvar: Vec<f64>,
}

/// Pool-clearing outcome on top of a baseline dispatch.
///
/// All matrices are `[step][bus]`. Payments are the pool component only and
/// sum to zero over buses each step; per-bus prices stay inside the retail
/// band; profits are never negative (every participant at least matches its
/// utility-only settlement).
#[derive(Debug, Clone, PartialEq)]
pub struct TradeOutcome {
    /// Effective transaction price per bus, $/kWh — the quantity-weighted
    /// blend of pool and retail prices the bus actually settled at. Buses
    /// not trading at a step carry that step's retail price.
    pub price_per_kwh: Vec<Vec<f64>>,
    /// Pool payment per bus, $; positive pays the pool, negative collects.
    pub payment_usd: Vec<Vec<f64>>,
    /// Per-bus cost under the baseline (utility-only) settlement, $.
    pub baseline_cost_usd: Vec<Vec<f64>>,
    /// Per-bus cost with pool trading settled, $.
    pub trading_cost_usd: Vec<Vec<f64>>,
    /// Per-bus gain from trading: baseline minus trading cost, $ (≥ 0).
    pub profit_usd: Vec<Vec<f64>>,
    /// Total gain all participants split at each step, $.
    pub step_gain_usd: Vec<f64>,
}

/// Baseline dispatch with its cost ledger and solver report.
#[derive(Debug, Clone)]
pub struct StageOneResult {
    /// The cost-minimal dispatch.
    pub dispatch: DispatchSolution,
    /// Itemized per-bus cost, `[step][bus]`, $.
    pub costs: Vec<Vec<CostBreakdown>>,
    /// Optimal objective, thousand $ over the horizon.
    pub objective_kusd: f64,
    /// Solver report for the dispatch program.
    pub solve: SolveReport,
}

/// Trading-stage result: pinned dispatch, pool settlement, solver report.
#[derive(Debug, Clone)]
pub struct StageTwoResult {
    /// The baseline dispatch re-tagged as the trading stage.
    pub dispatch: DispatchSolution,
    /// Pool settlement and per-bus accounting.
    pub trade: TradeOutcome,
    /// Solver report for the market-clearing program.
    pub solve: SolveReport,
    /// Total pool gain certified by the clearing program, $.
    pub validated_gain_usd: f64,
}

/// Gain a bus realizes by trading: baseline cost minus trading cost, $.
///
/// Positive when trading is cheaper, zero when it changes nothing, negative
/// when it would cost more (the pool never clears such a trade).
pub fn profit(baseline_cost_usd: f64, trading_cost_usd: f64) -> f64 {
    baseline_cost_usd - trading_cost_usd
}

/// Resolved per-kind device lists keyed by bus index, sorted by index.
#[derive(Debug, Clone, Default)]
pub(crate) struct DeviceIndex {
    /// Bus indices owning any device — these get grid-exchange and reactive
    /// variables in the dispatch program.
    pub der: Vec<usize>,
    /// Battery owners with specs.
    pub bat: Vec<(usize, BatterySpec)>,
    /// Generator owners with specs.
    pub dg: Vec<(usize, DgSpec)>,
    /// Renewable owners with profiles.
    pub pv: Vec<(usize, ReProfile)>,
}

impl DeviceIndex {
    /// Battery spec at bus index `i`, if any.
    pub fn battery(&self, i: usize) -> Option<&BatterySpec> {
        self.bat.iter().find(|(b, _)| *b == i).map(|(_, s)| s)
    }

    /// Generator spec at bus index `i`, if any.
    pub fn generator(&self, i: usize) -> Option<&DgSpec> {
        self.dg.iter().find(|(b, _)| *b == i).map(|(_, s)| s)
    }

    /// Renewable profile at bus index `i`, if any.
    pub fn renewable(&self, i: usize) -> Option<&ReProfile> {
        self.pv.iter().find(|(b, _)| *b == i).map(|(_, s)| s)
    }

    /// Largest available renewable output of bus `i` over the horizon, kW.
    pub fn pv_peak_kw(&self, i: usize) -> f64 {
        self.renewable(i)
            .map(|p| p.available_kw.iter().cloned().fold(0.0, f64::max))
            .unwrap_or(0.0)
    }
}

/// Resolves the scenario's device lists to bus indices, checking ids,
/// uniqueness, and slack exclusion.
pub(crate) fn device_index(s: &Scenario) -> Result<DeviceIndex, MarketError> {
    let net = &s.network;
    let slack = net.slack_index();
    let resolve = |id: usize, kind: &str| -> Result<usize, MarketError> {
        let idx = net.index_of(id).ok_or_else(|| {
            MarketError::InvalidScenario(format!("{kind} references unknown bus id {id}"))
        })?;
        if idx == slack {
            return Err(MarketError::InvalidScenario(format!(
                "{kind} may not sit on the slack bus (id {id})"
            )));
        }
        Ok(idx)
    };

    let mut dev = DeviceIndex::default();
    for (id, spec) in &s.batteries {
        dev.bat.push((resolve(*id, "battery")?, spec.clone()));
    }
    for (id, spec) in &s.generators {
        dev.dg.push((resolve(*id, "generator")?, spec.clone()));
    }
    for (id, prof) in &s.re_sources {
        dev.pv.push((resolve(*id, "renewable source")?, prof.clone()));
    }
    dev.bat.sort_by_key(|(i, _)| *i);
    dev.dg.sort_by_key(|(i, _)| *i);
    dev.pv.sort_by_key(|(i, _)| *i);
    for (name, buses) in [
        ("battery", dev.bat.iter().map(|(i, _)| *i).collect::<Vec<_>>()),
        ("generator", dev.dg.iter().map(|(i, _)| *i).collect()),
        ("renewable source", dev.pv.iter().map(|(i, _)| *i).collect()),
    ] {
        if buses.windows(2).any(|w| w[0] == w[1]) {
            return Err(MarketError::InvalidScenario(format!(
                "more than one {name} on a single bus"
            )));
        }
    }

    let mut der: Vec<usize> = dev
        .bat
        .iter()
        .map(|(i, _)| *i)
        .chain(dev.dg.iter().map(|(i, _)| *i))
        .chain(dev.pv.iter().map(|(i, _)| *i))
        .collect();
    der.sort_unstable();
    der.dedup();
    dev.der = der;
    Ok(dev)
}

/// Validates every structural requirement of a scenario.
///
/// Checks horizon and step length (`t_steps ≥ 1`, `dt_hours > 0`, total
/// span ≤ 24 h), profile and price lengths, price ordering
/// (`0 ≤ sell ≤ buy`, `buy > 0`), the voltage band, device parameter
/// ranges, id resolution, and per-bus device uniqueness.
pub fn validate_scenario(s: &Scenario) -> Result<(), MarketError> {
    let fail = |msg: String| Err(MarketError::InvalidScenario(msg));

    if s.t_steps == 0 {
        return fail("horizon must cover at least one step".into());
    }
    if !(s.dt_hours > 0.0) {
        return fail(format!("step length must be positive, got {}", s.dt_hours));
    }
    if s.t_steps as f64 * s.dt_hours > 24.0 + 1e-9 {
        return fail(format!(
            "horizon spans {:.3} h; at most 24 h supported",
            s.t_steps as f64 * s.dt_hours
        ));
    }
    if s.load_scale.len() != s.t_steps {
        return fail(format!(
            "load_scale has {} entries for {} steps",
            s.load_scale.len(),
            s.t_steps
        ));
    }
    if s.load_scale.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return fail("load_scale entries must be finite and ≥ 0".into());
    }
    if s.prices.buy.len() != s.t_steps || s.prices.sell.len() != s.t_steps {
        return fail(format!(
            "price schedule covers {} buy / {} sell steps for a {}-step horizon",
            s.prices.buy.len(),
            s.prices.sell.len(),
            s.t_steps
        ));
    }
    for t in 0..s.t_steps {
        let (b, l) = (s.prices.buy[t], s.prices.sell[t]);
        if !(b > 0.0) || !b.is_finite() || !(l >= 0.0) || !l.is_finite() || l > b {
            return fail(format!(
                "prices at step {t} must satisfy 0 ≤ sell ≤ buy with buy > 0, got buy {b} sell {l}"
            ));
        }
    }
    if !(s.v_min_pu > 0.0 && s.v_min_pu < s.v_max_pu && s.v_max_pu < 1.5) {
        return fail(format!(
            "voltage band [{}, {}] must satisfy 0 < min < max < 1.5",
            s.v_min_pu, s.v_max_pu
        ));
    }
    if let Some(cap) = s.max_import_kw {
        if !(cap > 0.0) {
            return fail(format!("import cap must be positive, got {cap}"));
        }
    }

    let dev = device_index(s)?;
    for (i, b) in &dev.bat {
        let id = s.network.buses[*i].id;
        let ok = b.capacity_kwh > 0.0
            && b.eta_c > 0.0
            && b.eta_c <= 1.0
            && b.eta_d > 0.0
            && b.eta_d <= 1.0
            && b.degradation_cost_per_kwh >= 0.0
            && b.p_charge_max_kw >= 0.0
            && b.p_discharge_max_kw >= 0.0
            && b.soc_min >= 0.0
            && b.soc_min < b.soc_max
            && b.soc_max <= 1.0
            && b.initial_soc >= b.soc_min
            && b.initial_soc <= b.soc_max;
        if !ok {
            return fail(format!("battery at bus {id} has out-of-range parameters"));
        }
    }
    for (i, g) in &dev.dg {
        let id = s.network.buses[*i].id;
        if !(g.p_min_kw >= 0.0 && g.p_min_kw <= g.p_max_kw && g.a >= 0.0 && g.c >= 0.0) {
            return fail(format!("generator at bus {id} has out-of-range parameters"));
        }
    }
    for (i, p) in &dev.pv {
        let id = s.network.buses[*i].id;
        if p.available_kw.len() != s.t_steps {
            return fail(format!(
                "renewable profile at bus {id} has {} entries for {} steps",
                p.available_kw.len(),
                s.t_steps
            ));
        }
        if p.available_kw.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return fail(format!(
                "renewable profile at bus {id} must be finite and ≥ 0"
            ));
        }
    }
    Ok(())
}
