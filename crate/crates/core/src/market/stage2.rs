//! Market clearing on top of a pinned baseline dispatch.
//!
//! The trading stage never re-dispatches hardware: the physical plan is the
//! baseline optimum, pinned variable-for-variable. On top of it, every step
//! with both importers and exporters gets matched buy/sell volumes and
//! per-bus prices, and the program maximizes the participants' total gain
//! over utility-only settlement subject to volume balance, cash balance,
//! the retail price band, and individual rationality. The optimal value is
//! the step-summed retail wedge — the gap between retail buying and selling
//! prices on the matched volume. Prices on the optimal face are degenerate,
//! so reporting uses the deterministic loss-tilted settlement computed in
//! closed form (one optimizer of this program) and the solve certifies its
//! optimality.

use crate::market::stage1::VarMap;
use crate::market::{
    device_index, settle_step, validate_scenario, MarketError, Scenario, StageOneResult,
    StageTag, StageTwoResult, StepSettlement, TradeGroup, TradeOutcome,
};
use crate::nlp::{solve_nlp, BlockStructure, NlpProblem, QuadForm, SolveStatus};

/// Checks that a baseline result actually belongs to this scenario.
fn validate_baseline(
    s: &Scenario,
    baseline: &StageOneResult,
    n_pinned: usize,
) -> Result<(), MarketError> {
    if baseline.dispatch.stage != StageTag::Baseline {
        return Err(MarketError::MissingBaseline(
            "the supplied result does not carry a baseline-stage dispatch".into(),
        ));
    }
    let nb = s.network.n_buses();
    let shape_ok = baseline.dispatch.p_import_kw.len() == s.t_steps
        && baseline.dispatch.p_import_kw.iter().all(|r| r.len() == nb)
        && baseline.dispatch.p_loss_kw.len() == s.t_steps
        && baseline.costs.len() == s.t_steps
        && baseline.solve.x.len() == n_pinned;
    if !shape_ok {
        return Err(MarketError::MissingBaseline(
            "the supplied baseline does not match the scenario's dimensions".into(),
        ));
    }
    Ok(())
}

/// Builds the clearing program for a scenario over its baseline result.
///
/// Errors: [`MarketError::MissingBaseline`] when the baseline is absent in
/// substance — wrong stage tag or wrong dimensions for this scenario — plus
/// everything scenario validation raises.
pub fn build_stage2(s: &Scenario, baseline: &StageOneResult) -> Result<NlpProblem, MarketError> {
    Ok(build_stage2_parts(s, baseline)?.0)
}

/// [`build_stage2`] plus the closed-form settlements the reporting path
/// uses.
pub(crate) fn build_stage2_parts(
    s: &Scenario,
    baseline: &StageOneResult,
) -> Result<(NlpProblem, Vec<StepSettlement>), MarketError> {
    validate_scenario(s)?;
    let dev = device_index(s)?;
    let vm1 = VarMap::new(&s.network, &dev, s.t_steps);
    validate_baseline(s, baseline, vm1.n())?;

    let slack = s.network.slack_index();
    let sbase = s.network.s_base_kw();
    let settlements: Vec<StepSettlement> = (0..s.t_steps)
        .map(|t| {
            settle_step(
                &baseline.dispatch.p_import_kw[t],
                &baseline.dispatch.p_loss_kw[t],
                slack,
                s.prices.buy[t],
                s.prices.sell[t],
                s.dt_hours,
            )
        })
        .collect();

    let n_pinned = vm1.n();
    let mut lower = baseline.solve.x.clone();
    let mut upper = baseline.solve.x.clone();
    let mut x0 = baseline.solve.x.clone();
    let mut names: Vec<String> =
        (0..n_pinned).map(|i| format!("pinned{i}")).collect();
    let mut var_block: Vec<usize> = (0..n_pinned).map(|i| i / vm1.stride).collect();

    let mut eq = Vec::new();
    let mut obj = QuadForm::default();
    let money = sbase / 1000.0;

    for (t, st) in settlements.iter().enumerate() {
        if !st.two_sided {
            continue;
        }
        let (ub, us) = (s.prices.buy[t], s.prices.sell[t]);
        let dt = s.dt_hours;
        let nb = s.network.n_buses();
        let importers: Vec<usize> =
            (0..nb).filter(|&i| st.group[i] == TradeGroup::Importer).collect();
        let exporters: Vec<usize> =
            (0..nb).filter(|&i| st.group[i] == TradeGroup::Exporter).collect();

        let base = lower.len();
        let (ni, nx) = (importers.len(), exporters.len());
        // Variable layout for this step: buy volumes, sell volumes, buyer
        // prices, seller prices.
        let buy0 = base;
        let sell0 = base + ni;
        let buy_price0 = base + ni + nx;
        let sell_price0 = base + ni + nx + ni;
        let mut push_var = |lo: f64, hi: f64, start: f64, name: String| {
            lower.push(lo);
            upper.push(hi);
            x0.push(start);
            names.push(name);
            var_block.push(t);
        };
        for &i in &importers {
            let id = s.network.buses[i].id;
            push_var(
                0.0,
                st.traded_kw[i] / sbase,
                st.pooled_kw[i] / sbase,
                format!("buy{id}@{t}"),
            );
        }
        for &j in &exporters {
            let id = s.network.buses[j].id;
            push_var(
                0.0,
                st.traded_kw[j] / sbase,
                st.pooled_kw[j] / sbase,
                format!("sell{id}@{t}"),
            );
        }
        for &i in &importers {
            let id = s.network.buses[i].id;
            push_var(us, ub, st.pool_price[i], format!("pbuy{id}@{t}"));
        }
        for &j in &exporters {
            let id = s.network.buses[j].id;
            push_var(us, ub, st.pool_price[j], format!("psell{id}@{t}"));
        }

        // Matched volume balances.
        let mut volume = QuadForm::default();
        for k in 0..importers.len() {
            volume.push_linear(buy0 + k, 1.0);
        }
        for k in 0..exporters.len() {
            volume.push_linear(sell0 + k, -1.0);
        }
        eq.push(volume);

        // Pool cash balances: buyers' payments equal sellers' receipts.
        let mut cash = QuadForm::default();
        for k in 0..importers.len() {
            cash.push_quadratic(buy0 + k, buy_price0 + k, 1.0);
        }
        for k in 0..exporters.len() {
            cash.push_quadratic(sell0 + k, sell_price0 + k, -1.0);
        }
        eq.push(cash);

        // Individual rationality — no participant settles worse than retail
        // — is enforced by the variable bounds themselves: a buyer's gain
        // pb·(ub − πb) and a seller's gain ps·(πs − us) are products of
        // nonnegative factors (pb, ps ≥ 0 and us ≤ π ≤ ub). Restating the
        // products as inequality rows would add nothing to the feasible set
        // while wrecking the interior-point conditioning: their slacks
        // vanish at every bound corner, so near-idle participants drive the
        // central duals to μ/slack ~ 1e5 and the merit penalty with them.

        // Objective: maximize total gain = matched volumes times each
        // side's distance from retail (minimized as its negative).
        let scale = money * dt;
        for k in 0..importers.len() {
            obj.push_quadratic(buy0 + k, buy_price0 + k, scale);
            obj.push_linear(buy0 + k, -ub * scale);
        }
        for k in 0..exporters.len() {
            obj.push_linear(sell0 + k, us * scale);
            obj.push_quadratic(sell0 + k, sell_price0 + k, -scale);
        }
    }

    let n = lower.len();
    let problem = NlpProblem {
        n,
        objective: obj,
        obj_ramps: Vec::new(),
        eq,
        ineq: Vec::new(),
        lower,
        upper,
        x0,
        names,
        blocks: Some(BlockStructure { n_blocks: s.t_steps, var_block }),
    };
    Ok((problem, settlements))
}

/// Solves the clearing program and assembles the trading-stage result.
///
/// The physical dispatch is the baseline's, re-tagged; the reported
/// settlement is the closed-form loss-tilted split, whose optimality the
/// solve certifies ([`StageTwoResult::validated_gain_usd`] carries the
/// program's own optimum). Errors: [`MarketError::MissingBaseline`] and
/// propagated solver statuses as [`MarketError::SolverFailed`].
pub fn solve_stage2(
    s: &Scenario,
    baseline: &StageOneResult,
) -> Result<StageTwoResult, MarketError> {
    let (p, settlements) = build_stage2_parts(s, baseline)?;
    let report = solve_nlp(&p, &s.solver);
    if report.status != SolveStatus::Optimal {
        return Err(MarketError::SolverFailed {
            stage: StageTag::Trading,
            status: report.status,
            detail: format!(
                "eq {:.2e} ineq {:.2e} kkt {:.2e} after {} iterations",
                report.eq_violation,
                report.ineq_violation,
                report.kkt_residual,
                report.iterations
            ),
        });
    }
    let validated_gain_usd = -report.objective * 1000.0;

    let nb = s.network.n_buses();
    let t_steps = s.t_steps;
    let zeros = || vec![vec![0.0; nb]; t_steps];
    let mut trade = TradeOutcome {
        price_per_kwh: zeros(),
        payment_usd: zeros(),
        baseline_cost_usd: zeros(),
        trading_cost_usd: zeros(),
        profit_usd: zeros(),
        step_gain_usd: vec![0.0; t_steps],
    };
    for (t, st) in settlements.iter().enumerate() {
        trade.step_gain_usd[t] = st.gain_usd;
        for i in 0..nb {
            let base_cost = baseline.costs[t][i].total;
            trade.price_per_kwh[t][i] = st.price[i];
            trade.payment_usd[t][i] = st.payment_usd[i];
            trade.baseline_cost_usd[t][i] = base_cost;
            trade.profit_usd[t][i] = st.profit_usd[i];
            trade.trading_cost_usd[t][i] = base_cost - st.profit_usd[i];
        }
    }

    let mut dispatch = baseline.dispatch.clone();
    dispatch.stage = StageTag::Trading;
    Ok(StageTwoResult { dispatch, trade, solve: report, validated_gain_usd })
}
