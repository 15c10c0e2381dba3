//! Uniform-price benefit reallocation on top of the cleared pool.
//!
//! Pool clearing settles each step at per-bus prices, so two buses moving
//! the same energy can take home different per-unit gains. This pass moves
//! every step's pool cash to a single price: the importers' pool payments
//! are summed and divided by the step's matched energy, giving one price
//! `π*` strictly inside the retail band, and every participant's matched
//! quantity is re-priced at it. The pool stays budget-balanced, each side's
//! total gain is untouched — the reallocation moves money between
//! participants, never creates it — and profits per unit of energy
//! exchanged become uniform within each side of the pool (exactly so for
//! exporters; importers keep a small spread from their unequal loss
//! shares).

use crate::market::{
    settle_step, DispatchSolution, Scenario, TradeGroup, TradeOutcome, IDLE_BAND_KW,
};
use thiserror::Error;

/// Tolerance for the uniform price's retail-band check, $/kWh.
const PRICE_BAND_SLACK: f64 = 1e-9;

/// Failure modes of the benefit-reallocation pass.
#[derive(Debug, Error)]
pub enum AllocationError {
    /// Every bus sits inside the idle band, so there are no sides to
    /// normalize over.
    #[error("no bus trades at this step; contribution rates are undefined")]
    EmptyTradingStep,
    /// A trading step cleared no energy, leaving the uniform price
    /// undefined.
    #[error("step {step} cleared no energy; the uniform price is undefined")]
    ZeroTradedEnergy {
        /// Offending step index.
        step: usize,
    },
    /// The pooled payments imply a price outside the retail band — the
    /// trading-stage input violates its own price bounds.
    #[error(
        "uniform price {price:.6} $/kWh at step {step} falls outside the \
         retail band [{sell:.6}, {buy:.6}]"
    )]
    PriceOutOfBounds {
        /// Offending step index.
        step: usize,
        /// The implied uniform price, $/kWh.
        price: f64,
        /// Retail buying price at the step, $/kWh.
        buy: f64,
        /// Retail selling price at the step, $/kWh.
        sell: f64,
    },
}

/// Uniform-price settlement of the whole horizon.
///
/// All matrices are `[step][bus]` in case-file bus order. Idle buses carry
/// zeros throughout; steps without a two-sided pool keep everyone's
/// payment at zero and no price.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationResult {
    /// Uniform pool price per step, $/kWh; `None` on steps without a
    /// two-sided pool.
    pub pi_star: Vec<Option<f64>>,
    /// Share of the bus's side of the pool, in `[0, 1]`; shares sum to one
    /// over each nonempty side, idle buses get zero.
    pub contribution: Vec<Vec<f64>>,
    /// Reallocated pool cash, $; positive pays the pool, negative collects
    /// from it. Sums to zero over buses at every step.
    pub payment_usd: Vec<Vec<f64>>,
    /// Gain over a utility-only settlement after reallocation, $.
    pub profit_usd: Vec<Vec<f64>>,
    /// Profit per unit of energy exchanged with the grid, $/kWh.
    pub unit_profit_per_kwh: Vec<Vec<f64>>,
    /// Pool side per bus and step.
    pub group: Vec<Vec<TradeGroup>>,
}

/// Per-step, per-side summary of how evenly an allocation rewards energy.
///
/// All vectors have one entry per step; steps where a side is empty (or no
/// pool clears) carry zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct FairnessMetrics {
    /// Mean per-unit profit of the importing side, $/kWh.
    pub importer_phi: Vec<f64>,
    /// Mean per-unit profit of the exporting side, $/kWh.
    pub exporter_phi: Vec<f64>,
    /// Largest pairwise per-unit-profit gap among importers, $/kWh.
    pub importer_spread: Vec<f64>,
    /// Largest pairwise per-unit-profit gap among exporters, $/kWh.
    pub exporter_spread: Vec<f64>,
}

/// Trading contribution rate of every bus at one step.
///
/// Buses drawing more than the idle band form the importing side, buses
/// pushing more form the exporting side, and a bus's rate is its share of
/// its own side's total exchange magnitude. Idle buses rate zero; rates
/// sum to one over each nonempty side.
///
/// Errors: [`AllocationError::EmptyTradingStep`] when every bus is idle.
pub fn contribution_rates(p_import_kw: &[f64]) -> Result<Vec<f64>, AllocationError> {
    let mut import_total = 0.0;
    let mut export_total = 0.0;
    for &p in p_import_kw {
        if p > IDLE_BAND_KW {
            import_total += p;
        } else if p < -IDLE_BAND_KW {
            export_total += -p;
        }
    }
    if import_total == 0.0 && export_total == 0.0 {
        return Err(AllocationError::EmptyTradingStep);
    }
    let mut rates = vec![0.0; p_import_kw.len()];
    for (r, &p) in rates.iter_mut().zip(p_import_kw) {
        if p > IDLE_BAND_KW {
            *r = p / import_total;
        } else if p < -IDLE_BAND_KW {
            *r = -p / export_total;
        }
    }
    Ok(rates)
}

/// Re-settles a trading outcome at one uniform price per step.
///
/// For every step with a two-sided pool: the importers' pool payments are
/// summed, divided by the matched energy to give the step's single price
/// `π*`, and each participant's matched quantity is re-priced at it —
/// importers pay, exporters collect. Payments re-balance to zero exactly,
/// each side's total profit matches its pre-reallocation total, and a bus
/// already settled at `π*` keeps its payment unchanged. One-sided and idle
/// steps pass through with zero payments. Contribution rates are filled
/// for every step where anyone trades.
///
/// Errors: [`AllocationError::ZeroTradedEnergy`] if a trading step has no
/// matched energy to price, [`AllocationError::PriceOutOfBounds`] if the
/// pooled payments imply a price outside the retail band.
pub fn allocate(
    s: &Scenario,
    dispatch: &DispatchSolution,
    trade: &TradeOutcome,
) -> Result<AllocationResult, AllocationError> {
    let nb = s.network.n_buses();
    let slack = s.network.slack_index();
    let zeros = || vec![vec![0.0; nb]; s.t_steps];
    let mut out = AllocationResult {
        pi_star: vec![None; s.t_steps],
        contribution: zeros(),
        payment_usd: zeros(),
        profit_usd: zeros(),
        unit_profit_per_kwh: zeros(),
        group: vec![vec![TradeGroup::Idle; nb]; s.t_steps],
    };

    for t in 0..s.t_steps {
        let (ub, us) = (s.prices.buy[t], s.prices.sell[t]);
        let dt = s.dt_hours;
        let st = settle_step(
            &dispatch.p_import_kw[t],
            &dispatch.p_loss_kw[t],
            slack,
            ub,
            us,
            dt,
        );
        out.group[t] = st.group.clone();
        if let Ok(rates) = contribution_rates(&dispatch.p_import_kw[t]) {
            out.contribution[t] = rates;
        }
        if !st.two_sided {
            continue;
        }

        // Pool the importing side's payments and spread them over the
        // matched energy: one price for the whole step.
        let pool_usd: f64 = (0..nb)
            .filter(|&i| st.group[i] == TradeGroup::Importer)
            .map(|i| trade.payment_usd[t][i])
            .sum();
        let matched_kwh = st.matched_kw * dt;
        if matched_kwh <= f64::EPSILON {
            return Err(AllocationError::ZeroTradedEnergy { step: t });
        }
        let price = pool_usd / matched_kwh;
        if price < us - PRICE_BAND_SLACK || price > ub + PRICE_BAND_SLACK {
            return Err(AllocationError::PriceOutOfBounds {
                step: t,
                price,
                buy: ub,
                sell: us,
            });
        }
        out.pi_star[t] = Some(price);

        // Re-price every matched quantity at the uniform price; unmatched
        // remainders stay with the utility exactly as before.
        for i in 0..nb {
            let pim = dispatch.p_import_kw[t][i];
            match st.group[i] {
                TradeGroup::Importer => {
                    out.payment_usd[t][i] = st.pooled_kw[i] * price * dt;
                    out.profit_usd[t][i] = st.pooled_kw[i] * (ub - price) * dt;
                    out.unit_profit_per_kwh[t][i] = out.profit_usd[t][i] / (pim.abs() * dt);
                }
                TradeGroup::Exporter => {
                    out.payment_usd[t][i] = -st.pooled_kw[i] * price * dt;
                    out.profit_usd[t][i] = st.pooled_kw[i] * (price - us) * dt;
                    out.unit_profit_per_kwh[t][i] = out.profit_usd[t][i] / (pim.abs() * dt);
                }
                TradeGroup::Idle => {}
            }
        }
        let balance: f64 = out.payment_usd[t].iter().sum();
        debug_assert!(
            balance.abs() < 1e-9,
            "reallocated pool cash must balance at step {t}, got {balance}"
        );
    }
    Ok(out)
}

/// Measures how evenly the allocation rewards each unit of traded energy.
///
/// For every trading bus the per-unit profit compares two worlds moving
/// the same power: settling everything with the utility at retail versus
/// the allocated settlement (uniform-price pool cash plus any unmatched
/// remainder at retail). The difference, per kWh of the bus's grid
/// exchange, is the bus's `φ`; the result carries each side's mean and
/// largest pairwise gap per step. Exporters land on one common value;
/// importers spread only by their unequal loss shares.
pub fn fairness_metrics(
    s: &Scenario,
    dispatch: &DispatchSolution,
    alloc: &AllocationResult,
) -> FairnessMetrics {
    let nb = s.network.n_buses();
    let slack = s.network.slack_index();
    let mut out = FairnessMetrics {
        importer_phi: vec![0.0; s.t_steps],
        exporter_phi: vec![0.0; s.t_steps],
        importer_spread: vec![0.0; s.t_steps],
        exporter_spread: vec![0.0; s.t_steps],
    };

    for t in 0..s.t_steps {
        let (ub, us) = (s.prices.buy[t], s.prices.sell[t]);
        let dt = s.dt_hours;
        let st = settle_step(
            &dispatch.p_import_kw[t],
            &dispatch.p_loss_kw[t],
            slack,
            ub,
            us,
            dt,
        );
        let mut phi_imp = Vec::new();
        let mut phi_exp = Vec::new();
        for i in 0..nb {
            let pim = dispatch.p_import_kw[t][i];
            match st.group[i] {
                TradeGroup::Importer => {
                    // Retail world: the whole draw plus loss share bought
                    // at the buying price. Allocated world: the matched
                    // part at the pool's cash, the remainder at retail.
                    let retail_usd = st.traded_kw[i] * ub * dt;
                    let actual_usd = alloc.payment_usd[t][i]
                        + (st.traded_kw[i] - st.pooled_kw[i]) * ub * dt;
                    phi_imp.push((retail_usd - actual_usd) / (pim.abs() * dt));
                }
                TradeGroup::Exporter => {
                    // Retail world: the whole export sold at the selling
                    // price (cash received, so negative payments).
                    let retail_usd = -st.traded_kw[i] * us * dt;
                    let actual_usd = alloc.payment_usd[t][i]
                        - (st.traded_kw[i] - st.pooled_kw[i]) * us * dt;
                    phi_exp.push((retail_usd - actual_usd) / (pim.abs() * dt));
                }
                TradeGroup::Idle => {}
            }
        }
        let summarize = |phi: &[f64]| -> (f64, f64) {
            if phi.is_empty() {
                return (0.0, 0.0);
            }
            let mean = phi.iter().sum::<f64>() / phi.len() as f64;
            let max = phi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = phi.iter().cloned().fold(f64::INFINITY, f64::min);
            (mean, max - min)
        };
        (out.importer_phi[t], out.importer_spread[t]) = summarize(&phi_imp);
        (out.exporter_phi[t], out.exporter_spread[t]) = summarize(&phi_exp);
    }
    out
}
