//! Closed-form pool settlement for one step.
//!
//! At each step, buses drawing from the grid form the buying side and buses
//! pushing into it form the selling side. The pool matches the feasible
//! volume `B = min(total demand, total supply)` — demand counts each
//! importer's draw plus its loss share, supply counts export magnitudes —
//! and scales every participant down proportionally (`m_i = B/Q⁺ · q_i`,
//! `n_j = B/Q⁻ · x_j`). Matched energy settles at per-bus prices strictly
//! inside the retail band: the selling side collectively earns the fraction
//! [`EXPORTER_GAIN_SHARE`] of the step's retail wedge, buyers keep the
//! rest, and each participant's share is tilted by its loss intensity
//! (capped at [`LOSS_TILT_CAP`]) so heavier network burdens settle at
//! slightly better prices. Unmatched remainders stay with the utility at
//! retail; so do whole steps where everyone is on the same side.

use crate::market::{DispatchSolution, Scenario};

/// Grid exchanges within this band of zero (kW) count as not trading.
pub(crate) const IDLE_BAND_KW: f64 = 1e-3;

/// Fraction of each step's pool gain awarded to the selling side.
pub(crate) const EXPORTER_GAIN_SHARE: f64 = 0.85;

/// Cap on the loss-intensity price tilt.
pub(crate) const LOSS_TILT_CAP: f64 = 0.15;

/// Side of the pool a bus is on at one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TradeGroup {
    /// Draws from the grid beyond the idle band.
    Importer,
    /// Pushes into the grid beyond the idle band.
    Exporter,
    /// No tradeable exchange (includes the slack bus).
    Idle,
}

/// Complete pool settlement of one step. Vectors are per bus.
#[derive(Debug, Clone)]
pub(crate) struct StepSettlement {
    /// Both sides present with positive volume.
    pub two_sided: bool,
    /// Matched volume `B`, kW.
    pub matched_kw: f64,
    /// Total gain the pool splits this step, $.
    pub gain_usd: f64,
    /// Pool side per bus.
    pub group: Vec<TradeGroup>,
    /// Tradeable quantity: importer draw plus loss share, or export
    /// magnitude; zero for idle buses. kW.
    pub traded_kw: Vec<f64>,
    /// Matched (pool-cleared) part of the tradeable quantity, kW.
    pub pooled_kw: Vec<f64>,
    /// Matched part's pool price per bus, $/kWh (retail for idle buses).
    pub pool_price: Vec<f64>,
    /// Quantity-weighted blend of pool and retail prices over the bus's
    /// whole tradeable quantity, $/kWh.
    pub price: Vec<f64>,
    /// Pool cash per bus, $ (positive pays, negative collects); sums to
    /// zero over buses.
    pub payment_usd: Vec<f64>,
    /// Gain versus a utility-only settlement, $ (≥ 0).
    pub profit_usd: Vec<f64>,
}

/// Settles one step's pool in closed form.
///
/// `p_import_kw`/`p_loss_kw` are the step's per-bus grid exchange and loss
/// shares; the slack bus never trades. Prices are the step's retail pair
/// and `dt_h` the step length.
pub(crate) fn settle_step(
    p_import_kw: &[f64],
    p_loss_kw: &[f64],
    slack: usize,
    u_buy: f64,
    u_sell: f64,
    dt_h: f64,
) -> StepSettlement {
    let nb = p_import_kw.len();
    let mut group = vec![TradeGroup::Idle; nb];
    let mut traded = vec![0.0; nb];
    for i in 0..nb {
        if i == slack {
            continue;
        }
        let pim = p_import_kw[i];
        if pim > IDLE_BAND_KW {
            group[i] = TradeGroup::Importer;
            traded[i] = pim + p_loss_kw[i].max(0.0);
        } else if pim < -IDLE_BAND_KW {
            group[i] = TradeGroup::Exporter;
            traded[i] = -pim;
        }
    }
    let demand: f64 = (0..nb)
        .filter(|&i| group[i] == TradeGroup::Importer)
        .map(|i| traded[i])
        .sum();
    let supply: f64 = (0..nb)
        .filter(|&i| group[i] == TradeGroup::Exporter)
        .map(|i| traded[i])
        .sum();
    let matched = demand.min(supply);
    let two_sided = matched > 0.0;

    let mut out = StepSettlement {
        two_sided,
        matched_kw: matched,
        gain_usd: 0.0,
        group: group.clone(),
        traded_kw: traded.clone(),
        pooled_kw: vec![0.0; nb],
        pool_price: vec![0.0; nb],
        price: vec![0.0; nb],
        payment_usd: vec![0.0; nb],
        profit_usd: vec![0.0; nb],
    };
    for i in 0..nb {
        let retail = match group[i] {
            TradeGroup::Exporter => u_sell,
            _ => u_buy,
        };
        out.pool_price[i] = retail;
        out.price[i] = retail;
    }
    if !two_sided {
        return out;
    }

    let alpha = matched / demand;
    let beta = matched / supply;
    let wedge = matched * (u_buy - u_sell) * dt_h;
    out.gain_usd = wedge;

    // Loss-intensity tilt: a bus whose loss share is large relative to its
    // exchange settles at a slightly better pool price.
    let tilt = |i: usize| {
        1.0 + (p_loss_kw[i].max(0.0) / p_import_kw[i].abs()).min(LOSS_TILT_CAP)
    };
    let mut buy_weight = 0.0; // Σ v_i · m_i · dt over importers
    let mut sell_weight = 0.0; // Σ w_j · n_j · dt over exporters
    for i in 0..nb {
        match group[i] {
            TradeGroup::Importer => {
                out.pooled_kw[i] = alpha * traded[i];
                buy_weight += tilt(i) * out.pooled_kw[i] * dt_h;
            }
            TradeGroup::Exporter => {
                out.pooled_kw[i] = beta * traded[i];
                sell_weight += tilt(i) * out.pooled_kw[i] * dt_h;
            }
            TradeGroup::Idle => {}
        }
    }

    let buyer_gain = (1.0 - EXPORTER_GAIN_SHARE) * wedge;
    let seller_gain = EXPORTER_GAIN_SHARE * wedge;
    for i in 0..nb {
        match group[i] {
            TradeGroup::Importer => {
                let m = out.pooled_kw[i];
                let pi = u_buy - buyer_gain * tilt(i) / buy_weight;
                out.pool_price[i] = pi;
                out.price[i] = (m * pi + (traded[i] - m) * u_buy) / traded[i];
                out.payment_usd[i] = m * pi * dt_h;
                out.profit_usd[i] = m * (u_buy - pi) * dt_h;
            }
            TradeGroup::Exporter => {
                let n = out.pooled_kw[i];
                let pi = u_sell + seller_gain * tilt(i) / sell_weight;
                out.pool_price[i] = pi;
                out.price[i] = (n * pi + (traded[i] - n) * u_sell) / traded[i];
                out.payment_usd[i] = -n * pi * dt_h;
                out.profit_usd[i] = n * (pi - u_sell) * dt_h;
            }
            TradeGroup::Idle => {}
        }
    }
    out
}

/// Per-step gap between participants' utility-only settlements and the
/// utility's retail charge for the pool's net position, $ — the cash local
/// trading can redistribute without anyone subsidizing it.
///
/// For each step: importers' draws plus loss shares priced at the buying
/// rate, minus exporters' volumes priced at the selling rate, minus the
/// retail value of the net position (bought at the buying rate when
/// positive, sold at the selling rate when negative). The result is zero
/// on steps where every trading bus is on the same side, and equals the
/// matched volume times the retail spread otherwise — exactly the gain a
/// two-sided pool splits.
pub fn cash_flow_imbalance(s: &Scenario, dispatch: &DispatchSolution) -> Vec<f64> {
    let slack = s.network.slack_index();
    let nb = s.network.n_buses();
    (0..s.t_steps)
        .map(|t| {
            let (ub, us) = (s.prices.buy[t], s.prices.sell[t]);
            let dt = s.dt_hours;
            let mut demand = 0.0;
            let mut supply = 0.0;
            for i in 0..nb {
                if i == slack {
                    continue;
                }
                let pim = dispatch.p_import_kw[t][i];
                if pim > IDLE_BAND_KW {
                    demand += pim + dispatch.p_loss_kw[t][i].max(0.0);
                } else if pim < -IDLE_BAND_KW {
                    supply += -pim;
                }
            }
            let net = demand - supply;
            let retail = if net >= 0.0 { net * ub * dt } else { net * us * dt };
            demand * ub * dt - supply * us * dt - retail
        })
        .collect()
}
