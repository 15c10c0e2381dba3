//! Distributed energy resource models and per-bus cost accounting.
//!
//! Sign conventions used throughout the crate:
//!
//! * `p_im` — power imported from the grid at a bus, kW. Positive means the
//!   bus draws from the feeder, negative means it exports.
//! * `p_b` — battery terminal power, kW. Positive discharges (injects into
//!   the bus), negative charges.
//! * `p_dg`, `p_re` — dispatchable generator and renewable output, kW, ≥ 0.
//!
//! Money is in $ with prices in $/kWh; energy in kWh; time steps in hours.

use thiserror::Error;

/// Output threshold at which a dispatchable generator's commitment charge is
/// fully applied, in kW. Below it the charge ramps linearly to zero so the
/// cost stays continuous without a unit-commitment binary.
pub const EPS_ON_KW: f64 = 1.0;

/// Errors from DER model evaluation.
#[derive(Debug, Error)]
pub enum DerError {
    /// A price or profile list had the wrong number of entries.
    #[error("schedule has {got} entries, expected {expected}")]
    WrongLength {
        /// Entries found.
        got: usize,
        /// Entries required.
        expected: usize,
    },
    /// A battery was driven harder than its charge or discharge rating.
    #[error("battery power {p_kw} kW exceeds the {limit_kw} kW rate limit")]
    RateLimitExceeded {
        /// Commanded terminal power, kW.
        p_kw: f64,
        /// Applicable rating, kW.
        limit_kw: f64,
    },
    /// A battery step would leave stored energy outside the allowed window.
    #[error("stored energy {energy_kwh} kWh leaves the allowed range [{min_kwh}, {max_kwh}] kWh")]
    SocOutOfRange {
        /// Post-step stored energy, kWh.
        energy_kwh: f64,
        /// Lower bound, kWh.
        min_kwh: f64,
        /// Upper bound, kWh.
        max_kwh: f64,
    },
    /// A generator setpoint fell outside its dispatch range.
    #[error("generator output {p_kw} kW outside dispatch range [{min_kw}, {max_kw}] kW")]
    DispatchOutOfRange {
        /// Requested output, kW.
        p_kw: f64,
        /// Minimum dispatch, kW.
        min_kw: f64,
        /// Maximum dispatch, kW.
        max_kw: f64,
    },
    /// A loss charge was requested for a negative loss quantity.
    #[error("network loss must be nonnegative, got {p_loss_kw} kW")]
    NegativeLoss {
        /// Offending loss power, kW.
        p_loss_kw: f64,
    },
}

/// Battery parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BatterySpec {
    /// Usable capacity in kWh.
    pub capacity_kwh: f64,
    /// Charging efficiency in (0, 1]: fraction of drawn energy that is stored.
    pub eta_c: f64,
    /// Discharging efficiency in (0, 1]: stored energy movement per unit
    /// delivered, as modeled by [`battery_step`].
    pub eta_d: f64,
    /// Degradation (wear) cost per kWh cycled through the terminal, $/kWh.
    pub degradation_cost_per_kwh: f64,
    /// Maximum charging power in kW (magnitude of negative terminal power).
    pub p_charge_max_kw: f64,
    /// Maximum discharging power in kW.
    pub p_discharge_max_kw: f64,
    /// Minimum state of charge as a fraction of capacity, in (0, soc_max).
    pub soc_min: f64,
    /// Maximum state of charge as a fraction of capacity, in (soc_min, 1].
    pub soc_max: f64,
    /// State of charge at the start of the horizon, in [soc_min, soc_max].
    pub initial_soc: f64,
}

impl BatterySpec {
    /// Stored energy at the start of the horizon, kWh.
    pub fn initial_kwh(&self) -> f64 {
        self.initial_soc * self.capacity_kwh
    }

    /// Lower stored-energy bound, kWh.
    pub fn min_kwh(&self) -> f64 {
        self.soc_min * self.capacity_kwh
    }

    /// Upper stored-energy bound, kWh.
    pub fn max_kwh(&self) -> f64 {
        self.soc_max * self.capacity_kwh
    }
}

/// Dispatchable generator parameters for the quadratic-plus-commitment cost
/// model `a·P² + b·P + c` (P in kW; cost in $ per hour while running —
/// callers scale by the step length).
#[derive(Debug, Clone, PartialEq)]
pub struct DgSpec {
    /// Minimum dispatch in kW (0 allows the unit to idle for free).
    pub p_min_kw: f64,
    /// Maximum dispatch in kW.
    pub p_max_kw: f64,
    /// Quadratic coefficient a, $/kW² per hour.
    pub a: f64,
    /// Linear coefficient b, $/kWh.
    pub b: f64,
    /// Commitment charge c applied at full weight above [`EPS_ON_KW`],
    /// $ per hour.
    pub c: f64,
}

/// Per-step available renewable output for one bus, kW.
#[derive(Debug, Clone, PartialEq)]
pub struct ReProfile {
    /// Available power per step, kW (length = horizon steps), each ≥ 0.
    pub available_kw: Vec<f64>,
}

/// Retail price pair per step.
///
/// Invariants: `sell[t] ≤ buy[t]` and both ≥ 0 for every step (enforced at
/// config load).
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSchedule {
    /// Utility buying price per step — what a bus pays to import, $/kWh.
    pub buy: Vec<f64>,
    /// Utility selling price per step — what a bus earns exporting, $/kWh.
    pub sell: Vec<f64>,
}

impl PriceSchedule {
    /// Number of steps covered.
    pub fn len(&self) -> usize {
        self.buy.len()
    }

    /// True when the schedule covers no steps.
    pub fn is_empty(&self) -> bool {
        self.buy.is_empty()
    }
}

/// Expands 24 hourly retail prices into a half-hour schedule of 48 steps.
///
/// Step `2h-1` (1-based) takes hour `h`'s price unchanged; step `2h` takes
/// the mean of hour `h` and the following hour (wrapping midnight). The
/// export price is half the import price at every step.
pub fn derive_halfhour_prices(hourly_buy: &[f64]) -> Result<PriceSchedule, DerError> {
    if hourly_buy.len() != 24 {
        return Err(DerError::WrongLength { got: hourly_buy.len(), expected: 24 });
    }
    let mut buy = Vec::with_capacity(48);
    for h in 0..24 {
        buy.push(hourly_buy[h]);
        buy.push(0.5 * (hourly_buy[h] + hourly_buy[(h + 1) % 24]));
    }
    let sell = buy.iter().map(|p| 0.5 * p).collect();
    Ok(PriceSchedule { buy, sell })
}

/// Advances stored energy one step under terminal power `p_b_kw`
/// (positive = discharge) over `dt_h` hours.
///
/// Discharging at `P ≥ 0` moves `η_d · P · Δt` out of storage; charging at
/// `P < 0` moves `η_c · |P| · Δt` into storage. The efficiency factors scale
/// the stored-energy movement on each side of the terminal. Fails when the
/// commanded power exceeds the applicable rating or the post-step energy
/// leaves the state-of-charge window.
pub fn battery_step(
    energy_kwh: f64,
    p_b_kw: f64,
    dt_h: f64,
    spec: &BatterySpec,
) -> Result<f64, DerError> {
    if p_b_kw >= 0.0 {
        if p_b_kw > spec.p_discharge_max_kw {
            return Err(DerError::RateLimitExceeded {
                p_kw: p_b_kw,
                limit_kw: spec.p_discharge_max_kw,
            });
        }
    } else if -p_b_kw > spec.p_charge_max_kw {
        return Err(DerError::RateLimitExceeded { p_kw: p_b_kw, limit_kw: spec.p_charge_max_kw });
    }
    let next = if p_b_kw >= 0.0 {
        energy_kwh - spec.eta_d * p_b_kw * dt_h
    } else {
        energy_kwh + spec.eta_c * (-p_b_kw) * dt_h
    };
    if next < spec.min_kwh() || next > spec.max_kwh() {
        return Err(DerError::SocOutOfRange {
            energy_kwh: next,
            min_kwh: spec.min_kwh(),
            max_kwh: spec.max_kwh(),
        });
    }
    Ok(next)
}

/// One violation found by [`battery_limits_ok`].
#[derive(Debug, Clone, PartialEq)]
pub enum BatteryFinding {
    /// Terminal power exceeds the applicable rating.
    RateLimitExceeded {
        /// Commanded terminal power, kW.
        p_kw: f64,
        /// Applicable rating, kW.
        limit_kw: f64,
    },
    /// Stored energy sits outside the state-of-charge window.
    SocOutOfRange {
        /// Stored energy, kWh.
        energy_kwh: f64,
        /// Lower bound, kWh.
        min_kwh: f64,
        /// Upper bound, kWh.
        max_kwh: f64,
    },
}

/// Checks a battery operating point against its power rating and
/// state-of-charge window.
///
/// The stored energy `energy_kwh` must satisfy
/// `soc_min ≤ E / capacity ≤ soc_max` (boundaries allowed) and the terminal
/// power must respect the charge rating when negative, the discharge rating
/// when nonnegative. Returns `(ok, findings)` with one finding per violation.
pub fn battery_limits_ok(
    energy_kwh: f64,
    p_b_kw: f64,
    spec: &BatterySpec,
) -> (bool, Vec<BatteryFinding>) {
    let mut findings = Vec::new();
    if p_b_kw >= 0.0 {
        if p_b_kw > spec.p_discharge_max_kw {
            findings.push(BatteryFinding::RateLimitExceeded {
                p_kw: p_b_kw,
                limit_kw: spec.p_discharge_max_kw,
            });
        }
    } else if -p_b_kw > spec.p_charge_max_kw {
        findings
            .push(BatteryFinding::RateLimitExceeded { p_kw: p_b_kw, limit_kw: spec.p_charge_max_kw });
    }
    if energy_kwh < spec.min_kwh() || energy_kwh > spec.max_kwh() {
        findings.push(BatteryFinding::SocOutOfRange {
            energy_kwh,
            min_kwh: spec.min_kwh(),
            max_kwh: spec.max_kwh(),
        });
    }
    (findings.is_empty(), findings)
}

/// Battery wear cost for one step: `c_d · |P_b| · Δt`.
pub fn battery_cost(p_b_kw: f64, dt_h: f64, spec: &BatterySpec) -> f64 {
    spec.degradation_cost_per_kwh * p_b_kw.abs() * dt_h
}

/// Dispatchable generator cost for one hour of running at output `p_kw`
/// (a step of length `Δt` costs `dg_cost(P)·Δt`).
///
/// Running cost is `a·P² + b·P + c`; the commitment charge `c` ramps in
/// linearly over `[0, `[`EPS_ON_KW`]`]` so an idle unit (P = 0) costs nothing
/// and the function stays continuous. Fails when the setpoint leaves the
/// dispatch range.
pub fn dg_cost(p_kw: f64, spec: &DgSpec) -> Result<f64, DerError> {
    if p_kw < spec.p_min_kw || p_kw > spec.p_max_kw {
        return Err(DerError::DispatchOutOfRange {
            p_kw,
            min_kw: spec.p_min_kw,
            max_kw: spec.p_max_kw,
        });
    }
    let commit = spec.c * (p_kw / EPS_ON_KW).min(1.0);
    Ok(spec.a * p_kw * p_kw + spec.b * p_kw + commit)
}

/// Net cost of grid exchange for one step at transaction price `price`:
/// `P_im · π · Δt` (negative = revenue for export).
pub fn import_cost(p_im_kw: f64, price: f64, dt_h: f64) -> f64 {
    p_im_kw * price * dt_h
}

/// Cost charged for a bus's allocated share of network losses at the given
/// price: `P_l · π · Δt`. Fails when the loss is negative.
pub fn loss_cost(p_loss_kw: f64, price: f64, dt_h: f64) -> Result<f64, DerError> {
    if p_loss_kw < 0.0 {
        return Err(DerError::NegativeLoss { p_loss_kw });
    }
    Ok(p_loss_kw * price * dt_h)
}

/// Itemized one-step cost for a bus, $.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CostBreakdown {
    /// Grid exchange cost (negative when exporting).
    pub import: f64,
    /// Battery wear cost.
    pub battery: f64,
    /// Dispatchable generation cost.
    pub dg: f64,
    /// Network-loss charge.
    pub loss: f64,
    /// Sum of the four components.
    pub total: f64,
}

/// Combines the four per-step cost components for a bus into a breakdown
/// whose `total` is their sum.
pub fn bus_total_cost(import: f64, battery: f64, dg: f64, loss: f64) -> CostBreakdown {
    CostBreakdown { import, battery, dg, loss, total: import + battery + dg + loss }
}

/// Residual of the bus real-power balance, kW:
/// `P_D − (P_im + P_b + P_dg + P_re)`. Zero when supply meets demand;
/// positive when the bus is undersupplied.
pub fn bus_power_balance_residual(
    p_load_kw: f64,
    p_im_kw: f64,
    p_b_kw: f64,
    p_dg_kw: f64,
    p_re_kw: f64,
) -> f64 {
    p_load_kw - (p_im_kw + p_b_kw + p_dg_kw + p_re_kw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec() -> BatterySpec {
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

    #[test]
    fn discharge_scales_stored_energy_movement() {
        // Delivering 100 kW for half an hour moves 0.9*100*0.5 = 45 kWh out.
        let next = battery_step(500.0, 100.0, 0.5, &spec()).unwrap();
        assert_relative_eq!(next, 455.0);
    }

    #[test]
    fn charge_stores_scaled_drawn_energy() {
        // Drawing 100 kW for half an hour stores 0.9*100*0.5 = 45 kWh.
        let next = battery_step(500.0, -100.0, 0.5, &spec()).unwrap();
        assert_relative_eq!(next, 545.0);
    }

    #[test]
    fn idle_battery_holds_energy() {
        assert_relative_eq!(battery_step(500.0, 0.0, 0.5, &spec()).unwrap(), 500.0);
    }

    #[test]
    fn step_rejects_rate_and_soc_violations() {
        let s = spec();
        assert!(matches!(
            battery_step(650.0, 500.1, 0.5, &s),
            Err(DerError::RateLimitExceeded { .. })
        ));
        assert!(matches!(
            battery_step(650.0, -500.1, 0.5, &s),
            Err(DerError::RateLimitExceeded { .. })
        ));
        // 410 - 0.9*100*0.5 = 365 < 400 kWh floor.
        assert!(matches!(battery_step(410.0, 100.0, 0.5, &s), Err(DerError::SocOutOfRange { .. })));
        // 890 + 0.9*100*0.5 = 935 > 900 kWh ceiling.
        assert!(matches!(battery_step(890.0, -100.0, 0.5, &s), Err(DerError::SocOutOfRange { .. })));
    }

    #[test]
    fn limits_accept_boundary_soc() {
        let s = spec();
        let (ok, findings) = battery_limits_ok(400.0, 0.0, &s);
        assert!(ok, "{findings:?}");
        let (ok, _) = battery_limits_ok(900.0, 0.0, &s);
        assert!(ok);
    }

    #[test]
    fn limits_flag_rate_violation() {
        let s = spec();
        let (ok, findings) = battery_limits_ok(650.0, 600.0, &s);
        assert!(!ok);
        assert!(matches!(findings[0], BatteryFinding::RateLimitExceeded { .. }));
    }

    #[test]
    fn limits_flag_full_battery_above_ceiling() {
        let s = spec();
        let (ok, findings) = battery_limits_ok(1000.0, 0.0, &s);
        assert!(!ok);
        assert!(matches!(findings[0], BatteryFinding::SocOutOfRange { .. }));
    }

    #[test]
    fn wear_cost_is_symmetric_in_direction() {
        let s = spec();
        assert_relative_eq!(battery_cost(100.0, 0.5, &s), 5.0);
        assert_relative_eq!(battery_cost(-100.0, 0.5, &s), 5.0);
        assert_relative_eq!(battery_cost(0.0, 0.5, &s), 0.0);
    }

    #[test]
    fn dg_cost_matches_quadratic_model() {
        let dg = DgSpec { p_min_kw: 0.0, p_max_kw: 1000.0, a: 2.45e-5, b: 0.1833, c: 26.235 };
        assert_relative_eq!(dg_cost(1000.0, &dg).unwrap(), 234.035, epsilon = 1e-9);
        // 2.45e-5·25e4 + 0.1833·500 + 26.235.
        assert_relative_eq!(dg_cost(500.0, &dg).unwrap(), 124.010, epsilon = 1e-9);
        assert_relative_eq!(dg_cost(0.0, &dg).unwrap(), 0.0);
    }

    #[test]
    fn dg_commitment_charge_ramps_in_near_zero() {
        let dg = DgSpec { p_min_kw: 0.0, p_max_kw: 1000.0, a: 2.45e-5, b: 0.1833, c: 26.235 };
        let half = dg_cost(0.5, &dg).unwrap();
        let expected = 2.45e-5 * 0.25 + 0.1833 * 0.5 + 26.235 * 0.5;
        assert_relative_eq!(half, expected, epsilon = 1e-12);
        // Continuity at the threshold.
        let at = dg_cost(EPS_ON_KW, &dg).unwrap();
        assert_relative_eq!(at, 2.45e-5 + 0.1833 + 26.235, epsilon = 1e-12);
    }

    #[test]
    fn dg_cost_rejects_out_of_range_dispatch() {
        let dg = DgSpec { p_min_kw: 0.0, p_max_kw: 1000.0, a: 2.45e-5, b: 0.1833, c: 26.235 };
        assert!(matches!(dg_cost(1000.1, &dg), Err(DerError::DispatchOutOfRange { .. })));
        assert!(matches!(dg_cost(-1.0, &dg), Err(DerError::DispatchOutOfRange { .. })));
    }

    #[test]
    fn import_cost_prices_both_directions() {
        assert_relative_eq!(import_cost(200.0, 0.2, 0.5), 20.0);
        assert_relative_eq!(import_cost(-200.0, 0.1, 0.5), -10.0);
        assert_relative_eq!(import_cost(0.0, 0.2, 0.5), 0.0);
    }

    #[test]
    fn loss_cost_scales_with_price_and_time() {
        assert_relative_eq!(loss_cost(10.0, 0.2, 0.5).unwrap(), 1.0);
        assert_relative_eq!(loss_cost(0.0, 0.2, 0.5).unwrap(), 0.0);
        assert!(matches!(loss_cost(-1.0, 0.2, 0.5), Err(DerError::NegativeLoss { .. })));
    }

    #[test]
    fn breakdown_total_sums_components() {
        let b = bus_total_cost(20.0, 5.0, 0.0, 1.0);
        assert_relative_eq!(b.total, 26.0);
        let b = bus_total_cost(0.0, 0.0, 0.0, 0.0);
        assert_relative_eq!(b.total, 0.0);
        let b = bus_total_cost(-10.0, 5.0, 0.0, 1.0);
        assert_relative_eq!(b.total, -4.0);
    }

    #[test]
    fn power_balance_residual_is_load_minus_supply() {
        assert_relative_eq!(bus_power_balance_residual(100.0, 100.0, 0.0, 0.0, 0.0), 0.0);
        assert_relative_eq!(bus_power_balance_residual(100.0, -50.0, 0.0, 0.0, 150.0), 0.0);
        assert_relative_eq!(bus_power_balance_residual(100.0, 50.0, 0.0, 0.0, 0.0), 50.0);
    }

    #[test]
    fn halfhour_prices_interleave_hourly_values() {
        let hourly: Vec<f64> = (0..24).map(|h| 0.1 + 0.01 * h as f64).collect();
        let sched = derive_halfhour_prices(&hourly).unwrap();
        assert_eq!(sched.len(), 48);
        // 1-based step 1 = hour 1's price; step 2 = mean of hours 1 and 2.
        assert_relative_eq!(sched.buy[0], 0.10);
        assert_relative_eq!(sched.buy[1], 0.105);
        assert_relative_eq!(sched.buy[2], 0.11);
        // Final step wraps to hour 1.
        assert_relative_eq!(sched.buy[47], 0.5 * (hourly[23] + hourly[0]));
        for t in 0..48 {
            assert_relative_eq!(sched.sell[t], 0.5 * sched.buy[t]);
        }
    }

    #[test]
    fn halfhour_prices_reject_wrong_length() {
        assert!(matches!(
            derive_halfhour_prices(&[0.1; 23]),
            Err(DerError::WrongLength { got: 23, expected: 24 })
        ));
    }
}
