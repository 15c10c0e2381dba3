//! Distribution-grid dispatch, local energy trading, and settlement.

pub mod acpf;
pub mod allocation;
pub mod der;
pub mod market;
pub mod network;
pub mod nlp;

pub use acpf::{
    branch_flows, bus_losses, check_limits, pf_jacobian, pf_residuals, solve_newton_pf, AcpfError,
    BranchFlow, FlowResult, InjectionSet, LimitFinding, NewtonReport, OperatingBounds,
    SparseJacobian, VoltageState, NEWTON_MAX_ITER, NEWTON_TOL_PU, VIOLATION_TOL,
};
pub use allocation::{
    allocate, contribution_rates, fairness_metrics, AllocationError, AllocationResult,
    FairnessMetrics,
};
pub use der::{
    battery_cost, battery_limits_ok, battery_step, bus_power_balance_residual, bus_total_cost,
    derive_halfhour_prices, dg_cost, import_cost, loss_cost, BatteryFinding, BatterySpec,
    CostBreakdown, DerError, DgSpec, PriceSchedule, ReProfile, EPS_ON_KW,
};
pub use market::{
    build_stage1, build_stage2, cash_flow_imbalance, profit, solve_stage1, solve_stage2,
    validate_scenario, DispatchSolution, MarketError, Scenario, StageOneResult, StageTag,
    StageTwoResult, TradeGroup, TradeOutcome,
};
pub use network::{
    build_admittance, emit_case, parse_case, validate_radial, AdmEntry, AdmittanceTable, Branch,
    Bus, BusKind, Network, NetworkError, RadialFinding, RadialReport,
};
pub use nlp::{
    audit_gradient, check_gradients, solve_nlp, validate_problem, BlockStructure, GradientReport,
    NlpError, NlpProblem, QuadForm, RampTerm, SolveOptions, SolveReport, SolveStatus,
};
