//! AC power-flow evaluation in rectangular voltage coordinates.
//!
//! Voltages are `V_i = e_i + j·f_i` in per-unit. With the physical bus
//! admittance matrix `Y = G + jB` (diagonal = sum of incident branch
//! admittances, off-diagonal = negated branch admittance), the calculated
//! bus powers are
//!
//! ```text
//! P_i = Σ_j [ e_i·(G_ij·e_j − B_ij·f_j) + f_i·(G_ij·f_j + B_ij·e_j) ]
//! Q_i = Σ_j [ f_i·(G_ij·e_j − B_ij·f_j) − e_i·(G_ij·f_j + B_ij·e_j) ]
//! ```
//!
//! Residuals are *specified injection minus calculated power*, reported in
//! kW/kvar; all solver-internal math runs in per-unit on the network base.
//! The Newton-Raphson solver here is an independent validation oracle for
//! the optimization stages: it holds the slack bus at `1.0 + j0.0` and
//! solves the non-slack bus balances to an infinity-norm below 1e-8 pu.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::network::{AdmittanceTable, Network};

/// Convergence tolerance for the Newton solver: residual infinity norm, pu.
pub const NEWTON_TOL_PU: f64 = 1e-8;

/// Iteration cap for the Newton solver.
pub const NEWTON_MAX_ITER: usize = 50;

/// Magnitude below which a limit violation is ignored by [`check_limits`]
/// (pu for voltages, kW/kvar for powers). Optimization stages satisfy
/// constraints to solver tolerance, so exact-boundary states must not be
/// flagged.
pub const VIOLATION_TOL: f64 = 1e-6;

/// Errors from power-flow evaluation and solving.
#[derive(Debug, Error)]
pub enum AcpfError {
    /// Input vector lengths disagree with the network size.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    /// Newton iteration failed to reach tolerance within the cap.
    #[error("power flow diverged: mismatch {mismatch_pu} pu after {iterations} iterations")]
    Diverged {
        /// Iterations performed.
        iterations: usize,
        /// Final residual infinity norm, pu.
        mismatch_pu: f64,
    },
    /// The power-flow Jacobian lost rank at an iterate.
    #[error("singular power-flow Jacobian at iteration {iteration}")]
    SingularJacobian {
        /// Iteration at which factorization failed.
        iteration: usize,
    },
}

/// Rectangular bus voltages for one time step, per-unit.
#[derive(Debug, Clone, PartialEq)]
pub struct VoltageState {
    /// Real part per bus index.
    pub e: Vec<f64>,
    /// Imaginary part per bus index.
    pub f: Vec<f64>,
}

impl VoltageState {
    /// Flat start: every bus at `1.0 + j0.0`.
    pub fn flat(n: usize) -> Self {
        VoltageState { e: vec![1.0; n], f: vec![0.0; n] }
    }

    /// Number of buses.
    pub fn len(&self) -> usize {
        self.e.len()
    }

    /// True when the state covers no buses.
    pub fn is_empty(&self) -> bool {
        self.e.is_empty()
    }

    /// Voltage magnitude at bus index `i`, pu.
    pub fn v_mag(&self, i: usize) -> f64 {
        (self.e[i] * self.e[i] + self.f[i] * self.f[i]).sqrt()
    }
}

/// Per-bus generation and demand for one time step, kW/kvar.
///
/// The power-flow equations see only the net injection
/// `P^G − P^D` / `Q^G − Q^D`; the split is kept so generation-capacity
/// checks can see `P^G` alone. Slack-bus entries are free variables:
/// solvers overwrite them with whatever balances the network.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionSet {
    /// Real generation per bus, kW (grid import counts as generation at the
    /// importing bus).
    pub p_gen_kw: Vec<f64>,
    /// Reactive generation per bus, kvar.
    pub q_gen_kvar: Vec<f64>,
    /// Real demand per bus, kW.
    pub p_load_kw: Vec<f64>,
    /// Reactive demand per bus, kvar.
    pub q_load_kvar: Vec<f64>,
}

impl InjectionSet {
    /// Builds a set holding net injections directly (zero demand).
    pub fn from_net(p_net_kw: Vec<f64>, q_net_kvar: Vec<f64>) -> Self {
        let n = p_net_kw.len();
        InjectionSet {
            p_gen_kw: p_net_kw,
            q_gen_kvar: q_net_kvar,
            p_load_kw: vec![0.0; n],
            q_load_kvar: vec![0.0; n],
        }
    }

    /// Net real injection at bus index `i`, kW.
    pub fn net_p_kw(&self, i: usize) -> f64 {
        self.p_gen_kw[i] - self.p_load_kw[i]
    }

    /// Net reactive injection at bus index `i`, kvar.
    pub fn net_q_kvar(&self, i: usize) -> f64 {
        self.q_gen_kvar[i] - self.q_load_kvar[i]
    }

    /// Number of buses covered.
    pub fn len(&self) -> usize {
        self.p_gen_kw.len()
    }

    /// True when the set covers no buses.
    pub fn is_empty(&self) -> bool {
        self.p_gen_kw.is_empty()
    }
}

/// Calculated real power at bus index `i`, pu.
fn calc_p_pu(adm: &AdmittanceTable, v: &VoltageState, i: usize) -> f64 {
    let (g_ii, b_ii) = adm.ybus_diag(i);
    let _ = b_ii; // the diagonal B term cancels in P
    let mut p = g_ii * (v.e[i] * v.e[i] + v.f[i] * v.f[i]);
    for (j, g, b) in adm.ybus_neighbors(i) {
        p += v.e[i] * (g * v.e[j] - b * v.f[j]) + v.f[i] * (g * v.f[j] + b * v.e[j]);
    }
    p
}

/// Calculated reactive power at bus index `i`, pu.
fn calc_q_pu(adm: &AdmittanceTable, v: &VoltageState, i: usize) -> f64 {
    let (_, b_ii) = adm.ybus_diag(i);
    let mut q = -b_ii * (v.e[i] * v.e[i] + v.f[i] * v.f[i]);
    for (j, g, b) in adm.ybus_neighbors(i) {
        q += v.f[i] * (g * v.e[j] - b * v.f[j]) - v.e[i] * (g * v.f[j] + b * v.e[j]);
    }
    q
}

/// Partial derivatives of calculated `P_i` and `Q_i` with respect to the
/// voltage parts, pu. Returns `(dP/de_i, dP/df_i, dQ/de_i, dQ/df_i)` for the
/// own-bus entries and appends `(j, dP/de_j, dP/df_j, dQ/de_j, dQ/df_j)` per
/// neighbor to `neigh`.
fn calc_partials_pu(
    adm: &AdmittanceTable,
    v: &VoltageState,
    i: usize,
    neigh: &mut Vec<(usize, f64, f64, f64, f64)>,
) -> (f64, f64, f64, f64) {
    let (g_ii, b_ii) = adm.ybus_diag(i);
    let mut dp_dei = 2.0 * g_ii * v.e[i];
    let mut dp_dfi = 2.0 * g_ii * v.f[i];
    let mut dq_dei = -2.0 * b_ii * v.e[i];
    let mut dq_dfi = -2.0 * b_ii * v.f[i];
    neigh.clear();
    for (j, g, b) in adm.ybus_neighbors(i) {
        let a = g * v.e[j] - b * v.f[j]; // Re(Y_ij · V_j)
        let c = g * v.f[j] + b * v.e[j]; // Im(Y_ij · V_j)
        dp_dei += a;
        dp_dfi += c;
        dq_dei -= c;
        dq_dfi += a;
        let dp_dej = v.e[i] * g + v.f[i] * b;
        let dp_dfj = -v.e[i] * b + v.f[i] * g;
        let dq_dej = v.f[i] * g - v.e[i] * b;
        let dq_dfj = -v.f[i] * b - v.e[i] * g;
        neigh.push((j, dp_dej, dp_dfj, dq_dej, dq_dfj));
    }
    (dp_dei, dp_dfi, dq_dei, dq_dfi)
}

/// Power-balance residuals for a candidate state.
///
/// Returns a vector of length `2n`: entries `0..n` are real-power residuals
/// in kW, entries `n..2n` reactive residuals in kvar, each
/// `specified net injection − calculated power`. The zero vector means
/// `(v, inj)` satisfies AC power flow exactly.
pub fn pf_residuals(
    net: &Network,
    adm: &AdmittanceTable,
    v: &VoltageState,
    inj: &InjectionSet,
) -> Result<Vec<f64>, AcpfError> {
    let n = net.n_buses();
    check_dims(n, adm, Some(v), Some(inj))?;
    let s_base = net.s_base_kw();
    let mut r = vec![0.0; 2 * n];
    for i in 0..n {
        r[i] = inj.net_p_kw(i) - calc_p_pu(adm, v, i) * s_base;
        r[n + i] = inj.net_q_kvar(i) - calc_q_pu(adm, v, i) * s_base;
    }
    Ok(r)
}

/// Sparse Jacobian of the power-balance residuals.
///
/// Row layout matches [`pf_residuals`] (`0..n` real, `n..2n` reactive);
/// columns are `0..n` for the `e` parts and `n..2n` for the `f` parts.
/// Entries are `∂residual/∂voltage` in kW (kvar) per pu — the negated
/// partials of the calculated powers. The sparsity pattern is the network
/// adjacency plus the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseJacobian {
    /// Number of buses (rows = cols = `2n`).
    pub n: usize,
    /// Per row: `(column, value)` entries in ascending column order.
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseJacobian {
    /// Value at `(row, col)`, zero when the entry is structurally absent.
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.rows[row]
            .iter()
            .find(|&&(c, _)| c == col)
            .map_or(0.0, |&(_, v)| v)
    }
}

/// Analytic Jacobian of [`pf_residuals`] with respect to all voltage parts.
pub fn pf_jacobian(net: &Network, adm: &AdmittanceTable, v: &VoltageState) -> SparseJacobian {
    let n = net.n_buses();
    let s_base = net.s_base_kw();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); 2 * n];
    let mut neigh = Vec::new();
    for i in 0..n {
        let (dp_dei, dp_dfi, dq_dei, dq_dfi) = calc_partials_pu(adm, v, i, &mut neigh);
        let mut prow = vec![(i, -dp_dei * s_base), (n + i, -dp_dfi * s_base)];
        let mut qrow = vec![(i, -dq_dei * s_base), (n + i, -dq_dfi * s_base)];
        for &(j, dp_dej, dp_dfj, dq_dej, dq_dfj) in &neigh {
            prow.push((j, -dp_dej * s_base));
            prow.push((n + j, -dp_dfj * s_base));
            qrow.push((j, -dq_dej * s_base));
            qrow.push((n + j, -dq_dfj * s_base));
        }
        prow.sort_by_key(|&(c, _)| c);
        qrow.sort_by_key(|&(c, _)| c);
        rows[i] = prow;
        rows[n + i] = qrow;
    }
    SparseJacobian { n, rows }
}

/// Iteration summary from [`solve_newton_pf`].
#[derive(Debug, Clone, PartialEq)]
pub struct NewtonReport {
    /// Newton iterations performed.
    pub iterations: usize,
    /// Final residual infinity norm, pu.
    pub mismatch_pu: f64,
}

/// Solves AC power flow for the non-slack buses by damped Newton-Raphson.
///
/// The slack bus is held at `1.0 + j0.0`; its injection entries in `inj` are
/// ignored. Full Newton steps are taken, halving the step (at most six
/// times) whenever the residual norm would increase. Converges when the
/// residual infinity norm drops below [`NEWTON_TOL_PU`].
pub fn solve_newton_pf(
    net: &Network,
    adm: &AdmittanceTable,
    inj: &InjectionSet,
) -> Result<(VoltageState, NewtonReport), AcpfError> {
    let n = net.n_buses();
    check_dims(n, adm, None, Some(inj))?;
    let slack = net.slack_index();
    let s_base = net.s_base_kw();

    // Per-unit net injections for the non-slack buses.
    let p_pu: Vec<f64> = (0..n).map(|i| inj.net_p_kw(i) / s_base).collect();
    let q_pu: Vec<f64> = (0..n).map(|i| inj.net_q_kvar(i) / s_base).collect();

    // Unknown ordering: (e_i, f_i) for each non-slack bus.
    let free: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let m = free.len();
    let mut v = VoltageState::flat(n);

    let residual_pu = |v: &VoltageState| -> (DVector<f64>, f64) {
        let mut r = DVector::zeros(2 * m);
        let mut norm: f64 = 0.0;
        for (k, &i) in free.iter().enumerate() {
            let rp = p_pu[i] - calc_p_pu(adm, v, i);
            let rq = q_pu[i] - calc_q_pu(adm, v, i);
            r[k] = rp;
            r[m + k] = rq;
            norm = norm.max(rp.abs()).max(rq.abs());
        }
        (r, norm)
    };

    let col_of: Vec<Option<usize>> = {
        let mut map = vec![None; n];
        for (k, &i) in free.iter().enumerate() {
            map[i] = Some(k);
        }
        map
    };

    let (mut r, mut norm) = residual_pu(&v);
    let mut iterations = 0;
    while norm >= NEWTON_TOL_PU {
        if iterations >= NEWTON_MAX_ITER || !norm.is_finite() {
            return Err(AcpfError::Diverged { iterations, mismatch_pu: norm });
        }
        // Jacobian of the *calculated* powers over the free variables; the
        // Newton system is J·Δx = residual (residual = spec − calc).
        let mut jac = DMatrix::zeros(2 * m, 2 * m);
        let mut neigh = Vec::new();
        for (k, &i) in free.iter().enumerate() {
            let (dp_dei, dp_dfi, dq_dei, dq_dfi) = calc_partials_pu(adm, &v, i, &mut neigh);
            jac[(k, k)] = dp_dei;
            jac[(k, m + k)] = dp_dfi;
            jac[(m + k, k)] = dq_dei;
            jac[(m + k, m + k)] = dq_dfi;
            for &(j, dp_dej, dp_dfj, dq_dej, dq_dfj) in &neigh {
                if let Some(c) = col_of[j] {
                    jac[(k, c)] = dp_dej;
                    jac[(k, m + c)] = dp_dfj;
                    jac[(m + k, c)] = dq_dej;
                    jac[(m + k, m + c)] = dq_dfj;
                }
            }
        }
        let lu = jac.lu();
        let Some(dx) = lu.solve(&r) else {
            return Err(AcpfError::SingularJacobian { iteration: iterations });
        };

        // Backtracking: halve the step while the mismatch increases.
        let mut alpha = 1.0;
        let mut accepted = None;
        for halving in 0..=6 {
            let mut trial = v.clone();
            for (k, &i) in free.iter().enumerate() {
                trial.e[i] += alpha * dx[k];
                trial.f[i] += alpha * dx[m + k];
            }
            let (tr, tnorm) = residual_pu(&trial);
            if tnorm < norm || halving == 6 {
                accepted = Some((trial, tr, tnorm));
                break;
            }
            alpha *= 0.5;
        }
        let (nv, nr, nnorm) = accepted.expect("loop always accepts by the final halving");
        v = nv;
        r = nr;
        norm = nnorm;
        iterations += 1;
    }
    Ok((v, NewtonReport { iterations, mismatch_pu: norm }))
}

/// Power flow over one branch, both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchFlow {
    /// Bus index of the `from` endpoint.
    pub i: usize,
    /// Bus index of the `to` endpoint.
    pub j: usize,
    /// Real power leaving bus `i` into the branch, kW.
    pub p_from_kw: f64,
    /// Reactive power leaving bus `i` into the branch, kvar.
    pub q_from_kvar: f64,
    /// Real power leaving bus `j` into the branch, kW.
    pub p_to_kw: f64,
    /// Reactive power leaving bus `j` into the branch, kvar.
    pub q_to_kvar: f64,
    /// Series current magnitude, pu.
    pub current_pu: f64,
    /// Real loss on the branch: `p_from + p_to`, kW (≥ 0).
    pub loss_kw: f64,
}

/// Branch flows and per-bus loss attribution for one voltage state.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowResult {
    /// Per branch, in case order.
    pub branches: Vec<BranchFlow>,
    /// Per bus index: attributed real loss, kW (half of each incident
    /// branch's loss).
    pub bus_loss_kw: Vec<f64>,
    /// Total real network loss, kW.
    pub total_loss_kw: f64,
}

/// Computes directed branch flows, currents, and loss attribution.
///
/// For a branch with series admittance `y` between buses `i` and `j`, the
/// sending-end flow is `S_ij = V_i · conj((V_i − V_j)·y)`; the branch loss is
/// `P_ij + P_ji = g·|V_i − V_j|² ≥ 0`.
pub fn branch_flows(net: &Network, adm: &AdmittanceTable, v: &VoltageState) -> FlowResult {
    let s_base = net.s_base_kw();
    let n = net.n_buses();
    let mut branches = Vec::with_capacity(adm.entries().len());
    for ent in adm.entries() {
        let (i, j, g, b) = (ent.i, ent.j, ent.g, ent.b);
        let de = v.e[i] - v.e[j];
        let df = v.f[i] - v.f[j];
        // I_ij = y · (V_i − V_j).
        let ire = g * de - b * df;
        let iim = g * df + b * de;
        let p_from = v.e[i] * ire + v.f[i] * iim;
        let q_from = v.f[i] * ire - v.e[i] * iim;
        // I_ji = −I_ij.
        let p_to = -(v.e[j] * ire + v.f[j] * iim);
        let q_to = -(v.f[j] * ire - v.e[j] * iim);
        branches.push(BranchFlow {
            i,
            j,
            p_from_kw: p_from * s_base,
            q_from_kvar: q_from * s_base,
            p_to_kw: p_to * s_base,
            q_to_kvar: q_to * s_base,
            current_pu: (ire * ire + iim * iim).sqrt(),
            loss_kw: (p_from + p_to) * s_base,
        });
    }
    let mut result = FlowResult { branches, bus_loss_kw: vec![0.0; n], total_loss_kw: 0.0 };
    result.bus_loss_kw = bus_losses(&result, n);
    result.total_loss_kw = result.bus_loss_kw.iter().sum();
    result
}

/// Attributes half of every branch's real loss to each of its endpoints.
///
/// The attribution conserves the total: `Σ_i P_l,i` equals the sum of branch
/// losses exactly.
pub fn bus_losses(flows: &FlowResult, n_buses: usize) -> Vec<f64> {
    let mut loss = vec![0.0; n_buses];
    for br in &flows.branches {
        loss[br.i] += 0.5 * br.loss_kw;
        loss[br.j] += 0.5 * br.loss_kw;
    }
    loss
}

/// Per-bus operating bounds for [`check_limits`].
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingBounds {
    /// Lower voltage magnitude bound, pu.
    pub v_min_pu: f64,
    /// Upper voltage magnitude bound, pu.
    pub v_max_pu: f64,
    /// Per bus: minimum real generation, kW.
    pub p_gen_min_kw: Vec<f64>,
    /// Per bus: maximum real generation, kW.
    pub p_gen_max_kw: Vec<f64>,
    /// Per bus: minimum reactive generation, kvar.
    pub q_gen_min_kvar: Vec<f64>,
    /// Per bus: maximum reactive generation, kvar.
    pub q_gen_max_kvar: Vec<f64>,
}

/// One operating-limit violation.
#[derive(Debug, Clone, PartialEq)]
pub enum LimitFinding {
    /// Voltage magnitude below the floor.
    VoltageLow {
        /// Bus id.
        bus: usize,
        /// Magnitude found, pu.
        v_pu: f64,
        /// Shortfall below the floor, pu.
        deficit_pu: f64,
    },
    /// Voltage magnitude above the ceiling.
    VoltageHigh {
        /// Bus id.
        bus: usize,
        /// Magnitude found, pu.
        v_pu: f64,
        /// Excess above the ceiling, pu.
        excess_pu: f64,
    },
    /// Real generation outside its capacity range.
    RealGenOutOfRange {
        /// Bus id.
        bus: usize,
        /// Generation found, kW.
        p_kw: f64,
        /// Distance outside the range, kW.
        excess_kw: f64,
    },
    /// Reactive generation outside its capacity range.
    ReactiveGenOutOfRange {
        /// Bus id.
        bus: usize,
        /// Generation found, kvar.
        q_kvar: f64,
        /// Distance outside the range, kvar.
        excess_kvar: f64,
    },
}

/// Checks voltages and generation against operating bounds.
///
/// Returns one finding per violation with its magnitude; boundary values are
/// feasible, and violations smaller than [`VIOLATION_TOL`] are ignored so
/// that optimization output satisfying constraints to solver tolerance
/// passes cleanly.
pub fn check_limits(
    net: &Network,
    v: &VoltageState,
    inj: &InjectionSet,
    bounds: &OperatingBounds,
) -> Vec<LimitFinding> {
    let mut findings = Vec::new();
    for (idx, bus) in net.buses.iter().enumerate() {
        let vm = v.v_mag(idx);
        if vm < bounds.v_min_pu - VIOLATION_TOL {
            findings.push(LimitFinding::VoltageLow {
                bus: bus.id,
                v_pu: vm,
                deficit_pu: bounds.v_min_pu - vm,
            });
        }
        if vm > bounds.v_max_pu + VIOLATION_TOL {
            findings.push(LimitFinding::VoltageHigh {
                bus: bus.id,
                v_pu: vm,
                excess_pu: vm - bounds.v_max_pu,
            });
        }
        let p = inj.p_gen_kw[idx];
        if p < bounds.p_gen_min_kw[idx] - VIOLATION_TOL || p > bounds.p_gen_max_kw[idx] + VIOLATION_TOL {
            let excess = (bounds.p_gen_min_kw[idx] - p).max(p - bounds.p_gen_max_kw[idx]);
            findings.push(LimitFinding::RealGenOutOfRange { bus: bus.id, p_kw: p, excess_kw: excess });
        }
        let q = inj.q_gen_kvar[idx];
        if q < bounds.q_gen_min_kvar[idx] - VIOLATION_TOL
            || q > bounds.q_gen_max_kvar[idx] + VIOLATION_TOL
        {
            let excess = (bounds.q_gen_min_kvar[idx] - q).max(q - bounds.q_gen_max_kvar[idx]);
            findings.push(LimitFinding::ReactiveGenOutOfRange {
                bus: bus.id,
                q_kvar: q,
                excess_kvar: excess,
            });
        }
    }
    findings
}

fn check_dims(
    n: usize,
    adm: &AdmittanceTable,
    v: Option<&VoltageState>,
    inj: Option<&InjectionSet>,
) -> Result<(), AcpfError> {
    if adm.n_buses() != n {
        return Err(AcpfError::DimensionMismatch(format!(
            "admittance table covers {} buses, network has {n}",
            adm.n_buses()
        )));
    }
    if let Some(v) = v {
        if v.e.len() != n || v.f.len() != n {
            return Err(AcpfError::DimensionMismatch(format!(
                "voltage state covers {} buses, network has {n}",
                v.e.len()
            )));
        }
    }
    if let Some(inj) = inj {
        if inj.len() != n
            || inj.q_gen_kvar.len() != n
            || inj.p_load_kw.len() != n
            || inj.q_load_kvar.len() != n
        {
            return Err(AcpfError::DimensionMismatch(format!(
                "injection set covers {} buses, network has {n}",
                inj.len()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_admittance, parse_case};
    use approx::assert_relative_eq;

    fn two_bus() -> (Network, AdmittanceTable) {
        // 1 MVA / 1 kV base: z_base = 1 ohm, so ohms are pu directly.
        let net = parse_case(
            "BASE 1 1\nBUS 1 slack 0 0 0\nBUS 2 consumer 0 0 0\nBRANCH 1 2 0.01 0.01\n",
        )
        .unwrap();
        let adm = build_admittance(&net).unwrap();
        (net, adm)
    }

    #[test]
    fn flat_start_with_zero_injections_has_zero_residual() {
        let (net, adm) = two_bus();
        let v = VoltageState::flat(2);
        let inj = InjectionSet::from_net(vec![0.0, 0.0], vec![0.0, 0.0]);
        let r = pf_residuals(&net, &adm, &v, &inj).unwrap();
        for x in r {
            assert_relative_eq!(x, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn solved_two_bus_case_has_tiny_residual() {
        let (net, adm) = two_bus();
        // 1 pu load at bus 2 (base 1 MVA → 1000 kW).
        let inj = InjectionSet::from_net(vec![0.0, -1000.0], vec![0.0, 0.0]);
        let (v, report) = solve_newton_pf(&net, &adm, &inj).unwrap();
        assert!(report.mismatch_pu < NEWTON_TOL_PU);
        assert!(report.iterations <= 10, "took {} iterations", report.iterations);
        let r = pf_residuals(&net, &adm, &v, &inj).unwrap();
        // Residual under 1e-8 pu on the non-slack bus (1e-5 kW on 1 MVA).
        assert!(r[1].abs() / net.s_base_kw() < 1e-8);
        assert!(r[3].abs() / net.s_base_kw() < 1e-8);
    }

    #[test]
    fn perturbation_matches_first_order_prediction() {
        let (net, adm) = two_bus();
        let inj = InjectionSet::from_net(vec![0.0, -1000.0], vec![0.0, 0.0]);
        let (v, _) = solve_newton_pf(&net, &adm, &inj).unwrap();
        let jac = pf_jacobian(&net, &adm, &v);
        let h = 1e-2;
        // The residuals are exactly quadratic in the voltage parts, so the
        // central difference reproduces the analytic Jacobian to rounding.
        for col in [0usize, 1, 2, 3] {
            let mut vp = v.clone();
            let mut vm = v.clone();
            if col < 2 {
                vp.e[col] += h;
                vm.e[col] -= h;
            } else {
                vp.f[col - 2] += h;
                vm.f[col - 2] -= h;
            }
            let rp = pf_residuals(&net, &adm, &vp, &inj).unwrap();
            let rm = pf_residuals(&net, &adm, &vm, &inj).unwrap();
            for row in 0..4 {
                let fd = (rp[row] - rm[row]) / (2.0 * h);
                assert_relative_eq!(fd, jac.get(row, col), epsilon = 1e-6, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn zero_loads_solve_to_flat_profile() {
        let (net, adm) = two_bus();
        let inj = InjectionSet::from_net(vec![0.0, 0.0], vec![0.0, 0.0]);
        let (v, report) = solve_newton_pf(&net, &adm, &inj).unwrap();
        assert_eq!(report.iterations, 0);
        assert_relative_eq!(v.e[1], 1.0, epsilon = 1e-12);
        assert_relative_eq!(v.f[1], 0.0, epsilon = 1e-12);
        let flows = branch_flows(&net, &adm, &v);
        assert_relative_eq!(flows.total_loss_kw, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn branch_loss_equals_sending_minus_receiving_power() {
        let (net, adm) = two_bus();
        let inj = InjectionSet::from_net(vec![0.0, -1000.0], vec![0.0, 0.0]);
        let (v, _) = solve_newton_pf(&net, &adm, &inj).unwrap();
        let flows = branch_flows(&net, &adm, &v);
        let br = &flows.branches[0];
        // Sending-end P into the branch minus power delivered out the far
        // end is the I²r loss; with the sign convention here that is simply
        // p_from + p_to.
        assert_relative_eq!(br.loss_kw, br.p_from_kw + br.p_to_kw, epsilon = 1e-9);
        assert!(br.loss_kw > 0.0);
        // g·|ΔV|² cross-check.
        let de = v.e[0] - v.e[1];
        let df = v.f[0] - v.f[1];
        let g = adm.entries()[0].g;
        assert_relative_eq!(br.loss_kw, g * (de * de + df * df) * net.s_base_kw(), epsilon = 1e-9);
    }

    #[test]
    fn bus_losses_split_each_branch_in_half() {
        let (net, adm) = two_bus();
        let inj = InjectionSet::from_net(vec![0.0, -1000.0], vec![0.0, 0.0]);
        let (v, _) = solve_newton_pf(&net, &adm, &inj).unwrap();
        let flows = branch_flows(&net, &adm, &v);
        assert_relative_eq!(flows.bus_loss_kw[0], 0.5 * flows.branches[0].loss_kw);
        assert_relative_eq!(flows.bus_loss_kw[1], 0.5 * flows.branches[0].loss_kw);
        assert_relative_eq!(
            flows.bus_loss_kw.iter().sum::<f64>(),
            flows.total_loss_kw,
            epsilon = 1e-12
        );
    }

    #[test]
    fn lossless_branch_attributes_zero() {
        let net = parse_case(
            "BASE 1 1\nBUS 1 slack 0 0 0\nBUS 2 consumer 0 0 0\nBRANCH 1 2 0 0.01\n",
        )
        .unwrap();
        let adm = build_admittance(&net).unwrap();
        let inj = InjectionSet::from_net(vec![0.0, -100.0], vec![0.0, 0.0]);
        let (v, _) = solve_newton_pf(&net, &adm, &inj).unwrap();
        let flows = branch_flows(&net, &adm, &v);
        assert_relative_eq!(flows.bus_loss_kw[0], 0.0, epsilon = 1e-9);
        assert_relative_eq!(flows.bus_loss_kw[1], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn limits_accept_boundary_voltage() {
        let (net, _) = two_bus();
        let mut v = VoltageState::flat(2);
        v.e[1] = 0.95;
        let inj = InjectionSet::from_net(vec![0.0, 0.0], vec![0.0, 0.0]);
        let bounds = OperatingBounds {
            v_min_pu: 0.95,
            v_max_pu: 1.05,
            p_gen_min_kw: vec![f64::NEG_INFINITY; 2],
            p_gen_max_kw: vec![f64::INFINITY; 2],
            q_gen_min_kvar: vec![f64::NEG_INFINITY; 2],
            q_gen_max_kvar: vec![f64::INFINITY; 2],
        };
        assert!(check_limits(&net, &v, &inj, &bounds).is_empty());
        v.e[1] = 0.94;
        let findings = check_limits(&net, &v, &inj, &bounds);
        assert_eq!(findings.len(), 1);
        match &findings[0] {
            LimitFinding::VoltageLow { bus: 2, deficit_pu, .. } => {
                assert_relative_eq!(*deficit_pu, 0.01, epsilon = 1e-12);
            }
            other => panic!("unexpected finding {other:?}"),
        }
    }

    #[test]
    fn limits_flag_generation_over_cap() {
        let (net, _) = two_bus();
        let v = VoltageState::flat(2);
        let inj = InjectionSet::from_net(vec![0.0, 101.0], vec![0.0, 0.0]);
        let bounds = OperatingBounds {
            v_min_pu: 0.9,
            v_max_pu: 1.1,
            p_gen_min_kw: vec![f64::NEG_INFINITY, 0.0],
            p_gen_max_kw: vec![f64::INFINITY, 100.0],
            q_gen_min_kvar: vec![f64::NEG_INFINITY; 2],
            q_gen_max_kvar: vec![f64::INFINITY; 2],
        };
        let findings = check_limits(&net, &v, &inj, &bounds);
        assert_eq!(findings.len(), 1);
        assert!(matches!(
            findings[0],
            LimitFinding::RealGenOutOfRange { bus: 2, .. }
        ));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let (net, adm) = two_bus();
        let v = VoltageState::flat(3);
        let inj = InjectionSet::from_net(vec![0.0, 0.0], vec![0.0, 0.0]);
        assert!(matches!(
            pf_residuals(&net, &adm, &v, &inj),
            Err(AcpfError::DimensionMismatch(_))
        ));
    }
}
