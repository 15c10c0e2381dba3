//! Primal-dual interior-point iteration with deterministic multi-start.
//!
//! Inequalities are slacked (`c_I(x) + s = 0`, `s > 0`) and box bounds are
//! handled by logarithmic barriers with explicit dual iterates, following
//! the standard monotone barrier (Fiacco–McCormick) scheme: solve each
//! barrier subproblem to a loose tolerance proportional to `μ`, then shrink
//! `μ`. Steps come from the condensed KKT system in `linalg`; acceptance is
//! by strict decrease of an ℓ1 exact-penalty merit function under a
//! fraction-to-boundary rule. Singular or non-descent systems trigger
//! diagonal regularization bumps rather than failure.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::linalg::{solve_kkt, EqPlace, IneqPlace, KktInput, Layout};
use super::{validate_problem, NlpProblem, SolveOptions, SolveReport, SolveStatus};

const MU_INIT: f64 = 0.1;
const TAU_MIN: f64 = 0.99;
/// Inner (fixed-μ) convergence factor: advance μ once the scaled residual
/// drops below `KAPPA_EPS · μ`.
const KAPPA_EPS: f64 = 10.0;
/// Dual-iterate safeguard width around the barrier target `μ / distance`.
const KAPPA_SIGMA: f64 = 1e10;
const DELTA_BASE: f64 = 1e-8;
/// Primal regularization may grow far enough to convexify any curvature the
/// quadratic forms can produce; the constraint-dual regularization stays
/// small (capped at `DELTA_C_MAX`) so feasibility progress is never lost.
const DELTA_MAX: f64 = 1e8;
const DELTA_C_MAX: f64 = 1e-2;
const MAX_BACKTRACK: usize = 25;

/// Outcome of a single start.
struct RunResult {
    status: SolveStatus,
    x: Vec<f64>,
    objective: f64,
    eq_violation: f64,
    ineq_violation: f64,
    kkt_residual: f64,
    iterations: usize,
    trace: Vec<(f64, f64)>,
}

pub(super) fn solve(p: &NlpProblem, opts: &SolveOptions) -> SolveReport {
    let t0 = Instant::now();
    if validate_problem(p).is_err() {
        return SolveReport {
            status: SolveStatus::NumericalFailure,
            x: p.x0.clone(),
            objective: f64::NAN,
            eq_violation: f64::NAN,
            ineq_violation: f64::NAN,
            kkt_residual: f64::NAN,
            iterations: 0,
            start_index: 0,
            wall_time: t0.elapsed(),
            trace: Vec::new(),
        };
    }

    let starts = build_starts(p, opts);
    let mut best: Option<(usize, RunResult)> = None;
    for (k, x_start) in starts.iter().enumerate() {
        let run = run_single(p, opts, x_start);
        let replace = match &best {
            None => true,
            Some((_, incumbent)) => prefer(&run, incumbent),
        };
        if replace {
            best = Some((k, run));
        }
    }
    let (start_index, run) = best.expect("at least one start");
    SolveReport {
        status: run.status,
        x: run.x,
        objective: run.objective,
        eq_violation: run.eq_violation,
        ineq_violation: run.ineq_violation,
        kkt_residual: run.kkt_residual,
        iterations: run.iterations,
        start_index,
        wall_time: t0.elapsed(),
        trace: run.trace,
    }
}

/// Status preference order for the multi-start reduction.
fn status_rank(s: SolveStatus) -> u8 {
    match s {
        SolveStatus::Optimal => 0,
        SolveStatus::MaxIterations => 1,
        SolveStatus::Infeasible => 2,
        SolveStatus::NumericalFailure => 3,
    }
}

/// True when `a` should replace the incumbent `b`. Optimal runs compare by
/// objective then KKT residual; non-optimal runs by violation then
/// objective. Earlier starts win ties (strict inequalities throughout).
fn prefer(a: &RunResult, b: &RunResult) -> bool {
    let (ra, rb) = (status_rank(a.status), status_rank(b.status));
    if ra != rb {
        return ra < rb;
    }
    let key = |r: &RunResult| -> (f64, f64) {
        let obj = if r.objective.is_nan() { f64::INFINITY } else { r.objective };
        if r.status == SolveStatus::Optimal {
            (obj, r.kkt_residual)
        } else {
            (r.eq_violation.max(r.ineq_violation), obj)
        }
    };
    let (a1, a2) = key(a);
    let (b1, b2) = key(b);
    a1 < b1 || (a1 == b1 && a2 < b2)
}

/// Deterministic start points: the given `x0`, the box midpoint, then
/// seeded perturbations of `x0`.
fn build_starts(p: &NlpProblem, opts: &SolveOptions) -> Vec<Vec<f64>> {
    let n_starts = opts.n_starts.max(1);
    let mut starts = Vec::with_capacity(n_starts);
    starts.push(p.x0.clone());
    if n_starts >= 2 {
        let mid: Vec<f64> = (0..p.n)
            .map(|i| {
                let (l, u) = (p.lower[i], p.upper[i]);
                if l.is_finite() && u.is_finite() {
                    0.5 * (l + u)
                } else {
                    p.x0[i]
                }
            })
            .collect();
        starts.push(mid);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    while starts.len() < n_starts {
        let xp: Vec<f64> = p
            .x0
            .iter()
            .map(|&v| {
                let amp = 0.1 * v.abs().max(1e-3);
                v + amp * (rng.gen::<f64>() * 2.0 - 1.0)
            })
            .collect();
        starts.push(xp);
    }
    starts
}

/// Classifies an unrecoverable stall: a merit function that cannot decrease
/// while the violation is still large signals inconsistent constraints; the
/// same stall near feasibility is a numerical breakdown.
fn stuck_status(violation: f64, opts: &SolveOptions) -> SolveStatus {
    if violation > 1e3 * opts.tol_eq {
        SolveStatus::Infeasible
    } else {
        SolveStatus::NumericalFailure
    }
}

/// Pushes a start strictly inside the box; fixed variables sit on their bound.
fn interiorize(p: &NlpProblem, x_start: &[f64], free: &[bool]) -> Vec<f64> {
    let mut x = vec![0.0; p.n];
    for i in 0..p.n {
        let (l, u) = (p.lower[i], p.upper[i]);
        if !free[i] {
            x[i] = l;
            continue;
        }
        let xi = if x_start[i].is_finite() { x_start[i] } else { 0.0 };
        x[i] = if l.is_finite() && u.is_finite() {
            let push_l = (1e-2 * l.abs().max(1.0)).min(1e-2 * (u - l));
            let push_u = (1e-2 * u.abs().max(1.0)).min(1e-2 * (u - l));
            xi.clamp(l + push_l, u - push_u)
        } else if l.is_finite() {
            xi.max(l + 1e-2 * l.abs().max(1.0))
        } else if u.is_finite() {
            xi.min(u - 1e-2 * u.abs().max(1.0))
        } else {
            xi
        };
    }
    x
}

/// One interior-point run from one start.
fn run_single(p: &NlpProblem, opts: &SolveOptions, x_start: &[f64]) -> RunResult {
    let n = p.n;
    // A variable is fixed only when both bounds are finite and coincide.
    let free: Vec<bool> = (0..n)
        .map(|i| {
            !(p.lower[i].is_finite()
                && p.upper[i].is_finite()
                && p.upper[i] - p.lower[i] <= 1e-12 * p.lower[i].abs().max(1.0))
        })
        .collect();
    let mut x = interiorize(p, x_start, &free);

    // Entirely fixed (or empty) problems reduce to a feasibility check.
    if !free.iter().any(|&f| f) {
        let eq_violation = p.eq_values(&x).iter().fold(0.0f64, |m, &c| m.max(c.abs()));
        let ineq_violation = p.ineq_values(&x).iter().fold(0.0f64, |m, &c| m.max(c.max(0.0)));
        let feasible = eq_violation <= opts.tol_eq && ineq_violation <= opts.tol_ineq;
        return RunResult {
            status: if feasible { SolveStatus::Optimal } else { SolveStatus::Infeasible },
            objective: p.objective_value(&x),
            x,
            eq_violation,
            ineq_violation,
            kkt_residual: 0.0,
            iterations: 0,
            trace: Vec::new(),
        };
    }

    let layout = Layout::plan(p, &free);
    let m_e = p.eq.len();
    let m_i = p.ineq.len();
    let eq_active: Vec<bool> =
        (0..m_e).map(|r| !matches!(layout.eq_place[r], EqPlace::Dropped)).collect();
    let ineq_active: Vec<bool> =
        (0..m_i).map(|r| !matches!(layout.ineq_place[r], IneqPlace::Dropped)).collect();
    let lb_fin: Vec<bool> = (0..n).map(|i| free[i] && p.lower[i].is_finite()).collect();
    let ub_fin: Vec<bool> = (0..n).map(|i| free[i] && p.upper[i].is_finite()).collect();

    let mut mu = MU_INIT;
    let mu_floor = opts.tol_kkt / 10.0;
    let mut nu: f64 = 1.0;
    let mut delta = DELTA_BASE;

    let c_i0 = p.ineq_values(&x);
    let mut s: Vec<f64> = c_i0.iter().map(|&c| (-c).max(1e-2)).collect();
    let mut w: Vec<f64> = s.iter().map(|&si| mu / si).collect();
    let mut lam_eq = vec![0.0; m_e];
    let mut zl = vec![0.0; n];
    let mut zu = vec![0.0; n];
    for i in 0..n {
        if lb_fin[i] {
            zl[i] = mu / (x[i] - p.lower[i]);
        }
        if ub_fin[i] {
            zu[i] = mu / (p.upper[i] - x[i]);
        }
    }

    // ℓ1 exact-penalty merit with barrier terms, at explicit (μ, ν).
    let merit = |x: &[f64], s: &[f64], mu: f64, nu: f64| -> f64 {
        let mut phi = p.objective_value(x);
        for i in 0..n {
            if lb_fin[i] {
                phi -= mu * (x[i] - p.lower[i]).ln();
            }
            if ub_fin[i] {
                phi -= mu * (p.upper[i] - x[i]).ln();
            }
        }
        let mut pen = 0.0;
        for (r, c) in p.eq.iter().enumerate() {
            let v = c.eval(x);
            if eq_active[r] {
                pen += v.abs();
            }
        }
        for (r, c) in p.ineq.iter().enumerate() {
            if ineq_active[r] {
                pen += (c.eval(x) + s[r]).abs();
                phi -= mu * s[r].ln();
            }
        }
        phi + nu * pen
    };

    let mut trace: Vec<(f64, f64)> = Vec::new();
    let mut viol_hist: Vec<f64> = Vec::new();
    let mut status = SolveStatus::MaxIterations;
    let mut iterations = 0;
    let mut last_kkt = f64::INFINITY;

    'outer: for iter in 0..opts.max_iter {
        iterations = iter;
        let grad_f = p.objective_gradient(&x);
        let c_e = p.eq_values(&x);
        let c_i = p.ineq_values(&x);

        // Stationarity pieces: base = ∇f + J_Eᵀ λ_E.
        let mut base = grad_f.clone();
        for (r, row) in p.eq.iter().enumerate() {
            if eq_active[r] && lam_eq[r] != 0.0 {
                row.add_gradient(&x, lam_eq[r], &mut base);
            }
        }
        let mut stat = base.clone();
        for (r, row) in p.ineq.iter().enumerate() {
            if ineq_active[r] && w[r] != 0.0 {
                row.add_gradient(&x, w[r], &mut stat);
            }
        }
        let mut stat_inf: f64 = 0.0;
        for i in 0..n {
            if free[i] {
                stat_inf = stat_inf.max((stat[i] - zl[i] + zu[i]).abs());
            }
        }

        // Complementarity residuals against 0 and against μ.
        let mut comp0: f64 = 0.0;
        let mut comp_mu: f64 = 0.0;
        let mut dual_sum = 0.0;
        let mut dual_cnt = 0usize;
        let mut bound_dual_sum = 0.0;
        let mut bound_dual_cnt = 0usize;
        for i in 0..n {
            if lb_fin[i] {
                let c = (x[i] - p.lower[i]) * zl[i];
                comp0 = comp0.max(c.abs());
                comp_mu = comp_mu.max((c - mu).abs());
                bound_dual_sum += zl[i];
                bound_dual_cnt += 1;
            }
            if ub_fin[i] {
                let c = (p.upper[i] - x[i]) * zu[i];
                comp0 = comp0.max(c.abs());
                comp_mu = comp_mu.max((c - mu).abs());
                bound_dual_sum += zu[i];
                bound_dual_cnt += 1;
            }
        }
        for r in 0..m_i {
            if ineq_active[r] {
                let c = s[r] * w[r];
                comp0 = comp0.max(c.abs());
                comp_mu = comp_mu.max((c - mu).abs());
                bound_dual_sum += w[r];
                bound_dual_cnt += 1;
            }
        }
        for r in 0..m_e {
            if eq_active[r] {
                dual_sum += lam_eq[r].abs();
                dual_cnt += 1;
            }
        }
        let s_d = ((dual_sum + bound_dual_sum) / (dual_cnt + bound_dual_cnt).max(1) as f64)
            .max(100.0)
            / 100.0;
        let s_c =
            (bound_dual_sum / bound_dual_cnt.max(1) as f64).max(100.0) / 100.0;

        let eq_viol = c_e.iter().fold(0.0f64, |m, &c| m.max(c.abs()));
        let true_ineq = c_i.iter().fold(0.0f64, |m, &c| m.max(c.max(0.0)));
        let mut slack_res: f64 = 0.0;
        for r in 0..m_i {
            if ineq_active[r] {
                slack_res = slack_res.max((c_i[r] + s[r]).abs());
            }
        }

        last_kkt = (stat_inf / s_d).max(eq_viol).max(slack_res).max(comp0 / s_c);

        if last_kkt <= opts.tol_kkt && eq_viol <= opts.tol_eq && true_ineq <= opts.tol_ineq {
            status = SolveStatus::Optimal;
            break;
        }

        // Stalled-infeasibility detection.
        viol_hist.push(eq_viol.max(true_ineq));
        if iter >= 100 {
            let recent = viol_hist[iter - 50..].iter().cloned().fold(f64::INFINITY, f64::min);
            let prior = viol_hist[..=iter - 50].iter().cloned().fold(f64::INFINITY, f64::min);
            if recent.min(prior) > 1e3 * opts.tol_eq && prior < 10.0 * recent {
                status = SolveStatus::Infeasible;
                break;
            }
        }

        // Advance the barrier once the subproblem is loosely converged.
        let err_mu = (stat_inf / s_d).max(eq_viol).max(slack_res).max(comp_mu / s_c);
        if err_mu <= KAPPA_EPS * mu && mu > mu_floor {
            mu = mu_floor.max((0.2 * mu).min(mu.powf(1.5)));
        }

        // Condensed-system inputs at the (possibly updated) μ.
        let mut sigma_x = vec![0.0; n];
        let mut rtilde = vec![0.0; n];
        for i in 0..n {
            if !free[i] {
                continue;
            }
            let mut sig = 0.0;
            let mut rt = base[i];
            if lb_fin[i] {
                let d = x[i] - p.lower[i];
                sig += zl[i] / d;
                rt -= mu / d;
            }
            if ub_fin[i] {
                let d = p.upper[i] - x[i];
                sig += zu[i] / d;
                rt += mu / d;
            }
            sigma_x[i] = sig;
            rtilde[i] = rt;
        }
        let mut d_ineq = vec![0.0; m_i];
        let mut slack_residual = vec![0.0; m_i];
        for r in 0..m_i {
            if ineq_active[r] {
                d_ineq[r] = w[r] / s[r];
                slack_residual[r] = c_i[r] + s[r];
            }
        }

        // Direction, with regularization bumps on singular systems.
        let dir = loop {
            let input = KktInput {
                p,
                free: &free,
                x: &x,
                lam_eq: &lam_eq,
                w: &w,
                sigma_x: &sigma_x,
                d_ineq: &d_ineq,
                slack_res: &slack_residual,
                mu,
                rtilde_x: &rtilde,
                c_eq: &c_e,
                delta_w: delta,
                delta_c: delta.min(DELTA_C_MAX),
            };
            match solve_kkt(&layout, &input) {
                Some(d) => break d,
                None => {
                    delta *= 10.0;
                    if delta > DELTA_MAX {
                        status = stuck_status(eq_viol.max(true_ineq), opts);
                        break 'outer;
                    }
                }
            }
        };

        // Slack and bound-dual steps implied by the condensed solve.
        let mut ds = vec![0.0; m_i];
        for r in 0..m_i {
            if ineq_active[r] {
                // Δs = −(c + s) − a·Δx, recovered from Δw to avoid a second
                // Jacobian pass: Δw = d(a·Δx + rc) − w  ⇒  a·Δx = (Δw + w)/d − rc.
                let rc = slack_residual[r] + mu / w[r];
                let a_dx = (dir.dw[r] + w[r]) / d_ineq[r] - rc;
                ds[r] = -slack_residual[r] - a_dx;
            }
        }
        let mut dzl = vec![0.0; n];
        let mut dzu = vec![0.0; n];
        for i in 0..n {
            if lb_fin[i] {
                let d = x[i] - p.lower[i];
                dzl[i] = mu / d - zl[i] - (zl[i] / d) * dir.dx[i];
            }
            if ub_fin[i] {
                let d = p.upper[i] - x[i];
                dzu[i] = mu / d - zu[i] + (zu[i] / d) * dir.dx[i];
            }
        }

        // Fraction-to-boundary step limits.
        let tau = TAU_MIN.max(1.0 - mu);
        let mut alpha_pr: f64 = 1.0;
        for i in 0..n {
            if !free[i] {
                continue;
            }
            if dir.dx[i] < 0.0 && lb_fin[i] {
                alpha_pr = alpha_pr.min(tau * (x[i] - p.lower[i]) / -dir.dx[i]);
            }
            if dir.dx[i] > 0.0 && ub_fin[i] {
                alpha_pr = alpha_pr.min(tau * (p.upper[i] - x[i]) / dir.dx[i]);
            }
        }
        for r in 0..m_i {
            if ineq_active[r] && ds[r] < 0.0 {
                alpha_pr = alpha_pr.min(tau * s[r] / -ds[r]);
            }
        }
        let mut alpha_du: f64 = 1.0;
        for i in 0..n {
            if lb_fin[i] && dzl[i] < 0.0 {
                alpha_du = alpha_du.min(tau * zl[i] / -dzl[i]);
            }
            if ub_fin[i] && dzu[i] < 0.0 {
                alpha_du = alpha_du.min(tau * zu[i] / -dzu[i]);
            }
        }
        for r in 0..m_i {
            if ineq_active[r] && dir.dw[r] < 0.0 {
                alpha_du = alpha_du.min(tau * w[r] / -dir.dw[r]);
            }
        }

        // Penalty weight keeps the merit function exact for the new duals.
        let mut mult_inf: f64 = 0.0;
        for r in 0..m_e {
            if eq_active[r] {
                mult_inf = mult_inf.max((lam_eq[r] + dir.dlam_eq[r]).abs());
            }
        }
        for r in 0..m_i {
            if ineq_active[r] {
                mult_inf = mult_inf.max((w[r] + dir.dw[r]).abs());
            }
        }
        // The weight must dominate the current multipliers for the merit to
        // be exact, but holding on to a stale spike (for example from a wild
        // early dual step) forces needlessly tiny line-search steps later,
        // so decay toward the present multiplier scale instead of ratcheting.
        nu = (0.5 * nu).max(1.2 * mult_inf).max(1.0);

        // Backtracking line search on the merit function.
        let phi0 = merit(&x, &s, mu, nu);
        let mut accepted = None;
        let mut alpha = alpha_pr;
        for _ in 0..=MAX_BACKTRACK {
            let xt: Vec<f64> =
                (0..n).map(|i| x[i] + alpha * dir.dx[i]).collect();
            let st: Vec<f64> = (0..m_i)
                .map(|r| if ineq_active[r] { s[r] + alpha * ds[r] } else { s[r] })
                .collect();
            let phi_t = merit(&xt, &st, mu, nu);
            if phi_t.is_finite() && phi_t < phi0 {
                accepted = Some((xt, st, phi_t, alpha));
                break;
            }
            alpha *= 0.5;
        }
        // A feasible iterate where every primal step fails the decrease test
        // can be blocked by stale multipliers rather than a bad direction —
        // the clearest case being equalities that pin the primal point to a
        // locally unique feasible solution, leaving nothing for the merit
        // function to improve while the duals are still far from stationary.
        // Try the dual part of the step at the fixed primal point and keep
        // it only when it clearly reduces the dual error; an ordinary
        // rejection (say an ascent direction from an indefinite Hessian)
        // fails that test and falls through to the regularization bump.
        if accepted.is_none()
            && eq_viol <= 10.0 * opts.tol_eq
            && true_ineq <= opts.tol_ineq
            && slack_res <= 10.0 * opts.tol_eq.max(opts.tol_ineq)
        {
            let mut lam2 = lam_eq.clone();
            for r in 0..m_e {
                if eq_active[r] {
                    lam2[r] += dir.dlam_eq[r];
                }
            }
            let mut w2 = w.clone();
            for r in 0..m_i {
                if ineq_active[r] {
                    w2[r] = (w[r] + alpha_du * dir.dw[r])
                        .clamp(mu / (KAPPA_SIGMA * s[r]), mu * KAPPA_SIGMA / s[r]);
                }
            }
            let mut zl2 = zl.clone();
            let mut zu2 = zu.clone();
            for i in 0..n {
                if lb_fin[i] {
                    let d = x[i] - p.lower[i];
                    zl2[i] = (zl[i] + alpha_du * dzl[i])
                        .clamp(mu / (KAPPA_SIGMA * d), mu * KAPPA_SIGMA / d);
                }
                if ub_fin[i] {
                    let d = p.upper[i] - x[i];
                    zu2[i] = (zu[i] + alpha_du * dzu[i])
                        .clamp(mu / (KAPPA_SIGMA * d), mu * KAPPA_SIGMA / d);
                }
            }
            // Unscaled μ-subproblem error of a candidate multiplier set at
            // the current primal point.
            let dual_err = |lam: &[f64], w: &[f64], zl: &[f64], zu: &[f64]| -> f64 {
                let mut stat = grad_f.clone();
                for (r, row) in p.eq.iter().enumerate() {
                    if eq_active[r] && lam[r] != 0.0 {
                        row.add_gradient(&x, lam[r], &mut stat);
                    }
                }
                for (r, row) in p.ineq.iter().enumerate() {
                    if ineq_active[r] && w[r] != 0.0 {
                        row.add_gradient(&x, w[r], &mut stat);
                    }
                }
                let mut e: f64 = 0.0;
                for i in 0..n {
                    if free[i] {
                        e = e.max((stat[i] - zl[i] + zu[i]).abs());
                    }
                    if lb_fin[i] {
                        e = e.max(((x[i] - p.lower[i]) * zl[i] - mu).abs());
                    }
                    if ub_fin[i] {
                        e = e.max(((p.upper[i] - x[i]) * zu[i] - mu).abs());
                    }
                }
                for r in 0..m_i {
                    if ineq_active[r] {
                        e = e.max((s[r] * w[r] - mu).abs());
                    }
                }
                e
            };
            if dual_err(&lam2, &w2, &zl2, &zu2) <= 0.9 * dual_err(&lam_eq, &w, &zl, &zu) {
                lam_eq = lam2;
                w = w2;
                zl = zl2;
                zu = zu2;
                delta = (delta / 10.0).max(DELTA_BASE);
                if opts.record_trace {
                    trace.push((mu, phi0));
                }
                continue;
            }
        }
        let Some((xt, st, phi_t, alpha)) = accepted else {
            delta *= 10.0;
            if delta > DELTA_MAX {
                status = stuck_status(eq_viol.max(true_ineq), opts);
                break 'outer;
            }
            continue;
        };

        // Accept: primal and equality-dual by the line-search step,
        // barrier duals by their own fraction-to-boundary step.
        x = xt;
        s = st;
        for r in 0..m_e {
            if eq_active[r] {
                lam_eq[r] += alpha * dir.dlam_eq[r];
            }
        }
        for r in 0..m_i {
            if ineq_active[r] {
                w[r] += alpha_du * dir.dw[r];
            }
        }
        for i in 0..n {
            if lb_fin[i] {
                zl[i] += alpha_du * dzl[i];
                let d = x[i] - p.lower[i];
                zl[i] = zl[i].clamp(mu / (KAPPA_SIGMA * d), mu * KAPPA_SIGMA / d);
            }
            if ub_fin[i] {
                zu[i] += alpha_du * dzu[i];
                let d = p.upper[i] - x[i];
                zu[i] = zu[i].clamp(mu / (KAPPA_SIGMA * d), mu * KAPPA_SIGMA / d);
            }
        }
        for r in 0..m_i {
            if ineq_active[r] {
                w[r] = w[r].clamp(mu / (KAPPA_SIGMA * s[r]), mu * KAPPA_SIGMA / s[r]);
            }
        }
        delta = (delta / 10.0).max(DELTA_BASE);
        if opts.record_trace {
            trace.push((mu, phi_t));
        }
    }

    // Fresh evaluator pass for the reported numbers; Optimal must hold up.
    let eq_violation = p.eq_values(&x).iter().fold(0.0f64, |m, &c| m.max(c.abs()));
    let ineq_violation =
        p.ineq_values(&x).iter().fold(0.0f64, |m, &c| m.max(c.max(0.0)));
    if status == SolveStatus::Optimal
        && (eq_violation > opts.tol_eq || ineq_violation > opts.tol_ineq)
    {
        status = SolveStatus::MaxIterations;
    }
    RunResult {
        status,
        objective: p.objective_value(&x),
        x,
        eq_violation,
        ineq_violation,
        kkt_residual: last_kkt,
        iterations: iterations + 1,
        trace,
    }
}

#[cfg(test)]
mod tests {
    use super::super::{
        solve_nlp, BlockStructure, NlpProblem, QuadForm, SolveOptions, SolveStatus,
    };
    use approx::assert_relative_eq;

    fn unbounded(n: usize) -> (Vec<f64>, Vec<f64>) {
        (vec![f64::NEG_INFINITY; n], vec![f64::INFINITY; n])
    }

    #[test]
    fn unconstrained_quadratic_reaches_its_minimum() {
        // f = (x0 − 3)² + 2(x1 + 1)².
        let mut q = QuadForm::constant(9.0 + 2.0);
        q.push_linear(0, -6.0);
        q.push_linear(1, 4.0);
        q.push_quadratic(0, 0, 1.0);
        q.push_quadratic(1, 1, 2.0);
        let (lower, upper) = unbounded(2);
        let p = NlpProblem {
            n: 2,
            objective: q,
            obj_ramps: vec![],
            eq: vec![],
            ineq: vec![],
            lower,
            upper,
            x0: vec![0.0, 0.0],
            names: vec![],
            blocks: None,
        };
        let r = solve_nlp(&p, &SolveOptions::default());
        assert_eq!(r.status, SolveStatus::Optimal);
        assert_relative_eq!(r.x[0], 3.0, epsilon = 1e-6);
        assert_relative_eq!(r.x[1], -1.0, epsilon = 1e-6);
        assert!(r.objective.abs() < 1e-8);
    }

    #[test]
    fn bound_constrained_quadratic_stops_at_the_bound() {
        // min x² subject to x ≥ 1.
        let mut q = QuadForm::default();
        q.push_quadratic(0, 0, 1.0);
        let p = NlpProblem {
            n: 1,
            objective: q,
            obj_ramps: vec![],
            eq: vec![],
            ineq: vec![],
            lower: vec![1.0],
            upper: vec![f64::INFINITY],
            x0: vec![2.0],
            names: vec![],
            blocks: None,
        };
        let r = solve_nlp(&p, &SolveOptions::default());
        assert_eq!(r.status, SolveStatus::Optimal);
        assert_relative_eq!(r.x[0], 1.0, epsilon = 1e-6);
        assert_relative_eq!(r.objective, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn equality_constrained_sum_maximization_hits_the_circle() {
        // min −(x + y) subject to x² + y² = 2, box [−2, 2]² → x = y = 1.
        let mut obj = QuadForm::default();
        obj.push_linear(0, -1.0);
        obj.push_linear(1, -1.0);
        let mut circle = QuadForm::constant(-2.0);
        circle.push_quadratic(0, 0, 1.0);
        circle.push_quadratic(1, 1, 1.0);
        let p = NlpProblem {
            n: 2,
            objective: obj,
            obj_ramps: vec![],
            eq: vec![circle],
            ineq: vec![],
            lower: vec![-2.0, -2.0],
            upper: vec![2.0, 2.0],
            x0: vec![0.5, 0.5],
            names: vec![],
            blocks: None,
        };
        let r = solve_nlp(&p, &SolveOptions::default());
        assert_eq!(r.status, SolveStatus::Optimal);
        assert_relative_eq!(r.x[0], 1.0, epsilon = 1e-5);
        assert_relative_eq!(r.x[1], 1.0, epsilon = 1e-5);
    }

    #[test]
    fn inequality_constraint_binds_at_the_optimum() {
        // min (x+1)² subject to x ≥ 0 expressed as −x ≤ 0.
        let mut obj = QuadForm::constant(1.0);
        obj.push_linear(0, 2.0);
        obj.push_quadratic(0, 0, 1.0);
        let mut g = QuadForm::default();
        g.push_linear(0, -1.0);
        let (lower, upper) = unbounded(1);
        let p = NlpProblem {
            n: 1,
            objective: obj,
            obj_ramps: vec![],
            eq: vec![],
            ineq: vec![g],
            lower,
            upper,
            x0: vec![3.0],
            names: vec![],
            blocks: None,
        };
        let r = solve_nlp(&p, &SolveOptions::default());
        assert_eq!(r.status, SolveStatus::Optimal);
        assert_relative_eq!(r.x[0], 0.0, epsilon = 1e-5);
        assert_relative_eq!(r.objective, 1.0, epsilon = 1e-5);
    }

    #[test]
    fn contradictory_equalities_are_reported_infeasible() {
        // x = 0 and x = 1 cannot both hold.
        let mut a = QuadForm::default();
        a.push_linear(0, 1.0);
        let mut b = QuadForm::constant(-1.0);
        b.push_linear(0, 1.0);
        let (lower, upper) = unbounded(1);
        let p = NlpProblem {
            n: 1,
            objective: QuadForm::default(),
            obj_ramps: vec![],
            eq: vec![a, b],
            ineq: vec![],
            lower,
            upper,
            x0: vec![0.5],
            names: vec![],
            blocks: None,
        };
        let r = solve_nlp(&p, &SolveOptions { n_starts: 1, ..Default::default() });
        assert_eq!(r.status, SolveStatus::Infeasible);
    }

    #[test]
    fn block_structured_chain_matches_dense_solve() {
        // Two steps, one storage variable each, linear coupling E1 − E0 = −d0.
        // min Σ (E_t − target_t)² with a chain constraint; solve blocked and
        // dense, answers must agree.
        let build = |blocks: Option<BlockStructure>| {
            let mut obj = QuadForm::constant(0.25 + 0.64);
            obj.push_linear(0, -1.0); // (E0 − 0.5)²
            obj.push_quadratic(0, 0, 1.0);
            obj.push_linear(1, -1.6); // (E1 − 0.8)²
            obj.push_quadratic(1, 1, 1.0);
            let mut chain = QuadForm::constant(-0.1);
            chain.push_linear(1, 1.0);
            chain.push_linear(0, -1.0); // E1 − E0 = 0.1
            NlpProblem {
                n: 2,
                objective: obj,
                obj_ramps: vec![],
                eq: vec![chain],
                ineq: vec![],
                lower: vec![0.0, 0.0],
                upper: vec![1.0, 1.0],
                x0: vec![0.5, 0.5],
                names: vec![],
                blocks,
            }
        };
        let dense = solve_nlp(&build(None), &SolveOptions::default());
        let blocked = solve_nlp(
            &build(Some(BlockStructure::from_ranges(&[0..1, 1..2]))),
            &SolveOptions::default(),
        );
        assert_eq!(dense.status, SolveStatus::Optimal);
        assert_eq!(blocked.status, SolveStatus::Optimal);
        assert_relative_eq!(dense.x[0], blocked.x[0], epsilon = 1e-7);
        assert_relative_eq!(dense.x[1], blocked.x[1], epsilon = 1e-7);
        // Analytic optimum: minimize (E0−0.5)² + (E0−0.7)² → E0 = 0.6.
        assert_relative_eq!(blocked.x[0], 0.6, epsilon = 1e-5);
        assert_relative_eq!(blocked.x[1], 0.7, epsilon = 1e-5);
    }

    #[test]
    fn fixed_variables_are_held_at_their_bound() {
        // x1 is pinned to 2; minimize (x0 − x1)².
        let mut obj = QuadForm::default();
        obj.push_quadratic(0, 0, 1.0);
        obj.push_quadratic(1, 1, 1.0);
        obj.push_quadratic(0, 1, -2.0);
        let p = NlpProblem {
            n: 2,
            objective: obj,
            obj_ramps: vec![],
            eq: vec![],
            ineq: vec![],
            lower: vec![-10.0, 2.0],
            upper: vec![10.0, 2.0],
            x0: vec![0.0, 2.0],
            names: vec![],
            blocks: None,
        };
        let r = solve_nlp(&p, &SolveOptions::default());
        assert_eq!(r.status, SolveStatus::Optimal);
        assert_relative_eq!(r.x[1], 2.0);
        assert_relative_eq!(r.x[0], 2.0, epsilon = 1e-5);
    }

    #[test]
    fn solves_are_deterministic_across_repeat_calls() {
        let mut obj = QuadForm::default();
        obj.push_linear(0, -1.0);
        obj.push_linear(1, -1.0);
        let mut circle = QuadForm::constant(-2.0);
        circle.push_quadratic(0, 0, 1.0);
        circle.push_quadratic(1, 1, 1.0);
        let p = NlpProblem {
            n: 2,
            objective: obj,
            obj_ramps: vec![],
            eq: vec![circle],
            ineq: vec![],
            lower: vec![-2.0, -2.0],
            upper: vec![2.0, 2.0],
            x0: vec![0.5, 0.5],
            names: vec![],
            blocks: None,
        };
        let opts = SolveOptions { record_trace: true, seed: 7, ..Default::default() };
        let a = solve_nlp(&p, &opts);
        let b = solve_nlp(&p, &opts);
        assert_eq!(a.x, b.x);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn merit_trace_is_monotone_at_fixed_barrier_weight() {
        // Box-bounded quadratic: no constraint penalty, so within one μ the
        // accepted merit values must strictly decrease.
        let mut q = QuadForm::default();
        q.push_quadratic(0, 0, 1.0);
        q.push_linear(0, -0.2);
        let p = NlpProblem {
            n: 1,
            objective: q,
            obj_ramps: vec![],
            eq: vec![],
            ineq: vec![],
            lower: vec![0.0],
            upper: vec![4.0],
            x0: vec![3.5],
            names: vec![],
            blocks: None,
        };
        let opts = SolveOptions { record_trace: true, n_starts: 1, ..Default::default() };
        let r = solve_nlp(&p, &opts);
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!(r.trace.len() >= 2);
        for pair in r.trace.windows(2) {
            if pair[0].0 == pair[1].0 {
                assert!(
                    pair[1].1 < pair[0].1,
                    "merit rose within a barrier phase: {pair:?}"
                );
            }
        }
    }
}
