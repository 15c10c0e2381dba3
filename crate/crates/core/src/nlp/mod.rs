//! Smooth nonlinear-program carrier and solver entry points.
//!
//! Problems are expressed as sums of sparse quadratic forms: the objective,
//! every equality constraint (`= 0`), and every inequality constraint
//! (`≤ 0`) are each a [`QuadForm`], with optional piecewise-linear
//! [`RampTerm`]s in the objective and box bounds on the variables. Quadratic
//! data keeps all derivatives exact and cheap: gradients are linear in `x`
//! and Hessians are constant.
//!
//! The solver ([`solve_nlp`]) is a primal-dual interior-point method with a
//! monotone barrier schedule, an ℓ1 exact-penalty merit line search, and
//! inertia-free diagonal regularization. Problems that declare a
//! [`BlockStructure`] (one block per time step with linear coupling rows)
//! are factorized block-by-block with a Schur complement over the coupling
//! multipliers, which keeps multi-step horizons tractable.

mod ipm;
mod linalg;

use thiserror::Error;

/// Sparse polynomial of total degree ≤ 2:
/// `constant + Σ linear + Σ quadratic`, with the quadratic list holding the
/// coefficient of the *product* `x_i·x_j` once per unordered pair `(i ≤ j)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuadForm {
    /// Constant term.
    pub constant: f64,
    /// `(variable, coefficient)` linear terms.
    pub linear: Vec<(usize, f64)>,
    /// `(i, j, coefficient)` with `i ≤ j`: the term `c · x_i · x_j`.
    pub quadratic: Vec<(usize, usize, f64)>,
}

impl QuadForm {
    /// A form holding only a constant.
    pub fn constant(c: f64) -> Self {
        QuadForm { constant: c, ..Default::default() }
    }

    /// Adds `c · x_v`.
    pub fn push_linear(&mut self, v: usize, c: f64) {
        if c != 0.0 {
            self.linear.push((v, c));
        }
    }

    /// Adds `c · x_i · x_j` (order normalized internally).
    pub fn push_quadratic(&mut self, i: usize, j: usize, c: f64) {
        if c != 0.0 {
            self.quadratic.push((i.min(j), i.max(j), c));
        }
    }

    /// Value at `x`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut v = self.constant;
        for &(i, c) in &self.linear {
            v += c * x[i];
        }
        for &(i, j, c) in &self.quadratic {
            v += c * x[i] * x[j];
        }
        v
    }

    /// Accumulates `scale · ∇(self)` into `out` (dense).
    pub fn add_gradient(&self, x: &[f64], scale: f64, out: &mut [f64]) {
        for &(i, c) in &self.linear {
            out[i] += scale * c;
        }
        for &(i, j, c) in &self.quadratic {
            if i == j {
                out[i] += scale * 2.0 * c * x[i];
            } else {
                out[i] += scale * c * x[j];
                out[j] += scale * c * x[i];
            }
        }
    }

    /// Sparse gradient at `x`: sorted, duplicate-free `(variable, ∂/∂x)`.
    pub fn grad_entries(&self, x: &[f64], scratch: &mut Vec<(usize, f64)>) {
        scratch.clear();
        for &(i, c) in &self.linear {
            scratch.push((i, c));
        }
        for &(i, j, c) in &self.quadratic {
            if i == j {
                scratch.push((i, 2.0 * c * x[i]));
            } else {
                scratch.push((i, c * x[j]));
                scratch.push((j, c * x[i]));
            }
        }
        scratch.sort_by_key(|&(v, _)| v);
        scratch.dedup_by(|b, a| {
            if a.0 == b.0 {
                a.1 += b.1;
                true
            } else {
                false
            }
        });
    }

    /// Variables the form depends on, sorted and unique.
    pub fn support(&self) -> Vec<usize> {
        let mut vars: Vec<usize> = self.linear.iter().map(|&(i, _)| i).collect();
        for &(i, j, _) in &self.quadratic {
            vars.push(i);
            vars.push(j);
        }
        vars.sort_unstable();
        vars.dedup();
        vars
    }

    /// True when the form has no quadratic terms.
    pub fn is_linear(&self) -> bool {
        self.quadratic.is_empty()
    }
}

/// Objective-only piecewise-linear term `height · min(1, x_v / eps)`:
/// a commitment charge that ramps in over `[0, eps]` and saturates above.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RampTerm {
    /// Variable the ramp watches.
    pub var: usize,
    /// Saturation threshold (> 0), in the variable's units.
    pub eps: f64,
    /// Charge applied at and above saturation.
    pub height: f64,
}

impl RampTerm {
    /// Value at `x`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.height * (x[self.var] / self.eps).min(1.0)
    }

    /// Derivative with respect to the watched variable at `x`
    /// (the kink at `eps` takes the saturated side).
    pub fn slope(&self, x: &[f64]) -> f64 {
        if x[self.var] < self.eps {
            self.height / self.eps
        } else {
            0.0
        }
    }
}

/// Per-time-step variable partition for block-structured problems.
///
/// Every variable belongs to exactly one block. The solver factorizes each
/// block independently when, additionally, every inequality and every
/// nonlinear equality touches a single block, and every cross-block
/// equality is linear and touches exactly two *adjacent* blocks (the usual
/// shape of storage dynamics linking consecutive steps). Problems that
/// break those rules are solved unblocked.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockStructure {
    /// Number of blocks.
    pub n_blocks: usize,
    /// Block id per variable.
    pub var_block: Vec<usize>,
}

impl BlockStructure {
    /// Builds the partition from contiguous variable ranges, one per block
    /// in order: `ranges[b]` is the half-open index range of block `b`.
    pub fn from_ranges(ranges: &[std::ops::Range<usize>]) -> Self {
        let n: usize = ranges.iter().map(|r| r.len()).sum();
        let mut var_block = vec![0usize; n];
        for (b, r) in ranges.iter().enumerate() {
            for v in r.clone() {
                var_block[v] = b;
            }
        }
        BlockStructure { n_blocks: ranges.len(), var_block }
    }
}

/// A smooth nonlinear program: minimize `objective + ramps` subject to
/// `eq = 0`, `ineq ≤ 0`, and `lower ≤ x ≤ upper`.
///
/// Bounds may be infinite; a variable with `lower == upper` is treated as
/// fixed and eliminated inside the solver. `names` labels variables in
/// diagnostics only.
#[derive(Debug, Clone, PartialEq)]
pub struct NlpProblem {
    /// Number of variables.
    pub n: usize,
    /// Objective quadratic part.
    pub objective: QuadForm,
    /// Objective piecewise-linear commitment charges.
    pub obj_ramps: Vec<RampTerm>,
    /// Equality constraints, each `= 0`.
    pub eq: Vec<QuadForm>,
    /// Inequality constraints, each `≤ 0`.
    pub ineq: Vec<QuadForm>,
    /// Lower variable bounds (may be `-inf`).
    pub lower: Vec<f64>,
    /// Upper variable bounds (may be `+inf`).
    pub upper: Vec<f64>,
    /// Initial point (clipped strictly inside the box by the solver).
    pub x0: Vec<f64>,
    /// Variable labels for diagnostics.
    pub names: Vec<String>,
    /// Optional per-step partition enabling the block factorization.
    pub blocks: Option<BlockStructure>,
}

impl NlpProblem {
    /// Objective value at `x` (quadratic part plus ramps).
    pub fn objective_value(&self, x: &[f64]) -> f64 {
        let mut v = self.objective.eval(x);
        for r in &self.obj_ramps {
            v += r.eval(x);
        }
        v
    }

    /// Dense objective gradient at `x`.
    pub fn objective_gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.n];
        self.objective.add_gradient(x, 1.0, &mut g);
        for r in &self.obj_ramps {
            g[r.var] += r.slope(x);
        }
        g
    }

    /// Equality constraint values at `x`.
    pub fn eq_values(&self, x: &[f64]) -> Vec<f64> {
        self.eq.iter().map(|c| c.eval(x)).collect()
    }

    /// Inequality constraint values at `x` (feasible when ≤ 0).
    pub fn ineq_values(&self, x: &[f64]) -> Vec<f64> {
        self.ineq.iter().map(|c| c.eval(x)).collect()
    }

    /// Worst constraint violation at `x`: `max(|eq|, max(ineq, 0))`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut v: f64 = 0.0;
        for c in &self.eq {
            v = v.max(c.eval(x).abs());
        }
        for c in &self.ineq {
            v = v.max(c.eval(x).max(0.0));
        }
        v
    }
}

/// Solver options.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveOptions {
    /// Equality feasibility tolerance (scaled units).
    pub tol_eq: f64,
    /// Inequality feasibility tolerance (scaled units).
    pub tol_ineq: f64,
    /// First-order (KKT) tolerance.
    pub tol_kkt: f64,
    /// Iteration cap per start.
    pub max_iter: usize,
    /// Number of starts (1 = initial point only; extra starts blend toward
    /// the box midpoint and apply seeded perturbations).
    pub n_starts: usize,
    /// Seed for the perturbed starts.
    pub seed: u64,
    /// Record `(μ, merit)` per accepted iterate into the report trace.
    pub record_trace: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol_eq: 1e-6,
            tol_ineq: 1e-6,
            tol_kkt: 1e-6,
            max_iter: 500,
            n_starts: 3,
            seed: 0,
            record_trace: false,
        }
    }
}

/// Terminal status of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    /// All tolerances met; the returned point is first-order optimal.
    Optimal,
    /// Iteration cap reached before the tolerances were met.
    MaxIterations,
    /// Constraint violation stagnated far from feasibility.
    Infeasible,
    /// Linear algebra or line search failed beyond recovery.
    NumericalFailure,
}

/// Outcome of [`solve_nlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    /// Terminal status; `Optimal` guarantees the feasibility and KKT
    /// tolerances at `x` (re-verified by a fresh evaluator pass).
    pub status: SolveStatus,
    /// Final point.
    pub x: Vec<f64>,
    /// Objective value at `x`.
    pub objective: f64,
    /// Infinity norm of equality violations at `x`.
    pub eq_violation: f64,
    /// Infinity norm of positive inequality parts at `x`.
    pub ineq_violation: f64,
    /// Scaled first-order residual at `x`.
    pub kkt_residual: f64,
    /// Iterations spent (summed over the winning start only).
    pub iterations: usize,
    /// Which start produced the result.
    pub start_index: usize,
    /// Wall-clock time for the whole call (all starts).
    pub wall_time: std::time::Duration,
    /// `(μ, merit)` per accepted iterate, when requested.
    pub trace: Vec<(f64, f64)>,
}

/// Construction-time validation errors for [`NlpProblem`].
#[derive(Debug, Error)]
pub enum NlpError {
    /// A bound pair has `lower > upper`.
    #[error("variable {0} has lower bound above upper bound")]
    InvertedBounds(usize),
    /// A dimension disagrees with `n`.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Validates internal consistency of a problem (dimensions and bounds).
pub fn validate_problem(p: &NlpProblem) -> Result<(), NlpError> {
    if p.lower.len() != p.n || p.upper.len() != p.n || p.x0.len() != p.n {
        return Err(NlpError::DimensionMismatch(format!(
            "bounds/x0 length vs n = {}",
            p.n
        )));
    }
    if !p.names.is_empty() && p.names.len() != p.n {
        return Err(NlpError::DimensionMismatch("names length".into()));
    }
    for i in 0..p.n {
        if p.lower[i] > p.upper[i] {
            return Err(NlpError::InvertedBounds(i));
        }
    }
    if let Some(b) = &p.blocks {
        if b.var_block.len() != p.n {
            return Err(NlpError::DimensionMismatch("block partition length".into()));
        }
    }
    Ok(())
}

/// Solves the program; never panics on non-convergence — failure modes are
/// carried by [`SolveReport::status`].
///
/// Runs `n_starts` interior-point solves from deterministically generated
/// starting points and keeps the best result: feasible statuses first, then
/// lowest objective, then lowest KKT residual, then lowest start index.
/// Deterministic given identical inputs and options.
pub fn solve_nlp(p: &NlpProblem, opts: &SolveOptions) -> SolveReport {
    ipm::solve(p, opts)
}

/// Result of a gradient audit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientReport {
    /// Max relative error over objective partials.
    pub objective_max_rel_err: f64,
    /// Max relative error over all equality-row partials.
    pub eq_max_rel_err: f64,
    /// Max relative error over all inequality-row partials.
    pub ineq_max_rel_err: f64,
}

impl GradientReport {
    /// Largest error across all evaluators.
    pub fn max_rel_err(&self) -> f64 {
        self.objective_max_rel_err.max(self.eq_max_rel_err).max(self.ineq_max_rel_err)
    }
}

/// Relative disagreement between a central finite difference and an
/// analytic partial, on a `max(1, |·|)` scale.
fn rel_err(fd: f64, analytic: f64) -> f64 {
    (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1.0)
}

/// Audits an arbitrary value/gradient pair by dense central differences.
///
/// `h_scale` sets the step as `h_scale · max(1, |x_i|)` per coordinate.
/// Returns the maximum relative error over all coordinates. Intended for
/// small problems and fault-injection tests; [`check_gradients`] is the
/// structured fast path.
pub fn audit_gradient(
    f: impl Fn(&[f64]) -> f64,
    grad: &[f64],
    x: &[f64],
    h_scale: f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = h_scale * x[i].abs().max(1.0);
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        worst = worst.max(rel_err((fp - fm) / (2.0 * h), grad[i]));
    }
    worst
}

/// Checks every analytic derivative in the problem against central finite
/// differences at `point` (step `1e-6 · max(1, |x_i|)`).
///
/// Differences are evaluated termwise over each form's support — exact
/// algebraic localization, not an approximation — which makes the audit
/// linear in the total number of terms. Ramp variables within ten steps of
/// their kink are skipped (the two-sided difference is undefined across a
/// kink).
pub fn check_gradients(p: &NlpProblem, point: &[f64]) -> GradientReport {
    let h_of = |xi: f64| 1e-6 * xi.abs().max(1.0);

    // One form's worst coordinate error at `point`.
    let audit_form = |form: &QuadForm| -> f64 {
        let mut x = point.to_vec();
        let mut entries = Vec::new();
        form.grad_entries(&x, &mut entries);
        let mut worst: f64 = 0.0;
        for &(v, analytic) in &entries {
            let h = h_of(point[v]);
            let orig = x[v];
            x[v] = orig + h;
            let fp = form.eval(&x);
            x[v] = orig - h;
            let fm = form.eval(&x);
            x[v] = orig;
            worst = worst.max(rel_err((fp - fm) / (2.0 * h), analytic));
        }
        worst
    };

    let mut report = GradientReport::default();
    report.objective_max_rel_err = audit_form(&p.objective);
    // Ramp terms: compare slopes away from the kink.
    for r in &p.obj_ramps {
        let xi = point[r.var];
        let h = h_of(xi);
        if (xi - r.eps).abs() <= 10.0 * h {
            continue;
        }
        let fd = (r.eval_at(xi + h) - r.eval_at(xi - h)) / (2.0 * h);
        report.objective_max_rel_err = report.objective_max_rel_err.max(rel_err(fd, r.slope_at(xi)));
    }
    for c in &p.eq {
        report.eq_max_rel_err = report.eq_max_rel_err.max(audit_form(c));
    }
    for c in &p.ineq {
        report.ineq_max_rel_err = report.ineq_max_rel_err.max(audit_form(c));
    }
    report
}

impl RampTerm {
    fn eval_at(&self, xi: f64) -> f64 {
        self.height * (xi / self.eps).min(1.0)
    }

    fn slope_at(&self, xi: f64) -> f64 {
        if xi < self.eps {
            self.height / self.eps
        } else {
            0.0
        }
    }
}
