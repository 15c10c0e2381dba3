//! KKT layout planning and the block-bordered Newton-step solve.
//!
//! Each interior-point iteration reduces to one symmetric indefinite linear
//! system. When the problem declares a per-step block structure, the system
//! is block diagonal apart from a thin border of linear coupling rows
//! (storage dynamics linking consecutive steps): every block is factorized
//! densely on its own and the coupling multipliers are recovered through a
//! small Schur complement. Problems without usable structure are solved as
//! a single block.

use nalgebra::{DMatrix, DVector};

use super::{NlpProblem, QuadForm};

/// Where an equality row sits in the factorization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum EqPlace {
    /// Appears in one block's local KKT system (local row index).
    Local(usize),
    /// Linear row spanning two adjacent blocks; handled via the Schur border.
    Coupling(usize),
    /// No free-variable support; excluded from the linear algebra.
    Dropped,
}

/// Where an inequality row sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum IneqPlace {
    /// Belongs to one block.
    Block(usize),
    /// No free-variable support; excluded from the linear algebra.
    Dropped,
}

/// Source of a precomputed Hessian term (what scales it at assembly time).
#[derive(Debug, Clone, Copy)]
enum HessSrc {
    Obj,
    Eq(usize),
    Ineq(usize),
}

/// Static factorization plan for one problem and free-variable mask.
pub(super) struct Layout {
    pub n_blocks: usize,
    /// Free variables per block, in ascending order.
    pub block_vars: Vec<Vec<usize>>,
    /// Variable → local column (valid for free variables only).
    col_of: Vec<usize>,
    /// Variable → block (valid for free variables only).
    blk_of_var: Vec<usize>,
    /// Local equality rows per block (problem row ids).
    pub block_eq: Vec<Vec<usize>>,
    /// Coupling equality rows (problem row ids) in border order.
    pub coupling: Vec<usize>,
    /// Placement per equality row.
    pub eq_place: Vec<EqPlace>,
    /// Inequality rows per block (problem row ids).
    pub block_ineq: Vec<Vec<usize>>,
    /// Placement per inequality row.
    pub ineq_place: Vec<IneqPlace>,
    /// Per block: (col_i, col_j, value, source) Hessian terms, `col_i ≤ col_j`.
    hess: Vec<Vec<(usize, usize, f64, HessSrc)>>,
    /// Blocks each coupling row touches.
    coupling_blocks: Vec<Vec<usize>>,
}

/// Free-variable support of a form, mapped through the mask.
fn free_support(form: &QuadForm, free: &[bool]) -> Vec<usize> {
    form.support().into_iter().filter(|&v| free[v]).collect()
}

impl Layout {
    /// Plans the factorization. Falls back to a single block whenever the
    /// declared structure breaks an assumption (cross-block inequality or
    /// objective curvature, nonlinear or non-adjacent coupling row).
    pub(super) fn plan(p: &NlpProblem, free: &[bool]) -> Layout {
        if let Some(b) = &p.blocks {
            if let Some(layout) = Layout::try_plan(p, free, b.n_blocks, &b.var_block) {
                return layout;
            }
        }
        let single = vec![0usize; p.n];
        Layout::try_plan(p, free, 1, &single)
            .expect("single-block layout is always valid")
    }

    fn try_plan(
        p: &NlpProblem,
        free: &[bool],
        n_blocks: usize,
        var_block: &[usize],
    ) -> Option<Layout> {
        // Objective curvature must stay inside a block.
        for &(i, j, _) in &p.objective.quadratic {
            if free[i] && free[j] && var_block[i] != var_block[j] {
                return None;
            }
        }

        let mut block_vars = vec![Vec::new(); n_blocks];
        for v in 0..p.n {
            if free[v] {
                block_vars[var_block[v]].push(v);
            }
        }
        let mut col_of = vec![usize::MAX; p.n];
        for vars in &block_vars {
            for (c, &v) in vars.iter().enumerate() {
                col_of[v] = c;
            }
        }

        let mut block_eq = vec![Vec::new(); n_blocks];
        let mut coupling = Vec::new();
        let mut coupling_blocks = Vec::new();
        let mut eq_place = Vec::with_capacity(p.eq.len());
        for (r, row) in p.eq.iter().enumerate() {
            let support = free_support(row, free);
            let mut touched: Vec<usize> = support.iter().map(|&v| var_block[v]).collect();
            touched.sort_unstable();
            touched.dedup();
            match touched.len() {
                0 => eq_place.push(EqPlace::Dropped),
                1 => {
                    let b = touched[0];
                    // Any curvature must live inside this block too.
                    for &(i, j, _) in &row.quadratic {
                        if free[i] && free[j] && (var_block[i] != b || var_block[j] != b) {
                            return None;
                        }
                    }
                    eq_place.push(EqPlace::Local(block_eq[b].len()));
                    block_eq[b].push(r);
                }
                2 if touched[1] == touched[0] + 1 && row.is_linear() => {
                    eq_place.push(EqPlace::Coupling(coupling.len()));
                    coupling.push(r);
                    coupling_blocks.push(touched);
                }
                _ => return None,
            }
        }

        let mut block_ineq = vec![Vec::new(); n_blocks];
        let mut ineq_place = Vec::with_capacity(p.ineq.len());
        for (r, row) in p.ineq.iter().enumerate() {
            let support = free_support(row, free);
            let mut touched: Vec<usize> = support.iter().map(|&v| var_block[v]).collect();
            touched.sort_unstable();
            touched.dedup();
            match touched.len() {
                0 => ineq_place.push(IneqPlace::Dropped),
                1 => {
                    ineq_place.push(IneqPlace::Block(touched[0]));
                    block_ineq[touched[0]].push(r);
                }
                _ => return None,
            }
        }

        // Precompute Hessian terms per block in local coordinates.
        let mut hess = vec![Vec::new(); n_blocks];
        let push_quad = |form: &QuadForm, src: HessSrc, hess: &mut Vec<Vec<_>>| {
            for &(i, j, c) in &form.quadratic {
                if free[i] && free[j] {
                    let b = var_block[i];
                    let (ci, cj) = (col_of[i], col_of[j]);
                    let h = if i == j { 2.0 * c } else { c };
                    hess[b].push((ci.min(cj), ci.max(cj), h, src));
                }
            }
        };
        push_quad(&p.objective, HessSrc::Obj, &mut hess);
        for (r, row) in p.eq.iter().enumerate() {
            if matches!(eq_place[r], EqPlace::Local(_)) {
                push_quad(row, HessSrc::Eq(r), &mut hess);
            }
        }
        for (r, row) in p.ineq.iter().enumerate() {
            if matches!(ineq_place[r], IneqPlace::Block(_)) {
                push_quad(row, HessSrc::Ineq(r), &mut hess);
            }
        }

        Some(Layout {
            n_blocks,
            block_vars,
            col_of,
            blk_of_var: var_block.to_vec(),
            block_eq,
            coupling,
            eq_place,
            block_ineq,
            ineq_place,
            hess,
            coupling_blocks,
        })
    }

}

/// Per-iteration inputs to the condensed Newton solve.
///
/// Inequality rows are pre-eliminated: each contributes a rank-one term
/// `d_j · a_j a_jᵀ` to its block and `−d_j · rc_j · a_j` to the right-hand
/// side, where `a_j` is the row gradient. Bound barriers appear through the
/// diagonal `sigma_x` and through `rtilde_x` (stationarity with bound duals
/// replaced by their barrier targets).
pub(super) struct KktInput<'a> {
    pub p: &'a NlpProblem,
    pub free: &'a [bool],
    pub x: &'a [f64],
    /// Current equality multipliers (scales local-row Hessians).
    pub lam_eq: &'a [f64],
    /// Current inequality multipliers `w` (scales inequality Hessians).
    pub w: &'a [f64],
    /// Bound-barrier diagonal per variable.
    pub sigma_x: &'a [f64],
    /// `w_j / s_j` per inequality.
    pub d_ineq: &'a [f64],
    /// `c_j + s_j` per inequality.
    pub slack_res: &'a [f64],
    /// Barrier weight (forms the inequality shift `rc_j = c_j + s_j + μ/w_j`).
    pub mu: f64,
    /// `∇f + J_Eᵀ λ_E − μ/(x−l) + μ/(u−x)` per variable.
    pub rtilde_x: &'a [f64],
    /// Equality values at `x`.
    pub c_eq: &'a [f64],
    /// Primal diagonal regularization (convexifies indefinite curvature).
    pub delta_w: f64,
    /// Constraint-dual regularization (guards rank-deficient rows).
    pub delta_c: f64,
}

/// Newton direction in the primal-dual space.
pub(super) struct Direction {
    pub dx: Vec<f64>,
    pub dlam_eq: Vec<f64>,
    /// Full step for the inequality multipliers `w` (already includes `−w`).
    pub dw: Vec<f64>,
}

/// Solves the condensed KKT system; `None` signals a singular factorization
/// (caller bumps the regularization and retries).
pub(super) fn solve_kkt(layout: &Layout, inp: &KktInput) -> Option<Direction> {
    let p = inp.p;
    let n_blocks = layout.n_blocks;
    let mut scratch: Vec<(usize, f64)> = Vec::new();

    // Assemble and factor each block; keep factors and particular solutions.
    let mut factors: Vec<Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>> =
        Vec::with_capacity(n_blocks);
    let mut u0: Vec<DVector<f64>> = Vec::with_capacity(n_blocks);
    let mut dims: Vec<(usize, usize)> = Vec::with_capacity(n_blocks);

    for b in 0..n_blocks {
        let vars = &layout.block_vars[b];
        let eqs = &layout.block_eq[b];
        let nv = vars.len();
        let ne = eqs.len();
        let dim = nv + ne;
        dims.push((nv, ne));
        if dim == 0 {
            factors.push(None);
            u0.push(DVector::zeros(0));
            continue;
        }
        let mut k = DMatrix::<f64>::zeros(dim, dim);
        let mut rhs = DVector::<f64>::zeros(dim);

        // Lagrangian Hessian.
        for &(ci, cj, h, src) in &layout.hess[b] {
            let scale = match src {
                HessSrc::Obj => 1.0,
                HessSrc::Eq(r) => inp.lam_eq[r],
                HessSrc::Ineq(r) => inp.w[r],
            };
            k[(ci, cj)] += scale * h;
            if ci != cj {
                k[(cj, ci)] += scale * h;
            }
        }
        // Barrier diagonal and primal regularization.
        for (c, &v) in vars.iter().enumerate() {
            k[(c, c)] += inp.sigma_x[v] + inp.delta_w;
            rhs[c] = -inp.rtilde_x[v];
        }
        // Eliminated inequality rows: rank-one terms plus rhs shifts.
        for &r in &layout.block_ineq[b] {
            p.ineq[r].grad_entries(inp.x, &mut scratch);
            let d = inp.d_ineq[r];
            let rc = inp.slack_res[r] + inp.mu / inp.w[r];
            let entries: Vec<(usize, f64)> = scratch
                .iter()
                .filter(|&&(v, _)| inp.free[v])
                .map(|&(v, g)| (layout.col_of[v], g))
                .collect();
            for &(c1, g1) in &entries {
                rhs[c1] -= d * rc * g1;
                for &(c2, g2) in &entries {
                    k[(c1, c2)] += d * g1 * g2;
                }
            }
        }
        // Local equality rows.
        for (lr, &r) in eqs.iter().enumerate() {
            p.eq[r].grad_entries(inp.x, &mut scratch);
            for &(v, g) in scratch.iter().filter(|&&(v, _)| inp.free[v]) {
                let c = layout.col_of[v];
                k[(nv + lr, c)] = g;
                k[(c, nv + lr)] = g;
            }
            k[(nv + lr, nv + lr)] = -inp.delta_c;
            rhs[nv + lr] = -inp.c_eq[r];
        }

        let lu = k.lu();
        let sol = lu.solve(&rhs)?;
        u0.push(sol);
        factors.push(Some(lu));
    }

    // Schur complement over the coupling rows.
    let m_c = layout.coupling.len();
    let mut y = DVector::<f64>::zeros(m_c);
    // Border columns per coupling row, per touched block.
    let mut border: Vec<Vec<(usize, DVector<f64>, DVector<f64>)>> = Vec::with_capacity(m_c);
    if m_c > 0 {
        for (cr, &r) in layout.coupling.iter().enumerate() {
            p.eq[r].grad_entries(inp.x, &mut scratch);
            let mut per_block = Vec::new();
            for &b in &layout.coupling_blocks[cr] {
                let (nv, ne) = dims[b];
                let mut col = DVector::<f64>::zeros(nv + ne);
                for &(v, g) in scratch.iter().filter(|&&(v, _)| inp.free[v]) {
                    if layout.blk_of_var[v] == b {
                        col[layout.col_of[v]] = g;
                    }
                }
                let z = factors[b].as_ref()?.solve(&col)?;
                per_block.push((b, col, z));
            }
            border.push(per_block);
        }
        let mut s = DMatrix::<f64>::zeros(m_c, m_c);
        let mut rhs_s = DVector::<f64>::zeros(m_c);
        for r1 in 0..m_c {
            rhs_s[r1] = inp.c_eq[layout.coupling[r1]];
            for &(b, ref col, _) in &border[r1] {
                rhs_s[r1] += col.dot(&u0[b]);
            }
            for r2 in 0..m_c {
                let mut acc = 0.0;
                for &(b1, ref col1, _) in &border[r1] {
                    for &(b2, _, ref z2) in &border[r2] {
                        if b1 == b2 {
                            acc += col1.dot(z2);
                        }
                    }
                }
                s[(r1, r2)] = acc;
            }
            s[(r1, r1)] += inp.delta_c;
        }
        y = s.lu().solve(&rhs_s)?;
    }

    // Back-substitute block solutions.
    let mut dx = vec![0.0; p.n];
    let mut dlam_eq = vec![0.0; p.eq.len()];
    for b in 0..n_blocks {
        let (nv, _ne) = dims[b];
        if nv + layout.block_eq[b].len() == 0 {
            continue;
        }
        let mut u = u0[b].clone();
        for (cr, per_block) in border.iter().enumerate() {
            for &(bb, _, ref z) in per_block {
                if bb == b {
                    u.axpy(-y[cr], z, 1.0);
                }
            }
        }
        for (c, &v) in layout.block_vars[b].iter().enumerate() {
            dx[v] = u[c];
        }
        for (lr, &r) in layout.block_eq[b].iter().enumerate() {
            dlam_eq[r] = u[nv + lr];
        }
    }
    for (cr, &r) in layout.coupling.iter().enumerate() {
        dlam_eq[r] = y[cr];
    }

    // Recover inequality-multiplier steps: Δw_j = d_j (a_j·Δx + rc_j) − w_j.
    let mut dw = vec![0.0; p.ineq.len()];
    for (r, place) in layout.ineq_place.iter().enumerate() {
        if matches!(place, IneqPlace::Dropped) {
            continue;
        }
        inp.p.ineq[r].grad_entries(inp.x, &mut scratch);
        let mut a_dx = 0.0;
        for &(v, g) in scratch.iter().filter(|&&(v, _)| inp.free[v]) {
            a_dx += g * dx[v];
        }
        let rc = inp.slack_res[r] + inp.mu / inp.w[r];
        dw[r] = inp.d_ineq[r] * (a_dx + rc) - inp.w[r];
    }

    Some(Direction { dx, dlam_eq, dw })
}
