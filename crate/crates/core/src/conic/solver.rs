//! Interior-point solver for the conic problems built in this crate.
//!
//! The algorithm is a primal-dual predictor-corrector method with
//! Nesterov-Todd scaling, allowing infeasible starts and warm starts from a
//! previous solve. Rotated cones are mapped to plain second-order cones of
//! dimension three at lowering time; variable bounds are kept out of the
//! constraint matrix and folded into the KKT diagonal.
//!
//! The KKT system is symmetric quasidefinite after static regularization,
//! so each Newton system factors as LDL^T without pivoting. When the
//! problem declares block structure, the factorization runs per block with
//! a dense Schur complement on the border (demand rows, shared-average
//! variables and their definitions); block factors are computed in parallel
//! and reduced in block order so results do not depend on thread timing.

use super::linalg::{ldlt_factor, ldlt_solve, ldlt_solve_many};
use super::{ConicProblem, LinExpr, Solution, Status};
use crate::par;

#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub max_iter: usize,
    pub tol_feas: f64,
    pub tol_gap: f64,
    pub static_reg: f64,
    pub refine_rounds: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol_feas: 1e-8,
            tol_gap: 1e-8,
            static_reg: 1e-8,
            refine_rounds: 4,
        }
    }
}

const BORDER: usize = usize::MAX;

/// Fraction of the step to the cone boundary that is actually taken. Early
/// on a conservative backoff keeps the scalings sane; near convergence the
/// leftover would dominate the remaining gap, so the backoff tightens.
fn step_backoff(mu: f64) -> f64 {
    // The cap stops short of 1: a fully saturated step squares a cone
    // residual down to the cancellation floor of f64, where the next
    // scaling turns to noise.
    (1.0 - mu).clamp(0.99, 0.999)
}

// ---------------------------------------------------------------------------
// Lowered standard form
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
struct Row {
    terms: Vec<(usize, f64)>,
}

/// `min c.x  s.t.  A x = b,  G x + s = h,  s in (R+)^nonneg x SOC3^n_soc`,
/// plus variable bounds kept separate. Shared expressions are materialized
/// as trailing auxiliary variables with defining equality rows.
struct Lowered {
    n: usize,
    n_user: usize,
    c: Vec<f64>,
    c0: f64,
    a_rows: Vec<Row>,
    b: Vec<f64>,
    g_rows: Vec<Row>,
    h: Vec<f64>,
    nonneg: usize,
    n_soc: usize,
    lb: Vec<f64>,
    ub: Vec<f64>,
    var_blocks: Vec<std::ops::Range<usize>>,
}

fn push_expanded(terms: &mut Vec<(usize, f64)>, e: &LinExpr, n_user: usize, scale: f64) {
    for &(v, c) in &e.terms {
        terms.push((v, scale * c));
    }
    for &(s, c) in &e.shared_terms {
        terms.push((n_user + s, scale * c));
    }
}

fn merge_terms(mut terms: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    terms.sort_unstable_by_key(|&(v, _)| v);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(terms.len());
    for (v, c) in terms {
        match out.last_mut() {
            Some(last) if last.0 == v => last.1 += c,
            _ => out.push((v, c)),
        }
    }
    out.retain(|&(_, c)| c != 0.0);
    out
}

/// Expression row in `G x + s = h` form: `s = expr` means `G = -terms`,
/// `h = constant`.
fn cone_row(e: &LinExpr, n_user: usize) -> (Row, f64) {
    let mut terms = Vec::with_capacity(e.terms.len() + e.shared_terms.len());
    push_expanded(&mut terms, e, n_user, -1.0);
    (
        Row {
            terms: merge_terms(terms),
        },
        e.constant,
    )
}

fn combined_cone_row(
    a: &LinExpr,
    sa: f64,
    b: &LinExpr,
    sb: f64,
    n_user: usize,
) -> (Row, f64) {
    let mut terms = Vec::new();
    push_expanded(&mut terms, a, n_user, -sa);
    push_expanded(&mut terms, b, n_user, -sb);
    (
        Row {
            terms: merge_terms(terms),
        },
        sa * a.constant + sb * b.constant,
    )
}

fn lower(p: &ConicProblem) -> Lowered {
    let n_user = p.num_vars;
    let n = n_user + p.shared_exprs.len();

    let mut c = vec![0.0; n];
    for &(v, coef) in &p.minimize.terms {
        c[v] += coef;
    }
    for &(s, coef) in &p.minimize.shared_terms {
        c[n_user + s] += coef;
    }

    let mut a_rows = Vec::with_capacity(p.eq_rows.len() + p.shared_exprs.len());
    let mut b = Vec::with_capacity(a_rows.capacity());
    for e in &p.eq_rows {
        let mut terms = Vec::with_capacity(e.terms.len() + e.shared_terms.len());
        push_expanded(&mut terms, e, n_user, 1.0);
        a_rows.push(Row {
            terms: merge_terms(terms),
        });
        b.push(-e.constant);
    }
    for (j, expr) in p.shared_exprs.iter().enumerate() {
        let mut terms = vec![(n_user + j, 1.0)];
        for &(v, coef) in &expr.terms {
            terms.push((v, -coef));
        }
        a_rows.push(Row {
            terms: merge_terms(terms),
        });
        b.push(0.0);
    }

    let mut g_rows = Vec::new();
    let mut h = Vec::new();
    for e in &p.nonneg_rows {
        let (row, rhs) = cone_row(e, n_user);
        g_rows.push(row);
        h.push(rhs);
    }
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    for cone in &p.cones {
        // Rotated (u, v, w) to plain SOC: ((u+v)/sqrt2, (u-v)/sqrt2, w).
        let (r0, h0) = combined_cone_row(&cone.u, inv_sqrt2, &cone.v, inv_sqrt2, n_user);
        let (r1, h1) = combined_cone_row(&cone.u, inv_sqrt2, &cone.v, -inv_sqrt2, n_user);
        let (r2, h2) = cone_row(&cone.w, n_user);
        g_rows.extend([r0, r1, r2]);
        h.extend([h0, h1, h2]);
    }

    let mut lb = vec![f64::NEG_INFINITY; n];
    let mut ub = vec![f64::INFINITY; n];
    for &(v, bound) in &p.bounds {
        if let Some(l) = bound.lower {
            lb[v] = lb[v].max(l);
        }
        if let Some(u) = bound.upper {
            ub[v] = ub[v].min(u);
        }
    }

    let var_blocks = match &p.blocks {
        Some(bs) => bs.var_blocks.clone(),
        None => vec![0..n_user],
    };

    Lowered {
        n,
        n_user,
        c,
        c0: p.minimize.constant,
        a_rows,
        b,
        g_rows,
        h,
        nonneg: p.nonneg_rows.len(),
        n_soc: p.cones.len(),
        lb,
        ub,
        var_blocks,
    }
}

// ---------------------------------------------------------------------------
// Ruiz equilibration
// ---------------------------------------------------------------------------

struct Scaling {
    col: Vec<f64>,
}

fn equilibrate(low: &mut Lowered) -> Scaling {
    let n = low.n;
    let m_eq = low.a_rows.len();
    let m_g = low.g_rows.len();
    let mut row_a = vec![1.0; m_eq];
    let mut row_g = vec![1.0; m_g];
    let mut col = vec![1.0; n];

    // Row norms include the constant column so a row whose coefficients are
    // small against its right-hand side is not blown up until its slack
    // dwarfs every other one's.
    for _ in 0..3 {
        for (r, row) in low.a_rows.iter().enumerate() {
            let mut mx: f64 = (low.b[r] * row_a[r]).abs();
            for &(v, coef) in &row.terms {
                mx = mx.max((coef * row_a[r] * col[v]).abs());
            }
            if mx > 0.0 {
                row_a[r] /= mx.sqrt();
            }
        }
        // Nonnegative rows scale individually; the three rows of one cone
        // must share a scale or the cone geometry changes.
        for i in 0..low.nonneg {
            let mut mx: f64 = (low.h[i] * row_g[i]).abs();
            for &(v, coef) in &low.g_rows[i].terms {
                mx = mx.max((coef * row_g[i] * col[v]).abs());
            }
            if mx > 0.0 {
                row_g[i] /= mx.sqrt();
            }
        }
        for blk in 0..low.n_soc {
            let base = low.nonneg + 3 * blk;
            let mut mx: f64 = 0.0;
            for r in base..base + 3 {
                mx = mx.max((low.h[r] * row_g[r]).abs());
                for &(v, coef) in &low.g_rows[r].terms {
                    mx = mx.max((coef * row_g[r] * col[v]).abs());
                }
            }
            if mx > 0.0 {
                let s = 1.0 / mx.sqrt();
                for r in base..base + 3 {
                    row_g[r] *= s;
                }
            }
        }
        let mut colmax = vec![0.0f64; n];
        for (r, row) in low.a_rows.iter().enumerate() {
            for &(v, coef) in &row.terms {
                colmax[v] = colmax[v].max((coef * row_a[r] * col[v]).abs());
            }
        }
        for (r, row) in low.g_rows.iter().enumerate() {
            for &(v, coef) in &row.terms {
                colmax[v] = colmax[v].max((coef * row_g[r] * col[v]).abs());
            }
        }
        for v in 0..n {
            if colmax[v] > 0.0 {
                col[v] /= colmax[v].sqrt();
            }
        }
    }

    for (r, row) in low.a_rows.iter_mut().enumerate() {
        for (v, coef) in row.terms.iter_mut() {
            *coef *= row_a[r] * col[*v];
        }
        low.b[r] *= row_a[r];
    }
    for (r, row) in low.g_rows.iter_mut().enumerate() {
        for (v, coef) in row.terms.iter_mut() {
            *coef *= row_g[r] * col[*v];
        }
        low.h[r] *= row_g[r];
    }
    for v in 0..n {
        low.c[v] *= col[v];
        if low.lb[v].is_finite() {
            low.lb[v] /= col[v];
        }
        if low.ub[v].is_finite() {
            low.ub[v] /= col[v];
        }
    }
    Scaling { col }
}

// ---------------------------------------------------------------------------
// KKT structure and bordered factorization
// ---------------------------------------------------------------------------

struct KktMaps {
    nblocks: usize,
    /// KKT position (var, then stacked row offset by n) to (owner, local).
    pos_local: Vec<(usize, usize)>,
    block_dims: Vec<usize>,
    block_npos: Vec<usize>,
    block_gather: Vec<Vec<usize>>,
    border_dim: usize,
    border_npos: usize,
    border_gather: Vec<usize>,
}

fn classify_rows(low: &Lowered) -> Vec<usize> {
    let mut var_owner = vec![BORDER; low.n];
    for (bi, r) in low.var_blocks.iter().enumerate() {
        for v in r.clone() {
            var_owner[v] = bi;
        }
    }
    let classify = |terms: &[(usize, f64)]| -> usize {
        let mut owner = BORDER;
        for &(v, _) in terms {
            let o = var_owner[v];
            if o == BORDER {
                continue;
            }
            if owner == BORDER {
                owner = o;
            } else if owner != o {
                return BORDER;
            }
        }
        owner
    };

    let m_eq = low.a_rows.len();
    let m = m_eq + low.g_rows.len();
    let mut row_owner = vec![BORDER; m];
    for (r, row) in low.a_rows.iter().enumerate() {
        row_owner[r] = classify(&row.terms);
    }
    for i in 0..low.nonneg {
        row_owner[m_eq + i] = classify(&low.g_rows[i].terms);
    }
    for blk in 0..low.n_soc {
        let base = low.nonneg + 3 * blk;
        let mut joint = Vec::new();
        for r in base..base + 3 {
            joint.extend_from_slice(&low.g_rows[r].terms);
        }
        let owner = classify(&joint);
        for r in base..base + 3 {
            row_owner[m_eq + r] = owner;
        }
    }
    row_owner
}

fn build_maps(low: &Lowered) -> KktMaps {
    let n = low.n;
    let m = low.a_rows.len() + low.g_rows.len();
    let nb = low.var_blocks.len();
    let row_owner = classify_rows(low);

    let mut var_owner = vec![BORDER; n];
    for (bi, r) in low.var_blocks.iter().enumerate() {
        for v in r.clone() {
            var_owner[v] = bi;
        }
    }

    let mut pos_local = vec![(BORDER, 0usize); n + m];
    let mut block_gather: Vec<Vec<usize>> = vec![Vec::new(); nb];
    let mut block_npos = vec![0usize; nb];
    let mut border_gather = Vec::new();

    for v in 0..n {
        let o = var_owner[v];
        if o == BORDER {
            pos_local[v] = (BORDER, border_gather.len());
            border_gather.push(v);
        } else {
            pos_local[v] = (o, block_gather[o].len());
            block_gather[o].push(v);
        }
    }
    for bn in block_npos.iter_mut().zip(&block_gather) {
        *bn.0 = bn.1.len();
    }
    let border_npos = border_gather.len();
    for r in 0..m {
        let o = row_owner[r];
        if o == BORDER {
            pos_local[n + r] = (BORDER, border_gather.len());
            border_gather.push(n + r);
        } else {
            pos_local[n + r] = (o, block_gather[o].len());
            block_gather[o].push(n + r);
        }
    }

    KktMaps {
        nblocks: nb,
        pos_local,
        block_dims: block_gather.iter().map(Vec::len).collect(),
        block_npos,
        block_gather,
        border_dim: border_gather.len(),
        border_npos,
        border_gather,
    }
}

/// Per-iteration assembled and factored KKT matrix.
struct Kkt<'a> {
    maps: &'a KktMaps,
    blocks: Vec<Vec<f64>>,
    strips: Vec<Vec<f64>>,
    fstrips: Vec<Vec<f64>>,
    border: Vec<f64>,
}

/// Per-iteration curvature data. `d_x` and the cone weights describe the
/// true KKT matrix; the static regularization in `reg` enters only the
/// factored copy, and iterative refinement against the true matrix washes
/// the perturbation back out.
struct IterScaling {
    /// Bound-barrier diagonal of the variable part.
    d_x: Vec<f64>,
    /// Scalar NT weights `s/z` for nonnegative rows.
    w2_nonneg: Vec<f64>,
    soc: Vec<SocScale>,
    reg: f64,
}

fn assemble<'a>(maps: &'a KktMaps, low: &Lowered, sc: &IterScaling) -> Kkt<'a> {
    let n = low.n;
    let m_eq = low.a_rows.len();
    let nb = maps.nblocks;
    let bd = maps.border_dim;

    let mut blocks: Vec<Vec<f64>> = maps.block_dims.iter().map(|&d| vec![0.0; d * d]).collect();
    let mut strips: Vec<Vec<f64>> = maps.block_dims.iter().map(|&d| vec![0.0; d * bd]).collect();
    let mut border = vec![0.0; bd * bd];

    // Variable diagonal, regularized in the factored copy only.
    for v in 0..n {
        let (o, lv) = maps.pos_local[v];
        let val = sc.d_x[v] + sc.reg;
        if o == BORDER {
            border[lv * bd + lv] += val;
        } else {
            let d = maps.block_dims[o];
            blocks[o][lv * d + lv] += val;
        }
    }

    // Constraint rows. Within a block, rows always come after variables in
    // the gather order, so the lower triangle is [row][var].
    let all_rows = low.a_rows.iter().chain(low.g_rows.iter());
    for (r, row) in all_rows.enumerate() {
        let (or, lr) = maps.pos_local[n + r];
        for &(v, coef) in &row.terms {
            let (ov, lv) = maps.pos_local[v];
            match (or == BORDER, ov == BORDER) {
                (false, false) => {
                    debug_assert_eq!(or, ov, "block-local row touching a foreign block");
                    let d = maps.block_dims[or];
                    blocks[or][lr * d + lv] += coef;
                }
                (false, true) => strips[or][lr * bd + lv] += coef,
                (true, false) => strips[ov][lv * bd + lr] += coef,
                (true, true) => border[lr * bd + lv] += coef,
            }
        }
    }

    // Row diagonal: -reg for equalities, -(W^2 + reg) for cone rows.
    let mut put_diag = |r: usize, val: f64| {
        let (o, lr) = maps.pos_local[n + r];
        if o == BORDER {
            border[lr * bd + lr] -= val;
        } else {
            let d = maps.block_dims[o];
            blocks[o][lr * d + lr] -= val;
        }
    };
    for r in 0..m_eq {
        put_diag(r, sc.reg);
    }
    for i in 0..low.nonneg {
        put_diag(m_eq + i, sc.w2_nonneg[i] + sc.reg);
    }
    for blk in 0..low.n_soc {
        let base = m_eq + low.nonneg + 3 * blk;
        let (o, lr0) = maps.pos_local[n + base];
        let w2 = &sc.soc[blk].w2;
        for a in 0..3 {
            for b in 0..=a {
                let val = w2[a * 3 + b] + if a == b { sc.reg } else { 0.0 };
                let (ra, rb) = (lr0 + a, lr0 + b);
                if o == BORDER {
                    border[ra * bd + rb] -= val;
                } else {
                    let d = maps.block_dims[o];
                    blocks[o][ra * d + rb] -= val;
                }
            }
        }
    }

    // Factor blocks in parallel, reduce the Schur complement sequentially.
    let factored = par::map_indexed(nb, |i| {
        let d = maps.block_dims[i];
        let mut kb = blocks[i].clone();
        ldlt_factor(&mut kb, d, maps.block_npos[i], 1e-13);
        let strip = &strips[i];
        // fstrip row q = K_ii^-1 (column q of K_ib).
        let mut fst = vec![0.0; bd * d];
        for q in 0..bd {
            for t in 0..d {
                fst[q * d + t] = strip[t * bd + q];
            }
        }
        ldlt_solve_many(&kb, d, &mut fst, bd);
        let mut contrib = vec![0.0; bd * bd];
        for p in 0..bd {
            for q in 0..=p {
                let mut acc = 0.0;
                for t in 0..d {
                    acc += strip[t * bd + p] * fst[q * d + t];
                }
                contrib[p * bd + q] = acc;
            }
        }
        (kb, fst, contrib)
    });

    let mut fstrips = Vec::with_capacity(nb);
    for (i, (kb, fst, contrib)) in factored.into_iter().enumerate() {
        for p in 0..bd {
            for q in 0..=p {
                border[p * bd + q] -= contrib[p * bd + q];
            }
        }
        blocks[i] = kb;
        fstrips.push(fst);
    }
    if bd > 0 {
        ldlt_factor(&mut border, bd, maps.border_npos, 1e-13);
    }

    Kkt {
        maps,
        blocks,
        strips,
        fstrips,
        border,
    }
}

impl Kkt<'_> {
    /// Solves the factored system in place on a KKT-ordered vector.
    fn solve(&self, rhs: &mut [f64]) {
        let maps = self.maps;
        let bd = maps.border_dim;

        let ts = par::map_indexed(maps.nblocks, |i| {
            let d = maps.block_dims[i];
            let mut t = vec![0.0; d];
            for (l, &g) in maps.block_gather[i].iter().enumerate() {
                t[l] = rhs[g];
            }
            ldlt_solve(&self.blocks[i], d, &mut t);
            t
        });

        let mut rb = vec![0.0; bd];
        for (l, &g) in maps.border_gather.iter().enumerate() {
            rb[l] = rhs[g];
        }
        for i in 0..maps.nblocks {
            let d = maps.block_dims[i];
            let strip = &self.strips[i];
            let t = &ts[i];
            for p in 0..bd {
                let mut acc = 0.0;
                for l in 0..d {
                    acc += strip[l * bd + p] * t[l];
                }
                rb[p] -= acc;
            }
        }
        if bd > 0 {
            ldlt_solve(&self.border, bd, &mut rb);
        }

        for i in 0..maps.nblocks {
            let d = maps.block_dims[i];
            let fst = &self.fstrips[i];
            for (l, &g) in maps.block_gather[i].iter().enumerate() {
                let mut v = ts[i][l];
                for q in 0..bd {
                    v -= fst[q * d + l] * rb[q];
                }
                rhs[g] = v;
            }
        }
        for (l, &g) in maps.border_gather.iter().enumerate() {
            rhs[g] = rb[l];
        }
    }
}

/// Multiplies the true (unregularized) KKT matrix by `v`; refinement
/// targets runs against this, so factoring with static regularization
/// still converges to the unperturbed Newton direction.
fn kkt_matvec(low: &Lowered, sc: &IterScaling, v: &[f64], out: &mut [f64]) {
    let n = low.n;
    let m_eq = low.a_rows.len();
    out.fill(0.0);
    for i in 0..n {
        out[i] = sc.d_x[i] * v[i];
    }
    for (r, row) in low.a_rows.iter().chain(low.g_rows.iter()).enumerate() {
        let pos = n + r;
        let vr = v[pos];
        let mut acc = 0.0;
        for &(j, coef) in &row.terms {
            acc += coef * v[j];
            out[j] += coef * vr;
        }
        out[pos] += acc;
    }
    for i in 0..low.nonneg {
        let pos = n + m_eq + i;
        out[pos] -= sc.w2_nonneg[i] * v[pos];
    }
    for blk in 0..low.n_soc {
        let base = n + m_eq + low.nonneg + 3 * blk;
        let w2 = &sc.soc[blk].w2;
        for a in 0..3 {
            let mut acc = 0.0;
            for b in 0..3 {
                acc += w2[a * 3 + b] * v[base + b];
            }
            out[base + a] -= acc;
        }
    }
}

// ---------------------------------------------------------------------------
// Second-order cone algebra (dimension 3)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct SocScale {
    wbar: [f64; 3],
    eta: f64,
    lambda: [f64; 3],
    w2: [f64; 9],
}

fn soc_residual(v: &[f64]) -> f64 {
    // Factored form: squaring first would cost half the digits when the
    // point sits near the cone boundary.
    let r = v[1].hypot(v[2]);
    (v[0] - r) * (v[0] + r)
}

fn nt_scale(s: &[f64], z: &[f64]) -> SocScale {
    // A step can land on the boundary to the last f64 digit; flooring the
    // residual relative to the point's size keeps the scaling finite there
    // instead of dividing by zero.
    let floor = |v: &[f64]| 1e-26 * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    let rho_s = soc_residual(s).max(floor(s)).sqrt();
    let rho_z = soc_residual(z).max(floor(z)).sqrt();
    let sb = [s[0] / rho_s, s[1] / rho_s, s[2] / rho_s];
    let zb = [z[0] / rho_z, z[1] / rho_z, z[2] / rho_z];
    let dot = sb[0] * zb[0] + sb[1] * zb[1] + sb[2] * zb[2];
    let gamma = ((1.0 + dot) / 2.0).sqrt();
    let wbar = [
        (sb[0] + zb[0]) / (2.0 * gamma),
        (sb[1] - zb[1]) / (2.0 * gamma),
        (sb[2] - zb[2]) / (2.0 * gamma),
    ];
    let eta = (rho_s / rho_z).sqrt();

    let e2 = eta * eta;
    let mut w2 = [0.0; 9];
    for a in 0..3 {
        for b in 0..3 {
            let j = if a == b {
                if a == 0 {
                    1.0
                } else {
                    -1.0
                }
            } else {
                0.0
            };
            w2[a * 3 + b] = e2 * (2.0 * wbar[a] * wbar[b] - j);
        }
    }

    let mut scale = SocScale {
        wbar,
        eta,
        lambda: [0.0; 3],
        w2,
    };
    scale.lambda = scale.w_apply(z);
    scale
}

impl SocScale {
    /// Scaling that leaves the cone untouched, for solves outside the
    /// interior-point loop.
    fn identity() -> Self {
        let mut w2 = [0.0; 9];
        w2[0] = 1.0;
        w2[4] = 1.0;
        w2[8] = 1.0;
        SocScale {
            wbar: [1.0, 0.0, 0.0],
            eta: 1.0,
            lambda: [1.0, 0.0, 0.0],
            w2,
        }
    }

    fn w_apply(&self, v: &[f64]) -> [f64; 3] {
        let w = &self.wbar;
        let dot1 = w[1] * v[1] + w[2] * v[2];
        let k = dot1 / (1.0 + w[0]);
        [
            self.eta * (w[0] * v[0] + dot1),
            self.eta * (v[0] * w[1] + v[1] + k * w[1]),
            self.eta * (v[0] * w[2] + v[2] + k * w[2]),
        ]
    }

    fn w_inv_apply(&self, v: &[f64]) -> [f64; 3] {
        let w = &self.wbar;
        let dot1 = w[1] * v[1] + w[2] * v[2];
        let k = dot1 / (1.0 + w[0]);
        [
            (w[0] * v[0] - dot1) / self.eta,
            (-v[0] * w[1] + v[1] + k * w[1]) / self.eta,
            (-v[0] * w[2] + v[2] + k * w[2]) / self.eta,
        ]
    }
}

fn jordan_prod(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[0] * b[0] + a[1] * b[1] + a[2] * b[2],
        a[0] * b[1] + b[0] * a[1],
        a[0] * b[2] + b[0] * a[2],
    ]
}

/// Solves `lambda o x = d` in the Jordan algebra.
fn jordan_div(lambda: &[f64; 3], d: &[f64; 3]) -> [f64; 3] {
    let det = lambda[0] * lambda[0] - lambda[1] * lambda[1] - lambda[2] * lambda[2];
    let x0 = (lambda[0] * d[0] - lambda[1] * d[1] - lambda[2] * d[2]) / det;
    [
        x0,
        (d[1] - x0 * lambda[1]) / lambda[0],
        (d[2] - x0 * lambda[2]) / lambda[0],
    ]
}

/// Largest step `t` keeping `s + alpha d` in the cone for `alpha` in `[0, t]`.
fn soc_step(s: &[f64], d: &[f64]) -> f64 {
    let c = soc_residual(s);
    if c <= 0.0 {
        return 0.0;
    }
    let a = soc_residual(d);
    let b = 2.0 * (s[0] * d[0] - s[1] * d[1] - s[2] * d[2]);
    let mut t = f64::INFINITY;
    if a.abs() < 1e-300 {
        if b < 0.0 {
            t = -c / b;
        }
    } else {
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for r in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                if r > 0.0 {
                    t = t.min(r);
                }
            }
        }
    }
    if d[0] < 0.0 {
        t = t.min(-s[0] / d[0]);
    }
    t
}

fn nonneg_step(s: &[f64], d: &[f64]) -> f64 {
    let mut t = f64::INFINITY;
    for (&si, &di) in s.iter().zip(d) {
        if di < 0.0 {
            t = t.min(-si / di);
        }
    }
    t
}

// ---------------------------------------------------------------------------
// Main loop
// ---------------------------------------------------------------------------

struct State {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    s: Vec<f64>,
    zl: Vec<f64>,
    zu: Vec<f64>,
}

struct Direction {
    dx: Vec<f64>,
    dy: Vec<f64>,
    dz: Vec<f64>,
    ds: Vec<f64>,
    dzl: Vec<f64>,
    dzu: Vec<f64>,
}

fn rows_apply(rows: &[Row], x: &[f64], out: &mut [f64]) {
    for (r, row) in rows.iter().enumerate() {
        let mut acc = 0.0;
        for &(v, c) in &row.terms {
            acc += c * x[v];
        }
        out[r] = acc;
    }
}

fn rows_apply_t_add(rows: &[Row], v: &[f64], out: &mut [f64]) {
    for (r, row) in rows.iter().enumerate() {
        let vr = v[r];
        if vr != 0.0 {
            for &(j, c) in &row.terms {
                out[j] += c * vr;
            }
        }
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
}

struct Residuals {
    r_d: Vec<f64>,
    r_p: Vec<f64>,
    r_g: Vec<f64>,
    res_primal: f64,
    res_dual: f64,
    rel_gap: f64,
    mu: f64,
}

fn residuals(low: &Lowered, st: &State, nu: f64, norm_b: f64, norm_h: f64, norm_c: f64) -> Residuals {
    let n = low.n;
    let mut r_d = low.c.clone();
    rows_apply_t_add(&low.a_rows, &st.y, &mut r_d);
    rows_apply_t_add(&low.g_rows, &st.z, &mut r_d);
    for v in 0..n {
        r_d[v] += st.zu[v] - st.zl[v];
    }

    let mut r_p = vec![0.0; low.a_rows.len()];
    rows_apply(&low.a_rows, &st.x, &mut r_p);
    for (rp, b) in r_p.iter_mut().zip(&low.b) {
        *rp -= b;
    }

    let mut r_g = vec![0.0; low.g_rows.len()];
    rows_apply(&low.g_rows, &st.x, &mut r_g);
    for (i, rg) in r_g.iter_mut().enumerate() {
        *rg += st.s[i] - low.h[i];
    }

    let mut compl = st.z.iter().zip(&st.s).map(|(a, b)| a * b).sum::<f64>();
    let mut dual_bound_terms = 0.0;
    for v in 0..n {
        if low.lb[v].is_finite() {
            compl += st.zl[v] * (st.x[v] - low.lb[v]);
            dual_bound_terms += low.lb[v] * st.zl[v];
        }
        if low.ub[v].is_finite() {
            compl += st.zu[v] * (low.ub[v] - st.x[v]);
            dual_bound_terms -= low.ub[v] * st.zu[v];
        }
    }
    let mu = compl / nu;

    let pobj = low.c.iter().zip(&st.x).map(|(a, b)| a * b).sum::<f64>();
    let dobj = -low.b.iter().zip(&st.y).map(|(a, b)| a * b).sum::<f64>()
        - low.h.iter().zip(&st.z).map(|(a, b)| a * b).sum::<f64>()
        + dual_bound_terms;
    let rel_gap = (pobj - dobj).abs() / f64::max(1.0, pobj.abs().max(dobj.abs()));

    Residuals {
        res_primal: f64::max(
            inf_norm(&r_p) / (1.0 + norm_b),
            inf_norm(&r_g) / (1.0 + norm_h),
        ),
        res_dual: inf_norm(&r_d) / (1.0 + norm_c),
        rel_gap,
        mu,
        r_d,
        r_p,
        r_g,
    }
}

/// Solves the KKT system in place, refining against the true matrix so the
/// static regularization washes out. Keeps the best iterate seen in case
/// refinement stops contracting on an ill-conditioned endgame system.
fn solve_refined(low: &Lowered, sc: &IterScaling, kkt: &Kkt<'_>, rhs: &mut [f64], rounds: usize) {
    let orig = rhs.to_vec();
    let rhs_norm = inf_norm(&orig).max(1.0);
    kkt.solve(rhs);
    let mut scratch = vec![0.0; rhs.len()];
    let mut best = rhs.to_vec();
    let mut best_res = f64::INFINITY;
    for round in 0..=rounds {
        kkt_matvec(low, sc, rhs, &mut scratch);
        for (sv, &ov) in scratch.iter_mut().zip(&orig) {
            *sv = ov - *sv;
        }
        let res = inf_norm(&scratch);
        if res < best_res {
            best_res = res;
            best.copy_from_slice(rhs);
        }
        if res <= 1e-14 * rhs_norm || round == rounds || res > 2.0 * best_res {
            break;
        }
        kkt.solve(&mut scratch);
        for (rv, &cv) in rhs.iter_mut().zip(&scratch) {
            *rv += cv;
        }
    }
    rhs.copy_from_slice(&best);
}

#[allow(clippy::too_many_arguments)]
fn compute_direction(
    low: &Lowered,
    st: &State,
    res: &Residuals,
    sc: &IterScaling,
    kkt: &Kkt<'_>,
    d_s_nonneg: &[f64],
    d_s_soc: &[[f64; 3]],
    g_l: &[f64],
    g_u: &[f64],
    opts: &SolverOptions,
) -> Direction {
    let n = low.n;
    let m_eq = low.a_rows.len();
    let m_g = low.g_rows.len();

    let mut rhs = vec![0.0; n + m_eq + m_g];
    for v in 0..n {
        rhs[v] = -res.r_d[v] + g_l[v] - g_u[v];
    }
    for r in 0..m_eq {
        rhs[n + r] = -res.r_p[r];
    }
    for i in 0..low.nonneg {
        rhs[n + m_eq + i] = -res.r_g[i] - d_s_nonneg[i] / st.z[i];
    }
    for blk in 0..low.n_soc {
        let base = low.nonneg + 3 * blk;
        let scale = &sc.soc[blk];
        let t = jordan_div(&scale.lambda, &d_s_soc[blk]);
        let wt = scale.w_apply(&t);
        for a in 0..3 {
            rhs[n + m_eq + base + a] = -res.r_g[base + a] - wt[a];
        }
    }

    solve_refined(low, sc, kkt, &mut rhs, opts.refine_rounds);

    let dx = rhs[..n].to_vec();
    let dy = rhs[n..n + m_eq].to_vec();
    let dz = rhs[n + m_eq..].to_vec();

    let mut ds = vec![0.0; m_g];
    rows_apply(&low.g_rows, &dx, &mut ds);
    for (i, d) in ds.iter_mut().enumerate() {
        *d = -res.r_g[i] - *d;
    }

    let mut dzl = vec![0.0; n];
    let mut dzu = vec![0.0; n];
    for v in 0..n {
        if low.lb[v].is_finite() {
            let sl = st.x[v] - low.lb[v];
            dzl[v] = g_l[v] - st.zl[v] / sl * dx[v];
        }
        if low.ub[v].is_finite() {
            let su = low.ub[v] - st.x[v];
            dzu[v] = g_u[v] + st.zu[v] / su * dx[v];
        }
    }

    Direction {
        dx,
        dy,
        dz,
        ds,
        dzl,
        dzu,
    }
}

fn primal_step(low: &Lowered, st: &State, dir: &Direction) -> f64 {
    let mut t = nonneg_step(&st.s[..low.nonneg], &dir.ds[..low.nonneg]);
    for blk in 0..low.n_soc {
        let base = low.nonneg + 3 * blk;
        t = t.min(soc_step(&st.s[base..base + 3], &dir.ds[base..base + 3]));
    }
    for v in 0..low.n {
        if low.lb[v].is_finite() && dir.dx[v] < 0.0 {
            t = t.min(-(st.x[v] - low.lb[v]) / dir.dx[v]);
        }
        if low.ub[v].is_finite() && dir.dx[v] > 0.0 {
            t = t.min((low.ub[v] - st.x[v]) / dir.dx[v]);
        }
    }
    t
}

fn dual_step(low: &Lowered, st: &State, dir: &Direction) -> f64 {
    let mut t = nonneg_step(&st.z[..low.nonneg], &dir.dz[..low.nonneg]);
    for blk in 0..low.n_soc {
        let base = low.nonneg + 3 * blk;
        t = t.min(soc_step(&st.z[base..base + 3], &dir.dz[base..base + 3]));
    }
    for v in 0..low.n {
        if low.lb[v].is_finite() && dir.dzl[v] < 0.0 {
            t = t.min(-st.zl[v] / dir.dzl[v]);
        }
        if low.ub[v].is_finite() && dir.dzu[v] < 0.0 {
            t = t.min(-st.zu[v] / dir.dzu[v]);
        }
    }
    t
}

/// Builds a starting point from two least-squares KKT solves with identity
/// cone scaling and unit-weight condensed bounds: the primal solve lands on
/// the equality rows while staying close to the cone rows, the dual solve
/// gives multipliers with a small dual residual. Slacks and cone duals are
/// then shifted into the interior; warm starts use per-entry floors instead
/// so a near-optimal point stays near the boundary.
fn initial_state(
    low: &Lowered,
    maps: &KktMaps,
    warm: Option<&[f64]>,
    scaling: &Scaling,
    shared_vals: &[f64],
    opts: &SolverOptions,
) -> State {
    let n = low.n;
    let m_eq = low.a_rows.len();
    let m_g = low.g_rows.len();

    let mut d_x = vec![0.0; n];
    for v in 0..n {
        d_x[v] = (low.lb[v].is_finite() as u8 + low.ub[v].is_finite() as u8) as f64;
    }
    let sc = IterScaling {
        d_x,
        w2_nonneg: vec![1.0; low.nonneg],
        soc: vec![SocScale::identity(); low.n_soc],
        reg: opts.static_reg,
    };
    let kkt = assemble(maps, low, &sc);

    // Primal half: pull bounded coordinates toward the warm point when there
    // is one, otherwise toward the middle of their interval.
    let mut rhs = vec![0.0; n + m_eq + m_g];
    if let Some(w) = warm {
        let mut xw = vec![0.0; n];
        for v in 0..low.n_user {
            xw[v] = w[v] / scaling.col[v];
        }
        for (j, &val) in shared_vals.iter().enumerate() {
            let v = low.n_user + j;
            xw[v] = val / scaling.col[v];
        }
        for v in 0..n {
            rhs[v] = sc.d_x[v] * xw[v];
        }
    } else {
        // Pull toward the origin projected into the box, not the box
        // midpoint: equilibrated data is O(1) around zero, while a wide
        // asymmetric interval can put its midpoint far from any point the
        // equality rows can reach cheaply.
        for v in 0..n {
            let (l, u) = (low.lb[v], low.ub[v]);
            rhs[v] = match (l.is_finite(), u.is_finite()) {
                (true, true) => 2.0 * 0.0f64.clamp(l + 1e-4 * (u - l), u - 1e-4 * (u - l)),
                (true, false) => l + 1.0,
                (false, true) => u - 1.0,
                (false, false) => 0.0,
            };
        }
    }
    rhs[n..n + m_eq].copy_from_slice(&low.b);
    rhs[n + m_eq..].copy_from_slice(&low.h);
    solve_refined(low, &sc, &kkt, &mut rhs, opts.refine_rounds);
    let mut x = rhs[..n].to_vec();

    // Pull every bounded coordinate strictly inside its interval. The margin
    // is deliberately tiny: a warm point with active bounds must not be
    // yanked off them, or the equality residual it satisfied is destroyed.
    for v in 0..low.n_user {
        let (l, u) = (low.lb[v], low.ub[v]);
        match (l.is_finite(), u.is_finite()) {
            (true, true) => {
                let width = u - l;
                if width > 0.0 {
                    let margin = 1e-6 * width;
                    x[v] = x[v].clamp(l + margin, u - margin);
                } else {
                    x[v] = l;
                }
            }
            (true, false) => x[v] = x[v].max(l + 1e-3 * l.abs().max(1.0)),
            (false, true) => x[v] = x[v].min(u - 1e-3 * u.abs().max(1.0)),
            (false, false) => {}
        }
    }

    // Auxiliary variables start exactly on their defining rows, which sit
    // at the tail of the equality block.
    let n_aux = n - low.n_user;
    let n_user_eq = m_eq - n_aux;
    for j in 0..n_aux {
        let aux = low.n_user + j;
        let mut acc = 0.0;
        let mut aux_coef = 1.0;
        for &(v, c) in &low.a_rows[n_user_eq + j].terms {
            if v == aux {
                aux_coef = c;
            } else {
                acc += c * x[v];
            }
        }
        x[aux] = -acc / aux_coef;
    }

    // Push each irreducible cone factor into the interior on its own; a
    // single global shift would let one badly scaled factor inflate every
    // complementarity product. Warm starts keep the same margin: the value
    // carried over is the primal point, not the boundary structure, and a
    // tighter floor stalls the first steps against the cone walls.
    let floor = 1.0;

    let mut s = vec![0.0; m_g];
    rows_apply(&low.g_rows, &x, &mut s);
    for (i, sv) in s.iter_mut().enumerate() {
        *sv = low.h[i] - *sv;
    }
    for i in 0..low.nonneg {
        s[i] = s[i].max(floor);
    }
    for blk in 0..low.n_soc {
        let base = low.nonneg + 3 * blk;
        let need = s[base + 1].hypot(s[base + 2]) + floor;
        if s[base] < need {
            s[base] = need;
        }
    }

    // Dual half: same factorization, right-hand side -c. The variable block
    // of the solution carries the implied bound multipliers.
    let mut rhs_d = vec![0.0; n + m_eq + m_g];
    for v in 0..n {
        rhs_d[v] = -low.c[v];
    }
    solve_refined(low, &sc, &kkt, &mut rhs_d, opts.refine_rounds);
    let y = rhs_d[n..n + m_eq].to_vec();
    let mut z = rhs_d[n + m_eq..].to_vec();
    let mut zl = vec![0.0; n];
    let mut zu = vec![0.0; n];
    for v in 0..n {
        if low.lb[v].is_finite() {
            zl[v] = -rhs_d[v];
        }
        if low.ub[v].is_finite() {
            zu[v] = rhs_d[v];
        }
    }

    for i in 0..low.nonneg {
        z[i] = z[i].max(floor);
    }
    for blk in 0..low.n_soc {
        let base = low.nonneg + 3 * blk;
        let need = z[base + 1].hypot(z[base + 2]) + floor;
        if z[base] < need {
            z[base] = need;
        }
    }
    for v in 0..n {
        if low.lb[v].is_finite() {
            zl[v] = zl[v].max(floor);
        }
        if low.ub[v].is_finite() {
            zu[v] = zu[v].max(floor);
        }
    }

    State { x, y, z, s, zl, zu }
}

/// Solves `problem`, optionally warm-starting from a previous solution's
/// variable values (original units, caller variables only).
///
/// Panics if the problem fails [`ConicProblem::validate`]; that is a builder
/// bug, not a data condition.
pub fn solve(problem: &ConicProblem, opts: &SolverOptions, warm: Option<&[f64]>) -> Solution {
    problem.validate().expect("invalid conic problem");

    let shared_vals: Vec<f64> = match warm {
        Some(w) => problem.shared_exprs.iter().map(|e| e.eval(w)).collect(),
        None => Vec::new(),
    };

    let mut low = lower(problem);
    let scaling = equilibrate(&mut low);
    let maps = build_maps(&low);

    let n = low.n;
    let nu = {
        let mut nu = low.nonneg + low.n_soc;
        for v in 0..n {
            nu += low.lb[v].is_finite() as usize + low.ub[v].is_finite() as usize;
        }
        nu.max(1) as f64
    };
    let norm_b = inf_norm(&low.b);
    let norm_h = inf_norm(&low.h);
    let norm_c = inf_norm(&low.c);

    let mut st = initial_state(&low, &maps, warm, &scaling, &shared_vals, opts);
    let mut status = Status::MaxIter;
    let mut iterations = 0;
    let mut stalls = 0;
    let mut reg_boost = 1.0;
    let mut last = residuals(&low, &st, nu, norm_b, norm_h, norm_c);

    for iter in 0..opts.max_iter {
        iterations = iter;
        if last.res_primal <= opts.tol_feas
            && last.res_dual <= opts.tol_feas
            && last.rel_gap <= opts.tol_gap
        {
            status = Status::Optimal;
            break;
        }
        if !last.mu.is_finite() || !last.res_primal.is_finite() {
            status = Status::NumericalFailure;
            break;
        }

        // NT scalings and the bound diagonal.
        let mut d_x = vec![0.0; n];
        for v in 0..n {
            if low.lb[v].is_finite() {
                d_x[v] += st.zl[v] / (st.x[v] - low.lb[v]);
            }
            if low.ub[v].is_finite() {
                d_x[v] += st.zu[v] / (low.ub[v] - st.x[v]);
            }
        }
        let w2_nonneg: Vec<f64> = (0..low.nonneg).map(|i| st.s[i] / st.z[i]).collect();
        let soc: Vec<SocScale> = (0..low.n_soc)
            .map(|blk| {
                let base = low.nonneg + 3 * blk;
                nt_scale(&st.s[base..base + 3], &st.z[base..base + 3])
            })
            .collect();
        // Shrink the regularization along with the barrier: refinement
        // against the true matrix only contracts while the perturbation
        // stays below the curvature scale of the current iterate. A dead
        // step bumps it back up, trading direction accuracy for a sane
        // factorization of a nearly singular system.
        let sc = IterScaling {
            d_x,
            w2_nonneg,
            soc,
            reg: ((opts.static_reg * last.mu).clamp(1e-10, opts.static_reg) * reg_boost)
                .min(1e-4),
        };
        let kkt = assemble(&maps, &low, &sc);

        // Predictor: pure Newton toward zero complementarity.
        let d_s_nonneg_aff: Vec<f64> = (0..low.nonneg).map(|i| -st.s[i] * st.z[i]).collect();
        let d_s_soc_aff: Vec<[f64; 3]> = sc
            .soc
            .iter()
            .map(|s| {
                let ll = jordan_prod(&s.lambda, &s.lambda);
                [-ll[0], -ll[1], -ll[2]]
            })
            .collect();
        let g_l_aff: Vec<f64> = st.zl.iter().map(|&v| -v).collect();
        let g_u_aff: Vec<f64> = st.zu.iter().map(|&v| -v).collect();
        let aff = compute_direction(
            &low,
            &st,
            &last,
            &sc,
            &kkt,
            &d_s_nonneg_aff,
            &d_s_soc_aff,
            &g_l_aff,
            &g_u_aff,
            opts,
        );

        let ap = primal_step(&low, &st, &aff).min(1.0);
        let ad = dual_step(&low, &st, &aff).min(1.0);
        let mut compl_aff = 0.0;
        for i in 0..low.g_rows.len() {
            compl_aff += (st.s[i] + ap * aff.ds[i]) * (st.z[i] + ad * aff.dz[i]);
        }
        for v in 0..n {
            if low.lb[v].is_finite() {
                compl_aff +=
                    (st.x[v] - low.lb[v] + ap * aff.dx[v]) * (st.zl[v] + ad * aff.dzl[v]);
            }
            if low.ub[v].is_finite() {
                compl_aff +=
                    (low.ub[v] - st.x[v] - ap * aff.dx[v]) * (st.zu[v] + ad * aff.dzu[v]);
            }
        }
        let mu_aff = (compl_aff / nu).max(0.0);
        let sigma = (mu_aff / last.mu).powi(3).clamp(0.0, 1.0);

        // Corrector with Mehrotra second-order terms. The cross terms are
        // clipped so no single degenerate pair can drag its complementarity
        // target far from the centering value and poison the direction.
        let target = sigma * last.mu;
        let clip = |cross: f64| -> f64 {
            (target - cross).clamp(0.1 * target, 10.0 * target) - target
        };
        let d_s_nonneg: Vec<f64> = (0..low.nonneg)
            .map(|i| target + clip(aff.ds[i] * aff.dz[i]) - st.s[i] * st.z[i])
            .collect();
        let d_s_soc: Vec<[f64; 3]> = (0..low.n_soc)
            .map(|blk| {
                let base = low.nonneg + 3 * blk;
                let scale = &sc.soc[blk];
                let ll = jordan_prod(&scale.lambda, &scale.lambda);
                let wa = scale.w_inv_apply(&aff.ds[base..base + 3]);
                let wb = scale.w_apply(&aff.dz[base..base + 3]);
                let cross = jordan_prod(&wa, &wb);
                let f = if cross[0] != 0.0 {
                    (clip(cross[0]) / -cross[0]).abs().min(1.0)
                } else {
                    1.0
                };
                [
                    target - ll[0] - f * cross[0],
                    -ll[1] - f * cross[1],
                    -ll[2] - f * cross[2],
                ]
            })
            .collect();
        let mut g_l = vec![0.0; n];
        let mut g_u = vec![0.0; n];
        for v in 0..n {
            if low.lb[v].is_finite() {
                let sl = st.x[v] - low.lb[v];
                g_l[v] = (target + clip(aff.dx[v] * aff.dzl[v]) - sl * st.zl[v]) / sl;
            }
            if low.ub[v].is_finite() {
                let su = low.ub[v] - st.x[v];
                g_u[v] = (target + clip(-aff.dx[v] * aff.dzu[v]) - su * st.zu[v]) / su;
            }
        }
        let mut dir = compute_direction(
            &low, &st, &last, &sc, &kkt, &d_s_nonneg, &d_s_soc, &g_l, &g_u, opts,
        );
        let mut alpha = step_backoff(last.mu)
            * primal_step(&low, &st, &dir).min(dual_step(&low, &st, &dir));
        let mut centered = false;
        if !(alpha >= 1e-3) {
            // The combined direction barely moves; retake the iteration as a
            // pure centering step so the next one starts from a point where
            // the scalings are sane again.
            let t = last.mu;
            let c_nonneg: Vec<f64> = (0..low.nonneg).map(|i| t - st.s[i] * st.z[i]).collect();
            let c_soc: Vec<[f64; 3]> = sc
                .soc
                .iter()
                .map(|s| {
                    let ll = jordan_prod(&s.lambda, &s.lambda);
                    [t - ll[0], -ll[1], -ll[2]]
                })
                .collect();
            let mut c_l = vec![0.0; n];
            let mut c_u = vec![0.0; n];
            for v in 0..n {
                if low.lb[v].is_finite() {
                    let sl = st.x[v] - low.lb[v];
                    c_l[v] = (t - sl * st.zl[v]) / sl;
                }
                if low.ub[v].is_finite() {
                    let su = low.ub[v] - st.x[v];
                    c_u[v] = (t - su * st.zu[v]) / su;
                }
            }
            let cdir = compute_direction(
                &low, &st, &last, &sc, &kkt, &c_nonneg, &c_soc, &c_l, &c_u, opts,
            );
            let calpha = step_backoff(last.mu)
                * primal_step(&low, &st, &cdir).min(dual_step(&low, &st, &cdir));
            if !(calpha <= alpha) {
                dir = cdir;
                alpha = calpha;
                centered = true;
            }
        }
        let alpha = alpha.min(1.0);
        let centered = centered;
        if !alpha.is_finite() || alpha < 1e-10 {
            // Applying a dead step would only poison the iterate. Retrying
            // from the same point with the same factorization would stall
            // identically, so each retry raises the regularization; give up
            // once that stops helping and keep the last sane point.
            stalls += 1;
            if stalls >= 3 {
                status = Status::NumericalFailure;
                break;
            }
            reg_boost *= 1e4;
            continue;
        }
        stalls = 0;
        reg_boost = 1.0;

        for v in 0..n {
            st.x[v] += alpha * dir.dx[v];
        }
        for (yv, d) in st.y.iter_mut().zip(&dir.dy) {
            *yv += alpha * d;
        }
        for (zv, d) in st.z.iter_mut().zip(&dir.dz) {
            *zv += alpha * d;
        }
        for (sv, d) in st.s.iter_mut().zip(&dir.ds) {
            *sv += alpha * d;
        }
        for v in 0..n {
            st.zl[v] += alpha * dir.dzl[v];
            st.zu[v] += alpha * dir.dzu[v];
        }
        // The residual of a grazed cone factor cancels to noise around
        // 1e-16 of its norm; once it rounds nonpositive every later step
        // ratio is zero. Nudging the tip component keeps each factor
        // strictly inside at a cost far below the solve tolerances.
        for blk in 0..low.n_soc {
            let base = low.nonneg + 3 * blk;
            for buf in [&mut st.s, &mut st.z] {
                let r = buf[base + 1].hypot(buf[base + 2]);
                let min0 = r * (1.0 + 1e-12);
                if buf[base] < min0 {
                    buf[base] = min0;
                }
            }
        }

        iterations = iter + 1;
        last = residuals(&low, &st, nu, norm_b, norm_h, norm_c);
        if std::env::var_os("SOLVER_TRACE").is_some() {
            eprintln!(
                "it={iter} mu={:.3e} rp={:.3e} rd={:.3e} gap={:.3e} sigma={:.3e} alpha={:.3e}{}",
                last.mu,
                last.res_primal,
                last.res_dual,
                last.rel_gap,
                sigma,
                alpha,
                if centered { " centered" } else { "" }
            );
        }
    }

    if status == Status::MaxIter
        && last.res_primal <= opts.tol_feas
        && last.res_dual <= opts.tol_feas
        && last.rel_gap <= opts.tol_gap
    {
        status = Status::Optimal;
    }

    // Unscale and report in the caller's units.
    let x_user: Vec<f64> = (0..low.n_user)
        .map(|v| st.x[v] * scaling.col[v])
        .collect();
    let mut objective = low.c0;
    for &(v, coef) in &problem.minimize.terms {
        objective += coef * x_user[v];
    }
    for &(e, coef) in &problem.minimize.shared_terms {
        objective += coef * problem.shared_exprs[e].eval(&x_user);
    }

    Solution {
        status,
        x: x_user,
        objective,
        iterations,
        mu: last.mu,
        res_primal: last.res_primal,
        res_dual: last.res_dual,
        rel_gap: last.rel_gap,
    }
}
