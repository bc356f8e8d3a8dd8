//! Dense two-phase primal simplex with Bland's anti-cycling rule.
//!
//! Problems are small (at most a few hundred variables), so everything is
//! kept dense and deterministic: entering variable is the lowest-index
//! column with negative reduced cost, ties in the ratio test break toward
//! the lowest basic variable index. General variable bounds are reduced to
//! the nonnegative standard form by shifting, mirroring, or splitting, with
//! finite upper bounds becoming explicit rows.

use nalgebra::{DMatrix, DVector};

use super::LpError;

const EPS: f64 = 1e-9;

/// Minimize objective . x subject to a_ub x <= b_ub, a_eq x = b_eq and
/// lo <= x <= hi (infinities allowed).
#[derive(Debug, Clone, PartialEq)]
pub struct LpProblem {
    pub objective: DVector<f64>,
    pub a_ub: DMatrix<f64>,
    pub b_ub: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl LpProblem {
    /// Problem with no constraints yet and x >= 0 bounds.
    pub fn minimize(objective: &[f64]) -> Self {
        let n = objective.len();
        Self {
            objective: DVector::from_column_slice(objective),
            a_ub: DMatrix::zeros(0, n),
            b_ub: DVector::zeros(0),
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            lo: DVector::zeros(n),
            hi: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn with_free_var(mut self, j: usize) -> Self {
        self.lo[j] = f64::NEG_INFINITY;
        self.hi[j] = f64::INFINITY;
        self
    }

    pub fn with_bounds(mut self, j: usize, lo: f64, hi: f64) -> Self {
        self.lo[j] = lo;
        self.hi[j] = hi;
        self
    }

    /// Append a row `coeffs . x <= rhs`.
    pub fn add_ub_row(&mut self, coeffs: &[(usize, f64)], rhs: f64) {
        let n = self.num_vars();
        let mut row = DVector::zeros(n);
        for &(j, v) in coeffs {
            row[j] += v;
        }
        self.a_ub = stack_row(&self.a_ub, &row);
        self.b_ub = self.b_ub.clone().insert_row(self.b_ub.len(), rhs);
    }

    /// Append a row `coeffs . x = rhs`.
    pub fn add_eq_row(&mut self, coeffs: &[(usize, f64)], rhs: f64) {
        let n = self.num_vars();
        let mut row = DVector::zeros(n);
        for &(j, v) in coeffs {
            row[j] += v;
        }
        self.a_eq = stack_row(&self.a_eq, &row);
        self.b_eq = self.b_eq.clone().insert_row(self.b_eq.len(), rhs);
    }

    fn validate(&self) -> Result<(), LpError> {
        let n = self.num_vars();
        if self.a_ub.ncols() != n && self.a_ub.nrows() > 0 {
            return Err(LpError::Dims("a_ub column count".into()));
        }
        if self.a_eq.ncols() != n && self.a_eq.nrows() > 0 {
            return Err(LpError::Dims("a_eq column count".into()));
        }
        if self.a_ub.nrows() != self.b_ub.len() || self.a_eq.nrows() != self.b_eq.len() {
            return Err(LpError::Dims("rhs length".into()));
        }
        if self.objective.iter().any(|v| !v.is_finite()) {
            return Err(LpError::Dims("objective must be finite".into()));
        }
        if self.lo.iter().zip(self.hi.iter()).any(|(l, h)| l > h) {
            return Err(LpError::Dims("lo > hi".into()));
        }
        Ok(())
    }
}

fn stack_row(m: &DMatrix<f64>, row: &DVector<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows() + 1, row.len());
    out.view_mut((0, 0), (m.nrows(), row.len())).copy_from(m);
    out.row_mut(m.nrows()).copy_from(&row.transpose());
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

/// Solution with dual certificates. Sign convention: for `minimize c.x`
/// subject to `Ax <= b` the inequality multipliers satisfy `lambda <= 0`
/// and strong duality reads `c.x = b_ub.lambda_ub + b_eq.lambda_eq` (plus
/// bound terms when finite variable bounds are active).
#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    pub x: DVector<f64>,
    pub objective_value: f64,
    /// Multipliers of the a_ub rows (nonpositive at optimality).
    pub dual_ub: DVector<f64>,
    /// Multipliers of the a_eq rows (free sign).
    pub dual_eq: DVector<f64>,
    /// Improving ray (unbounded) or phase-1 row prices (infeasible).
    pub certificate: Option<DVector<f64>>,
}

/// How an original variable maps into the standard-form columns.
#[derive(Debug, Clone, Copy)]
enum VarMap {
    /// x = lo + x'_col
    Shifted { col: usize, lo: f64 },
    /// x = hi - x'_col
    Mirrored { col: usize, hi: f64 },
    /// x = x'_pos - x'_neg
    Split { pos: usize, neg: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum RowKind {
    Le,
    Eq,
}

/// Provenance of a standard-form row.
#[derive(Debug, Clone, Copy)]
enum RowSrc {
    Ub(usize),
    Eq(usize),
    /// Synthetic row for a two-sided bound; its dual belongs to the bound,
    /// not to a user constraint.
    Bound,
}

struct StandardForm {
    a: DMatrix<f64>,
    b: DVector<f64>,
    cost: DVector<f64>,
    kinds: Vec<RowKind>,
    srcs: Vec<RowSrc>,
    var_maps: Vec<VarMap>,
    obj_offset: f64,
}

fn to_standard_form(p: &LpProblem) -> StandardForm {
    let n = p.num_vars();
    let mut var_maps = Vec::with_capacity(n);
    let mut n_cols = 0usize;
    let mut bound_rows: Vec<(usize, f64)> = Vec::new(); // (col, upper value in shifted coords)
    for j in 0..n {
        let (lo, hi) = (p.lo[j], p.hi[j]);
        if lo.is_finite() {
            let col = n_cols;
            n_cols += 1;
            if hi.is_finite() && hi > lo {
                bound_rows.push((col, hi - lo));
            }
            var_maps.push(VarMap::Shifted { col, lo });
        } else if hi.is_finite() {
            let col = n_cols;
            n_cols += 1;
            var_maps.push(VarMap::Mirrored { col, hi });
        } else {
            let pos = n_cols;
            let neg = n_cols + 1;
            n_cols += 2;
            var_maps.push(VarMap::Split { pos, neg });
        }
    }

    let m = p.a_ub.nrows() + p.a_eq.nrows() + bound_rows.len();
    let mut a = DMatrix::zeros(m, n_cols);
    let mut b = DVector::zeros(m);
    let mut kinds = Vec::with_capacity(m);
    let mut srcs = Vec::with_capacity(m);

    let fill_row = |a: &mut DMatrix<f64>,
                        b: &mut DVector<f64>,
                        row_idx: usize,
                        coeffs: nalgebra::RowDVector<f64>,
                        rhs: f64,
                        maps: &[VarMap]| {
        let mut adjusted_rhs = rhs;
        for (j, map) in maps.iter().enumerate() {
            let coef = coeffs[j];
            if coef == 0.0 {
                continue;
            }
            match *map {
                VarMap::Shifted { col, lo } => {
                    a[(row_idx, col)] += coef;
                    adjusted_rhs -= coef * lo;
                }
                VarMap::Mirrored { col, hi } => {
                    a[(row_idx, col)] -= coef;
                    adjusted_rhs -= coef * hi;
                }
                VarMap::Split { pos, neg } => {
                    a[(row_idx, pos)] += coef;
                    a[(row_idx, neg)] -= coef;
                }
            }
        }
        b[row_idx] = adjusted_rhs;
    };

    let mut row = 0;
    for i in 0..p.a_ub.nrows() {
        fill_row(&mut a, &mut b, row, p.a_ub.row(i).into_owned(), p.b_ub[i], &var_maps);
        kinds.push(RowKind::Le);
        srcs.push(RowSrc::Ub(i));
        row += 1;
    }
    for i in 0..p.a_eq.nrows() {
        fill_row(&mut a, &mut b, row, p.a_eq.row(i).into_owned(), p.b_eq[i], &var_maps);
        kinds.push(RowKind::Eq);
        srcs.push(RowSrc::Eq(i));
        row += 1;
    }
    for &(col, ub) in &bound_rows {
        a[(row, col)] = 1.0;
        b[row] = ub;
        kinds.push(RowKind::Le);
        srcs.push(RowSrc::Bound);
        row += 1;
    }

    let mut cost = DVector::zeros(n_cols);
    let mut obj_offset = 0.0;
    for (j, map) in var_maps.iter().enumerate() {
        let c = p.objective[j];
        match *map {
            VarMap::Shifted { col, lo } => {
                cost[col] += c;
                obj_offset += c * lo;
            }
            VarMap::Mirrored { col, hi } => {
                cost[col] -= c;
                obj_offset += c * hi;
            }
            VarMap::Split { pos, neg } => {
                cost[pos] += c;
                cost[neg] -= c;
            }
        }
    }

    StandardForm { a, b, cost, kinds, srcs, var_maps, obj_offset }
}

struct Tableau {
    /// Reduced constraint matrix, including slack/artificial columns.
    a: DMatrix<f64>,
    b: DVector<f64>,
    basis: Vec<usize>,
    n_structural: usize,
    n_total: usize,
    pivots: usize,
}

enum LoopEnd {
    Optimal,
    Unbounded { col: usize },
}

impl Tableau {
    fn reduced_costs(&self, cost: &DVector<f64>) -> (DVector<f64>, f64) {
        // rc_j = cost_j - cost_B . column_j on the reduced tableau.
        let m = self.b.len();
        let mut rc = cost.clone();
        let mut obj = 0.0;
        for i in 0..m {
            let cb = cost[self.basis[i]];
            if cb != 0.0 {
                obj += cb * self.b[i];
                for j in 0..self.n_total {
                    rc[j] -= cb * self.a[(i, j)];
                }
            }
        }
        (rc, obj)
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let piv = self.a[(row, col)];
        for j in 0..self.n_total {
            self.a[(row, j)] /= piv;
        }
        self.b[row] /= piv;
        for i in 0..self.b.len() {
            if i == row {
                continue;
            }
            let factor = self.a[(i, col)];
            if factor == 0.0 {
                continue;
            }
            for j in 0..self.n_total {
                self.a[(i, j)] -= factor * self.a[(row, j)];
            }
            self.b[i] -= factor * self.b[row];
        }
        self.basis[row] = col;
        self.pivots += 1;
    }

    /// Bland's rule: enter the lowest-index improving column, leave on the
    /// minimum ratio breaking ties toward the lowest basic variable index.
    /// Rows whose basic variable satisfies `evict` (artificials left basic
    /// at zero after phase 1) are pivoted out on any nonzero entry of the
    /// entering column before the regular ratio test; with b = 0 there such
    /// a pivot is degenerate and keeps the basis feasible.
    fn run(
        &mut self,
        cost: &DVector<f64>,
        allowed: &dyn Fn(usize) -> bool,
        evict: Option<&dyn Fn(usize) -> bool>,
        max_pivots: usize,
    ) -> Result<LoopEnd, LpError> {
        loop {
            if self.pivots > max_pivots {
                return Err(LpError::NumericalBreakdown { pivots: self.pivots });
            }
            let (rc, _) = self.reduced_costs(cost);
            let entering = (0..self.n_total).find(|&j| allowed(j) && rc[j] < -EPS);
            let Some(col) = entering else {
                return Ok(LoopEnd::Optimal);
            };
            if let Some(evict) = evict {
                let eviction = (0..self.b.len())
                    .find(|&i| evict(self.basis[i]) && self.a[(i, col)].abs() > EPS);
                if let Some(row) = eviction {
                    self.pivot(row, col);
                    continue;
                }
            }
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.b.len() {
                let aij = self.a[(i, col)];
                if aij > EPS {
                    let ratio = self.b[i] / aij;
                    match leave {
                        None => leave = Some((i, ratio)),
                        Some((best_i, best_r)) => {
                            if ratio < best_r - EPS
                                || (ratio < best_r + EPS && self.basis[i] < self.basis[best_i])
                            {
                                leave = Some((i, ratio));
                            }
                        }
                    }
                }
            }
            match leave {
                Some((row, _)) => self.pivot(row, col),
                None => return Ok(LoopEnd::Unbounded { col }),
            }
        }
    }
}

/// Solve the LP. Status is always reported through [`LpSolution::status`];
/// `Err` is reserved for numerical breakdown and malformed input.
pub fn solve_lp(problem: &LpProblem) -> Result<LpSolution, LpError> {
    problem.validate()?;
    let sf = to_standard_form(problem);
    let m = sf.b.len();
    let n = sf.a.ncols();

    // Orient rows so b >= 0, then append slack and artificial columns.
    let mut a = sf.a.clone();
    let mut b = sf.b.clone();
    let mut flipped = vec![false; m];
    for i in 0..m {
        if b[i] < 0.0 {
            flipped[i] = true;
            b[i] = -b[i];
            for j in 0..n {
                a[(i, j)] = -a[(i, j)];
            }
        }
    }

    let mut slack_col = vec![None; m];
    let mut art_col = vec![None; m];
    let mut n_total = n;
    for i in 0..m {
        let le = sf.kinds[i] == RowKind::Le;
        match (le, flipped[i]) {
            (true, false) => {
                slack_col[i] = Some(n_total); // +slack, basic
                n_total += 1;
            }
            (true, true) => {
                // Flipped <= is >=: -surplus + artificial.
                slack_col[i] = Some(n_total);
                art_col[i] = Some(n_total + 1);
                n_total += 2;
            }
            (false, _) => {
                art_col[i] = Some(n_total);
                n_total += 1;
            }
        }
    }

    let mut full = DMatrix::zeros(m, n_total);
    full.view_mut((0, 0), (m, n)).copy_from(&a);
    let mut basis = vec![0usize; m];
    for i in 0..m {
        match (sf.kinds[i], flipped[i]) {
            (RowKind::Le, false) => {
                let s = slack_col[i].unwrap();
                full[(i, s)] = 1.0;
                basis[i] = s;
            }
            (RowKind::Le, true) => {
                let s = slack_col[i].unwrap();
                let art = art_col[i].unwrap();
                full[(i, s)] = -1.0;
                full[(i, art)] = 1.0;
                basis[i] = art;
            }
            (RowKind::Eq, _) => {
                let art = art_col[i].unwrap();
                full[(i, art)] = 1.0;
                basis[i] = art;
            }
        }
    }

    let mut tab = Tableau { a: full, b, basis, n_structural: n, n_total, pivots: 0 };
    let max_pivots = 20_000 + 200 * (m + n_total);

    let is_artificial = {
        let arts: Vec<usize> = art_col.iter().flatten().copied().collect();
        move |j: usize| arts.contains(&j)
    };

    // Phase 1: minimize the sum of artificials.
    if art_col.iter().any(Option::is_some) {
        let mut phase1_cost = DVector::zeros(n_total);
        for c in art_col.iter().flatten() {
            phase1_cost[*c] = 1.0;
        }
        tab.run(&phase1_cost, &|_| true, None, max_pivots)?;
        let (rc1, obj1) = tab.reduced_costs(&phase1_cost);
        if obj1 > 1e-7 {
            // Farkas prices: y_i = -rc1 of the row's own unit column.
            let mut prices = DVector::zeros(m);
            for i in 0..m {
                let col = art_col[i].or(slack_col[i]).unwrap();
                let sign = if full_unit_sign(&sf.kinds[i], flipped[i]) { -1.0 } else { 1.0 };
                prices[i] = sign * rc1[col];
            }
            return Ok(LpSolution {
                status: LpStatus::Infeasible,
                x: DVector::zeros(problem.num_vars()),
                objective_value: f64::NAN,
                dual_ub: DVector::zeros(problem.a_ub.nrows()),
                dual_eq: DVector::zeros(problem.a_eq.nrows()),
                certificate: Some(prices),
            });
        }
        // Drive artificials out of the basis where possible.
        for i in 0..m {
            if is_artificial(tab.basis[i]) {
                let col = (0..tab.n_structural).find(|&j| tab.a[(i, j)].abs() > 1e-7);
                if let Some(col) = col {
                    tab.pivot(i, col);
                }
                // Otherwise the row is redundant; the artificial stays basic at 0.
            }
        }
    }

    // Phase 2: original costs, artificial columns barred from entering.
    let mut phase2_cost = DVector::zeros(n_total);
    phase2_cost.rows_mut(0, n).copy_from(&sf.cost);
    let end = tab.run(&phase2_cost, &|j| !is_artificial(j), Some(&is_artificial), max_pivots)?;

    if let LoopEnd::Unbounded { col } = end {
        // Improving ray in standard-form coordinates mapped back to x space.
        let mut dir_std = DVector::zeros(n);
        if col < n {
            dir_std[col] = 1.0;
        }
        for i in 0..m {
            if tab.basis[i] < n {
                dir_std[tab.basis[i]] -= tab.a[(i, col)];
            }
        }
        let ray = map_back(&sf.var_maps, problem.num_vars(), &dir_std, true);
        return Ok(LpSolution {
            status: LpStatus::Unbounded,
            x: DVector::zeros(problem.num_vars()),
            objective_value: f64::NEG_INFINITY,
            dual_ub: DVector::zeros(problem.a_ub.nrows()),
            dual_eq: DVector::zeros(problem.a_eq.nrows()),
            certificate: Some(ray),
        });
    }

    // Primal solution.
    let mut x_std = DVector::zeros(n);
    for i in 0..m {
        if tab.basis[i] < n {
            x_std[tab.basis[i]] = tab.b[i];
        }
    }
    let x = map_back(&sf.var_maps, problem.num_vars(), &x_std, false);
    let objective_value = problem.objective.dot(&x);
    debug_assert!((objective_value - (sf.cost.dot(&x_std) + sf.obj_offset)).abs() < 1e-6);

    // Row duals from the reduced costs of each row's own unit column.
    let (rc2, _) = tab.reduced_costs(&phase2_cost);
    let mut dual_ub = DVector::zeros(problem.a_ub.nrows());
    let mut dual_eq = DVector::zeros(problem.a_eq.nrows());
    for i in 0..m {
        // rc of a +1 unit column in row i equals -y_i; slack columns of
        // flipped rows carry -1, so the sign flips once more.
        let (col, unit_negative) = match (sf.kinds[i], flipped[i]) {
            (RowKind::Le, false) => (sf_col(&slack_col, i), false),
            (RowKind::Le, true) => (sf_col(&slack_col, i), true),
            (RowKind::Eq, _) => (sf_col(&art_col, i), false),
        };
        let mut y = -rc2[col];
        if unit_negative {
            y = -y;
        }
        // Undo the row orientation flip.
        if flipped[i] {
            y = -y;
        }
        match sf.srcs[i] {
            RowSrc::Ub(orig) => dual_ub[orig] = y,
            RowSrc::Eq(orig) => dual_eq[orig] = y,
            RowSrc::Bound => {}
        }
    }

    Ok(LpSolution {
        status: LpStatus::Optimal,
        x,
        objective_value,
        dual_ub,
        dual_eq,
        certificate: None,
    })
}

fn sf_col(cols: &[Option<usize>], i: usize) -> usize {
    cols[i].expect("row has its unit column")
}

fn full_unit_sign(kind: &RowKind, flipped: bool) -> bool {
    matches!(kind, RowKind::Le) && flipped
}

fn map_back(maps: &[VarMap], n: usize, x_std: &DVector<f64>, direction: bool) -> DVector<f64> {
    let mut x = DVector::zeros(n);
    for (j, map) in maps.iter().enumerate() {
        x[j] = match *map {
            VarMap::Shifted { col, lo } => x_std[col] + if direction { 0.0 } else { lo },
            VarMap::Mirrored { col, hi } => {
                if direction {
                    -x_std[col]
                } else {
                    hi - x_std[col]
                }
            }
            VarMap::Split { pos, neg } => x_std[pos] - x_std[neg],
        };
    }
    x
}

/// Feasibility and complementary-slackness residuals of a solution; used by
/// tests and debug assertions.
pub fn optimality_residuals(problem: &LpProblem, sol: &LpSolution) -> (f64, f64) {
    let mut feas: f64 = 0.0;
    if problem.a_ub.nrows() > 0 {
        let slack = &problem.b_ub - &problem.a_ub * &sol.x;
        for v in slack.iter() {
            feas = feas.max(-v);
        }
    }
    if problem.a_eq.nrows() > 0 {
        let resid = &problem.a_eq * &sol.x - &problem.b_eq;
        for v in resid.iter() {
            feas = feas.max(v.abs());
        }
    }
    for j in 0..problem.num_vars() {
        feas = feas.max(problem.lo[j] - sol.x[j]).max(sol.x[j] - problem.hi[j]);
    }
    let mut cs: f64 = 0.0;
    if problem.a_ub.nrows() > 0 {
        let slack = &problem.b_ub - &problem.a_ub * &sol.x;
        for i in 0..slack.len() {
            cs = cs.max((sol.dual_ub[i] * slack[i]).abs());
        }
    }
    (feas, cs)
}
