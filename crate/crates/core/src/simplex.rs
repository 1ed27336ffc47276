//! Dense two-phase simplex for small linear programs in standard form.
//!
//! Solves `min c·x  s.t.  A x = b, x ≥ 0` with Bland's anti-cycling rule, so
//! every solve terminates and is deterministic for a fixed input. Sized for
//! desk-scale problems (tens to a few hundred columns); no factorization, the
//! full tableau is carried.
//!
//! Infeasible problems come back with a Farkas certificate: a dual vector `y`
//! with `yᵀA_j ≤ 0` for every column and `yᵀb > 0`.

use thiserror::Error;

/// Entering-column threshold on reduced costs.
const REDCOST_TOL: f64 = 1e-9;
/// Minimum magnitude of a usable pivot element.
const PIVOT_TOL: f64 = 1e-11;
/// Phase-one objective below this counts as feasible.
const FEAS_TOL: f64 = 1e-9;
const MAX_ITER: usize = 50_000;

#[derive(Debug, Error)]
pub enum LpError {
    #[error("inconsistent LP shape: {0}")]
    Shape(String),
    #[error("simplex iteration limit reached after {0} pivots")]
    IterationLimit(usize),
}

/// `min cost·x  s.t.  rows·x = rhs, x ≥ 0`.
#[derive(Clone, Debug)]
pub struct LpProblem {
    pub cost: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
    pub rhs: Vec<f64>,
}

#[derive(Clone, Debug)]
pub enum LpSolution {
    Optimal {
        x: Vec<f64>,
        objective: f64,
        /// Simplex multipliers of the optimal basis, one per row.
        duals: Vec<f64>,
    },
    /// Phase one stalled at a positive objective. `farkas` satisfies
    /// `farkas·A_j ≤ 0` for every column j and `farkas·rhs = deficit > 0`.
    Infeasible { farkas: Vec<f64>, deficit: f64 },
    Unbounded,
}

enum RunOutcome {
    Optimal,
    Unbounded,
}

struct Tableau {
    /// m rows, each `n + m + 1` wide: real columns, artificial columns, rhs.
    t: Vec<Vec<f64>>,
    basis: Vec<usize>,
    in_basis: Vec<bool>,
    n: usize,
    m: usize,
}

impl Tableau {
    fn rhs_col(&self) -> usize {
        self.n + self.m
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let width = self.rhs_col() + 1;
        let inv = 1.0 / self.t[row][col];
        for j in 0..width {
            self.t[row][j] *= inv;
        }
        self.t[row][col] = 1.0;
        for i in 0..self.m {
            if i == row {
                continue;
            }
            let factor = self.t[i][col];
            if factor == 0.0 {
                continue;
            }
            for j in 0..width {
                self.t[i][j] -= factor * self.t[row][j];
            }
            self.t[i][col] = 0.0;
        }
        self.in_basis[self.basis[row]] = false;
        self.in_basis[col] = true;
        self.basis[row] = col;
    }

    fn objective(&self, cost: &[f64]) -> f64 {
        let rhs = self.rhs_col();
        (0..self.m).map(|r| cost[self.basis[r]] * self.t[r][rhs]).sum()
    }

    /// y = c_B B⁻¹, read off the artificial columns (they carry B⁻¹).
    fn row_duals(&self, cost: &[f64]) -> Vec<f64> {
        (0..self.m)
            .map(|i| (0..self.m).map(|r| cost[self.basis[r]] * self.t[r][self.n + i]).sum())
            .collect()
    }

    /// Bland's rule: entering = smallest eligible column index, leaving =
    /// minimum ratio with ties broken by smallest basic variable index.
    fn run(&mut self, cost: &[f64], enterable: usize, iter_budget: &mut usize) -> Result<RunOutcome, LpError> {
        let rhs = self.rhs_col();
        loop {
            if *iter_budget == 0 {
                return Err(LpError::IterationLimit(MAX_ITER));
            }
            *iter_budget -= 1;

            let mut entering = None;
            for j in 0..enterable {
                if self.in_basis[j] {
                    continue;
                }
                let mut d = cost[j];
                for r in 0..self.m {
                    d -= cost[self.basis[r]] * self.t[r][j];
                }
                if d < -REDCOST_TOL {
                    entering = Some(j);
                    break;
                }
            }
            let Some(col) = entering else {
                return Ok(RunOutcome::Optimal);
            };

            let mut leaving: Option<(usize, f64)> = None;
            for r in 0..self.m {
                let a = self.t[r][col];
                if a > PIVOT_TOL {
                    let ratio = self.t[r][rhs] / a;
                    leaving = match leaving {
                        None => Some((r, ratio)),
                        Some((lr, lratio)) => {
                            if ratio < lratio - 1e-12
                                || (ratio <= lratio + 1e-12 && self.basis[r] < self.basis[lr])
                            {
                                Some((r, ratio))
                            } else {
                                Some((lr, lratio))
                            }
                        }
                    };
                }
            }
            let Some((row, _)) = leaving else {
                return Ok(RunOutcome::Unbounded);
            };
            self.pivot(row, col);
        }
    }
}

pub fn solve(lp: &LpProblem) -> Result<LpSolution, LpError> {
    let m = lp.rows.len();
    let n = lp.cost.len();
    if lp.rhs.len() != m {
        return Err(LpError::Shape(format!("{} rows but {} rhs entries", m, lp.rhs.len())));
    }
    for (i, row) in lp.rows.iter().enumerate() {
        if row.len() != n {
            return Err(LpError::Shape(format!("row {} has {} entries, expected {}", i, row.len(), n)));
        }
    }
    if m == 0 {
        return Ok(LpSolution::Optimal { x: vec![0.0; n], objective: 0.0, duals: vec![] });
    }

    // Flip rows so every rhs is nonnegative; remember the signs to translate
    // duals back to the caller's orientation.
    let mut flip = vec![1.0; m];
    let mut t = vec![vec![0.0; n + m + 1]; m];
    for i in 0..m {
        let s = if lp.rhs[i] < 0.0 { -1.0 } else { 1.0 };
        flip[i] = s;
        for j in 0..n {
            t[i][j] = s * lp.rows[i][j];
        }
        t[i][n + i] = 1.0;
        t[i][n + m] = s * lp.rhs[i];
    }
    let mut in_basis = vec![false; n + m];
    for flag in in_basis.iter_mut().skip(n) {
        *flag = true;
    }
    let mut tab = Tableau { t, basis: (n..n + m).collect(), in_basis, n, m };
    let mut budget = MAX_ITER;

    // Phase one: minimize the artificial total.
    let phase1_cost: Vec<f64> =
        (0..n + m).map(|j| if j >= n { 1.0 } else { 0.0 }).collect();
    match tab.run(&phase1_cost, n + m, &mut budget)? {
        RunOutcome::Optimal => {}
        RunOutcome::Unbounded => {
            // Cannot happen: the phase-one objective is bounded below by zero.
            return Err(LpError::Shape("phase one reported unbounded".into()));
        }
    }
    let deficit = tab.objective(&phase1_cost);
    if deficit > FEAS_TOL {
        let raw = tab.row_duals(&phase1_cost);
        let farkas: Vec<f64> = (0..m).map(|i| flip[i] * raw[i]).collect();
        return Ok(LpSolution::Infeasible { farkas, deficit });
    }

    // Drive remaining basic artificials out where a real pivot exists; rows
    // without one are redundant and stay parked on their artificial.
    for row in 0..m {
        if tab.basis[row] >= n {
            let col = (0..n).find(|&j| !tab.in_basis[j] && tab.t[row][j].abs() > PIVOT_TOL);
            if let Some(col) = col {
                tab.pivot(row, col);
            }
        }
    }

    // Phase two over the real cost; artificials are barred from entering.
    let phase2_cost: Vec<f64> = lp.cost.iter().copied().chain(std::iter::repeat_n(0.0, m)).collect();
    match tab.run(&phase2_cost, n, &mut budget)? {
        RunOutcome::Unbounded => return Ok(LpSolution::Unbounded),
        RunOutcome::Optimal => {}
    }

    let rhs = tab.rhs_col();
    let mut x = vec![0.0; n];
    for r in 0..m {
        if tab.basis[r] < n {
            x[tab.basis[r]] = tab.t[r][rhs];
        }
    }
    let raw = tab.row_duals(&phase2_cost);
    let duals: Vec<f64> = (0..m).map(|i| flip[i] * raw[i]).collect();
    let objective = tab.objective(&phase2_cost);
    Ok(LpSolution::Optimal { x, objective, duals })
}
