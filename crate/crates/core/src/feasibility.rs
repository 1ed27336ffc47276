//! Parametrized polyhedral feasibility sets `S(x) = {y : A y ≤ b + C x}`,
//! their normal and tangent cones, and sampled viability diagnostics.
//!
//! Only polyhedral sets are supported: they give exact cones (the normal cone
//! at a feasible point is spanned by the active row normals, the tangent cone
//! is cut out by the same rows), and every polyhedral set is tangentially
//! regular, so the contingent cone agrees with the tangent cone.
//!
//! Viability is verified by sampling, never proved: reports say
//! `holds_on_samples`, and a `violated` verdict always carries a concrete
//! counterexample pair.

use serde::Serialize;
use thiserror::Error;

use crate::geometry::{GeometryError, PolyhedralCone, Polytope};
use crate::sampling;
use crate::simplex::{self, LpProblem, LpSolution};

/// Default activity tolerance, scaled by the row norm before use.
pub const DEFAULT_ACTIVE_TOL: f64 = 1e-8;
/// Default feasibility slack for membership tests.
pub const DEFAULT_FEAS_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum FeasibilityError {
    #[error("dimension mismatch: expected {expected} {what} coordinates, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error("inconsistent constraint shapes: {0}")]
    Shape(String),
    #[error("point is not feasible (worst residual {0:.3e})")]
    Infeasible(f64),
    #[error("box bounds must satisfy lower ≤ upper componentwise")]
    EmptyBox,
    #[error("lp failure: {0}")]
    Lp(#[from] simplex::LpError),
    #[error("geometry failure: {0}")]
    Geometry(#[from] GeometryError),
    #[error("policy set empty at sampled point {0:?}")]
    EmptyPolicy(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SetKind {
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Polyhedral,
}

/// `{y : A y ≤ b + C x}` with `x` the state parameter and `y` the action.
/// A box is the special case `C = 0`, `A = ±identity` rows.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FeasibilitySet {
    kind: SetKind,
    state_dim: usize,
    action_dim: usize,
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    c: Vec<Vec<f64>>,
    #[serde(skip)]
    row_norms: Vec<f64>,
}

impl FeasibilitySet {
    pub fn box_set(lower: Vec<f64>, upper: Vec<f64>, state_dim: usize) -> Result<Self, FeasibilityError> {
        if lower.len() != upper.len() {
            return Err(FeasibilityError::Shape("box bounds differ in length".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| l > u) {
            return Err(FeasibilityError::EmptyBox);
        }
        let d = lower.len();
        let mut a = Vec::with_capacity(2 * d);
        let mut b = Vec::with_capacity(2 * d);
        for i in 0..d {
            let mut row = vec![0.0; d];
            row[i] = 1.0;
            a.push(row);
            b.push(upper[i]);
        }
        for i in 0..d {
            let mut row = vec![0.0; d];
            row[i] = -1.0;
            a.push(row);
            b.push(-lower[i]);
        }
        let c = vec![vec![0.0; state_dim]; 2 * d];
        let row_norms = vec![1.0; 2 * d];
        Ok(Self { kind: SetKind::Box { lower, upper }, state_dim, action_dim: d, a, b, c, row_norms })
    }

    pub fn polyhedral(
        a: Vec<Vec<f64>>,
        b: Vec<f64>,
        c: Vec<Vec<f64>>,
        state_dim: usize,
        action_dim: usize,
    ) -> Result<Self, FeasibilityError> {
        if a.len() != b.len() || a.len() != c.len() {
            return Err(FeasibilityError::Shape(format!(
                "{} A-rows, {} b-entries, {} C-rows",
                a.len(),
                b.len(),
                c.len()
            )));
        }
        if a.iter().any(|r| r.len() != action_dim) {
            return Err(FeasibilityError::Shape("A row width disagrees with action dimension".into()));
        }
        if c.iter().any(|r| r.len() != state_dim) {
            return Err(FeasibilityError::Shape("C row width disagrees with state dimension".into()));
        }
        let row_norms = a
            .iter()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300))
            .collect();
        Ok(Self { kind: SetKind::Polyhedral, state_dim, action_dim, a, b, c, row_norms })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn rows(&self) -> (&[Vec<f64>], &[f64], &[Vec<f64>]) {
        (&self.a, &self.b, &self.c)
    }

    pub fn kind(&self) -> &SetKind {
        &self.kind
    }

    /// True when `C = 0`, i.e. the set does not move with the state.
    pub fn is_state_independent(&self) -> bool {
        self.c.iter().all(|row| row.iter().all(|v| *v == 0.0))
    }

    fn check_dims(&self, x: &[f64], y: &[f64]) -> Result<(), FeasibilityError> {
        if x.len() != self.state_dim {
            return Err(FeasibilityError::DimensionMismatch {
                what: "state",
                expected: self.state_dim,
                got: x.len(),
            });
        }
        if y.len() != self.action_dim {
            return Err(FeasibilityError::DimensionMismatch {
                what: "action",
                expected: self.action_dim,
                got: y.len(),
            });
        }
        Ok(())
    }

    /// Row residuals `A y − b − C x`; nonpositive entries are satisfied.
    pub fn residuals(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>, FeasibilityError> {
        self.check_dims(x, y)?;
        Ok(self
            .a
            .iter()
            .zip(&self.b)
            .zip(&self.c)
            .map(|((row, b), crow)| dot(row, y) - b - dot(crow, x))
            .collect())
    }

    pub fn feasible(&self, x: &[f64], y: &[f64], tol: f64) -> Result<bool, FeasibilityError> {
        Ok(self.residuals(x, y)?.iter().all(|r| *r <= tol))
    }

    /// Active rows at a feasible point: residual within `active_tol` (scaled by
    /// the row norm) of zero.
    fn active_rows(&self, x: &[f64], y: &[f64], active_tol: f64) -> Result<Vec<usize>, FeasibilityError> {
        let residuals = self.residuals(x, y)?;
        let worst = residuals
            .iter()
            .zip(&self.row_norms)
            .map(|(r, n)| r / n)
            .fold(f64::NEG_INFINITY, f64::max);
        if worst > active_tol {
            return Err(FeasibilityError::Infeasible(worst));
        }
        Ok(residuals
            .iter()
            .zip(&self.row_norms)
            .enumerate()
            .filter(|(_, (r, n))| **r >= -active_tol * **n)
            .map(|(i, _)| i)
            .collect())
    }

    /// Clarke normal cone to `S(x)` at `y`: the conic span of active row
    /// normals; `{0}` at interior points.
    pub fn normal_cone(&self, x: &[f64], y: &[f64], active_tol: f64) -> Result<PolyhedralCone, FeasibilityError> {
        let active = self.active_rows(x, y, active_tol)?;
        let rays: Vec<Vec<f64>> = active.iter().map(|&i| self.a[i].clone()).collect();
        Ok(PolyhedralCone::new(rays, self.action_dim)?)
    }

    /// Clarke tangent cone to `S(x)` at `y` in H-form: `{h : A_i h ≤ 0}` over
    /// the active rows, returned as a homogeneous feasibility set.
    pub fn tangent_cone(&self, x: &[f64], y: &[f64], active_tol: f64) -> Result<FeasibilitySet, FeasibilityError> {
        let active = self.active_rows(x, y, active_tol)?;
        let a: Vec<Vec<f64>> = active.iter().map(|&i| self.a[i].clone()).collect();
        let m = a.len();
        FeasibilitySet::polyhedral(a, vec![0.0; m], vec![vec![]; m], 0, self.action_dim)
    }

    /// ℓ¹ projection of `target` onto `S(x)`: the nearest feasible action and
    /// its distance, or `None` when `S(x)` is empty.
    pub fn l1_projection(&self, x: &[f64], target: &[f64]) -> Result<Option<(Vec<f64>, f64)>, FeasibilityError> {
        self.check_dims(x, target)?;
        let d = self.action_dim;
        let m = self.a.len();
        // Columns: y⁺, y⁻, e⁺, e⁻, row slacks.
        let n = 4 * d + m;
        let mut rows = vec![vec![0.0; n]; m + d];
        let mut rhs = vec![0.0; m + d];
        let mut cost = vec![0.0; n];
        for i in 0..m {
            for j in 0..d {
                rows[i][j] = self.a[i][j];
                rows[i][d + j] = -self.a[i][j];
            }
            rows[i][4 * d + i] = 1.0;
            rhs[i] = self.b[i] + dot(&self.c[i], x);
        }
        for j in 0..d {
            rows[m + j][j] = 1.0;
            rows[m + j][d + j] = -1.0;
            rows[m + j][2 * d + j] = -1.0;
            rows[m + j][3 * d + j] = 1.0;
            rhs[m + j] = target[j];
            cost[2 * d + j] = 1.0;
            cost[3 * d + j] = 1.0;
        }
        match simplex::solve(&LpProblem { cost, rows, rhs })? {
            LpSolution::Optimal { x: sol, objective, .. } => {
                let point: Vec<f64> = (0..d).map(|j| sol[j] - sol[d + j]).collect();
                Ok(Some((point, objective.max(0.0))))
            }
            LpSolution::Infeasible { .. } => Ok(None),
            LpSolution::Unbounded => Err(FeasibilityError::Shape("projection LP unbounded".into())),
        }
    }

    /// Contingent-cone diagnostic: does `y + θh` come back to `S(x)` at rate
    /// `o(θ)` along the probe grid? For polyhedral sets this must agree with
    /// tangent-cone membership.
    pub fn contingent_probe(
        &self,
        x: &[f64],
        y: &[f64],
        h: &[f64],
        theta_grid: &[f64],
        active_tol: f64,
    ) -> Result<bool, FeasibilityError> {
        // Gate on feasibility like the cone constructors do.
        let _ = self.active_rows(x, y, active_tol)?;
        if h.len() != self.action_dim {
            return Err(FeasibilityError::DimensionMismatch {
                what: "direction",
                expected: self.action_dim,
                got: h.len(),
            });
        }
        let mut best = f64::INFINITY;
        for &theta in theta_grid {
            if theta <= 0.0 {
                continue;
            }
            let probe: Vec<f64> = y.iter().zip(h).map(|(yi, hi)| yi + theta * hi).collect();
            if let Some((_, dist)) = self.l1_projection(x, &probe)? {
                best = best.min(dist / theta);
            }
        }
        Ok(best <= 1e-6)
    }

    /// Does the polytope `g` meet `S(x)`? LP feasibility over the convex
    /// multipliers of `g`'s generators.
    pub fn intersects_polytope(&self, x: &[f64], g: &Polytope) -> Result<bool, FeasibilityError> {
        if g.dim() != self.action_dim {
            return Err(FeasibilityError::DimensionMismatch {
                what: "polytope",
                expected: self.action_dim,
                got: g.dim(),
            });
        }
        if x.len() != self.state_dim {
            return Err(FeasibilityError::DimensionMismatch {
                what: "state",
                expected: self.state_dim,
                got: x.len(),
            });
        }
        let gens = g.generators();
        let k = gens.len();
        let m = self.a.len();
        // Columns: λ (simplex), row slacks.
        let n = k + m;
        let mut rows = vec![vec![0.0; n]; m + 1];
        let mut rhs = vec![0.0; m + 1];
        for i in 0..m {
            for (j, gen) in gens.iter().enumerate() {
                rows[i][j] = dot(&self.a[i], gen);
            }
            rows[i][k + i] = 1.0;
            rhs[i] = self.b[i] + dot(&self.c[i], x);
        }
        for j in 0..k {
            rows[m][j] = 1.0;
        }
        rhs[m] = 1.0;
        match simplex::solve(&LpProblem { cost: vec![0.0; n], rows, rhs })? {
            LpSolution::Optimal { .. } => Ok(true),
            LpSolution::Infeasible { .. } => Ok(false),
            LpSolution::Unbounded => Err(FeasibilityError::Shape("intersection LP unbounded".into())),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViabilityKind {
    Lower,
    Upper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViabilityVerdict {
    HoldsOnSamples,
    Violated,
}

/// Outcome of a sampled viability check. A `violated` verdict carries the
/// offending `(x, x')` pair, reproducible through [`FeasibilitySet::feasible`].
#[derive(Clone, Debug, Serialize)]
pub struct ViabilityReport {
    pub kind: ViabilityKind,
    pub radius: f64,
    pub samples: usize,
    pub verdict: ViabilityVerdict,
    pub violation: Option<(Vec<f64>, Vec<f64>)>,
}

impl ViabilityReport {
    pub fn holds(&self) -> bool {
        self.verdict == ViabilityVerdict::HoldsOnSamples
    }
}

fn sample_pairs(x_bar: &[f64], radius: f64, samples: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut pairs = Vec::with_capacity(samples.max(1));
    pairs.push((x_bar.to_vec(), x_bar.to_vec()));
    if samples > 1 {
        let points = sampling::ball_points(x_bar, radius, 2 * (samples - 1), seed);
        for chunk in points.chunks_exact(2) {
            pairs.push((chunk[0].clone(), chunk[1].clone()));
        }
    }
    pairs
}

/// Local lower viability around `x_bar`: `G(x) ∩ S(x') ≠ ∅` on sampled pairs
/// from the radius ball. The first pair is always `(x_bar, x_bar)`.
pub fn check_lower_viability<F>(
    policy: F,
    set: &FeasibilitySet,
    x_bar: &[f64],
    radius: f64,
    samples: usize,
    seed: u64,
) -> Result<ViabilityReport, FeasibilityError>
where
    F: Fn(&[f64]) -> Option<Polytope>,
{
    let pairs = sample_pairs(x_bar, radius, samples, seed);
    let total = pairs.len();
    for (x, x_prime) in pairs {
        let g = policy(&x).ok_or_else(|| FeasibilityError::EmptyPolicy(x.clone()))?;
        if !set.intersects_polytope(&x_prime, &g)? {
            return Ok(ViabilityReport {
                kind: ViabilityKind::Lower,
                radius,
                samples: total,
                verdict: ViabilityVerdict::Violated,
                violation: Some((x, x_prime)),
            });
        }
    }
    Ok(ViabilityReport {
        kind: ViabilityKind::Lower,
        radius,
        samples: total,
        verdict: ViabilityVerdict::HoldsOnSamples,
        violation: None,
    })
}

/// Local upper viability around `x_bar`: `G(x) ⊂ S(x')` on sampled pairs,
/// i.e. every generator of `G(x)` feasible for `S(x')`. Holds automatically
/// when the set is state-independent.
pub fn check_upper_viability<F>(
    policy: F,
    set: &FeasibilitySet,
    x_bar: &[f64],
    radius: f64,
    samples: usize,
    seed: u64,
    feas_tol: f64,
) -> Result<ViabilityReport, FeasibilityError>
where
    F: Fn(&[f64]) -> Option<Polytope>,
{
    let pairs = sample_pairs(x_bar, radius, samples, seed);
    let total = pairs.len();
    for (x, x_prime) in pairs {
        let g = policy(&x).ok_or_else(|| FeasibilityError::EmptyPolicy(x.clone()))?;
        for gen in g.generators() {
            if !set.feasible(&x_prime, gen, feas_tol)? {
                return Ok(ViabilityReport {
                    kind: ViabilityKind::Upper,
                    radius,
                    samples: total,
                    verdict: ViabilityVerdict::Violated,
                    violation: Some((x, x_prime)),
                });
            }
        }
    }
    Ok(ViabilityReport {
        kind: ViabilityKind::Upper,
        radius,
        samples: total,
        verdict: ViabilityVerdict::HoldsOnSamples,
        violation: None,
    })
}
