//! Deterministic dynamic programming on grids: truncated backward induction,
//! policy extraction, and the value-subdifferential / Euler-inclusion
//! optimality conditions as executable checks.
//!
//! The model carries one stage per period: a state grid, a feasibility
//! multifunction `Γ_t` and a cost `u_t(x, y)` over the concatenated state and
//! action. Infinite horizons are truncated under a summable-cost condition:
//! the declared per-stage sup bounds give a tail below `epsilon` at some
//! finite `T_eff`, and the solver runs `v_{T_eff+1} ≡ 0` backwards from there.
//!
//! The Bellman minimization is discretized by contract: candidate actions are
//! the successor-stage grid nodes filtered by `Γ_t(x)`, augmented with the ℓ¹
//! projection of every node onto `Γ_t(x)`. Nodes with empty `Γ_t(x)` carry an
//! infeasible sentinel, never a float.
//!
//! Theorem-backed checks gate hard on the hypotheses they need (cost
//! regularity, sampled upper viability); the Euler check additionally records
//! — without gating on — whether the queried points are policy points, since
//! rejecting off-policy programs is exactly its job.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::expr::{Expr, ExprError, RegularityCertificate};
use crate::feasibility::{
    check_upper_viability, FeasibilityError, FeasibilitySet, ViabilityReport,
};
use crate::geometry::{
    contains_zero, CertTolerances, GeometryError, GradientPolytope, MembershipCertificate,
    PolyhedralCone, Polytope,
};
use crate::grid::{Grid, GridError, TableValue};

#[derive(Debug, Error)]
pub enum DpError {
    #[error("model validation: {0}")]
    Model(String),
    #[error("stage {0} out of range (model has {1} stages)")]
    StageOutOfRange(usize, usize),
    #[error("divergent cost bounds at stage {stage}: per-stage bound {bound} does not sum")]
    DivergentBounds { stage: usize, bound: f64 },
    #[error("truncation needs {needed} stage definitions but the model has {available}")]
    TooFewStages { needed: usize, available: usize },
    #[error("every grid node of stage {0} is infeasible")]
    AllInfeasible(usize),
    #[error("no feasible candidate action at state {0:?}")]
    EmptyFeasibleSet(Vec<f64>),
    #[error("program is inadmissible at stage {stage}: worst residual {residual:.3e}")]
    InadmissibleProgram { stage: usize, residual: f64 },
    #[error("program state {0:?} has an infeasible value entry")]
    InfeasibleProgramState(Vec<f64>),
    #[error("premise not satisfied: {0} is not a policy point (distance {1:.3e})")]
    NotPolicyPoint(String, f64),
    #[error("premise not satisfied: cost not certified regular at stage {stage}: {reason}")]
    CostNotRegular { stage: usize, reason: String },
    #[error("premise not satisfied: upper viability not certified at stage {stage} around {point:?}")]
    ViabilityNotCertified { stage: usize, point: Vec<f64> },
    #[error("partial gradient is not a singleton ({generators} generators)")]
    NonSingletonGradient { generators: usize },
    #[error("point is not strictly interior to the feasibility graph (margin {0:.3e})")]
    BoundaryPoint(f64),
    #[error("cost is not smooth at the queried point")]
    NonsmoothCost,
    #[error("expression error: {0}")]
    Expr(#[from] ExprError),
    #[error("feasibility error: {0}")]
    Feasibility(#[from] FeasibilityError),
    #[error("grid error: {0}")]
    Grid(#[from] GridError),
    #[error("geometry error: {0}")]
    Geometry(#[from] GeometryError),
}

/// One decision period: state grid, feasibility multifunction and stage cost
/// over the concatenated `(state, action)` coordinates.
#[derive(Clone, Debug)]
pub struct DpStage {
    pub grid: Grid,
    pub feasibility: FeasibilitySet,
    pub cost: Expr,
}

/// Per-stage sup-norm bounds of the costs, as a rule that extends to every
/// stage. `Geometric` covers the divergent cases (`ratio ≥ 1` with positive
/// base); an explicit list is zero beyond its end.
#[derive(Clone, Debug, Serialize)]
pub enum TailBounds {
    Geometric { base: f64, ratio: f64 },
    PerStage(Vec<f64>),
}

impl TailBounds {
    /// Σ_{t>horizon} bound_t, or `None` when the series diverges.
    pub fn tail(&self, horizon: usize) -> Option<f64> {
        match self {
            TailBounds::Geometric { base, ratio } => {
                if *base == 0.0 {
                    Some(0.0)
                } else if *ratio >= 1.0 || *ratio < 0.0 {
                    None
                } else {
                    Some(base * ratio.powi(horizon as i32 + 1) / (1.0 - ratio))
                }
            }
            TailBounds::PerStage(bounds) => Some(bounds.iter().skip(horizon + 1).sum()),
        }
    }

    pub fn stage_bound(&self, t: usize) -> f64 {
        match self {
            TailBounds::Geometric { base, ratio } => base * ratio.powi(t as i32),
            TailBounds::PerStage(bounds) => bounds.get(t).copied().unwrap_or(0.0),
        }
    }
}

#[derive(Clone, Debug)]
pub enum HorizonMode {
    /// The stage list is the whole horizon.
    Finite,
    /// Infinite horizon truncated where the declared tail drops below epsilon.
    Truncated { tail: TailBounds, epsilon: f64 },
}

#[derive(Clone, Debug)]
pub struct DpModel {
    pub stages: Vec<DpStage>,
    /// State grid of the stage after the last one (the last action space).
    pub terminal_grid: Grid,
    pub horizon: HorizonMode,
}

impl DpModel {
    pub fn validate(&self) -> Result<(), DpError> {
        if self.stages.is_empty() {
            return Err(DpError::Model("model has no stages".into()));
        }
        for (t, stage) in self.stages.iter().enumerate() {
            let state_dim = stage.grid.dim();
            let action_dim = self.action_grid(t).dim();
            if stage.feasibility.state_dim() != state_dim {
                return Err(DpError::Model(format!(
                    "stage {t}: feasibility expects {} state coordinates, grid has {state_dim}",
                    stage.feasibility.state_dim()
                )));
            }
            if stage.feasibility.action_dim() != action_dim {
                return Err(DpError::Model(format!(
                    "stage {t}: feasibility expects {} action coordinates, successor grid has {action_dim}",
                    stage.feasibility.action_dim()
                )));
            }
            if stage.cost.input_dim() != state_dim + action_dim {
                return Err(DpError::Model(format!(
                    "stage {t}: cost expects {} coordinates, state+action is {}",
                    stage.cost.input_dim(),
                    state_dim + action_dim
                )));
            }
        }
        if let HorizonMode::Truncated { tail: TailBounds::PerStage(bounds), .. } = &self.horizon {
            if bounds.iter().any(|b| *b < 0.0) {
                return Err(DpError::Model("negative per-stage bound".into()));
            }
        }
        Ok(())
    }

    pub fn state_grid(&self, t: usize) -> &Grid {
        if t < self.stages.len() {
            &self.stages[t].grid
        } else {
            &self.terminal_grid
        }
    }

    pub fn action_grid(&self, t: usize) -> &Grid {
        self.state_grid(t + 1)
    }

    /// Grid maximization of `|u_t|` over the discretized graph of `Γ_t`, as a
    /// fallback when analytic sup bounds are not supplied.
    pub fn estimate_stage_bound(&self, t: usize, opts: &SolveOptions) -> Result<f64, DpError> {
        let stage = self.stages.get(t).ok_or(DpError::StageOutOfRange(t, self.stages.len()))?;
        let mut best = 0.0f64;
        for x in stage.grid.nodes() {
            for y in candidate_actions(self, t, &x, opts)? {
                best = best.max(stage.cost.evaluate(&concat(&x, &y))?.abs());
            }
        }
        Ok(best)
    }
}

/// Truncation summary: the chosen horizon, its tail, and the tail profile for
/// horizons up to it.
#[derive(Clone, Debug, Serialize)]
pub struct SummabilityProfile {
    pub t_eff: usize,
    pub tail: f64,
    pub tail_profile: Vec<f64>,
}

/// Least horizon whose tail drops below epsilon, or the full stage list for
/// finite models. Fails on divergent bounds.
pub fn check_summability(model: &DpModel) -> Result<SummabilityProfile, DpError> {
    match &model.horizon {
        HorizonMode::Finite => Ok(SummabilityProfile {
            t_eff: model.stages.len().saturating_sub(1),
            tail: 0.0,
            tail_profile: vec![0.0],
        }),
        HorizonMode::Truncated { tail, epsilon } => {
            let mut profile = Vec::new();
            let cap = 1_000_000usize;
            for horizon in 0..cap {
                let Some(value) = tail.tail(horizon) else {
                    return Err(DpError::DivergentBounds {
                        stage: horizon,
                        bound: tail.stage_bound(horizon),
                    });
                };
                profile.push(value);
                if value <= *epsilon {
                    return Ok(SummabilityProfile {
                        t_eff: horizon,
                        tail: value,
                        tail_profile: profile,
                    });
                }
            }
            Err(DpError::DivergentBounds { stage: cap, bound: tail.stage_bound(cap) })
        }
    }
}

/// How candidate actions for the Bellman minimization are generated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CandidateScheme {
    /// Successor grid nodes filtered by feasibility.
    GridOnly,
    /// Grid nodes plus the ℓ¹ projection of every node onto `Γ_t(x)`.
    GridWithProjection,
}

#[derive(Clone, Debug)]
pub struct SolveOptions {
    pub candidates: CandidateScheme,
    pub feas_tol: f64,
    /// Solve a shorter or longer horizon than `T_eff` (still needs stages).
    pub horizon_override: Option<usize>,
    pub parallel: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            candidates: CandidateScheme::GridWithProjection,
            feas_tol: 1e-9,
            horizon_override: None,
            parallel: false,
        }
    }
}

/// Candidate actions at state `x` of stage `t`. Empty means `Γ_t(x)` met no
/// grid node and (under projection) is itself empty.
pub fn candidate_actions(
    model: &DpModel,
    t: usize,
    x: &[f64],
    opts: &SolveOptions,
) -> Result<Vec<Vec<f64>>, DpError> {
    let stage = model.stages.get(t).ok_or(DpError::StageOutOfRange(t, model.stages.len()))?;
    let grid = model.action_grid(t);
    let mut candidates: Vec<Vec<f64>> = Vec::new();
    for node in grid.nodes() {
        if stage.feasibility.feasible(x, &node, opts.feas_tol)? {
            push_dedup(&mut candidates, node);
        }
    }
    if opts.candidates == CandidateScheme::GridWithProjection {
        for node in grid.nodes() {
            match stage.feasibility.l1_projection(x, &node)? {
                Some((projected, _)) => push_dedup(&mut candidates, projected),
                None => return Ok(Vec::new()), // Γ_t(x) is empty
            }
        }
    }
    Ok(candidates)
}

fn push_dedup(list: &mut Vec<Vec<f64>>, point: Vec<f64>) {
    if !list.iter().any(|p| p.iter().zip(&point).all(|(a, b)| (a - b).abs() <= 1e-12)) {
        list.push(point);
    }
}

fn concat(x: &[f64], y: &[f64]) -> Vec<f64> {
    let mut joined = Vec::with_capacity(x.len() + y.len());
    joined.extend_from_slice(x);
    joined.extend_from_slice(y);
    joined
}

/// Solved value tables, one per stage from 0 through `t_eff`.
#[derive(Clone, Debug, Serialize)]
pub struct ValueTable {
    pub stage_values: Vec<Vec<TableValue>>,
    pub t_eff: usize,
    pub tail_error: f64,
}

impl ValueTable {
    /// Interpolated value at stage `t` (zero beyond the truncation horizon).
    pub fn value_at(&self, model: &DpModel, t: usize, x: &[f64]) -> Result<TableValue, DpError> {
        if t > self.t_eff {
            return Ok(TableValue::Finite(0.0));
        }
        Ok(model.state_grid(t).interpolate(&self.stage_values[t], x)?)
    }
}

/// Backward induction from `v_{T_eff+1} ≡ 0`.
pub fn solve_value(model: &DpModel, opts: &SolveOptions) -> Result<ValueTable, DpError> {
    model.validate()?;
    let profile = check_summability(model)?;
    let t_eff = opts.horizon_override.unwrap_or(profile.t_eff);
    if t_eff + 1 > model.stages.len() {
        return Err(DpError::TooFewStages { needed: t_eff + 1, available: model.stages.len() });
    }
    let tail_error = match &model.horizon {
        HorizonMode::Finite => 0.0,
        HorizonMode::Truncated { tail, .. } => tail.tail(t_eff).unwrap_or(f64::INFINITY),
    };

    let mut stage_values: Vec<Vec<TableValue>> = vec![Vec::new(); t_eff + 1];
    for t in (0..=t_eff).rev() {
        let grid = model.state_grid(t);
        let next_values = if t == t_eff { None } else { Some(&stage_values[t + 1]) };
        let next_grid = model.action_grid(t);
        let solve_node = |node_idx: usize| -> Result<TableValue, DpError> {
            let x = grid.node(node_idx);
            let candidates = candidate_actions(model, t, &x, opts)?;
            let mut best: Option<f64> = None;
            for y in &candidates {
                let continuation = match next_values {
                    None => 0.0,
                    Some(values) => match next_grid.interpolate(values, y)? {
                        TableValue::Finite(v) => v,
                        TableValue::Infeasible => continue,
                    },
                };
                let value = model.stages[t].cost.evaluate(&concat(&x, y))? + continuation;
                best = Some(match best {
                    None => value,
                    Some(b) => b.min(value),
                });
            }
            Ok(best.map_or(TableValue::Infeasible, TableValue::Finite))
        };
        let values: Vec<TableValue> = if opts.parallel {
            (0..grid.node_count())
                .into_par_iter()
                .map(solve_node)
                .collect::<Result<_, _>>()?
        } else {
            (0..grid.node_count()).map(solve_node).collect::<Result<_, _>>()?
        };
        if values.iter().all(|v| v.is_infeasible()) {
            return Err(DpError::AllInfeasible(t));
        }
        stage_values[t] = values;
    }
    Ok(ValueTable { stage_values, t_eff, tail_error })
}

/// The candidate actions attaining the Bellman minimum at `x` within
/// `value_tol` — the computational policy multifunction. Ties are returned as
/// a set, never broken.
pub fn extract_policy(
    model: &DpModel,
    table: &ValueTable,
    t: usize,
    x: &[f64],
    opts: &SolveOptions,
    value_tol: f64,
) -> Result<Polytope, DpError> {
    let candidates = candidate_actions(model, t, x, opts)?;
    if candidates.is_empty() {
        return Err(DpError::EmptyFeasibleSet(x.to_vec()));
    }
    let next_grid = model.action_grid(t);
    let mut scored: Vec<(Vec<f64>, f64)> = Vec::with_capacity(candidates.len());
    for y in candidates {
        let continuation = if t == table.t_eff {
            0.0
        } else {
            match next_grid.interpolate(&table.stage_values[t + 1], &y)? {
                TableValue::Finite(v) => v,
                TableValue::Infeasible => continue,
            }
        };
        let value = model.stages[t].cost.evaluate(&concat(x, &y))? + continuation;
        scored.push((y, value));
    }
    if scored.is_empty() {
        return Err(DpError::EmptyFeasibleSet(x.to_vec()));
    }
    let best = scored.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
    let winners: Vec<Vec<f64>> = scored
        .into_iter()
        .filter(|(_, v)| *v - best <= value_tol)
        .map(|(y, _)| y)
        .collect();
    Ok(Polytope::new(winners)?)
}

/// Per-stage Bellman residuals `v_t(x_t) − u_t(x_t, x_{t+1}) − v_{t+1}(x_{t+1})`
/// along an admissible program: always ≤ 0 up to interpolation tolerance, and
/// zero exactly at Bellman-consistent steps.
pub fn bellman_residual(
    model: &DpModel,
    table: &ValueTable,
    program: &[Vec<f64>],
    opts: &SolveOptions,
) -> Result<Vec<f64>, DpError> {
    if program.len() < 2 {
        return Err(DpError::Model("program needs at least two states".into()));
    }
    for (t, pair) in program.windows(2).enumerate() {
        let stage =
            model.stages.get(t).ok_or(DpError::StageOutOfRange(t, model.stages.len()))?;
        let residuals = stage.feasibility.residuals(&pair[0], &pair[1])?;
        let worst = residuals.iter().fold(f64::NEG_INFINITY, |a, &r| a.max(r));
        if worst > opts.feas_tol {
            return Err(DpError::InadmissibleProgram { stage: t, residual: worst });
        }
    }
    let mut out = Vec::with_capacity(program.len() - 1);
    for (t, pair) in program.windows(2).enumerate() {
        let v_t = table
            .value_at(model, t, &pair[0])?
            .finite()
            .ok_or_else(|| DpError::InfeasibleProgramState(pair[0].clone()))?;
        let v_next = table
            .value_at(model, t + 1, &pair[1])?
            .finite()
            .ok_or_else(|| DpError::InfeasibleProgramState(pair[1].clone()))?;
        let u = model.stages[t].cost.evaluate(&concat(&pair[0], &pair[1]))?;
        out.push(v_t - u - v_next);
    }
    Ok(out)
}

/// Tolerances and sampling controls for the theorem-backed checks.
#[derive(Clone, Debug)]
pub struct AuditOptions {
    /// Branch-activity tolerance for expression gradients.
    pub active_tol: f64,
    /// Activity tolerance for feasibility rows (scaled by row norms).
    pub cone_active_tol: f64,
    /// Value tolerance for Bellman ties in policy extraction.
    pub policy_value_tol: f64,
    /// Distance under which a queried action counts as a policy point.
    pub policy_point_tol: f64,
    pub viability_radius: f64,
    pub viability_samples: usize,
    pub seed: u64,
    /// Slack for finite-difference audits of solved tables.
    pub audit_tol: f64,
    /// Interpolation tolerance; defaults to `2·(max grid spacing)²`.
    pub interp_tol: Option<f64>,
    pub solve: SolveOptions,
    pub cert: CertTolerances,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self {
            active_tol: 1e-9,
            cone_active_tol: 1e-8,
            policy_value_tol: 1e-9,
            policy_point_tol: 1e-7,
            viability_radius: 0.05,
            viability_samples: 64,
            seed: 0,
            audit_tol: 1e-6,
            interp_tol: None,
            solve: SolveOptions::default(),
            cert: CertTolerances::default(),
        }
    }
}

impl AuditOptions {
    pub fn interp_tol_for(&self, grid: &Grid) -> f64 {
        self.interp_tol.unwrap_or_else(|| {
            let h = grid.max_spacing();
            2.0 * h * h
        })
    }
}

fn policy_distance(policy: &Polytope, y: &[f64]) -> f64 {
    policy
        .generators()
        .iter()
        .map(|g| g.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max))
        .fold(f64::INFINITY, f64::min)
}

fn require_policy_point(
    model: &DpModel,
    table: &ValueTable,
    t: usize,
    x: &[f64],
    y: &[f64],
    opts: &AuditOptions,
    what: &str,
) -> Result<(), DpError> {
    let policy = extract_policy(model, table, t, x, &opts.solve, opts.policy_value_tol)?;
    let dist = policy_distance(&policy, y);
    if dist > opts.policy_point_tol {
        return Err(DpError::NotPolicyPoint(what.to_string(), dist));
    }
    Ok(())
}

fn policy_closure<'a>(
    model: &'a DpModel,
    table: &'a ValueTable,
    t: usize,
    opts: &'a AuditOptions,
) -> impl Fn(&[f64]) -> Option<Polytope> + 'a {
    move |x: &[f64]| {
        let clamped = model.state_grid(t).clamp(x);
        extract_policy(model, table, t, &clamped, &opts.solve, opts.policy_value_tol).ok()
    }
}

fn require_upper_viability(
    model: &DpModel,
    table: &ValueTable,
    t: usize,
    x_bar: &[f64],
    opts: &AuditOptions,
) -> Result<ViabilityReport, DpError> {
    let report = check_upper_viability(
        policy_closure(model, table, t, opts),
        &model.stages[t].feasibility,
        x_bar,
        opts.viability_radius,
        opts.viability_samples,
        opts.seed,
        opts.solve.feas_tol,
    )?;
    if !report.holds() {
        return Err(DpError::ViabilityNotCertified { stage: t, point: x_bar.to_vec() });
    }
    Ok(report)
}

fn require_regular(
    cost: &Expr,
    point: &[f64],
    t: usize,
    opts: &AuditOptions,
) -> Result<RegularityCertificate, DpError> {
    let cert = cost.regularity(point, opts.active_tol)?;
    if !cert.is_regular() {
        return Err(DpError::CostNotRegular { stage: t, reason: cert.trace.join("; ") });
    }
    Ok(cert)
}

/// One-sided difference quotient of the solved table at `x` along `dir`,
/// maximized over a θ grid tied to the local spacing. `None` when every probe
/// leaves the grid box.
fn table_dir_quotient(
    model: &DpModel,
    table: &ValueTable,
    t: usize,
    x: &[f64],
    dir: &[f64],
) -> Result<Option<f64>, DpError> {
    let grid = model.state_grid(t);
    let mut h = f64::INFINITY;
    for (i, d) in dir.iter().enumerate() {
        if *d != 0.0 {
            h = h.min(grid.local_spacing(i, x[i]) / d.abs());
        }
    }
    if !h.is_finite() || h == 0.0 {
        return Ok(None);
    }
    let base = table
        .value_at(model, t, x)?
        .finite()
        .ok_or_else(|| DpError::InfeasibleProgramState(x.to_vec()))?;
    let mut best: Option<f64> = None;
    for theta in [h, 0.5 * h, 0.25 * h] {
        let probe: Vec<f64> = x.iter().zip(dir).map(|(xi, di)| xi + theta * di).collect();
        if !grid.contains(&probe, 1e-12) {
            continue;
        }
        if let TableValue::Finite(v) = table.value_at(model, t, &probe)? {
            let q = (v - base) / theta;
            best = Some(best.map_or(q, |b: f64| b.max(q)));
        }
    }
    Ok(best)
}

/// Central-difference gradient of the table at `x` (one-sided at box edges).
fn table_gradient(
    model: &DpModel,
    table: &ValueTable,
    t: usize,
    x: &[f64],
) -> Result<Vec<f64>, DpError> {
    let grid = model.state_grid(t);
    let value = |p: &[f64]| -> Result<Option<f64>, DpError> {
        if grid.contains(p, 1e-12) {
            Ok(table.value_at(model, t, p)?.finite())
        } else {
            Ok(None)
        }
    };
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let h = grid.local_spacing(i, x[i]);
        if h == 0.0 {
            continue;
        }
        let mut plus = x.to_vec();
        let mut minus = x.to_vec();
        plus[i] += h;
        minus[i] -= h;
        let vp = value(&plus)?;
        let vm = value(&minus)?;
        let v0 = value(x)?.ok_or_else(|| DpError::InfeasibleProgramState(x.to_vec()))?;
        g[i] = match (vp, vm) {
            (Some(a), Some(b)) => (a - b) / (2.0 * h),
            (Some(a), None) => (a - v0) / h,
            (None, Some(b)) => (v0 - b) / h,
            (None, None) => 0.0,
        };
    }
    Ok(g)
}

/// One audited coordinate direction of a value-subdifferential bound.
#[derive(Clone, Debug, Serialize)]
pub struct DirectionalAudit {
    pub direction: Vec<f64>,
    /// Finite-difference quotient of the solved table, when computable.
    pub table_quotient: Option<f64>,
    pub support: f64,
    pub within_tol: bool,
}

/// `∂°_x u_t(x̄, ȳ)` at a certified policy point, together with the numerical
/// audit that the table's directional quotients stay under its support values.
#[derive(Clone, Debug, Serialize)]
pub struct ValueSubdiffBound {
    pub polytope: GradientPolytope,
    pub viability: ViabilityReport,
    pub audits: Vec<DirectionalAudit>,
    pub audit_ok: bool,
}

pub fn value_subdiff_bound(
    model: &DpModel,
    table: &ValueTable,
    t: usize,
    x_bar: &[f64],
    y_bar: &[f64],
    opts: &AuditOptions,
) -> Result<ValueSubdiffBound, DpError> {
    let stage = model.stages.get(t).ok_or(DpError::StageOutOfRange(t, model.stages.len()))?;
    require_policy_point(model, table, t, x_bar, y_bar, opts, "the queried action")?;
    require_regular(&stage.cost, &concat(x_bar, y_bar), t, opts)?;
    let viability = require_upper_viability(model, table, t, x_bar, opts)?;

    let partial = Expr::bind_suffix(stage.cost.clone(), y_bar.to_vec())?;
    let polytope = partial.clarke_gradient(x_bar, opts.active_tol)?;

    let mut audits = Vec::new();
    let mut audit_ok = true;
    for i in 0..x_bar.len() {
        for sign in [1.0, -1.0] {
            let mut dir = vec![0.0; x_bar.len()];
            dir[i] = sign;
            let quotient = table_dir_quotient(model, table, t, x_bar, &dir)?;
            let support = polytope.support(&dir)?;
            let within = match quotient {
                Some(q) => q <= support + opts.audit_tol,
                None => true,
            };
            audit_ok &= within;
            audits.push(DirectionalAudit {
                direction: dir,
                table_quotient: quotient,
                support,
                within_tol: within,
            });
        }
    }
    Ok(ValueSubdiffBound { polytope, viability, audits, audit_ok })
}

/// Strict derivative of the value function where the partial cost gradient is
/// a singleton, audited against central differences of the solved table.
#[derive(Clone, Debug, Serialize)]
pub struct StrictDiffValue {
    pub gradient: Vec<f64>,
    pub table_gradient: Vec<f64>,
    pub tolerance: f64,
    pub ok: bool,
}

pub fn strict_diff_value(
    model: &DpModel,
    table: &ValueTable,
    t: usize,
    x_bar: &[f64],
    y_bar: &[f64],
    opts: &AuditOptions,
) -> Result<StrictDiffValue, DpError> {
    let stage = model.stages.get(t).ok_or(DpError::StageOutOfRange(t, model.stages.len()))?;
    require_policy_point(model, table, t, x_bar, y_bar, opts, "the queried action")?;
    require_regular(&stage.cost, &concat(x_bar, y_bar), t, opts)?;
    require_upper_viability(model, table, t, x_bar, opts)?;

    let partial = Expr::bind_suffix(stage.cost.clone(), y_bar.to_vec())?;
    let set = partial.clarke_gradient(x_bar, opts.active_tol)?;
    let gradient = set
        .as_singleton()
        .ok_or(DpError::NonSingletonGradient { generators: set.generators().len() })?
        .to_vec();

    let table_grad = table_gradient(model, table, t, x_bar)?;
    let tolerance = 10.0 * opts.interp_tol_for(model.state_grid(t));
    let ok = gradient
        .iter()
        .zip(&table_grad)
        .all(|(a, b)| (a - b).abs() <= tolerance + opts.audit_tol);
    Ok(StrictDiffValue { gradient, table_gradient: table_grad, tolerance, ok })
}

/// Interior smooth stationarity residual
/// `‖∇_y u_t(x̄, ȳ) + ∇̃v_{t+1}(ȳ)‖₂` with `∇̃` the table's FD gradient.
pub fn interior_stationarity_check(
    model: &DpModel,
    table: &ValueTable,
    t: usize,
    x_bar: &[f64],
    y_bar: &[f64],
    opts: &AuditOptions,
) -> Result<f64, DpError> {
    let stage = model.stages.get(t).ok_or(DpError::StageOutOfRange(t, model.stages.len()))?;
    let residuals = stage.feasibility.residuals(x_bar, y_bar)?;
    let worst = residuals.iter().fold(f64::NEG_INFINITY, |a, &r| a.max(r));
    if worst > -opts.cone_active_tol {
        return Err(DpError::BoundaryPoint(worst));
    }
    let joined = concat(x_bar, y_bar);
    let joint = stage.cost.clarke_gradient(&joined, opts.active_tol)?;
    if joint.as_singleton().is_none() {
        return Err(DpError::NonsmoothCost);
    }
    let partial = Expr::bind_prefix(stage.cost.clone(), x_bar.to_vec())?;
    let gy = partial
        .clarke_gradient(y_bar, opts.active_tol)?
        .as_singleton()
        .ok_or(DpError::NonsmoothCost)?
        .to_vec();
    let vgrad = if t + 1 > table.t_eff {
        vec![0.0; y_bar.len()]
    } else {
        table_gradient(model, table, t + 1, y_bar)?
    };
    Ok(gy.iter().zip(&vgrad).map(|(a, b)| (a + b) * (a + b)).sum::<f64>().sqrt())
}

/// Whether the queried points sit on the extracted policy; recorded, not
/// gated: rejecting off-policy programs is what the Euler check is for.
#[derive(Clone, Debug, Serialize)]
pub struct PolicyPremise {
    pub action_on_policy: bool,
    pub action_distance: f64,
    pub next_on_policy: bool,
    pub next_distance: f64,
}

/// The assembled Euler inclusion at one stage: the two partial gradient
/// polytopes, the normal cone and the membership certificate for
/// `0 ∈ ∂°_y u_t + ∂°_x u_{t+1} + N°(ȳ; Γ_t(x̄))`.
#[derive(Clone, Debug, Serialize)]
pub struct EulerCertificate {
    pub stage: usize,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_action: Vec<f64>,
    pub policy: PolicyPremise,
    pub part_action: GradientPolytope,
    pub part_next_state: GradientPolytope,
    pub normal_cone: PolyhedralCone,
    pub membership: MembershipCertificate,
}

pub fn euler_check(
    model: &DpModel,
    table: &ValueTable,
    t: usize,
    x_bar: &[f64],
    y_bar: &[f64],
    z_bar: &[f64],
    opts: &AuditOptions,
) -> Result<EulerCertificate, DpError> {
    if t + 1 > table.t_eff || t + 1 >= model.stages.len() {
        return Err(DpError::StageOutOfRange(t + 1, model.stages.len()));
    }
    let stage_t = &model.stages[t];
    let stage_next = &model.stages[t + 1];

    require_regular(&stage_t.cost, &concat(x_bar, y_bar), t, opts)?;
    require_regular(&stage_next.cost, &concat(y_bar, z_bar), t + 1, opts)?;
    require_upper_viability(model, table, t, x_bar, opts)?;
    require_upper_viability(model, table, t + 1, y_bar, opts)?;

    let policy_t = extract_policy(model, table, t, x_bar, &opts.solve, opts.policy_value_tol)?;
    let action_distance = policy_distance(&policy_t, y_bar);
    let policy_next =
        extract_policy(model, table, t + 1, y_bar, &opts.solve, opts.policy_value_tol)?;
    let next_distance = policy_distance(&policy_next, z_bar);
    let policy = PolicyPremise {
        action_on_policy: action_distance <= opts.policy_point_tol,
        action_distance,
        next_on_policy: next_distance <= opts.policy_point_tol,
        next_distance,
    };

    let part_action = Expr::bind_prefix(stage_t.cost.clone(), x_bar.to_vec())?
        .clarke_gradient(y_bar, opts.active_tol)?;
    let part_next_state = Expr::bind_suffix(stage_next.cost.clone(), z_bar.to_vec())?
        .clarke_gradient(y_bar, opts.active_tol)?;
    let normal_cone = stage_t.feasibility.normal_cone(x_bar, y_bar, opts.cone_active_tol)?;
    let membership = contains_zero(
        &[part_action.clone(), part_next_state.clone()],
        &normal_cone,
        &opts.cert,
    )?;
    Ok(EulerCertificate {
        stage: t,
        state: x_bar.to_vec(),
        action: y_bar.to_vec(),
        next_action: z_bar.to_vec(),
        policy,
        part_action,
        part_next_state,
        normal_cone,
        membership,
    })
}
