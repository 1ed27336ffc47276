//! Stochastic dynamic programming on finite scenario trees.
//!
//! The sample space is a finite list of atoms with positive probabilities; the
//! filtration is a chain of partitions, each refining the previous one, with
//! the stage `-1` information identified with stage 0. Adapted processes are
//! stage-indexed vectors constant on the cells of the previous partition —
//! measurability is checked exactly, bit for bit, never approximately.
//!
//! The model reduces to a deterministic one by giving each information cell
//! its own coordinate block: stage-`t` states get one block per cell of
//! `Σ_{t-1}`, feasibility sets assemble block-diagonally, and the stage cost
//! becomes the probability-weighted sum of per-cell costs. The reduction is
//! exact: objectives of adapted processes agree with the reduced objective on
//! flattened vectors, and a one-atom tree collapses to the deterministic model
//! verbatim.
//!
//! The stochastic Euler check works pointwise per atom — three per-atom sets
//! and one membership certificate each, no integration anywhere.

use serde::Serialize;
use thiserror::Error;

use crate::dp::{
    self, AuditOptions, DpError, DpModel, DpStage, EulerCertificate, HorizonMode, PolicyPremise,
    TailBounds, ValueTable,
};
use crate::expr::{Expr, ExprError};
use crate::feasibility::{FeasibilityError, FeasibilitySet};
use crate::geometry::{
    contains_zero, GeometryError, GradientPolytope, MembershipCertificate, PolyhedralCone,
};
use crate::grid::Grid;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Error)]
pub enum StochasticError {
    #[error("scenario tree invalid: {}", format_issues(.0))]
    Tree(Vec<TreeIssue>),
    #[error("process not adapted at stage {stage}: cell {cell:?} carries distinct values {values:?}")]
    NotAdapted { stage: usize, cell: Vec<usize>, values: Vec<Vec<f64>> },
    #[error("model data not constant on information cells: stage {stage}, cell {cell:?} ({what})")]
    CellConstancy { stage: usize, cell: Vec<usize>, what: &'static str },
    #[error("model validation: {0}")]
    Model(String),
    #[error("atom {atom} infeasible: {detail}")]
    AtomInfeasible { atom: usize, detail: String },
    #[error("atom {atom} cost not certified regular: {trace}")]
    AtomNotRegular { atom: usize, trace: String },
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error("expression error: {0}")]
    Expr(#[from] ExprError),
    #[error("feasibility error: {0}")]
    Feasibility(#[from] FeasibilityError),
    #[error("geometry error: {0}")]
    Geometry(#[from] GeometryError),
}

fn format_issues(issues: &[TreeIssue]) -> String {
    issues.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum TreeIssue {
    NonPositiveProbability { atom: usize, value: f64 },
    ProbabilitySum { total: f64 },
    MalformedPartition { stage: usize, detail: String },
    RefinementViolated { stage: usize, cell: Vec<usize> },
}

impl std::fmt::Display for TreeIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TreeIssue::NonPositiveProbability { atom, value } => {
                write!(f, "atom {atom} has nonpositive probability {value}")
            }
            TreeIssue::ProbabilitySum { total } => {
                write!(f, "probabilities sum to {total}, expected 1")
            }
            TreeIssue::MalformedPartition { stage, detail } => {
                write!(f, "partition at stage {stage} malformed: {detail}")
            }
            TreeIssue::RefinementViolated { stage, cell } => {
                write!(f, "refinement violated at stage {stage}: cell {cell:?} splits an earlier cell")
            }
        }
    }
}

/// Finite filtered probability space: atoms with positive probabilities
/// summing to one, and per-stage partitions forming a refinement chain. The
/// stage `-1` information is the stage-0 partition by convention.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScenarioTree {
    probabilities: Vec<f64>,
    partitions: Vec<Vec<Vec<usize>>>,
}

impl ScenarioTree {
    /// List every defect of the raw data; an empty list means a valid tree.
    pub fn diagnose(probabilities: &[f64], partitions: &[Vec<Vec<usize>>]) -> Vec<TreeIssue> {
        let mut issues = Vec::new();
        let atoms = probabilities.len();
        for (i, p) in probabilities.iter().enumerate() {
            if p.is_nan() || *p <= 0.0 {
                issues.push(TreeIssue::NonPositiveProbability { atom: i, value: *p });
            }
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            issues.push(TreeIssue::ProbabilitySum { total });
        }
        for (t, partition) in partitions.iter().enumerate() {
            let mut seen = vec![false; atoms];
            for cell in partition {
                if cell.is_empty() {
                    issues.push(TreeIssue::MalformedPartition {
                        stage: t,
                        detail: "empty cell".into(),
                    });
                }
                for &a in cell {
                    if a >= atoms {
                        issues.push(TreeIssue::MalformedPartition {
                            stage: t,
                            detail: format!("atom index {a} out of range"),
                        });
                    } else if seen[a] {
                        issues.push(TreeIssue::MalformedPartition {
                            stage: t,
                            detail: format!("atom {a} appears twice"),
                        });
                    } else {
                        seen[a] = true;
                    }
                }
            }
            if seen.iter().any(|s| !s) {
                issues.push(TreeIssue::MalformedPartition {
                    stage: t,
                    detail: "cells do not cover every atom".into(),
                });
            }
        }
        for t in 1..partitions.len() {
            // Every later cell must sit inside one earlier cell.
            for cell in &partitions[t] {
                let inside_one = partitions[t - 1].iter().any(|coarse| {
                    cell.iter().all(|a| coarse.contains(a))
                });
                if !inside_one {
                    issues.push(TreeIssue::RefinementViolated { stage: t, cell: cell.clone() });
                }
            }
        }
        issues
    }

    pub fn new(
        probabilities: Vec<f64>,
        partitions: Vec<Vec<Vec<usize>>>,
    ) -> Result<Self, StochasticError> {
        let issues = Self::diagnose(&probabilities, &partitions);
        if !issues.is_empty() {
            return Err(StochasticError::Tree(issues));
        }
        Ok(Self { probabilities, partitions })
    }

    pub fn atom_count(&self) -> usize {
        self.probabilities.len()
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn stage_count(&self) -> usize {
        self.partitions.len()
    }

    /// Information partition `Σ_t` available when the stage-`t` action is
    /// chosen.
    pub fn info_partition(&self, t: usize) -> &[Vec<usize>] {
        &self.partitions[t]
    }

    /// Partition the stage-`t` state is measurable against: `Σ_{t-1}`, with
    /// `Σ_{-1} ≡ Σ_0`.
    pub fn state_partition(&self, t: usize) -> &[Vec<usize>] {
        if t == 0 {
            &self.partitions[0]
        } else {
            &self.partitions[t - 1]
        }
    }

    /// μ of a cell, accumulated in the cell's atom order (shared with the
    /// reduction so weighted sums agree exactly).
    pub fn cell_probability(&self, cell: &[usize]) -> f64 {
        let mut total = 0.0;
        for &a in cell {
            total += self.probabilities[a];
        }
        total
    }
}

/// Stage-indexed per-atom vectors; stage `t` must be constant on the cells of
/// `Σ_{t-1}` (checked exactly).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdaptedProcess {
    /// `stages[t][atom]` is the stage-`t` value at that atom.
    pub stages: Vec<Vec<Vec<f64>>>,
}

/// Exact cell-constancy check of a per-atom stage value against a partition.
fn check_cell_constant(
    values: &[Vec<f64>],
    partition: &[Vec<usize>],
    stage: usize,
) -> Result<(), StochasticError> {
    for cell in partition {
        let first = &values[cell[0]];
        for &a in cell {
            if &values[a] != first {
                return Err(StochasticError::NotAdapted {
                    stage,
                    cell: cell.clone(),
                    values: cell.iter().map(|&a| values[a].clone()).collect(),
                });
            }
        }
    }
    Ok(())
}

/// Verify measurability of every stage of the process against the tree; the
/// first violation is reported with its stage, cell and values.
pub fn validate_adapted(process: &AdaptedProcess, tree: &ScenarioTree) -> Result<(), StochasticError> {
    for (t, values) in process.stages.iter().enumerate() {
        if values.len() != tree.atom_count() {
            return Err(StochasticError::Model(format!(
                "stage {t} carries {} atom values, tree has {}",
                values.len(),
                tree.atom_count()
            )));
        }
        check_cell_constant(values, tree.state_partition(t), t)?;
    }
    Ok(())
}

/// Per-atom sup-norm bounds of the stage costs, per stage.
#[derive(Clone, Debug, Serialize)]
pub enum StochasticTail {
    /// `bound_t(ω) = base(ω)·ratio^t`.
    Geometric { base: Vec<f64>, ratio: f64 },
    /// Explicit `[stage][atom]` bounds, zero beyond the list.
    PerStage(Vec<Vec<f64>>),
}

#[derive(Clone, Debug)]
pub enum StochasticHorizon {
    Finite,
    Truncated { tail: StochasticTail, epsilon: f64 },
}

/// Nominal exponent of the ambient function spaces. All choices coincide on a
/// finite sample space; the field is carried for documentation only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum PExponent {
    Finite(f64),
    Infinity,
}

/// One stochastic stage: base grid axes on `E_t`, and per-atom costs
/// `φ_t(·,·,ω)` over `(E_t, E_{t+1})` and feasibility sets `Φ_t(·,ω)`, both
/// constant across atoms within each information cell.
#[derive(Clone, Debug)]
pub struct StochasticStage {
    pub axes: Vec<Vec<f64>>,
    pub costs: Vec<Expr>,
    pub feasibility: Vec<FeasibilitySet>,
    /// Declared Lipschitz data `k_t(ω)` per atom.
    pub lipschitz: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct StochasticDpModel {
    pub tree: ScenarioTree,
    pub stages: Vec<StochasticStage>,
    /// Base grid axes of the terminal state space `E_L`.
    pub terminal_axes: Vec<Vec<f64>>,
    /// Integrable envelope `α(ω)` per atom.
    pub alpha: Vec<f64>,
    pub horizon: StochasticHorizon,
    pub nominal_p: PExponent,
}

impl StochasticDpModel {
    pub fn state_dim(&self, t: usize) -> usize {
        if t < self.stages.len() {
            self.stages[t].axes.len()
        } else {
            self.terminal_axes.len()
        }
    }

    pub fn validate(&self) -> Result<(), StochasticError> {
        let atoms = self.tree.atom_count();
        if self.stages.is_empty() {
            return Err(StochasticError::Model("model has no stages".into()));
        }
        if self.tree.stage_count() < self.stages.len() {
            return Err(StochasticError::Model(format!(
                "{} stages need at least as many filtration partitions, tree has {}",
                self.stages.len(),
                self.tree.stage_count()
            )));
        }
        if self.alpha.len() != atoms {
            return Err(StochasticError::Model("alpha must carry one entry per atom".into()));
        }
        for (t, stage) in self.stages.iter().enumerate() {
            if stage.costs.len() != atoms
                || stage.feasibility.len() != atoms
                || stage.lipschitz.len() != atoms
            {
                return Err(StochasticError::Model(format!(
                    "stage {t}: per-atom data must carry {atoms} entries"
                )));
            }
            let dim_state = self.state_dim(t);
            let dim_action = self.state_dim(t + 1);
            for (atom, cost) in stage.costs.iter().enumerate() {
                if cost.input_dim() != dim_state + dim_action {
                    return Err(StochasticError::Model(format!(
                        "stage {t}, atom {atom}: cost expects {} coordinates, state+action is {}",
                        cost.input_dim(),
                        dim_state + dim_action
                    )));
                }
            }
            for (atom, set) in stage.feasibility.iter().enumerate() {
                if set.state_dim() != dim_state || set.action_dim() != dim_action {
                    return Err(StochasticError::Model(format!(
                        "stage {t}, atom {atom}: feasibility dims ({}, {}) disagree with ({dim_state}, {dim_action})",
                        set.state_dim(),
                        set.action_dim()
                    )));
                }
            }
            // Assumption: the stage data is measurable against Σ_t.
            for cell in self.tree.info_partition(t) {
                let first_cost = &stage.costs[cell[0]];
                let first_set = &stage.feasibility[cell[0]];
                for &a in cell {
                    if &stage.costs[a] != first_cost {
                        return Err(StochasticError::CellConstancy {
                            stage: t,
                            cell: cell.clone(),
                            what: "cost expression",
                        });
                    }
                    if &stage.feasibility[a] != first_set {
                        return Err(StochasticError::CellConstancy {
                            stage: t,
                            cell: cell.clone(),
                            what: "feasibility set",
                        });
                    }
                }
            }
        }
        match &self.horizon {
            StochasticHorizon::Finite => {}
            StochasticHorizon::Truncated { tail, .. } => match tail {
                StochasticTail::Geometric { base, .. } if base.len() != atoms => {
                    return Err(StochasticError::Model(
                        "geometric tail base must carry one entry per atom".into(),
                    ));
                }
                StochasticTail::PerStage(rows) if rows.iter().any(|r| r.len() != atoms) => {
                    return Err(StochasticError::Model(
                        "per-stage tail rows must carry one entry per atom".into(),
                    ));
                }
                _ => {}
            },
        }
        Ok(())
    }
}

/// The deterministic reduction: cell-block coordinates per stage, the
/// assembled [`DpModel`], and the flatten/unflatten maps between adapted
/// processes and reduced vectors.
#[derive(Clone, Debug)]
pub struct Reduction {
    pub model: DpModel,
    /// `state_cells[t]`: the cells of `Σ_{t-1}` in block order, `t = 0..=L`.
    state_cells: Vec<Vec<Vec<usize>>>,
    dims: Vec<usize>,
}

impl Reduction {
    pub fn state_cells(&self, t: usize) -> &[Vec<usize>] {
        &self.state_cells[t]
    }

    /// Flatten per-atom stage values into the reduced coordinates (one block
    /// per information cell), verifying adaptedness exactly.
    pub fn flatten_stage(&self, t: usize, values: &[Vec<f64>]) -> Result<Vec<f64>, StochasticError> {
        let cells = &self.state_cells[t];
        check_cell_constant(values, cells, t)?;
        let mut flat = Vec::with_capacity(cells.len() * self.dims[t]);
        for cell in cells {
            let v = &values[cell[0]];
            if v.len() != self.dims[t] {
                return Err(StochasticError::Model(format!(
                    "stage {t} value has {} coordinates, expected {}",
                    v.len(),
                    self.dims[t]
                )));
            }
            flat.extend_from_slice(v);
        }
        Ok(flat)
    }

    /// Expand reduced coordinates back to per-atom values.
    pub fn unflatten_stage(&self, t: usize, flat: &[f64]) -> Vec<Vec<f64>> {
        let cells = &self.state_cells[t];
        let dim = self.dims[t];
        let atoms = cells.iter().map(|c| c.iter().max().map_or(0, |m| m + 1)).max().unwrap_or(0);
        let mut out = vec![Vec::new(); atoms];
        for (ci, cell) in cells.iter().enumerate() {
            let block = &flat[ci * dim..(ci + 1) * dim];
            for &a in cell {
                out[a] = block.to_vec();
            }
        }
        out
    }

    /// Flatten a whole adapted process into a reduced program.
    pub fn flatten_process(&self, process: &AdaptedProcess) -> Result<Vec<Vec<f64>>, StochasticError> {
        process
            .stages
            .iter()
            .enumerate()
            .map(|(t, values)| self.flatten_stage(t, values))
            .collect()
    }
}

/// Build the reduced deterministic model: one coordinate block per
/// information cell, block-diagonal feasibility, probability-weighted costs.
pub fn reduce_to_deterministic(smodel: &StochasticDpModel) -> Result<Reduction, StochasticError> {
    smodel.validate()?;
    let levels = smodel.stages.len();
    let mut state_cells: Vec<Vec<Vec<usize>>> = Vec::with_capacity(levels + 1);
    let mut dims = Vec::with_capacity(levels + 1);
    for t in 0..=levels {
        state_cells.push(smodel.tree.state_partition(t).to_vec());
        dims.push(smodel.state_dim(t));
    }

    let reduced_grid = |t: usize| -> Result<Grid, StochasticError> {
        let axes_base =
            if t < levels { &smodel.stages[t].axes } else { &smodel.terminal_axes };
        let mut axes = Vec::with_capacity(state_cells[t].len() * dims[t]);
        for _ in 0..state_cells[t].len() {
            axes.extend(axes_base.iter().cloned());
        }
        Grid::new(axes).map_err(|e| StochasticError::Model(e.to_string()))
    };

    let mut stages = Vec::with_capacity(levels);
    for t in 0..levels {
        let stage = &smodel.stages[t];
        let x_cells = &state_cells[t];
        let y_cells = &state_cells[t + 1]; // Σ_t cells
        let dim_x = dims[t];
        let dim_y = dims[t + 1];
        let x_dim = x_cells.len() * dim_x;
        let y_dim = y_cells.len() * dim_y;

        // Cost: Σ over action cells of μ(cell)·φ on the matched blocks.
        let mut terms = Vec::with_capacity(y_cells.len());
        // Feasibility: block-diagonal stack of the per-cell copies of Φ.
        let mut rows_a: Vec<Vec<f64>> = Vec::new();
        let mut rows_b: Vec<f64> = Vec::new();
        let mut rows_c: Vec<Vec<f64>> = Vec::new();

        for (ci, cell) in y_cells.iter().enumerate() {
            let rep = cell[0];
            let parent = x_cells
                .iter()
                .position(|coarse| coarse.contains(&rep))
                .ok_or_else(|| StochasticError::Model(format!(
                    "stage {t}: information cell {cell:?} is not inside any state cell"
                )))?;
            let mut map = Vec::with_capacity(dim_x + dim_y);
            for i in 0..dim_x {
                map.push(parent * dim_x + i);
            }
            for i in 0..dim_y {
                map.push(x_dim + ci * dim_y + i);
            }
            let embedded = stage.costs[rep].embed(&map, x_dim + y_dim)?;
            terms.push(Expr::scale(smodel.tree.cell_probability(cell), embedded)?);

            let (a, b, c) = stage.feasibility[rep].rows();
            for (row_idx, row) in a.iter().enumerate() {
                let mut wide_a = vec![0.0; y_dim];
                wide_a[ci * dim_y..(ci + 1) * dim_y].copy_from_slice(row);
                rows_a.push(wide_a);
                rows_b.push(b[row_idx]);
                let mut wide_c = vec![0.0; x_dim];
                wide_c[parent * dim_x..(parent + 1) * dim_x].copy_from_slice(&c[row_idx]);
                rows_c.push(wide_c);
            }
        }

        stages.push(DpStage {
            grid: reduced_grid(t)?,
            feasibility: FeasibilitySet::polyhedral(rows_a, rows_b, rows_c, x_dim, y_dim)?,
            cost: Expr::sum(terms)?,
        });
    }

    let horizon = match &smodel.horizon {
        StochasticHorizon::Finite => HorizonMode::Finite,
        StochasticHorizon::Truncated { tail, epsilon } => {
            let tail = match tail {
                StochasticTail::Geometric { base, ratio } => TailBounds::Geometric {
                    base: weighted_total(&smodel.tree, base),
                    ratio: *ratio,
                },
                StochasticTail::PerStage(rows) => TailBounds::PerStage(
                    rows.iter().map(|row| weighted_total(&smodel.tree, row)).collect(),
                ),
            };
            HorizonMode::Truncated { tail, epsilon: *epsilon }
        }
    };

    let model = DpModel { stages, terminal_grid: reduced_grid(levels)?, horizon };
    model.validate()?;
    Ok(Reduction { model, state_cells, dims })
}

fn weighted_total(tree: &ScenarioTree, per_atom: &[f64]) -> f64 {
    per_atom.iter().zip(tree.probabilities()).map(|(b, p)| b * p).sum()
}

fn joined(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

/// The integral stage cost `Σ_ω μ(ω)·φ_t(f(ω), g(ω), ω)`, accumulated per
/// information cell in block order so it agrees exactly with the reduced
/// cost on flattened coordinates.
pub fn integral_cost(
    smodel: &StochasticDpModel,
    t: usize,
    f: &[Vec<f64>],
    g: &[Vec<f64>],
) -> Result<f64, StochasticError> {
    let stage = smodel
        .stages
        .get(t)
        .ok_or_else(|| StochasticError::Model(format!("stage {t} out of range")))?;
    check_cell_constant(f, smodel.tree.state_partition(t), t)?;
    check_cell_constant(g, smodel.tree.info_partition(t), t + 1)?;
    let mut acc = 0.0;
    for cell in smodel.tree.info_partition(t) {
        let rep = cell[0];
        let value = stage.costs[rep].evaluate(&joined(&f[rep], &g[rep]))?;
        acc += smodel.tree.cell_probability(cell) * value;
    }
    Ok(acc)
}

/// Which argument block of `φ_t(x, y, ω)` to differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    State,
    Action,
}

/// Per-atom partial generalized gradients of the integrand at `(f̄, ḡ)`.
/// Under the μ-weighted pairing, this family is the generalized gradient of
/// the integral functional; regularity of every atom cost is a hard gate.
pub fn integral_subdiff(
    smodel: &StochasticDpModel,
    t: usize,
    f: &[Vec<f64>],
    g: &[Vec<f64>],
    block: Block,
    active_tol: f64,
) -> Result<Vec<GradientPolytope>, StochasticError> {
    let stage = smodel
        .stages
        .get(t)
        .ok_or_else(|| StochasticError::Model(format!("stage {t} out of range")))?;
    check_cell_constant(f, smodel.tree.state_partition(t), t)?;
    check_cell_constant(g, smodel.tree.info_partition(t), t + 1)?;
    let mut out = Vec::with_capacity(smodel.tree.atom_count());
    for atom in 0..smodel.tree.atom_count() {
        let cost = &stage.costs[atom];
        let point = joined(&f[atom], &g[atom]);
        let cert = cost.regularity(&point, active_tol)?;
        if !cert.is_regular() {
            return Err(StochasticError::AtomNotRegular { atom, trace: cert.trace.join("; ") });
        }
        let partial = match block {
            Block::State => Expr::bind_suffix(cost.clone(), g[atom].clone())?,
            Block::Action => Expr::bind_prefix(cost.clone(), f[atom].clone())?,
        };
        let at = match block {
            Block::State => &f[atom],
            Block::Action => &g[atom],
        };
        out.push(partial.clarke_gradient(at, active_tol)?);
    }
    Ok(out)
}

/// Per-atom normal cones `N°(ḡ(ω); Φ_t(f̄(ω), ω))` — the generalized normals
/// to the set of measurable selections, read pointwise.
pub fn selection_normal_cone(
    smodel: &StochasticDpModel,
    t: usize,
    f: &[Vec<f64>],
    g: &[Vec<f64>],
    active_tol: f64,
) -> Result<Vec<PolyhedralCone>, StochasticError> {
    let stage = smodel
        .stages
        .get(t)
        .ok_or_else(|| StochasticError::Model(format!("stage {t} out of range")))?;
    check_cell_constant(f, smodel.tree.state_partition(t), t)?;
    check_cell_constant(g, smodel.tree.info_partition(t), t + 1)?;
    let mut out = Vec::with_capacity(smodel.tree.atom_count());
    for atom in 0..smodel.tree.atom_count() {
        let cone = stage.feasibility[atom]
            .normal_cone(&f[atom], &g[atom], active_tol)
            .map_err(|e| StochasticError::AtomInfeasible { atom, detail: e.to_string() })?;
        out.push(cone);
    }
    Ok(out)
}

/// Per-atom value-subdifferential bound for stochastic DP: the family
/// `∂°_x φ_t(f̄(ω), ḡ(ω), ω)`, plus the strict-derivative family when every
/// member is a singleton.
#[derive(Clone, Debug, Serialize)]
pub struct StochasticValueSubdiff {
    pub per_atom: Vec<GradientPolytope>,
    /// Present when every atom polytope is a singleton.
    pub strict: Option<Vec<Vec<f64>>>,
}

pub fn stochastic_value_subdiff(
    smodel: &StochasticDpModel,
    reduction: &Reduction,
    table: &ValueTable,
    t: usize,
    f: &[Vec<f64>],
    g: &[Vec<f64>],
    opts: &AuditOptions,
) -> Result<StochasticValueSubdiff, StochasticError> {
    let x = reduction.flatten_stage(t, f)?;
    let y = reduction.flatten_stage(t + 1, g)?;
    // Reduced-model premises: policy membership and sampled upper viability.
    let policy = dp::extract_policy(
        &reduction.model,
        table,
        t,
        &x,
        &opts.solve,
        opts.policy_value_tol,
    )?;
    let dist = policy
        .generators()
        .iter()
        .map(|gen| gen.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max))
        .fold(f64::INFINITY, f64::min);
    if dist > opts.policy_point_tol {
        return Err(StochasticError::Dp(DpError::NotPolicyPoint(
            "the queried adapted action".into(),
            dist,
        )));
    }
    require_reduced_upper_viability(reduction, table, t, &x, opts)?;

    let per_atom = integral_subdiff(smodel, t, f, g, Block::State, opts.active_tol)?;
    let strict = per_atom
        .iter()
        .map(|p| p.as_singleton().map(|s| s.to_vec()))
        .collect::<Option<Vec<_>>>();
    Ok(StochasticValueSubdiff { per_atom, strict })
}

fn require_reduced_upper_viability(
    reduction: &Reduction,
    table: &ValueTable,
    t: usize,
    x: &[f64],
    opts: &AuditOptions,
) -> Result<(), StochasticError> {
    let model = &reduction.model;
    let report = crate::feasibility::check_upper_viability(
        |p: &[f64]| {
            let clamped = model.state_grid(t).clamp(p);
            dp::extract_policy(model, table, t, &clamped, &opts.solve, opts.policy_value_tol).ok()
        },
        &model.stages[t].feasibility,
        x,
        opts.viability_radius,
        opts.viability_samples,
        opts.seed,
        opts.solve.feas_tol,
    )?;
    if !report.holds() {
        return Err(StochasticError::Dp(DpError::ViabilityNotCertified {
            stage: t,
            point: x.to_vec(),
        }));
    }
    Ok(())
}

/// One atom's share of the stochastic Euler inclusion.
#[derive(Clone, Debug, Serialize)]
pub struct AtomEulerOutcome {
    pub atom: usize,
    pub part_action: GradientPolytope,
    pub part_next_state: GradientPolytope,
    pub normal_cone: PolyhedralCone,
    pub membership: MembershipCertificate,
}

/// Pointwise stochastic Euler certificates: one membership test per atom with
/// positive probability, no integration anywhere. The overall verdict is the
/// conjunction.
#[derive(Clone, Debug, Serialize)]
pub struct StochasticEulerCertificate {
    pub stage: usize,
    pub policy: PolicyPremise,
    pub atoms: Vec<AtomEulerOutcome>,
    pub all_member: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn stochastic_euler_check(
    smodel: &StochasticDpModel,
    reduction: &Reduction,
    table: &ValueTable,
    t: usize,
    f: &[Vec<f64>],
    g: &[Vec<f64>],
    next: &[Vec<f64>],
    opts: &AuditOptions,
) -> Result<StochasticEulerCertificate, StochasticError> {
    if t + 1 >= smodel.stages.len() {
        return Err(StochasticError::Model(format!(
            "euler check at stage {t} needs the stage {} cost",
            t + 1
        )));
    }
    let stage_t = &smodel.stages[t];
    let stage_next = &smodel.stages[t + 1];
    // Adaptedness gates (exact).
    check_cell_constant(f, smodel.tree.state_partition(t), t)?;
    check_cell_constant(g, smodel.tree.info_partition(t), t + 1)?;
    check_cell_constant(next, smodel.tree.info_partition(t + 1), t + 2)?;

    // Per-atom regularity of both stage costs: hard gates of the theorem.
    for atom in 0..smodel.tree.atom_count() {
        let cert = stage_t.costs[atom]
            .regularity(&joined(&f[atom], &g[atom]), opts.active_tol)?;
        if !cert.is_regular() {
            return Err(StochasticError::AtomNotRegular { atom, trace: cert.trace.join("; ") });
        }
        let cert = stage_next.costs[atom]
            .regularity(&joined(&g[atom], &next[atom]), opts.active_tol)?;
        if !cert.is_regular() {
            return Err(StochasticError::AtomNotRegular { atom, trace: cert.trace.join("; ") });
        }
    }

    // Reduced upper viability around the state and around the action.
    let x = reduction.flatten_stage(t, f)?;
    let y = reduction.flatten_stage(t + 1, g)?;
    let z = reduction.flatten_stage(t + 2, next)?;
    require_reduced_upper_viability(reduction, table, t, &x, opts)?;
    require_reduced_upper_viability(reduction, table, t + 1, &y, opts)?;

    // Policy membership on the reduced model: recorded, not gated.
    let dist_to = |poly: &crate::geometry::Polytope, q: &[f64]| {
        poly.generators()
            .iter()
            .map(|gen| gen.iter().zip(q).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max))
            .fold(f64::INFINITY, f64::min)
    };
    let policy_t =
        dp::extract_policy(&reduction.model, table, t, &x, &opts.solve, opts.policy_value_tol)?;
    let action_distance = dist_to(&policy_t, &y);
    let policy_next = dp::extract_policy(
        &reduction.model,
        table,
        t + 1,
        &y,
        &opts.solve,
        opts.policy_value_tol,
    )?;
    let next_distance = dist_to(&policy_next, &z);
    let policy = PolicyPremise {
        action_on_policy: action_distance <= opts.policy_point_tol,
        action_distance,
        next_on_policy: next_distance <= opts.policy_point_tol,
        next_distance,
    };

    let mut atoms = Vec::with_capacity(smodel.tree.atom_count());
    let mut all_member = true;
    for atom in 0..smodel.tree.atom_count() {
        let part_action = Expr::bind_prefix(stage_t.costs[atom].clone(), f[atom].clone())?
            .clarke_gradient(&g[atom], opts.active_tol)?;
        let part_next_state =
            Expr::bind_suffix(stage_next.costs[atom].clone(), next[atom].clone())?
                .clarke_gradient(&g[atom], opts.active_tol)?;
        let normal_cone = stage_t.feasibility[atom]
            .normal_cone(&f[atom], &g[atom], opts.cone_active_tol)
            .map_err(|e| StochasticError::AtomInfeasible { atom, detail: e.to_string() })?;
        let membership = contains_zero(
            &[part_action.clone(), part_next_state.clone()],
            &normal_cone,
            &opts.cert,
        )?;
        all_member &= membership.is_member();
        atoms.push(AtomEulerOutcome { atom, part_action, part_next_state, normal_cone, membership });
    }
    Ok(StochasticEulerCertificate { stage: t, policy, atoms, all_member })
}

/// Degenerate one-atom equivalence helper: run the deterministic Euler check
/// on the reduced model with the flattened data.
pub fn reduced_euler_check(
    reduction: &Reduction,
    table: &ValueTable,
    t: usize,
    f: &[Vec<f64>],
    g: &[Vec<f64>],
    next: &[Vec<f64>],
    opts: &AuditOptions,
) -> Result<EulerCertificate, StochasticError> {
    let x = reduction.flatten_stage(t, f)?;
    let y = reduction.flatten_stage(t + 1, g)?;
    let z = reduction.flatten_stage(t + 2, next)?;
    Ok(dp::euler_check(&reduction.model, table, t, &x, &y, &z, opts)?)
}

/// Per-atom envelope check of the summable-cost assumption.
#[derive(Clone, Debug, Serialize)]
pub struct AtomEnvelope {
    pub atom: usize,
    /// Σ over stages of the declared (or estimated) sup bounds.
    pub total: f64,
    pub alpha: f64,
    pub ok: bool,
}

/// Sampled lower estimate of a Lipschitz constant: falsifies a declaration
/// when the estimate exceeds it, never certifies.
#[derive(Clone, Debug, Serialize)]
pub struct LipschitzEstimate {
    pub stage: usize,
    pub atom: usize,
    pub declared: f64,
    pub estimated: f64,
    pub falsified: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct AssumptionReport {
    pub envelope: Vec<AtomEnvelope>,
    pub envelope_ok: bool,
    pub lipschitz: Vec<LipschitzEstimate>,
    pub lipschitz_ok: bool,
    pub cell_constancy_ok: bool,
}

impl AssumptionReport {
    pub fn all_ok(&self) -> bool {
        self.envelope_ok && self.lipschitz_ok && self.cell_constancy_ok
    }
}

/// Verify the per-atom summable envelope and estimate Lipschitz data by
/// sampled difference quotients (coordinate-aligned and random pairs over the
/// grid boxes). Estimates are lower bounds: they can falsify a declared
/// `k_t(ω)`, never certify it.
pub fn check_assumptions(
    smodel: &StochasticDpModel,
    seed: u64,
    samples: usize,
) -> Result<AssumptionReport, StochasticError> {
    let cell_constancy_ok = smodel.validate().is_ok();
    let atoms = smodel.tree.atom_count();

    let mut envelope = Vec::with_capacity(atoms);
    for atom in 0..atoms {
        let total = match &smodel.horizon {
            StochasticHorizon::Truncated { tail, .. } => match tail {
                StochasticTail::Geometric { base, ratio } => {
                    if base[atom] == 0.0 {
                        0.0
                    } else if *ratio >= 1.0 {
                        f64::INFINITY
                    } else {
                        base[atom] / (1.0 - ratio)
                    }
                }
                StochasticTail::PerStage(rows) => rows.iter().map(|r| r[atom]).sum(),
            },
            StochasticHorizon::Finite => {
                // No declared bounds: estimate each stage by grid maximization
                // over the boxed graph.
                let mut total = 0.0f64;
                for stage in &smodel.stages {
                    let mut worst = 0.0f64;
                    let xg = Grid::new(stage.axes.clone())
                        .map_err(|e| StochasticError::Model(e.to_string()))?;
                    let yg = Grid::new(
                        smodel
                            .stages
                            .get(smodel.stages.iter().position(|s| std::ptr::eq(s, stage)).unwrap() + 1)
                            .map(|s| s.axes.clone())
                            .unwrap_or_else(|| smodel.terminal_axes.clone()),
                    )
                    .map_err(|e| StochasticError::Model(e.to_string()))?;
                    for x in xg.nodes() {
                        for y in yg.nodes() {
                            if stage.feasibility[atom].feasible(&x, &y, 1e-9)? {
                                worst = worst.max(stage.costs[atom].evaluate(&joined(&x, &y))?.abs());
                            }
                        }
                    }
                    total += worst;
                }
                total
            }
        };
        let ok = total <= smodel.alpha[atom] + 1e-9;
        envelope.push(AtomEnvelope { atom, total, alpha: smodel.alpha[atom], ok });
    }
    let envelope_ok = envelope.iter().all(|e| e.ok);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lipschitz = Vec::new();
    for (t, stage) in smodel.stages.iter().enumerate() {
        let x_lower: Vec<f64> = stage.axes.iter().map(|a| a[0]).collect();
        let x_upper: Vec<f64> = stage.axes.iter().map(|a| *a.last().unwrap()).collect();
        let next_axes =
            if t + 1 < smodel.stages.len() { &smodel.stages[t + 1].axes } else { &smodel.terminal_axes };
        let y_lower: Vec<f64> = next_axes.iter().map(|a| a[0]).collect();
        let y_upper: Vec<f64> = next_axes.iter().map(|a| *a.last().unwrap()).collect();
        let lower = joined(&x_lower, &y_lower);
        let upper = joined(&x_upper, &y_upper);
        let dim = lower.len();

        for atom in 0..atoms {
            let cost = &stage.costs[atom];
            let mut estimated = 0.0f64;
            let mut probe = |a: &[f64], b: &[f64]| -> Result<(), StochasticError> {
                let num = (cost.evaluate(a)? - cost.evaluate(b)?).abs();
                let dx: f64 = a[..x_lower.len()]
                    .iter()
                    .zip(&b[..x_lower.len()])
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    .sqrt();
                let dy: f64 = a[x_lower.len()..]
                    .iter()
                    .zip(&b[x_lower.len()..])
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    .sqrt();
                let den = dx + dy;
                if den > 1e-12 {
                    estimated = estimated.max(num / den);
                }
                Ok(())
            };
            for _ in 0..samples {
                let a: Vec<f64> = (0..dim)
                    .map(|i| rng.random_range(lower[i]..=upper[i]))
                    .collect();
                let b: Vec<f64> = (0..dim)
                    .map(|i| rng.random_range(lower[i]..=upper[i]))
                    .collect();
                probe(&a, &b)?;
                // Coordinate-aligned pair from `a`: catches axis-aligned slopes
                // that random pairs dilute.
                let coord = rng.random_range(0..dim);
                let mut c = a.clone();
                c[coord] = rng.random_range(lower[coord]..=upper[coord]);
                probe(&a, &c)?;
            }
            let declared = stage.lipschitz[atom];
            let falsified = estimated > declared * (1.0 + 1e-9) + 1e-12;
            lipschitz.push(LipschitzEstimate { stage: t, atom, declared, estimated, falsified });
        }
    }
    let lipschitz_ok = lipschitz.iter().all(|l| !l.falsified);

    Ok(AssumptionReport { envelope, envelope_ok, lipschitz, lipschitz_ok, cell_constancy_ok })
}
