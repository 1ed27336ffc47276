//! JSON model and program files.
//!
//! One format covers both model classes: a file with a `filtration` section is
//! stochastic (per-cell costs and feasibility sets per stage), one without is
//! deterministic. Expressions are trees over the node kinds
//! `atom | sum | scale | neg | max | min | abs | bind`, with atoms referenced
//! by name from the `atoms` registry of built-ins (`affine`, `quadratic`,
//! `exp_affine`, `norm_squared`). Unknown keys are rejected everywhere.
//!
//! See `docs/formats.md` for the full schema with examples.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dp::{DpError, DpModel, DpStage, HorizonMode, TailBounds};
use crate::expr::{Expr, ExprError, LipschitzBound, NodeView, SmoothAtom};
use crate::feasibility::{FeasibilityError, FeasibilitySet, SetKind};
use crate::grid::{Grid, GridError};
use crate::stochastic::{
    AdaptedProcess, PExponent, ScenarioTree, StochasticDpModel, StochasticError,
    StochasticHorizon, StochasticStage, StochasticTail,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("model structure: {0}")]
    Structure(String),
    #[error("expression references unknown atom `{0}`")]
    UnknownAtom(String),
    #[error("atom name `{0}` is declared twice with different definitions")]
    DuplicateAtom(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Feasibility(#[from] FeasibilityError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Stochastic(#[from] StochasticError),
}

fn parse_error(e: serde_json::Error) -> ModelError {
    ModelError::Parse { line: e.line(), column: e.column(), message: e.to_string() }
}

/// Optional Lipschitz declaration on an atom: an explicit bound, or just the
/// box, in which case the tight gradient-norm bound is computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LipschitzSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AtomSpec {
    Affine {
        weights: Vec<f64>,
        offset: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lipschitz: Option<LipschitzSpec>,
    },
    Quadratic {
        matrix: Vec<Vec<f64>>,
        linear: Vec<f64>,
        offset: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lipschitz: Option<LipschitzSpec>,
    },
    ExpAffine {
        weights: Vec<f64>,
        offset: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lipschitz: Option<LipschitzSpec>,
    },
    NormSquared {
        arity: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lipschitz: Option<LipschitzSpec>,
    },
}

impl AtomSpec {
    pub fn to_atom(&self, name: &str) -> Result<SmoothAtom, ModelError> {
        let (atom, lip) = match self {
            AtomSpec::Affine { weights, offset, lipschitz } => {
                (SmoothAtom::affine(name, weights.clone(), *offset), lipschitz)
            }
            AtomSpec::Quadratic { matrix, linear, offset, lipschitz } => (
                SmoothAtom::quadratic(name, matrix.clone(), linear.clone(), *offset)?,
                lipschitz,
            ),
            AtomSpec::ExpAffine { weights, offset, lipschitz } => {
                (SmoothAtom::exp_affine(name, weights.clone(), *offset), lipschitz)
            }
            AtomSpec::NormSquared { arity, lipschitz } => {
                (SmoothAtom::norm_squared(name, *arity), lipschitz)
            }
        };
        Ok(match lip {
            None => atom,
            Some(spec) => match spec.bound {
                Some(bound) => atom.with_lipschitz(LipschitzBound {
                    bound,
                    lower: spec.lower.clone(),
                    upper: spec.upper.clone(),
                }),
                None => atom.with_box_bound(spec.lower.clone(), spec.upper.clone())?,
            },
        })
    }

    pub fn from_atom(atom: &SmoothAtom) -> AtomSpec {
        use crate::expr::AtomKind;
        let lipschitz = atom.lipschitz().map(|l| LipschitzSpec {
            bound: Some(l.bound),
            lower: l.lower.clone(),
            upper: l.upper.clone(),
        });
        match atom.kind() {
            AtomKind::Affine { weights, offset } => {
                AtomSpec::Affine { weights: weights.clone(), offset: *offset, lipschitz }
            }
            AtomKind::Quadratic { matrix, linear, offset } => AtomSpec::Quadratic {
                matrix: matrix.clone(),
                linear: linear.clone(),
                offset: *offset,
                lipschitz,
            },
            AtomKind::ExpAffine { weights, offset } => {
                AtomSpec::ExpAffine { weights: weights.clone(), offset: *offset, lipschitz }
            }
            AtomKind::NormSquared => AtomSpec::NormSquared { arity: atom.arity(), lipschitz },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExprSpec {
    Atom { name: String },
    Sum { children: Vec<ExprSpec> },
    Scale { factor: f64, child: Box<ExprSpec> },
    Neg { child: Box<ExprSpec> },
    Max { children: Vec<ExprSpec> },
    Min { children: Vec<ExprSpec> },
    Abs { child: Box<ExprSpec> },
    Bind { child: Box<ExprSpec>, start: usize, values: Vec<f64> },
}

/// Resolve an expression tree against the atom registry.
pub fn spec_to_expr(
    spec: &ExprSpec,
    atoms: &BTreeMap<String, AtomSpec>,
) -> Result<Expr, ModelError> {
    Ok(match spec {
        ExprSpec::Atom { name } => {
            let atom_spec =
                atoms.get(name).ok_or_else(|| ModelError::UnknownAtom(name.clone()))?;
            Expr::atom(atom_spec.to_atom(name)?)
        }
        ExprSpec::Sum { children } => Expr::sum(
            children.iter().map(|c| spec_to_expr(c, atoms)).collect::<Result<_, _>>()?,
        )?,
        ExprSpec::Scale { factor, child } => Expr::scale(*factor, spec_to_expr(child, atoms)?)?,
        ExprSpec::Neg { child } => Expr::negate(spec_to_expr(child, atoms)?),
        ExprSpec::Max { children } => Expr::max_of(
            children.iter().map(|c| spec_to_expr(c, atoms)).collect::<Result<_, _>>()?,
        )?,
        ExprSpec::Min { children } => Expr::min_of(
            children.iter().map(|c| spec_to_expr(c, atoms)).collect::<Result<_, _>>()?,
        )?,
        ExprSpec::Abs { child } => Expr::abs(spec_to_expr(child, atoms)?),
        ExprSpec::Bind { child, start, values } => {
            Expr::bind(spec_to_expr(child, atoms)?, *start, values.clone())?
        }
    })
}

/// Serialize an expression, collecting its atoms into the registry. Atom
/// names must be unique per definition.
pub fn expr_to_spec(
    expr: &Expr,
    atoms: &mut BTreeMap<String, AtomSpec>,
) -> Result<ExprSpec, ModelError> {
    Ok(match expr.node_view() {
        NodeView::Atom(atom) => {
            let spec = AtomSpec::from_atom(atom);
            match atoms.get(atom.name()) {
                None => {
                    atoms.insert(atom.name().to_string(), spec);
                }
                Some(existing) if *existing == spec => {}
                Some(_) => return Err(ModelError::DuplicateAtom(atom.name().to_string())),
            }
            ExprSpec::Atom { name: atom.name().to_string() }
        }
        NodeView::Sum(children) => ExprSpec::Sum {
            children: children.iter().map(|c| expr_to_spec(c, atoms)).collect::<Result<_, _>>()?,
        },
        NodeView::Scale(factor, child) => {
            ExprSpec::Scale { factor, child: Box::new(expr_to_spec(child, atoms)?) }
        }
        NodeView::Negate(child) => ExprSpec::Neg { child: Box::new(expr_to_spec(child, atoms)?) },
        NodeView::Max(children) => ExprSpec::Max {
            children: children.iter().map(|c| expr_to_spec(c, atoms)).collect::<Result<_, _>>()?,
        },
        NodeView::Min(children) => ExprSpec::Min {
            children: children.iter().map(|c| expr_to_spec(c, atoms)).collect::<Result<_, _>>()?,
        },
        NodeView::Abs(child) => ExprSpec::Abs { child: Box::new(expr_to_spec(child, atoms)?) },
        NodeView::Bind { child, start, values } => ExprSpec::Bind {
            child: Box::new(expr_to_spec(child, atoms)?),
            start,
            values: values.to_vec(),
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeasSpec {
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Polyhedral { a: Vec<Vec<f64>>, b: Vec<f64>, c: Vec<Vec<f64>> },
}

impl FeasSpec {
    pub fn to_set(&self, state_dim: usize, action_dim: usize) -> Result<FeasibilitySet, ModelError> {
        Ok(match self {
            FeasSpec::Box { lower, upper } => {
                if lower.len() != action_dim {
                    return Err(ModelError::Structure(format!(
                        "box has {} coordinates, action space has {action_dim}",
                        lower.len()
                    )));
                }
                FeasibilitySet::box_set(lower.clone(), upper.clone(), state_dim)?
            }
            FeasSpec::Polyhedral { a, b, c } => {
                FeasibilitySet::polyhedral(a.clone(), b.clone(), c.clone(), state_dim, action_dim)?
            }
        })
    }

    pub fn from_set(set: &FeasibilitySet) -> FeasSpec {
        match set.kind() {
            SetKind::Box { lower, upper } => {
                FeasSpec::Box { lower: lower.clone(), upper: upper.clone() }
            }
            SetKind::Polyhedral => {
                let (a, b, c) = set.rows();
                FeasSpec::Polyhedral { a: a.to_vec(), b: b.to_vec(), c: c.to_vec() }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TailSpec {
    Geometric { base: f64, ratio: f64 },
    GeometricPerAtom { base: Vec<f64>, ratio: f64 },
    PerStage { bounds: Vec<f64> },
    PerStagePerAtom { bounds: Vec<Vec<f64>> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeSpec {
    Finite,
    Truncated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSpec {
    pub mode: ModeSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail: Option<TailSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// Integrable envelope per atom (stochastic models).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiltrationSpec {
    pub probabilities: Vec<f64>,
    /// Per stage, cells as lists of atom indices.
    pub partitions: Vec<Vec<Vec<usize>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    /// Per-dimension sorted breakpoints of the stage's state grid.
    pub grid: Vec<Vec<f64>>,
    /// Deterministic stage cost over (state, action).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<ExprSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feasibility: Option<FeasSpec>,
    /// Stochastic variants, one entry per cell of the stage's information
    /// partition (in cell order).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub costs: Option<Vec<ExprSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feasibilities: Option<Vec<FeasSpec>>,
    /// Declared Lipschitz data per atom (stochastic).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PSpec {
    Number(f64),
    Name(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    #[serde(default)]
    pub atoms: BTreeMap<String, AtomSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filtration: Option<FiltrationSpec>,
    pub stages: Vec<StageSpec>,
    pub terminal_grid: Vec<Vec<f64>>,
    pub bounds: BoundsSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<PSpec>,
}

#[derive(Clone, Debug)]
pub enum LoadedModel {
    Deterministic(DpModel),
    Stochastic(StochasticDpModel),
}

impl ModelFile {
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        serde_json::from_str(text).map_err(parse_error)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model files serialize")
    }

    pub fn build(&self) -> Result<LoadedModel, ModelError> {
        match &self.filtration {
            None => Ok(LoadedModel::Deterministic(self.build_deterministic()?)),
            Some(filtration) => Ok(LoadedModel::Stochastic(self.build_stochastic(filtration)?)),
        }
    }

    fn horizon_deterministic(&self) -> Result<HorizonMode, ModelError> {
        Ok(match self.bounds.mode {
            ModeSpec::Finite => HorizonMode::Finite,
            ModeSpec::Truncated => {
                let epsilon = self.bounds.epsilon.ok_or_else(|| {
                    ModelError::Structure("truncated mode requires bounds.epsilon".into())
                })?;
                let tail = match self.bounds.tail.as_ref().ok_or_else(|| {
                    ModelError::Structure("truncated mode requires bounds.tail".into())
                })? {
                    TailSpec::Geometric { base, ratio } => {
                        TailBounds::Geometric { base: *base, ratio: *ratio }
                    }
                    TailSpec::PerStage { bounds } => TailBounds::PerStage(bounds.clone()),
                    _ => {
                        return Err(ModelError::Structure(
                            "per-atom tail bounds require a filtration section".into(),
                        ))
                    }
                };
                HorizonMode::Truncated { tail, epsilon }
            }
        })
    }

    fn build_deterministic(&self) -> Result<DpModel, ModelError> {
        let mut grids = Vec::with_capacity(self.stages.len() + 1);
        for s in &self.stages {
            grids.push(Grid::new(s.grid.clone())?);
        }
        grids.push(Grid::new(self.terminal_grid.clone())?);

        let mut stages = Vec::with_capacity(self.stages.len());
        for (t, s) in self.stages.iter().enumerate() {
            if s.costs.is_some() || s.feasibilities.is_some() {
                return Err(ModelError::Structure(format!(
                    "stage {t}: per-cell sections require a filtration section"
                )));
            }
            let cost_spec = s.cost.as_ref().ok_or_else(|| {
                ModelError::Structure(format!("stage {t}: missing `cost`"))
            })?;
            let feas_spec = s.feasibility.as_ref().ok_or_else(|| {
                ModelError::Structure(format!("stage {t}: missing `feasibility`"))
            })?;
            let state_dim = grids[t].dim();
            let action_dim = grids[t + 1].dim();
            stages.push(DpStage {
                grid: grids[t].clone(),
                feasibility: feas_spec.to_set(state_dim, action_dim)?,
                cost: spec_to_expr(cost_spec, &self.atoms)?,
            });
        }
        let model = DpModel {
            stages,
            terminal_grid: grids.last().unwrap().clone(),
            horizon: self.horizon_deterministic()?,
        };
        model.validate()?;
        Ok(model)
    }

    fn build_stochastic(&self, filtration: &FiltrationSpec) -> Result<StochasticDpModel, ModelError> {
        let tree =
            ScenarioTree::new(filtration.probabilities.clone(), filtration.partitions.clone())?;
        let atoms = tree.atom_count();
        let mut stages = Vec::with_capacity(self.stages.len());
        for (t, s) in self.stages.iter().enumerate() {
            if s.cost.is_some() || s.feasibility.is_some() {
                return Err(ModelError::Structure(format!(
                    "stage {t}: stochastic models use `costs`/`feasibilities`, one entry per information cell"
                )));
            }
            if t >= tree.stage_count() {
                return Err(ModelError::Structure(format!(
                    "stage {t} has no filtration partition"
                )));
            }
            let cells = tree.info_partition(t).to_vec();
            let cost_specs = s.costs.as_ref().ok_or_else(|| {
                ModelError::Structure(format!("stage {t}: missing `costs`"))
            })?;
            let feas_specs = s.feasibilities.as_ref().ok_or_else(|| {
                ModelError::Structure(format!("stage {t}: missing `feasibilities`"))
            })?;
            if cost_specs.len() != cells.len() || feas_specs.len() != cells.len() {
                return Err(ModelError::Structure(format!(
                    "stage {t}: expected one cost and one feasibility per information cell ({} cells)",
                    cells.len()
                )));
            }
            let state_dim = s.grid.len();
            let action_dim = self
                .stages
                .get(t + 1)
                .map(|n| n.grid.len())
                .unwrap_or(self.terminal_grid.len());

            // Expand per-cell data to per-atom arrays.
            let mut costs: Vec<Option<Expr>> = vec![None; atoms];
            let mut feas: Vec<Option<FeasibilitySet>> = vec![None; atoms];
            for (cell, (cspec, fspec)) in cells.iter().zip(cost_specs.iter().zip(feas_specs)) {
                let expr = spec_to_expr(cspec, &self.atoms)?;
                let set = fspec.to_set(state_dim, action_dim)?;
                for &a in cell {
                    costs[a] = Some(expr.clone());
                    feas[a] = Some(set.clone());
                }
            }
            let costs: Vec<Expr> = costs
                .into_iter()
                .collect::<Option<_>>()
                .ok_or_else(|| ModelError::Structure(format!("stage {t}: cell data incomplete")))?;
            let feasibility: Vec<FeasibilitySet> = feas
                .into_iter()
                .collect::<Option<_>>()
                .ok_or_else(|| ModelError::Structure(format!("stage {t}: cell data incomplete")))?;
            let lipschitz = match &s.lipschitz {
                Some(k) => {
                    if k.len() != atoms {
                        return Err(ModelError::Structure(format!(
                            "stage {t}: lipschitz must carry one entry per atom"
                        )));
                    }
                    k.clone()
                }
                None => vec![f64::INFINITY; atoms],
            };
            stages.push(StochasticStage { axes: s.grid.clone(), costs, feasibility, lipschitz });
        }

        let alpha = self.bounds.alpha.clone().ok_or_else(|| {
            ModelError::Structure("stochastic models require bounds.alpha (one entry per atom)".into())
        })?;
        let horizon = match self.bounds.mode {
            ModeSpec::Finite => StochasticHorizon::Finite,
            ModeSpec::Truncated => {
                let epsilon = self.bounds.epsilon.ok_or_else(|| {
                    ModelError::Structure("truncated mode requires bounds.epsilon".into())
                })?;
                let tail = match self.bounds.tail.as_ref().ok_or_else(|| {
                    ModelError::Structure("truncated mode requires bounds.tail".into())
                })? {
                    TailSpec::GeometricPerAtom { base, ratio } => {
                        StochasticTail::Geometric { base: base.clone(), ratio: *ratio }
                    }
                    TailSpec::Geometric { base, ratio } => StochasticTail::Geometric {
                        base: vec![*base; atoms],
                        ratio: *ratio,
                    },
                    TailSpec::PerStagePerAtom { bounds } => {
                        StochasticTail::PerStage(bounds.clone())
                    }
                    TailSpec::PerStage { bounds } => StochasticTail::PerStage(
                        bounds.iter().map(|b| vec![*b; atoms]).collect(),
                    ),
                };
                StochasticHorizon::Truncated { tail, epsilon }
            }
        };
        let nominal_p = match &self.p {
            None => PExponent::Finite(2.0),
            Some(PSpec::Number(v)) => PExponent::Finite(*v),
            Some(PSpec::Name(s)) if s == "inf" || s == "infinity" => PExponent::Infinity,
            Some(PSpec::Name(s)) => {
                return Err(ModelError::Structure(format!("unknown p exponent `{s}`")))
            }
        };
        let model = StochasticDpModel {
            tree,
            stages,
            terminal_axes: self.terminal_grid.clone(),
            alpha,
            horizon,
            nominal_p,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn from_deterministic(model: &DpModel) -> Result<Self, ModelError> {
        let mut atoms = BTreeMap::new();
        let mut stages = Vec::with_capacity(model.stages.len());
        for stage in &model.stages {
            stages.push(StageSpec {
                grid: stage.grid.axes().to_vec(),
                cost: Some(expr_to_spec(&stage.cost, &mut atoms)?),
                feasibility: Some(FeasSpec::from_set(&stage.feasibility)),
                costs: None,
                feasibilities: None,
                lipschitz: None,
            });
        }
        let bounds = match &model.horizon {
            HorizonMode::Finite => {
                BoundsSpec { mode: ModeSpec::Finite, tail: None, epsilon: None, alpha: None }
            }
            HorizonMode::Truncated { tail, epsilon } => BoundsSpec {
                mode: ModeSpec::Truncated,
                tail: Some(match tail {
                    TailBounds::Geometric { base, ratio } => {
                        TailSpec::Geometric { base: *base, ratio: *ratio }
                    }
                    TailBounds::PerStage(bounds) => TailSpec::PerStage { bounds: bounds.clone() },
                }),
                epsilon: Some(*epsilon),
                alpha: None,
            },
        };
        Ok(ModelFile {
            atoms,
            filtration: None,
            stages,
            terminal_grid: model.terminal_grid.axes().to_vec(),
            bounds,
            p: None,
        })
    }

    pub fn from_stochastic(model: &StochasticDpModel) -> Result<Self, ModelError> {
        let mut atoms = BTreeMap::new();
        let mut stages = Vec::with_capacity(model.stages.len());
        for (t, stage) in model.stages.iter().enumerate() {
            let cells = model.tree.info_partition(t);
            let mut costs = Vec::with_capacity(cells.len());
            let mut feasibilities = Vec::with_capacity(cells.len());
            for cell in cells {
                costs.push(expr_to_spec(&stage.costs[cell[0]], &mut atoms)?);
                feasibilities.push(FeasSpec::from_set(&stage.feasibility[cell[0]]));
            }
            stages.push(StageSpec {
                grid: stage.axes.clone(),
                cost: None,
                feasibility: None,
                costs: Some(costs),
                feasibilities: Some(feasibilities),
                lipschitz: Some(stage.lipschitz.clone()),
            });
        }
        let (mode, tail, epsilon) = match &model.horizon {
            StochasticHorizon::Finite => (ModeSpec::Finite, None, None),
            StochasticHorizon::Truncated { tail, epsilon } => (
                ModeSpec::Truncated,
                Some(match tail {
                    StochasticTail::Geometric { base, ratio } => {
                        TailSpec::GeometricPerAtom { base: base.clone(), ratio: *ratio }
                    }
                    StochasticTail::PerStage(bounds) => {
                        TailSpec::PerStagePerAtom { bounds: bounds.clone() }
                    }
                }),
                Some(*epsilon),
            ),
        };
        let partitions: Vec<Vec<Vec<usize>>> = (0..model.tree.stage_count())
            .map(|t| model.tree.info_partition(t).to_vec())
            .collect();
        Ok(ModelFile {
            atoms,
            filtration: Some(FiltrationSpec {
                probabilities: model.tree.probabilities().to_vec(),
                partitions,
            }),
            stages,
            terminal_grid: model.terminal_axes.clone(),
            bounds: BoundsSpec { mode, tail, epsilon, alpha: Some(model.alpha.clone()) },
            p: Some(match model.nominal_p {
                PExponent::Finite(v) => PSpec::Number(v),
                PExponent::Infinity => PSpec::Name("inf".into()),
            }),
        })
    }
}

/// A program file: a deterministic state sequence or an adapted process
/// (per stage, per atom, one vector each).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProgramFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub states: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stages: Option<Vec<Vec<Vec<f64>>>>,
}

#[derive(Clone, Debug)]
pub enum LoadedProgram {
    Deterministic(Vec<Vec<f64>>),
    Stochastic(AdaptedProcess),
}

impl ProgramFile {
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        serde_json::from_str(text).map_err(parse_error)
    }

    pub fn build(&self) -> Result<LoadedProgram, ModelError> {
        match (&self.states, &self.stages) {
            (Some(states), None) => Ok(LoadedProgram::Deterministic(states.clone())),
            (None, Some(stages)) => {
                Ok(LoadedProgram::Stochastic(AdaptedProcess { stages: stages.clone() }))
            }
            _ => Err(ModelError::Structure(
                "a program file carries exactly one of `states` (deterministic) or `stages` (adapted)".into(),
            )),
        }
    }
}

/// SHA-256 digest of raw file bytes, as `sha256:<hex>`.
pub fn digest_bytes(bytes: &[u8]) -> String {
    let hash = Sha256::digest(bytes);
    let mut out = String::with_capacity(7 + 64);
    out.push_str("sha256:");
    for b in hash {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn load_model(path: &Path) -> Result<(LoadedModel, String), ModelError> {
    let bytes = std::fs::read(path)?;
    let digest = digest_bytes(&bytes);
    let text = String::from_utf8_lossy(&bytes);
    let file = ModelFile::from_json(&text)?;
    Ok((file.build()?, digest))
}

pub fn load_program(path: &Path) -> Result<LoadedProgram, ModelError> {
    let text = std::fs::read_to_string(path)?;
    ProgramFile::from_json(&text)?.build()
}
