//! Piecewise-smooth expressions with exact Clarke generalized gradients.
//!
//! An [`Expr`] is a DAG of smooth atoms composed by `sum`, nonnegative `scale`,
//! `negate`, `max`, `min`, `abs` and partial application (`bind`). Every
//! function in this class is locally Lipschitz on bounded boxes, and its
//! generalized gradient at a point is a polytope spanned by finitely many
//! generators, computed by one recursion:
//!
//! * atom: the singleton `{∇f(x)}`;
//! * sum: Minkowski sum; scale by `α ≥ 0`: scaled set; negate: negated set;
//! * max: hull of the generators of branches active at the point;
//! * abs(c): `max(c, -c)`; min: rewritten as `negate(max(negate(...)))`.
//!
//! The generalized directional derivative is the support function of that set,
//! so `gen_dir_derivative` is exact by construction. Regularity (the classical
//! directional derivative exists and agrees) is certified structurally:
//! sums, nonnegative scalings and maxima of regular pieces are regular, while
//! negations and minima are only certified when the surviving branch is smooth
//! at the point. `NotCertified` means not established, never disproved.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{GradientPolytope, Polytope};

/// Branch-activity tolerance used when callers do not override it. Exact
/// active sets at rational test points; raise it for noisy atoms.
pub const DEFAULT_ACTIVE_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ExprError {
    #[error("dimension mismatch: expression expects {expected} coordinates, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("children of {0} disagree on input dimension")]
    InconsistentChildren(&'static str),
    #[error("{0} requires at least one child")]
    NoChildren(&'static str),
    #[error("scale factor must be nonnegative, got {0}")]
    NegativeScale(f64),
    #[error("bind block [{start}, {end}) exceeds child dimension {dim}")]
    BindOutOfRange { start: usize, end: usize, dim: usize },
    #[error("atom `{name}`: {reason}")]
    Atom { name: String, reason: String },
    #[error("gradient undefined for atom `{0}` at the evaluation point")]
    GradientUndefined(String),
    #[error("invalid embedding: {0}")]
    BadEmbedding(String),
}

/// Lipschitz bound declared valid on a coordinate box.
#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzBound {
    pub bound: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// The smooth building blocks. Every kind evaluates and differentiates in
/// closed form; gradients are exact up to rounding.
#[derive(Clone, Debug, PartialEq)]
pub enum AtomKind {
    /// `w·x + b`
    Affine { weights: Vec<f64>, offset: f64 },
    /// `½ xᵀQx + c·x + b` with `Q` symmetrized at construction.
    Quadratic { matrix: Vec<Vec<f64>>, linear: Vec<f64>, offset: f64 },
    /// `exp(w·x + b)`
    ExpAffine { weights: Vec<f64>, offset: f64 },
    /// `‖x‖²`
    NormSquared,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmoothAtom {
    name: String,
    arity: usize,
    kind: AtomKind,
    lipschitz: Option<LipschitzBound>,
}

impl SmoothAtom {
    pub fn affine(name: impl Into<String>, weights: Vec<f64>, offset: f64) -> Self {
        let arity = weights.len();
        Self { name: name.into(), arity, kind: AtomKind::Affine { weights, offset }, lipschitz: None }
    }

    pub fn quadratic(
        name: impl Into<String>,
        matrix: Vec<Vec<f64>>,
        linear: Vec<f64>,
        offset: f64,
    ) -> Result<Self, ExprError> {
        let name = name.into();
        let arity = linear.len();
        if matrix.len() != arity || matrix.iter().any(|r| r.len() != arity) {
            return Err(ExprError::Atom { name, reason: format!("matrix must be {arity}x{arity}") });
        }
        let mut sym = vec![vec![0.0; arity]; arity];
        for i in 0..arity {
            for j in 0..arity {
                sym[i][j] = 0.5 * (matrix[i][j] + matrix[j][i]);
            }
        }
        Ok(Self { name, arity, kind: AtomKind::Quadratic { matrix: sym, linear, offset }, lipschitz: None })
    }

    pub fn exp_affine(name: impl Into<String>, weights: Vec<f64>, offset: f64) -> Self {
        let arity = weights.len();
        Self { name: name.into(), arity, kind: AtomKind::ExpAffine { weights, offset }, lipschitz: None }
    }

    pub fn norm_squared(name: impl Into<String>, arity: usize) -> Self {
        Self { name: name.into(), arity, kind: AtomKind::NormSquared, lipschitz: None }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn kind(&self) -> &AtomKind {
        &self.kind
    }

    pub fn lipschitz(&self) -> Option<&LipschitzBound> {
        self.lipschitz.as_ref()
    }

    pub fn with_lipschitz(mut self, bound: LipschitzBound) -> Self {
        self.lipschitz = Some(bound);
        self
    }

    /// Attach the tight gradient-norm bound of this atom over a box.
    pub fn with_box_bound(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, ExprError> {
        if lower.len() != self.arity || upper.len() != self.arity {
            return Err(ExprError::Atom {
                name: self.name.clone(),
                reason: "box dimensions disagree with arity".into(),
            });
        }
        let bound = match &self.kind {
            AtomKind::Affine { weights, .. } => norm2(weights),
            AtomKind::Quadratic { matrix, linear, .. } => {
                // ∇f = Qx + c is affine, so the max norm sits at a box vertex.
                let mut best = 0.0f64;
                for mask in 0..(1usize << self.arity) {
                    let x: Vec<f64> = (0..self.arity)
                        .map(|i| if mask >> i & 1 == 1 { upper[i] } else { lower[i] })
                        .collect();
                    let g: Vec<f64> = (0..self.arity)
                        .map(|i| dot(&matrix[i], &x) + linear[i])
                        .collect();
                    best = best.max(norm2(&g));
                }
                best
            }
            AtomKind::ExpAffine { weights, offset } => {
                let peak: f64 = weights
                    .iter()
                    .zip(lower.iter().zip(&upper))
                    .map(|(w, (l, u))| (w * l).max(w * u))
                    .sum::<f64>()
                    + offset;
                norm2(weights) * peak.exp()
            }
            AtomKind::NormSquared => {
                let far: Vec<f64> =
                    lower.iter().zip(&upper).map(|(l, u)| l.abs().max(u.abs())).collect();
                2.0 * norm2(&far)
            }
        };
        self.lipschitz = Some(LipschitzBound { bound, lower, upper });
        Ok(self)
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64, ExprError> {
        if x.len() != self.arity {
            return Err(ExprError::DimensionMismatch { expected: self.arity, got: x.len() });
        }
        Ok(match &self.kind {
            AtomKind::Affine { weights, offset } => dot(weights, x) + offset,
            AtomKind::Quadratic { matrix, linear, offset } => {
                let mut quad = 0.0;
                for i in 0..self.arity {
                    quad += x[i] * dot(&matrix[i], x);
                }
                0.5 * quad + dot(linear, x) + offset
            }
            AtomKind::ExpAffine { weights, offset } => (dot(weights, x) + offset).exp(),
            AtomKind::NormSquared => x.iter().map(|v| v * v).sum(),
        })
    }

    pub fn grad(&self, x: &[f64]) -> Result<Vec<f64>, ExprError> {
        if x.len() != self.arity {
            return Err(ExprError::DimensionMismatch { expected: self.arity, got: x.len() });
        }
        let g = match &self.kind {
            AtomKind::Affine { weights, .. } => weights.clone(),
            AtomKind::Quadratic { matrix, linear, .. } => {
                (0..self.arity).map(|i| dot(&matrix[i], x) + linear[i]).collect()
            }
            AtomKind::ExpAffine { weights, offset } => {
                let e = (dot(weights, x) + offset).exp();
                weights.iter().map(|w| e * w).collect()
            }
            AtomKind::NormSquared => x.iter().map(|v| 2.0 * v).collect(),
        };
        if g.iter().any(|v| !v.is_finite()) {
            return Err(ExprError::GradientUndefined(self.name.clone()));
        }
        Ok(g)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, PartialEq)]
enum Node {
    Atom(SmoothAtom),
    Sum(Vec<Expr>),
    Scale(f64, Expr),
    Negate(Expr),
    Max(Vec<Expr>),
    Min(Vec<Expr>),
    Abs(Expr),
    Bind { child: Expr, start: usize, values: Vec<f64> },
}

/// A piecewise-smooth function as a shared expression DAG.
#[derive(Clone, PartialEq)]
pub struct Expr(Arc<Node>);

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &*self.0 {
            Node::Atom(a) => write!(f, "atom({})", a.name),
            Node::Sum(cs) => f.debug_list().entries(cs).finish().and_then(|_| write!(f, ".sum")),
            Node::Scale(a, c) => write!(f, "scale({a}, {c:?})"),
            Node::Negate(c) => write!(f, "neg({c:?})"),
            Node::Max(cs) => write!(f, "max({cs:?})"),
            Node::Min(cs) => write!(f, "min({cs:?})"),
            Node::Abs(c) => write!(f, "abs({c:?})"),
            Node::Bind { child, start, values } => {
                write!(f, "bind({child:?}, at {start}, {} fixed)", values.len())
            }
        }
    }
}

/// Outcome of the structural regularity certificate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularity {
    Regular,
    NotCertified,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct RegularityCertificate {
    pub status: Regularity,
    /// Human-readable decision path, outermost node first.
    pub trace: Vec<String>,
}

impl RegularityCertificate {
    pub fn is_regular(&self) -> bool {
        self.status == Regularity::Regular
    }
}

impl Expr {
    pub fn atom(atom: SmoothAtom) -> Expr {
        Expr(Arc::new(Node::Atom(atom)))
    }

    pub fn sum(children: Vec<Expr>) -> Result<Expr, ExprError> {
        Self::check_children("sum", &children)?;
        Ok(Expr(Arc::new(Node::Sum(children))))
    }

    pub fn scale(alpha: f64, child: Expr) -> Result<Expr, ExprError> {
        if alpha.is_nan() || alpha < 0.0 {
            return Err(ExprError::NegativeScale(alpha));
        }
        Ok(Expr(Arc::new(Node::Scale(alpha, child))))
    }

    pub fn negate(child: Expr) -> Expr {
        Expr(Arc::new(Node::Negate(child)))
    }

    pub fn max_of(children: Vec<Expr>) -> Result<Expr, ExprError> {
        Self::check_children("max", &children)?;
        Ok(Expr(Arc::new(Node::Max(children))))
    }

    pub fn min_of(children: Vec<Expr>) -> Result<Expr, ExprError> {
        Self::check_children("min", &children)?;
        Ok(Expr(Arc::new(Node::Min(children))))
    }

    pub fn abs(child: Expr) -> Expr {
        Expr(Arc::new(Node::Abs(child)))
    }

    /// Fix the coordinate block `[start, start+values.len())` of `child` to
    /// constants; the remaining coordinates stay free, in order.
    pub fn bind(child: Expr, start: usize, values: Vec<f64>) -> Result<Expr, ExprError> {
        let dim = child.input_dim();
        let end = start + values.len();
        if end > dim {
            return Err(ExprError::BindOutOfRange { start, end, dim });
        }
        Ok(Expr(Arc::new(Node::Bind { child, start, values })))
    }

    /// Partial application fixing the leading block (the `x` of a cost over
    /// `(x, y)`), leaving the tail free.
    pub fn bind_prefix(child: Expr, values: Vec<f64>) -> Result<Expr, ExprError> {
        Self::bind(child, 0, values)
    }

    /// Partial application fixing the trailing block (the `y` of a cost over
    /// `(x, y)`), leaving the head free.
    pub fn bind_suffix(child: Expr, values: Vec<f64>) -> Result<Expr, ExprError> {
        let dim = child.input_dim();
        let len = values.len();
        if len > dim {
            return Err(ExprError::BindOutOfRange { start: dim - len, end: dim, dim });
        }
        Self::bind(child, dim - len, values)
    }

    fn check_children(kind: &'static str, children: &[Expr]) -> Result<(), ExprError> {
        let Some(first) = children.first() else {
            return Err(ExprError::NoChildren(kind));
        };
        let dim = first.input_dim();
        if children.iter().any(|c| c.input_dim() != dim) {
            return Err(ExprError::InconsistentChildren(kind));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match &*self.0 {
            Node::Atom(a) => a.arity,
            Node::Sum(cs) | Node::Max(cs) | Node::Min(cs) => cs[0].input_dim(),
            Node::Scale(_, c) | Node::Negate(c) | Node::Abs(c) => c.input_dim(),
            Node::Bind { child, values, .. } => child.input_dim() - values.len(),
        }
    }

    fn check_point(&self, point: &[f64]) -> Result<(), ExprError> {
        let expected = self.input_dim();
        if point.len() != expected {
            return Err(ExprError::DimensionMismatch { expected, got: point.len() });
        }
        Ok(())
    }

    pub fn evaluate(&self, point: &[f64]) -> Result<f64, ExprError> {
        self.check_point(point)?;
        self.eval_unchecked(point)
    }

    fn eval_unchecked(&self, point: &[f64]) -> Result<f64, ExprError> {
        Ok(match &*self.0 {
            Node::Atom(a) => a.eval(point)?,
            Node::Sum(cs) => {
                let mut acc = 0.0;
                for c in cs {
                    acc += c.eval_unchecked(point)?;
                }
                acc
            }
            Node::Scale(alpha, c) => alpha * c.eval_unchecked(point)?,
            Node::Negate(c) => -c.eval_unchecked(point)?,
            Node::Max(cs) => {
                let mut best = f64::NEG_INFINITY;
                for c in cs {
                    best = best.max(c.eval_unchecked(point)?);
                }
                best
            }
            Node::Min(cs) => {
                let mut best = f64::INFINITY;
                for c in cs {
                    best = best.min(c.eval_unchecked(point)?);
                }
                best
            }
            Node::Abs(c) => c.eval_unchecked(point)?.abs(),
            Node::Bind { child, start, values } => {
                child.eval_unchecked(&splice(point, *start, values))?
            }
        })
    }

    /// The generalized gradient at `point` as a generator polytope. Exact for
    /// this expression class whenever `active_tol` identifies the true active
    /// set of every `max`/`min`/`abs` node.
    pub fn clarke_gradient(&self, point: &[f64], active_tol: f64) -> Result<GradientPolytope, ExprError> {
        self.check_point(point)?;
        self.gradient_unchecked(point, active_tol)
    }

    fn gradient_unchecked(&self, point: &[f64], tol: f64) -> Result<Polytope, ExprError> {
        Ok(match &*self.0 {
            Node::Atom(a) => Polytope::singleton(a.grad(point)?),
            Node::Sum(cs) => {
                let mut acc: Option<Polytope> = None;
                for c in cs {
                    let set = c.gradient_unchecked(point, tol)?;
                    acc = Some(match acc {
                        None => set,
                        Some(prev) => prev
                            .minkowski_sum(&set)
                            .expect("children share the input dimension"),
                    });
                }
                acc.expect("sum has at least one child")
            }
            Node::Scale(alpha, c) => c.gradient_unchecked(point, tol)?.scale(*alpha),
            Node::Negate(c) => c.gradient_unchecked(point, tol)?.negate(),
            Node::Max(cs) => {
                let values: Vec<f64> =
                    cs.iter().map(|c| c.eval_unchecked(point)).collect::<Result<_, _>>()?;
                let top = values.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                let mut active = Vec::new();
                for (c, v) in cs.iter().zip(&values) {
                    if top - v <= tol {
                        active.push(c.gradient_unchecked(point, tol)?);
                    }
                }
                Polytope::hull_union(active.iter()).expect("max has an active branch")
            }
            Node::Min(cs) => {
                // min(c₁,…) = -max(-c₁,…): route through the max rule so the
                // active-set logic lives in one place.
                let negated: Vec<Expr> = cs.iter().map(|c| Expr::negate(c.clone())).collect();
                let rewritten = Expr::negate(Expr::max_of(negated).expect("same children"));
                rewritten.gradient_unchecked(point, tol)?
            }
            Node::Abs(c) => {
                // abs(c) = max(c, -c)
                let rewritten = Expr::max_of(vec![c.clone(), Expr::negate(c.clone())])
                    .expect("two children of equal dimension");
                rewritten.gradient_unchecked(point, tol)?
            }
            Node::Bind { child, start, values } => {
                let full = splice(point, *start, values);
                let set = child.gradient_unchecked(&full, tol)?;
                // Project generators onto the free coordinates; linear images
                // commute with convex hulls, so this is the gradient of the
                // partially applied function.
                let projected: Vec<Vec<f64>> = set
                    .generators()
                    .iter()
                    .map(|g| {
                        let mut out = Vec::with_capacity(g.len() - values.len());
                        out.extend_from_slice(&g[..*start]);
                        out.extend_from_slice(&g[start + values.len()..]);
                        out
                    })
                    .collect();
                Polytope::new(projected).expect("projection preserves nonemptiness")
            }
        })
    }

    /// φ°(point; direction) as the support value of the gradient polytope:
    /// positively homogeneous and subadditive in the direction.
    pub fn gen_dir_derivative(
        &self,
        point: &[f64],
        direction: &[f64],
        active_tol: f64,
    ) -> Result<f64, ExprError> {
        let set = self.clarke_gradient(point, active_tol)?;
        set.support(direction).map_err(|_| ExprError::DimensionMismatch {
            expected: self.input_dim(),
            got: direction.len(),
        })
    }

    /// Structural regularity certificate at `point`.
    pub fn regularity(&self, point: &[f64], active_tol: f64) -> Result<RegularityCertificate, ExprError> {
        self.check_point(point)?;
        let mut trace = Vec::new();
        let status = self.regularity_inner(point, active_tol, &mut trace)?;
        Ok(RegularityCertificate { status, trace })
    }

    fn regularity_inner(
        &self,
        point: &[f64],
        tol: f64,
        trace: &mut Vec<String>,
    ) -> Result<Regularity, ExprError> {
        use Regularity::*;
        Ok(match &*self.0 {
            Node::Atom(a) => {
                trace.push(format!("atom `{}`: strictly differentiable", a.name));
                Regular
            }
            Node::Sum(cs) => {
                for (i, c) in cs.iter().enumerate() {
                    if c.regularity_inner(point, tol, trace)? == NotCertified {
                        trace.push(format!("sum: child {i} not certified"));
                        return Ok(NotCertified);
                    }
                }
                trace.push(format!("sum of {} regular children", cs.len()));
                Regular
            }
            Node::Scale(alpha, c) => {
                let r = c.regularity_inner(point, tol, trace)?;
                trace.push(format!("scale by {alpha} preserves the child status"));
                r
            }
            Node::Max(cs) => {
                let values: Vec<f64> =
                    cs.iter().map(|c| c.eval_unchecked(point)).collect::<Result<_, _>>()?;
                let top = values.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                let mut actives = 0usize;
                for ((i, c), v) in cs.iter().enumerate().zip(&values) {
                    if top - v <= tol {
                        actives += 1;
                        if c.regularity_inner(point, tol, trace)? == NotCertified {
                            trace.push(format!("max: active branch {i} not certified"));
                            return Ok(NotCertified);
                        }
                    }
                }
                trace.push(format!("max: {actives} active branch(es), all regular"));
                Regular
            }
            Node::Min(cs) => {
                let values: Vec<f64> =
                    cs.iter().map(|c| c.eval_unchecked(point)).collect::<Result<_, _>>()?;
                let bottom = values.iter().fold(f64::INFINITY, |a, &v| a.min(v));
                let active: Vec<usize> = values
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v - bottom <= tol)
                    .map(|(i, _)| i)
                    .collect();
                if active.len() > 1 {
                    trace.push(format!("min: {} active branches, not certified", active.len()));
                    NotCertified
                } else if cs[active[0]].is_smooth_at(point, tol)? {
                    trace.push("min: unique active smooth branch".into());
                    Regular
                } else {
                    trace.push("min: unique active branch is not smooth at the point".into());
                    NotCertified
                }
            }
            Node::Abs(c) => {
                let v = c.eval_unchecked(point)?;
                if v > tol {
                    let r = c.regularity_inner(point, tol, trace)?;
                    trace.push("abs: positive branch".into());
                    r
                } else if c.is_smooth_at(point, tol)? {
                    trace.push("abs: max of a smooth argument and its negation".into());
                    Regular
                } else if v < -tol {
                    trace.push("abs: negative branch flips a nonsmooth argument".into());
                    NotCertified
                } else {
                    trace.push("abs: kink of a nonsmooth argument".into());
                    NotCertified
                }
            }
            Node::Negate(c) => {
                if c.is_smooth_at(point, tol)? {
                    trace.push("negate: smooth child".into());
                    Regular
                } else {
                    trace.push("negate: child not smooth at the point, not certified".into());
                    NotCertified
                }
            }
            Node::Bind { child, start, values } => {
                let full = splice(point, *start, values);
                let r = child.regularity_inner(&full, tol, trace)?;
                trace.push("bind: restriction to an affine slice".into());
                r
            }
        })
    }

    /// True when every nonsmooth combinator below has a unique active branch,
    /// so the expression agrees with a smooth composition near `point`.
    fn is_smooth_at(&self, point: &[f64], tol: f64) -> Result<bool, ExprError> {
        Ok(match &*self.0 {
            Node::Atom(_) => true,
            Node::Sum(cs) => {
                for c in cs {
                    if !c.is_smooth_at(point, tol)? {
                        return Ok(false);
                    }
                }
                true
            }
            Node::Scale(_, c) | Node::Negate(c) => c.is_smooth_at(point, tol)?,
            Node::Max(cs) | Node::Min(cs) => {
                let values: Vec<f64> =
                    cs.iter().map(|c| c.eval_unchecked(point)).collect::<Result<_, _>>()?;
                let is_max = matches!(&*self.0, Node::Max(_));
                let pivot = if is_max {
                    values.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v))
                } else {
                    values.iter().fold(f64::INFINITY, |a, &v| a.min(v))
                };
                let active: Vec<usize> = values
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| (v - pivot).abs() <= tol)
                    .map(|(i, _)| i)
                    .collect();
                active.len() == 1 && cs[active[0]].is_smooth_at(point, tol)?
            }
            Node::Abs(c) => c.eval_unchecked(point)?.abs() > tol && c.is_smooth_at(point, tol)?,
            Node::Bind { child, start, values } => {
                child.is_smooth_at(&splice(point, *start, values), tol)?
            }
        })
    }

    /// Deterministic numerical probe for strict differentiability: returns the
    /// gradient when it is a singleton and the strict difference quotient over
    /// sampled pairs in the `radius` ball stays within 1e-4 of the linear
    /// model; otherwise absent.
    pub fn strict_derivative_probe(
        &self,
        point: &[f64],
        radius: f64,
        samples: usize,
    ) -> Result<Option<Vec<f64>>, ExprError> {
        self.check_point(point)?;
        if radius <= 0.0 {
            return Err(ExprError::BadEmbedding("probe radius must be positive".into()));
        }
        let set = self.clarke_gradient(point, DEFAULT_ACTIVE_TOL)?;
        let Some(g) = set.as_singleton() else {
            return Ok(None);
        };
        let g = g.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
        let mut drawn = 0usize;
        while drawn < samples {
            let a = sample_ball(&mut rng, point, radius);
            let b = sample_ball(&mut rng, point, radius);
            let h: Vec<f64> = b.iter().zip(&a).map(|(x, y)| x - y).collect();
            let step = norm2(&h);
            if step < radius * 1e-6 {
                continue;
            }
            drawn += 1;
            let deviation =
                (self.eval_unchecked(&b)? - self.eval_unchecked(&a)? - dot(&g, &h)).abs() / step;
            if deviation >= 1e-4 {
                return Ok(None);
            }
        }
        Ok(Some(g))
    }

    /// Lipschitz bound assembled from the atoms' declared bounds, when they
    /// all carry one.
    pub fn lipschitz_bound(&self) -> Option<f64> {
        match &*self.0 {
            Node::Atom(a) => a.lipschitz.as_ref().map(|l| l.bound),
            Node::Sum(cs) => cs.iter().map(|c| c.lipschitz_bound()).sum(),
            Node::Scale(alpha, c) => c.lipschitz_bound().map(|b| alpha * b),
            Node::Negate(c) | Node::Abs(c) => c.lipschitz_bound(),
            Node::Max(cs) | Node::Min(cs) => {
                let mut best = 0.0f64;
                for c in cs {
                    best = best.max(c.lipschitz_bound()?);
                }
                Some(best)
            }
            Node::Bind { child, .. } => child.lipschitz_bound(),
        }
    }

    /// Recompose onto a larger coordinate space: coordinate `i` of this
    /// expression reads coordinate `index_map[i]` of the embedded one. The
    /// indices must be distinct, so the precomposition is with a surjective
    /// selection and the gradient recursion stays exact.
    pub fn embed(&self, index_map: &[usize], full_dim: usize) -> Result<Expr, ExprError> {
        let arity = self.input_dim();
        if index_map.len() != arity {
            return Err(ExprError::BadEmbedding(format!(
                "index map has {} entries for arity {arity}",
                index_map.len()
            )));
        }
        for (i, &m) in index_map.iter().enumerate() {
            if m >= full_dim {
                return Err(ExprError::BadEmbedding(format!(
                    "coordinate {i} maps to {m}, beyond dimension {full_dim}"
                )));
            }
            if index_map[..i].contains(&m) {
                return Err(ExprError::BadEmbedding(format!("duplicate target coordinate {m}")));
            }
        }
        if full_dim == arity && index_map.iter().enumerate().all(|(i, &m)| i == m) {
            return Ok(self.clone());
        }
        self.embed_inner(index_map, full_dim)
    }

    fn embed_inner(&self, map: &[usize], full_dim: usize) -> Result<Expr, ExprError> {
        Ok(match &*self.0 {
            Node::Atom(a) => {
                let scatter = |w: &[f64]| {
                    let mut out = vec![0.0; full_dim];
                    for (i, &v) in w.iter().enumerate() {
                        out[map[i]] = v;
                    }
                    out
                };
                let kind = match &a.kind {
                    AtomKind::Affine { weights, offset } => {
                        AtomKind::Affine { weights: scatter(weights), offset: *offset }
                    }
                    AtomKind::Quadratic { matrix, linear, offset } => {
                        let mut out = vec![vec![0.0; full_dim]; full_dim];
                        for (i, row) in matrix.iter().enumerate() {
                            for (j, &v) in row.iter().enumerate() {
                                out[map[i]][map[j]] = v;
                            }
                        }
                        AtomKind::Quadratic { matrix: out, linear: scatter(linear), offset: *offset }
                    }
                    AtomKind::ExpAffine { weights, offset } => {
                        AtomKind::ExpAffine { weights: scatter(weights), offset: *offset }
                    }
                    AtomKind::NormSquared => {
                        // ‖Sx‖² as a quadratic form with 2·SᵀS on the diagonal.
                        let mut out = vec![vec![0.0; full_dim]; full_dim];
                        for &m in map {
                            out[m][m] = 2.0;
                        }
                        AtomKind::Quadratic {
                            matrix: out,
                            linear: vec![0.0; full_dim],
                            offset: 0.0,
                        }
                    }
                };
                Expr::atom(SmoothAtom {
                    name: format!("{}@emb", a.name),
                    arity: full_dim,
                    kind,
                    lipschitz: a.lipschitz.clone().map(|l| LipschitzBound {
                        bound: l.bound,
                        lower: vec![f64::NEG_INFINITY; full_dim],
                        upper: vec![f64::INFINITY; full_dim],
                    }),
                })
            }
            Node::Sum(cs) => Expr(Arc::new(Node::Sum(
                cs.iter().map(|c| c.embed_inner(map, full_dim)).collect::<Result<_, _>>()?,
            ))),
            Node::Scale(alpha, c) => Expr(Arc::new(Node::Scale(*alpha, c.embed_inner(map, full_dim)?))),
            Node::Negate(c) => Expr::negate(c.embed_inner(map, full_dim)?),
            Node::Max(cs) => Expr(Arc::new(Node::Max(
                cs.iter().map(|c| c.embed_inner(map, full_dim)).collect::<Result<_, _>>()?,
            ))),
            Node::Min(cs) => Expr(Arc::new(Node::Min(
                cs.iter().map(|c| c.embed_inner(map, full_dim)).collect::<Result<_, _>>()?,
            ))),
            Node::Abs(c) => Expr::abs(c.embed_inner(map, full_dim)?),
            Node::Bind { child, start, values } => {
                // The bound block migrates to the tail of the embedded child.
                let child_arity = child.input_dim();
                let mut child_map = Vec::with_capacity(child_arity);
                let mut free = 0usize;
                for j in 0..child_arity {
                    if j >= *start && j < start + values.len() {
                        child_map.push(full_dim + (j - start));
                    } else {
                        child_map.push(map[free]);
                        free += 1;
                    }
                }
                let embedded = child.embed_inner(&child_map, full_dim + values.len())?;
                Expr(Arc::new(Node::Bind { child: embedded, start: full_dim, values: values.clone() }))
            }
        })
    }

    /// Walk the atoms of the DAG (duplicates included).
    pub fn for_each_atom(&self, f: &mut impl FnMut(&SmoothAtom)) {
        match &*self.0 {
            Node::Atom(a) => f(a),
            Node::Sum(cs) | Node::Max(cs) | Node::Min(cs) => {
                for c in cs {
                    c.for_each_atom(f);
                }
            }
            Node::Scale(_, c) | Node::Negate(c) | Node::Abs(c) => c.for_each_atom(f),
            Node::Bind { child, .. } => child.for_each_atom(f),
        }
    }

    /// Structure visitor used by the serializer.
    pub(crate) fn node_view(&self) -> NodeView<'_> {
        match &*self.0 {
            Node::Atom(a) => NodeView::Atom(a),
            Node::Sum(cs) => NodeView::Sum(cs),
            Node::Scale(a, c) => NodeView::Scale(*a, c),
            Node::Negate(c) => NodeView::Negate(c),
            Node::Max(cs) => NodeView::Max(cs),
            Node::Min(cs) => NodeView::Min(cs),
            Node::Abs(c) => NodeView::Abs(c),
            Node::Bind { child, start, values } => NodeView::Bind { child, start: *start, values },
        }
    }

    /// Smallest gap separating active from inactive branches across the
    /// nonsmooth nodes of the DAG at `point` (`abs` counts `2|c|`). Infinite
    /// for smooth expressions. Used by samplers that must stay clear of kinks.
    pub fn kink_margin(&self, point: &[f64]) -> Result<f64, ExprError> {
        self.check_point(point)?;
        self.kink_margin_inner(point)
    }

    fn kink_margin_inner(&self, point: &[f64]) -> Result<f64, ExprError> {
        Ok(match &*self.0 {
            Node::Atom(_) => f64::INFINITY,
            Node::Sum(cs) => {
                let mut m = f64::INFINITY;
                for c in cs {
                    m = m.min(c.kink_margin_inner(point)?);
                }
                m
            }
            Node::Scale(_, c) | Node::Negate(c) => c.kink_margin_inner(point)?,
            Node::Abs(c) => {
                let inner = c.kink_margin_inner(point)?;
                inner.min(2.0 * c.eval_unchecked(point)?.abs())
            }
            Node::Max(cs) | Node::Min(cs) => {
                let mut m = f64::INFINITY;
                let mut values = Vec::with_capacity(cs.len());
                for c in cs {
                    m = m.min(c.kink_margin_inner(point)?);
                    values.push(c.eval_unchecked(point)?);
                }
                let mut sorted = values.clone();
                sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                if sorted.len() >= 2 {
                    let gap = match &*self.0 {
                        Node::Max(_) => sorted[sorted.len() - 1] - sorted[sorted.len() - 2],
                        _ => sorted[1] - sorted[0],
                    };
                    m = m.min(gap);
                }
                m
            }
            Node::Bind { child, start, values } => {
                child.kink_margin_inner(&splice(point, *start, values))?
            }
        })
    }
}

pub(crate) enum NodeView<'a> {
    Atom(&'a SmoothAtom),
    Sum(&'a [Expr]),
    Scale(f64, &'a Expr),
    Negate(&'a Expr),
    Max(&'a [Expr]),
    Min(&'a [Expr]),
    Abs(&'a Expr),
    Bind { child: &'a Expr, start: usize, values: &'a [f64] },
}

fn splice(point: &[f64], start: usize, values: &[f64]) -> Vec<f64> {
    let mut full = Vec::with_capacity(point.len() + values.len());
    full.extend_from_slice(&point[..start]);
    full.extend_from_slice(values);
    full.extend_from_slice(&point[start..]);
    full
}

fn sample_ball(rng: &mut ChaCha8Rng, center: &[f64], radius: f64) -> Vec<f64> {
    loop {
        let offset: Vec<f64> = center.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        if dot(&offset, &offset) <= 1.0 {
            return center.iter().zip(&offset).map(|(c, o)| c + radius * o).collect();
        }
    }
}
