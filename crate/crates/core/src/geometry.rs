//! Vertex-represented convex sets and certified origin-membership tests.
//!
//! A [`Polytope`] is the convex hull of finitely many generators and a
//! [`PolyhedralCone`] the nonnegative span of finitely many rays. Both live in
//! V-representation only; every query (support values, membership, distances)
//! goes through support functions or an LP — no facet enumeration anywhere.
//!
//! [`contains_zero`] decides `0 ∈ P₁ + … + P_k + K` by phase-one simplex and
//! returns a self-checking certificate: convex/conic multipliers that
//! reconstruct the origin on the member side, a strictly separating direction
//! on the other.

use serde::Serialize;
use thiserror::Error;

use crate::simplex::{self, LpProblem, LpSolution};

/// Generators closer than this (ℓ∞) are merged.
pub const DEDUP_TOL: f64 = 1e-12;
/// Generator norms above this are rejected as ill-conditioned.
pub const CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("a polytope needs at least one generator")]
    Empty,
    #[error("ill-conditioned input: generator norm {0:.3e} exceeds {CONDITION_LIMIT:.0e}")]
    IllConditioned(f64),
    #[error("lp failure: {0}")]
    Lp(#[from] simplex::LpError),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

/// Residual / margin tolerances for membership certificates. Overridable; the
/// defaults match the documented contract (1e-9 both ways).
#[derive(Clone, Copy, Debug)]
pub struct CertTolerances {
    pub residual: f64,
    pub margin: f64,
}

impl Default for CertTolerances {
    fn default() -> Self {
        Self { residual: 1e-9, margin: 1e-9 }
    }
}

/// Convex hull of finitely many generators (nonempty, convex, compact).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Polytope {
    generators: Vec<Vec<f64>>,
    dim: usize,
}

/// Alias for readability where a polytope stands for a generalized gradient.
pub type GradientPolytope = Polytope;

impl Polytope {
    pub fn new(generators: Vec<Vec<f64>>) -> Result<Self, GeometryError> {
        let Some(first) = generators.first() else {
            return Err(GeometryError::Empty);
        };
        let dim = first.len();
        for g in &generators {
            if g.len() != dim {
                return Err(GeometryError::DimensionMismatch { expected: dim, got: g.len() });
            }
        }
        let mut deduped: Vec<Vec<f64>> = Vec::with_capacity(generators.len());
        for g in generators {
            if !deduped.iter().any(|h| linf_close(h, &g, DEDUP_TOL)) {
                deduped.push(g);
            }
        }
        Ok(Self { generators: deduped, dim })
    }

    pub fn singleton(point: Vec<f64>) -> Self {
        let dim = point.len();
        Self { generators: vec![point], dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn generators(&self) -> &[Vec<f64>] {
        &self.generators
    }

    /// σ_P(h) = max over generators of ⟨g, h⟩.
    pub fn support(&self, direction: &[f64]) -> Result<f64, GeometryError> {
        if direction.len() != self.dim {
            return Err(GeometryError::DimensionMismatch { expected: self.dim, got: direction.len() });
        }
        Ok(self
            .generators
            .iter()
            .map(|g| dot(g, direction))
            .fold(f64::NEG_INFINITY, f64::max))
    }

    /// Generators are summed pairwise; support functions add up exactly.
    pub fn minkowski_sum(&self, other: &Polytope) -> Result<Polytope, GeometryError> {
        if other.dim != self.dim {
            return Err(GeometryError::DimensionMismatch { expected: self.dim, got: other.dim });
        }
        let mut sums = Vec::with_capacity(self.generators.len() * other.generators.len());
        for g in &self.generators {
            for h in &other.generators {
                sums.push(g.iter().zip(h).map(|(a, b)| a + b).collect());
            }
        }
        Polytope::new(sums)
    }

    /// Scale every generator by `alpha ≥ 0`.
    pub fn scale(&self, alpha: f64) -> Polytope {
        let generators = self
            .generators
            .iter()
            .map(|g| g.iter().map(|v| alpha * v).collect())
            .collect();
        Polytope::new(generators).expect("scaling preserves nonemptiness")
    }

    pub fn negate(&self) -> Polytope {
        let generators = self
            .generators
            .iter()
            .map(|g| g.iter().map(|v| -v).collect())
            .collect();
        Polytope::new(generators).expect("negation preserves nonemptiness")
    }

    /// Hull of the union of several polytopes (all same dimension).
    pub fn hull_union<'a, I: IntoIterator<Item = &'a Polytope>>(parts: I) -> Result<Polytope, GeometryError> {
        let mut generators = Vec::new();
        let mut dim = None;
        for p in parts {
            match dim {
                None => dim = Some(p.dim),
                Some(d) if d != p.dim => {
                    return Err(GeometryError::DimensionMismatch { expected: d, got: p.dim })
                }
                _ => {}
            }
            generators.extend(p.generators.iter().cloned());
        }
        Polytope::new(generators)
    }

    /// The unique generator if the hull is a point (after dedup).
    pub fn as_singleton(&self) -> Option<&[f64]> {
        if self.generators.len() == 1 {
            Some(&self.generators[0])
        } else {
            None
        }
    }

    pub fn max_generator_norm(&self) -> f64 {
        self.generators
            .iter()
            .map(|g| g.iter().fold(0.0f64, |a, v| a.max(v.abs())))
            .fold(0.0, f64::max)
    }
}

/// Nonnegative combinations of finitely many rays; no rays means `{0}`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PolyhedralCone {
    rays: Vec<Vec<f64>>,
    dim: usize,
}

impl PolyhedralCone {
    pub fn new(rays: Vec<Vec<f64>>, dim: usize) -> Result<Self, GeometryError> {
        for r in &rays {
            if r.len() != dim {
                return Err(GeometryError::DimensionMismatch { expected: dim, got: r.len() });
            }
        }
        Ok(Self { rays, dim })
    }

    pub fn zero(dim: usize) -> Self {
        Self { rays: Vec::new(), dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rays(&self) -> &[Vec<f64>] {
        &self.rays
    }

    pub fn is_zero(&self) -> bool {
        self.rays.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Member,
    NonMember,
}

/// Convex multipliers per part plus conic multipliers reconstructing zero.
#[derive(Clone, Debug, Serialize)]
pub struct Witness {
    pub part_coefficients: Vec<Vec<f64>>,
    pub cone_coefficients: Vec<f64>,
}

/// Direction along which the whole sum set sits strictly on the positive side.
#[derive(Clone, Debug, Serialize)]
pub struct Separator {
    pub direction: Vec<f64>,
    /// min over the sum set of ⟨direction, ·⟩ (cone rays contribute ≥ 0).
    pub margin: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MembershipCertificate {
    pub verdict: Verdict,
    pub witness: Option<Witness>,
    pub separator: Option<Separator>,
    /// Member: ℓ∞ norm of the reconstructed point. Non-member: phase-one deficit.
    pub residual: f64,
}

impl MembershipCertificate {
    pub fn is_member(&self) -> bool {
        self.verdict == Verdict::Member
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn linf_close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn check_conditioning(parts: &[Polytope], cone: &PolyhedralCone) -> Result<usize, GeometryError> {
    let mut dim = cone.dim;
    for p in parts {
        if p.dim != dim {
            return Err(GeometryError::DimensionMismatch { expected: dim, got: p.dim });
        }
        dim = p.dim;
        let norm = p.max_generator_norm();
        if norm > CONDITION_LIMIT {
            return Err(GeometryError::IllConditioned(norm));
        }
    }
    for r in &cone.rays {
        let norm = r.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if norm > CONDITION_LIMIT {
            return Err(GeometryError::IllConditioned(norm));
        }
    }
    Ok(dim)
}

/// Decide `0 ∈ Σ_k parts_k + cone` by LP feasibility:
/// `Σ_k Σ_i λ_{k,i} g_{k,i} + Σ_j ν_j r_j = 0`, each `λ_{k,·}` on the simplex,
/// `ν ≥ 0`. Member verdicts carry multipliers; non-member verdicts carry a
/// separating direction recovered from the phase-one duals.
pub fn contains_zero(
    parts: &[Polytope],
    cone: &PolyhedralCone,
    tol: &CertTolerances,
) -> Result<MembershipCertificate, GeometryError> {
    let dim = check_conditioning(parts, cone)?;
    let k = parts.len();
    let gen_counts: Vec<usize> = parts.iter().map(|p| p.generators.len()).collect();
    let n_lambda: usize = gen_counts.iter().sum();
    let n = n_lambda + cone.rays.len();

    // Rows: `dim` balance equations, then one convexity row per part.
    let mut rows = vec![vec![0.0; n]; dim + k];
    let mut rhs = vec![0.0; dim + k];
    let mut col = 0;
    for (part_idx, p) in parts.iter().enumerate() {
        for g in &p.generators {
            for d in 0..dim {
                rows[d][col] = g[d];
            }
            rows[dim + part_idx][col] = 1.0;
            col += 1;
        }
        rhs[dim + part_idx] = 1.0;
    }
    for r in &cone.rays {
        for d in 0..dim {
            rows[d][col] = r[d];
        }
        col += 1;
    }

    let lp = LpProblem { cost: vec![0.0; n], rows, rhs };
    match simplex::solve(&lp)? {
        LpSolution::Optimal { x, .. } => {
            let mut part_coefficients = Vec::with_capacity(k);
            let mut offset = 0;
            for count in &gen_counts {
                let mut lambda: Vec<f64> = x[offset..offset + count].to_vec();
                // Clean tiny negatives and renormalize each simplex block.
                for l in lambda.iter_mut() {
                    if *l < 0.0 {
                        *l = 0.0;
                    }
                }
                let total: f64 = lambda.iter().sum();
                if total > 0.0 {
                    for l in lambda.iter_mut() {
                        *l /= total;
                    }
                }
                part_coefficients.push(lambda);
                offset += count;
            }
            let cone_coefficients: Vec<f64> =
                x[n_lambda..].iter().map(|v| v.max(0.0)).collect();

            let mut point = vec![0.0; dim];
            for (p, lambda) in parts.iter().zip(&part_coefficients) {
                for (g, l) in p.generators.iter().zip(lambda) {
                    for d in 0..dim {
                        point[d] += l * g[d];
                    }
                }
            }
            for (r, nu) in cone.rays.iter().zip(&cone_coefficients) {
                for d in 0..dim {
                    point[d] += nu * r[d];
                }
            }
            let residual = point.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if residual > tol.residual {
                return Err(GeometryError::Numerical(format!(
                    "member witness reconstructs 0 only to {residual:.3e}"
                )));
            }
            Ok(MembershipCertificate {
                verdict: Verdict::Member,
                witness: Some(Witness { part_coefficients, cone_coefficients }),
                separator: None,
                residual,
            })
        }
        LpSolution::Infeasible { farkas, deficit } => {
            // Farkas: uᵀA_j ≤ 0 on every column and uᵀb > 0. Writing u =
            // (h, β): ⟨h, g⟩ ≤ -β_k on part k and ⟨h, r⟩ ≤ 0 on rays, so -h
            // separates: min over the sum set of ⟨-h, ·⟩ ≥ Σβ_k > 0.
            let mut direction: Vec<f64> = farkas[..dim].iter().map(|v| -v).collect();
            let norm = dot(&direction, &direction).sqrt();
            if norm <= 0.0 {
                return Err(GeometryError::Numerical("separator direction vanished".into()));
            }
            for v in direction.iter_mut() {
                *v /= norm;
            }
            let mut margin = 0.0;
            for p in parts {
                margin += p
                    .generators
                    .iter()
                    .map(|g| dot(&direction, g))
                    .fold(f64::INFINITY, f64::min);
            }
            for r in &cone.rays {
                if dot(&direction, r) < -tol.margin {
                    return Err(GeometryError::Numerical(
                        "separator is not valid against the cone".into(),
                    ));
                }
            }
            if margin < tol.margin {
                return Err(GeometryError::Numerical(format!(
                    "separation margin {margin:.3e} below tolerance"
                )));
            }
            Ok(MembershipCertificate {
                verdict: Verdict::NonMember,
                witness: None,
                separator: Some(Separator { direction, margin }),
                residual: deficit,
            })
        }
        LpSolution::Unbounded => {
            Err(GeometryError::Numerical("feasibility LP reported unbounded".into()))
        }
    }
}

/// `min ‖Σ λg + Σ νr‖₁` over the same multipliers as [`contains_zero`], with
/// conic multipliers capped by `bound`. Zero exactly when the origin is a
/// member (for `bound` large enough to admit the witness).
pub fn distance_to_origin(
    parts: &[Polytope],
    cone: &PolyhedralCone,
    bound: f64,
) -> Result<f64, GeometryError> {
    if bound <= 0.0 {
        return Err(GeometryError::Numerical("cone multiplier bound must be positive".into()));
    }
    let dim = check_conditioning(parts, cone)?;
    let k = parts.len();
    let gen_counts: Vec<usize> = parts.iter().map(|p| p.generators.len()).collect();
    let n_lambda: usize = gen_counts.iter().sum();
    let n_rays = cone.rays.len();
    // Columns: λ, ν, s⁺, s⁻, then one slack per capped ray.
    let n = n_lambda + n_rays + 2 * dim + n_rays;

    let mut rows = vec![vec![0.0; n]; dim + k + n_rays];
    let mut rhs = vec![0.0; dim + k + n_rays];
    let mut cost = vec![0.0; n];

    let mut col = 0;
    for (part_idx, p) in parts.iter().enumerate() {
        for g in &p.generators {
            for d in 0..dim {
                rows[d][col] = g[d];
            }
            rows[dim + part_idx][col] = 1.0;
            col += 1;
        }
        rhs[dim + part_idx] = 1.0;
    }
    for (j, r) in cone.rays.iter().enumerate() {
        for d in 0..dim {
            rows[d][col] = r[d];
        }
        rows[dim + k + j][col] = 1.0;
        rhs[dim + k + j] = bound;
        col += 1;
    }
    // s⁺ and s⁻ absorb the balance: Σλg + Σνr − s⁺ + s⁻ = 0, objective Σ(s⁺+s⁻).
    for d in 0..dim {
        rows[d][col + d] = -1.0;
        cost[col + d] = 1.0;
    }
    col += dim;
    for d in 0..dim {
        rows[d][col + d] = 1.0;
        cost[col + d] = 1.0;
    }
    col += dim;
    // Ray cap slacks.
    for j in 0..n_rays {
        rows[dim + k + j][col + j] = 1.0;
    }

    match simplex::solve(&LpProblem { cost, rows, rhs })? {
        LpSolution::Optimal { objective, .. } => Ok(objective.max(0.0)),
        LpSolution::Infeasible { .. } => {
            Err(GeometryError::Numerical("distance LP infeasible (empty part?)".into()))
        }
        LpSolution::Unbounded => {
            Err(GeometryError::Numerical("distance LP reported unbounded".into()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(lo: f64, hi: f64) -> Polytope {
        Polytope::new(vec![vec![lo], vec![hi]]).unwrap()
    }

    fn pt(coords: &[f64]) -> Polytope {
        Polytope::singleton(coords.to_vec())
    }

    #[test]
    fn support_of_segment_and_square() {
        assert_eq!(seg(-1.0, 1.0).support(&[3.0]).unwrap(), 3.0);
        let square = Polytope::new(vec![
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
        ])
        .unwrap();
        assert_eq!(square.support(&[1.0, 1.0]).unwrap(), 2.0);
    }

    #[test]
    fn support_rejects_dimension_mismatch() {
        assert!(matches!(
            seg(0.0, 1.0).support(&[1.0, 2.0]),
            Err(GeometryError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn minkowski_identity_and_segments() {
        let zero = pt(&[0.0, 0.0]);
        let p = pt(&[1.0, 2.0]);
        let sum = zero.minkowski_sum(&p).unwrap();
        assert_eq!(sum.generators(), &[vec![1.0, 2.0]]);

        let s = seg(-1.0, 1.0).minkowski_sum(&seg(-1.0, 1.0)).unwrap();
        assert_eq!(s.support(&[1.0]).unwrap(), 2.0);
        assert_eq!(s.support(&[-1.0]).unwrap(), 2.0);
    }

    #[test]
    fn member_with_opposing_singletons() {
        let cert = contains_zero(
            &[pt(&[1.0]), pt(&[-1.0])],
            &PolyhedralCone::zero(1),
            &CertTolerances::default(),
        )
        .unwrap();
        assert_eq!(cert.verdict, Verdict::Member);
        let w = cert.witness.unwrap();
        assert_eq!(w.part_coefficients, vec![vec![1.0], vec![1.0]]);
        assert!(cert.residual <= 1e-9);
    }

    #[test]
    fn ray_direction_decides_membership() {
        // hull{2,3} + ray(+1) = [2, inf): origin excluded.
        let plus = PolyhedralCone::new(vec![vec![1.0]], 1).unwrap();
        let cert =
            contains_zero(&[seg(2.0, 3.0)], &plus, &CertTolerances::default()).unwrap();
        assert_eq!(cert.verdict, Verdict::NonMember);
        let sep = cert.separator.unwrap();
        assert!(sep.margin >= 1e-9);
        // min over [2, inf) of <h, s> > 0 forces h = +1.
        assert!(sep.direction[0] > 0.0);

        // hull{2,3} + ray(-1) = (-inf, 3]: origin included.
        let minus = PolyhedralCone::new(vec![vec![-1.0]], 1).unwrap();
        let cert =
            contains_zero(&[seg(2.0, 3.0)], &minus, &CertTolerances::default()).unwrap();
        assert_eq!(cert.verdict, Verdict::Member);
        assert!(cert.residual <= 1e-9);
    }

    #[test]
    fn distance_examples() {
        let d = distance_to_origin(&[pt(&[3.0])], &PolyhedralCone::zero(1), 1e6).unwrap();
        assert!((d - 3.0).abs() < 1e-9);
        let d = distance_to_origin(&[seg(-1.0, 1.0)], &PolyhedralCone::zero(1), 1e6).unwrap();
        assert!(d.abs() < 1e-9);
    }

    #[test]
    fn ill_conditioned_inputs_rejected() {
        let huge = pt(&[1e13]);
        assert!(matches!(
            contains_zero(&[huge], &PolyhedralCone::zero(1), &CertTolerances::default()),
            Err(GeometryError::IllConditioned(_))
        ));
    }

    #[test]
    fn dedup_merges_close_generators() {
        let p = Polytope::new(vec![vec![1.0], vec![1.0 + 1e-13], vec![2.0]]).unwrap();
        assert_eq!(p.generators().len(), 2);
    }
}
