//! Shared oracles and fleet generators for the integration and acceptance
//! suites. Everything here is independent of the library's computation paths:
//! the directional-derivative oracle only evaluates expressions, the
//! membership oracle enumerates multiplier grids with its own least-squares
//! cone projection, and the path oracle folds stage costs directly.

#![allow(dead_code)]

use nsdp::dp::{CandidateScheme, DpModel, DpStage, HorizonMode, SolveOptions};
use nsdp::expr::{Expr, SmoothAtom};
use nsdp::feasibility::FeasibilitySet;
use nsdp::geometry::{PolyhedralCone, Polytope};
use nsdp::grid::{Grid, TableValue};
use nsdp::sampling;
use nsdp::stochastic::{
    PExponent, ScenarioTree, StochasticDpModel, StochasticHorizon, StochasticStage,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Finite-difference oracle for the generalized directional derivative.

pub const ORACLE_THETAS: [f64; 4] = [1e-2, 1e-3, 1e-4, 1e-5];
pub const ORACLE_BALL: f64 = 1e-3;
pub const ORACLE_BASES: usize = 32;

/// Difference-quotient sweep approximating the limsup definition: for each θ
/// take the max quotient over base points in a small ball around `x`; the
/// limit estimate keeps the two smallest θ, where the curvature bias of the
/// larger steps has died off.
pub struct DirOracle {
    pub per_theta: Vec<(f64, f64)>,
    pub estimate: f64,
}

pub fn fd_dir_derivative<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: &[f64], seed: u64) -> DirOracle {
    let mut bases = vec![x.to_vec()];
    bases.extend(sampling::ball_points(x, ORACLE_BALL, ORACLE_BASES - 1, seed));
    let mut per_theta = Vec::with_capacity(ORACLE_THETAS.len());
    for &theta in &ORACLE_THETAS {
        let mut worst = f64::NEG_INFINITY;
        for b in &bases {
            let shifted: Vec<f64> = b.iter().zip(h).map(|(bi, hi)| bi + theta * hi).collect();
            worst = worst.max((f(&shifted) - f(b)) / theta);
        }
        per_theta.push((theta, worst));
    }
    let estimate = per_theta[per_theta.len() - 2].1.max(per_theta[per_theta.len() - 1].1);
    DirOracle { per_theta, estimate }
}

// ---------------------------------------------------------------------------
// Random piecewise-smooth expression fleet with bounded Lipschitz constant
// and curvature, so the fixed-step oracle stays valid.

pub struct FleetExpr {
    pub expr: Expr,
    pub lipschitz: f64,
    pub curvature: f64,
}

const LIPSCHITZ_BUDGET: f64 = 2.0;
const CURVATURE_BUDGET: f64 = 0.5;
/// Minimum branch gap at sampled points; covers the oracle's probe radius
/// times twice the Lipschitz budget.
pub const KINK_MARGIN: f64 = 0.06;

fn random_atom(rng: &mut ChaCha8Rng, dim: usize, counter: &mut usize) -> (Expr, f64, f64) {
    *counter += 1;
    let name = format!("a{counter}");
    match rng.random_range(0..3usize) {
        0 => {
            let weights: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let offset = rng.random_range(-1.0..1.0);
            let lipschitz = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
            (Expr::atom(SmoothAtom::affine(name, weights, offset)), lipschitz, 0.0)
        }
        1 => {
            let mut matrix = vec![vec![0.0; dim]; dim];
            for i in 0..dim {
                for j in 0..=i {
                    let v = rng.random_range(-0.02..0.02);
                    matrix[i][j] = v;
                    matrix[j][i] = v;
                }
            }
            let linear: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect();
            let offset = rng.random_range(-0.5..0.5);
            // Frobenius bound on the curvature; gradient bound on the box
            // |x| ≤ 2 per coordinate.
            let curvature: f64 =
                matrix.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
            let lipschitz = curvature * 2.0 * (dim as f64).sqrt()
                + linear.iter().map(|v| v * v).sum::<f64>().sqrt();
            (
                Expr::atom(SmoothAtom::quadratic(name, matrix, linear, offset).unwrap()),
                lipschitz,
                curvature,
            )
        }
        _ => {
            let weights: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.1..0.1)).collect();
            let offset = rng.random_range(-0.5..0.5);
            let wnorm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
            // exp(w·x + b) on |x| ≤ 2 per coordinate.
            let peak = (wnorm * 2.0 * (dim as f64).sqrt() + offset).exp();
            (
                Expr::atom(SmoothAtom::exp_affine(name, weights, offset)),
                wnorm * peak,
                wnorm * wnorm * peak,
            )
        }
    }
}

fn random_node(
    rng: &mut ChaCha8Rng,
    dim: usize,
    depth: usize,
    counter: &mut usize,
) -> (Expr, f64, f64) {
    if depth == 0 {
        return random_atom(rng, dim, counter);
    }
    let choice = rng.random_range(0..10usize);
    let children = |rng: &mut ChaCha8Rng, counter: &mut usize, n: usize| {
        (0..n).map(|_| random_node(rng, dim, depth - 1, counter)).collect::<Vec<_>>()
    };
    match choice {
        0..=2 => random_atom(rng, dim, counter),
        3..=4 => {
            let n = rng.random_range(2..=3);
            let parts = children(rng, counter, n);
            let lipschitz = parts.iter().map(|(_, l, _)| l).sum();
            let curvature = parts.iter().map(|(_, _, c)| c).sum();
            (Expr::sum(parts.into_iter().map(|(e, _, _)| e).collect()).unwrap(), lipschitz, curvature)
        }
        5..=6 => {
            let n = rng.random_range(2..=3);
            let parts = children(rng, counter, n);
            let lipschitz = parts.iter().map(|(_, l, _)| *l).fold(0.0, f64::max);
            let curvature = parts.iter().map(|(_, _, c)| *c).fold(0.0, f64::max);
            (Expr::max_of(parts.into_iter().map(|(e, _, _)| e).collect()).unwrap(), lipschitz, curvature)
        }
        7 => {
            let parts = children(rng, counter, 2);
            let lipschitz = parts.iter().map(|(_, l, _)| *l).fold(0.0, f64::max);
            let curvature = parts.iter().map(|(_, _, c)| *c).fold(0.0, f64::max);
            (Expr::min_of(parts.into_iter().map(|(e, _, _)| e).collect()).unwrap(), lipschitz, curvature)
        }
        8 => {
            let (child, l, c) = random_node(rng, dim, depth - 1, counter);
            (Expr::abs(child), l, c)
        }
        _ => {
            let alpha = rng.random_range(0.0..1.5);
            let (child, l, c) = random_node(rng, dim, depth - 1, counter);
            (Expr::scale(alpha, child).unwrap(), alpha * l, alpha * c)
        }
    }
}

/// Random expression of combinator depth ≤ 3 over `[-2, 2]^dim`: two random
/// composition levels plus, when the budgets overflow, one normalizing scale.
pub fn random_fleet_expr(rng: &mut ChaCha8Rng, dim: usize) -> FleetExpr {
    let mut counter = 0usize;
    let depth = rng.random_range(1..=2);
    let (expr, lipschitz, curvature) = random_node(rng, dim, depth, &mut counter);
    let scale_l = if lipschitz > LIPSCHITZ_BUDGET { LIPSCHITZ_BUDGET / lipschitz } else { 1.0 };
    let scale_c = if curvature > CURVATURE_BUDGET { CURVATURE_BUDGET / curvature } else { 1.0 };
    let s = scale_l.min(scale_c);
    if s < 1.0 {
        FleetExpr {
            expr: Expr::scale(s, expr).unwrap(),
            lipschitz: s * lipschitz,
            curvature: s * curvature,
        }
    } else {
        FleetExpr { expr, lipschitz, curvature }
    }
}

/// Uniform point in `[-2, 2]^dim` whose active branches are stable across the
/// oracle's probe radius; `None` if the expression is kinked nearly everywhere
/// sampled.
pub fn stable_point(rng: &mut ChaCha8Rng, expr: &Expr, dim: usize) -> Option<Vec<f64>> {
    for _ in 0..200 {
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        if expr.kink_margin(&x).unwrap() >= KINK_MARGIN {
            return Some(x);
        }
    }
    None
}

pub fn random_unit_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let h: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-3 {
            return h.iter().map(|v| v / norm).collect();
        }
    }
}

// ---------------------------------------------------------------------------
// Dense-sampling membership oracle: grid over convex multipliers (step 1/64)
// with an exact least-squares projection onto the cone per grid point.

pub const ORACLE_GRID_STEP: u64 = 64;

/// All multiplier vectors with entries `k/64` summing to one.
fn simplex_grid(parts: usize) -> Vec<Vec<f64>> {
    fn rec(remaining: u64, slots: usize, prefix: &mut Vec<u64>, out: &mut Vec<Vec<f64>>) {
        if slots == 1 {
            prefix.push(remaining);
            out.push(prefix.iter().map(|&k| k as f64 / ORACLE_GRID_STEP as f64).collect());
            prefix.pop();
            return;
        }
        for k in 0..=remaining {
            prefix.push(k);
            rec(remaining - k, slots - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(ORACLE_GRID_STEP, parts, &mut Vec::new(), &mut out);
    out
}

/// Euclidean distance from `p` to `cone(rays)`, by enumerating ray subsets and
/// solving the unconstrained least squares on each; the projection onto a
/// polyhedral cone is attained on a linearly independent active subset.
fn cone_distance(p: &[f64], rays: &[Vec<f64>]) -> f64 {
    let dim = p.len();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut best = norm(p);
    for mask in 1u32..(1 << rays.len()) {
        let subset: Vec<&Vec<f64>> =
            (0..rays.len()).filter(|i| mask >> i & 1 == 1).map(|i| &rays[i]).collect();
        let k = subset.len();
        if k > dim {
            continue;
        }
        // Normal equations G ν = c with G the Gram matrix of the subset.
        let mut g = vec![vec![0.0; k + 1]; k];
        for i in 0..k {
            for j in 0..k {
                g[i][j] = subset[i].iter().zip(subset[j].iter()).map(|(a, b)| a * b).sum();
            }
            g[i][k] = subset[i].iter().zip(p).map(|(a, b)| a * b).sum();
        }
        if !gauss_solve(&mut g) {
            continue;
        }
        let nu: Vec<f64> = (0..k).map(|i| g[i][k]).collect();
        if nu.iter().any(|v| *v < -1e-12) {
            continue;
        }
        let mut residual = p.to_vec();
        for (r, v) in subset.iter().zip(&nu) {
            for d in 0..dim {
                residual[d] -= v * r[d];
            }
        }
        best = best.min(norm(&residual));
    }
    best
}

/// In-place Gaussian elimination on an augmented system; false when singular.
fn gauss_solve(m: &mut [Vec<f64>]) -> bool {
    let n = m.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&a, &b| {
            m[a][col].abs().partial_cmp(&m[b][col].abs()).unwrap()
        });
        let Some(pivot) = pivot else { return false };
        if m[pivot][col].abs() < 1e-12 {
            return false;
        }
        m.swap(col, pivot);
        for row in 0..n {
            if row != col {
                let factor = m[row][col] / m[col][col];
                for j in col..=n {
                    let sub = factor * m[col][j];
                    m[row][j] -= sub;
                }
            }
        }
    }
    for i in 0..n {
        m[i][n] /= m[i][i];
    }
    true
}

/// Minimum Euclidean distance of `Σ_k conv(parts_k) + cone` to the origin over
/// the dense multiplier grid.
pub fn sampled_membership_distance(parts: &[Polytope], cone: &PolyhedralCone) -> f64 {
    let dim = cone.dim();
    let grids: Vec<Vec<Vec<f64>>> =
        parts.iter().map(|p| simplex_grid(p.generators().len())).collect();
    let mut best = f64::INFINITY;
    let mut index = vec![0usize; parts.len()];
    loop {
        let mut s = vec![0.0; dim];
        for (part, (grid, idx)) in parts.iter().zip(grids.iter().zip(&index)) {
            for (g, l) in part.generators().iter().zip(&grid[*idx]) {
                for d in 0..dim {
                    s[d] += l * g[d];
                }
            }
        }
        let negated: Vec<f64> = s.iter().map(|v| -v).collect();
        best = best.min(cone_distance(&negated, cone.rays()));
        // Advance the mixed-radix counter over the per-part grids.
        let mut carry = true;
        for (i, idx) in index.iter_mut().enumerate() {
            if carry {
                *idx += 1;
                if *idx == grids[i].len() {
                    *idx = 0;
                } else {
                    carry = false;
                }
            }
        }
        if carry {
            break;
        }
    }
    best
}

/// Random membership instance; roughly half are constructed members whose
/// witness multipliers sit exactly on the oracle grid, the rest are resampled
/// until they are clearly separated, so the dense grid decides every case.
pub struct MembershipInstance {
    pub parts: Vec<Polytope>,
    pub cone: PolyhedralCone,
    pub expect_member: bool,
}

pub fn random_membership_instance(rng: &mut ChaCha8Rng) -> MembershipInstance {
    loop {
        let dim = rng.random_range(1..=4usize);
        let n_parts = rng.random_range(1..=3usize);
        // Small generator counts keep the joint multiplier grid dense and
        // tractable: at most two parts carry more than one generator.
        let mut budget = 2usize;
        let mut parts: Vec<Vec<Vec<f64>>> = Vec::new();
        for _ in 0..n_parts {
            let extra = if budget > 0 { rng.random_range(0..=budget.min(2)) } else { 0 };
            budget -= extra;
            let gens: Vec<Vec<f64>> = (0..1 + extra)
                .map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            parts.push(gens);
        }
        let n_rays = rng.random_range(0..=2usize);
        let rays: Vec<Vec<f64>> = (0..n_rays)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();

        let make_member = rng.random_range(0..2u32) == 0;
        if make_member {
            // Pick grid multipliers per part, then translate the last part so
            // the chosen combination lands exactly on the origin.
            let mut s = vec![0.0; dim];
            let mut lambdas = Vec::new();
            for gens in &parts {
                let grid = simplex_grid(gens.len());
                let lambda = grid[rng.random_range(0..grid.len())].clone();
                for (g, l) in gens.iter().zip(&lambda) {
                    for d in 0..dim {
                        s[d] += l * g[d];
                    }
                }
                lambdas.push(lambda);
            }
            let last = parts.last_mut().unwrap();
            for g in last.iter_mut() {
                for d in 0..dim {
                    g[d] -= s[d];
                }
            }
            let parts: Vec<Polytope> =
                parts.into_iter().map(|g| Polytope::new(g).unwrap()).collect();
            let cone = PolyhedralCone::new(rays, dim).unwrap();
            return MembershipInstance { parts, cone, expect_member: true };
        }

        let poly_parts: Vec<Polytope> =
            parts.iter().map(|g| Polytope::new(g.clone()).unwrap()).collect();
        let cone = PolyhedralCone::new(rays, dim).unwrap();
        let distance = sampled_membership_distance(&poly_parts, &cone);
        if distance >= 0.3 {
            return MembershipInstance { parts: poly_parts, cone, expect_member: false };
        }
        // Ambiguous band: resample.
    }
}

// ---------------------------------------------------------------------------
// Random deterministic DP fleet with piecewise-linear costs, plus the
// exhaustive path-enumeration oracle.

pub fn grid_1d(lo: f64, hi: f64, n: usize) -> Grid {
    let step = (hi - lo) / (n - 1) as f64;
    Grid::new(vec![(0..n).map(|i| lo + step * i as f64).collect()]).unwrap()
}

/// Random piecewise-linear cost over (x, y) ∈ R²: max/abs/sums of affines.
pub fn random_pwl_cost(rng: &mut ChaCha8Rng, counter: &mut usize) -> Expr {
    let affine = |rng: &mut ChaCha8Rng, counter: &mut usize| {
        *counter += 1;
        Expr::atom(SmoothAtom::affine(
            format!("w{counter}"),
            vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            rng.random_range(-1.0..1.0),
        ))
    };
    let a = Expr::abs(affine(rng, counter));
    let b = Expr::max_of(vec![affine(rng, counter), affine(rng, counter)]).unwrap();
    let c = affine(rng, counter);
    Expr::sum(vec![a, b, c]).unwrap()
}

/// Three-stage model on five-node 1-D grids with state-independent boxes.
pub fn random_three_stage_model(rng: &mut ChaCha8Rng) -> DpModel {
    let g = grid_1d(-1.0, 1.0, 5);
    let mut counter = 0usize;
    let stages = (0..3)
        .map(|_| DpStage {
            grid: g.clone(),
            feasibility: FeasibilitySet::box_set(vec![-1.0], vec![1.0], 1).unwrap(),
            cost: random_pwl_cost(rng, &mut counter),
        })
        .collect();
    DpModel { stages, terminal_grid: g, horizon: HorizonMode::Finite }
}

/// Exhaustive enumeration over grid-node paths with cost-to-go accumulation
/// (right fold), matching the induction's addition order exactly.
pub fn brute_force_value(model: &DpModel, x0: &[f64], feas_tol: f64) -> TableValue {
    fn rec(model: &DpModel, t: usize, state: &[f64], feas_tol: f64) -> Option<f64> {
        if t == model.stages.len() {
            return Some(0.0);
        }
        let stage = &model.stages[t];
        let grid = model.action_grid(t);
        let mut best: Option<f64> = None;
        for y in grid.nodes() {
            if !stage.feasibility.feasible(state, &y, feas_tol).unwrap() {
                continue;
            }
            if let Some(cont) = rec(model, t + 1, &y, feas_tol) {
                let mut joined = state.to_vec();
                joined.extend_from_slice(&y);
                let value = stage.cost.evaluate(&joined).unwrap() + cont;
                best = Some(match best {
                    None => value,
                    Some(b) => b.min(value),
                });
            }
        }
        best
    }
    rec(model, 0, x0, feas_tol).map_or(TableValue::Infeasible, TableValue::Finite)
}

pub fn grid_only_options() -> SolveOptions {
    SolveOptions { candidates: CandidateScheme::GridOnly, ..SolveOptions::default() }
}

// ---------------------------------------------------------------------------
// Random stochastic fleet.

/// Random refinement chain over `atoms` outcomes with `stages + 1` levels.
pub fn random_tree(rng: &mut ChaCha8Rng, atoms: usize, levels: usize) -> ScenarioTree {
    let raw: Vec<f64> = (0..atoms).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let probabilities: Vec<f64> = raw.iter().map(|p| p / total).collect();

    let mut partitions: Vec<Vec<Vec<usize>>> = Vec::with_capacity(levels);
    let mut current: Vec<Vec<usize>> = vec![(0..atoms).collect()];
    partitions.push(current.clone());
    for _ in 1..levels {
        let mut next = Vec::new();
        for cell in &current {
            if cell.len() > 1 && rng.random_range(0..2u32) == 0 {
                let split = rng.random_range(1..cell.len());
                next.push(cell[..split].to_vec());
                next.push(cell[split..].to_vec());
            } else {
                next.push(cell.clone());
            }
        }
        partitions.push(next.clone());
        current = next;
    }
    ScenarioTree::new(probabilities, partitions).unwrap()
}

/// Random regular cost over (x, y) ∈ R²: sum of a quadratic, an abs-affine
/// and a max of affines.
pub fn random_regular_cost(rng: &mut ChaCha8Rng, counter: &mut usize) -> Expr {
    let affine = |rng: &mut ChaCha8Rng, counter: &mut usize| {
        *counter += 1;
        Expr::atom(SmoothAtom::affine(
            format!("r{counter}"),
            vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            rng.random_range(-0.5..0.5),
        ))
    };
    *counter += 1;
    let quad = Expr::atom(
        SmoothAtom::quadratic(
            format!("rq{counter}"),
            vec![vec![rng.random_range(0.0..2.0), 0.0], vec![0.0, rng.random_range(0.0..2.0)]],
            vec![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)],
            0.0,
        )
        .unwrap(),
    );
    Expr::sum(vec![
        quad,
        Expr::abs(affine(rng, counter)),
        Expr::max_of(vec![affine(rng, counter), affine(rng, counter)]).unwrap(),
    ])
    .unwrap()
}

/// Random stochastic model: 2-4 atoms, two stages, 1-D spaces, box
/// feasibility, cell-constant regular costs.
pub fn random_stochastic_model(rng: &mut ChaCha8Rng) -> StochasticDpModel {
    let atoms = rng.random_range(2..=4usize);
    let levels = 3usize; // partitions for stages 0, 1 and the terminal state
    let tree = random_tree(rng, atoms, levels);
    let axes = vec![vec![-1.0, -0.5, 0.0, 0.5, 1.0]];
    let mut counter = 0usize;
    let mut stages = Vec::new();
    for t in 0..2 {
        let cells = tree.info_partition(t).to_vec();
        let mut costs: Vec<Option<Expr>> = vec![None; atoms];
        let mut feas: Vec<Option<FeasibilitySet>> = vec![None; atoms];
        for cell in &cells {
            let cost = random_regular_cost(rng, &mut counter);
            let set = FeasibilitySet::box_set(vec![-1.0], vec![1.0], 1).unwrap();
            for &a in cell {
                costs[a] = Some(cost.clone());
                feas[a] = Some(set.clone());
            }
        }
        stages.push(StochasticStage {
            axes: axes.clone(),
            costs: costs.into_iter().map(Option::unwrap).collect(),
            feasibility: feas.into_iter().map(Option::unwrap).collect(),
            lipschitz: vec![50.0; atoms],
        });
    }
    StochasticDpModel {
        tree,
        stages,
        terminal_axes: axes,
        alpha: vec![1e6; atoms],
        horizon: StochasticHorizon::Finite,
        nominal_p: PExponent::Finite(2.0),
    }
}

/// Random adapted process for the model: per stage, constant on the state
/// partition's cells, values on the grid box.
pub fn random_adapted_process(
    rng: &mut ChaCha8Rng,
    model: &StochasticDpModel,
    stages: usize,
) -> Vec<Vec<Vec<f64>>> {
    let atoms = model.tree.atom_count();
    let mut out = Vec::with_capacity(stages);
    for t in 0..stages {
        let mut values = vec![Vec::new(); atoms];
        for cell in model.tree.state_partition(t) {
            let v = vec![rng.random_range(-1.0..1.0)];
            for &a in cell {
                values[a] = v.clone();
            }
        }
        out.push(values);
    }
    out
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
