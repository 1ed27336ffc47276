//! Reduction fidelity, degenerate-tree equivalence and the pointwise /
//! aggregate consistency of per-atom gradient families on random fleets.

mod common;

use common::{random_adapted_process, random_stochastic_model, rng};
use nsdp::dp::{self, AuditOptions, SolveOptions};
use nsdp::stochastic::{
    integral_cost, integral_subdiff, reduce_to_deterministic, reduced_euler_check,
    selection_normal_cone, stochastic_euler_check, AdaptedProcess, Block, PExponent,
    ScenarioTree, StochasticDpModel, StochasticHorizon, StochasticStage, validate_adapted,
};
use nsdp::expr::{Expr, SmoothAtom};
use nsdp::feasibility::FeasibilitySet;

#[test]
fn objective_round_trip_is_exact_on_random_models() {
    let mut rng = rng(0xab1e_0001);
    for instance in 0..20 {
        let model = random_stochastic_model(&mut rng);
        let red = reduce_to_deterministic(&model).unwrap();
        let stages = random_adapted_process(&mut rng, &model, 3);
        validate_adapted(&AdaptedProcess { stages: stages.clone() }, &model.tree).unwrap();
        let flat = red
            .flatten_process(&AdaptedProcess { stages: stages.clone() })
            .unwrap();
        for t in 0..2 {
            let direct = integral_cost(&model, t, &stages[t], &stages[t + 1]).unwrap();
            let joined = [flat[t].clone(), flat[t + 1].clone()].concat();
            let reduced = red.model.stages[t].cost.evaluate(&joined).unwrap();
            assert_eq!(direct, reduced, "instance {instance}, stage {t}");
        }
    }
}

#[test]
fn per_atom_supports_aggregate_to_reduced_directional_derivatives() {
    // Under the μ-weighted pairing, the directional derivative of the reduced
    // cost along a flattened adapted direction is the μ-weighted sum of the
    // per-atom support values.
    let mut rng = rng(0xab1e_0002);
    for _ in 0..10 {
        let model = random_stochastic_model(&mut rng);
        let red = reduce_to_deterministic(&model).unwrap();
        let stages = random_adapted_process(&mut rng, &model, 3);
        let flat = red
            .flatten_process(&AdaptedProcess { stages: stages.clone() })
            .unwrap();
        for t in 0..2 {
            let family = match integral_subdiff(
                &model,
                t,
                &stages[t],
                &stages[t + 1],
                Block::State,
                1e-9,
            ) {
                Ok(f) => f,
                // Random points can sit on a kink whose regularity the
                // structural certificate cannot establish; skip those.
                Err(_) => continue,
            };
            // Direction adapted to the state stage: constant on state cells.
            let direction = random_adapted_process(&mut rng, &model, t + 1)
                .pop()
                .unwrap();
            let flat_dir = red.flatten_stage(t, &direction).unwrap();
            // Reduced directional derivative in the (x, 0) block.
            let joined = [flat[t].clone(), flat[t + 1].clone()].concat();
            let mut full_dir = flat_dir.clone();
            full_dir.extend(vec![0.0; flat[t + 1].len()]);
            let reduced = red.model.stages[t]
                .cost
                .gen_dir_derivative(&joined, &full_dir, 1e-9)
                .unwrap();
            let mut weighted = 0.0;
            for (atom, polytope) in family.iter().enumerate() {
                weighted += model.tree.probabilities()[atom]
                    * polytope.support(&direction[atom]).unwrap();
            }
            assert!(
                (reduced - weighted).abs() <= 1e-6,
                "stage {t}: reduced {reduced} vs weighted {weighted}"
            );
        }
    }
}

#[test]
fn selection_cones_match_reduced_cones_blockwise() {
    let mut rng = rng(0xab1e_0003);
    for _ in 0..10 {
        let model = random_stochastic_model(&mut rng);
        let red = reduce_to_deterministic(&model).unwrap();
        let stages = random_adapted_process(&mut rng, &model, 2);
        let f = &stages[0];
        let g = &stages[1];
        let cones = match selection_normal_cone(&model, 0, f, g, 1e-8) {
            Ok(c) => c,
            Err(_) => continue,
        };
        let x = red.flatten_stage(0, f).unwrap();
        let y = red.flatten_stage(1, g).unwrap();
        let reduced = red.model.stages[0]
            .feasibility
            .normal_cone(&x, &y, 1e-8)
            .unwrap();
        // Every reduced ray lives in one action-cell block and equals the
        // per-atom ray of that cell (cones are scale-free, so the block
        // embedding is the whole μ-rescaling story).
        let dim = model.state_dim(1);
        for ray in reduced.rays() {
            let block = ray
                .chunks(dim)
                .position(|c| c.iter().any(|v| *v != 0.0))
                .expect("nonzero ray");
            let cell = &red.state_cells(1)[block];
            let atom_cone = &cones[cell[0]];
            let segment = &ray[block * dim..(block + 1) * dim];
            assert!(
                atom_cone.rays().iter().any(|r| r == segment),
                "reduced ray {ray:?} missing from atom cone {:?}",
                atom_cone.rays()
            );
        }
    }
}

#[test]
fn one_atom_models_collapse_to_deterministic_bitwise() {
    let mut rng = rng(0xab1e_0004);
    for _ in 0..20 {
        // One-atom instance of the random fleet.
        let base = random_stochastic_model(&mut rng);
        let one = StochasticDpModel {
            tree: ScenarioTree::new(
                vec![1.0],
                vec![vec![vec![0]], vec![vec![0]], vec![vec![0]]],
            )
            .unwrap(),
            stages: base
                .stages
                .iter()
                .map(|s| StochasticStage {
                    axes: s.axes.clone(),
                    costs: vec![s.costs[0].clone()],
                    feasibility: vec![s.feasibility[0].clone()],
                    lipschitz: vec![s.lipschitz[0]],
                })
                .collect(),
            terminal_axes: base.terminal_axes.clone(),
            alpha: vec![1e6],
            horizon: StochasticHorizon::Finite,
            nominal_p: PExponent::Finite(2.0),
        };
        let red = reduce_to_deterministic(&one).unwrap();
        let table = dp::solve_value(&red.model, &SolveOptions::default()).unwrap();
        let opts = AuditOptions::default();

        // A policy triple from a grid node.
        let x = vec![0.0];
        let Ok(policy) = dp::extract_policy(&red.model, &table, 0, &x, &opts.solve, 1e-9) else {
            continue;
        };
        let y = policy.generators()[0].clone();
        let Ok(policy2) = dp::extract_policy(&red.model, &table, 1, &y, &opts.solve, 1e-9) else {
            continue;
        };
        let z = policy2.generators()[0].clone();

        let f = vec![x.clone()];
        let g = vec![y.clone()];
        let n = vec![z.clone()];
        let stoch = match stochastic_euler_check(&one, &red, &table, 0, &f, &g, &n, &opts) {
            Ok(c) => c,
            Err(_) => continue,
        };
        let det = reduced_euler_check(&red, &table, 0, &f, &g, &n, &opts).unwrap();
        let atom = &stoch.atoms[0];
        assert_eq!(atom.membership.verdict, det.membership.verdict);
        assert_eq!(atom.membership.residual, det.membership.residual);
        assert_eq!(atom.part_action.generators(), det.part_action.generators());
        assert_eq!(atom.part_next_state.generators(), det.part_next_state.generators());
        assert_eq!(atom.normal_cone.rays(), det.normal_cone.rays());
    }
}

#[test]
fn perturbing_one_cell_flips_an_atom() {
    // The closed-form two-atom fleet: φ₀ = (y - x)², φ₁ = (z - a(ω)y)².
    let quad_diff = |alpha: f64, name: &str| {
        Expr::atom(
            SmoothAtom::quadratic(
                name,
                vec![vec![2.0 * alpha * alpha, -2.0 * alpha], vec![-2.0 * alpha, 2.0]],
                vec![0.0, 0.0],
                0.0,
            )
            .unwrap(),
        )
    };
    let axes = vec![vec![-1.0, -0.5, 0.0, 0.5, 1.0]];
    let tree =
        ScenarioTree::new(vec![0.5, 0.5], vec![vec![vec![0, 1]], vec![vec![0], vec![1]]])
            .unwrap();
    let wide = FeasibilitySet::box_set(vec![-2.0], vec![2.0], 1).unwrap();
    let model = StochasticDpModel {
        tree,
        stages: vec![
            StochasticStage {
                axes: axes.clone(),
                costs: vec![quad_diff(1.0, "q0"), quad_diff(1.0, "q0")],
                feasibility: vec![wide.clone(), wide.clone()],
                lipschitz: vec![20.0, 20.0],
            },
            StochasticStage {
                axes: axes.clone(),
                costs: vec![quad_diff(1.0, "q1"), quad_diff(2.0, "q2")],
                feasibility: vec![wide.clone(), wide],
                lipschitz: vec![20.0, 30.0],
            },
        ],
        terminal_axes: axes,
        alpha: vec![1e6, 1e6],
        horizon: StochasticHorizon::Finite,
        nominal_p: PExponent::Finite(2.0),
    };
    let red = reduce_to_deterministic(&model).unwrap();
    let table = dp::solve_value(&red.model, &SolveOptions::default()).unwrap();
    let opts = AuditOptions::default();

    let f = vec![vec![0.0]; 2];
    let g = vec![vec![0.0]; 2];
    let n = vec![vec![0.0]; 2];
    let cert = stochastic_euler_check(&model, &red, &table, 0, &f, &g, &n, &opts).unwrap();
    assert!(cert.all_member);

    // Perturb the single stage-0 information cell by 0.1 and re-optimize the
    // terminal action per atom: every atom must separate.
    let g = vec![vec![0.1]; 2];
    let n = vec![vec![0.1], vec![0.2]];
    let cert = stochastic_euler_check(&model, &red, &table, 0, &f, &g, &n, &opts).unwrap();
    assert!(!cert.all_member);
    assert!(cert.atoms.iter().any(|a| !a.membership.is_member()));

    // Perturb a single terminal cell instead: only that atom's inclusion
    // needs to fail, adaptedness stays intact.
    let g = vec![vec![0.0]; 2];
    let n = vec![vec![0.0], vec![0.1]];
    let cert = stochastic_euler_check(&model, &red, &table, 0, &f, &g, &n, &opts).unwrap();
    assert!(!cert.all_member);
    assert!(!cert.atoms[1].membership.is_member());
    assert!(cert.atoms[0].membership.is_member());
}
