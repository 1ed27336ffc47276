//! Generalized directional derivatives against the finite-difference oracle,
//! plus the support-function identities on random fleets.

mod common;

use rand::Rng;
use common::{fd_dir_derivative, random_fleet_expr, random_unit_direction, rng, stable_point};
use nsdp::expr::{Expr, SmoothAtom};
use proptest::prelude::*;

#[test]
fn gen_dir_derivative_matches_fd_oracle_on_random_fleet() {
    let mut rng = rng(0xfeed_0001);
    let mut checked = 0usize;
    while checked < 60 {
        let dim = rng.random_range(1..=4usize);
        let fleet = random_fleet_expr(&mut rng, dim);
        let Some(x) = stable_point(&mut rng, &fleet.expr, dim) else {
            continue;
        };
        for k in 0..5 {
            let h = random_unit_direction(&mut rng, dim);
            let exact = fleet.expr.gen_dir_derivative(&x, &h, 1e-9).unwrap();
            let oracle = fd_dir_derivative(
                |p| fleet.expr.evaluate(p).unwrap(),
                &x,
                &h,
                0x51eed + k,
            );
            assert!(
                (exact - oracle.estimate).abs() <= 1e-3,
                "dim {dim}: exact {exact} vs oracle {} (lipschitz {}, curvature {})",
                oracle.estimate,
                fleet.lipschitz,
                fleet.curvature
            );
        }
        checked += 1;
    }
}

#[test]
fn fd_oracle_reproduces_kink_values() {
    // At the kink of |x| the limsup quotient is 1 in both directions.
    let abs = Expr::abs(Expr::atom(SmoothAtom::affine("x", vec![1.0], 0.0)));
    for h in [1.0, -1.0] {
        let oracle = fd_dir_derivative(|p| abs.evaluate(p).unwrap(), &[0.0], &[h], 7);
        assert!((oracle.estimate - 1.0).abs() <= 1e-9, "oracle {}", oracle.estimate);
        let exact = abs.gen_dir_derivative(&[0.0], &[h], 1e-9).unwrap();
        assert_eq!(exact, 1.0);
    }

    // max(x1, x2) at the diagonal: φ°((1,1); h) = max(h1, h2).
    let max_xy = Expr::max_of(vec![
        Expr::atom(SmoothAtom::affine("x1", vec![1.0, 0.0], 0.0)),
        Expr::atom(SmoothAtom::affine("x2", vec![0.0, 1.0], 0.0)),
    ])
    .unwrap();
    for (h, want) in [([1.0, 0.0], 1.0), ([0.0, 1.0], 1.0), ([-1.0, -1.0], -1.0)] {
        let oracle = fd_dir_derivative(|p| max_xy.evaluate(p).unwrap(), &[1.0, 1.0], &h, 7);
        assert!((oracle.estimate - want).abs() <= 1e-9);
        let exact = max_xy.gen_dir_derivative(&[1.0, 1.0], &h, 1e-9).unwrap();
        assert_eq!(exact, want);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Positive homogeneity is exact in floating point (support of a scaled
    /// direction scales).
    #[test]
    fn homogeneity(lambda in 0.0f64..8.0, seed in 0u64..1000) {
        let mut rng = rng(seed);
        let fleet = random_fleet_expr(&mut rng, 2);
        let x = [0.3, -0.4];
        let h = [0.7, 0.2];
        let scaled = [lambda * h[0], lambda * h[1]];
        let a = fleet.expr.gen_dir_derivative(&x, &scaled, 1e-9).unwrap();
        let b = lambda * fleet.expr.gen_dir_derivative(&x, &h, 1e-9).unwrap();
        // Support of finitely many generators: both sides round identically
        // only up to the dot-product rounding, so allow an ulp-scale slack.
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }

    /// Subadditivity of the directional derivative in the direction argument.
    #[test]
    fn subadditivity(seed in 0u64..1000) {
        let mut rng = rng(seed);
        let fleet = random_fleet_expr(&mut rng, 3);
        let x = [0.1, -0.2, 0.5];
        let h1 = random_unit_direction(&mut rng, 3);
        let h2 = random_unit_direction(&mut rng, 3);
        let sum: Vec<f64> = h1.iter().zip(&h2).map(|(a, b)| a + b).collect();
        let lhs = fleet.expr.gen_dir_derivative(&x, &sum, 1e-9).unwrap();
        let rhs = fleet.expr.gen_dir_derivative(&x, &h1, 1e-9).unwrap()
            + fleet.expr.gen_dir_derivative(&x, &h2, 1e-9).unwrap();
        prop_assert!(lhs <= rhs + 1e-9, "lhs {lhs} rhs {rhs}");
    }

    /// ∂°(-f) = -∂°f as generator sets (up to ordering).
    #[test]
    fn negation_antisymmetry(seed in 0u64..1000) {
        let mut rng = rng(seed);
        let fleet = random_fleet_expr(&mut rng, 2);
        let x = [0.25, -0.75];
        let a = fleet.expr.clarke_gradient(&x, 1e-9).unwrap();
        let b = Expr::negate(fleet.expr.clone()).clarke_gradient(&x, 1e-9).unwrap();
        let mut asorted: Vec<Vec<f64>> = a.generators().to_vec();
        let mut bsorted: Vec<Vec<f64>> =
            b.generators().iter().map(|g| g.iter().map(|v| -v).collect()).collect();
        let key = |v: &Vec<f64>| (v[0], v[1]);
        asorted.sort_by(|p, q| key(p).partial_cmp(&key(q)).unwrap());
        bsorted.sort_by(|p, q| key(p).partial_cmp(&key(q)).unwrap());
        prop_assert_eq!(asorted, bsorted);
    }

    /// Wherever the gradient is a singleton, the strict-derivative probe
    /// returns exactly that vector.
    #[test]
    fn singleton_matches_strict_probe(seed in 0u64..200) {
        let mut rng = rng(seed);
        let fleet = random_fleet_expr(&mut rng, 2);
        if let Some(x) = stable_point(&mut rng, &fleet.expr, 2) {
            let set = fleet.expr.clarke_gradient(&x, 1e-9).unwrap();
            if let Some(g) = set.as_singleton() {
                let probed = fleet.expr.strict_derivative_probe(&x, 1e-6, 16).unwrap();
                prop_assert_eq!(probed, Some(g.to_vec()));
            }
        }
    }
}
