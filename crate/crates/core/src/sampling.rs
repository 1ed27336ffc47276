//! Low-discrepancy sampling over balls, used by the viability checks.
//!
//! Points come from a Halton sequence (one prime base per coordinate) mapped
//! into the cube and rejected outside the unit ball, so runs with the same
//! seed are reproducible regardless of call parallelism. The seed offsets the
//! sequence start.

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Radical-inverse of `index` in the given base, in [0, 1).
pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let mut result = 0.0;
    let mut fraction = 1.0 / base as f64;
    while index > 0 {
        result += (index % base) as f64 * fraction;
        index /= base;
        fraction /= base as f64;
    }
    result
}

/// `count` Halton points in the closed ball of the given radius around
/// `center`. Radius zero collapses every point onto the center.
pub fn ball_points(center: &[f64], radius: f64, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let dim = center.len();
    assert!(dim <= PRIMES.len(), "ball sampling supports up to {} dimensions", PRIMES.len());
    let mut points = Vec::with_capacity(count);
    let mut index = seed.wrapping_mul(7919).wrapping_add(1);
    while points.len() < count {
        let cube: Vec<f64> = (0..dim).map(|i| 2.0 * radical_inverse(index, PRIMES[i]) - 1.0).collect();
        index += 1;
        let sq: f64 = cube.iter().map(|v| v * v).sum();
        if sq <= 1.0 {
            points.push(center.iter().zip(&cube).map(|(c, o)| c + radius * o).collect());
        }
    }
    points
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radical_inverse_base_two() {
        assert_eq!(radical_inverse(1, 2), 0.5);
        assert_eq!(radical_inverse(2, 2), 0.25);
        assert_eq!(radical_inverse(3, 2), 0.75);
    }

    #[test]
    fn points_stay_in_ball_and_are_reproducible() {
        let a = ball_points(&[1.0, -2.0], 0.5, 16, 42);
        let b = ball_points(&[1.0, -2.0], 0.5, 16, 42);
        assert_eq!(a, b);
        for p in &a {
            let d2: f64 = p.iter().zip(&[1.0, -2.0]).map(|(x, c)| (x - c) * (x - c)).sum();
            assert!(d2 <= 0.25 + 1e-12);
        }
        let c = ball_points(&[1.0, -2.0], 0.5, 16, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_radius_collapses_to_center() {
        let pts = ball_points(&[0.3], 0.0, 4, 0);
        assert!(pts.iter().all(|p| p == &vec![0.3]));
    }
}
