//! Rectangular grids with multilinear interpolation over possibly-infeasible
//! node values.
//!
//! Infeasibility is a distinguished sentinel, never a float: interpolation
//! touching an infeasible corner yields [`TableValue::Infeasible`], and
//! queries that hit a breakpoint exactly collapse that axis so node lookups
//! reproduce stored values bit for bit.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid axis {0} must be nonempty and strictly increasing")]
    BadAxis(usize),
    #[error("dimension mismatch: grid is {expected}-dimensional, point has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("value table has {got} entries for a grid of {expected} nodes")]
    BadTable { expected: usize, got: usize },
}

/// A value-table entry: a finite cost or the infeasibility marker.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TableValue {
    Finite(f64),
    Infeasible,
}

impl TableValue {
    pub fn finite(self) -> Option<f64> {
        match self {
            TableValue::Finite(v) => Some(v),
            TableValue::Infeasible => None,
        }
    }

    pub fn is_infeasible(self) -> bool {
        matches!(self, TableValue::Infeasible)
    }
}

/// Cartesian product of per-dimension sorted breakpoints. Node enumeration is
/// row-major with the last axis fastest.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Grid {
    axes: Vec<Vec<f64>>,
}

impl Grid {
    pub fn new(axes: Vec<Vec<f64>>) -> Result<Self, GridError> {
        for (i, axis) in axes.iter().enumerate() {
            if axis.is_empty() || axis.windows(2).any(|w| w[0] >= w[1]) {
                return Err(GridError::BadAxis(i));
            }
        }
        Ok(Self { axes })
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    pub fn node_count(&self) -> usize {
        self.axes.iter().map(|a| a.len()).product()
    }

    pub fn node(&self, mut flat: usize) -> Vec<f64> {
        let mut coords = vec![0.0; self.dim()];
        for i in (0..self.dim()).rev() {
            let len = self.axes[i].len();
            coords[i] = self.axes[i][flat % len];
            flat /= len;
        }
        coords
    }

    pub fn nodes(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.node_count()).map(|i| self.node(i))
    }

    pub fn lower(&self) -> Vec<f64> {
        self.axes.iter().map(|a| a[0]).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.axes.iter().map(|a| *a.last().unwrap()).collect()
    }

    pub fn contains(&self, point: &[f64], tol: f64) -> bool {
        point.len() == self.dim()
            && point
                .iter()
                .zip(&self.axes)
                .all(|(p, a)| *p >= a[0] - tol && *p <= *a.last().unwrap() + tol)
    }

    pub fn clamp(&self, point: &[f64]) -> Vec<f64> {
        point
            .iter()
            .zip(&self.axes)
            .map(|(p, a)| p.max(a[0]).min(*a.last().unwrap()))
            .collect()
    }

    /// Largest spacing between adjacent breakpoints over all axes.
    pub fn max_spacing(&self) -> f64 {
        self.axes
            .iter()
            .flat_map(|a| a.windows(2).map(|w| w[1] - w[0]))
            .fold(0.0, f64::max)
    }

    /// Spacing of the cell around `coord` on the given axis (smallest adjacent
    /// gap when `coord` sits on a breakpoint).
    pub fn local_spacing(&self, axis: usize, coord: f64) -> f64 {
        let a = &self.axes[axis];
        if a.len() == 1 {
            return 0.0;
        }
        let idx = match a.binary_search_by(|v| v.partial_cmp(&coord).unwrap()) {
            Ok(i) => i,
            Err(i) => i.min(a.len() - 1),
        };
        let left = if idx > 0 { a[idx] - a[idx - 1] } else { f64::INFINITY };
        let right = if idx + 1 < a.len() { a[idx + 1] - a[idx] } else { f64::INFINITY };
        let s = left.min(right);
        if s.is_finite() {
            s
        } else {
            self.max_spacing()
        }
    }

    /// Multilinear interpolation of `values` at `point` (clamped to the box).
    /// Exact breakpoint hits collapse their axis, and any infeasible corner of
    /// the resolved cell makes the result infeasible.
    pub fn interpolate(&self, values: &[TableValue], point: &[f64]) -> Result<TableValue, GridError> {
        if point.len() != self.dim() {
            return Err(GridError::DimensionMismatch { expected: self.dim(), got: point.len() });
        }
        if values.len() != self.node_count() {
            return Err(GridError::BadTable { expected: self.node_count(), got: values.len() });
        }
        let point = self.clamp(point);

        // Per axis: base index plus an optional fractional weight.
        let mut base = vec![0usize; self.dim()];
        let mut frac: Vec<Option<f64>> = vec![None; self.dim()];
        for (i, axis) in self.axes.iter().enumerate() {
            let p = point[i];
            match axis.binary_search_by(|v| v.partial_cmp(&p).unwrap()) {
                Ok(idx) => base[i] = idx,
                Err(idx) => {
                    let lo = idx - 1;
                    base[i] = lo;
                    frac[i] = Some((p - axis[lo]) / (axis[lo + 1] - axis[lo]));
                }
            }
        }

        let varying: Vec<usize> =
            (0..self.dim()).filter(|&i| frac[i].is_some()).collect();
        let mut acc = 0.0;
        for corner in 0..(1usize << varying.len()) {
            let mut weight = 1.0;
            let mut flat = 0usize;
            for i in 0..self.dim() {
                let len = self.axes[i].len();
                let mut idx = base[i];
                if let Some(f) = frac[i] {
                    let pos = varying.iter().position(|&v| v == i).unwrap();
                    if corner >> pos & 1 == 1 {
                        idx += 1;
                        weight *= f;
                    } else {
                        weight *= 1.0 - f;
                    }
                }
                flat = flat * len + idx;
            }
            match values[flat] {
                TableValue::Infeasible => return Ok(TableValue::Infeasible),
                TableValue::Finite(v) => acc += weight * v,
            }
        }
        Ok(TableValue::Finite(acc))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_1d() -> Grid {
        Grid::new(vec![vec![0.0, 1.0, 2.0]]).unwrap()
    }

    #[test]
    fn rejects_unsorted_axes() {
        assert!(Grid::new(vec![vec![0.0, 0.0]]).is_err());
        assert!(Grid::new(vec![vec![]]).is_err());
    }

    #[test]
    fn node_enumeration_is_row_major() {
        let g = Grid::new(vec![vec![0.0, 1.0], vec![10.0, 20.0]]).unwrap();
        let nodes: Vec<Vec<f64>> = g.nodes().collect();
        assert_eq!(
            nodes,
            vec![vec![0.0, 10.0], vec![0.0, 20.0], vec![1.0, 10.0], vec![1.0, 20.0]]
        );
    }

    #[test]
    fn interpolation_is_exact_at_nodes() {
        let g = grid_1d();
        let vals = [
            TableValue::Finite(3.0),
            TableValue::Finite(-1.0),
            TableValue::Infeasible,
        ];
        assert_eq!(g.interpolate(&vals, &[0.0]).unwrap(), TableValue::Finite(3.0));
        assert_eq!(g.interpolate(&vals, &[1.0]).unwrap(), TableValue::Finite(-1.0));
        // node hit adjacent to the infeasible node stays finite
        assert_eq!(g.interpolate(&vals, &[2.0]).unwrap(), TableValue::Infeasible);
    }

    #[test]
    fn interpolation_blends_and_propagates_infeasible() {
        let g = grid_1d();
        let vals = [
            TableValue::Finite(0.0),
            TableValue::Finite(2.0),
            TableValue::Infeasible,
        ];
        assert_eq!(g.interpolate(&vals, &[0.25]).unwrap(), TableValue::Finite(0.5));
        assert_eq!(g.interpolate(&vals, &[1.5]).unwrap(), TableValue::Infeasible);
    }

    #[test]
    fn bilinear_matches_hand_computation() {
        let g = Grid::new(vec![vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let vals = [
            TableValue::Finite(0.0), // (0,0)
            TableValue::Finite(1.0), // (0,1)
            TableValue::Finite(2.0), // (1,0)
            TableValue::Finite(4.0), // (1,1)
        ];
        let v = g.interpolate(&vals, &[0.5, 0.5]).unwrap().finite().unwrap();
        assert!((v - 1.75).abs() < 1e-12);
    }

    #[test]
    fn clamps_outside_queries() {
        let g = grid_1d();
        let vals = [
            TableValue::Finite(5.0),
            TableValue::Finite(6.0),
            TableValue::Finite(7.0),
        ];
        assert_eq!(g.interpolate(&vals, &[-3.0]).unwrap(), TableValue::Finite(5.0));
        assert_eq!(g.interpolate(&vals, &[9.0]).unwrap(), TableValue::Finite(7.0));
    }
}
