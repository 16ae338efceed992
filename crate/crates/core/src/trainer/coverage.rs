//! Grid-occupancy coverage of selected observation dimensions.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

/// Default square bin edge.
pub const DEFAULT_BIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageGrid {
    bin_size: f64,
    dims: Vec<usize>,
    occupied: BTreeSet<Vec<i64>>,
}

impl CoverageGrid {
    pub fn new(dims: &[usize], bin_size: f64) -> Self {
        assert!(bin_size > 0.0, "bin size must be positive");
        assert!(!dims.is_empty(), "coverage needs at least one dimension");
        Self {
            bin_size,
            dims: dims.to_vec(),
            occupied: BTreeSet::new(),
        }
    }

    pub fn bin_size(&self) -> f64 {
        self.bin_size
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn bin_of(&self, obs: &[f64]) -> Vec<i64> {
        self.dims
            .iter()
            .map(|&d| (obs[d] / self.bin_size).floor() as i64)
            .collect()
    }

    /// Marks the bin of `obs`; returns true when it was new.
    pub fn visit(&mut self, obs: &[f64]) -> bool {
        let bin = self.bin_of(obs);
        self.occupied.insert(bin)
    }

    pub fn visit_all<R: AsRef<[f64]>>(&mut self, states: &[R]) {
        for s in states {
            self.visit(s.as_ref());
        }
    }

    pub fn count(&self) -> usize {
        self.occupied.len()
    }

    pub fn occupied(&self) -> impl Iterator<Item = &Vec<i64>> {
        self.occupied.iter()
    }
}

/// Distinct `floor(x / bin_size)` cells over every state of every trajectory.
pub fn state_coverage(trajectories: &[Vec<Vec<f64>>], dims: &[usize], bin_size: f64) -> usize {
    let mut grid = CoverageGrid::new(dims, bin_size);
    for traj in trajectories {
        grid.visit_all(traj);
    }
    grid.count()
}
