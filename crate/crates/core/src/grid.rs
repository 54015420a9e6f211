use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform node grid on `[0, L]`: `n_cells + 1` nodes with spacing `L / n_cells`.
///
/// Node 0 sits on the inlet and node `n_cells` on the outlet, so boundary
/// values are carried exactly instead of being extrapolated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub n_cells: usize,
    pub length: f64,
}

impl Grid {
    pub const MIN_CELLS: usize = 8;

    pub fn new(n_cells: usize, length: f64) -> Result<Self> {
        if n_cells < Self::MIN_CELLS {
            return Err(Error::invalid(
                "n_cells",
                format!("need at least {} cells, got {n_cells}", Self::MIN_CELLS),
            ));
        }
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::invalid("length", format!("must be positive, got {length}")));
        }
        Ok(Self { n_cells, length })
    }

    pub fn dx(&self) -> f64 {
        self.length / self.n_cells as f64
    }

    pub fn n_nodes(&self) -> usize {
        self.n_cells + 1
    }

    pub fn x(&self, j: usize) -> f64 {
        if j == self.n_cells {
            self.length
        } else {
            j as f64 * self.dx()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_nodes()).map(|j| self.x(j)).collect()
    }

    /// Composite trapezoid weights for integrating a nodal field over `[0, L]`.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let dx = self.dx();
        let mut w = vec![dx; self.n_nodes()];
        w[0] = 0.5 * dx;
        w[self.n_cells] = 0.5 * dx;
        w
    }

    pub(crate) fn check_len(&self, what: &str, len: usize) -> Result<()> {
        if len != self.n_nodes() {
            return Err(Error::GridMismatch(format!(
                "{what} has {len} nodes, grid has {}",
                self.n_nodes()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_coarse_grids() {
        assert!(Grid::new(7, 1000.0).is_err());
        assert!(Grid::new(8, 1000.0).is_ok());
        assert!(Grid::new(8, 0.0).is_err());
    }

    #[test]
    fn nodes_cover_both_boundaries() {
        let g = Grid::new(200, 1000.0).unwrap();
        let x = g.nodes();
        assert_eq!(x.len(), 201);
        assert_eq!(x[0], 0.0);
        assert_eq!(x[200], 1000.0);
        assert!((g.dx() - 5.0).abs() < 1e-15);
        let total: f64 = g.trapezoid_weights().iter().sum();
        assert!((total - 1000.0).abs() < 1e-9);
    }
}
