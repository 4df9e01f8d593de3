use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Structured storage-aquifer grid. Layer index `iz = 0` is the top layer;
/// `z` increases downward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// Cell dimensions in meters.
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, nz: usize, dx: f64, dy: f64, dz: f64) -> Result<Self> {
        let g = GridSpec {
            nx,
            ny,
            nz,
            dx,
            dy,
            dz,
        };
        g.validate()?;
        Ok(g)
    }

    /// Storage-aquifer grid at full scale: 80 x 80 x 20 cells of 150 x 150 x 5 m.
    pub fn paper_scale() -> Self {
        GridSpec {
            nx: 80,
            ny: 80,
            nz: 20,
            dx: 150.0,
            dy: 150.0,
            dz: 5.0,
        }
    }

    /// Reduced grid for desk-scale experiments: 20 x 20 x 5 cells, same cell size.
    pub fn desk_scale() -> Self {
        GridSpec {
            nx: 20,
            ny: 20,
            nz: 5,
            dx: 150.0,
            dy: 150.0,
            dz: 5.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 1 || self.ny < 1 || self.nz < 1 {
            return Err(Error::invalid("grid cell counts must be >= 1"));
        }
        if !(self.dx > 0.0 && self.dy > 0.0 && self.dz > 0.0) {
            return Err(Error::invalid("grid cell dimensions must be > 0"));
        }
        Ok(())
    }

    /// Total cell count n_s.
    pub fn n_cells(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn cell_volume(&self) -> f64 {
        self.dx * self.dy * self.dz
    }

    /// Flat index; x varies fastest, then y, then z.
    #[inline]
    pub fn idx(&self, ix: usize, iy: usize, iz: usize) -> usize {
        debug_assert!(ix < self.nx && iy < self.ny && iz < self.nz);
        ix + self.nx * (iy + self.ny * iz)
    }

    #[inline]
    pub fn coords(&self, cell: usize) -> (usize, usize, usize) {
        let ix = cell % self.nx;
        let iy = (cell / self.nx) % self.ny;
        let iz = cell / (self.nx * self.ny);
        (ix, iy, iz)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_roundtrip() {
        let g = GridSpec::desk_scale();
        for cell in [0, 1, 19, 20, 399, 400, 1999] {
            let (i, j, k) = g.coords(cell);
            assert_eq!(g.idx(i, j, k), cell);
        }
        assert_eq!(g.n_cells(), 2000);
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(GridSpec::new(0, 4, 4, 1.0, 1.0, 1.0).is_err());
        assert!(GridSpec::new(4, 4, 4, 0.0, 1.0, 1.0).is_err());
    }
}
