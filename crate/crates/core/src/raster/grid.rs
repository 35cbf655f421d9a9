use serde::{Deserialize, Serialize};

use crate::scenario::{AgentState, BoxDims};
use crate::{Error, Result};

/// A square BEV grid. Cell `(row, col)` has its center at
/// `origin + ((col + 0.5) * res, (row + 0.5) * res)`; rows grow with world y.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub extent_m: f64,
    pub resolution_mpp: f64,
    pub origin: [f64; 2],
}

impl GridSpec {
    /// A grid centered on the world origin.
    pub fn centered(extent_m: f64, resolution_mpp: f64) -> Result<GridSpec> {
        let g = GridSpec { extent_m, resolution_mpp, origin: [-extent_m / 2.0, -extent_m / 2.0] };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resolution_mpp > 0.0) || !self.resolution_mpp.is_finite() {
            return Err(Error::Config(format!("grid resolution must be positive, got {}", self.resolution_mpp)));
        }
        if !(self.extent_m > 0.0) {
            return Err(Error::Config(format!("grid extent must be positive, got {}", self.extent_m)));
        }
        let n = self.extent_m / self.resolution_mpp;
        if (n - n.round()).abs() > 1e-6 || n.round() < 1.0 {
            return Err(Error::Config(format!(
                "grid extent {} m is not an integer multiple of {} m/px",
                self.extent_m, self.resolution_mpp
            )));
        }
        Ok(())
    }

    pub fn size_px(&self) -> usize {
        (self.extent_m / self.resolution_mpp).round() as usize
    }

    pub fn cells(&self) -> usize {
        self.size_px() * self.size_px()
    }

    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            self.origin[0] + (col as f64 + 0.5) * self.resolution_mpp,
            self.origin[1] + (row as f64 + 0.5) * self.resolution_mpp,
        ]
    }

    /// Continuous grid coordinates `(col, row)` of a world point, in the
    /// convention where cell centers sit at integer coordinates.
    pub fn world_to_grid(&self, p: [f64; 2]) -> [f64; 2] {
        [
            (p[0] - self.origin[0]) / self.resolution_mpp - 0.5,
            (p[1] - self.origin[1]) / self.resolution_mpp - 0.5,
        ]
    }

    /// Same footprint on the world plane at a different resolution.
    pub fn with_resolution(&self, resolution_mpp: f64) -> Result<GridSpec> {
        let g = GridSpec { resolution_mpp, ..*self };
        g.validate()?;
        Ok(g)
    }

    /// Centered sub-grid keeping `ratio` of the extent.
    pub fn center_crop(&self, ratio: f64) -> Result<GridSpec> {
        let n = self.size_px();
        let (start, len) = crop_window(n, ratio)?;
        let r = self.resolution_mpp;
        Ok(GridSpec {
            extent_m: len as f64 * r,
            resolution_mpp: r,
            origin: [self.origin[0] + start as f64 * r, self.origin[1] + start as f64 * r],
        })
    }
}

/// Start and length of a centered crop keeping `ratio` of `n` cells. The kept
/// size must be integral and positive; the left margin is floored.
pub fn crop_window(n: usize, ratio: f64) -> Result<(usize, usize)> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("crop ratio must lie in (0, 1], got {ratio}")));
    }
    let kept = n as f64 * ratio;
    let len = kept.round();
    if (kept - len).abs() > 1e-6 {
        return Err(Error::Config(format!("crop of {n} by ratio {ratio} is not integral ({kept})")));
    }
    let len = len as usize;
    if len < 1 {
        return Err(Error::Config(format!("crop of {n} by ratio {ratio} is empty")));
    }
    Ok(((n - len) / 2, len))
}

/// Calls `f(row, col)` for every cell whose center lies strictly inside the
/// oriented box of an agent state.
pub fn for_each_footprint_cell(grid: &GridSpec, st: &AgentState, dims: &BoxDims, mut f: impl FnMut(usize, usize)) {
    let n = grid.size_px() as isize;
    let (s, c) = st.heading.sin_cos();
    let (hl, hw) = (dims.length / 2.0, dims.width / 2.0);
    let ext_x = hl * c.abs() + hw * s.abs();
    let ext_y = hl * s.abs() + hw * c.abs();
    let lo = grid.world_to_grid([st.x - ext_x, st.y - ext_y]);
    let hi = grid.world_to_grid([st.x + ext_x, st.y + ext_y]);
    let c0 = (lo[0].floor() as isize).max(0);
    let c1 = (hi[0].ceil() as isize).min(n - 1);
    let r0 = (lo[1].floor() as isize).max(0);
    let r1 = (hi[1].ceil() as isize).min(n - 1);
    for row in r0..=r1 {
        for col in c0..=c1 {
            let p = grid.cell_center(row as usize, col as usize);
            let (dx, dy) = (p[0] - st.x, p[1] - st.y);
            let lx = c * dx + s * dy;
            let ly = -s * dx + c * dy;
            if lx.abs() < hl && ly.abs() < hw {
                f(row as usize, col as usize);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_centers() {
        let g = GridSpec::centered(40.0, 0.3125).unwrap();
        assert_eq!(g.size_px(), 128);
        assert_eq!(g.cell_center(0, 0), [-20.0 + 0.15625, -20.0 + 0.15625]);
        let w = g.world_to_grid(g.cell_center(3, 7));
        assert!((w[0] - 7.0).abs() < 1e-12 && (w[1] - 3.0).abs() < 1e-12);
        assert!(GridSpec::centered(40.0, 0.0).is_err());
        assert!(GridSpec::centered(40.0, -1.0).is_err());
        assert!(GridSpec::centered(40.0, 0.3).is_err());
    }

    #[test]
    fn crop_index_arithmetic() {
        assert_eq!(crop_window(96, 2.0 / 3.0).unwrap(), (16, 64));
        assert_eq!(crop_window(768, 2.0 / 3.0).unwrap(), (128, 512));
        assert_eq!(crop_window(64, 1.0).unwrap(), (0, 64));
        assert!(crop_window(64, 2.0 / 3.0).is_err());
        assert!(crop_window(64, 0.0).is_err());
    }
}
