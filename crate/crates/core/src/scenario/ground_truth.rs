use serde::{Deserialize, Serialize};

use super::{AgentClass, AgentState, AgentTrack, Scenario};
use crate::raster::{for_each_footprint_cell, GridSpec};
use crate::Result;

/// Vehicle occupancy and backward flow on the output grid.
///
/// Layouts are channel-first: `observed`/`occluded` are `[T + 1, H, W]`
/// (waypoint 0 is the current frame) and `flow` is `[T, 2, H, W]` holding
/// `(dx, dy)` in grid cells for waypoints `1..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub grid: GridSpec,
    pub n_waypoints: usize,
    pub observed: Vec<f32>,
    pub occluded: Vec<f32>,
    pub flow: Vec<f32>,
}

impl GroundTruth {
    pub fn size(&self) -> usize {
        self.grid.size_px()
    }

    fn plane(&self) -> usize {
        self.grid.cells()
    }

    pub fn observed_at(&self, t: usize) -> &[f32] {
        &self.observed[t * self.plane()..(t + 1) * self.plane()]
    }

    pub fn occluded_at(&self, t: usize) -> &[f32] {
        &self.occluded[t * self.plane()..(t + 1) * self.plane()]
    }

    /// `[2, H, W]` backward flow into waypoint `t - 1`, for `t >= 1`.
    pub fn flow_at(&self, t: usize) -> &[f32] {
        assert!(t >= 1 && t <= self.n_waypoints, "flow is defined for waypoints 1..=T");
        let p = 2 * self.plane();
        &self.flow[(t - 1) * p..t * p]
    }

    /// Observed occupancy for waypoints `1..=T` as `[T, H, W]`.
    pub fn future_observed(&self) -> &[f32] {
        &self.observed[self.plane()..]
    }

    pub fn future_occluded(&self) -> &[f32] {
        &self.occluded[self.plane()..]
    }
}

/// World point at `t_prev` of the body point that sits at `p` at `t_now`.
pub(crate) fn rigid_backward(p: [f64; 2], now: &AgentState, prev: &AgentState) -> [f64; 2] {
    let (s, c) = now.heading.sin_cos();
    let (dx, dy) = (p[0] - now.x, p[1] - now.y);
    let (lx, ly) = (c * dx + s * dy, -s * dx + c * dy);
    let (s2, c2) = prev.heading.sin_cos();
    [prev.x + c2 * lx - s2 * ly, prev.y + s2 * lx + c2 * ly]
}

/// Renders vehicle occupancy at every waypoint and rigid backward flow on
/// the footprints. Overlapping footprints take the flow of the agent whose
/// center is nearest.
pub fn derive_ground_truth(s: &Scenario, grid: &GridSpec) -> Result<GroundTruth> {
    grid.validate()?;
    s.validate()?;
    let h = s.horizon;
    let n = grid.size_px();
    let plane = n * n;
    let nt = h.n_future_waypoints;
    let mut observed = vec![0f32; (nt + 1) * plane];
    let mut occluded = vec![0f32; (nt + 1) * plane];
    let mut flow = vec![0f32; nt * 2 * plane];
    let vehicles: Vec<&AgentTrack> = s.tracks.iter().filter(|t| t.agent_class == AgentClass::Vehicle).collect();
    let hidden: Vec<bool> = vehicles.iter().map(|t| t.hidden_in_history(h.n_history)).collect();
    let mut owner: Vec<Option<(usize, f64)>> = vec![None; plane];
    for t in 0..=nt {
        let k = h.waypoint_frame(t);
        owner.iter_mut().for_each(|o| *o = None);
        for (a, tr) in vehicles.iter().enumerate() {
            let st = &tr.states[k];
            if !st.valid {
                continue;
            }
            let target = if hidden[a] { &mut occluded } else { &mut observed };
            for_each_footprint_cell(grid, st, &tr.dims, |r, c| {
                let idx = r * n + c;
                target[t * plane + idx] = 1.0;
                let p = grid.cell_center(r, c);
                let d = (p[0] - st.x).hypot(p[1] - st.y);
                if owner[idx].is_none_or(|(_, best)| d < best) {
                    owner[idx] = Some((a, d));
                }
            });
        }
        if t == 0 {
            continue;
        }
        let kp = h.waypoint_frame(t - 1);
        let res = grid.resolution_mpp;
        for (idx, o) in owner.iter().enumerate() {
            let Some((a, _)) = *o else { continue };
            let tr = vehicles[a];
            let (now, prev) = (&tr.states[k], &tr.states[kp]);
            if !prev.valid {
                continue;
            }
            let p = grid.cell_center(idx / n, idx % n);
            let q = rigid_backward(p, now, prev);
            let base = (t - 1) * 2 * plane;
            flow[base + idx] = ((q[0] - p[0]) / res) as f32;
            flow[base + plane + idx] = ((q[1] - p[1]) / res) as f32;
        }
    }
    Ok(GroundTruth { grid: *grid, n_waypoints: nt, observed, occluded, flow })
}
