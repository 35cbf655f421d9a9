//! BEV rasterization of scenarios into the dense 2-D and sparse
//! spatio-temporal network inputs.

mod grid;

use crate::encoders::FeaturePyramid;
use crate::tensor::Float;
use crate::scenario::{AgentClass, RoadGroup, RoadType, Scenario, N_ROAD_TYPES};
use crate::{Error, Result};

pub use grid::{crop_window, for_each_footprint_cell, GridSpec};

/// History frames encoded in the inputs.
pub const N_HISTORY: usize = 11;
/// Occupancy channels: vehicle and merged pedestrian+cyclist, per frame.
pub const OCC_CHANNELS: usize = 2 * N_HISTORY;
/// Dynamic attributes (z, vx, vy, speed) per frame plus static (length, width, height).
pub const ATTR_CHANNELS: usize = 4 * N_HISTORY + 3;
pub const ROAD_CHANNELS: usize = N_ROAD_TYPES;
pub const DENSE_CHANNELS: usize = OCC_CHANNELS + ATTR_CHANNELS + ROAD_CHANNELS;
/// Per-site features of the spatio-temporal input.
pub const ST_FEATURES: usize = 6;

const _: () = assert!(OCC_CHANNELS == 22 && ATTR_CHANNELS == 47 && DENSE_CHANNELS == 98);

/// Channel offsets of the dense input, all channel-first `[C, H, W]`.
pub mod channels {
    use super::N_HISTORY;
    pub const VEHICLE_OCC: usize = 0;
    pub const MERGED_OCC: usize = N_HISTORY;
    pub const Z: usize = 2 * N_HISTORY;
    pub const VX: usize = Z + N_HISTORY;
    pub const VY: usize = VX + N_HISTORY;
    pub const SPEED: usize = VY + N_HISTORY;
    pub const LENGTH: usize = SPEED + N_HISTORY;
    pub const WIDTH: usize = LENGTH + 1;
    pub const HEIGHT: usize = WIDTH + 1;
    pub const ROAD: usize = HEIGHT + 1;
}

/// Which agent classes a rasterization pass selects.
#[derive(Clone, Copy, Debug)]
pub struct ClassFilter {
    pub vehicle: bool,
    pub pedestrian: bool,
    pub cyclist: bool,
}

impl ClassFilter {
    pub const ALL: ClassFilter = ClassFilter { vehicle: true, pedestrian: true, cyclist: true };
    pub const VEHICLE: ClassFilter = ClassFilter { vehicle: true, pedestrian: false, cyclist: false };
    pub const MERGED: ClassFilter = ClassFilter { vehicle: false, pedestrian: true, cyclist: true };

    pub fn only(c: AgentClass) -> ClassFilter {
        ClassFilter { vehicle: c == AgentClass::Vehicle, pedestrian: c == AgentClass::Pedestrian, cyclist: c == AgentClass::Cyclist }
    }

    fn accepts(&self, c: AgentClass) -> bool {
        match c {
            AgentClass::Vehicle => self.vehicle,
            AgentClass::Pedestrian => self.pedestrian,
            AgentClass::Cyclist => self.cyclist,
        }
    }
}

/// Occupancy and attribute planes of one frame, each `H*W`.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentRaster {
    pub occupancy: Vec<f32>,
    /// z, vx, vy, speed
    pub dynamic: [Vec<f32>; 4],
    /// length, width, height
    pub extent: [Vec<f32>; 3],
}

/// Rasterizes visible, valid agents of the selected classes at `frame`.
pub fn rasterize_agents(s: &Scenario, frame: usize, grid: &GridSpec, filter: ClassFilter) -> Result<AgentRaster> {
    if frame >= s.horizon.n_history {
        return Err(Error::Data(format!("frame {frame} is outside the {}-frame history", s.horizon.n_history)));
    }
    let n = grid.cells();
    let z = || vec![0f32; n];
    let mut r = AgentRaster { occupancy: z(), dynamic: [z(), z(), z(), z()], extent: [z(), z(), z()] };
    let size = grid.size_px();
    for tr in s.tracks.iter().filter(|t| filter.accepts(t.agent_class)) {
        let st = &tr.states[frame];
        if !(st.valid && st.visible) {
            continue;
        }
        let dynv = [st.z, st.vx, st.vy, st.speed].map(|v| v as f32);
        let ext = [tr.dims.length, tr.dims.width, tr.dims.height].map(|v| v as f32);
        for_each_footprint_cell(grid, st, &tr.dims, |row, col| {
            let i = row * size + col;
            r.occupancy[i] = 1.0;
            for k in 0..4 {
                r.dynamic[k][i] = dynv[k];
            }
            for k in 0..3 {
                r.extent[k][i] = ext[k];
            }
        });
    }
    Ok(r)
}

/// Integer cells on the segment between two grid points (Bresenham).
fn bresenham(a: [i64; 2], b: [i64; 2], mut f: impl FnMut(i64, i64)) {
    let (mut x, mut y) = (a[0], a[1]);
    let dx = (b[0] - a[0]).abs();
    let dy = -(b[1] - a[1]).abs();
    let sx = if a[0] < b[0] { 1 } else { -1 };
    let sy = if a[1] < b[1] { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        f(x, y);
        if x == b[0] && y == b[1] {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Renders map polylines as one-cell strokes: `[29, H, W]`.
pub fn rasterize_map(s: &Scenario, grid: &GridSpec) -> Result<Vec<f32>> {
    grid.validate()?;
    let size = grid.size_px() as i64;
    let plane = grid.cells();
    let mut out = vec![0f32; ROAD_CHANNELS * plane];
    for el in &s.map {
        let ch = el.element_type.index();
        if ch >= ROAD_CHANNELS {
            return Err(Error::Data(format!("road type index {ch} out of range")));
        }
        let cells: Vec<[i64; 2]> = el
            .polyline
            .iter()
            .map(|&p| {
                let g = grid.world_to_grid(p);
                [g[0].round() as i64, g[1].round() as i64]
            })
            .collect();
        for w in cells.windows(2) {
            bresenham(w[0], w[1], |x, y| {
                if (0..size).contains(&x) && (0..size).contains(&y) {
                    out[ch * plane + (y * size + x) as usize] = 1.0;
                }
            });
        }
    }
    Ok(out)
}

fn check_history(s: &Scenario) -> Result<()> {
    if s.horizon.n_history != N_HISTORY {
        return Err(Error::Data(format!("inputs need {N_HISTORY} history frames, scenario has {}", s.horizon.n_history)));
    }
    Ok(())
}

/// The dense `[98, H, W]` input; see [`channels`] for the layout.
pub fn build_2d_input(s: &Scenario, grid: &GridSpec) -> Result<Vec<f32>> {
    check_history(s)?;
    let plane = grid.cells();
    let mut out = vec![0f32; DENSE_CHANNELS * plane];
    let mut put = |ch: usize, src: &[f32]| out[ch * plane..(ch + 1) * plane].copy_from_slice(src);
    let mut ext: [Vec<f32>; 3] = [vec![0.0; plane], vec![0.0; plane], vec![0.0; plane]];
    for f in 0..N_HISTORY {
        let veh = rasterize_agents(s, f, grid, ClassFilter::VEHICLE)?;
        let merged = rasterize_agents(s, f, grid, ClassFilter::MERGED)?;
        let all = rasterize_agents(s, f, grid, ClassFilter::ALL)?;
        put(channels::VEHICLE_OCC + f, &veh.occupancy);
        put(channels::MERGED_OCC + f, &merged.occupancy);
        for (k, base) in [channels::Z, channels::VX, channels::VY, channels::SPEED].into_iter().enumerate() {
            put(base + f, &all.dynamic[k]);
        }
        for k in 0..3 {
            for i in 0..plane {
                if all.occupancy[i] > 0.0 {
                    ext[k][i] = all.extent[k][i];
                }
            }
        }
    }
    put(channels::LENGTH, &ext[0]);
    put(channels::WIDTH, &ext[1]);
    put(channels::HEIGHT, &ext[2]);
    let road = rasterize_map(s, grid)?;
    out[channels::ROAD * plane..].copy_from_slice(&road);
    debug_assert_eq!(out.len(), DENSE_CHANNELS * plane);
    Ok(out)
}

/// Active sites of the spatio-temporal input with their 6 features
/// `[vehicle, pedestrian, cyclist, road center, road edge, other road]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRaster {
    pub extent: [usize; 3],
    /// `(t, y, x)`, sorted
    pub sites: Vec<[usize; 3]>,
    pub features: Vec<[f32; ST_FEATURES]>,
}

impl SparseRaster {
    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    /// Dense `[6, T, H, W]` array.
    pub fn densify(&self) -> Vec<f32> {
        let [t, h, w] = self.extent;
        let vol = t * h * w;
        let mut out = vec![0f32; ST_FEATURES * vol];
        for (s, f) in self.sites.iter().zip(&self.features) {
            let i = (s[0] * h + s[1]) * w + s[2];
            for c in 0..ST_FEATURES {
                out[c * vol + i] = f[c];
            }
        }
        out
    }
}

/// Dense `[6, T, H, W]` spatio-temporal input built without sparsification.
pub fn build_3d_dense(s: &Scenario, grid: &GridSpec) -> Result<Vec<f32>> {
    check_history(s)?;
    let plane = grid.cells();
    let vol = N_HISTORY * plane;
    let mut out = vec![0f32; ST_FEATURES * vol];
    let road = rasterize_map(s, grid)?;
    let mut stat = vec![0f32; 3 * plane];
    for ty in RoadType::ALL {
        let g = match ty.group() {
            RoadGroup::Center => 0,
            RoadGroup::Edge => 1,
            RoadGroup::Other => 2,
        };
        let src = &road[ty.index() * plane..(ty.index() + 1) * plane];
        for (d, &v) in stat[g * plane..(g + 1) * plane].iter_mut().zip(src) {
            *d = d.max(v);
        }
    }
    for t in 0..N_HISTORY {
        for (c, class) in [AgentClass::Vehicle, AgentClass::Pedestrian, AgentClass::Cyclist].into_iter().enumerate() {
            let r = rasterize_agents(s, t, grid, ClassFilter::only(class))?;
            out[c * vol + t * plane..c * vol + (t + 1) * plane].copy_from_slice(&r.occupancy);
        }
        for g in 0..3 {
            let c = 3 + g;
            out[c * vol + t * plane..c * vol + (t + 1) * plane].copy_from_slice(&stat[g * plane..(g + 1) * plane]);
        }
    }
    Ok(out)
}

/// The sparse spatio-temporal input: only sites with a nonzero feature vector.
pub fn build_3d_input(s: &Scenario, grid: &GridSpec) -> Result<SparseRaster> {
    let dense = build_3d_dense(s, grid)?;
    let size = grid.size_px();
    let extent = [N_HISTORY, size, size];
    let vol = N_HISTORY * size * size;
    let mut sites = Vec::new();
    let mut features = Vec::new();
    for i in 0..vol {
        let f: [f32; ST_FEATURES] = std::array::from_fn(|c| dense[c * vol + i]);
        if f.iter().any(|&v| v != 0.0) {
            sites.push([i / (size * size), (i / size) % size, i % size]);
            features.push(f);
        }
    }
    Ok(SparseRaster { extent, sites, features })
}

/// Both network inputs for one scenario.
#[derive(Clone, Debug)]
pub struct RasterStack {
    pub size: usize,
    /// `[98, H, W]`
    pub dense2d: Vec<f32>,
    pub sparse_st: SparseRaster,
}

pub fn build_inputs(s: &Scenario, grid: &GridSpec, with_sparse: bool) -> Result<RasterStack> {
    let dense2d = build_2d_input(s, grid)?;
    let sparse_st = if with_sparse {
        build_3d_input(s, grid)?
    } else {
        SparseRaster { extent: [N_HISTORY, grid.size_px(), grid.size_px()], sites: vec![], features: vec![] }
    };
    Ok(RasterStack { size: grid.size_px(), dense2d, sparse_st })
}

/// Rotates a dense `[C, H, W]` input by π about the grid center. Velocity
/// channels change sign with the frame.
pub fn rotate180_dense(x: &[f32], size: usize) -> Vec<f32> {
    let plane = size * size;
    let mut out = vec![0f32; x.len()];
    for (c, (src, dst)) in x.chunks(plane).zip(out.chunks_mut(plane)).enumerate() {
        let neg = (channels::VX..channels::VY + N_HISTORY).contains(&c);
        for (i, v) in src.iter().enumerate() {
            dst[plane - 1 - i] = if neg { -*v } else { *v };
        }
    }
    out
}

pub fn rotate180_sparse(s: &SparseRaster) -> SparseRaster {
    let [_, h, w] = s.extent;
    let mut pairs: Vec<([usize; 3], [f32; ST_FEATURES])> =
        s.sites.iter().zip(&s.features).map(|(p, f)| ([p[0], h - 1 - p[1], w - 1 - p[2]], *f)).collect();
    pairs.sort_by(|a, b| a.0.cmp(&b.0));
    SparseRaster { extent: s.extent, sites: pairs.iter().map(|p| p.0).collect(), features: pairs.iter().map(|p| p.1).collect() }
}

/// Centered crop of every pyramid level keeping `ratio` of each side.
pub fn crop_pyramid<T: Float>(p: &FeaturePyramid<T>, ratio: f64) -> Result<FeaturePyramid<T>> {
    let mut levels = Vec::with_capacity(p.levels.len());
    for l in &p.levels {
        let r = l.rank();
        let (h, w) = (l.dim(r - 2), l.dim(r - 1));
        let (sh, lh) = crop_window(h, ratio)?;
        let (sw, lw) = crop_window(w, ratio)?;
        levels.push(l.narrow(r - 2, sh, lh).narrow(r - 1, sw, lw));
    }
    Ok(FeaturePyramid { levels })
}
