use std::f64::consts::{FRAC_PI_2, PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AgentClass, AgentState, AgentTrack, BoxDims, Horizon, MapElement, RoadType, Scenario};
use crate::{Error, Result};

/// Closed interval `[min, max]`, serialized as a two-element list.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range(pub f64, pub f64);

impl Range {
    fn check(&self, what: &str) -> Result<()> {
        if !(self.0.is_finite() && self.1.is_finite()) || self.0 > self.1 {
            return Err(Error::Config(format!("{what}: invalid range [{}, {}]", self.0, self.1)));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.0 == self.1 {
            self.0
        } else {
            rng.random_range(self.0..=self.1)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    StraightRoad,
    Intersection,
    Curve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_vehicles: [usize; 2],
    pub n_pedestrians: [usize; 2],
    pub n_cyclists: [usize; 2],
    /// m/s
    pub vehicle_speed: Range,
    pub pedestrian_speed: Range,
    pub cyclist_speed: Range,
    /// Probability that a vehicle is parked (zero speed).
    pub parked_prob: f64,
    /// Probability that a vehicle is hidden for the whole history window.
    pub occluded_prob: f64,
    pub layouts: Vec<Layout>,
    /// Agents are spawned within this distance (m) of the origin at the current frame.
    pub spawn_radius: f64,
    pub frame_dt: f64,
    pub horizon: Horizon,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_vehicles: [3, 8],
            n_pedestrians: [0, 3],
            n_cyclists: [0, 2],
            vehicle_speed: Range(0.5, 3.0),
            pedestrian_speed: Range(0.3, 1.5),
            cyclist_speed: Range(1.0, 3.0),
            parked_prob: 0.15,
            occluded_prob: 0.15,
            layouts: vec![Layout::StraightRoad, Layout::Intersection, Layout::Curve],
            spawn_radius: 14.0,
            frame_dt: 0.1,
            horizon: Horizon::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("n_vehicles", self.n_vehicles), ("n_pedestrians", self.n_pedestrians), ("n_cyclists", self.n_cyclists)] {
            if r[0] > r[1] {
                return Err(Error::Config(format!("{name}: min {} > max {}", r[0], r[1])));
            }
        }
        self.vehicle_speed.check("vehicle_speed")?;
        self.pedestrian_speed.check("pedestrian_speed")?;
        self.cyclist_speed.check("cyclist_speed")?;
        if self.vehicle_speed.0 < 0.0 || self.pedestrian_speed.0 < 0.0 || self.cyclist_speed.0 < 0.0 {
            return Err(Error::Config("speeds must be non-negative".into()));
        }
        for (name, p) in [("parked_prob", self.parked_prob), ("occluded_prob", self.occluded_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.layouts.is_empty() {
            return Err(Error::Config("layouts must not be empty".into()));
        }
        if !(self.spawn_radius > 0.0) || !(self.frame_dt > 0.0) {
            return Err(Error::Config("spawn_radius and frame_dt must be positive".into()));
        }
        let h = &self.horizon;
        if h.n_history == 0 || h.n_future_waypoints == 0 || h.waypoint_stride == 0 {
            return Err(Error::Config("horizon counts must be positive".into()));
        }
        Ok(())
    }
}

/// A drivable path agents can follow.
#[derive(Clone, Copy, Debug)]
enum Path {
    /// Through `origin` with unit direction angle `dir`.
    Line { origin: [f64; 2], dir: f64 },
    /// Circle around `center`; `ccw` gives the travel sense.
    Arc { center: [f64; 2], radius: f64, ccw: bool },
}

impl Path {
    /// Pose at arc-length `s` from the path's reference point.
    fn pose(&self, s: f64) -> ([f64; 2], f64) {
        match *self {
            Path::Line { origin, dir } => ([origin[0] + s * dir.cos(), origin[1] + s * dir.sin()], dir),
            Path::Arc { center, radius, ccw } => {
                let a = if ccw { -FRAC_PI_2 + s / radius } else { -FRAC_PI_2 - s / radius };
                let p = [center[0] + radius * a.cos(), center[1] + radius * a.sin()];
                (p, if ccw { a + FRAC_PI_2 } else { a - FRAC_PI_2 })
            }
        }
    }

    fn yaw_rate(&self, speed: f64) -> f64 {
        match *self {
            Path::Line { .. } => 0.0,
            Path::Arc { radius, ccw, .. } => {
                if ccw {
                    speed / radius
                } else {
                    -speed / radius
                }
            }
        }
    }
}

fn rot(p: [f64; 2], a: f64) -> [f64; 2] {
    let (s, c) = a.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

fn segment(a: [f64; 2], b: [f64; 2], n: usize) -> Vec<[f64; 2]> {
    (0..=n).map(|i| {
        let f = i as f64 / n as f64;
        [a[0] + (b[0] - a[0]) * f, a[1] + (b[1] - a[1]) * f]
    }).collect()
}

/// A straight road through the origin at angle `phi`, `lanes_per_dir` lanes each way.
fn straight_road(phi: f64, lanes_per_dir: usize, half_len: f64, map: &mut Vec<MapElement>, paths: &mut Vec<Path>) {
    let lane_w = 3.5;
    let tf = |p: [f64; 2]| rot(p, phi);
    let mut line = |off: f64, t: RoadType| {
        map.push(MapElement { polyline: segment(tf([-half_len, off]), tf([half_len, off]), 8), element_type: t });
    };
    for k in 0..lanes_per_dir {
        let off = lane_w * (k as f64 + 0.5);
        line(-off, RoadType::LaneSurfaceStreet);
        line(off, RoadType::LaneSurfaceStreet);
        paths.push(Path::Line { origin: tf([0.0, -off]), dir: phi });
        paths.push(Path::Line { origin: tf([0.0, off]), dir: phi + PI });
        if k + 1 < lanes_per_dir {
            line(-lane_w * (k as f64 + 1.0), RoadType::RoadLineBrokenSingleWhite);
            line(lane_w * (k as f64 + 1.0), RoadType::RoadLineBrokenSingleWhite);
        }
    }
    line(0.0, RoadType::RoadLineSolidDoubleYellow);
    let edge = lane_w * lanes_per_dir as f64;
    line(-edge, RoadType::RoadEdgeBoundary);
    line(edge, RoadType::RoadEdgeBoundary);
}

fn build_layout(layout: Layout, rng: &mut impl Rng) -> (Vec<MapElement>, Vec<Path>) {
    let mut map = Vec::new();
    let mut paths = Vec::new();
    let phi = rng.random_range(0.0..TAU);
    match layout {
        Layout::StraightRoad => {
            let lanes = rng.random_range(1..=2);
            straight_road(phi, lanes, 40.0, &mut map, &mut paths);
            let x = rng.random_range(-15.0..15.0);
            let w = 3.5 * lanes as f64;
            map.push(MapElement { polyline: vec![rot([x, -w], phi), rot([x, w], phi)], element_type: RoadType::Crosswalk });
            if rng.random_bool(0.5) {
                let x = rng.random_range(-15.0..15.0);
                map.push(MapElement { polyline: vec![rot([x, -w], phi), rot([x, w], phi)], element_type: RoadType::SpeedBump });
            }
        }
        Layout::Intersection => {
            straight_road(phi, 1, 40.0, &mut map, &mut paths);
            straight_road(phi + FRAC_PI_2, 1, 40.0, &mut map, &mut paths);
            let signals = [RoadType::SignalGo, RoadType::SignalStop, RoadType::SignalCaution, RoadType::SignalArrowGo];
            for q in 0..4 {
                let a = phi + q as f64 * FRAC_PI_2;
                map.push(MapElement { polyline: vec![rot([-5.0, -3.5], a), rot([-5.0, 0.0], a)], element_type: RoadType::Crosswalk });
                let sig = signals[rng.random_range(0..signals.len())];
                map.push(MapElement { polyline: vec![rot([-4.0, -2.5], a), rot([-4.0, -1.0], a)], element_type: sig });
                if rng.random_bool(0.3) {
                    map.push(MapElement { polyline: vec![rot([-6.0, -3.0], a), rot([-6.0, -2.0], a)], element_type: RoadType::StopSign });
                }
            }
        }
        Layout::Curve => {
            let radius = rng.random_range(20.0..40.0);
            let center = rot([0.0, radius], phi);
            let arc = |r: f64| -> Vec<[f64; 2]> {
                (0..=48)
                    .map(|i| {
                        let a = -FRAC_PI_2 + (i as f64 / 48.0 - 0.5) * 2.4;
                        let p = [r * a.cos(), radius + r * a.sin()];
                        rot(p, phi)
                    })
                    .collect()
            };
            for (r, t) in [
                (radius + 1.75, RoadType::LaneSurfaceStreet),
                (radius - 1.75, RoadType::LaneSurfaceStreet),
                (radius, RoadType::RoadLineSolidDoubleYellow),
                (radius + 3.5, RoadType::RoadEdgeBoundary),
                (radius - 3.5, RoadType::RoadEdgeMedian),
            ] {
                map.push(MapElement { polyline: arc(r), element_type: t });
            }
            paths.push(Path::Arc { center, radius: radius + 1.75, ccw: true });
            paths.push(Path::Arc { center, radius: radius - 1.75, ccw: false });
        }
    }
    (map, paths)
}

/// States under a constant speed and turn rate, anchored at the current frame.
fn kinematic_states(p0: [f64; 2], heading0: f64, speed: f64, yaw_rate: f64, z: f64, visible: bool, n_history: usize, h: &Horizon, dt: f64) -> Vec<AgentState> {
    let c = h.current_frame() as f64;
    (0..h.total_frames())
        .map(|k| {
            let tau = (k as f64 - c) * dt;
            let th = heading0 + yaw_rate * tau;
            let (x, y) = if yaw_rate.abs() < 1e-12 {
                (p0[0] + speed * heading0.cos() * tau, p0[1] + speed * heading0.sin() * tau)
            } else {
                let r = speed / yaw_rate;
                (p0[0] + r * (th.sin() - heading0.sin()), p0[1] - r * (th.cos() - heading0.cos()))
            };
            let (vx, vy) = (speed * th.cos(), speed * th.sin());
            AgentState {
                x,
                y,
                z,
                heading: th,
                vx,
                vy,
                speed: (vx * vx + vy * vy).sqrt(),
                valid: true,
                visible: visible || k >= n_history,
            }
        })
        .collect()
}

fn too_close(p: [f64; 2], placed: &[[f64; 2]], min_d: f64) -> bool {
    placed.iter().any(|q| (p[0] - q[0]).hypot(p[1] - q[1]) < min_d)
}

/// Generates a synthetic multi-agent scenario; deterministic in `seed`.
pub fn generate_scenario(seed: u64, cfg: &GeneratorConfig) -> Result<Scenario> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = cfg.layouts[rng.random_range(0..cfg.layouts.len())];
    let (map, paths) = build_layout(layout, &mut rng);
    let h = cfg.horizon;
    let count = |r: [usize; 2], rng: &mut ChaCha8Rng| rng.random_range(r[0]..=r[1]);
    let (nv, np, nc) = (count(cfg.n_vehicles, &mut rng), count(cfg.n_pedestrians, &mut rng), count(cfg.n_cyclists, &mut rng));
    let mut tracks = Vec::new();
    let mut placed: Vec<[f64; 2]> = Vec::new();
    let mut next_id = 0u64;
    let r = cfg.spawn_radius;
    for _ in 0..nv {
        let mut pose = None;
        for _ in 0..32 {
            let path = paths[rng.random_range(0..paths.len())];
            let s = rng.random_range(-r..r);
            let (p, th) = path.pose(s);
            if p[0].hypot(p[1]) <= r * 1.2 && !too_close(p, &placed, 6.5) {
                pose = Some((path, p, th));
                break;
            }
        }
        let Some((path, p, th)) = pose else { continue };
        placed.push(p);
        let dims = BoxDims { length: rng.random_range(4.0..5.2), width: rng.random_range(1.8..2.1), height: rng.random_range(1.4..1.8) };
        let speed = if rng.random_bool(cfg.parked_prob) { 0.0 } else { cfg.vehicle_speed.sample(&mut rng) };
        let visible = !rng.random_bool(cfg.occluded_prob);
        tracks.push(AgentTrack {
            id: next_id,
            agent_class: AgentClass::Vehicle,
            states: kinematic_states(p, th, speed, path.yaw_rate(speed), dims.height / 2.0, visible, h.n_history, &h, cfg.frame_dt),
            dims,
        });
        next_id += 1;
    }
    for _ in 0..nc {
        let path = paths[rng.random_range(0..paths.len())];
        let (p, th) = path.pose(rng.random_range(-r..r));
        let lateral = rot([0.0, -1.2], th);
        let p = [p[0] + lateral[0], p[1] + lateral[1]];
        if too_close(p, &placed, 3.5) {
            continue;
        }
        placed.push(p);
        let speed = cfg.cyclist_speed.sample(&mut rng);
        let dims = BoxDims { length: 1.8, width: 0.7, height: 1.7 };
        tracks.push(AgentTrack {
            id: next_id,
            agent_class: AgentClass::Cyclist,
            states: kinematic_states(p, th, speed, path.yaw_rate(speed), 0.85, true, h.n_history, &h, cfg.frame_dt),
            dims,
        });
        next_id += 1;
    }
    for _ in 0..np {
        let p = [rng.random_range(-r..r), rng.random_range(-r..r)];
        if too_close(p, &placed, 2.0) {
            continue;
        }
        placed.push(p);
        let th = rng.random_range(-PI..PI);
        let speed = cfg.pedestrian_speed.sample(&mut rng);
        let dims = BoxDims { length: 0.6, width: 0.6, height: 1.7 };
        tracks.push(AgentTrack {
            id: next_id,
            agent_class: AgentClass::Pedestrian,
            states: kinematic_states(p, th, speed, 0.0, 0.85, true, h.n_history, &h, cfg.frame_dt),
            dims,
        });
        next_id += 1;
    }
    let s = Scenario { id: format!("synthetic-{seed:08}"), frame_dt: cfg.frame_dt, horizon: h, tracks, map };
    s.validate()?;
    Ok(s)
}
