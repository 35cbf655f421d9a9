//! World-space data model: agent tracks, map polylines and the frame layout
//! of a scenario.

mod generator;
mod ground_truth;
mod io;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use generator::{generate_scenario, GeneratorConfig, Layout, Range};
pub use ground_truth::{derive_ground_truth, GroundTruth};
pub use io::{load_scenario, save_scenario, scenario_from_json, scenario_to_json, SCHEMA_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentClass {
    Vehicle,
    Pedestrian,
    Cyclist,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub heading: f64,
    pub vx: f64,
    pub vy: f64,
    pub speed: f64,
    pub valid: bool,
    pub visible: bool,
}

impl AgentState {
    pub fn invalid() -> Self {
        AgentState { x: 0.0, y: 0.0, z: 0.0, heading: 0.0, vx: 0.0, vy: 0.0, speed: 0.0, valid: false, visible: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxDims {
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub id: u64,
    pub agent_class: AgentClass,
    pub states: Vec<AgentState>,
    #[serde(rename = "box")]
    pub dims: BoxDims,
}

impl AgentTrack {
    /// True when the agent is never visible during the history window.
    pub fn hidden_in_history(&self, n_history: usize) -> bool {
        self.states[..n_history.min(self.states.len())].iter().all(|s| !s.visible)
    }
}

macro_rules! road_types {
    ($($name:ident => $group:ident),* $(,)?) => {
        /// Road feature taxonomy; one raster channel per variant.
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum RoadType { $($name),* }

        impl RoadType {
            pub const ALL: &'static [RoadType] = &[$(RoadType::$name),*];

            /// Coarse group used by the 3-channel spatio-temporal input.
            pub fn group(self) -> RoadGroup {
                match self { $(RoadType::$name => RoadGroup::$group),* }
            }
        }
    };
}

road_types! {
    LaneUndefined => Center,
    LaneFreeway => Center,
    LaneSurfaceStreet => Center,
    LaneBikeLane => Center,
    RoadLineUnknown => Other,
    RoadLineBrokenSingleWhite => Other,
    RoadLineSolidSingleWhite => Other,
    RoadLineSolidDoubleWhite => Other,
    RoadLineBrokenSingleYellow => Other,
    RoadLineBrokenDoubleYellow => Other,
    RoadLineSolidSingleYellow => Other,
    RoadLineSolidDoubleYellow => Other,
    RoadLinePassingDoubleYellow => Other,
    RoadEdgeUnknown => Edge,
    RoadEdgeBoundary => Edge,
    RoadEdgeMedian => Edge,
    StopSign => Other,
    Crosswalk => Other,
    SpeedBump => Other,
    Driveway => Other,
    SignalUnknown => Other,
    SignalArrowStop => Other,
    SignalArrowCaution => Other,
    SignalArrowGo => Other,
    SignalStop => Other,
    SignalCaution => Other,
    SignalGo => Other,
    SignalFlashingStop => Other,
    SignalFlashingCaution => Other,
}

/// Number of road feature channels.
pub const N_ROAD_TYPES: usize = 29;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoadGroup {
    Center,
    Edge,
    Other,
}

impl RoadType {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<RoadType> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapElement {
    pub polyline: Vec<[f64; 2]>,
    pub element_type: RoadType,
}

/// Frame layout of a scenario.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Horizon {
    pub n_history: usize,
    pub n_future_waypoints: usize,
    pub waypoint_stride: usize,
}

impl Default for Horizon {
    fn default() -> Self {
        Horizon { n_history: 11, n_future_waypoints: 8, waypoint_stride: 10 }
    }
}

impl Horizon {
    pub fn total_frames(&self) -> usize {
        self.n_history + self.n_future_waypoints * self.waypoint_stride
    }

    pub fn current_frame(&self) -> usize {
        self.n_history - 1
    }

    /// Frame index of waypoint `t` (waypoint 0 is the current frame).
    pub fn waypoint_frame(&self, t: usize) -> usize {
        self.current_frame() + t * self.waypoint_stride
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub id: String,
    pub frame_dt: f64,
    pub horizon: Horizon,
    pub tracks: Vec<AgentTrack>,
    pub map: Vec<MapElement>,
}

impl Scenario {
    pub fn n_frames(&self) -> usize {
        self.horizon.total_frames()
    }

    /// Checks every structural invariant of the data model.
    pub fn validate(&self) -> Result<()> {
        let h = &self.horizon;
        if h.n_history == 0 || h.n_future_waypoints == 0 || h.waypoint_stride == 0 {
            return Err(Error::Data("horizon counts must be positive".into()));
        }
        if !(self.frame_dt > 0.0) {
            return Err(Error::Data(format!("frame_dt must be positive, got {}", self.frame_dt)));
        }
        let n = h.total_frames();
        for t in &self.tracks {
            if t.states.len() != n {
                return Err(Error::Data(format!("track {} has {} states, expected {n}", t.id, t.states.len())));
            }
            let d = t.dims;
            if !(d.length > 0.0 && d.width > 0.0 && d.height > 0.0) {
                return Err(Error::Data(format!("track {} has non-positive box {:?}", t.id, d)));
            }
            for (k, s) in t.states.iter().enumerate() {
                if !s.valid {
                    continue;
                }
                let sp = (s.vx * s.vx + s.vy * s.vy).sqrt();
                if (sp - s.speed).abs() > 1e-6 {
                    return Err(Error::Data(format!("track {} frame {k}: speed {} != |v| {sp}", t.id, s.speed)));
                }
                let vals = [s.x, s.y, s.z, s.heading, s.vx, s.vy];
                if vals.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Data(format!("track {} frame {k}: non-finite state", t.id)));
                }
            }
        }
        for (i, m) in self.map.iter().enumerate() {
            if m.polyline.len() < 2 {
                return Err(Error::Data(format!("map element {i} has fewer than 2 points")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taxonomy_has_29_types() {
        assert_eq!(RoadType::ALL.len(), N_ROAD_TYPES);
        for (i, t) in RoadType::ALL.iter().enumerate() {
            assert_eq!(t.index(), i);
            assert_eq!(RoadType::from_index(i), Some(*t));
        }
        assert_eq!(RoadType::from_index(29), None);
    }

    #[test]
    fn horizon_frames() {
        let h = Horizon::default();
        assert_eq!(h.total_frames(), 91);
        assert_eq!(h.current_frame(), 10);
        assert_eq!(h.waypoint_frame(8), 90);
    }
}
