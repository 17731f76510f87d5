//! Intersection model: lane geometry, physical limits, vehicle state, and the
//! lane compatibility relation.
//!
//! Each lane is a planar polyline crossing a convex conflict polygon. The
//! longitudinal coordinate used everywhere else is measured along the lane
//! path with `x = 0` at the point where the path enters the polygon, so a
//! vehicle occupies the conflict zone while `0 < x < span`. Two lanes are
//! *compatible* (value `1`) when their in-polygon path segments are disjoint,
//! *conflicting* (`0`) when the segments intersect, and `-1` when they are the
//! same lane or share an identical path (a lane is never scheduled against
//! itself).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lane identifier (stable across a run, taken from the geometry config).
pub type LaneId = u32;

/// Vehicle identifier (assigned in admission order).
pub type VehicleId = u64;

/// Actuation and speed limits shared by every vehicle, plus the approach
/// geometry scalars.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicalParams {
    /// Maximum braking (negative), m/s^2.
    pub u_min: f64,
    /// Maximum acceleration, m/s^2.
    pub u_max: f64,
    /// Minimum velocity, m/s (zero: no reversing).
    pub v_min: f64,
    /// Maximum velocity, m/s.
    pub v_max: f64,
    /// Vehicle length, m.
    pub length: f64,
    /// Robustness margin added to the following distance, m.
    pub margin: f64,
    /// Approach length: vehicles are admitted at `x = -approach`, m.
    pub approach: f64,
}

impl Default for PhysicalParams {
    fn default() -> Self {
        Self {
            u_min: -3.0,
            u_max: 3.0,
            v_min: 0.0,
            v_max: 11.11,
            length: 4.3,
            margin: 0.2,
            approach: 60.0,
        }
    }
}

impl PhysicalParams {
    /// Magnitude of the braking bound.
    pub fn braking(&self) -> f64 {
        -self.u_min
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.u_min < 0.0 && self.u_max > 0.0) {
            return Err(ModelError::Invalid("acceleration bounds must straddle zero"));
        }
        if !(self.v_min == 0.0 && self.v_max > 0.0) {
            return Err(ModelError::Invalid("velocity bounds must be [0, v_max > 0]"));
        }
        if !(self.length > 0.0 && self.margin >= 0.0 && self.approach > 0.0) {
            return Err(ModelError::Invalid("length/margin/approach must be positive"));
        }
        Ok(())
    }
}

/// One lane: id, planar path, and the length of the path inside the conflict
/// polygon (`span`, the exit coordinate `s_l`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneGeometry {
    pub id: LaneId,
    /// Polyline in metres, direction of travel.
    pub path: Vec<[f64; 2]>,
    /// Exit coordinate: conflict-zone length along this lane, m.
    pub span: f64,
}

/// Kinematic state of one vehicle on its lane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: VehicleId,
    pub lane: LaneId,
    /// Longitudinal position, m (negative upstream of the conflict zone).
    pub x: f64,
    /// Longitudinal velocity, m/s.
    pub v: f64,
    /// Last applied acceleration (jerk reference for the next plan), m/s^2.
    pub u_prev: f64,
    /// Admission time, s.
    pub t_arrival: f64,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model: {0}")]
    Invalid(&'static str),
    #[error("unknown lane id {0}")]
    UnknownLane(LaneId),
}

/// Immutable intersection description with the derived compatibility table.
#[derive(Clone, Debug)]
pub struct IntersectionModel {
    pub params: PhysicalParams,
    pub polygon: Vec<[f64; 2]>,
    lanes: Vec<LaneGeometry>,
    /// Row-major `lanes x lanes` table of {-1, 0, 1}.
    compat: Vec<i8>,
}

impl IntersectionModel {
    /// Build the model and derive compatibility from the geometry.
    pub fn new(
        params: PhysicalParams,
        polygon: Vec<[f64; 2]>,
        mut lanes: Vec<LaneGeometry>,
    ) -> Result<Self, ModelError> {
        params.validate()?;
        if polygon.len() < 3 {
            return Err(ModelError::Invalid("conflict polygon needs >= 3 vertices"));
        }
        if !is_convex(&polygon) {
            return Err(ModelError::Invalid("conflict polygon must be convex"));
        }
        if lanes.is_empty() {
            return Err(ModelError::Invalid("at least one lane required"));
        }
        lanes.sort_by_key(|l| l.id);
        for w in lanes.windows(2) {
            if w[0].id == w[1].id {
                return Err(ModelError::Invalid("duplicate lane id"));
            }
        }
        for lane in &lanes {
            if lane.path.len() < 2 {
                return Err(ModelError::Invalid("lane path needs >= 2 points"));
            }
            if lane.span <= 0.0 {
                return Err(ModelError::Invalid("lane span must be positive"));
            }
        }
        let n = lanes.len();
        let mut compat = vec![0i8; n * n];
        let clipped: Vec<Vec<[[f64; 2]; 2]>> =
            lanes.iter().map(|l| clip_polyline(&l.path, &polygon)).collect();
        for i in 0..n {
            for j in 0..n {
                compat[i * n + j] = if i == j || lanes[i].path == lanes[j].path {
                    -1
                } else if segments_disjoint(&clipped[i], &clipped[j]) {
                    1
                } else {
                    0
                };
            }
        }
        Ok(Self { params, polygon, lanes, compat })
    }

    /// Model over the default geometry: four straight lanes through a 20 m
    /// square conflict zone (ids 2, 5, 8, 11; opposite pairs are parallel and
    /// compatible, perpendicular pairs conflict).
    pub fn default_cross(params: PhysicalParams) -> Self {
        let polygon = vec![[-10.0, -10.0], [10.0, -10.0], [10.0, 10.0], [-10.0, 10.0]];
        let lanes = vec![
            LaneGeometry { id: 2, path: vec![[5.0, -70.0], [5.0, 70.0]], span: 20.0 },
            LaneGeometry { id: 5, path: vec![[70.0, 5.0], [-70.0, 5.0]], span: 20.0 },
            LaneGeometry { id: 8, path: vec![[-5.0, 70.0], [-5.0, -70.0]], span: 20.0 },
            LaneGeometry { id: 11, path: vec![[-70.0, -5.0], [70.0, -5.0]], span: 20.0 },
        ];
        Self::new(params, polygon, lanes).expect("default geometry is valid")
    }

    pub fn lanes(&self) -> &[LaneGeometry] {
        &self.lanes
    }

    pub fn lane(&self, id: LaneId) -> Result<&LaneGeometry, ModelError> {
        self.lanes
            .iter()
            .find(|l| l.id == id)
            .ok_or(ModelError::UnknownLane(id))
    }

    fn index_of(&self, id: LaneId) -> Result<usize, ModelError> {
        self.lanes
            .binary_search_by_key(&id, |l| l.id)
            .map_err(|_| ModelError::UnknownLane(id))
    }

    /// Compatibility of two lanes: `1` disjoint conflict-zone paths, `0`
    /// intersecting paths, `-1` same lane or identical path.
    pub fn compatibility(&self, a: LaneId, b: LaneId) -> Result<i8, ModelError> {
        let (i, j) = (self.index_of(a)?, self.index_of(b)?);
        Ok(self.compat[i * self.lanes.len() + j])
    }

    /// Whether two *distinct* lanes may occupy the conflict zone together.
    pub fn conflict_free(&self, a: LaneId, b: LaneId) -> Result<bool, ModelError> {
        Ok(self.compatibility(a, b)? == 1)
    }
}

/// Immediate predecessor of vehicle `i` among `states`: the same-lane vehicle
/// closest ahead of it. Distinct positions are assumed (enforced upstream);
/// exact ties break toward the lower id being ahead.
pub fn immediate_predecessor(states: &[VehicleState], i: &VehicleState) -> Option<VehicleId> {
    states
        .iter()
        .filter(|s| s.lane == i.lane && s.id != i.id)
        .filter(|s| s.x > i.x || (s.x == i.x && s.id < i.id))
        .min_by(|a, b| {
            a.x.partial_cmp(&b.x)
                .expect("finite positions")
                .then(a.id.cmp(&b.id))
        })
        .map(|s| s.id)
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn is_convex(poly: &[[f64; 2]]) -> bool {
    let n = poly.len();
    let mut sign = 0.0f64;
    for i in 0..n {
        let c = cross(poly[i], poly[(i + 1) % n], poly[(i + 2) % n]);
        if c.abs() > 1e-12 {
            if sign != 0.0 && c.signum() != sign {
                return false;
            }
            sign = c.signum();
        }
    }
    true
}

/// Clip a polyline to the inside of a convex polygon; returns the surviving
/// sub-segments.
fn clip_polyline(path: &[[f64; 2]], poly: &[[f64; 2]]) -> Vec<[[f64; 2]; 2]> {
    // Orient the polygon counter-clockwise so "inside" is the left side.
    let area: f64 = (0..poly.len())
        .map(|i| {
            let a = poly[i];
            let b = poly[(i + 1) % poly.len()];
            a[0] * b[1] - b[0] * a[1]
        })
        .sum();
    let ccw: Vec<[f64; 2]> = if area >= 0.0 {
        poly.to_vec()
    } else {
        poly.iter().rev().cloned().collect()
    };
    let mut out = Vec::new();
    for w in path.windows(2) {
        let (p, q) = (w[0], w[1]);
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let mut alive = true;
        for i in 0..ccw.len() {
            let a = ccw[i];
            let b = ccw[(i + 1) % ccw.len()];
            // Inside condition along the segment: num + t * den >= 0.
            let num = cross(a, b, p);
            let den = cross(a, b, q) - num;
            if den.abs() < 1e-12 {
                if num < -1e-12 {
                    alive = false;
                    break;
                }
            } else if den > 0.0 {
                lo = lo.max(-num / den);
            } else {
                hi = hi.min(-num / den);
            }
        }
        if alive && lo < hi {
            let at = |t: f64| [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])];
            out.push([at(lo), at(hi)]);
        }
    }
    out
}

fn on_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> bool {
    p[0] >= a[0].min(b[0]) - 1e-9
        && p[0] <= a[0].max(b[0]) + 1e-9
        && p[1] >= a[1].min(b[1]) - 1e-9
        && p[1] <= a[1].max(b[1]) + 1e-9
}

fn segments_intersect(s1: &[[f64; 2]; 2], s2: &[[f64; 2]; 2]) -> bool {
    let (a, b) = (s1[0], s1[1]);
    let (c, d) = (s2[0], s2[1]);
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    if ((d1 > 1e-12 && d2 < -1e-12) || (d1 < -1e-12 && d2 > 1e-12))
        && ((d3 > 1e-12 && d4 < -1e-12) || (d3 < -1e-12 && d4 > 1e-12))
    {
        return true;
    }
    (d1.abs() <= 1e-12 && on_segment(a, c, d))
        || (d2.abs() <= 1e-12 && on_segment(b, c, d))
        || (d3.abs() <= 1e-12 && on_segment(c, a, b))
        || (d4.abs() <= 1e-12 && on_segment(d, a, b))
}

fn segments_disjoint(a: &[[[f64; 2]; 2]], b: &[[[f64; 2]; 2]]) -> bool {
    for s1 in a {
        for s2 in b {
            if segments_intersect(s1, s2) {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> IntersectionModel {
        IntersectionModel::default_cross(PhysicalParams::default())
    }

    #[test]
    fn opposite_straight_lanes_are_compatible() {
        let m = model();
        assert_eq!(m.compatibility(2, 8).unwrap(), 1);
        assert_eq!(m.compatibility(5, 11).unwrap(), 1);
    }

    #[test]
    fn perpendicular_lanes_conflict() {
        let m = model();
        assert_eq!(m.compatibility(2, 5).unwrap(), 0);
        assert_eq!(m.compatibility(2, 11).unwrap(), 0);
        assert_eq!(m.compatibility(8, 5).unwrap(), 0);
        assert_eq!(m.compatibility(8, 11).unwrap(), 0);
    }

    #[test]
    fn same_lane_and_identical_paths_are_never_scheduled_together() {
        let m = model();
        assert_eq!(m.compatibility(2, 2).unwrap(), -1);
        let params = PhysicalParams::default();
        let polygon = vec![[-10.0, -10.0], [10.0, -10.0], [10.0, 10.0], [-10.0, 10.0]];
        let lanes = vec![
            LaneGeometry { id: 1, path: vec![[5.0, -70.0], [5.0, 70.0]], span: 20.0 },
            LaneGeometry { id: 2, path: vec![[5.0, -70.0], [5.0, 70.0]], span: 20.0 },
        ];
        let m2 = IntersectionModel::new(params, polygon, lanes).unwrap();
        assert_eq!(m2.compatibility(1, 2).unwrap(), -1);
    }

    #[test]
    fn compatibility_is_symmetric() {
        let m = model();
        for a in [2u32, 5, 8, 11] {
            for b in [2u32, 5, 8, 11] {
                assert_eq!(
                    m.compatibility(a, b).unwrap(),
                    m.compatibility(b, a).unwrap()
                );
            }
        }
    }

    #[test]
    fn clip_keeps_only_the_inside_part() {
        let poly = vec![[-10.0, -10.0], [10.0, -10.0], [10.0, 10.0], [-10.0, 10.0]];
        let segs = clip_polyline(&[[5.0, -70.0], [5.0, 70.0]], &poly);
        assert_eq!(segs.len(), 1);
        let s = segs[0];
        assert!((s[0][1] - -10.0).abs() < 1e-9 && (s[1][1] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn predecessor_is_nearest_ahead() {
        let mk = |id, x| VehicleState {
            id,
            lane: 2,
            x,
            v: 0.0,
            u_prev: 0.0,
            t_arrival: 0.0,
        };
        let states = vec![mk(1, -10.0), mk(2, -30.0), mk(3, -20.0), {
            let mut s = mk(4, -5.0);
            s.lane = 5;
            s
        }];
        assert_eq!(immediate_predecessor(&states, &states[1]), Some(3));
        assert_eq!(immediate_predecessor(&states, &states[2]), Some(1));
        assert_eq!(immediate_predecessor(&states, &states[0]), None);
        assert_eq!(immediate_predecessor(&states, &states[3]), None);
    }

    #[test]
    fn rejects_bad_geometry() {
        let params = PhysicalParams::default();
        let poly = vec![[-10.0, -10.0], [10.0, -10.0]];
        let lanes = vec![LaneGeometry { id: 1, path: vec![[0.0, -70.0], [0.0, 70.0]], span: 20.0 }];
        assert!(IntersectionModel::new(params, poly, lanes).is_err());
    }
}
