//! Kinematic and geometric primitives shared by every other module.
//!
//! Positions are meters in a right-handed world frame, yaw is measured
//! counter-clockwise from +x, and lateral offsets are positive to the left of
//! the direction of travel.

mod track;

pub use track::{builtin_track, TrackModel, BUILTIN_TRACKS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// State sampling period in seconds (10 Hz).
pub const DT: f64 = 0.1;

/// Default localization radius, also the map normalization constant.
pub const DEFAULT_MAP_RADIUS: f64 = 50.0;

pub type Point2 = [f64; 2];

#[inline]
pub fn sub(a: Point2, b: Point2) -> Point2 {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn add(a: Point2, b: Point2) -> Point2 {
    [a[0] + b[0], a[1] + b[1]]
}

#[inline]
pub fn scale(a: Point2, k: f64) -> Point2 {
    [a[0] * k, a[1] * k]
}

#[inline]
pub fn dot(a: Point2, b: Point2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn cross(a: Point2, b: Point2) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

#[inline]
pub fn norm(a: Point2) -> f64 {
    a[0].hypot(a[1])
}

#[inline]
pub fn dist(a: Point2, b: Point2) -> f64 {
    norm(sub(a, b))
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a % two_pi;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    } else if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// One ego-vehicle sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub v: f64,
    pub steer: f64,
    /// Combined throttle/brake command in `[-1, 1]`.
    pub accel: f64,
}

impl State {
    pub fn pos(&self) -> Point2 {
        [self.x, self.y]
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.t, self.x, self.y, self.yaw, self.v, self.steer, self.accel]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::data("state has non-finite fields"));
        }
        if self.v < 0.0 {
            return Err(Error::data(format!("negative speed {}", self.v)));
        }
        if self.accel.abs() > 1.0 + 1e-12 {
            return Err(Error::data(format!("accel command {} outside [-1, 1]", self.accel)));
        }
        if self.steer.abs() > std::f64::consts::FRAC_PI_2 {
            return Err(Error::data(format!("steer {} outside [-pi/2, pi/2]", self.steer)));
        }
        Ok(())
    }

    /// Flat `[t, x, y, yaw, v, steer, accel]` row used by the dataset files.
    pub fn to_row(&self) -> [f64; 7] {
        [self.t, self.x, self.y, self.yaw, self.v, self.steer, self.accel]
    }

    pub fn from_row(r: &[f64; 7]) -> Self {
        State {
            t: r[0],
            x: r[1],
            y: r[2],
            yaw: r[3],
            v: r[4],
            steer: r[5],
            accel: r[6],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    World,
    Ego,
}

/// Uniformly sampled sequence of states.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    states: Vec<State>,
    frame: Frame,
}

impl Trajectory {
    /// Builds a trajectory, checking length, monotone time and uniform `DT`
    /// spacing (within 1e-9 s).
    pub fn new(states: Vec<State>, frame: Frame) -> Result<Self> {
        if states.len() < 2 {
            return Err(Error::data(format!(
                "trajectory needs at least 2 states, got {}",
                states.len()
            )));
        }
        for w in states.windows(2) {
            let step = w[1].t - w[0].t;
            if (step - DT).abs() > 1e-9 {
                return Err(Error::data(format!(
                    "non-uniform time step {step} at t={}",
                    w[0].t
                )));
            }
        }
        Ok(Trajectory { states, frame })
    }

    /// Builds a trajectory without the timing checks. Used for live streams
    /// where timestamps may jitter.
    pub fn from_states(states: Vec<State>, frame: Frame) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::data("empty trajectory"));
        }
        Ok(Trajectory { states, frame })
    }

    pub fn states(&self) -> &[State] {
        &self.states
    }

    pub fn into_states(self) -> Vec<State> {
        self.states
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> &State {
        self.states.last().expect("trajectory is never empty")
    }
}

/// Rigid transform taking world coordinates into the frame of `origin`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose2 {
    pub fn of(s: &State) -> Self {
        Pose2 {
            x: s.x,
            y: s.y,
            yaw: s.yaw,
        }
    }

    pub fn to_local(&self, p: Point2) -> Point2 {
        let (sn, cs) = self.yaw.sin_cos();
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        [cs * dx + sn * dy, -sn * dx + cs * dy]
    }

    pub fn to_world(&self, p: Point2) -> Point2 {
        let (sn, cs) = self.yaw.sin_cos();
        [cs * p[0] - sn * p[1] + self.x, sn * p[0] + cs * p[1] + self.y]
    }
}

/// Expresses every state of `states` in the frame of `reference`.
pub fn states_to_ego(states: &[State], reference: &State) -> Vec<State> {
    let pose = Pose2::of(reference);
    states
        .iter()
        .map(|s| {
            let [x, y] = pose.to_local(s.pos());
            State {
                x,
                y,
                yaw: wrap_angle(s.yaw - reference.yaw),
                ..*s
            }
        })
        .collect()
}

/// Inverse of [`states_to_ego`].
pub fn states_to_world(states: &[State], origin: &Pose2) -> Vec<State> {
    states
        .iter()
        .map(|s| {
            let [x, y] = origin.to_world(s.pos());
            State {
                x,
                y,
                yaw: wrap_angle(s.yaw + origin.yaw),
                ..*s
            }
        })
        .collect()
}

/// Rotates and translates `traj` so that `reference` sits at the origin with
/// zero yaw. Speeds and controls are untouched.
pub fn to_ego_frame(traj: &Trajectory, reference: &State) -> Result<Trajectory> {
    if traj.is_empty() {
        return Err(Error::data("cannot transform an empty trajectory"));
    }
    Ok(Trajectory {
        states: states_to_ego(traj.states(), reference),
        frame: Frame::Ego,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    LeftEdge,
    Center,
    RightEdge,
    Raceline,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::LeftEdge, Role::Center, Role::RightEdge, Role::Raceline];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// A polyline in world coordinates, before localization.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldPolyline {
    pub role: Role,
    pub lane_id: i64,
    pub pts: Vec<Point2>,
}

/// A localized polyline; points are ego-frame meters divided by the map scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub role: Role,
    pub lane_id: i64,
    pub pts: Vec<Point2>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalMap {
    pub polylines: Vec<Polyline>,
    /// World pose the map was localized against.
    pub origin: Pose2,
    /// Normalization radius in meters.
    pub scale: f64,
}

impl LocalMap {
    pub fn empty(origin: Pose2, scale: f64) -> Self {
        LocalMap {
            polylines: Vec::new(),
            origin,
            scale,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.polylines.is_empty()
    }

    /// Maps normalized points back into world meters.
    pub fn denormalize(&self, p: Point2) -> Point2 {
        self.origin.to_world(scale(p, self.scale))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorLabel {
    Aggressive,
    Conservative,
    Neither,
}

/// Longitudinal record of a two-car merge, kept alongside generated urban
/// scenarios so they can be re-classified. Not serialized.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct MergeTrack {
    /// Ego progress along the road axis, meters, one entry per step.
    pub ego_s: Vec<f64>,
    /// Ego lateral position relative to the main-lane center, meters.
    pub ego_lat: Vec<f64>,
    pub ego_v: Vec<f64>,
    /// Realized ego acceleration, m/s^2.
    pub ego_a: Vec<f64>,
    pub other_s: Vec<f64>,
}

/// One model input unit: past window plus localized map.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    /// Ego-frame past states; the last one sits at the origin with zero yaw.
    pub past: Vec<State>,
    pub local_map: LocalMap,
    /// Ego-frame future positions.
    pub future: Option<Vec<Point2>>,
    pub label: Option<BehaviorLabel>,
    pub merge: Option<MergeTrack>,
}

impl Scenario {
    /// Checks the ego-frame anchoring and window lengths.
    pub fn validate(&self, n_past: usize, m_future: usize) -> Result<()> {
        if self.past.len() != n_past {
            return Err(Error::data(format!(
                "past window has {} states, expected {n_past}",
                self.past.len()
            )));
        }
        let last = self.past.last().ok_or_else(|| Error::data("empty past"))?;
        if last.x.abs() > 1e-6 || last.y.abs() > 1e-6 || last.yaw.abs() > 1e-6 {
            return Err(Error::data("past window does not end at the ego origin"));
        }
        if let Some(f) = &self.future {
            if f.len() != m_future {
                return Err(Error::data(format!(
                    "future has {} points, expected {m_future}",
                    f.len()
                )));
            }
        }
        Ok(())
    }
}

/// Arc-length parameterized piecewise-linear curve.
#[derive(Clone, Debug)]
pub struct ArcLine {
    pts: Vec<Point2>,
    cum: Vec<f64>,
    closed: bool,
}

/// Result of projecting a point onto an [`ArcLine`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    /// Arc length of the closest point.
    pub s: f64,
    /// Signed lateral offset, positive to the left of travel.
    pub d: f64,
    pub segment: usize,
}

impl ArcLine {
    /// `closed` lines must repeat their first point at the end.
    pub fn new(pts: Vec<Point2>, closed: bool) -> Result<Self> {
        if pts.len() < 2 {
            return Err(Error::data("line needs at least 2 points"));
        }
        let mut cum = Vec::with_capacity(pts.len());
        cum.push(0.0);
        for w in pts.windows(2) {
            let last = *cum.last().unwrap();
            cum.push(last + dist(w[0], w[1]));
        }
        Ok(ArcLine { pts, cum, closed })
    }

    pub fn points(&self) -> &[Point2] {
        &self.pts
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cum
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Wraps `s` into `[0, L)` on closed lines, clamps on open ones.
    pub fn normalize_s(&self, s: f64) -> f64 {
        let l = self.length();
        if self.closed {
            s.rem_euclid(l)
        } else {
            s.clamp(0.0, l)
        }
    }

    /// Point and unit tangent at arc length `s`.
    pub fn at(&self, s: f64) -> (Point2, Point2) {
        let s = self.normalize_s(s);
        let i = match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(self.pts.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.pts.len() - 2),
        };
        let a = self.pts[i];
        let b = self.pts[i + 1];
        let len = self.cum[i + 1] - self.cum[i];
        let dir = if len > 0.0 { scale(sub(b, a), 1.0 / len) } else { [1.0, 0.0] };
        let u = if len > 0.0 { (s - self.cum[i]) / len } else { 0.0 };
        (add(a, scale(sub(b, a), u)), dir)
    }

    /// Linear interpolation of per-vertex `values` at arc length `s`.
    pub fn interp(&self, values: &[f64], s: f64) -> f64 {
        debug_assert_eq!(values.len(), self.pts.len());
        let s = self.normalize_s(s);
        let i = match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(self.pts.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.pts.len() - 2),
        };
        let len = self.cum[i + 1] - self.cum[i];
        let u = if len > 0.0 { (s - self.cum[i]) / len } else { 0.0 };
        values[i] * (1.0 - u) + values[i + 1] * u
    }

    pub fn project(&self, p: Point2) -> Projection {
        let mut best = (f64::INFINITY, 0.0, 0.0, 0usize);
        for i in 0..self.pts.len() - 1 {
            let a = self.pts[i];
            let b = self.pts[i + 1];
            let ab = sub(b, a);
            let len2 = dot(ab, ab);
            if len2 == 0.0 {
                continue;
            }
            let u = (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0);
            let q = add(a, scale(ab, u));
            let dd = dist(p, q);
            if dd < best.0 {
                let side = cross(ab, sub(p, a));
                let sign = if side < 0.0 { -1.0 } else { 1.0 };
                best = (dd, self.cum[i] + u * len2.sqrt(), sign * dd, i);
            }
        }
        let s = if self.closed { self.normalize_s(best.1) } else { best.1 };
        Projection {
            s,
            d: best.2,
            segment: best.3,
        }
    }
}

/// Arc length and signed lateral offset of `p` relative to `line`.
pub fn arc_length_project(line: &[Point2], p: Point2) -> Result<(f64, f64)> {
    let closed = line.len() > 2 && dist(line[0], line[line.len() - 1]) < 1e-9;
    let arc = ArcLine::new(line.to_vec(), closed)?;
    let pr = arc.project(p);
    Ok((pr.s, pr.d))
}

pub fn polyline_length(line: &[Point2]) -> f64 {
    line.windows(2).map(|w| dist(w[0], w[1])).sum()
}

/// Resamples `line` to `n` points at uniform arc-length spacing, keeping both
/// endpoints.
pub fn resample_polyline(line: &[Point2], n: usize) -> Result<Vec<Point2>> {
    if n < 2 {
        return Err(Error::contract(format!("resample count must be >= 2, got {n}")));
    }
    if line.len() < 2 {
        return Err(Error::data("cannot resample a line with fewer than 2 points"));
    }
    let arc = ArcLine::new(line.to_vec(), false)?;
    let total = arc.length();
    if total <= 0.0 {
        return Err(Error::data("cannot resample a zero-length line"));
    }
    let mut out = Vec::with_capacity(n);
    let mut seg = 0usize;
    for k in 0..n {
        if k == n - 1 {
            out.push(line[line.len() - 1]);
            break;
        }
        let s = total * k as f64 / (n - 1) as f64;
        while seg + 1 < arc.cum.len() - 1 && arc.cum[seg + 1] < s {
            seg += 1;
        }
        let a = line[seg];
        let b = line[seg + 1];
        let len = arc.cum[seg + 1] - arc.cum[seg];
        let u = if len > 0.0 { ((s - arc.cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        out.push(add(a, scale(sub(b, a), u)));
    }
    Ok(out)
}

/// Parameters `u` in `[0,1]` where segment `a -> b` crosses the circle of
/// radius `r` around the origin.
fn circle_crossings(a: Point2, b: Point2, r: f64) -> Vec<f64> {
    let d = sub(b, a);
    let qa = dot(d, d);
    if qa == 0.0 {
        return Vec::new();
    }
    let qb = 2.0 * dot(a, d);
    let qc = dot(a, a) - r * r;
    let disc = qb * qb - 4.0 * qa * qc;
    if disc < 0.0 {
        return Vec::new();
    }
    let sq = disc.sqrt();
    let mut us: Vec<f64> = [(-qb - sq) / (2.0 * qa), (-qb + sq) / (2.0 * qa)]
        .into_iter()
        .filter(|u| *u > 0.0 && *u < 1.0)
        .collect();
    us.sort_by(|x, y| x.partial_cmp(y).unwrap());
    us.dedup();
    us
}

/// Clips a polyline (already in the local frame, meters) to the disc of
/// radius `r`; returns the pieces that lie inside.
fn clip_to_disc(pts: &[Point2], r: f64) -> Vec<Vec<Point2>> {
    let inside = |p: Point2| norm(p) <= r;
    let mut pieces = Vec::new();
    let mut cur: Vec<Point2> = Vec::new();
    let push = |cur: &mut Vec<Point2>, p: Point2| {
        if cur.last().is_none_or(|q| dist(*q, p) > 1e-9) {
            cur.push(p);
        }
    };
    for (i, &p) in pts.iter().enumerate() {
        if i == 0 {
            if inside(p) {
                push(&mut cur, p);
            }
            continue;
        }
        let a = pts[i - 1];
        // Walk the sub-intervals of the segment between crossings.
        let mut cuts = vec![0.0];
        cuts.extend(circle_crossings(a, p, r));
        cuts.push(1.0);
        for w in cuts.windows(2) {
            let mid = add(a, scale(sub(p, a), 0.5 * (w[0] + w[1])));
            let start = add(a, scale(sub(p, a), w[0]));
            let end = add(a, scale(sub(p, a), w[1]));
            if inside(mid) {
                push(&mut cur, start);
                push(&mut cur, end);
            } else if !cur.is_empty() {
                pieces.push(std::mem::take(&mut cur));
            }
        }
    }
    if !cur.is_empty() {
        pieces.push(cur);
    }
    pieces.retain(|p| p.len() >= 2);
    pieces
}

/// Extracts the map geometry within `radius` of `pose`, expressed in the ego
/// frame and divided by `radius`.
pub fn extract_local_map(map: &[WorldPolyline], pose: &State, radius: f64) -> Result<LocalMap> {
    if radius <= 0.0 || !radius.is_finite() {
        return Err(Error::contract(format!("radius must be positive, got {radius}")));
    }
    let origin = Pose2::of(pose);
    let mut polylines = Vec::new();
    for wp in map {
        let local: Vec<Point2> = wp.pts.iter().map(|p| origin.to_local(*p)).collect();
        for piece in clip_to_disc(&local, radius) {
            let pts = piece
                .into_iter()
                .map(|p| {
                    let q = scale(p, 1.0 / radius);
                    let n = norm(q);
                    if n <= 1.0 {
                        return q;
                    }
                    // dividing by the norm can still overshoot by an ulp
                    let mut r = scale(q, 1.0 / n);
                    while norm(r) > 1.0 {
                        r = scale(r, 1.0 - f64::EPSILON);
                    }
                    r
                })
                .collect();
            polylines.push(Polyline {
                role: wp.role,
                lane_id: wp.lane_id,
                pts,
            });
        }
    }
    Ok(LocalMap {
        polylines,
        origin,
        scale: radius,
    })
}

/// Discrete Menger curvature through three points, signed positive for left
/// turns.
pub fn menger_curvature(a: Point2, b: Point2, c: Point2) -> f64 {
    let ab = dist(a, b);
    let bc = dist(b, c);
    let ca = dist(c, a);
    let denom = ab * bc * ca;
    if denom == 0.0 {
        return 0.0;
    }
    2.0 * cross(sub(b, a), sub(c, a)) / denom
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn st(t: f64, x: f64, y: f64, yaw: f64) -> State {
        State {
            t,
            x,
            y,
            yaw,
            v: 3.0,
            steer: 0.1,
            accel: 0.2,
        }
    }

    #[test]
    fn ego_frame_reference_maps_to_origin() {
        let states = vec![st(0.0, 1.0, 2.0, 0.3), st(0.1, 2.0, 2.5, 0.5), st(0.2, 3.0, 3.5, 0.7)];
        let tr = Trajectory::new(states, Frame::World).unwrap();
        let ego = to_ego_frame(&tr, tr.last()).unwrap();
        let l = ego.last();
        assert_abs_diff_eq!(l.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l.y, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l.yaw, 0.0, epsilon = 1e-12);
        assert_eq!(l.v, 3.0);
        assert_eq!(ego.frame(), Frame::Ego);
    }

    #[test]
    fn ego_frame_translation_and_rotation() {
        let r = st(0.0, 5.0, 0.0, 0.0);
        let out = states_to_ego(&[st(0.0, 6.0, 0.0, 0.0)], &r);
        assert_abs_diff_eq!(out[0].x, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[0].y, 0.0, epsilon = 1e-12);

        let r = st(0.0, 0.0, 0.0, std::f64::consts::FRAC_PI_2);
        let out = states_to_ego(&[st(0.0, 0.0, 1.0, 0.0)], &r);
        assert_abs_diff_eq!(out[0].x, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[0].y, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_trajectory_rejected() {
        assert!(Trajectory::from_states(vec![], Frame::World).is_err());
        assert!(Trajectory::new(vec![st(0.0, 0.0, 0.0, 0.0)], Frame::World).is_err());
        assert!(Trajectory::new(vec![st(0.0, 0.0, 0.0, 0.0), st(0.3, 0.0, 0.0, 0.0)], Frame::World).is_err());
    }

    #[test]
    fn projection_examples() {
        let line = [[0.0, 0.0], [10.0, 0.0]];
        let (s, d) = arc_length_project(&line, [3.0, 2.0]).unwrap();
        assert_abs_diff_eq!(s, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d, 2.0, epsilon = 1e-12);
        let (s, d) = arc_length_project(&line, [3.0, -2.0]).unwrap();
        assert_abs_diff_eq!(s, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d, -2.0, epsilon = 1e-12);
        let (_, d) = arc_length_project(&line, [7.5, 0.0]).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn resample_examples() {
        let out = resample_polyline(&[[0.0, 0.0], [10.0, 0.0]], 3).unwrap();
        assert_eq!(out, vec![[0.0, 0.0], [5.0, 0.0], [10.0, 0.0]]);

        let l = resample_polyline(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]], 3).unwrap();
        assert_abs_diff_eq!(l[1][0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l[1][1], 0.0, epsilon = 1e-12);

        let uniform: Vec<Point2> = (0..6).map(|i| [i as f64 * 2.0, 1.0]).collect();
        let again = resample_polyline(&uniform, 6).unwrap();
        for (a, b) in uniform.iter().zip(&again) {
            assert!(dist(*a, *b) < 1e-9);
        }

        assert!(resample_polyline(&[[1.0, 1.0], [1.0, 1.0]], 4).is_err());
        assert!(resample_polyline(&[[0.0, 0.0], [1.0, 0.0]], 1).is_err());
    }

    fn straight_map() -> Vec<WorldPolyline> {
        let xs: Vec<f64> = (0..=40).map(|i| i as f64 * 10.0).collect();
        let line = |y: f64| xs.iter().map(|x| [*x, y]).collect::<Vec<_>>();
        vec![
            WorldPolyline { role: Role::LeftEdge, lane_id: 0, pts: line(5.0) },
            WorldPolyline { role: Role::Center, lane_id: 0, pts: line(0.0) },
            WorldPolyline { role: Role::RightEdge, lane_id: 0, pts: line(-5.0) },
            WorldPolyline { role: Role::Raceline, lane_id: 0, pts: line(0.0) },
        ]
    }

    #[test]
    fn local_map_on_straight_track() {
        let pose = st(0.0, 200.0, 0.0, 0.0);
        let lm = extract_local_map(&straight_map(), &pose, 50.0).unwrap();
        assert_eq!(lm.polylines.len(), 4);
        for pl in &lm.polylines {
            let len = polyline_length(&pl.pts) * 50.0;
            let off = match pl.role {
                Role::LeftEdge | Role::RightEdge => 5.0,
                _ => 0.0,
            };
            let expected = 2.0 * (50.0f64.powi(2) - off * off).sqrt();
            assert_abs_diff_eq!(len, expected, epsilon = 1e-9);
            assert!(len > 99.0 && len <= 100.0);
            // centered on the pose
            let first = pl.pts[0][0];
            let last = pl.pts.last().unwrap()[0];
            assert_abs_diff_eq!(first, -last, epsilon = 1e-12);
            assert!(pl.pts.iter().all(|p| norm(*p) <= 1.0));
        }
    }

    #[test]
    fn local_map_far_away_is_empty() {
        let pose = st(0.0, 200.0, 500.0, 0.0);
        let lm = extract_local_map(&straight_map(), &pose, 50.0).unwrap();
        assert!(lm.is_empty());
        assert!(extract_local_map(&straight_map(), &pose, 0.0).is_err());
    }

    #[test]
    fn menger_on_circle() {
        let r = 20.0f64;
        let p = |a: f64| [r * a.cos(), r * a.sin()];
        assert_abs_diff_eq!(menger_curvature(p(0.0), p(0.1), p(0.2)), 1.0 / r, epsilon = 1e-12);
        assert_abs_diff_eq!(menger_curvature(p(0.2), p(0.1), p(0.0)), -1.0 / r, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn ego_frame_preserves_distances(
            pts in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0, -3.0f64..3.0), 2..20),
            rx in -50.0f64..50.0, ry in -50.0f64..50.0, ryaw in -3.2f64..3.2,
        ) {
            let states: Vec<State> = pts.iter().enumerate()
                .map(|(i, (x, y, yaw))| st(i as f64 * DT, *x, *y, *yaw)).collect();
            let out = states_to_ego(&states, &st(0.0, rx, ry, ryaw));
            for i in 0..states.len() {
                for j in 0..states.len() {
                    let a = dist(states[i].pos(), states[j].pos());
                    let b = dist(out[i].pos(), out[j].pos());
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn lateral_offset_grows_along_left_normal(
            px in 1.0f64..9.0, py in -3.0f64..3.0, angle in -3.0f64..3.0,
        ) {
            // a rotated two-segment line, probing away from the kink
            let rot = |p: Point2| [p[0] * angle.cos() - p[1] * angle.sin(), p[0] * angle.sin() + p[1] * angle.cos()];
            let line = vec![rot([0.0, 0.0]), rot([10.0, 0.0]), rot([20.0, 5.0])];
            prop_assume!(py.abs() > 1e-3);
            let p = rot([px, py]);
            let eps = 1e-4;
            let normal = rot([0.0, 1.0]);
            let (_, d0) = arc_length_project(&line, p).unwrap();
            let (_, d1) = arc_length_project(&line, add(p, scale(normal, eps))).unwrap();
            prop_assert!(((d1 - d0) - eps).abs() < 1e-9);
        }

        #[test]
        fn local_map_round_trip(
            px in 0.0f64..400.0, py in -20.0f64..20.0, yaw in -3.2f64..3.2, radius in 10.0f64..80.0,
        ) {
            let map = straight_map();
            let pose = st(0.0, px, py, yaw);
            let lm = extract_local_map(&map, &pose, radius).unwrap();
            for pl in &lm.polylines {
                prop_assert!(pl.pts.iter().all(|p| norm(*p) <= 1.0));
                let src = map.iter().find(|m| m.role == pl.role).unwrap();
                let y_src = src.pts[0][1];
                for p in &pl.pts {
                    let w = lm.denormalize(*p);
                    // recovered point lies on the source line and inside the disc
                    prop_assert!((w[1] - y_src).abs() < 1e-9);
                    prop_assert!(dist(w, pose.pos()) <= radius + 1e-9);
                }
                // original vertices inside the disc are recovered exactly
                for v in &src.pts {
                    if dist(*v, pose.pos()) < radius - 1e-6 && pl.role != Role::Raceline {
                        let hit = pl.pts.iter().any(|p| dist(lm.denormalize(*p), *v) < 1e-9);
                        let other_piece = lm.polylines.iter().filter(|q| q.role == pl.role)
                            .any(|q| q.pts.iter().any(|p| dist(lm.denormalize(*p), *v) < 1e-9));
                        prop_assert!(hit || other_piece);
                    }
                }
            }
        }

        #[test]
        fn resample_keeps_endpoints(
            pts in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 2..15),
            n in 2usize..40,
        ) {
            let line: Vec<Point2> = pts.iter().map(|(x, y)| [*x, *y]).collect();
            prop_assume!(polyline_length(&line) > 1e-3);
            let out = resample_polyline(&line, n).unwrap();
            prop_assert_eq!(out.len(), n);
            prop_assert_eq!(out[0], line[0]);
            prop_assert_eq!(out[n - 1], line[line.len() - 1]);
        }

        #[test]
        fn resample_preserves_length_when_no_corner_is_cut(
            steps in prop::collection::vec(0.1f64..5.0, 1..15),
            heading in -3.2f64..3.2,
            n in 2usize..40,
        ) {
            // collinear, monotone vertices: resampling cannot shortcut anything
            let dir = [heading.cos(), heading.sin()];
            let mut s = 0.0;
            let mut line = vec![[0.0, 0.0]];
            for st in &steps {
                s += st;
                line.push(scale(dir, s));
            }
            let out = resample_polyline(&line, n).unwrap();
            prop_assert!((polyline_length(&out) - polyline_length(&line)).abs() < 1e-9);
        }
    }
}
