//! Synthetic track-driving instruction data: scripted students drive laps
//! around a track with a racing line, and a rule-based instructor labels each
//! 4 s window with the cues it would give.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::{label_statistics, DatasetMeta, SequenceSample, TaskKind, TeacherLabel};
use crate::error::{Error, Result};
use crate::geom::{
    extract_local_map, states_to_ego, states_to_world, ArcLine, Point2, Pose2, Scenario, State, TrackModel, WorldPolyline,
    DEFAULT_MAP_RADIUS, DT,
};
use crate::raceline::discrete_curvature;
use crate::rng::{derive, rng};
use crate::sim::{Bicycle, ACCEL_SCALE};

pub const TRACK_PAST: usize = 40;
pub const TRACK_FUTURE: usize = 40;
/// Steps between consecutive windows.
pub const WINDOW_STRIDE: usize = 10;

const OU_THETA: f64 = 0.2;
const SPEED_GAIN: f64 = 1.5;
const MAX_THROTTLE: f64 = 4.0;
const SPEED_PREVIEW: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentParams {
    /// Systematic lateral offset from the racing line, meters (left positive).
    pub line_bias: f64,
    /// Stationary std of the lateral wander, meters.
    pub line_noise: f64,
    /// Fraction of the racing speed the student aims for.
    pub speed_scale: f64,
    /// Seconds of braking anticipation the student lacks.
    pub brake_delay: f64,
    /// Per-step steering noise std, radians.
    pub steer_noise: f64,
}

impl StudentParams {
    pub fn perfect(speed_scale: f64) -> Self {
        StudentParams {
            line_bias: 0.0,
            line_noise: 0.0,
            speed_scale,
            brake_delay: 0.0,
            steer_noise: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.speed_scale > 0.0 && self.speed_scale <= 1.5) {
            return Err(Error::config(format!("speed_scale {} outside (0, 1.5]", self.speed_scale)));
        }
        if self.line_noise < 0.0 || self.steer_noise < 0.0 || self.brake_delay < 0.0 {
            return Err(Error::config("student noise levels and brake delay must be non-negative"));
        }
        Ok(())
    }
}

/// Seeded roster of `n` students spanning careful to sloppy drivers.
pub fn default_roster(n: usize, seed: u64) -> Vec<StudentParams> {
    let mut r = rng(derive(seed, 20, 0));
    (0..n)
        .map(|_| StudentParams {
            line_bias: r.random_range(-2.5..2.5),
            line_noise: r.random_range(0.0..0.8),
            speed_scale: r.random_range(0.7..1.2),
            brake_delay: r.random_range(0.0..1.5),
            steer_noise: r.random_range(0.0..0.01),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    /// Relative overspeed that triggers `brake` in a deceleration zone.
    pub brake_margin: f64,
    /// Relative underspeed that triggers `accelerate`.
    pub accel_margin: f64,
    /// Lateral band around the racing line, meters.
    pub lateral_band: f64,
    /// Curvature that marks a corner, 1/m.
    pub corner_curvature: f64,
    /// Windows farther than this from the centerline are discarded, meters.
    pub max_offset: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            brake_margin: 0.10,
            accel_margin: 0.15,
            lateral_band: 0.8,
            corner_curvature: 0.01,
            max_offset: 30.0,
        }
    }
}

/// Racing-line geometry and speed targets prepared once per track.
#[derive(Clone, Debug)]
pub struct RaceReference {
    pub center: ArcLine,
    pub line: ArcLine,
    pub speeds: Vec<f64>,
    /// Arc lengths along the racing line where a corner begins.
    pub corner_entries: Vec<f64>,
}

impl RaceReference {
    pub fn new(track: &TrackModel, oracle: &OracleConfig) -> Result<Self> {
        let (Some(rl), Some(speeds)) = (&track.raceline, &track.race_speeds) else {
            return Err(Error::data(format!("track {:?} has no racing line; run `raceline` first", track.name)));
        };
        let line = ArcLine::new(rl.clone(), track.closed)?;
        let kappa = discrete_curvature(rl, track.closed);
        let cum = line.cumulative();
        let mut corner_entries = Vec::new();
        let n = rl.len();
        let inside = |k: f64| k.abs() > oracle.corner_curvature;
        for i in 1..n {
            if inside(kappa[i]) && !inside(kappa[i - 1]) {
                corner_entries.push(cum[i]);
            }
        }
        if track.closed {
            corner_entries.retain(|s| *s < line.length());
        }
        Ok(RaceReference {
            center: track.center_arc(),
            line,
            speeds: speeds.clone(),
            corner_entries,
        })
    }

    pub fn target_speed(&self, s: f64) -> f64 {
        self.line.interp(&self.speeds, s)
    }

    /// Slope of the speed target at `s`, per meter.
    fn speed_slope(&self, s: f64) -> f64 {
        let h = 0.5;
        (self.target_speed(s + h) - self.target_speed(s - h)) / (2.0 * h)
    }
}

/// Drives `laps` laps (or to the end of an open track) and returns the world
/// trajectory sampled at 10 Hz.
pub fn simulate_student(track: &TrackModel, sp: &StudentParams, laps: f64, seed: u64) -> Result<Vec<State>> {
    sp.validate()?;
    let rr = RaceReference::new(track, &OracleConfig::default())?;
    simulate_on(&rr, track.closed, sp, laps, seed)
}

fn simulate_on(rr: &RaceReference, closed: bool, sp: &StudentParams, laps: f64, seed: u64) -> Result<Vec<State>> {
    let mut r = rng(seed);
    let line = &rr.line;
    let total = if closed { laps * line.length() } else { line.length() - 1.0 };
    let (p0, t0) = line.at(0.0);
    let mut car = Bicycle::new(p0[0], p0[1], t0[1].atan2(t0[0]), sp.speed_scale * rr.target_speed(0.0));
    let mut ou = 0.0f64;
    let ou_kick = sp.line_noise * (2.0 * OU_THETA * DT).sqrt();
    let mut progress = 0.0;
    let mut s_prev = 0.0;
    let mut states = Vec::new();
    let max_steps = (total / 2.0 / DT) as usize + 1000;
    for k in 0..max_steps {
        let pr = line.project(car.pos());
        let mut ds = pr.s - s_prev;
        if closed {
            let l = line.length();
            if ds < -l / 2.0 {
                ds += l;
            } else if ds > l / 2.0 {
                ds -= l;
            }
        }
        if k > 0 {
            progress += ds;
        }
        s_prev = pr.s;
        if progress >= total {
            break;
        }
        // lateral target on the racing line, shifted by bias and wander
        let lookahead = (0.6 * car.v).max(6.0);
        let (pt, tan) = line.at(pr.s + lookahead);
        let off = sp.line_bias + ou;
        let target = [pt[0] - tan[1] * off, pt[1] + tan[0] * off];
        let noise: f64 = StandardNormal.sample(&mut r);
        let steer = (car.pure_pursuit(target, lookahead) + sp.steer_noise * noise).clamp(-0.6, 0.6);
        // speed control with a preview shortened by the braking delay
        let preview = (SPEED_PREVIEW - sp.brake_delay).max(0.0) * car.v;
        let v_target = sp.speed_scale * rr.target_speed(pr.s + preview).min(rr.target_speed(pr.s));
        let a = (SPEED_GAIN * (v_target - car.v)).clamp(-ACCEL_SCALE, MAX_THROTTLE);
        states.push(car.state(k as f64 * DT, steer, a / ACCEL_SCALE));
        car.step(steer, a, DT);
        let w: f64 = StandardNormal.sample(&mut r);
        ou += -OU_THETA * ou * DT + ou_kick * w;
    }
    if states.len() < 2 {
        return Err(Error::data("simulation produced fewer than 2 states"));
    }
    Ok(states)
}

/// Cue indicators a rule-based instructor would give for a future window.
/// Returns `None` when the window strays too far from the track to be matched.
pub fn oracle_instructions(future: &[State], rr: &RaceReference, oc: &OracleConfig) -> Option<[u8; 5]> {
    let mut y = [0u8; 5];
    let mut s_path = Vec::with_capacity(future.len());
    for st in future {
        let pc = rr.center.project(st.pos());
        if pc.d.abs() > oc.max_offset {
            return None;
        }
        let pr = rr.line.project(st.pos());
        s_path.push(pr.s);
        let target = rr.target_speed(pr.s);
        let slope = rr.speed_slope(pr.s);
        if slope < 0.0 && st.v > (1.0 + oc.brake_margin) * target {
            y[0] = 1;
        }
        if slope >= 0.0 && st.v < (1.0 - oc.accel_margin) * target {
            y[1] = 1;
        }
        if pr.d < -oc.lateral_band {
            y[2] = 1;
        }
        if pr.d > oc.lateral_band {
            y[3] = 1;
        }
    }
    // corner entries passed during the window, unwrapping the arc length
    if let (Some(&first), true) = (s_path.first(), s_path.len() > 1) {
        let l = rr.line.length();
        let closed = rr.line.is_closed();
        let mut travelled = 0.0;
        let mut prev = first;
        for &s in &s_path[1..] {
            let mut ds = s - prev;
            if closed {
                if ds < -l / 2.0 {
                    ds += l;
                } else if ds > l / 2.0 {
                    ds -= l;
                }
            }
            travelled += ds.max(0.0);
            prev = s;
        }
        let hit = rr.corner_entries.iter().any(|&e| {
            let mut ahead = e - first;
            if closed {
                ahead = ahead.rem_euclid(l);
            }
            ahead > 0.0 && ahead <= travelled
        });
        if hit {
            y[4] = 1;
        }
    }
    Some(y)
}

/// Steering smoothness and mean distance to the racing line over a window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackSkillVector {
    pub steer_smoothness: f64,
    pub raceline_dist: f64,
}

pub fn compute_skill_metrics(window: &[State], raceline: &ArcLine) -> Result<TrackSkillVector> {
    if window.len() < 2 {
        return Err(Error::data("skill window needs at least 2 states"));
    }
    let steer_smoothness = window
        .windows(2)
        .map(|w| ((w[1].steer - w[0].steer) / DT).powi(2))
        .sum::<f64>()
        / (window.len() - 1) as f64;
    let raceline_dist =
        window.iter().map(|s| raceline.project(s.pos()).d.abs()).sum::<f64>() / window.len() as f64;
    Ok(TrackSkillVector {
        steer_smoothness,
        raceline_dist,
    })
}

/// Recomputes a track sample's skill target from its stored ego-frame past.
pub fn recompute_skill(sc: &Scenario, raceline: &ArcLine) -> Result<TrackSkillVector> {
    compute_skill_metrics(&states_to_world(&sc.past, &sc.local_map.origin), raceline)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackDatasetConfig {
    pub roster: Vec<StudentParams>,
    pub laps: f64,
    pub labeled_fraction: f64,
    pub seed: u64,
    #[serde(default)]
    pub oracle: OracleConfig,
}

impl TrackDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.roster.is_empty() {
            return Err(Error::config("student roster is empty"));
        }
        if !(0.0..=1.0).contains(&self.labeled_fraction) {
            return Err(Error::config(format!(
                "labeled_fraction {} outside [0, 1]",
                self.labeled_fraction
            )));
        }
        if !(self.laps > 0.0) {
            return Err(Error::config("laps must be positive"));
        }
        self.roster.iter().try_for_each(StudentParams::validate)
    }
}

/// Model scenario for a window of world-frame states: the past in the frame
/// of its last state plus the local map around it.
pub fn window_scenario(past: &[State], world_map: &[WorldPolyline]) -> Result<Scenario> {
    let origin = *past.last().ok_or_else(|| Error::contract("empty state window"))?;
    Ok(Scenario {
        past: states_to_ego(past, &origin),
        local_map: extract_local_map(world_map, &origin, DEFAULT_MAP_RADIUS)?,
        future: None,
        label: None,
        merge: None,
    })
}

/// Simulates every student, cuts windows every second and labels them.
pub fn gen_track_dataset(track: &TrackModel, cfg: &TrackDatasetConfig) -> Result<(Vec<SequenceSample>, DatasetMeta)> {
    cfg.validate()?;
    let rr = RaceReference::new(track, &cfg.oracle)?;
    let world_map = track.world_polylines(false);
    let mut samples = Vec::new();
    let mut discarded = 0usize;
    let mut labels: Vec<[u8; 5]> = Vec::new();
    for (si, sp) in cfg.roster.iter().enumerate() {
        let sim_seed = derive(cfg.seed, 30, si as u64);
        let states = simulate_on(&rr, track.closed, sp, cfg.laps, sim_seed)?;
        let mut end = TRACK_PAST - 1;
        while end + TRACK_FUTURE < states.len() {
            let past_w = &states[end + 1 - TRACK_PAST..=end];
            let fut_w = &states[end + 1..=end + TRACK_FUTURE];
            let origin = states[end];
            match oracle_instructions(fut_w, &rr, &cfg.oracle) {
                None => discarded += 1,
                Some(y) => {
                    let skill = compute_skill_metrics(past_w, &rr.line)?;
                    let pose = Pose2::of(&origin);
                    let mut sc = window_scenario(past_w, &world_map)?;
                    sc.future = Some(fut_w.iter().map(|s| pose.to_local(s.pos())).collect::<Vec<Point2>>());
                    let id = samples.len() as u64;
                    samples.push(SequenceSample {
                        id,
                        task: TaskKind::Track,
                        gamma: None,
                        seed: derive(sim_seed, 31, end as u64),
                        skill_gt: vec![skill.steer_smoothness, skill.raceline_dist],
                        skill_vector: None,
                        teacher: Some(TeacherLabel::Multi(y.to_vec())),
                        scenarios: vec![sc],
                    });
                    labels.push(y);
                }
            }
            end += WINDOW_STRIDE;
        }
    }
    if discarded > 0 {
        log::warn!("discarded {discarded} windows farther than {} m from the track", cfg.oracle.max_offset);
    }
    let active = labels.iter().filter(|y| y.iter().any(|v| *v == 1)).count();
    let active_fraction = if labels.is_empty() { 0.0 } else { active as f64 / labels.len() as f64 };
    let n_labeled = (cfg.labeled_fraction * samples.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut r = rng(derive(cfg.seed, 32, 0));
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut r);
    for &i in &order[n_labeled..] {
        samples[i].teacher = None;
    }
    let (class_counts, class_weights) = label_statistics(&samples, TaskKind::Track);
    let meta = DatasetMeta {
        task: TaskKind::Track,
        count: samples.len(),
        labeled: n_labeled,
        config: json!({ "track": track.name, "generator": cfg }),
        action_set: TaskKind::Track.action_names().iter().map(|s| s.to_string()).collect(),
        class_counts,
        class_weights,
        active_fraction: Some(active_fraction),
        discarded_windows: Some(discarded),
    };
    Ok((samples, meta))
}
