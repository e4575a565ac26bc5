//! Semi-synthetic urban teaching data.
//!
//! Each scenario is a simulated two-car merge: the ego starts in a merge lane
//! next to a main lane, regulates its time gap behind the other car and then
//! changes lanes. The ego's gap-acceptance parameter is drawn from a
//! category-specific range and the outcome is verified with the maneuver
//! filters, resampling until the category matches.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::{label_statistics, DatasetMeta, SequenceSample, TaskKind, TeacherLabel, UrbanAction};
use crate::error::{Error, Result};
use crate::geom::{
    extract_local_map, states_to_ego, BehaviorLabel, MergeTrack, Point2, Pose2, Role, Scenario, State,
    WorldPolyline, DEFAULT_MAP_RADIUS, DT,
};
use crate::rng::{derive, rng};
use crate::sim::{Bicycle, ACCEL_SCALE};

/// Past window length in steps.
pub const URBAN_PAST: usize = 40;
/// Future window length in steps.
pub const URBAN_FUTURE: usize = 30;
/// Scenarios per sequence.
pub const DEFAULT_P: usize = 5;
/// Deadband on `alpha - beta` before the skill vector expresses a tendency.
pub const TENDENCY_DEADBAND: f64 = 0.1;

const LANE_WIDTH: f64 = 3.6;
const SENSING_RANGE: f64 = 60.0;
const MAX_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManeuverFilterParams {
    pub t_gap_aggressive: f64,
    pub t_gap_conservative: f64,
    pub decel_aggressive: f64,
}

impl Default for ManeuverFilterParams {
    fn default() -> Self {
        ManeuverFilterParams {
            t_gap_aggressive: 1.0,
            t_gap_conservative: 2.5,
            decel_aggressive: 3.5,
        }
    }
}

impl ManeuverFilterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_gap_aggressive < self.t_gap_conservative) {
            return Err(Error::config("t_gap_aggressive must be below t_gap_conservative"));
        }
        Ok(())
    }
}

/// Generator's `(alpha, beta)`: per-slot probabilities of a conservative and
/// an aggressive scenario.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillVector2 {
    pub alpha: f64,
    pub beta: f64,
}

impl SkillVector2 {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let ok = (0.0..=1.0).contains(&alpha) && (0.0..=1.0).contains(&beta) && alpha + beta <= 1.0;
        if !ok {
            return Err(Error::config(format!("invalid skill vector ({alpha}, {beta})")));
        }
        Ok(SkillVector2 { alpha, beta })
    }

    /// Overall tendency the skill vector expresses, if any.
    pub fn tendency(&self) -> Option<BehaviorLabel> {
        if self.alpha > self.beta + TENDENCY_DEADBAND {
            Some(BehaviorLabel::Conservative)
        } else if self.beta > self.alpha + TENDENCY_DEADBAND {
            Some(BehaviorLabel::Aggressive)
        } else {
            None
        }
    }
}

/// Minimum time gap (s) after the ego has entered the main lane while the
/// other car is within sensing range; `+inf` when that never happens.
pub fn min_time_gap(m: &MergeTrack) -> f64 {
    let mut best = f64::INFINITY;
    for k in 0..m.ego_s.len() {
        let merged = m.ego_lat[k].abs() < LANE_WIDTH / 2.0;
        let gap = (m.other_s[k] - m.ego_s[k]).abs();
        if merged && gap < SENSING_RANGE {
            best = best.min(gap / m.ego_v[k].max(1.0));
        }
    }
    best
}

pub fn peak_decel(m: &MergeTrack) -> f64 {
    m.ego_a.iter().fold(0.0f64, |acc, a| acc.max(-a))
}

/// Applies the hand-crafted maneuver filters.
pub fn classify_maneuver(sc: &Scenario, p: &ManeuverFilterParams) -> Result<BehaviorLabel> {
    let m = sc
        .merge
        .as_ref()
        .ok_or_else(|| Error::data("scenario carries no merge record"))?;
    let n = m.ego_s.len();
    if n == 0 || m.ego_lat.len() != n || m.ego_v.len() != n || m.ego_a.len() != n || m.other_s.len() != n {
        return Err(Error::data("merge record has inconsistent lengths"));
    }
    let gap = min_time_gap(m);
    if gap < p.t_gap_aggressive || peak_decel(m) > p.decel_aggressive {
        Ok(BehaviorLabel::Aggressive)
    } else if gap > p.t_gap_conservative {
        Ok(BehaviorLabel::Conservative)
    } else {
        Ok(BehaviorLabel::Neither)
    }
}

struct MergeDraw {
    v0: f64,
    v_other: f64,
    gap0: f64,
    target_gap: f64,
    lane_change_t: f64,
    brake_limit: f64,
    accel_limit: f64,
}

fn draw_params(category: BehaviorLabel, r: &mut crate::rng::Rng) -> MergeDraw {
    let v0 = r.random_range(9.0..15.0);
    let v_other = v0 + r.random_range(-1.5..1.5);
    let tau0 = r.random_range(1.4..2.2);
    let (target_gap, brake_limit, accel_limit) = match category {
        BehaviorLabel::Aggressive => (r.random_range(0.2..0.8), r.random_range(3.0..6.0), r.random_range(2.5..3.5)),
        BehaviorLabel::Conservative => (r.random_range(3.2..4.5), r.random_range(2.0..3.2), r.random_range(1.0..2.0)),
        BehaviorLabel::Neither => (r.random_range(1.4..2.1), r.random_range(2.0..3.2), r.random_range(1.0..2.5)),
    };
    MergeDraw {
        v0,
        v_other,
        gap0: tau0 * v0,
        target_gap,
        lane_change_t: r.random_range(-2.5..-0.5),
        brake_limit,
        accel_limit,
    }
}

/// Lateral reference: merge-lane center until the lane change starts, then a
/// cosine blend into the main lane over `blend` meters.
fn lateral_ref(x: f64, x_lc: f64, blend: f64) -> f64 {
    if x <= x_lc {
        -LANE_WIDTH
    } else if x >= x_lc + blend {
        0.0
    } else {
        let u = (x - x_lc) / blend;
        -LANE_WIDTH * 0.5 * (1.0 + (std::f64::consts::PI * u).cos())
    }
}

fn road_map(x_end: f64) -> Vec<WorldPolyline> {
    let line = |y: f64, x1: f64| -> Vec<Point2> {
        let n = ((x1 + 200.0) / 5.0).ceil() as usize;
        (0..=n).map(|i| [-200.0 + (x1 + 200.0) * i as f64 / n as f64, y]).collect()
    };
    let h = LANE_WIDTH / 2.0;
    vec![
        WorldPolyline { role: Role::LeftEdge, lane_id: 0, pts: line(h, 400.0) },
        WorldPolyline { role: Role::Center, lane_id: 0, pts: line(0.0, 400.0) },
        WorldPolyline { role: Role::RightEdge, lane_id: 0, pts: line(-h, 400.0) },
        WorldPolyline { role: Role::LeftEdge, lane_id: 1, pts: line(-h, x_end) },
        WorldPolyline { role: Role::Center, lane_id: 1, pts: line(-LANE_WIDTH, x_end) },
        WorldPolyline { role: Role::RightEdge, lane_id: 1, pts: line(-LANE_WIDTH - h, x_end) },
    ]
}

/// Simulates one merge; returns world states for the whole window plus the
/// longitudinal record.
fn simulate_merge(d: &MergeDraw) -> (Vec<State>, MergeTrack, f64) {
    let steps = URBAN_PAST + URBAN_FUTURE;
    let t0 = -((URBAN_PAST - 1) as f64) * DT;
    let mut car = Bicycle::new(-60.0, -LANE_WIDTH, 0.0, d.v0);
    let mut other_s = -60.0 + d.gap0;
    let x_lc = -60.0 + d.v0 * (d.lane_change_t - t0);
    let blend = 40.0;
    let mut states = Vec::with_capacity(steps);
    let mut m = MergeTrack::default();
    for k in 0..steps {
        let t = t0 + k as f64 * DT;
        // gap regulation behind the other car
        let gap = other_s - car.x;
        let desired = d.target_gap * car.v.max(1.0);
        let a = (0.6 * (gap - desired) + 1.2 * (d.v_other - car.v)).clamp(-d.brake_limit, d.accel_limit);
        let cmd = a / ACCEL_SCALE;
        let lookahead = (0.8 * car.v).max(6.0);
        let tx = car.x + lookahead;
        let steer = car.pure_pursuit([tx, lateral_ref(tx, x_lc, blend)], lookahead);
        states.push(car.state(t, steer, cmd));
        m.ego_s.push(car.x);
        m.ego_lat.push(car.y);
        m.ego_v.push(car.v);
        let v_before = car.v;
        car.step(steer, a, DT);
        m.ego_a.push((car.v - v_before) / DT);
        m.other_s.push(other_s);
        other_s += d.v_other * DT;
    }
    (states, m, x_lc + blend + 30.0)
}

/// Generates one scenario of the requested category. Deterministic in
/// `(category, seed)`.
pub fn gen_scenario(category: BehaviorLabel, seed: u64, filters: &ManeuverFilterParams) -> Result<Scenario> {
    let mut r = rng(seed);
    for _ in 0..MAX_ATTEMPTS {
        let draw = draw_params(category, &mut r);
        let (states, merge, x_end) = simulate_merge(&draw);
        let origin = states[URBAN_PAST - 1];
        let past = states_to_ego(&states[..URBAN_PAST], &origin);
        let pose = Pose2::of(&origin);
        let future: Vec<Point2> = states[URBAN_PAST..].iter().map(|s| pose.to_local(s.pos())).collect();
        let local_map = extract_local_map(&road_map(x_end), &origin, DEFAULT_MAP_RADIUS)?;
        let sc = Scenario {
            past,
            local_map,
            future: Some(future),
            label: Some(category),
            merge: Some(merge),
        };
        if classify_maneuver(&sc, filters)? == category {
            return Ok(sc);
        }
    }
    Err(Error::Generation(format!(
        "no {category:?} maneuver after {MAX_ATTEMPTS} attempts (seed {seed}); filter parameters are inconsistent"
    )))
}

fn category_seed(seed: u64, slot: usize) -> u64 {
    derive(seed, 0x5C3A_A210, slot as u64)
}

/// Draws the `P` scenario categories of a sequence from `(alpha, beta)` and
/// generates them. The teacher label is left empty.
pub fn sample_sequence(
    sv: SkillVector2,
    p: usize,
    seed: u64,
    filters: &ManeuverFilterParams,
) -> Result<SequenceSample> {
    let mut r = rng(derive(seed, 1, 0));
    let mut scenarios = Vec::with_capacity(p);
    let (mut n_c, mut n_a) = (0usize, 0usize);
    for slot in 0..p {
        let u: f64 = r.random();
        let cat = if u < sv.alpha {
            n_c += 1;
            BehaviorLabel::Conservative
        } else if u < sv.alpha + sv.beta {
            n_a += 1;
            BehaviorLabel::Aggressive
        } else {
            BehaviorLabel::Neither
        };
        scenarios.push(gen_scenario(cat, category_seed(seed, slot), filters)?);
    }
    Ok(SequenceSample {
        id: 0,
        task: TaskKind::Urban,
        gamma: None,
        seed,
        skill_gt: vec![n_c as f64, n_a as f64],
        skill_vector: Some([sv.alpha, sv.beta]),
        teacher: None,
        scenarios,
    })
}

/// Action implied by a scenario label alone.
pub fn label_action(label: BehaviorLabel) -> UrbanAction {
    match label {
        BehaviorLabel::Aggressive => UrbanAction::SlowDown,
        BehaviorLabel::Conservative => UrbanAction::SpeedUp,
        BehaviorLabel::Neither => UrbanAction::NoOp,
    }
}

/// Action of a teacher that only looks at the overall skill vector: it keeps
/// the label's cue unless the skill tendency contradicts it.
pub fn skill_action(label: BehaviorLabel, sv: &SkillVector2) -> UrbanAction {
    match (label, sv.tendency()) {
        (BehaviorLabel::Aggressive, Some(BehaviorLabel::Conservative))
        | (BehaviorLabel::Conservative, Some(BehaviorLabel::Aggressive)) => UrbanAction::NoOp,
        _ => label_action(label),
    }
}

/// Teacher action for the last scenario: the skill-aware rule with
/// probability `gamma`, otherwise the label rule.
pub fn assign_teacher_action(seq: &SequenceSample, gamma: f64, seed: u64) -> Result<UrbanAction> {
    let label = seq
        .scenarios
        .last()
        .and_then(|s| s.label)
        .ok_or_else(|| Error::data("last scenario has no behavior label"))?;
    let [alpha, beta] = seq
        .skill_vector
        .ok_or_else(|| Error::data("sequence has no skill vector"))?;
    let sv = SkillVector2 { alpha, beta };
    let mut r = rng(derive(seed, 2, 0));
    let u: f64 = r.random();
    Ok(if u < gamma {
        skill_action(label, &sv)
    } else {
        label_action(label)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UrbanDatasetConfig {
    pub num: usize,
    pub gamma: f64,
    pub labeled: usize,
    pub p: usize,
    pub seed: u64,
    #[serde(default)]
    pub filters: ManeuverFilterParams,
}

impl UrbanDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.labeled > self.num {
            return Err(Error::config(format!(
                "labeled count {} exceeds dataset size {}",
                self.labeled, self.num
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if self.p == 0 {
            return Err(Error::config("sequence length P must be positive"));
        }
        self.filters.validate()
    }
}

/// Generates `num` sequences, labels a seeded subset of `labeled` of them and
/// returns the samples with their metadata.
pub fn gen_dataset(cfg: &UrbanDatasetConfig) -> Result<(Vec<SequenceSample>, DatasetMeta)> {
    cfg.validate()?;
    let mut samples = Vec::with_capacity(cfg.num);
    for i in 0..cfg.num {
        let seq_seed = derive(cfg.seed, 10, i as u64);
        let mut r = rng(seq_seed);
        let sv = SkillVector2 {
            alpha: r.random_range(0.0..0.5),
            beta: r.random_range(0.0..0.5),
        };
        let mut s = sample_sequence(sv, cfg.p, seq_seed, &cfg.filters)?;
        s.id = i as u64;
        s.gamma = Some(cfg.gamma);
        s.teacher = Some(TeacherLabel::Action(assign_teacher_action(&s, cfg.gamma, seq_seed)?));
        samples.push(s);
    }
    // seeded choice of the labeled subset
    let mut order: Vec<usize> = (0..cfg.num).collect();
    let mut r = rng(derive(cfg.seed, 11, 0));
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut r);
    for &i in &order[cfg.labeled..] {
        samples[i].teacher = None;
    }
    let (class_counts, class_weights) = label_statistics(&samples, TaskKind::Urban);
    let meta = DatasetMeta {
        task: TaskKind::Urban,
        count: cfg.num,
        labeled: cfg.labeled,
        config: json!(cfg),
        action_set: TaskKind::Urban.action_names().iter().map(|s| s.to_string()).collect(),
        class_counts,
        class_weights,
        active_fraction: None,
        discarded_windows: None,
    };
    Ok((samples, meta))
}
