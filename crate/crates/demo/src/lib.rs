//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export takes and returns JSON strings so the page needs no glue
//! beyond the generated module. The `*_json` functions hold the logic and
//! are what the native tests call.

use drivecoach::datagen::track::{oracle_instructions, simulate_student, OracleConfig, RaceReference, StudentParams};
use drivecoach::dataset::TRACK_ACTIONS;
use drivecoach::geom::{builtin_track, Point2, TrackModel};
use drivecoach::metrics::{lap_metrics, LapMetrics};
use drivecoach::raceline::{compute_racing_line, speed_profile, RacelineSolverConfig, SpeedLimits};
use drivecoach::serve::{decide_cue, CuePolicy};
use drivecoach::{Error, Result};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

/// Instructor window: 4 s of future at 10 Hz, one window per second.
const FUTURE: usize = 40;
const STRIDE: usize = 10;

#[derive(Debug, Serialize, Deserialize)]
pub struct SolvedTrack {
    pub track: TrackModel,
    pub left: Vec<Point2>,
    pub right: Vec<Point2>,
    pub iterations: usize,
    pub objective: Vec<f64>,
}

/// Racing line and speed profile of a built-in track.
pub fn solve_track_json(name: &str, margin: f64) -> Result<String> {
    let mut track = builtin_track(name)?.resampled(2.0)?;
    let cfg = RacelineSolverConfig { margin, ..Default::default() };
    let sol = compute_racing_line(&track, &cfg)?;
    track.race_speeds = Some(speed_profile(&sol.points, track.closed, &SpeedLimits::default())?);
    track.raceline = Some(sol.points);
    let out = SolvedTrack {
        left: track.left_edge(),
        right: track.right_edge(),
        track,
        iterations: sol.iterations,
        objective: sol.objective_trace,
    };
    Ok(serde_json::to_string(&out)?)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InstructorCue {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub actions: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Drive {
    /// `[x, y, v]` per 10 Hz step.
    pub path: Vec<[f64; 3]>,
    pub cues: Vec<InstructorCue>,
    pub laps: LapMetrics,
}

/// Drives a scripted student around a solved track (the `track` field of
/// [`solve_track_json`]'s output) and lists the cues the rule-based
/// instructor gives along the way.
pub fn simulate_json(track_json: &str, student_json: &str, laps: f64, seed: u64) -> Result<String> {
    let track = TrackModel::from_json_str(track_json)?;
    let student: StudentParams =
        serde_json::from_str(student_json).map_err(|e| Error::config(format!("student parameters: {e}")))?;
    let states = simulate_student(&track, &student, laps, seed)?;
    let oc = OracleConfig::default();
    let rr = RaceReference::new(&track, &oc)?;
    let mut cues = Vec::new();
    let mut k = 0;
    while k + FUTURE <= states.len() {
        if let Some(flags) = oracle_instructions(&states[k..k + FUTURE], &rr, &oc) {
            let actions: Vec<String> = flags
                .iter()
                .zip(TRACK_ACTIONS)
                .filter(|(f, _)| **f == 1)
                .map(|(_, a)| a.to_string())
                .collect();
            if !actions.is_empty() {
                let s = &states[k];
                cues.push(InstructorCue { t: s.t, x: s.x, y: s.y, actions });
            }
        }
        k += STRIDE;
    }
    let out = Drive {
        path: states.iter().map(|s| [s.x, s.y, s.v]).collect(),
        laps: lap_metrics(&states, &track),
        cues,
    };
    Ok(serde_json::to_string(&out)?)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CueOutcome {
    pub cue: Option<String>,
    pub index: Option<usize>,
    pub prob: Option<f64>,
}

/// One application of the threshold-then-argmax cue rule. A negative
/// `last_cue_time` means no cue has been given yet.
pub fn cue_json(probs_json: &str, tau: f64, cooldown: f64, last_cue_time: f64, now: f64) -> Result<String> {
    let probs: Vec<f64> = serde_json::from_str(probs_json).map_err(|e| Error::config(format!("probabilities: {e}")))?;
    if probs.len() != TRACK_ACTIONS.len() {
        return Err(Error::config(format!("expected {} probabilities, got {}", TRACK_ACTIONS.len(), probs.len())));
    }
    let policy = CuePolicy { tau, cooldown, eval_rate: 2.0 };
    policy.validate()?;
    let last = (last_cue_time >= 0.0).then_some(last_cue_time);
    let out = match decide_cue(&probs, &policy, last, now) {
        Some((i, p)) => CueOutcome { cue: Some(TRACK_ACTIONS[i].to_string()), index: Some(i), prob: Some(p) },
        None => CueOutcome { cue: None, index: None, prob: None },
    };
    Ok(serde_json::to_string(&out)?)
}

fn js(r: Result<String>) -> std::result::Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = solveTrack)]
pub fn solve_track(name: &str, margin: f64) -> std::result::Result<String, JsError> {
    js(solve_track_json(name, margin))
}

#[wasm_bindgen]
pub fn simulate(track_json: &str, student_json: &str, laps: f64, seed: u32) -> std::result::Result<String, JsError> {
    js(simulate_json(track_json, student_json, laps, seed as u64))
}

#[wasm_bindgen(js_name = decideCue)]
pub fn decide(probs_json: &str, tau: f64, cooldown: f64, last_cue_time: f64, now: f64) -> std::result::Result<String, JsError> {
    js(cue_json(probs_json, tau, cooldown, last_cue_time, now))
}

#[wasm_bindgen(js_name = actionSet)]
pub fn action_set() -> String {
    serde_json::to_string(&TRACK_ACTIONS).unwrap_or_default()
}
