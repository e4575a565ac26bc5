//! Online cue policy and per-driver sessions.
//!
//! A [`Teacher`] holds the immutable model and track and is shared by every
//! session. A [`Session`] keeps the rolling window of recent states, runs
//! the model at a fixed cadence of stream time and applies the
//! threshold-then-argmax rule with a cooldown.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::TaskKind;
use crate::datagen::track::window_scenario;
use crate::error::{Error, Result};
use crate::geom::{State, TrackModel, WorldPolyline};
use crate::metrics::{LapEvent, LapMetrics, LapTracker};
use crate::model::{Model, SampleInput};

/// Protocol version spoken by [`Session`] clients.
pub const PROTO_VERSION: u32 = 1;

/// Slack for comparing stream timestamps, which arrive as decimal seconds.
const CLOCK_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CuePolicy {
    pub tau: f64,
    /// Seconds of stream time between cues.
    pub cooldown: f64,
    /// Model evaluations per second of stream time.
    pub eval_rate: f64,
}

impl Default for CuePolicy {
    fn default() -> Self {
        CuePolicy { tau: 0.5, cooldown: 4.0, eval_rate: 2.0 }
    }
}

impl CuePolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::config(format!("threshold {} outside (0, 1)", self.tau)));
        }
        if !(self.cooldown >= 0.0 && self.cooldown.is_finite()) {
            return Err(Error::config(format!("cooldown {} must be non-negative", self.cooldown)));
        }
        let state_rate = 1.0 / crate::geom::DT;
        if !(self.eval_rate > 0.0 && self.eval_rate <= state_rate) {
            return Err(Error::config(format!(
                "eval_rate {} must be in (0, {state_rate}]",
                self.eval_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CueDecision {
    pub action: String,
    pub action_index: usize,
    pub prob: f64,
    pub t_emit: f64,
    pub window_id: u64,
}

/// Picks the most probable category at or above `tau`, lowest index on
/// ties, unless the previous cue is within the cooldown.
pub fn decide_cue(probs: &[f64], policy: &CuePolicy, last_cue_time: Option<f64>, now: f64) -> Option<(usize, f64)> {
    if let Some(last) = last_cue_time {
        if now - last < policy.cooldown - CLOCK_EPS {
            return None;
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, &p) in probs.iter().enumerate() {
        if p >= policy.tau && best.is_none_or(|(_, bp)| p > bp) {
            best = Some((i, p));
        }
    }
    best
}

/// Model, checkpoint identity and track shared by all sessions.
#[derive(Debug)]
pub struct Teacher {
    pub ckpt: Checkpoint,
    pub model: Model,
    pub track: TrackModel,
    world_map: Vec<WorldPolyline>,
    hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub model_hash: String,
    pub action_set: Vec<String>,
    pub n_params: usize,
}

impl Teacher {
    pub fn new(ckpt: Checkpoint, track: TrackModel) -> Result<Self> {
        if ckpt.meta.task != TaskKind::Track {
            return Err(Error::data(format!(
                "serving needs a track checkpoint, got one trained on {:?} data",
                ckpt.meta.task
            )));
        }
        if ckpt.model.p_max < 1 {
            return Err(Error::data("checkpoint accepts no scenarios"));
        }
        track.validate()?;
        if track.raceline.is_none() {
            return Err(Error::data(format!("track {:?} has no racing line; run the raceline command first", track.name)));
        }
        let model = Model::new(ckpt.model.clone())?;
        let hash = ckpt.hash();
        Ok(Teacher { world_map: track.world_polylines(false), model, track, hash, ckpt })
    }

    pub fn health(&self) -> Health {
        Health {
            model_hash: self.hash.clone(),
            action_set: self.ckpt.meta.action_set.clone(),
            n_params: self.ckpt.params.n_params(),
        }
    }

    pub fn model_hash(&self) -> &str {
        &self.hash
    }

    /// Cue probabilities for a window of world-frame states.
    pub fn probs(&self, window: &[State]) -> Result<Vec<f64>> {
        let sc = window_scenario(window, &self.world_map)?;
        let inp = SampleInput { scenarios: vec![self.model.prepare_scenario::<f32>(&sc)?] };
        Ok(self.model.forward_sample(&self.ckpt.params, &inp)?.0.teacher_probs())
    }
}

/// What one incoming state produced.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepOutput {
    pub cue: Option<CueDecision>,
    pub lap: Option<LapEvent>,
    /// Probabilities when the model ran on this state.
    pub probs: Option<Vec<f64>>,
    pub dropped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub states: usize,
    pub dropped: usize,
    pub evaluations: usize,
    pub cues: usize,
    pub laps: LapMetrics,
}

pub struct Session {
    teacher: Arc<Teacher>,
    policy: CuePolicy,
    buf: VecDeque<State>,
    last_t: Option<f64>,
    next_eval: Option<f64>,
    last_cue: Option<f64>,
    windows: u64,
    states: usize,
    dropped: usize,
    cues: usize,
    laps: LapTracker,
}

impl Session {
    pub fn new(teacher: Arc<Teacher>, policy: CuePolicy) -> Result<Self> {
        policy.validate()?;
        let laps = LapTracker::new(&teacher.track);
        Ok(Session {
            buf: VecDeque::with_capacity(teacher.ckpt.model.n_steps),
            teacher,
            policy,
            last_t: None,
            next_eval: None,
            last_cue: None,
            windows: 0,
            states: 0,
            dropped: 0,
            cues: 0,
            laps,
        })
    }

    pub fn window_len(&self) -> usize {
        self.buf.len()
    }

    pub fn dropped(&self) -> usize {
        self.dropped
    }

    /// Feeds one state. States not newer than the previous one are dropped
    /// and counted.
    pub fn step(&mut self, s: State) -> Result<StepOutput> {
        s.validate()?;
        if self.last_t.is_some_and(|t| s.t <= t) {
            self.dropped += 1;
            return Ok(StepOutput { dropped: true, ..Default::default() });
        }
        self.last_t = Some(s.t);
        self.states += 1;
        let mut out = StepOutput { lap: self.laps.push(&s), ..Default::default() };
        let n = self.teacher.ckpt.model.n_steps;
        if self.buf.len() == n {
            self.buf.pop_front();
        }
        self.buf.push_back(s);
        if self.buf.len() < n {
            return Ok(out);
        }
        // small tolerance so a 10 Hz stream lands on every fifth state
        if self.next_eval.is_some_and(|t| s.t < t - CLOCK_EPS) {
            return Ok(out);
        }
        self.next_eval = Some(s.t + 1.0 / self.policy.eval_rate);
        let window: Vec<State> = self.buf.iter().copied().collect();
        let probs = self.teacher.probs(&window)?;
        let window_id = self.windows;
        self.windows += 1;
        if let Some((i, p)) = decide_cue(&probs, &self.policy, self.last_cue, s.t) {
            self.last_cue = Some(s.t);
            self.cues += 1;
            out.cue = Some(CueDecision {
                action: self.teacher.ckpt.meta.action_set[i].clone(),
                action_index: i,
                prob: p,
                t_emit: s.t,
                window_id,
            });
        }
        out.probs = Some(probs);
        Ok(out)
    }

    pub fn lap_metrics(&self) -> LapMetrics {
        self.laps.metrics()
    }

    pub fn summary(&self) -> SessionSummary {
        SessionSummary {
            states: self.states,
            dropped: self.dropped,
            evaluations: self.windows as usize,
            cues: self.cues,
            laps: self.laps.metrics(),
        }
    }
}
