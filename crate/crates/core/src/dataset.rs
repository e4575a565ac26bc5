//! Sequence samples and their JSON-lines representation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::geom::{BehaviorLabel, LocalMap, Point2, Scenario, State};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Urban,
    Track,
}

pub const URBAN_ACTIONS: [&str; 3] = ["no_op", "slow_down", "speed_up"];
pub const TRACK_ACTIONS: [&str; 5] = ["brake", "accelerate", "stay_left", "stay_right", "turn"];

impl TaskKind {
    pub fn action_names(self) -> &'static [&'static str] {
        match self {
            TaskKind::Urban => &URBAN_ACTIONS,
            TaskKind::Track => &TRACK_ACTIONS,
        }
    }

    pub fn action_dim(self) -> usize {
        self.action_names().len()
    }

    /// Urban teacher actions are mutually exclusive; track cues are multilabel.
    pub fn is_multilabel(self) -> bool {
        matches!(self, TaskKind::Track)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UrbanAction {
    NoOp,
    SlowDown,
    SpeedUp,
}

impl UrbanAction {
    pub fn index(self) -> usize {
        match self {
            UrbanAction::NoOp => 0,
            UrbanAction::SlowDown => 1,
            UrbanAction::SpeedUp => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        [UrbanAction::NoOp, UrbanAction::SlowDown, UrbanAction::SpeedUp]
            .get(i)
            .copied()
    }

    pub fn name(self) -> &'static str {
        URBAN_ACTIONS[self.index()]
    }

    pub fn parse(s: &str) -> Option<Self> {
        URBAN_ACTIONS.iter().position(|a| *a == s).and_then(Self::from_index)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TeacherLabel {
    Action(UrbanAction),
    /// One 0/1 indicator per track cue category.
    Multi(Vec<u8>),
}

/// One training example: `P` scenarios, a skill target and (on the labeled
/// split) a teacher label.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub id: u64,
    pub task: TaskKind,
    pub gamma: Option<f64>,
    pub seed: u64,
    /// `(n_c, n_a)` for urban data, `(steer_smoothness, raceline_dist)` for track data.
    pub skill_gt: Vec<f64>,
    /// Urban generator's `(alpha, beta)`.
    pub skill_vector: Option<[f64; 2]>,
    pub teacher: Option<TeacherLabel>,
    pub scenarios: Vec<Scenario>,
}

impl SequenceSample {
    pub fn is_labeled(&self) -> bool {
        self.teacher.is_some()
    }

    /// Teacher target as a 0/1 vector of length `action_dim`.
    pub fn teacher_target(&self) -> Option<Vec<f64>> {
        match &self.teacher {
            None => None,
            Some(TeacherLabel::Action(a)) => {
                let mut v = vec![0.0; URBAN_ACTIONS.len()];
                v[a.index()] = 1.0;
                Some(v)
            }
            Some(TeacherLabel::Multi(m)) => Some(m.iter().map(|x| *x as f64).collect()),
        }
    }

    pub fn future_len(&self) -> Option<usize> {
        self.scenarios.last().and_then(|s| s.future.as_ref()).map(|f| f.len())
    }

    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("id".into(), json!(self.id));
        m.insert("gamma".into(), json!(self.gamma));
        m.insert("seed".into(), json!(self.seed));
        m.insert("skill_gt".into(), json!(self.skill_gt));
        if let Some(sv) = self.skill_vector {
            m.insert("skill_vector".into(), json!(sv));
        }
        match self.task {
            TaskKind::Urban => {
                let a = match &self.teacher {
                    Some(TeacherLabel::Action(a)) => json!(a.name()),
                    _ => Value::Null,
                };
                m.insert("teacher_action".into(), a);
            }
            TaskKind::Track => {
                let a = match &self.teacher {
                    Some(TeacherLabel::Multi(v)) => json!(v),
                    _ => Value::Null,
                };
                m.insert("teacher_labels".into(), a);
            }
        }
        m.insert(
            "scenarios".into(),
            Value::Array(self.scenarios.iter().map(scenario_to_json).collect()),
        );
        Value::Object(m)
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let obj = v.as_object().ok_or_else(|| Error::data("sample is not a JSON object"))?;
        let field = |k: &str| obj.get(k).ok_or_else(|| Error::data(format!("sample missing {k:?}")));
        let id = field("id")?.as_u64().ok_or_else(|| Error::data("bad id"))?;
        let seed = field("seed")?.as_u64().ok_or_else(|| Error::data("bad seed"))?;
        let gamma = obj.get("gamma").and_then(Value::as_f64);
        let skill_gt: Vec<f64> = serde_json::from_value(field("skill_gt")?.clone())?;
        let skill_vector = match obj.get("skill_vector") {
            Some(Value::Null) | None => None,
            Some(v) => Some(serde_json::from_value(v.clone())?),
        };
        let (task, teacher) = if let Some(l) = obj.get("teacher_labels") {
            let t = match l {
                Value::Null => None,
                other => {
                    let v: Vec<u8> = serde_json::from_value(other.clone())?;
                    if v.len() != TRACK_ACTIONS.len() || v.iter().any(|x| *x > 1) {
                        return Err(Error::data("teacher_labels must be 5 values in {0,1}"));
                    }
                    Some(TeacherLabel::Multi(v))
                }
            };
            (TaskKind::Track, t)
        } else {
            let t = match field("teacher_action")? {
                Value::Null => None,
                Value::String(s) => Some(TeacherLabel::Action(
                    UrbanAction::parse(s).ok_or_else(|| Error::data(format!("unknown teacher action {s:?}")))?,
                )),
                _ => return Err(Error::data("teacher_action must be a string or null")),
            };
            (TaskKind::Urban, t)
        };
        let scenarios = field("scenarios")?
            .as_array()
            .ok_or_else(|| Error::data("scenarios must be an array"))?
            .iter()
            .map(scenario_from_json)
            .collect::<Result<Vec<_>>>()?;
        if scenarios.is_empty() {
            return Err(Error::data("sample has no scenarios"));
        }
        Ok(SequenceSample {
            id,
            task,
            gamma,
            seed,
            skill_gt,
            skill_vector,
            teacher,
            scenarios,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ScenarioWire {
    past: Vec<[f64; 7]>,
    future: Option<Vec<Point2>>,
    label: Option<BehaviorLabel>,
    map: LocalMap,
}

fn scenario_to_json(s: &Scenario) -> Value {
    let w = ScenarioWire {
        past: s.past.iter().map(State::to_row).collect(),
        future: s.future.clone(),
        label: s.label,
        map: s.local_map.clone(),
    };
    serde_json::to_value(w).expect("scenario serializes")
}

fn scenario_from_json(v: &Value) -> Result<Scenario> {
    let w: ScenarioWire = serde_json::from_value(v.clone())?;
    Ok(Scenario {
        past: w.past.iter().map(State::from_row).collect(),
        local_map: w.map,
        future: w.future,
        label: w.label,
        merge: None,
    })
}

/// Sidecar metadata written next to every dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub task: TaskKind,
    pub count: usize,
    pub labeled: usize,
    pub config: Value,
    pub action_set: Vec<String>,
    /// Positive count per action category over the labeled split.
    pub class_counts: Vec<usize>,
    pub class_weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discarded_windows: Option<usize>,
}

pub fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    s.into()
}

/// Class counts and wBCE weights over the labeled part of `samples`.
pub fn label_statistics(samples: &[SequenceSample], task: TaskKind) -> (Vec<usize>, Vec<f64>) {
    let targets: Vec<Vec<f64>> = samples.iter().filter_map(|s| s.teacher_target()).collect();
    let dim = task.action_dim();
    let mut counts = vec![0usize; dim];
    for t in &targets {
        for (c, v) in counts.iter_mut().zip(t) {
            if *v > 0.5 {
                *c += 1;
            }
        }
    }
    let weights = if targets.is_empty() {
        vec![1.0; dim]
    } else {
        crate::losses::class_weights(&targets).0
    };
    (counts, weights)
}

/// Writes the dataset as JSON lines plus the sidecar metadata, both
/// atomically.
pub fn save_dataset(path: &Path, samples: &[SequenceSample], meta: &DatasetMeta) -> Result<()> {
    let bytes = crate::io::to_jsonl(samples.iter().map(SequenceSample::to_json))?;
    let meta_bytes = serde_json::to_vec_pretty(meta)?;
    crate::io::write_atomic(&meta_path(path), &meta_bytes)?;
    crate::io::write_atomic(path, &bytes)
}

pub fn load_dataset(path: &Path) -> Result<Vec<SequenceSample>> {
    let rows = crate::io::read_jsonl(path)?;
    let samples = rows
        .iter()
        .enumerate()
        .map(|(i, v)| {
            SequenceSample::from_json(v)
                .map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    check_consistent(&samples)?;
    Ok(samples)
}

/// All samples must share task, sequence length, window lengths and skill width.
pub fn check_consistent(samples: &[SequenceSample]) -> Result<()> {
    let Some(first) = samples.first() else { return Ok(()) };
    let shape = |s: &SequenceSample| {
        (
            s.task,
            s.scenarios.len(),
            s.scenarios[0].past.len(),
            s.future_len(),
            s.skill_gt.len(),
        )
    };
    let want = shape(first);
    for s in samples {
        let got = shape(s);
        if got != want {
            return Err(Error::data(format!(
                "sample {} has shape {got:?}, expected {want:?} (task, P, N, M, skill_dim)",
                s.id
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Polyline, Pose2, Role};

    fn scenario() -> Scenario {
        let past = (0..3)
            .map(|i| State {
                t: -0.2 + 0.1 * i as f64,
                x: -2.0 + i as f64,
                y: 0.0,
                yaw: 0.0,
                v: 10.0,
                steer: 0.0,
                accel: 0.1,
            })
            .collect();
        Scenario {
            past,
            local_map: LocalMap {
                polylines: vec![Polyline {
                    role: Role::Raceline,
                    lane_id: 0,
                    pts: vec![[0.0, 0.0], [0.5, 0.1]],
                }],
                origin: Pose2 { x: 1.0, y: 2.0, yaw: 0.5 },
                scale: 50.0,
            },
            future: Some(vec![[1.0, 0.0], [2.0, 0.0]]),
            label: Some(BehaviorLabel::Aggressive),
            merge: None,
        }
    }

    #[test]
    fn urban_round_trip() {
        let s = SequenceSample {
            id: 3,
            task: TaskKind::Urban,
            gamma: Some(0.5),
            seed: 99,
            skill_gt: vec![1.0, 2.0],
            skill_vector: Some([0.1, 0.2]),
            teacher: Some(TeacherLabel::Action(UrbanAction::SlowDown)),
            scenarios: vec![scenario(), scenario()],
        };
        let v = s.to_json();
        assert_eq!(v["teacher_action"], "slow_down");
        assert_eq!(v["scenarios"][0]["map"]["polylines"][0]["role"], "raceline");
        assert_eq!(SequenceSample::from_json(&v).unwrap(), s);

        let mut u = s.clone();
        u.teacher = None;
        let v = u.to_json();
        assert!(v["teacher_action"].is_null());
        assert_eq!(SequenceSample::from_json(&v).unwrap(), u);
    }

    #[test]
    fn track_round_trip_and_targets() {
        let s = SequenceSample {
            id: 0,
            task: TaskKind::Track,
            gamma: None,
            seed: 1,
            skill_gt: vec![0.5, 1.5],
            skill_vector: None,
            teacher: Some(TeacherLabel::Multi(vec![0, 1, 0, 0, 1])),
            scenarios: vec![scenario()],
        };
        let v = s.to_json();
        assert_eq!(v["teacher_labels"], json!([0, 1, 0, 0, 1]));
        assert!(v.get("teacher_action").is_none());
        assert_eq!(SequenceSample::from_json(&v).unwrap(), s);
        assert_eq!(s.teacher_target().unwrap(), vec![0.0, 1.0, 0.0, 0.0, 1.0]);

        let mut bad = v.clone();
        bad["teacher_labels"] = json!([0, 2, 0, 0, 1]);
        assert!(SequenceSample::from_json(&bad).is_err());
    }

    #[test]
    fn mixed_shapes_rejected() {
        let mut a = SequenceSample {
            id: 0,
            task: TaskKind::Urban,
            gamma: None,
            seed: 1,
            skill_gt: vec![0.0, 0.0],
            skill_vector: None,
            teacher: None,
            scenarios: vec![scenario()],
        };
        let b = a.clone();
        a.scenarios.push(scenario());
        assert!(check_consistent(&[a, b]).is_err());
    }
}
