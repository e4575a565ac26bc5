#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use drivecoach::checkpoint::Checkpoint;
use drivecoach::datagen::track::{simulate_student, StudentParams};
use drivecoach::geom::TrackModel;
use drivecoach::serve::{CuePolicy, Teacher};
use drivecoach_cli::protocol::ClientMsg;

pub fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

pub fn track() -> TrackModel {
    TrackModel::load(&data("circuit.json")).unwrap()
}

pub fn teacher() -> Arc<Teacher> {
    let ckpt = Checkpoint::load(&data("golden.ckpt")).unwrap();
    Arc::new(Teacher::new(ckpt, track()).unwrap())
}

/// Cooldown short enough that the fixture stream produces several cues.
pub fn policy() -> CuePolicy {
    CuePolicy { tau: 0.5, cooldown: 2.0, eval_rate: 2.0 }
}

/// Client frames for a student holding 2 m left of the racing line.
pub fn biased_stream(laps: f64, seed: u64) -> Vec<String> {
    let sp = StudentParams { line_bias: 2.0, line_noise: 0.2, speed_scale: 0.9, brake_delay: 0.5, steer_noise: 0.002 };
    let states = simulate_student(&track(), &sp, laps, seed).unwrap();
    let mut frames = vec![serde_json::to_string(&ClientMsg::Hello { proto: 1, track: "circuit".into() }).unwrap()];
    frames.extend(states.iter().map(|s| {
        serde_json::to_string(&ClientMsg::State { t: s.t, x: s.x, y: s.y, yaw: s.yaw, v: s.v, steer: s.steer, accel: s.accel })
            .unwrap()
    }));
    frames.push(serde_json::to_string(&ClientMsg::End).unwrap());
    frames
}

pub fn read_lines(name: &str) -> Vec<String> {
    std::fs::read_to_string(data(name)).unwrap().lines().map(String::from).collect()
}

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_drivecoach"))
}
