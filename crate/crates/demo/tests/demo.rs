use drivecoach_demo::{cue_json, simulate_json, solve_track_json, Drive, SolvedTrack};

fn solved(name: &str) -> SolvedTrack {
    serde_json::from_str(&solve_track_json(name, 1.0).unwrap()).unwrap()
}

#[test]
fn solved_track_carries_edges_and_racing_line() {
    let s = solved("oval");
    let n = s.track.centerline.len();
    assert_eq!(s.left.len(), n);
    assert_eq!(s.right.len(), n);
    assert_eq!(s.track.raceline.as_ref().unwrap().len(), s.track.race_speeds.as_ref().unwrap().len());
    assert!(s.objective.windows(2).all(|w| w[1] <= w[0]));
    assert!(solve_track_json("moon", 1.0).is_err());
}

#[test]
fn biased_student_is_told_to_move_right() {
    let s = solved("circuit");
    let track = serde_json::to_string(&s.track).unwrap();
    let student = r#"{"line_bias": 2.5, "line_noise": 0.0, "speed_scale": 0.9, "brake_delay": 0.0, "steer_noise": 0.0}"#;
    let d: Drive = serde_json::from_str(&simulate_json(&track, student, 1.2, 3).unwrap()).unwrap();
    assert!(d.path.len() > 100);
    assert!(d.laps.lap_times.len() <= 1);
    let right = d.cues.iter().filter(|c| c.actions.iter().any(|a| a == "stay_right")).count();
    let left = d.cues.iter().filter(|c| c.actions.iter().any(|a| a == "stay_left")).count();
    assert!(right > left, "right {right} left {left}");

    let again = simulate_json(&track, student, 1.2, 3).unwrap();
    assert_eq!(serde_json::to_string(&d.cues).unwrap(), serde_json::to_string(&serde_json::from_str::<Drive>(&again).unwrap().cues).unwrap());
    assert!(simulate_json(&track, "{}", 1.0, 0).is_err());
    assert!(simulate_json("not a track", student, 1.0, 0).is_err());
}

#[test]
fn cue_threshold_is_respected() {
    let out = cue_json("[0.2, 0.3, 0.1, 0.4, 0.45]", 0.5, 0.0, -1.0, 0.0).unwrap();
    assert_eq!(out, r#"{"cue":null,"index":null,"prob":null}"#);
}
