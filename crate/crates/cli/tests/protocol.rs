mod common;

use drivecoach_cli::protocol::{replay, ClientMsg, Connection, Flow, ServerMsg, SessionLog};

fn parse(lines: &[String]) -> Vec<ServerMsg> {
    lines.iter().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn states_before_hello_are_rejected() {
    let mut c = Connection::new(common::teacher(), common::policy());
    let (m, f) = c.handle(r#"{"type":"state","t":0,"x":0,"y":0,"yaw":0,"v":0,"steer":0,"accel":0}"#);
    assert!(matches!(&m[..], [ServerMsg::Error { code, .. }] if code == "no_session"));
    assert_eq!(f, Flow::Continue);
}

#[test]
fn malformed_frames_keep_the_session() {
    let mut c = Connection::new(common::teacher(), common::policy());
    let (m, _) = c.handle(r#"{"type":"hello","proto":1,"track":"circuit"}"#);
    assert!(matches!(&m[..], [ServerMsg::Ready { action_set }] if action_set.len() == 5));
    for bad in ["not json", r#"{"type":"warp"}"#, r#"{"type":"state","t":1}"#] {
        let (m, f) = c.handle(bad);
        assert!(matches!(&m[..], [ServerMsg::Error { code, .. }] if code == "bad_message"), "{bad}");
        assert_eq!(f, Flow::Continue);
    }
    let (m, f) = c.handle(r#"{"type":"state","t":0,"x":0,"y":0,"yaw":0,"v":-3,"steer":0,"accel":0}"#);
    assert!(matches!(&m[..], [ServerMsg::Error { code, .. }] if code == "bad_state"));
    assert_eq!(f, Flow::Continue);
    let (m, f) = c.handle(r#"{"type":"end"}"#);
    assert!(matches!(&m[..], [ServerMsg::Summary(s)] if s.states == 0));
    assert_eq!(f, Flow::Close);
}

#[test]
fn version_and_track_mismatch_close() {
    let mut c = Connection::new(common::teacher(), common::policy());
    let (m, f) = c.handle(r#"{"type":"hello","proto":2,"track":"circuit"}"#);
    assert!(matches!(&m[..], [ServerMsg::Error { code, .. }] if code == "proto_mismatch"));
    assert_eq!(f, Flow::Close);
    let mut c = Connection::new(common::teacher(), common::policy());
    let (m, f) = c.handle(r#"{"type":"hello","proto":1,"track":"oval"}"#);
    assert!(matches!(&m[..], [ServerMsg::Error { code, .. }] if code == "unknown_track"));
    assert_eq!(f, Flow::Close);
}

#[test]
fn out_of_order_states_are_counted() {
    let mut frames = common::biased_stream(0.2, 9);
    let end = frames.pop().unwrap();
    let n_states = frames.len() - 1;
    frames.insert(60, frames[30].clone());
    frames.insert(61, frames[61].clone());
    frames.push(end);
    let out = parse(&replay(common::teacher(), common::policy(), frames.iter().map(String::as_str)));
    let Some(ServerMsg::Summary(s)) = out.last() else { panic!("{out:?}") };
    assert_eq!(s.dropped, 2);
    assert_eq!(s.states, n_states);
}

#[test]
fn first_window_never_cues() {
    let frames = common::biased_stream(0.2, 9);
    let out = parse(&replay(common::teacher(), common::policy(), frames[..40].iter().map(String::as_str)));
    assert_eq!(out.len(), 1);
    assert!(matches!(out[0], ServerMsg::Ready { .. }));
}

#[test]
fn lap_messages_match_summary() {
    let frames = common::biased_stream(2.3, 4);
    let out = parse(&replay(common::teacher(), common::policy(), frames.iter().map(String::as_str)));
    let laps: Vec<(f64, f64)> = out
        .iter()
        .filter_map(|m| match m {
            ServerMsg::Lap { lap_time, pct_out_of_bounds } => Some((*lap_time, *pct_out_of_bounds)),
            _ => None,
        })
        .collect();
    let Some(ServerMsg::Summary(s)) = out.last() else { panic!() };
    assert!(!laps.is_empty());
    assert_eq!(laps.len(), s.laps.lap_times.len());
    for (i, (t, _)) in laps.iter().enumerate() {
        assert_eq!(*t, s.laps.lap_times[i]);
    }
}

#[test]
fn session_log_records_the_exchange() {
    let frames = common::biased_stream(2.3, 4);
    let mut conn = Connection::new(common::teacher(), common::policy());
    let mut log = SessionLog::default();
    let mut laps = 0;
    for f in &frames {
        log.record_client(&serde_json::from_str::<ClientMsg>(f).unwrap());
        for m in conn.handle(f).0 {
            laps += matches!(m, ServerMsg::Lap { .. }) as usize;
            log.record_server(&m);
        }
    }
    assert_eq!(log.states.len(), frames.len() - 2);
    assert_eq!(log.laps.len(), laps);
    assert!(!log.cues.is_empty());
    let text = serde_json::to_string(&log).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v.as_object().unwrap().keys().collect::<Vec<_>>(), ["cues", "laps", "states"]);
    assert_eq!(serde_json::from_str::<SessionLog>(&text).unwrap(), log);
}
