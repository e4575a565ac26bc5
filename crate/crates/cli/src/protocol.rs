//! Wire messages and the per-connection state machine.
//!
//! One JSON object per text frame. A connection starts with `hello`, streams
//! `state` messages and finishes with `end`. Malformed frames get an `error`
//! reply and the connection stays open; a protocol-version or track mismatch
//! refuses the session.

use std::sync::Arc;

use drivecoach::geom::State;
use drivecoach::serve::{CuePolicy, Session, SessionSummary, Teacher, PROTO_VERSION};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMsg {
    Hello {
        proto: u32,
        track: String,
    },
    State {
        t: f64,
        x: f64,
        y: f64,
        yaw: f64,
        v: f64,
        steer: f64,
        accel: f64,
    },
    End,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMsg {
    Ready {
        action_set: Vec<String>,
    },
    Cue {
        action: String,
        prob: f64,
        t_emit: f64,
    },
    Lap {
        lap_time: f64,
        pct_out_of_bounds: f64,
    },
    Summary(SessionSummary),
    Error {
        code: String,
        detail: String,
    },
}

impl ServerMsg {
    fn error(code: &str, detail: impl Into<String>) -> Self {
        ServerMsg::Error { code: code.into(), detail: detail.into() }
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }
}

/// Probabilities on the wire carry six decimals.
fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Whether the transport should keep reading after a frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Close,
}

pub struct Connection {
    teacher: Arc<Teacher>,
    policy: CuePolicy,
    session: Option<Session>,
}

impl Connection {
    pub fn new(teacher: Arc<Teacher>, policy: CuePolicy) -> Self {
        Connection { teacher, policy, session: None }
    }

    /// Handles one incoming text frame.
    pub fn handle(&mut self, text: &str) -> (Vec<ServerMsg>, Flow) {
        let msg: ClientMsg = match serde_json::from_str(text) {
            Ok(m) => m,
            Err(e) => return (vec![ServerMsg::error("bad_message", e.to_string())], Flow::Continue),
        };
        match msg {
            ClientMsg::Hello { proto, track } => {
                if proto != PROTO_VERSION {
                    let d = format!("protocol {proto} is not supported; server speaks {PROTO_VERSION}");
                    return (vec![ServerMsg::error("proto_mismatch", d)], Flow::Close);
                }
                if track != self.teacher.track.name {
                    let d = format!("server is coaching on track {:?}, not {track:?}", self.teacher.track.name);
                    return (vec![ServerMsg::error("unknown_track", d)], Flow::Close);
                }
                if self.session.is_some() {
                    return (vec![ServerMsg::error("bad_message", "session already started")], Flow::Continue);
                }
                match Session::new(self.teacher.clone(), self.policy) {
                    Ok(s) => self.session = Some(s),
                    Err(e) => return (vec![ServerMsg::error("internal", e.to_string())], Flow::Close),
                }
                (vec![ServerMsg::Ready { action_set: self.teacher.ckpt.meta.action_set.clone() }], Flow::Continue)
            }
            ClientMsg::State { t, x, y, yaw, v, steer, accel } => {
                let Some(session) = self.session.as_mut() else {
                    return (vec![ServerMsg::error("no_session", "send hello first")], Flow::Continue);
                };
                let state = State { t, x, y, yaw, v, steer, accel };
                match session.step(state) {
                    Ok(out) => {
                        let mut msgs = Vec::new();
                        if let Some(lap) = out.lap {
                            msgs.push(ServerMsg::Lap { lap_time: lap.lap_time, pct_out_of_bounds: lap.pct_out_of_bounds });
                        }
                        if let Some(c) = out.cue {
                            msgs.push(ServerMsg::Cue { action: c.action, prob: round6(c.prob), t_emit: c.t_emit });
                        }
                        (msgs, Flow::Continue)
                    }
                    Err(e) => (vec![ServerMsg::error("bad_state", e.to_string())], Flow::Continue),
                }
            }
            ClientMsg::End => match self.session.take() {
                Some(s) => (vec![ServerMsg::Summary(s.summary())], Flow::Close),
                None => (vec![ServerMsg::error("no_session", "nothing to end")], Flow::Close),
            },
        }
    }
}

/// Recording of one driving session, as the browser client downloads it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub states: Vec<State>,
    pub cues: Vec<LoggedCue>,
    pub laps: Vec<LoggedLap>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoggedCue {
    pub action: String,
    pub prob: f64,
    pub t_emit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoggedLap {
    pub lap_time: f64,
    pub pct_out_of_bounds: f64,
}

impl SessionLog {
    pub fn record_client(&mut self, msg: &ClientMsg) {
        if let ClientMsg::State { t, x, y, yaw, v, steer, accel } = *msg {
            self.states.push(State { t, x, y, yaw, v, steer, accel });
        }
    }

    pub fn record_server(&mut self, msg: &ServerMsg) {
        match msg {
            ServerMsg::Cue { action, prob, t_emit } => {
                self.cues.push(LoggedCue { action: action.clone(), prob: *prob, t_emit: *t_emit })
            }
            ServerMsg::Lap { lap_time, pct_out_of_bounds } => {
                self.laps.push(LoggedLap { lap_time: *lap_time, pct_out_of_bounds: *pct_out_of_bounds })
            }
            _ => {}
        }
    }
}

/// Runs a whole scripted stream through a fresh connection and returns the
/// server's frames in order.
pub fn replay<'a>(teacher: Arc<Teacher>, policy: CuePolicy, frames: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut conn = Connection::new(teacher, policy);
    let mut out = Vec::new();
    for f in frames {
        let (msgs, flow) = conn.handle(f);
        out.extend(msgs.iter().map(ServerMsg::to_text));
        if flow == Flow::Close {
            break;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn client_messages_parse() {
        let m: ClientMsg = serde_json::from_str(r#"{"type":"hello","proto":1,"track":"oval"}"#).unwrap();
        assert_eq!(m, ClientMsg::Hello { proto: 1, track: "oval".into() });
        let m: ClientMsg =
            serde_json::from_str(r#"{"type":"state","t":0.1,"x":1,"y":2,"yaw":0,"v":3,"steer":0,"accel":0}"#).unwrap();
        assert!(matches!(m, ClientMsg::State { v, .. } if v == 3.0));
        assert!(serde_json::from_str::<ClientMsg>(r#"{"type":"state","t":0.1}"#).is_err());
    }

    #[test]
    fn server_messages_have_wire_shape() {
        let s = ServerMsg::Cue { action: "brake".into(), prob: 0.75, t_emit: 12.5 }.to_text();
        assert_eq!(s, r#"{"type":"cue","action":"brake","prob":0.75,"t_emit":12.5}"#);
        let e = ServerMsg::error("bad_message", "x").to_text();
        assert_eq!(e, r#"{"type":"error","code":"bad_message","detail":"x"}"#);
        assert_eq!(round6(0.12345678), 0.123457);
    }
}
