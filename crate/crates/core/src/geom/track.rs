use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{add, dist, scale, sub, ArcLine, Point2, Role, WorldPolyline};
use crate::error::{Error, Result};

/// Global track description: centerline, width profile and optional racing
/// line with its speed profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackModel {
    pub name: String,
    pub closed: bool,
    pub centerline: Vec<Point2>,
    pub half_width: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raceline: Option<Vec<Point2>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub race_speeds: Option<Vec<f64>>,
}

pub const BUILTIN_TRACKS: [&str; 4] = ["circuit", "oval", "straight", "circle"];

impl TrackModel {
    pub fn validate(&self) -> Result<()> {
        if self.centerline.len() < 2 {
            return Err(Error::data("track centerline needs at least 2 points"));
        }
        if self.half_width.len() != self.centerline.len() {
            return Err(Error::data(format!(
                "half_width has {} entries for {} centerline points",
                self.half_width.len(),
                self.centerline.len()
            )));
        }
        if self.half_width.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::data("half_width must be positive everywhere"));
        }
        if self.closed {
            let first = self.centerline[0];
            let last = self.centerline[self.centerline.len() - 1];
            if dist(first, last) > 1e-9 {
                return Err(Error::data("closed track must repeat its first point at the end"));
            }
        }
        match (&self.raceline, &self.race_speeds) {
            (Some(r), Some(v)) if r.len() != v.len() => {
                return Err(Error::data("race_speeds length differs from raceline length"))
            }
            (None, Some(_)) => return Err(Error::data("race_speeds given without a raceline")),
            _ => {}
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let t: TrackModel = serde_json::from_str(s)?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self)?;
        crate::io::write_atomic(path.as_ref(), &bytes)
    }

    pub fn center_arc(&self) -> ArcLine {
        ArcLine::new(self.centerline.clone(), self.closed).expect("validated track")
    }

    pub fn raceline_arc(&self) -> Option<ArcLine> {
        self.raceline
            .as_ref()
            .map(|r| ArcLine::new(r.clone(), self.closed).expect("validated raceline"))
    }

    pub fn length(&self) -> f64 {
        super::polyline_length(&self.centerline)
    }

    /// Unit left normals of the centerline, one per point.
    pub fn left_normals(&self) -> Vec<Point2> {
        normals(&self.centerline, self.closed)
    }

    pub fn left_edge(&self) -> Vec<Point2> {
        self.offset_line(1.0)
    }

    pub fn right_edge(&self) -> Vec<Point2> {
        self.offset_line(-1.0)
    }

    fn offset_line(&self, sign: f64) -> Vec<Point2> {
        let n = self.left_normals();
        self.centerline
            .iter()
            .zip(&n)
            .zip(&self.half_width)
            .map(|((c, n), w)| add(*c, scale(*n, sign * w)))
            .collect()
    }

    /// World polylines used for localization: both edges, plus the centerline
    /// and the racing line when requested and available.
    pub fn world_polylines(&self, with_center: bool) -> Vec<WorldPolyline> {
        let mut out = vec![
            WorldPolyline {
                role: Role::LeftEdge,
                lane_id: 0,
                pts: self.left_edge(),
            },
            WorldPolyline {
                role: Role::RightEdge,
                lane_id: 0,
                pts: self.right_edge(),
            },
        ];
        if with_center {
            out.push(WorldPolyline {
                role: Role::Center,
                lane_id: 0,
                pts: self.centerline.clone(),
            });
        }
        if let Some(r) = &self.raceline {
            out.push(WorldPolyline {
                role: Role::Raceline,
                lane_id: 0,
                pts: r.clone(),
            });
        }
        out
    }

    /// Resamples the centerline (and width profile) at a uniform spacing close
    /// to `spacing` meters. Drops any racing line.
    pub fn resampled(&self, spacing: f64) -> Result<TrackModel> {
        let arc = self.center_arc();
        let n = ((arc.length() / spacing).round() as usize).max(2);
        let centerline = super::resample_polyline(&self.centerline, n + 1)?;
        let step = arc.length() / n as f64;
        let half_width = (0..=n)
            .map(|i| arc.interp(&self.half_width, step * i as f64))
            .collect();
        let mut t = TrackModel {
            name: self.name.clone(),
            closed: self.closed,
            centerline,
            half_width,
            raceline: None,
            race_speeds: None,
        };
        if t.closed {
            let first = t.centerline[0];
            *t.centerline.last_mut().unwrap() = first;
        }
        Ok(t)
    }
}

pub(crate) fn normals(pts: &[Point2], closed: bool) -> Vec<Point2> {
    let n = pts.len();
    let unique = if closed { n - 1 } else { n };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (prev, next) = if closed {
            let k = i % unique;
            (pts[(k + unique - 1) % unique], pts[(k + 1) % unique])
        } else {
            (pts[i.saturating_sub(1)], pts[(i + 1).min(n - 1)])
        };
        let t = sub(next, prev);
        let l = super::norm(t);
        let t = if l > 0.0 { scale(t, 1.0 / l) } else { [1.0, 0.0] };
        out.push([-t[1], t[0]]);
    }
    out
}

enum Piece {
    Straight(f64),
    /// Left turn of the given radius through the given angle (radians).
    Arc(f64, f64),
}

fn turtle(pieces: &[Piece], spacing: f64) -> Vec<Point2> {
    let mut pts = vec![[0.0, 0.0]];
    let mut pos: Point2 = [0.0, 0.0];
    let mut heading = 0.0f64;
    for piece in pieces {
        match *piece {
            Piece::Straight(len) => {
                let n = (len / spacing).ceil().max(1.0) as usize;
                let start = pos;
                let dir = [heading.cos(), heading.sin()];
                for k in 1..=n {
                    pos = add(start, scale(dir, len * k as f64 / n as f64));
                    pts.push(pos);
                }
            }
            Piece::Arc(r, angle) => {
                let n = (r * angle / spacing).ceil().max(1.0) as usize;
                let center = add(pos, scale([-heading.sin(), heading.cos()], r));
                let h0 = heading;
                for k in 1..=n {
                    let h = h0 + angle * k as f64 / n as f64;
                    pos = add(center, scale([h.sin(), -h.cos()], r));
                    pts.push(pos);
                }
                heading = h0 + angle;
            }
        }
    }
    pts
}

/// Closed rounded rectangle with four left corners of radii `r`; the last two
/// straights are solved so the loop closes.
fn four_corner_loop(l1: f64, l2: f64, r: [f64; 4], spacing: f64) -> Vec<Point2> {
    let q = std::f64::consts::FRAC_PI_2;
    let l3 = l1 + r[0] - r[1] - r[2] + r[3];
    let l4 = l2 + r[0] + r[1] - r[2] - r[3];
    let mut pieces = Vec::new();
    for (len, rad) in [(l1, r[0]), (l2, r[1]), (l3, r[2]), (l4, r[3])] {
        if len > 0.0 {
            pieces.push(Piece::Straight(len));
        }
        pieces.push(Piece::Arc(rad, q));
    }
    let mut pts = turtle(&pieces, spacing);
    let first = pts[0];
    *pts.last_mut().unwrap() = first;
    pts
}

/// Built-in synthetic tracks: `circuit` (four corners of different radii),
/// `oval` (long straights, two hairpins), `straight` (open, 600 m) and
/// `circle` (closed, radius 100 m).
pub fn builtin_track(name: &str) -> Result<TrackModel> {
    let (closed, centerline, hw) = match name {
        "circuit" => (true, four_corner_loop(300.0, 140.0, [35.0, 60.0, 25.0, 80.0], 2.0), 6.0),
        "oval" => (true, four_corner_loop(1000.0, 0.0, [60.0, 60.0, 60.0, 60.0], 2.0), 6.0),
        "straight" => {
            let pts = (0..=300).map(|i| [i as f64 * 2.0, 0.0]).collect();
            (false, pts, 6.0)
        }
        "circle" => {
            let n = 400;
            let mut pts: Vec<Point2> = (0..n)
                .map(|i| {
                    let a = std::f64::consts::TAU * i as f64 / n as f64;
                    [100.0 * a.cos(), 100.0 * a.sin()]
                })
                .collect();
            pts.push(pts[0]);
            (true, pts, 8.0)
        }
        other => {
            return Err(Error::config(format!(
                "unknown built-in track {other:?}; expected one of {BUILTIN_TRACKS:?}"
            )))
        }
    };
    let n = centerline.len();
    let t = TrackModel {
        name: name.to_string(),
        closed,
        centerline,
        half_width: vec![hw; n],
        raceline: None,
        race_speeds: None,
    };
    t.validate()?;
    if closed && name != "circle" {
        t.resampled(2.0)
    } else {
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_are_valid_and_closed() {
        for name in BUILTIN_TRACKS {
            let t = builtin_track(name).unwrap();
            t.validate().unwrap();
        }
        let c = builtin_track("circuit").unwrap();
        assert!(c.closed);
        assert!(c.length() > 1000.0 && c.length() < 1800.0, "{}", c.length());
        assert!(builtin_track("nope").is_err());
    }

    #[test]
    fn json_round_trip_and_validation() {
        let t = builtin_track("straight").unwrap();
        let s = serde_json::to_string(&t).unwrap();
        assert!(!s.contains("raceline"));
        let back = TrackModel::from_json_str(&s).unwrap();
        assert_eq!(back, t);

        let bad = r#"{"name":"x","closed":false,"centerline":[[0,0],[1,0]],"half_width":[1.0]}"#;
        assert!(TrackModel::from_json_str(bad).is_err());
        let bad = r#"{"name":"x","closed":false,"centerline":[[0,0],[1,0]],"half_width":[1.0,0.0]}"#;
        assert!(TrackModel::from_json_str(bad).is_err());
        let bad = r#"{"name":"x","closed":true,"centerline":[[0,0],[1,0],[1,1]],"half_width":[1,1,1]}"#;
        assert!(TrackModel::from_json_str(bad).is_err());
    }

    #[test]
    fn edges_sit_at_half_width() {
        let t = builtin_track("circle").unwrap();
        let c = t.center_arc();
        for p in t.left_edge().iter().step_by(37) {
            let pr = c.project(*p);
            assert!((pr.d - 8.0).abs() < 1e-2);
        }
        for p in t.right_edge().iter().step_by(37) {
            let pr = c.project(*p);
            assert!((pr.d + 8.0).abs() < 1e-2);
        }
    }
}
