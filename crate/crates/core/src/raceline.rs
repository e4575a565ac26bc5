//! Racing line and speed profile.
//!
//! The line is parameterized by a lateral offset `lambda_i` along the left
//! normal of each centerline point and smoothed by minimizing the sum of
//! squared second differences with projected gradient descent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{add, dist, menger_curvature, scale, sub, Point2, TrackModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RacelineSolverConfig {
    /// Minimum distance kept from either track edge, meters.
    pub margin: f64,
    pub max_iters: usize,
    pub step: f64,
    /// Relative objective decrease below which the solver stops.
    pub tol: f64,
}

impl Default for RacelineSolverConfig {
    fn default() -> Self {
        RacelineSolverConfig {
            margin: 1.0,
            max_iters: 20_000,
            step: 0.05,
            tol: 1e-10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedLimits {
    pub a_lat_max: f64,
    pub a_lon_max: f64,
    pub v_max: f64,
}

impl Default for SpeedLimits {
    fn default() -> Self {
        SpeedLimits {
            a_lat_max: 6.0,
            a_lon_max: 5.0,
            v_max: 25.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RacelineSolution {
    /// One point per centerline point (closed lines repeat the first point).
    pub points: Vec<Point2>,
    pub lambda: Vec<f64>,
    /// Objective after every accepted iteration, starting with the initial value.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    /// Largest `|lambda_i| - bound_i` seen on any iterate (<= 0 when feasible).
    pub max_bound_excess: f64,
}

const MAX_HALVINGS: usize = 20;

struct Problem {
    center: Vec<Point2>,
    normal: Vec<Point2>,
    bound: Vec<f64>,
    closed: bool,
}

impl Problem {
    fn n(&self) -> usize {
        self.center.len()
    }

    fn point(&self, lam: &[f64], i: usize) -> Point2 {
        add(self.center[i], scale(self.normal[i], lam[i]))
    }

    /// Indices `k` whose second difference is part of the objective.
    fn terms(&self) -> std::ops::Range<usize> {
        if self.closed {
            0..self.n()
        } else {
            1..self.n().saturating_sub(1)
        }
    }

    fn second_diff(&self, lam: &[f64], k: usize) -> Point2 {
        let n = self.n();
        let (a, c) = if self.closed {
            ((k + n - 1) % n, (k + 1) % n)
        } else {
            (k - 1, k + 1)
        };
        let pa = self.point(lam, a);
        let pb = self.point(lam, k);
        let pc = self.point(lam, c);
        add(sub(pa, scale(pb, 2.0)), pc)
    }

    fn objective(&self, lam: &[f64]) -> f64 {
        self.terms()
            .map(|k| {
                let d = self.second_diff(lam, k);
                d[0] * d[0] + d[1] * d[1]
            })
            .sum()
    }

    fn gradient(&self, lam: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut gp = vec![[0.0f64; 2]; n];
        for k in self.terms() {
            let d = self.second_diff(lam, k);
            let (a, c) = if self.closed {
                ((k + n - 1) % n, (k + 1) % n)
            } else {
                (k - 1, k + 1)
            };
            gp[a] = add(gp[a], scale(d, 2.0));
            gp[k] = add(gp[k], scale(d, -4.0));
            gp[c] = add(gp[c], scale(d, 2.0));
        }
        gp.iter()
            .zip(&self.normal)
            .map(|(g, nrm)| g[0] * nrm[0] + g[1] * nrm[1])
            .collect()
    }

    fn project(&self, lam: &mut [f64]) {
        for (l, b) in lam.iter_mut().zip(&self.bound) {
            *l = l.clamp(-b, *b);
        }
    }
}

pub fn compute_racing_line(track: &TrackModel, cfg: &RacelineSolverConfig) -> Result<RacelineSolution> {
    compute_racing_line_observed(track, cfg, |_, _, _| {})
}

/// Like [`compute_racing_line`], calling `observe(iteration, lambda, objective)`
/// on every accepted iterate.
pub fn compute_racing_line_observed(
    track: &TrackModel,
    cfg: &RacelineSolverConfig,
    mut observe: impl FnMut(usize, &[f64], f64),
) -> Result<RacelineSolution> {
    track.validate()?;
    if !(cfg.step > 0.0) {
        return Err(Error::config(format!("step must be positive, got {}", cfg.step)));
    }
    if !(cfg.margin > 0.0) {
        return Err(Error::config(format!("margin must be positive, got {}", cfg.margin)));
    }
    if let Some(w) = track.half_width.iter().find(|w| cfg.margin >= **w) {
        return Err(Error::config(format!(
            "margin {} is not smaller than half width {w}",
            cfg.margin
        )));
    }
    let normals = track.left_normals();
    let unique = if track.closed {
        track.centerline.len() - 1
    } else {
        track.centerline.len()
    };
    let prob = Problem {
        center: track.centerline[..unique].to_vec(),
        normal: normals[..unique].to_vec(),
        bound: track.half_width[..unique].iter().map(|w| w - cfg.margin).collect(),
        closed: track.closed,
    };

    let mut lam = vec![0.0; unique];
    let mut obj = prob.objective(&lam);
    let mut trace = vec![obj];
    let mut max_excess = excess(&lam, &prob.bound);
    observe(0, &lam, obj);
    let mut iterations = 0;
    for it in 1..=cfg.max_iters {
        let g = prob.gradient(&lam);
        let mut step = cfg.step;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let mut cand: Vec<f64> = lam.iter().zip(&g).map(|(l, gi)| l - step * gi).collect();
            prob.project(&mut cand);
            let c_obj = prob.objective(&cand);
            if c_obj < obj {
                accepted = Some((cand, c_obj));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, c_obj)) = accepted else { break };
        let rel = (obj - c_obj) / obj.max(f64::MIN_POSITIVE);
        lam = cand;
        obj = c_obj;
        trace.push(obj);
        max_excess = max_excess.max(excess(&lam, &prob.bound));
        observe(it, &lam, obj);
        iterations = it;
        if rel < cfg.tol {
            break;
        }
    }

    let mut points: Vec<Point2> = (0..unique).map(|i| prob.point(&lam, i)).collect();
    let mut lambda = lam;
    if track.closed {
        points.push(points[0]);
        lambda.push(lambda[0]);
    }
    Ok(RacelineSolution {
        points,
        lambda,
        objective_trace: trace,
        iterations,
        max_bound_excess: max_excess,
    })
}

fn excess(lam: &[f64], bound: &[f64]) -> f64 {
    lam.iter()
        .zip(bound)
        .map(|(l, b)| l.abs() - b)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Discrete curvature per point; open lines copy the neighbor value at the
/// endpoints, closed lines (first point repeated at the end) wrap around.
pub fn discrete_curvature(pts: &[Point2], closed: bool) -> Vec<f64> {
    let n = pts.len();
    if n < 3 {
        return vec![0.0; n];
    }
    if closed {
        let u = n - 1;
        let mut k: Vec<f64> = (0..u)
            .map(|i| menger_curvature(pts[(i + u - 1) % u], pts[i], pts[(i + 1) % u]))
            .collect();
        k.push(k[0]);
        k
    } else {
        let mut k = vec![0.0; n];
        for i in 1..n - 1 {
            k[i] = menger_curvature(pts[i - 1], pts[i], pts[i + 1]);
        }
        k[0] = k[1];
        k[n - 1] = k[n - 2];
        k
    }
}

/// Speed limits along a line: lateral-acceleration cap, then backward
/// (braking) and forward (acceleration) passes. Closed lines iterate the
/// passes with wrap-around until nothing changes.
pub fn speed_profile(line: &[Point2], closed: bool, limits: &SpeedLimits) -> Result<Vec<f64>> {
    if !(limits.a_lat_max > 0.0 && limits.a_lon_max > 0.0 && limits.v_max > 0.0) {
        return Err(Error::config("speed limits must be positive"));
    }
    let n = line.len();
    let kappa = discrete_curvature(line, closed);
    let mut v: Vec<f64> = kappa
        .iter()
        .map(|k| {
            if k.abs() > 0.0 {
                limits.v_max.min((limits.a_lat_max / k.abs()).sqrt())
            } else {
                limits.v_max
            }
        })
        .collect();
    if n < 2 {
        return Ok(v);
    }
    let a2 = 2.0 * limits.a_lon_max;
    if !closed {
        for i in (0..n - 1).rev() {
            let ds = dist(line[i], line[i + 1]);
            v[i] = v[i].min((v[i + 1] * v[i + 1] + a2 * ds).sqrt());
        }
        for i in 0..n - 1 {
            let ds = dist(line[i], line[i + 1]);
            v[i + 1] = v[i + 1].min((v[i] * v[i] + a2 * ds).sqrt());
        }
        return Ok(v);
    }
    let u = n - 1;
    let mut w = v[..u].to_vec();
    let ds: Vec<f64> = (0..u).map(|i| dist(line[i], line[(i + 1) % u])).collect();
    for _ in 0..100 {
        let mut changed = false;
        for i in (0..u).rev() {
            let cap = (w[(i + 1) % u].powi(2) + a2 * ds[i]).sqrt();
            if cap < w[i] {
                w[i] = cap;
                changed = true;
            }
        }
        for i in 0..u {
            let j = (i + 1) % u;
            let cap = (w[i].powi(2) + a2 * ds[i]).sqrt();
            if cap < w[j] {
                w[j] = cap;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    w.push(w[0]);
    Ok(w)
}

/// Returns a copy of `track` (centerline resampled to `spacing`) carrying the
/// solved racing line and its speed profile.
pub fn with_racing_line(
    track: &TrackModel,
    cfg: &RacelineSolverConfig,
    limits: &SpeedLimits,
    spacing: f64,
) -> Result<TrackModel> {
    let mut t = track.resampled(spacing)?;
    let sol = compute_racing_line(&t, cfg)?;
    let speeds = speed_profile(&sol.points, t.closed, limits)?;
    t.raceline = Some(sol.points);
    t.race_speeds = Some(speeds);
    Ok(t)
}
