//! Classification metrics and driving metrics (lap time, time out of bounds).

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::geom::{ArcLine, State, TrackModel};

pub const DECISION_THRESHOLD: f64 = 0.5;

/// Fraction of (sample, category) positions where the thresholded prediction
/// differs from the label.
pub fn hamming_loss(probs: &[Vec<f64>], labels: &[Vec<f64>], threshold: f64) -> f64 {
    let mut wrong = 0usize;
    let mut total = 0usize;
    for (p, y) in probs.iter().zip(labels) {
        for (pc, yc) in p.iter().zip(y) {
            total += 1;
            if (*pc >= threshold) != (*yc > 0.5) {
                wrong += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        wrong as f64 / total as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
    (precision, recall, f1)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-category precision/recall/F1/support. Multiclass mode compares the
/// argmax of the prediction against the argmax of the label; multilabel mode
/// thresholds every category independently.
pub fn per_class(probs: &[Vec<f64>], labels: &[Vec<f64>], multilabel: bool) -> Vec<ClassReport> {
    let dim = labels.first().map_or(0, Vec::len);
    let mut tp = vec![0usize; dim];
    let mut fp = vec![0usize; dim];
    let mut fn_ = vec![0usize; dim];
    for (p, y) in probs.iter().zip(labels) {
        if multilabel {
            for c in 0..dim {
                match (p[c] >= DECISION_THRESHOLD, y[c] > 0.5) {
                    (true, true) => tp[c] += 1,
                    (true, false) => fp[c] += 1,
                    (false, true) => fn_[c] += 1,
                    (false, false) => {}
                }
            }
        } else {
            let (ph, yh) = (argmax(p), argmax(y));
            if ph == yh {
                tp[ph] += 1;
            } else {
                fp[ph] += 1;
                fn_[yh] += 1;
            }
        }
    }
    (0..dim)
        .map(|c| {
            let (precision, recall, f1) = prf(tp[c], fp[c], fn_[c]);
            ClassReport {
                precision,
                recall,
                f1,
                support: tp[c] + fn_[c],
            }
        })
        .collect()
}

/// Support-weighted mean of per-class F1, in percent. Classes without
/// support carry no weight. With no support at all the score is 100 when
/// nothing was predicted positive and 0 otherwise.
pub fn weighted_f1(probs: &[Vec<f64>], labels: &[Vec<f64>], multilabel: bool) -> f64 {
    let rep = per_class(probs, labels, multilabel);
    weighted_f1_from(&rep, probs, multilabel)
}

fn weighted_f1_from(rep: &[ClassReport], probs: &[Vec<f64>], multilabel: bool) -> f64 {
    let total: usize = rep.iter().map(|r| r.support).sum();
    if total == 0 {
        let any_pos = multilabel && probs.iter().flatten().any(|p| *p >= DECISION_THRESHOLD);
        return if any_pos { 0.0 } else { 100.0 };
    }
    100.0 * rep.iter().map(|r| r.f1 * r.support as f64).sum::<f64>() / total as f64
}

/// Weighted F1 of a baseline that predicts every category at random with
/// its training-set frequency (multilabel) or draws a class from the
/// training class distribution (multiclass).
pub fn frequency_baseline_f1(
    train_labels: &[Vec<f64>],
    test_labels: &[Vec<f64>],
    multilabel: bool,
    seed: u64,
) -> f64 {
    let dim = train_labels.first().map_or(0, Vec::len);
    let n = train_labels.len().max(1) as f64;
    let freq: Vec<f64> = (0..dim)
        .map(|c| train_labels.iter().filter(|y| y[c] > 0.5).count() as f64 / n)
        .collect();
    let mut r = crate::rng::rng(seed);
    let preds: Vec<Vec<f64>> = test_labels
        .iter()
        .map(|_| {
            if multilabel {
                freq.iter().map(|f| if r.random::<f64>() < *f { 1.0 } else { 0.0 }).collect()
            } else {
                let u: f64 = r.random::<f64>() * freq.iter().sum::<f64>();
                let mut acc = 0.0;
                let mut pick = dim.saturating_sub(1);
                for (c, f) in freq.iter().enumerate() {
                    acc += f;
                    if u < acc {
                        pick = c;
                        break;
                    }
                }
                let mut v = vec![0.0; dim];
                v[pick] = 1.0;
                v
            }
        })
        .collect();
    weighted_f1(&preds, test_labels, multilabel)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub weighted_f1: f64,
    pub hamming: f64,
    pub per_class: std::collections::BTreeMap<String, ClassReport>,
}

pub fn classification_report(
    probs: &[Vec<f64>],
    labels: &[Vec<f64>],
    multilabel: bool,
    names: &[&str],
) -> ClassificationReport {
    let rep = per_class(probs, labels, multilabel);
    let hamming = if multilabel {
        hamming_loss(probs, labels, DECISION_THRESHOLD)
    } else {
        // one-hot of the argmax against the one-hot label
        let hot: Vec<Vec<f64>> = probs
            .iter()
            .map(|p| {
                let mut v = vec![0.0; p.len()];
                v[argmax(p)] = 1.0;
                v
            })
            .collect();
        hamming_loss(&hot, labels, DECISION_THRESHOLD)
    };
    ClassificationReport {
        weighted_f1: weighted_f1_from(&rep, probs, multilabel),
        hamming,
        per_class: names.iter().map(|n| n.to_string()).zip(rep).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LapMetrics {
    /// First completed lap, seconds.
    pub lap_time: Option<f64>,
    pub lap_times: Vec<f64>,
    pub pct_out_of_bounds: f64,
}

/// A completed lap reported by [`LapTracker::push`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LapEvent {
    pub lap_time: f64,
    /// Out-of-bounds percentage over the states of this lap.
    pub pct_out_of_bounds: f64,
}

/// Incremental lap timing and out-of-bounds accounting against the track
/// centerline. Start line is at arc length 0.
#[derive(Clone, Debug)]
pub struct LapTracker {
    arc: ArcLine,
    half_width: Vec<f64>,
    prev: Option<(f64, f64)>,
    last_crossing: Option<f64>,
    lap_times: Vec<f64>,
    steps: usize,
    out: usize,
    lap_steps: usize,
    lap_out: usize,
}

impl LapTracker {
    pub fn new(track: &TrackModel) -> Self {
        LapTracker {
            arc: track.center_arc(),
            half_width: track.half_width.clone(),
            prev: None,
            last_crossing: None,
            lap_times: Vec::new(),
            steps: 0,
            out: 0,
            lap_steps: 0,
            lap_out: 0,
        }
    }

    pub fn push(&mut self, s: &State) -> Option<LapEvent> {
        let pr = self.arc.project(s.pos());
        let w = self.arc.interp(&self.half_width, pr.s);
        let is_out = pr.d.abs() > w;
        self.steps += 1;
        self.lap_steps += 1;
        if is_out {
            self.out += 1;
            self.lap_out += 1;
        }
        let mut event = None;
        if self.arc.is_closed() {
            if let Some((t0, s0)) = self.prev {
                let l = self.arc.length();
                if s0 - pr.s > l / 2.0 {
                    let ahead = l - s0;
                    let frac = ahead / (ahead + pr.s);
                    let tc = t0 + frac * (s.t - t0);
                    if let Some(last) = self.last_crossing {
                        let lap_time = tc - last;
                        self.lap_times.push(lap_time);
                        event = Some(LapEvent {
                            lap_time,
                            pct_out_of_bounds: 100.0 * self.lap_out as f64 / self.lap_steps as f64,
                        });
                    }
                    self.last_crossing = Some(tc);
                    self.lap_steps = 0;
                    self.lap_out = 0;
                }
            }
        }
        self.prev = Some((s.t, pr.s));
        event
    }

    pub fn pct_out_of_bounds(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            100.0 * self.out as f64 / self.steps as f64
        }
    }

    pub fn lap_times(&self) -> &[f64] {
        &self.lap_times
    }

    pub fn metrics(&self) -> LapMetrics {
        LapMetrics {
            lap_time: self.lap_times.first().copied(),
            lap_times: self.lap_times.clone(),
            pct_out_of_bounds: self.pct_out_of_bounds(),
        }
    }
}

pub fn lap_metrics(states: &[State], track: &TrackModel) -> LapMetrics {
    let mut lt = LapTracker::new(track);
    for s in states {
        lt.push(s);
    }
    lt.metrics()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::builtin_track;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn hamming_examples() {
        let y = vec![vec![1.0, 0.0, 1.0, 0.0, 0.0]];
        assert_eq!(hamming_loss(&y, &y, 0.5), 0.0);
        let p = vec![vec![1.0, 1.0, 1.0, 0.0, 0.0]];
        assert_abs_diff_eq!(hamming_loss(&p, &y, 0.5), 0.2);
        let flip = vec![vec![0.0, 1.0, 0.0, 1.0, 1.0]];
        assert_eq!(hamming_loss(&flip, &y, 0.5), 1.0);
    }

    fn hot(c: usize, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[c] = 1.0;
        v
    }

    #[test]
    fn weighted_f1_examples() {
        let y = vec![hot(0, 3), hot(1, 3), hot(2, 3)];
        assert_eq!(weighted_f1(&y, &y, false), 100.0);
        // supports a:2, b:1; b predicted as a
        let y = vec![hot(0, 2), hot(0, 2), hot(1, 2)];
        let p = vec![hot(0, 2), hot(0, 2), hot(0, 2)];
        assert_abs_diff_eq!(weighted_f1(&p, &y, false), 160.0 / 3.0, epsilon = 1e-9);
        let ml = vec![vec![1.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]];
        assert_eq!(weighted_f1(&ml, &ml, true), 100.0);
        assert_eq!(hamming_loss(&ml, &ml, 0.5), 0.0);
    }

    #[test]
    fn empty_support_multilabel() {
        let y = vec![vec![0.0, 0.0]];
        assert_eq!(weighted_f1(&y, &y, true), 100.0);
        assert_eq!(weighted_f1(&[vec![0.9, 0.0]], &y, true), 0.0);
    }

    #[test]
    fn baseline_is_near_label_frequency() {
        let mut labels = Vec::new();
        for i in 0..4000 {
            labels.push(vec![if i % 4 == 0 { 1.0 } else { 0.0 }, if i % 2 == 0 { 1.0 } else { 0.0 }]);
        }
        // expected F1 per category equals its frequency: (0.25*1000 + 0.5*2000)/3000
        let f = frequency_baseline_f1(&labels, &labels, true, 3);
        assert!((f - 41.67).abs() < 3.0, "{f}");
    }

    #[test]
    fn centerline_run_and_lap_time() {
        let track = builtin_track("circle").unwrap();
        let l = track.length();
        let v = 20.0;
        let n = (2.2 * l / v / 0.1) as usize;
        let states: Vec<State> = (0..n)
            .map(|k| {
                let t = k as f64 * 0.1;
                let a = 0.3 + v * t / 100.0;
                State { t, x: 100.0 * a.cos(), y: 100.0 * a.sin(), yaw: a + 1.57, v, steer: 0.0, accel: 0.0 }
            })
            .collect();
        let m = lap_metrics(&states, &track);
        assert_eq!(m.pct_out_of_bounds, 0.0);
        assert_eq!(m.lap_times.len(), 1);
        assert!((m.lap_time.unwrap() - l / v).abs() < 0.1, "{:?} vs {}", m.lap_time, l / v);

        let wide: Vec<State> = states
            .iter()
            .map(|s| State { x: s.x * 1.09, y: s.y * 1.09, ..*s })
            .collect();
        assert_eq!(lap_metrics(&wide, &track).pct_out_of_bounds, 100.0);
    }

    proptest! {
        #[test]
        fn metrics_invariant_to_sample_order(raw in proptest::collection::vec(0.0f64..1.0, 30), rot in 0usize..10) {
            let probs: Vec<Vec<f64>> = raw.chunks(3).map(|c| c.to_vec()).collect();
            let labels: Vec<Vec<f64>> = raw.chunks(3).map(|c| c.iter().map(|v| if (v * 7.0).fract() > 0.5 { 1.0 } else { 0.0 }).collect()).collect();
            let mut p2 = probs.clone();
            let mut l2 = labels.clone();
            p2.rotate_left(rot);
            l2.rotate_left(rot);
            prop_assert_eq!(weighted_f1(&probs, &labels, true), weighted_f1(&p2, &l2, true));
            prop_assert_eq!(hamming_loss(&probs, &labels, 0.5), hamming_loss(&p2, &l2, 0.5));
            let perfect = weighted_f1(&labels, &labels, true);
            prop_assert_eq!(perfect, 100.0);
            prop_assert_eq!(hamming_loss(&labels, &labels, 0.5), 0.0);
        }
    }
}
