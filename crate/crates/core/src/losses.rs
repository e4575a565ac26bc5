//! Multi-task losses: weighted BCE on the teacher head, min-over-modes ADE on
//! the trajectory head and mean squared error on the skill head.
//!
//! Everything here works on `f64` head outputs; the model casts at the head
//! boundary so the same code serves both precisions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Point2;

pub const PROB_EPS: f64 = 1e-7;
/// Weight assigned to categories with no positive example.
pub const MAX_CLASS_WEIGHT: f64 = 1e4;

/// Per-category positive weights `w_c = negatives / positives`. Categories
/// without positives get [`MAX_CLASS_WEIGHT`] and a warning string.
pub fn class_weights(targets: &[Vec<f64>]) -> (Vec<f64>, Vec<String>) {
    let dim = targets.first().map_or(0, Vec::len);
    let mut warnings = Vec::new();
    let weights = (0..dim)
        .map(|c| {
            let pos = targets.iter().filter(|t| t[c] > 0.5).count();
            let neg = targets.len() - pos;
            if pos == 0 {
                warnings.push(format!(
                    "category {c} has no positive samples; weight capped at {MAX_CLASS_WEIGHT}"
                ));
                MAX_CLASS_WEIGHT
            } else {
                neg as f64 / pos as f64
            }
        })
        .collect();
    (weights, warnings)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Weighted binary cross entropy of one sample, averaged over categories.
pub fn wbce(probs: &[f64], labels: &[f64], weights: &[f64]) -> f64 {
    let c = probs.len() as f64;
    let s: f64 = probs
        .iter()
        .zip(labels)
        .zip(weights)
        .map(|((p, y), w)| {
            let p = clamp_prob(*p);
            w * y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    -s / c
}

/// [`wbce`] on `sigmoid(logits)` together with its gradient with respect to
/// the logits. Clamped probabilities have zero gradient.
pub fn wbce_logits(logits: &[f64], labels: &[f64], weights: &[f64]) -> (f64, Vec<f64>) {
    let probs: Vec<f64> = logits.iter().map(|z| sigmoid(*z)).collect();
    let loss = wbce(&probs, labels, weights);
    let c = probs.len() as f64;
    let grad = probs
        .iter()
        .zip(labels)
        .zip(weights)
        .map(|((p, y), w)| {
            if *p < PROB_EPS || *p > 1.0 - PROB_EPS {
                0.0
            } else {
                -(w * y * (1.0 - p) - (1.0 - y) * p) / c
            }
        })
        .collect();
    (loss, grad)
}

/// Cumulative sum of per-step displacements.
pub fn predict_pose(deltas: &[Point2]) -> Vec<Point2> {
    let mut acc = [0.0, 0.0];
    deltas
        .iter()
        .map(|d| {
            acc = [acc[0] + d[0], acc[1] + d[1]];
            acc
        })
        .collect()
}

fn ade(deltas: &[Point2], gt: &[Point2]) -> f64 {
    let poses = predict_pose(deltas);
    poses
        .iter()
        .zip(gt)
        .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt())
        .sum::<f64>()
        / gt.len() as f64
}

/// Minimum over modes of the average displacement error between the poses
/// of each mode and the ground-truth positions.
pub fn mon_ade(modes: &[Vec<Point2>], gt: &[Point2]) -> f64 {
    modes.iter().map(|m| ade(m, gt)).fold(f64::INFINITY, f64::min)
}

/// [`mon_ade`] plus its gradient with respect to every mode's deltas (only
/// the winning mode, first on ties, receives a gradient).
pub fn mon_ade_grad(modes: &[Vec<Point2>], gt: &[Point2]) -> (f64, usize, Vec<Vec<Point2>>) {
    let mut best = 0;
    let mut best_v = f64::INFINITY;
    for (q, m) in modes.iter().enumerate() {
        let v = ade(m, gt);
        if v < best_v {
            best_v = v;
            best = q;
        }
    }
    let m = gt.len();
    let mut grads: Vec<Vec<Point2>> = modes.iter().map(|md| vec![[0.0, 0.0]; md.len()]).collect();
    let poses = predict_pose(&modes[best]);
    // d/d pose_t, then a reverse cumulative sum gives d/d delta_i
    let mut acc = [0.0, 0.0];
    for t in (0..m).rev() {
        let e = [poses[t][0] - gt[t][0], poses[t][1] - gt[t][1]];
        let n = (e[0] * e[0] + e[1] * e[1]).sqrt();
        if n > 1e-12 {
            acc[0] += e[0] / n / m as f64;
            acc[1] += e[1] / n / m as f64;
        }
        grads[best][t] = acc;
    }
    (best_v, best, grads)
}

pub fn skill_mse(pred: &[f64], gt: &[f64]) -> f64 {
    pred.iter().zip(gt).map(|(p, g)| (p - g).powi(2)).sum::<f64>() / pred.len() as f64
}

fn skill_mse_grad(pred: &[f64], gt: &[f64]) -> (f64, Vec<f64>) {
    let d = pred.len() as f64;
    let grad = pred.iter().zip(gt).map(|(p, g)| 2.0 * (p - g) / d).collect();
    (skill_mse(pred, gt), grad)
}

/// Task combination: teacher action alone, with trajectory, with skill, or
/// with both.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskSet {
    A,
    AT,
    AS,
    AST,
}

impl TaskSet {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(TaskSet::A),
            "AT" => Ok(TaskSet::AT),
            "AS" => Ok(TaskSet::AS),
            "AST" => Ok(TaskSet::AST),
            other => Err(Error::config(format!("unknown task set {other:?}; expected A, AT, AS or AST"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskSet::A => "A",
            TaskSet::AT => "AT",
            TaskSet::AS => "AS",
            TaskSet::AST => "AST",
        }
    }

    pub fn uses_trajectory(self) -> bool {
        matches!(self, TaskSet::AT | TaskSet::AST)
    }

    pub fn uses_skill(self) -> bool {
        matches!(self, TaskSet::AS | TaskSet::AST)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCoefficients {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
}

impl Default for LossCoefficients {
    fn default() -> Self {
        LossCoefficients { a1: 1.0, a2: 1.0, a3: 1.0 }
    }
}

impl LossCoefficients {
    pub fn validate(&self) -> Result<()> {
        let c = [self.a1, self.a2, self.a3];
        if c.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::config("loss coefficients must be finite and non-negative"));
        }
        if c.iter().all(|v| *v == 0.0) {
            return Err(Error::config("loss coefficients are all zero"));
        }
        Ok(())
    }

    /// Coefficients with the terms outside `tasks` zeroed.
    pub fn for_tasks(&self, tasks: TaskSet) -> Self {
        LossCoefficients {
            a1: self.a1,
            a2: if tasks.uses_trajectory() { self.a2 } else { 0.0 },
            a3: if tasks.uses_skill() { self.a3 } else { 0.0 },
        }
    }
}

/// Head outputs of one sample in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs {
    pub teacher_logits: Vec<f64>,
    /// `Q` modes of `M` deltas.
    pub traj: Vec<Vec<Point2>>,
    pub skill: Vec<f64>,
}

impl HeadOutputs {
    pub fn zeros_like(o: &HeadOutputs) -> Self {
        HeadOutputs {
            teacher_logits: vec![0.0; o.teacher_logits.len()],
            traj: o.traj.iter().map(|m| vec![[0.0, 0.0]; m.len()]).collect(),
            skill: vec![0.0; o.skill.len()],
        }
    }

    pub fn teacher_probs(&self) -> Vec<f64> {
        self.teacher_logits.iter().map(|z| sigmoid(*z)).collect()
    }
}

/// Targets available for one sample.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Targets {
    pub teacher: Option<Vec<f64>>,
    pub future: Option<Vec<Point2>>,
    /// Normalized skill target.
    pub skill: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub teacher: f64,
    pub trajectory: f64,
    pub skill: f64,
    pub n_teacher: usize,
    pub n_trajectory: usize,
    pub n_skill: usize,
}

/// Weighted sum of the three terms, each averaged over the samples that
/// carry its target. Returns the report and the gradient of the total with
/// respect to every sample's head outputs.
pub fn total_loss(
    outputs: &[HeadOutputs],
    targets: &[Targets],
    coeffs: &LossCoefficients,
    class_weights: &[f64],
) -> Result<(LossReport, Vec<HeadOutputs>)> {
    if outputs.len() != targets.len() {
        return Err(Error::contract(format!(
            "{} outputs for {} targets",
            outputs.len(),
            targets.len()
        )));
    }
    let n_teacher = targets.iter().filter(|t| t.teacher.is_some()).count();
    let n_traj = targets.iter().filter(|t| t.future.is_some()).count();
    let n_skill = targets.iter().filter(|t| t.skill.is_some()).count();
    if n_teacher + n_traj + n_skill == 0 {
        return Err(Error::contract("batch carries no targets at all"));
    }
    let mut rep = LossReport {
        n_teacher,
        n_trajectory: n_traj,
        n_skill,
        ..Default::default()
    };
    let mut grads: Vec<HeadOutputs> = outputs.iter().map(HeadOutputs::zeros_like).collect();
    for ((o, t), g) in outputs.iter().zip(targets).zip(grads.iter_mut()) {
        if let Some(y) = &t.teacher {
            if y.len() != o.teacher_logits.len() || class_weights.len() != y.len() {
                return Err(Error::contract(format!(
                    "teacher target has {} entries, head has {}, weights {}",
                    y.len(),
                    o.teacher_logits.len(),
                    class_weights.len()
                )));
            }
            let (l, dz) = wbce_logits(&o.teacher_logits, y, class_weights);
            rep.teacher += l / n_teacher as f64;
            let k = coeffs.a1 / n_teacher as f64;
            g.teacher_logits = dz.iter().map(|d| d * k).collect();
        }
        if let Some(gt) = &t.future {
            if o.traj.iter().any(|m| m.len() != gt.len()) {
                return Err(Error::contract(format!(
                    "future has {} points, trajectory head emits {}",
                    gt.len(),
                    o.traj.first().map_or(0, Vec::len)
                )));
            }
            let (l, _, dm) = mon_ade_grad(&o.traj, gt);
            rep.trajectory += l / n_traj as f64;
            let k = coeffs.a2 / n_traj as f64;
            g.traj = dm
                .into_iter()
                .map(|m| m.into_iter().map(|d| [d[0] * k, d[1] * k]).collect())
                .collect();
        }
        if let Some(v) = &t.skill {
            if v.len() != o.skill.len() {
                return Err(Error::contract(format!(
                    "skill target has {} entries, head has {}",
                    v.len(),
                    o.skill.len()
                )));
            }
            let (l, ds) = skill_mse_grad(&o.skill, v);
            rep.skill += l / n_skill as f64;
            let k = coeffs.a3 / n_skill as f64;
            g.skill = ds.iter().map(|d| d * k).collect();
        }
    }
    rep.total = coeffs.a1 * rep.teacher + coeffs.a2 * rep.trajectory + coeffs.a3 * rep.skill;
    Ok((rep, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn class_weight_examples() {
        let mk = |pos: usize, neg: usize| -> Vec<Vec<f64>> {
            let mut v = vec![vec![1.0]; pos];
            v.extend(vec![vec![0.0]; neg]);
            v
        };
        assert_eq!(class_weights(&mk(3, 9)).0, vec![3.0]);
        assert_eq!(class_weights(&mk(5, 5)).0, vec![1.0]);
        assert_eq!(class_weights(&mk(4, 0)).0, vec![0.0]);
        let (w, warn) = class_weights(&mk(0, 4));
        assert_eq!(w, vec![MAX_CLASS_WEIGHT]);
        assert_eq!(warn.len(), 1);
    }

    #[test]
    fn wbce_hand_value() {
        let l = wbce(&[0.8, 0.2], &[1.0, 0.0], &[3.0, 1.0]);
        let want = (3.0 * (1.0f64 / 0.8).ln() + (1.0f64 / 0.8).ln()) / 2.0;
        assert_abs_diff_eq!(l, want, epsilon = 1e-12);
        assert_abs_diff_eq!(l, 0.44629, epsilon = 1e-5);
    }

    #[test]
    fn wbce_confident_prediction_is_tiny() {
        let l = wbce(&[1.0, 0.0], &[1.0, 0.0], &[5.0, 5.0]);
        assert!(l < 5.0 * 1.1e-7);
    }

    #[test]
    fn wbce_logit_gradient_matches_differences() {
        let z = [0.3, -1.2, 2.0];
        let y = [1.0, 0.0, 1.0];
        let w = [2.0, 1.0, 0.5];
        let (_, g) = wbce_logits(&z, &y, &w);
        for i in 0..3 {
            let mut zp = z;
            let mut zm = z;
            zp[i] += 1e-6;
            zm[i] -= 1e-6;
            let fd = (wbce_logits(&zp, &y, &w).0 - wbce_logits(&zm, &y, &w).0) / 2e-6;
            assert_abs_diff_eq!(g[i], fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn pose_examples() {
        assert_eq!(predict_pose(&[[0.0, 0.0]; 3]), vec![[0.0, 0.0]; 3]);
        assert_eq!(predict_pose(&[[1.0, 0.0], [1.0, 0.0]]), vec![[1.0, 0.0], [2.0, 0.0]]);
    }

    #[test]
    fn mon_ade_examples() {
        let gt = [[1.0, 0.0], [2.0, 0.0]];
        let same = vec![vec![[1.0, 0.0], [1.0, 0.0]]];
        assert_eq!(mon_ade(&same, &gt), 0.0);
        // poses A = [(1,0),(2,1)], B = [(0,0),(2,0)]
        let a = vec![[1.0, 0.0], [1.0, 1.0]];
        let b = vec![[0.0, 0.0], [2.0, 0.0]];
        let mut modes = vec![a, b];
        assert_abs_diff_eq!(mon_ade(&modes, &gt), 0.5, epsilon = 1e-12);
        // ADE 0.1: both poses off by 0.1
        modes.push(vec![[1.0, 0.1], [1.0, 0.0]]);
        assert_abs_diff_eq!(mon_ade(&modes, &gt), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn skill_examples() {
        assert_eq!(skill_mse(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(skill_mse(&[0.0, 0.0], &[2.0, 0.0]), 2.0);
        assert_eq!(skill_mse(&[2.0, 0.0], &[0.0, 0.0]), 2.0);
    }

    fn out() -> HeadOutputs {
        HeadOutputs {
            teacher_logits: vec![0.5, -0.5, 1.0],
            traj: vec![vec![[1.0, 0.1], [1.0, 0.0]], vec![[0.5, 0.0], [0.5, 0.0]]],
            skill: vec![0.2, -0.3],
        }
    }

    fn full_targets() -> Targets {
        Targets {
            teacher: Some(vec![0.0, 1.0, 0.0]),
            future: Some(vec![[1.0, 0.0], [2.0, 0.0]]),
            skill: Some(vec![0.0, 1.0]),
        }
    }

    #[test]
    fn total_loss_masking() {
        let w = [1.0, 2.0, 1.0];
        let teacher_only = LossCoefficients { a1: 1.0, a2: 0.0, a3: 0.0 };
        let (r, _) = total_loss(&[out()], &[full_targets()], &teacher_only, &w).unwrap();
        let probs = out().teacher_probs();
        assert_abs_diff_eq!(r.total, wbce(&probs, &[0.0, 1.0, 0.0], &w), epsilon = 1e-12);

        let unl = Targets { teacher: None, ..full_targets() };
        let (r, g) = total_loss(&[out()], &[unl], &LossCoefficients::default(), &w).unwrap();
        assert_eq!(r.teacher, 0.0);
        assert_abs_diff_eq!(r.total, r.trajectory + r.skill, epsilon = 1e-15);
        assert!(g[0].teacher_logits.iter().all(|v| *v == 0.0));

        // one labeled, one unlabeled: teacher term is the labeled sample's alone
        let (r, _) = total_loss(
            &[out(), out()],
            &[full_targets(), Targets { teacher: None, ..full_targets() }],
            &LossCoefficients::default(),
            &w,
        )
        .unwrap();
        assert_abs_diff_eq!(r.teacher, wbce(&probs, &[0.0, 1.0, 0.0], &w), epsilon = 1e-12);
        assert_eq!(r.n_teacher, 1);

        assert!(total_loss(&[out()], &[Targets::default()], &LossCoefficients::default(), &w).is_err());
    }

    #[test]
    fn total_loss_gradient_matches_differences() {
        let w = [1.0, 2.0, 1.0];
        let c = LossCoefficients { a1: 0.7, a2: 1.3, a3: 0.4 };
        let base = out();
        let (_, g) = total_loss(&[base.clone()], &[full_targets()], &c, &w).unwrap();
        let f = |o: &HeadOutputs| total_loss(&[o.clone()], &[full_targets()], &c, &w).unwrap().0.total;
        let h = 1e-6;
        for i in 0..3 {
            let mut p = base.clone();
            let mut m = base.clone();
            p.teacher_logits[i] += h;
            m.teacher_logits[i] -= h;
            assert_abs_diff_eq!(g[0].teacher_logits[i], (f(&p) - f(&m)) / (2.0 * h), epsilon = 1e-7);
        }
        for q in 0..2 {
            for t in 0..2 {
                for k in 0..2 {
                    let mut p = base.clone();
                    let mut m = base.clone();
                    p.traj[q][t][k] += h;
                    m.traj[q][t][k] -= h;
                    assert_abs_diff_eq!(g[0].traj[q][t][k], (f(&p) - f(&m)) / (2.0 * h), epsilon = 1e-7);
                }
            }
        }
        for i in 0..2 {
            let mut p = base.clone();
            let mut m = base.clone();
            p.skill[i] += h;
            m.skill[i] -= h;
            assert_abs_diff_eq!(g[0].skill[i], (f(&p) - f(&m)) / (2.0 * h), epsilon = 1e-7);
        }
    }

    #[test]
    fn coefficients_follow_task_switch() {
        let c = LossCoefficients::default();
        assert_eq!(c.for_tasks(TaskSet::A), LossCoefficients { a1: 1.0, a2: 0.0, a3: 0.0 });
        assert_eq!(c.for_tasks(TaskSet::AS), LossCoefficients { a1: 1.0, a2: 0.0, a3: 1.0 });
        assert_eq!(c.for_tasks(TaskSet::AST), c);
        assert!(LossCoefficients { a1: 0.0, a2: 0.0, a3: 0.0 }.validate().is_err());
        assert!(TaskSet::parse("XT").is_err());
    }

    proptest! {
        #[test]
        fn unit_weights_match_plain_bce(p in proptest::collection::vec(0.01f64..0.99, 1..6), seed in 0u64..1000) {
            let y: Vec<f64> = (0..p.len()).map(|i| ((seed >> i) & 1) as f64).collect();
            let w = vec![1.0; p.len()];
            let reference = -p.iter().zip(&y).map(|(p, y)| y * p.ln() + (1.0 - y) * (1.0 - p).ln()).sum::<f64>() / p.len() as f64;
            prop_assert!((wbce(&p, &y, &w) - reference).abs() < 1e-9);
        }

        #[test]
        fn mon_ade_non_increasing_in_modes(raw in proptest::collection::vec(-2.0f64..2.0, 24)) {
            let gt: Vec<Point2> = (0..4).map(|i| [i as f64, 0.5]).collect();
            let modes: Vec<Vec<Point2>> = raw.chunks(8).map(|c| c.chunks(2).map(|p| [p[0], p[1]]).collect()).collect();
            let mut prev = f64::INFINITY;
            for q in 1..=modes.len() {
                let v = mon_ade(&modes[..q], &gt);
                prop_assert!(v <= prev);
                prev = v;
            }
        }

        #[test]
        fn pose_differences_recover_deltas(raw in proptest::collection::vec(-3.0f64..3.0, 2..20)) {
            let d: Vec<Point2> = raw.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
            let p = predict_pose(&d);
            for t in 1..p.len() {
                prop_assert!((p[t][0] - p[t - 1][0] - d[t][0]).abs() < 1e-12);
                prop_assert!((p[t][1] - p[t - 1][1] - d[t][1]).abs() < 1e-12);
            }
        }

        #[test]
        fn total_is_linear_in_teacher_coefficient(a1 in 0.1f64..3.0) {
            let w = [1.0, 2.0, 1.0];
            let c1 = LossCoefficients { a1, a2: 0.5, a3: 0.5 };
            let c2 = LossCoefficients { a1: 2.0 * a1, ..c1 };
            let (r1, _) = total_loss(&[out()], &[full_targets()], &c1, &w).unwrap();
            let (r2, _) = total_loss(&[out()], &[full_targets()], &c2, &w).unwrap();
            prop_assert!(((r2.total - r1.total) - a1 * r1.teacher).abs() < 1e-12);
        }
    }
}
