//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.

mod common;

use std::io::Write;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use drivecoach::datagen::track::{default_roster, gen_track_dataset, TrackDatasetConfig};
use drivecoach::datagen::urban::{
    assign_teacher_action, gen_dataset, gen_scenario, label_action, sample_sequence, ManeuverFilterParams,
    SkillVector2, UrbanDatasetConfig,
};
use drivecoach::checkpoint::SkillStats;
use drivecoach::dataset::{SequenceSample, TaskKind, TeacherLabel, UrbanAction};
use drivecoach::geom::{builtin_track, BehaviorLabel};
use drivecoach::losses::{mon_ade, wbce, LossCoefficients, TaskSet, Targets};
use drivecoach::metrics::{frequency_baseline_f1, hamming_loss, weighted_f1};
use drivecoach::model::{Model, ModelConfig};
use drivecoach::nn::gradcheck::grad_check_steps;
use drivecoach::raceline::{compute_racing_line_observed, with_racing_line, RacelineSolverConfig, SpeedLimits};
use drivecoach::rng::rng;
use drivecoach::train::{evaluate, mean_std, model_config_for, train, TrainConfig};
use drivecoach_cli::protocol::{replay, Connection, ServerMsg};
use rand::Rng;

static SERIAL: Mutex<()> = Mutex::new(());

/// Runs the checks one at a time so their runtimes are measured alone.
fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, name: &str, pass: bool, detail: String, elapsed: Duration) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    // straight to the handle so the line shows up without --nocapture
    let line = format!("criterion {n} {verdict}: {name}: {detail} [{:.1}s]\n", elapsed.as_secs_f64());
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    assert!(pass, "criterion {n} failed: {name}: {detail}");
}

fn small_model(task: TaskKind, d: usize) -> ModelConfig {
    let mut m = ModelConfig::for_task(task);
    m.d_model = d;
    m.n_heads = 2;
    m.enc_layers = 1;
    m.head_hidden = 2 * d;
    m
}

#[test]
fn criterion_1_full_model_gradients() {
    let _serial = serial();
    let t0 = Instant::now();
    let cfg = UrbanDatasetConfig { num: 2, gamma: 0.9, labeled: 1, p: 2, seed: 11, filters: Default::default() };
    let (samples, _) = gen_dataset(&cfg).unwrap();
    let mut base = small_model(TaskKind::Urban, 8);
    base.head_hidden = 8;
    let mc = model_config_for(&samples, Some(&base)).unwrap();
    let model = Model::new(mc).unwrap();
    let ps = model.init_params::<f64>(3).unwrap();
    let batch: Vec<_> = samples.iter().map(|s| model.prepare::<f64>(s).unwrap()).collect();
    let refs: Vec<&SequenceSample> = samples.iter().collect();
    let stats = SkillStats::fit(&refs, 2);
    let targets: Vec<Targets> = samples
        .iter()
        .map(|s| Targets {
            teacher: s.teacher_target(),
            future: s.scenarios.last().unwrap().future.clone(),
            skill: Some(stats.normalize(&s.skill_gt)),
        })
        .collect();
    assert!(targets[0].teacher.is_some() && targets[1].teacher.is_none());
    let weights = [1.5, 0.7, 2.0];
    let coeffs = LossCoefficients { a1: 1.0, a2: 1.0, a3: 1.0 };
    let rep = grad_check_steps(
        &ps,
        |p| {
            let (r, g) = model.loss_and_grads(p, &batch, &targets, &coeffs, &weights).unwrap();
            (r.total, g)
        },
        &[1e-3, 1e-4, 1e-5, 1e-6],
        200,
        5,
    );
    let elapsed = t0.elapsed();
    let min_checked = ps.values().iter().map(|v| v.data.len().min(200)).sum::<usize>();
    report(
        1,
        "full-model gradient vs central differences",
        rep.max_rel < 1e-4 && rep.checked == min_checked && elapsed < Duration::from_secs(120),
        format!("max rel err {:.2e} over {} entries (worst {:?})", rep.max_rel, rep.checked, rep.worst),
        elapsed,
    );
}

fn ref_wbce(p: &[f64], y: &[f64], w: &[f64]) -> f64 {
    let mut s = 0.0;
    for c in 0..p.len() {
        s += w[c] * y[c] * p[c].ln() + (1.0 - y[c]) * (1.0 - p[c]).ln();
    }
    -s / p.len() as f64
}

fn ref_mon_ade(modes: &[Vec<[f64; 2]>], gt: &[[f64; 2]]) -> f64 {
    let mut best = f64::INFINITY;
    for m in modes {
        let mut total = 0.0;
        for t in 0..gt.len() {
            let x: f64 = (0..=t).map(|i| m[i][0]).sum();
            let y: f64 = (0..=t).map(|i| m[i][1]).sum();
            total += ((x - gt[t][0]).powi(2) + (y - gt[t][1]).powi(2)).sqrt();
        }
        best = best.min(total / gt.len() as f64);
    }
    best
}

fn ref_hamming(p: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let flat: Vec<(f64, f64)> = p.iter().flatten().copied().zip(y.iter().flatten().copied()).collect();
    flat.iter().filter(|(a, b)| (*a >= 0.5) != (*b == 1.0)).count() as f64 / flat.len() as f64
}

fn ref_weighted_f1(p: &[Vec<f64>], y: &[Vec<f64>], multilabel: bool) -> f64 {
    let dim = y[0].len();
    let pick = |v: &Vec<f64>, c: usize| -> bool {
        if multilabel {
            v[c] >= 0.5
        } else {
            // first index of the maximum
            let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            v.iter().position(|x| *x == m) == Some(c)
        }
    };
    let pick_true = |v: &Vec<f64>, c: usize| if multilabel { v[c] == 1.0 } else { pick(v, c) };
    let (mut num, mut den) = (0.0, 0.0);
    for c in 0..dim {
        let pred: Vec<bool> = p.iter().map(|v| pick(v, c)).collect();
        let truth: Vec<bool> = y.iter().map(|v| pick_true(v, c)).collect();
        let tp = pred.iter().zip(&truth).filter(|(a, b)| **a && **b).count() as f64;
        let pp = pred.iter().filter(|a| **a).count() as f64;
        let support = truth.iter().filter(|a| **a).count() as f64;
        let precision = if pp > 0.0 { tp / pp } else { 0.0 };
        let recall = if support > 0.0 { tp / support } else { 0.0 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        num += f1 * support;
        den += support;
    }
    if den == 0.0 {
        let any = multilabel && p.iter().flatten().any(|v| *v >= 0.5);
        return if any { 0.0 } else { 100.0 };
    }
    100.0 * num / den
}

#[test]
fn criterion_2_loss_and_metric_oracles() {
    let _serial = serial();
    let t0 = Instant::now();
    let mut r = rng(2024);
    let mut worst = [0.0f64; 4];
    for _ in 0..100 {
        let c = r.random_range(1..6);
        let n = r.random_range(1..12);
        let p: Vec<f64> = (0..c).map(|_| r.random_range(0.01..0.99)).collect();
        let y: Vec<f64> = (0..c).map(|_| if r.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let w: Vec<f64> = (0..c).map(|_| r.random_range(0.1..5.0)).collect();
        worst[0] = worst[0].max((wbce(&p, &y, &w) - ref_wbce(&p, &y, &w)).abs());

        let m = r.random_range(1..10);
        let q = r.random_range(1..5);
        let modes: Vec<Vec<[f64; 2]>> =
            (0..q).map(|_| (0..m).map(|_| [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)]).collect()).collect();
        let gt: Vec<[f64; 2]> = (0..m).map(|_| [r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)]).collect();
        worst[1] = worst[1].max((mon_ade(&modes, &gt) - ref_mon_ade(&modes, &gt)).abs());

        let probs: Vec<Vec<f64>> = (0..n).map(|_| (0..c).map(|_| r.random::<f64>()).collect()).collect();
        let multi: Vec<Vec<f64>> =
            (0..n).map(|_| (0..c).map(|_| if r.random_bool(0.3) { 1.0 } else { 0.0 }).collect()).collect();
        let onehot: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let k = r.random_range(0..c);
                (0..c).map(|j| if j == k { 1.0 } else { 0.0 }).collect()
            })
            .collect();
        worst[2] = worst[2].max((hamming_loss(&probs, &multi, 0.5) - ref_hamming(&probs, &multi)).abs());
        worst[3] = worst[3]
            .max((weighted_f1(&probs, &multi, true) - ref_weighted_f1(&probs, &multi, true)).abs())
            .max((weighted_f1(&probs, &onehot, false) - ref_weighted_f1(&probs, &onehot, false)).abs());
    }
    let elapsed = t0.elapsed();
    report(
        2,
        "wbce, mon_ade, hamming and weighted F1 against brute force",
        worst.iter().all(|e| *e <= 1e-9) && elapsed < Duration::from_secs(30),
        format!("max abs diff wbce {:.1e} mon_ade {:.1e} hamming {:.1e} f1 {:.1e}", worst[0], worst[1], worst[2], worst[3]),
        elapsed,
    );
}

#[test]
fn criterion_3_generator_fidelity() {
    let _serial = serial();
    let t0 = Instant::now();
    let cfg = UrbanDatasetConfig { num: 5000, gamma: 0.0, labeled: 5000, p: 5, seed: 31, filters: Default::default() };
    let (samples, _) = gen_dataset(&cfg).unwrap();
    let agree = samples
        .iter()
        .filter(|s| {
            let want = label_action(s.scenarios.last().unwrap().label.unwrap());
            s.teacher == Some(TeacherLabel::Action(want))
        })
        .count();

    let f = ManeuverFilterParams::default();
    let mut s = sample_sequence(SkillVector2::new(0.49, 0.05).unwrap(), 5, 3, &f).unwrap();
    s.scenarios[4] = gen_scenario(BehaviorLabel::Aggressive, 1, &f).unwrap();
    let worked = (0..20).all(|k| assign_teacher_action(&s, 1.0, k).unwrap() == UrbanAction::NoOp);

    let alpha = 0.3;
    let n = 10_000;
    let sv = SkillVector2::new(alpha, 0.2).unwrap();
    let mean_nc = (0..n).map(|k| sample_sequence(sv, 5, 1000 + k, &f).unwrap().skill_gt[0]).sum::<f64>() / n as f64;
    let sigma = (5.0 * alpha * (1.0 - alpha) / n as f64).sqrt();
    let z = (mean_nc - 5.0 * alpha).abs() / sigma;

    let elapsed = t0.elapsed();
    report(
        3,
        "urban generator fidelity",
        agree == 5000 && worked && z <= 3.0 && elapsed < Duration::from_secs(300),
        format!(
            "label rule agreement {agree}/5000, worked example no_op {worked}, mean n_c {mean_nc:.4} vs {:.2} ({z:.2} sigma)",
            5.0 * alpha
        ),
        elapsed,
    );
}

#[test]
fn criterion_4_overfit_small_set() {
    let _serial = serial();
    let t0 = Instant::now();
    let (data, _) = gen_dataset(&UrbanDatasetConfig {
        num: 32,
        gamma: 0.9,
        labeled: 32,
        p: 5,
        seed: 41,
        filters: Default::default(),
    })
    .unwrap();
    let cfg = TrainConfig {
        tasks: TaskSet::A,
        max_epochs: 300,
        patience: 300,
        seed: 1,
        val_fraction: 0.03,
        stop_at_train_f1: Some(100.0),
        ..Default::default()
    };
    let out = train(&cfg, &data, &[]).unwrap();
    let last = out.log.last().unwrap();
    let elapsed = t0.elapsed();
    report(
        4,
        "tasks=A memorizes 32 labeled sequences",
        last.train_f1 >= 100.0 && out.log.len() <= 300 && elapsed < Duration::from_secs(300),
        format!("train weighted F1 {:.2} after {} epochs", last.train_f1, out.log.len()),
        elapsed,
    );
}

const MTL_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn mtl_config(tasks: TaskSet, seed: u64, max_epochs: usize) -> TrainConfig {
    TrainConfig {
        tasks,
        seed,
        batch_size: 8,
        max_epochs,
        patience: 15,
        coeffs: LossCoefficients { a1: 1.0, a2: 0.1, a3: 1.0 },
        model: Some(small_model(TaskKind::Urban, 16)),
        ..Default::default()
    }
}

#[test]
fn criterion_5_multitask_trend() {
    let _serial = serial();
    let t0 = Instant::now();
    let gen = |num, labeled, seed| {
        gen_dataset(&UrbanDatasetConfig { num, gamma: 0.9, labeled, p: 5, seed, filters: Default::default() }).unwrap().0
    };
    let labeled = gen(200, 200, 100);
    let unlabeled = gen(5000, 0, 200);
    let test = gen(1000, 1000, 300);
    let f1 = |cfg: &TrainConfig, unl: &[SequenceSample]| {
        let out = train(cfg, &labeled, unl).unwrap();
        let f = evaluate(&out.checkpoint, &test).unwrap().teacher.unwrap().weighted_f1;
        println!("  {} with {} unlabeled, seed {}: held-out F1 {f:.2}", cfg.tasks.name(), unl.len(), cfg.seed);
        f
    };
    let mut a = Vec::new();
    let mut ast0 = Vec::new();
    let mut ast = Vec::new();
    for seed in MTL_SEEDS {
        a.push(f1(&mtl_config(TaskSet::A, seed, 60), &[]));
        ast0.push(f1(&mtl_config(TaskSet::AST, seed, 60), &[]));
        ast.push(f1(&mtl_config(TaskSet::AST, seed, MTL_EPOCHS_WITH_POOL), &unlabeled));
    }
    let (ma, sa) = mean_std(&a);
    let (m0, s0) = mean_std(&ast0);
    let (m5, s5) = mean_std(&ast);
    let elapsed = t0.elapsed();
    report(
        5,
        "multi-task trend",
        m5 - ma > 0.0 && m5 >= m0 && elapsed < Duration::from_secs(45 * 60),
        format!("A {ma:.2}±{sa:.2}, AST@0 {m0:.2}±{s0:.2}, AST@5000 {m5:.2}±{s5:.2}"),
        elapsed,
    );
}

const MTL_EPOCHS_WITH_POOL: usize = 12;

#[test]
fn criterion_6_track_learnability() {
    let _serial = serial();
    let t0 = Instant::now();
    let track = with_racing_line(
        &builtin_track("circuit").unwrap(),
        &RacelineSolverConfig::default(),
        &SpeedLimits::default(),
        2.0,
    )
    .unwrap();
    let gen = |seed| {
        let cfg = TrackDatasetConfig {
            roster: default_roster(10, seed),
            laps: 3.0,
            labeled_fraction: 1.0,
            seed,
            oracle: Default::default(),
        };
        gen_track_dataset(&track, &cfg).unwrap().0
    };
    let train_set = gen(61);
    let test_set = gen(62);
    let cfg = TrainConfig {
        tasks: TaskSet::AST,
        seed: 1,
        max_epochs: TRACK_EPOCHS,
        patience: 10,
        coeffs: LossCoefficients { a1: 1.0, a2: 0.1, a3: 1.0 },
        model: Some(small_model(TaskKind::Track, TRACK_D)),
        ..Default::default()
    };
    let out = train(&cfg, &train_set, &[]).unwrap();
    let f1 = evaluate(&out.checkpoint, &test_set).unwrap().teacher.unwrap().weighted_f1;
    let labels = |s: &[SequenceSample]| s.iter().filter_map(|x| x.teacher_target()).collect::<Vec<_>>();
    let baseline = frequency_baseline_f1(&labels(&train_set), &labels(&test_set), true, 7);
    let elapsed = t0.elapsed();
    report(
        6,
        "track model beats the frequency baseline",
        f1 >= 80.0 && f1 - baseline >= 20.0 && elapsed < Duration::from_secs(20 * 60),
        format!("held-out F1 {f1:.2} vs baseline {baseline:.2} on {} windows", test_set.len()),
        elapsed,
    );
}

const TRACK_EPOCHS: usize = 40;
const TRACK_D: usize = 16;

#[test]
fn criterion_7_golden_replay() {
    let _serial = serial();
    let t0 = Instant::now();
    let teacher = common::teacher();
    let policy = common::policy();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        let frames = common::biased_stream(1.3, 17);
        std::fs::write(common::data("replay.jsonl"), frames.join("\n") + "\n").unwrap();
        let out = replay(teacher.clone(), policy, frames.iter().map(String::as_str));
        std::fs::write(common::data("replay.golden"), out.join("\n") + "\n").unwrap();
    }
    let frames = common::read_lines("replay.jsonl");
    let golden = common::read_lines("replay.golden");

    let mut conn = Connection::new(teacher, policy);
    let mut out = Vec::new();
    let mut worst = Duration::ZERO;
    for f in &frames {
        let t = Instant::now();
        let (msgs, _) = conn.handle(f);
        worst = worst.max(t.elapsed());
        out.extend(msgs.iter().map(ServerMsg::to_text));
    }
    let cues: Vec<(f64, f64)> = out
        .iter()
        .filter_map(|l| match serde_json::from_str(l).unwrap() {
            ServerMsg::Cue { prob, t_emit, .. } => Some((prob, t_emit)),
            _ => None,
        })
        .collect();
    let above = cues.iter().all(|(p, _)| *p >= policy.tau);
    // timestamps are decimal seconds, so allow float slack at the boundary
    let spaced = cues.windows(2).all(|w| w[1].1 - w[0].1 >= policy.cooldown - 1e-6);
    let identical = out == golden;
    let elapsed = t0.elapsed();
    report(
        7,
        "golden replay, cue policy and latency",
        identical && !cues.is_empty() && above && spaced && worst < Duration::from_millis(50),
        format!(
            "{} frames, byte-identical {identical}, {} cues (threshold ok {above}, spacing ok {spaced}), worst step {:.2} ms",
            frames.len(),
            cues.len(),
            worst.as_secs_f64() * 1e3
        ),
        elapsed,
    );
}

#[test]
fn criterion_8_raceline_solver() {
    let _serial = serial();
    let t0 = Instant::now();
    let cfg = RacelineSolverConfig::default();
    let mut monotone = true;
    let mut feasible = true;
    let mut spread = 0.0;
    let mut iters = 0;
    for name in ["circle", "circuit", "oval"] {
        let track = builtin_track(name).unwrap();
        let bound: Vec<f64> = track.half_width.iter().map(|w| w - cfg.margin).collect();
        let mut prev = f64::INFINITY;
        let sol = compute_racing_line_observed(&track, &cfg, |_, lambda, obj| {
            monotone &= obj <= prev;
            prev = obj;
            feasible &= lambda.iter().zip(&bound).all(|(l, b)| l.abs() <= b + 1e-12);
        })
        .unwrap();
        monotone &= sol.objective_trace.windows(2).all(|w| w[1] <= w[0]);
        iters += sol.iterations;
        if name == "circle" {
            let hi = sol.lambda.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = sol.lambda.iter().cloned().fold(f64::INFINITY, f64::min);
            spread = hi - lo;
        }
    }
    let elapsed = t0.elapsed();
    report(
        8,
        "racing line solver",
        monotone && feasible && spread < 1e-3 && elapsed < Duration::from_secs(60),
        format!("objective non-increasing {monotone}, bounds held {feasible}, circle spread {spread:.2e}, {iters} iterations"),
        elapsed,
    );
}
