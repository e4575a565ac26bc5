//! Multi-task training, evaluation and the task/unlabeled-size ablation.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, SkillStats, TrainMeta};
use crate::dataset::{load_dataset, SequenceSample};
use crate::error::{Error, Result};
use crate::losses::{class_weights, mon_ade, predict_pose, total_loss, LossCoefficients, TaskSet, Targets};
use crate::metrics::{classification_report, weighted_f1, ClassificationReport};
use crate::model::{Model, ModelConfig, SampleInput};
use crate::nn::{Grads, ParamStore, Scalar};
use crate::rng::{derive, rng};

const STREAM_SPLIT: u64 = 40;
const STREAM_SHUFFLE: u64 = 41;
const STREAM_INIT: u64 = 42;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub tasks: TaskSet,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub coeffs: LossCoefficients,
    pub labeled_path: Option<PathBuf>,
    pub unlabeled_path: Option<PathBuf>,
    pub val_fraction: f64,
    pub precision: Precision,
    /// Model sizes; defaults for the dataset kind when absent.
    pub model: Option<ModelConfig>,
    /// Stop as soon as the training-split weighted F1 reaches this value.
    pub stop_at_train_f1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tasks: TaskSet::AST,
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            coeffs: LossCoefficients::default(),
            labeled_path: None,
            unlabeled_path: None,
            val_fraction: 0.15,
            precision: Precision::F32,
            model: None,
            stop_at_train_f1: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 {
            return Err(Error::config("patience must be at least 1"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction <= 0.5) {
            return Err(Error::config(format!("val_fraction {} outside (0, 0.5]", self.val_fraction)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch_size and max_epochs must be positive"));
        }
        self.coeffs.validate()?;
        if let Some(m) = &self.model {
            m.validate()?;
        }
        Ok(())
    }
}

/// One JSONL record of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_teacher: f64,
    pub train_trajectory: f64,
    pub train_skill: f64,
    pub train_f1: f64,
    pub val_f1: f64,
    pub val_loss: f64,
    pub best_epoch: usize,
    pub labeled_batches: usize,
    pub unlabeled_batches: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
}

struct AdamW<T> {
    m: Grads<T>,
    v: Grads<T>,
    t: i32,
    lr: f64,
}

impl<T: Scalar> AdamW<T> {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    const WD: f64 = 0.01;

    fn new(ps: &ParamStore<T>, lr: f64) -> Self {
        AdamW { m: ps.zero_grads(), v: ps.zero_grads(), t: 0, lr }
    }

    fn step(&mut self, ps: &mut ParamStore<T>, g: &Grads<T>) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let (b1, b2) = (T::of(Self::B1), T::of(Self::B2));
        let (one_b1, one_b2) = (T::of(1.0 - Self::B1), T::of(1.0 - Self::B2));
        let (lr, eps, wd) = (T::of(self.lr), T::of(Self::EPS), T::of(Self::WD));
        let (c1, c2) = (T::of(c1), T::of(c2));
        for (i, p) in ps.values_mut().iter_mut().enumerate() {
            let (gm, mm, vm) = (&g.0[i].data, &mut self.m.0[i].data, &mut self.v.0[i].data);
            for (k, w) in p.data.iter_mut().enumerate() {
                let gk = gm[k];
                mm[k] = b1 * mm[k] + one_b1 * gk;
                vm[k] = b2 * vm[k] + one_b2 * gk * gk;
                let mh = mm[k] / c1;
                let vh = vm[k] / c2;
                *w = *w - lr * (mh / (vh.sqrt() + eps) + wd * *w);
            }
        }
    }
}

/// SHA-256 over the samples' canonical JSON lines.
pub fn dataset_hash(samples: &[SequenceSample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(serde_json::to_vec(&s.to_json()).expect("sample serializes"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

impl SkillStats {
    pub fn fit(samples: &[&SequenceSample], dim: usize) -> Self {
        let n = samples.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(&s.skill_gt) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for s in samples {
            for ((a, v), m) in var.iter_mut().zip(&s.skill_gt).zip(&mean) {
                *a += (v - m).powi(2) / n;
            }
        }
        let std = var.iter().map(|v| if v.sqrt() > 1e-9 { v.sqrt() } else { 1.0 }).collect();
        SkillStats { mean, std }
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect()
    }
}

fn targets_for(s: &SequenceSample, tasks: TaskSet, labeled: bool, stats: &SkillStats) -> Targets {
    Targets {
        teacher: if labeled { s.teacher_target() } else { None },
        future: if tasks.uses_trajectory() {
            s.scenarios.last().and_then(|sc| sc.future.clone())
        } else {
            None
        },
        skill: tasks.uses_skill().then(|| stats.normalize(&s.skill_gt)),
    }
}

/// Model sizes implied by a dataset, starting from `base` when given.
pub fn model_config_for(samples: &[SequenceSample], base: Option<&ModelConfig>) -> Result<ModelConfig> {
    let first = samples.first().ok_or_else(|| Error::data("empty dataset"))?;
    let mut cfg = base.cloned().unwrap_or_else(|| ModelConfig::for_task(first.task));
    cfg.action_dim = first.task.action_dim();
    cfg.n_steps = first.scenarios[0].past.len();
    if let Some(m) = first.future_len() {
        cfg.m_steps = m;
    }
    cfg.skill_dim = first.skill_gt.len().max(1);
    cfg.p_max = cfg.p_max.max(first.scenarios.len());
    cfg.validate()?;
    Ok(cfg)
}

fn check_task_labels(tasks: TaskSet, samples: &[&SequenceSample], dim: usize) -> Result<()> {
    if tasks.uses_skill() && samples.iter().any(|s| s.skill_gt.len() != dim || s.skill_gt.is_empty()) {
        return Err(Error::config(format!("tasks {} need skill labels on every sample", tasks.name())));
    }
    if tasks.uses_trajectory() && samples.iter().any(|s| s.future_len().is_none()) {
        return Err(Error::config(format!("tasks {} need future trajectories on every sample", tasks.name())));
    }
    Ok(())
}

/// Deterministic train/validation split of the labeled samples.
pub fn split_labeled(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng(derive(seed, STREAM_SPLIT, 0)));
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1.min(n), n.saturating_sub(1).max(1.min(n)));
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Labeled/unlabeled order of one epoch's batches, interleaved in proportion.
pub fn batch_schedule(n_labeled: usize, n_unlabeled: usize) -> Vec<bool> {
    let total = n_labeled + n_unlabeled;
    (0..total).map(|i| ((i + 1) * n_labeled) / total > (i * n_labeled) / total).collect()
}

struct Prepared<T> {
    inputs: Vec<SampleInput<T>>,
    targets: Vec<Targets>,
    labels: Vec<Vec<f64>>,
}

fn prepare_set<T: Scalar>(
    model: &Model,
    samples: &[&SequenceSample],
    tasks: TaskSet,
    labeled: bool,
    stats: &SkillStats,
) -> Result<Prepared<T>> {
    Ok(Prepared {
        inputs: samples.iter().map(|s| model.prepare(s)).collect::<Result<_>>()?,
        targets: samples.iter().map(|s| targets_for(s, tasks, labeled, stats)).collect(),
        labels: samples.iter().filter_map(|s| s.teacher_target()).collect(),
    })
}

fn teacher_probs<T: Scalar>(model: &Model, ps: &ParamStore<T>, inputs: &[SampleInput<T>]) -> Result<Vec<Vec<f64>>> {
    Ok(model.forward(ps, inputs)?.iter().map(|o| o.teacher_probs()).collect())
}

/// Teacher probabilities and total loss of a prepared set in one pass.
fn eval_set<T: Scalar>(
    model: &Model,
    ps: &ParamStore<T>,
    set: &Prepared<T>,
    coeffs: &LossCoefficients,
    weights: &[f64],
) -> Result<(Vec<Vec<f64>>, f64)> {
    let outs = model.forward(ps, &set.inputs)?;
    let loss = total_loss(&outs, &set.targets, coeffs, weights)?.0.total;
    Ok((outs.iter().map(|o| o.teacher_probs()).collect(), loss))
}

/// Trains on in-memory data. Samples in `labeled` without a teacher label
/// join the unlabeled pool; every sample of `unlabeled` is treated as
/// unlabeled.
pub fn train(cfg: &TrainConfig, labeled: &[SequenceSample], unlabeled: &[SequenceSample]) -> Result<TrainOutcome> {
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, labeled, unlabeled),
        Precision::F64 => train_typed::<f64>(cfg, labeled, unlabeled),
    }
}

/// Loads the configured dataset files and trains.
pub fn train_from_paths(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let path = cfg.labeled_path.as_ref().ok_or_else(|| Error::config("no labeled dataset path"))?;
    let labeled = load_dataset(path)?;
    let unlabeled = match &cfg.unlabeled_path {
        Some(p) => load_dataset(p)?,
        None => Vec::new(),
    };
    train(cfg, &labeled, &unlabeled)
}

fn train_typed<T: Scalar>(cfg: &TrainConfig, all: &[SequenceSample], extra: &[SequenceSample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let task = all.first().ok_or_else(|| Error::data("labeled dataset is empty"))?.task;
    let mcfg = model_config_for(all, cfg.model.as_ref())?;
    let model = Model::new(mcfg.clone())?;
    let multilabel = task.is_multilabel();

    let lab: Vec<&SequenceSample> = all.iter().filter(|s| s.is_labeled()).collect();
    if lab.len() < 2 {
        return Err(Error::data(format!("need at least 2 labeled samples, found {}", lab.len())));
    }
    let mut unl: Vec<&SequenceSample> = all.iter().filter(|s| !s.is_labeled()).chain(extra.iter()).collect();
    if cfg.tasks == TaskSet::A && !unl.is_empty() {
        log::warn!("tasks A uses no unlabeled data; ignoring {} unlabeled samples", unl.len());
        unl.clear();
    }
    for s in &unl {
        if s.task != task {
            return Err(Error::data(format!("unlabeled sample {} is {:?} data, labeled set is {:?}", s.id, s.task, task)));
        }
    }
    let everyone: Vec<&SequenceSample> = lab.iter().chain(unl.iter()).copied().collect();
    check_task_labels(cfg.tasks, &everyone, mcfg.skill_dim)?;

    let (tr_idx, va_idx) = split_labeled(lab.len(), cfg.val_fraction, cfg.seed);
    let tr: Vec<&SequenceSample> = tr_idx.iter().map(|i| lab[*i]).collect();
    let va: Vec<&SequenceSample> = va_idx.iter().map(|i| lab[*i]).collect();
    let stats_pool: Vec<&SequenceSample> = tr.iter().chain(unl.iter()).copied().collect();
    let stats = SkillStats::fit(&stats_pool, mcfg.skill_dim);
    let train_targets: Vec<Vec<f64>> = tr.iter().filter_map(|s| s.teacher_target()).collect();
    let (weights, zero_pos) = class_weights(&train_targets);
    if !zero_pos.is_empty() {
        log::warn!("categories without positive training examples: {}", zero_pos.join(", "));
    }
    let coeffs = cfg.coeffs.for_tasks(cfg.tasks);

    let tr_set = prepare_set::<T>(&model, &tr, cfg.tasks, true, &stats)?;
    let va_set = prepare_set::<T>(&model, &va, cfg.tasks, true, &stats)?;
    let un_set = prepare_set::<T>(&model, &unl, cfg.tasks, false, &stats)?;

    let mut ps: ParamStore<T> = model.init_params(derive(cfg.seed, STREAM_INIT, 0))?;
    let mut opt = AdamW::new(&ps, cfg.lr);
    let bs = cfg.batch_size;
    let n_lb = tr.len().div_ceil(bs);
    let n_ub = unl.len().div_ceil(bs);
    let schedule = batch_schedule(n_lb, n_ub);

    let mut best: Option<(f64, f64, usize, ParamStore<T>)> = None;
    let mut since_best = 0usize;
    let mut log = Vec::new();
    let mut last_epoch = 0;
    for epoch in 0..cfg.max_epochs {
        last_epoch = epoch;
        let mut order_l: Vec<usize> = (0..tr.len()).collect();
        let mut order_u: Vec<usize> = (0..unl.len()).collect();
        let mut r = rng(derive(cfg.seed, STREAM_SHUFFLE, epoch as u64));
        order_l.shuffle(&mut r);
        order_u.shuffle(&mut r);
        let (mut li, mut ui) = (0usize, 0usize);
        let mut sums = [0.0f64; 4];
        let mut n_batches = 0usize;
        for (b, &is_lab) in schedule.iter().enumerate() {
            let (set, ids) = if is_lab {
                let ids = &order_l[li * bs..((li + 1) * bs).min(tr.len())];
                li += 1;
                (&tr_set, ids)
            } else {
                let ids = &order_u[ui * bs..((ui + 1) * bs).min(unl.len())];
                ui += 1;
                (&un_set, ids)
            };
            let inputs: Vec<SampleInput<T>> = ids.iter().map(|i| set.inputs[*i].clone()).collect();
            let targets: Vec<Targets> = ids.iter().map(|i| set.targets[*i].clone()).collect();
            let (rep, g) = model.loss_and_grads(&ps, &inputs, &targets, &coeffs, &weights)?;
            if !rep.total.is_finite() || !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {} at epoch {epoch}, batch {b}",
                    rep.total
                )));
            }
            opt.step(&mut ps, &g);
            sums[0] += rep.total;
            sums[1] += rep.teacher;
            sums[2] += rep.trajectory;
            sums[3] += rep.skill;
            n_batches += 1;
        }
        let train_f1 = weighted_f1(&teacher_probs(&model, &ps, &tr_set.inputs)?, &tr_set.labels, multilabel);
        let (val_probs, val_loss) = eval_set(&model, &ps, &va_set, &coeffs, &weights)?;
        let val_f1 = weighted_f1(&val_probs, &va_set.labels, multilabel);
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite validation loss at epoch {epoch}")));
        }
        let improved = match &best {
            None => true,
            Some((f, l, _, _)) => val_f1 > *f || (val_f1 == *f && val_loss < *l),
        };
        if improved {
            best = Some((val_f1, val_loss, epoch, ps.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        let nb = n_batches.max(1) as f64;
        let rec = EpochRecord {
            epoch,
            train_loss: sums[0] / nb,
            train_teacher: sums[1] / nb,
            train_trajectory: sums[2] / nb,
            train_skill: sums[3] / nb,
            train_f1,
            val_f1,
            val_loss,
            best_epoch: best.as_ref().map(|b| b.2).unwrap_or(0),
            labeled_batches: n_lb,
            unlabeled_batches: n_ub,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train_f1 {train_f1:.1} val_f1 {val_f1:.1}",
            rec.train_loss
        );
        log.push(rec);
        if since_best >= cfg.patience || cfg.stop_at_train_f1.is_some_and(|f| train_f1 >= f) {
            break;
        }
    }
    let (best_f1, _, best_epoch, best_ps) = best.expect("at least one epoch ran");
    let meta = TrainMeta {
        task,
        tasks: cfg.tasks,
        seed: cfg.seed,
        epoch: best_epoch,
        last_epoch,
        best_val_f1: best_f1,
        labeled_hash: dataset_hash(all),
        unlabeled_hash: (!extra.is_empty()).then(|| dataset_hash(extra)),
        class_weights: weights,
        skill_stats: stats,
        action_set: task.action_names().iter().map(|s| s.to_string()).collect(),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(mcfg, meta, best_ps.cast())?,
        log,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub n_labeled: usize,
    /// Absent when the set has no teacher labels.
    pub teacher: Option<ClassificationReport>,
    /// Mean over samples of the best-mode average displacement.
    pub min_ade: Option<f64>,
    /// Mean squared error of the de-normalized skill prediction.
    pub skill_mse: Option<f64>,
}

fn check_schema(ckpt: &Checkpoint, samples: &[SequenceSample]) -> Result<()> {
    let m = &ckpt.model;
    for s in samples {
        let got = (s.task.action_dim(), s.scenarios.len(), s.scenarios[0].past.len(), s.future_len(), s.skill_gt.len());
        let ok = got.0 == m.action_dim
            && got.1 <= m.p_max
            && got.2 == m.n_steps
            && got.3.is_none_or(|f| f == m.m_steps)
            && (got.4 == m.skill_dim || got.4 == 0);
        if !ok {
            return Err(Error::data(format!(
                "sample {} has shape (action_dim, P, N, M, skill_dim) = {got:?}, checkpoint expects ({}, <= {}, {}, {}, {})",
                s.id, m.action_dim, m.p_max, m.n_steps, m.m_steps, m.skill_dim
            )));
        }
    }
    Ok(())
}

/// Deterministic forward pass over `samples` and the metric report.
pub fn evaluate(ckpt: &Checkpoint, samples: &[SequenceSample]) -> Result<EvalReport> {
    check_schema(ckpt, samples)?;
    let model = Model::new(ckpt.model.clone())?;
    let ps = &ckpt.params;
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    let (mut ade, mut n_ade) = (0.0, 0usize);
    let (mut mse, mut n_mse) = (0.0, 0usize);
    for s in samples {
        let inp = model.prepare::<f32>(s)?;
        let (out, _) = model.forward_sample(ps, &inp)?;
        if let Some(t) = s.teacher_target() {
            probs.push(out.teacher_probs());
            labels.push(t);
        }
        if let Some(f) = s.scenarios.last().and_then(|sc| sc.future.as_ref()) {
            let modes: Vec<Vec<_>> = out.traj.iter().map(|d| predict_pose(d)).collect();
            ade += mon_ade(&modes, f);
            n_ade += 1;
        }
        if s.skill_gt.len() == ckpt.model.skill_dim {
            let pred = ckpt.meta.skill_stats.denormalize(&out.skill);
            mse += crate::losses::skill_mse(&pred, &s.skill_gt);
            n_mse += 1;
        }
    }
    let multilabel = samples.first().map(|s| s.task.is_multilabel()).unwrap_or(false);
    let names: Vec<&str> = ckpt.meta.action_set.iter().map(|s| s.as_str()).collect();
    Ok(EvalReport {
        n: samples.len(),
        n_labeled: labels.len(),
        teacher: (!labels.is_empty()).then(|| classification_report(&probs, &labels, multilabel, &names)),
        min_ade: (n_ade > 0).then(|| ade / n_ade as f64),
        skill_mse: (n_mse > 0).then(|| mse / n_mse as f64),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub gamma: Option<f64>,
    pub unlabeled_size: usize,
    pub task: TaskSet,
    pub mean_f1: f64,
    pub std_f1: f64,
    pub n_seeds: usize,
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Trains every (unlabeled size, task, seed) combination and reports held-out
/// weighted F1 on `test`. Unlabeled subsets are prefixes of `unlabeled`.
pub fn ablation_grid(
    base: &TrainConfig,
    tasks: &[TaskSet],
    seeds: &[u64],
    unlabeled_sizes: &[usize],
    labeled: &[SequenceSample],
    unlabeled: &[SequenceSample],
    test: &[SequenceSample],
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() || tasks.is_empty() {
        return Err(Error::config("ablation needs at least one task and one seed"));
    }
    let gamma = labeled.first().and_then(|s| s.gamma);
    let mut rows = Vec::new();
    for &size in unlabeled_sizes {
        if size > unlabeled.len() {
            return Err(Error::config(format!(
                "unlabeled size {size} exceeds the {} available samples",
                unlabeled.len()
            )));
        }
        for &task in tasks {
            let mut f1s = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let cfg = TrainConfig { tasks: task, seed, ..base.clone() };
                let out = train(&cfg, labeled, &unlabeled[..size])?;
                let rep = evaluate(&out.checkpoint, test)?;
                let f1 = rep.teacher.map(|t| t.weighted_f1).ok_or_else(|| Error::data("test set has no teacher labels"))?;
                log::info!("ablation size {size} task {} seed {seed}: F1 {f1:.2}", task.name());
                f1s.push(f1);
            }
            let (mean_f1, std_f1) = mean_std(&f1s);
            rows.push(AblationRow { gamma, unlabeled_size: size, task, mean_f1, std_f1, n_seeds: seeds.len() });
        }
    }
    Ok(rows)
}
