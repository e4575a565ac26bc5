//! Subcommand definitions and their implementations.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use drivecoach::checkpoint::Checkpoint;
use drivecoach::dataset::{load_dataset, save_dataset};
use drivecoach::datagen::track::{default_roster, gen_track_dataset, OracleConfig, TrackDatasetConfig};
use drivecoach::datagen::urban::{gen_dataset, UrbanDatasetConfig};
use drivecoach::geom::{builtin_track, TrackModel, BUILTIN_TRACKS};
use drivecoach::io::{to_jsonl, write_atomic};
use drivecoach::losses::{LossCoefficients, TaskSet};
use drivecoach::model::ModelConfig;
use drivecoach::raceline::{compute_racing_line, speed_profile, RacelineSolverConfig, SpeedLimits};
use drivecoach::serve::{CuePolicy, Teacher};
use drivecoach::train::{ablation_grid, evaluate, train_from_paths, Precision, TrainConfig};
use drivecoach::Error;
use serde::{Deserialize, Serialize};

use crate::merge_config;

#[derive(Debug, Parser)]
#[command(name = "drivecoach", version, about = "Driving-coach data generation, training and live cue serving")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate merge-scenario sequences with skill-aware teacher labels.
    GenUrban(GenUrbanArgs),
    /// Simulate scripted students on a track and label their windows.
    GenTrack(GenTrackArgs),
    /// Solve the minimum-curvature racing line and speed profile of a track.
    Raceline(RacelineArgs),
    /// Train a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train every task set, seed and unlabeled size and report held-out F1.
    Ablate(AblateArgs),
    /// Serve live cues over a websocket.
    Serve(ServeArgs),
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct GenUrbanArgs {
    /// Number of sequences [default: 1000]
    #[arg(long)]
    pub num: Option<usize>,
    /// Probability that the teacher uses the skill-aware rule [default: 0.9]
    #[arg(long)]
    pub gamma: Option<f64>,
    /// How many sequences keep their teacher label [default: all]
    #[arg(long)]
    pub labeled: Option<usize>,
    /// Scenarios per sequence [default: 5]
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON file supplying any of these flags
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct GenTrackArgs {
    /// Built-in track name or track JSON file [default: circuit]
    #[arg(long)]
    pub track: Option<String>,
    /// Number of scripted students [default: 10]
    #[arg(long)]
    pub students: Option<usize>,
    /// Laps per student [default: 3]
    #[arg(long)]
    pub laps: Option<f64>,
    /// Fraction of windows that keep their cue labels [default: 1]
    #[arg(long)]
    pub labeled_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct RacelineArgs {
    /// Built-in track name or track JSON file
    #[arg(long)]
    pub track: Option<String>,
    /// Output track JSON with the racing line and speeds
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Centerline resampling spacing in meters [default: 2]
    #[arg(long)]
    pub spacing: Option<f64>,
    /// Distance kept from the edges in meters [default: 1]
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

/// Optimizer and model settings shared by `train` and `ablate`.
#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainOpts {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Teacher loss weight
    #[arg(long)]
    pub a1: Option<f64>,
    /// Trajectory loss weight
    #[arg(long)]
    pub a2: Option<f64>,
    /// Skill loss weight
    #[arg(long)]
    pub a3: Option<f64>,
    /// f32 or f64
    #[arg(long)]
    pub precision: Option<String>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub enc_layers: Option<usize>,
    #[arg(long)]
    pub head_hidden: Option<usize>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainArgs {
    /// A, AT, AS or AST [default: AST]
    #[arg(long)]
    pub tasks: Option<String>,
    /// Dataset with the labeled sequences
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Extra unlabeled sequences
    #[arg(long)]
    pub unlabeled: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-epoch JSONL log [default: OUT.log.jsonl]
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub opts: TrainOpts,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Write the metrics report here instead of stdout
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct AblateArgs {
    /// Labeled training sequences
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Pool of unlabeled sequences; subsets are its prefixes
    #[arg(long)]
    pub unlabeled: Option<PathBuf>,
    /// Held-out labeled sequences
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Comma-separated task sets [default: A,AT,AS,AST]
    #[arg(long, value_delimiter = ',')]
    pub tasks: Option<Vec<String>>,
    /// Comma-separated seeds [default: 1,2,3,4,5]
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Comma-separated unlabeled subset sizes [default: 0 and the pool size]
    #[arg(long, value_delimiter = ',')]
    pub unlabeled_sizes: Option<Vec<usize>>,
    /// JSON results table
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub opts: TrainOpts,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Track JSON with a racing line, or a built-in track name
    #[arg(long)]
    pub track: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    /// Bind address [default: 127.0.0.1]
    #[arg(long)]
    pub host: Option<String>,
    /// Cue probability threshold [default: 0.5]
    #[arg(long)]
    pub tau: Option<f64>,
    /// Seconds between cues [default: 4]
    #[arg(long)]
    pub cooldown: Option<f64>,
    /// Model evaluations per second [default: 2]
    #[arg(long)]
    pub eval_rate: Option<f64>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| Error::config(format!("missing required --{flag}")).into())
}

/// A built-in track name or a path to track JSON.
pub fn load_track(track: &str) -> Result<TrackModel> {
    if BUILTIN_TRACKS.contains(&track) && !Path::new(track).exists() {
        return Ok(builtin_track(track)?);
    }
    TrackModel::load(track).with_context(|| format!("loading track {track}"))
}

/// Built-in tracks get their racing line computed on the fly.
fn load_raced_track(track: &str) -> Result<TrackModel> {
    let t = load_track(track)?;
    if t.raceline.is_some() {
        return Ok(t);
    }
    log::info!("track {:?} has no racing line; computing one", t.name);
    Ok(drivecoach::raceline::with_racing_line(
        &t,
        &RacelineSolverConfig::default(),
        &SpeedLimits::default(),
        2.0,
    )?)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    match cli.command {
        Command::GenUrban(a) => {
            let a = merge_config(&a, a.config.as_deref(), "gen-urban")?;
            gen_urban(a)
        }
        Command::GenTrack(a) => {
            let a = merge_config(&a, a.config.as_deref(), "gen-track")?;
            gen_track(a)
        }
        Command::Raceline(a) => {
            let a = merge_config(&a, a.config.as_deref(), "raceline")?;
            raceline(a)
        }
        Command::Train(a) => {
            let a = merge_config(&a, a.config.as_deref(), "train")?;
            train_cmd(a)
        }
        Command::Eval(a) => {
            let a = merge_config(&a, a.config.as_deref(), "eval")?;
            eval_cmd(a)
        }
        Command::Ablate(a) => {
            let a = merge_config(&a, a.config.as_deref(), "ablate")?;
            ablate(a)
        }
        Command::Serve(a) => {
            let a = merge_config(&a, a.config.as_deref(), "serve")?;
            serve(a)
        }
    }
}

fn gen_urban(a: GenUrbanArgs) -> Result<()> {
    let out = required(a.out, "out")?;
    let num = a.num.unwrap_or(1000);
    let cfg = UrbanDatasetConfig {
        num,
        gamma: a.gamma.unwrap_or(0.9),
        labeled: a.labeled.unwrap_or(num),
        p: a.p.unwrap_or(5),
        seed: a.seed.unwrap_or(0),
        filters: Default::default(),
    };
    let (samples, meta) = gen_dataset(&cfg)?;
    save_dataset(&out, &samples, &meta)?;
    log::info!("wrote {} sequences ({} labeled) to {}", meta.count, meta.labeled, out.display());
    Ok(())
}

fn gen_track(a: GenTrackArgs) -> Result<()> {
    let out = required(a.out, "out")?;
    let track = load_raced_track(a.track.as_deref().unwrap_or("circuit"))?;
    let seed = a.seed.unwrap_or(0);
    let cfg = TrackDatasetConfig {
        roster: default_roster(a.students.unwrap_or(10), seed),
        laps: a.laps.unwrap_or(3.0),
        labeled_fraction: a.labeled_fraction.unwrap_or(1.0),
        seed,
        oracle: OracleConfig::default(),
    };
    let (samples, meta) = gen_track_dataset(&track, &cfg)?;
    save_dataset(&out, &samples, &meta)?;
    log::info!(
        "wrote {} windows ({} labeled, {:.1}% with a cue) to {}",
        meta.count,
        meta.labeled,
        100.0 * meta.active_fraction.unwrap_or(0.0),
        out.display()
    );
    Ok(())
}

fn raceline(a: RacelineArgs) -> Result<()> {
    let out = required(a.out, "out")?;
    let track = load_track(&required(a.track, "track")?)?;
    let mut cfg = RacelineSolverConfig::default();
    if let Some(m) = a.margin {
        cfg.margin = m;
    }
    if let Some(n) = a.max_iters {
        cfg.max_iters = n;
    }
    let mut t = track.resampled(a.spacing.unwrap_or(2.0))?;
    let sol = compute_racing_line(&t, &cfg)?;
    let speeds = speed_profile(&sol.points, t.closed, &SpeedLimits::default())?;
    log::info!(
        "racing line after {} iterations: objective {:.6} -> {:.6}",
        sol.iterations,
        sol.objective_trace.first().copied().unwrap_or(f64::NAN),
        sol.objective_trace.last().copied().unwrap_or(f64::NAN)
    );
    t.raceline = Some(sol.points);
    t.race_speeds = Some(speeds);
    t.save(&out)?;
    Ok(())
}

fn train_config(opts: &TrainOpts, tasks: TaskSet, seed: u64) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let precision = match opts.precision.as_deref() {
        None | Some("f32") => Precision::F32,
        Some("f64") => Precision::F64,
        Some(p) => return Err(Error::config(format!("unknown precision {p:?}; expected f32 or f64")).into()),
    };
    let model = if opts.d_model.is_some() || opts.n_heads.is_some() || opts.enc_layers.is_some() || opts.head_hidden.is_some()
    {
        // dataset-dependent sizes are filled in at training time
        let mut m = ModelConfig::for_task(drivecoach::dataset::TaskKind::Urban);
        m.d_model = opts.d_model.unwrap_or(m.d_model);
        m.n_heads = opts.n_heads.unwrap_or(m.n_heads);
        m.enc_layers = opts.enc_layers.unwrap_or(m.enc_layers);
        m.head_hidden = opts.head_hidden.unwrap_or(m.head_hidden);
        Some(m)
    } else {
        None
    };
    let cfg = TrainConfig {
        tasks,
        lr: opts.lr.unwrap_or(d.lr),
        batch_size: opts.batch_size.unwrap_or(d.batch_size),
        max_epochs: opts.max_epochs.unwrap_or(d.max_epochs),
        patience: opts.patience.unwrap_or(d.patience),
        seed,
        coeffs: LossCoefficients {
            a1: opts.a1.unwrap_or(d.coeffs.a1),
            a2: opts.a2.unwrap_or(d.coeffs.a2),
            a3: opts.a3.unwrap_or(d.coeffs.a3),
        },
        labeled_path: None,
        unlabeled_path: None,
        val_fraction: opts.val_fraction.unwrap_or(d.val_fraction),
        precision,
        model,
        stop_at_train_f1: None,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let out = required(a.out, "out")?;
    let tasks = TaskSet::parse(a.tasks.as_deref().unwrap_or("AST"))?;
    let mut cfg = train_config(&a.opts, tasks, a.seed.unwrap_or(0))?;
    cfg.labeled_path = Some(required(a.data, "data")?);
    cfg.unlabeled_path = a.unlabeled;
    let outcome = train_from_paths(&cfg)?;
    let log_path = a.log.unwrap_or_else(|| {
        let mut p = out.clone().into_os_string();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    write_atomic(&log_path, &to_jsonl(&outcome.log)?)?;
    outcome.checkpoint.save(&out)?;
    let m = &outcome.checkpoint.meta;
    log::info!(
        "kept epoch {} of {} (validation weighted F1 {:.2}); wrote {}",
        m.epoch,
        m.last_epoch,
        m.best_val_f1,
        out.display()
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&required(a.ckpt, "ckpt")?)?;
    let data = load_dataset(&required(a.data, "data")?)?;
    let report = evaluate(&ckpt, &data)?;
    match a.report {
        Some(p) => write_json(&p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let out = required(a.out, "out")?;
    let labeled = load_dataset(&required(a.data, "data")?)?;
    let test = load_dataset(&required(a.test, "test")?)?;
    let unlabeled = match &a.unlabeled {
        Some(p) => load_dataset(p)?,
        None => Vec::new(),
    };
    let tasks = a
        .tasks
        .unwrap_or_else(|| ["A", "AT", "AS", "AST"].map(String::from).to_vec())
        .iter()
        .map(|t| TaskSet::parse(t))
        .collect::<drivecoach::Result<Vec<_>>>()?;
    let seeds = a.seeds.unwrap_or_else(|| vec![1, 2, 3, 4, 5]);
    let sizes = a.unlabeled_sizes.unwrap_or_else(|| {
        let mut v = vec![0];
        if !unlabeled.is_empty() {
            v.push(unlabeled.len());
        }
        v
    });
    let base = train_config(&a.opts, TaskSet::A, 0)?;
    let rows = ablation_grid(&base, &tasks, &seeds, &sizes, &labeled, &unlabeled, &test)?;
    println!("{:>8} {:>10} {:>5} {:>8} {:>7} {:>6}", "gamma", "unlabeled", "task", "mean_f1", "std_f1", "seeds");
    for r in &rows {
        println!(
            "{:>8} {:>10} {:>5} {:>8.2} {:>7.2} {:>6}",
            r.gamma.map(|g| format!("{g}")).unwrap_or_else(|| "-".into()),
            r.unlabeled_size,
            r.task.name(),
            r.mean_f1,
            r.std_f1,
            r.n_seeds
        );
    }
    write_json(&out, &rows)
}

fn serve(a: ServeArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&required(a.ckpt, "ckpt")?)?;
    let track = load_raced_track(&required(a.track, "track")?)?;
    let defaults = CuePolicy::default();
    let policy = CuePolicy {
        tau: a.tau.unwrap_or(defaults.tau),
        cooldown: a.cooldown.unwrap_or(defaults.cooldown),
        eval_rate: a.eval_rate.unwrap_or(defaults.eval_rate),
    };
    policy.validate()?;
    let teacher = Arc::new(Teacher::new(ckpt, track)?);
    let host = a.host.unwrap_or_else(|| "127.0.0.1".into());
    let addr: std::net::SocketAddr = format!("{host}:{}", a.port.unwrap_or(8765))
        .parse()
        .map_err(|e| Error::config(format!("bad address: {e}")))?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(crate::server::serve(teacher, policy, addr, |bound| {
        log::info!("serving cues on ws://{bound}/ws (health on http://{bound}/healthz)");
    }))?;
    Ok(())
}
