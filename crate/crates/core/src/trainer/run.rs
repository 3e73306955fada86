//! The training loop and its run directory.
//!
//! ```text
//! <run>/config.json                      mode, config, model shapes
//! <run>/checkpoints/step-00001000.follower.ckpt
//! <run>/checkpoints/step-00001000.speaker.ckpt
//! <run>/steps.jsonl                      one StepReport per step
//! <run>/validation.jsonl                 one ValidationRecord per validation
//! <run>/best.json                        step of the best validation
//! ```
//!
//! The first checkpoint is the initial state at step `pretrain_steps`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use foam_autodiff::checkpoint;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_jsonl, write_jsonl};
use crate::metrics::Aggregate;
use crate::trainer::config::TrainConfig;
use crate::trainer::data::{AugmentPool, TrainData};
use crate::trainer::divergence::DivergenceMonitor;
use crate::trainer::eval::{evaluate, EvalContext, EvalOptions, Greedy};
use crate::trainer::modes::{StepContext, StepReport, TrainState, TrainingMode};
use crate::trainer::pretrain::speaker_eval_loss;
use crate::trainer::steps::Models;
use crate::world::Split;

pub const CONFIG_FILE: &str = "config.json";
pub const STEPS_FILE: &str = "steps.jsonl";
pub const VALIDATION_FILE: &str = "validation.jsonl";
pub const BEST_FILE: &str = "best.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSnapshot {
    pub mode: String,
    pub models: Models,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: u64,
    pub val_seen: Option<Aggregate>,
    pub val_unseen: Option<Aggregate>,
    pub speaker_val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestStep {
    pub step: u64,
    pub val_seen_sr: f64,
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub run_dir: PathBuf,
    /// Continue from the latest checkpoint in `run_dir`.
    pub resume: bool,
    /// Stop after this step instead of `total_steps`.
    pub stop_after: Option<u64>,
    pub jobs: usize,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub first_step: u64,
    pub last_step: u64,
    pub last: TrainState,
    /// State at the step with the best val-seen success rate; the last
    /// state when nothing was validated.
    pub best: TrainState,
    pub best_step: u64,
}

pub fn checkpoint_path(run_dir: &Path, step: u64, model: &str) -> PathBuf {
    run_dir
        .join(CHECKPOINT_DIR)
        .join(format!("step-{step:08}.{model}.ckpt"))
}

pub fn save_state(run_dir: &Path, step: u64, state: &TrainState) -> Result<()> {
    checkpoint::save(checkpoint_path(run_dir, step, "follower"), &state.follower)?;
    checkpoint::save(checkpoint_path(run_dir, step, "speaker"), &state.speaker)?;
    Ok(())
}

pub fn load_state(run_dir: &Path, step: u64) -> Result<TrainState> {
    Ok(TrainState {
        follower: checkpoint::load(checkpoint_path(run_dir, step, "follower"))?,
        speaker: checkpoint::load(checkpoint_path(run_dir, step, "speaker"))?,
    })
}

/// Steps with both checkpoints present, ascending.
pub fn checkpoint_steps(run_dir: &Path) -> Result<Vec<u64>> {
    let dir = run_dir.join(CHECKPOINT_DIR);
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut steps = Vec::new();
    for entry in fs::read_dir(&dir)? {
        let name = entry?.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(rest) = name.strip_prefix("step-") else { continue };
        let Some(num) = rest.strip_suffix(".follower.ckpt") else { continue };
        if let Ok(step) = num.parse::<u64>() {
            if checkpoint_path(run_dir, step, "speaker").is_file() {
                steps.push(step);
            }
        }
    }
    steps.sort_unstable();
    Ok(steps)
}

/// Loads the best (or, with `best == false`, the latest) checkpointed
/// state of a finished run.
pub fn load_run_state(run_dir: &Path, best: bool) -> Result<(u64, TrainState)> {
    let best_file = run_dir.join(BEST_FILE);
    let step = if best && best_file.is_file() {
        serde_json::from_str::<BestStep>(&fs::read_to_string(best_file)?)?.step
    } else {
        *checkpoint_steps(run_dir)?
            .last()
            .ok_or_else(|| Error::Data(format!("no checkpoints in {}", run_dir.display())))?
    };
    Ok((step, load_state(run_dir, step)?))
}

fn validate_state(
    state: &TrainState,
    data: &TrainData,
    models: &Models,
    cfg: &TrainConfig,
    step: u64,
    jobs: usize,
) -> Result<ValidationRecord> {
    let ctx = EvalContext {
        follower: &state.follower,
        speaker: Some(&state.speaker),
        models,
        world: &data.world,
    };
    let opts = EvalOptions {
        max_steps: cfg.max_steps,
        threshold: cfg.success_threshold,
        jobs,
        ..EvalOptions::default()
    };
    let agg = |split: Split| -> Result<Option<Aggregate>> {
        let recs = data.split(split);
        if recs.is_empty() {
            return Ok(None);
        }
        Ok(Some(evaluate(&ctx, recs, split, &Greedy, &opts)?.mean))
    };
    let val_seen = agg(Split::ValSeen)?;
    let val_unseen = agg(Split::ValUnseen)?;
    let speaker_val_loss = if data.val_seen.is_empty() {
        None
    } else {
        Some(speaker_eval_loss(&state.speaker, models, &data.world, &data.val_seen)?)
    };
    Ok(ValidationRecord {
        step,
        val_seen,
        val_unseen,
        speaker_val_loss,
    })
}

fn better(best: &Option<BestStep>, rec: &ValidationRecord) -> Option<BestStep> {
    let sr = rec.val_seen.as_ref()?.sr;
    match best {
        Some(b) if sr < b.val_seen_sr => None,
        _ => Some(BestStep {
            step: rec.step,
            val_seen_sr: sr,
        }),
    }
}

struct Resumed {
    step: u64,
    state: TrainState,
    monitor: DivergenceMonitor,
    best: Option<BestStep>,
}

fn start_fresh(
    cfg: &TrainConfig,
    mode: &dyn TrainingMode,
    data: &TrainData,
    models: &Models,
    init: &TrainState,
    opts: &RunOptions,
) -> Result<Resumed> {
    let dir = &opts.run_dir;
    if dir.join(CONFIG_FILE).exists() {
        return Err(Error::Config(format!(
            "{} already holds a run; resume it or choose another directory",
            dir.display()
        )));
    }
    fs::create_dir_all(dir.join(CHECKPOINT_DIR))?;
    let snapshot = RunSnapshot {
        mode: mode.name().into(),
        models: *models,
        config: cfg.clone(),
    };
    fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&snapshot)?)?;
    let step = cfg.pretrain_steps as u64;
    save_state(dir, step, init)?;
    fs::write(dir.join(STEPS_FILE), b"")?;
    let rec = validate_state(init, data, models, cfg, step, opts.jobs)?;
    write_jsonl(dir.join(VALIDATION_FILE), std::slice::from_ref(&rec))?;
    let best = better(&None, &rec);
    if let Some(b) = &best {
        fs::write(dir.join(BEST_FILE), serde_json::to_string(b)?)?;
    }
    Ok(Resumed {
        step,
        state: init.clone(),
        monitor: DivergenceMonitor::new(cfg.divergence_factor, cfg.divergence_window),
        best,
    })
}

fn resume(
    cfg: &TrainConfig,
    mode: &dyn TrainingMode,
    models: &Models,
    opts: &RunOptions,
) -> Result<Resumed> {
    let dir = &opts.run_dir;
    let snapshot: RunSnapshot = serde_json::from_str(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
    if snapshot.mode != mode.name() || snapshot.models != *models || snapshot.config != *cfg {
        return Err(Error::Config(format!(
            "{} was started with a different mode or configuration",
            dir.display()
        )));
    }
    let step = *checkpoint_steps(dir)?
        .last()
        .ok_or_else(|| Error::Data(format!("no checkpoints in {}", dir.display())))?;
    let state = load_state(dir, step)?;
    models.follower.check(&state.follower)?;
    models.speaker.check(&state.speaker)?;

    let mut reports: Vec<StepReport> = read_jsonl(dir.join(STEPS_FILE))?;
    reports.retain(|r| r.step <= step);
    write_jsonl(dir.join(STEPS_FILE), &reports)?;
    let mut monitor = DivergenceMonitor::new(cfg.divergence_factor, cfg.divergence_window);
    for r in &reports {
        if let Some(l) = r.monitored_loss() {
            monitor.observe(r.step, l)?;
        }
    }

    let mut vals: Vec<ValidationRecord> = read_jsonl(dir.join(VALIDATION_FILE))?;
    vals.retain(|r| r.step <= step);
    write_jsonl(dir.join(VALIDATION_FILE), &vals)?;
    let mut best = None;
    for r in &vals {
        if let Some(b) = better(&best, r) {
            best = Some(b);
        }
    }
    match &best {
        Some(b) => fs::write(dir.join(BEST_FILE), serde_json::to_string(b)?)?,
        None => {
            let _ = fs::remove_file(dir.join(BEST_FILE));
        }
    }
    for s in checkpoint_steps(dir)? {
        if s > step {
            fs::remove_file(checkpoint_path(dir, s, "follower"))?;
            fs::remove_file(checkpoint_path(dir, s, "speaker"))?;
        }
    }
    Ok(Resumed {
        step,
        state,
        monitor,
        best,
    })
}

/// Runs steps `pretrain_steps + 1 ..= total_steps` of `mode` from `init`,
/// writing the run directory as it goes.
pub fn train(
    cfg: &TrainConfig,
    mode: &dyn TrainingMode,
    data: &TrainData,
    models: &Models,
    init: &TrainState,
    opts: &RunOptions,
) -> Result<RunSummary> {
    cfg.validate()?;
    mode.check_config(cfg)?;
    models.follower.check(&init.follower)?;
    models.speaker.check(&init.speaker)?;
    let dir = &opts.run_dir;
    let Resumed {
        step: first_step,
        mut state,
        mut monitor,
        mut best,
    } = if opts.resume {
        resume(cfg, mode, models, opts)?
    } else {
        start_fresh(cfg, mode, data, models, init, opts)?
    };

    let total = cfg.total_steps as u64;
    let end = opts.stop_after.map_or(total, |s| s.min(total));
    let mut pool = AugmentPool::new(cfg.seed, cfg.augment_pool, cfg.route_bounds());
    let mut steps_log = BufWriter::new(
        fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(dir.join(STEPS_FILE))?,
    );
    let mut step = first_step;
    while step < end {
        step += 1;
        let mut ctx = StepContext {
            data,
            models,
            cfg,
            pool: &mut pool,
        };
        let report = mode.step(&mut ctx, &mut state, step)?;
        serde_json::to_writer(&mut steps_log, &report)?;
        steps_log.write_all(b"\n")?;
        if let Some(l) = report.monitored_loss() {
            if let Err(e) = monitor.observe(step, l) {
                steps_log.flush()?;
                return Err(e);
            }
        }
        let validate = step % cfg.validate_every as u64 == 0 || step == total;
        if validate {
            let rec = validate_state(&state, data, models, cfg, step, opts.jobs)?;
            crate::io::append_jsonl(dir.join(VALIDATION_FILE), &rec)?;
            if let Some(b) = better(&best, &rec) {
                fs::write(dir.join(BEST_FILE), serde_json::to_string(&b)?)?;
                best = Some(b);
            }
        }
        if validate || step % cfg.checkpoint_every as u64 == 0 || step == end {
            steps_log.flush()?;
            save_state(dir, step, &state)?;
        }
    }
    steps_log.flush()?;

    let (best_step, best_state) = match &best {
        Some(b) if b.step != step => (b.step, load_state(dir, b.step)?),
        _ => (step, state.clone()),
    };
    Ok(RunSummary {
        first_step,
        last_step: step,
        last: state,
        best: best_state,
        best_step,
    })
}
