//! Supervised pretraining of either model on the labeled records.

use foam_autodiff::{sgd_step, ParamSet, Tape};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::language::DatasetRecord;
use crate::rng::{stream_rng, Stream};
use crate::speaker::speaker_loss;
use crate::trainer::config::TrainConfig;
use crate::trainer::data::{follower_batch, sample_records, speaker_batch, TrainData};
use crate::trainer::divergence::DivergenceMonitor;
use crate::trainer::eval::{evaluate, EvalContext, EvalOptions, Greedy};
use crate::trainer::steps::{supervised_step, Models};
use crate::world::{Split, World};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Which {
    Follower,
    Speaker,
}

impl Which {
    pub fn as_str(self) -> &'static str {
        match self {
            Which::Follower => "follower",
            Which::Speaker => "speaker",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "follower" => Ok(Which::Follower),
            "speaker" => Ok(Which::Speaker),
            other => Err(Error::Config(format!(
                "unknown model `{other}` (expected follower or speaker)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub step: u64,
    pub loss: f32,
    /// Val-seen success rate for the follower, val-seen token loss for the
    /// speaker.
    pub validation: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub which: Which,
    /// Parameters with the best validation score.
    pub best: ParamSet,
    pub best_step: u64,
    pub last: ParamSet,
    pub log: Vec<PretrainRecord>,
}

/// Mean token cross-entropy of the gold instructions, batched.
pub fn speaker_eval_loss(
    params: &ParamSet,
    models: &Models,
    world: &World,
    records: &[DatasetRecord],
) -> Result<f64> {
    let mut total = 0.0f64;
    let mut tokens = 0usize;
    for chunk in records.chunks(64) {
        let refs: Vec<&DatasetRecord> = chunk.iter().collect();
        let batch = speaker_batch(world, &refs)?;
        let n: usize = batch.lengths().iter().sum();
        let mut tape = Tape::new();
        let b = tape.bind(params, false)?;
        let loss = speaker_loss(&mut tape, &b, &models.speaker, &batch)?;
        total += f64::from(tape.value(loss).item()) * n as f64;
        tokens += n;
    }
    Ok(if tokens == 0 { f64::NAN } else { total / tokens as f64 })
}

pub fn follower_val_sr(
    params: &ParamSet,
    models: &Models,
    data: &TrainData,
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<f64> {
    let ctx = EvalContext {
        follower: params,
        speaker: None,
        models,
        world: &data.world,
    };
    let opts = EvalOptions {
        max_steps: cfg.max_steps,
        threshold: cfg.success_threshold,
        jobs,
        ..EvalOptions::default()
    };
    Ok(evaluate(&ctx, &data.val_seen, Split::ValSeen, &Greedy, &opts)?.mean.sr)
}

/// Higher is better for both models.
fn validation_score(
    which: Which,
    params: &ParamSet,
    models: &Models,
    data: &TrainData,
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<Option<(f64, f64)>> {
    if data.val_seen.is_empty() {
        return Ok(None);
    }
    Ok(Some(match which {
        Which::Follower => {
            let sr = follower_val_sr(params, models, data, cfg, jobs)?;
            (sr, sr)
        }
        Which::Speaker => {
            let l = speaker_eval_loss(params, models, &data.world, &data.val_seen)?;
            (l, -l)
        }
    }))
}

/// Runs `cfg.pretrain_steps` supervised steps from `init`. With no
/// validation records the last parameters are kept.
pub fn pretrain(
    cfg: &TrainConfig,
    data: &TrainData,
    models: &Models,
    which: Which,
    init: &ParamSet,
    jobs: usize,
) -> Result<PretrainOutcome> {
    match which {
        Which::Follower => models.follower.check(init)?,
        Which::Speaker => models.speaker.check(init)?,
    }
    if data.train.is_empty() {
        return Err(Error::Data("no labeled training records".into()));
    }
    let stream = match which {
        Which::Follower => Stream::PretrainFollower,
        Which::Speaker => Stream::PretrainSpeaker,
    };
    let lr = match which {
        Which::Follower => cfg.pretrain_lr_f,
        Which::Speaker => cfg.pretrain_lr_s,
    };
    let mut params = init.clone();
    let mut best = init.clone();
    let mut best_step = 0u64;
    let mut best_score = f64::NEG_INFINITY;
    let mut monitor = DivergenceMonitor::new(cfg.divergence_factor, cfg.divergence_window);
    let mut log = Vec::new();

    for step in 1..=cfg.pretrain_steps as u64 {
        let mut rng = stream_rng(cfg.seed, stream, step);
        let recs = sample_records(&data.train, cfg.batch_labeled, &mut rng);
        let loss = match which {
            Which::Follower => {
                let batch = follower_batch(&data.world, &recs)?;
                let (next, loss, _) = supervised_step(&params, &batch, models, lr, cfg.clip())?;
                params = next;
                loss
            }
            Which::Speaker => {
                let batch = speaker_batch(&data.world, &recs)?;
                let mut tape = Tape::new();
                let b = tape.bind(&params, true)?;
                let loss = speaker_loss(&mut tape, &b, &models.speaker, &batch)?;
                let value = tape.value(loss).item();
                let grads = tape.backward(loss)?;
                params = sgd_step(&params, &grads, lr, cfg.clip())?.0;
                value
            }
        };
        monitor.observe(step, loss)?;
        let mut validation = None;
        if step % cfg.validate_every as u64 == 0 || step == cfg.pretrain_steps as u64 {
            if let Some((raw, score)) = validation_score(which, &params, models, data, cfg, jobs)? {
                validation = Some(raw);
                if score >= best_score {
                    best_score = score;
                    best = params.clone();
                    best_step = step;
                }
            }
        }
        log.push(PretrainRecord {
            step,
            loss,
            validation,
        });
    }
    if data.val_seen.is_empty() {
        best = params.clone();
        best_step = cfg.pretrain_steps as u64;
    }
    Ok(PretrainOutcome {
        which,
        best,
        best_step,
        last: params,
        log,
    })
}
