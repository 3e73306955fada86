//! Training modes. Each mode defines what one training step does; the run
//! loop around it is shared.

use foam_autodiff::ParamSet;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::trainer::config::TrainConfig;
use crate::trainer::data::{follower_batch, sample_records, AugmentPool, TrainData};
use crate::trainer::registry::Registry;
use crate::trainer::steps::{
    bt_follower_step, foam_speaker_step, supervised_step, BiLevelStepReport, Models,
};

/// Parameters of both models at some step.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub follower: ParamSet,
    pub speaker: ParamSet,
}

/// What one step did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub mode: String,
    /// Mean supervised follower loss over this step's labeled updates.
    pub supervised_loss: Option<f32>,
    /// Follower loss on the augmented batch.
    pub loss_u: Option<f32>,
    pub follower_grad_norm: f32,
    pub augmented_routes: usize,
    pub bilevel: Option<BiLevelStepReport>,
}

impl StepReport {
    /// Loss watched by the divergence policy.
    pub fn monitored_loss(&self) -> Option<f32> {
        self.supervised_loss.or(self.loss_u)
    }
}

pub struct StepContext<'a> {
    pub data: &'a TrainData,
    pub models: &'a Models,
    pub cfg: &'a TrainConfig,
    pub pool: &'a mut AugmentPool,
}

pub trait TrainingMode: Send + Sync {
    fn name(&self) -> &'static str;

    /// Mode-specific configuration checks on top of [`TrainConfig::validate`].
    fn check_config(&self, _cfg: &TrainConfig) -> Result<()> {
        Ok(())
    }

    fn step(&self, ctx: &mut StepContext<'_>, state: &mut TrainState, step: u64)
        -> Result<StepReport>;
}

fn supervised_phase(
    ctx: &StepContext<'_>,
    follower: &mut ParamSet,
    step: u64,
) -> Result<(Option<f32>, f32)> {
    let mut rng = stream_rng(ctx.cfg.seed, Stream::Batches, 2 * step);
    let mut losses = Vec::with_capacity(ctx.cfg.supervised_ratio);
    let mut norm = 0.0;
    for _ in 0..ctx.cfg.supervised_ratio {
        let recs = sample_records(&ctx.data.train, ctx.cfg.batch_labeled, &mut rng);
        let batch = follower_batch(&ctx.data.world, &recs)?;
        let (updated, loss, n) =
            supervised_step(follower, &batch, ctx.models, ctx.cfg.eta_f, ctx.cfg.clip())
                .map_err(|e| match e {
                    Error::NonFiniteLoss { context, .. } => Error::NonFiniteLoss {
                        what: "supervised follower loss",
                        context: format!("step {step}, {context}"),
                    },
                    other => other,
                })?;
        *follower = updated;
        losses.push(loss);
        norm = n;
    }
    let mean = (!losses.is_empty()).then(|| losses.iter().sum::<f32>() / losses.len() as f32);
    Ok((mean, norm))
}

/// Labeled data only.
pub struct SupervisedOnly;

impl TrainingMode for SupervisedOnly {
    fn name(&self) -> &'static str {
        "supervised-only"
    }

    fn step(
        &self,
        ctx: &mut StepContext<'_>,
        state: &mut TrainState,
        step: u64,
    ) -> Result<StepReport> {
        let (loss, norm) = supervised_phase(ctx, &mut state.follower, step)?;
        Ok(StepReport {
            step,
            mode: self.name().into(),
            supervised_loss: loss,
            loss_u: None,
            follower_grad_norm: norm,
            augmented_routes: 0,
            bilevel: None,
        })
    }
}

/// Back-translation with a frozen speaker, followed by supervised updates.
pub struct EnvDropBaseline;

impl TrainingMode for EnvDropBaseline {
    fn name(&self) -> &'static str {
        "envdrop-baseline"
    }

    fn step(
        &self,
        ctx: &mut StepContext<'_>,
        state: &mut TrainState,
        step: u64,
    ) -> Result<StepReport> {
        let routes = ctx
            .pool
            .batch(&ctx.data.world, step, ctx.cfg.batch_augmented)?;
        let bt = bt_follower_step(
            &state.follower,
            &state.speaker,
            &routes,
            ctx.models,
            &ctx.data.world,
            ctx.cfg,
            step,
        )?;
        state.follower = bt.follower;
        let (loss, _) = supervised_phase(ctx, &mut state.follower, step)?;
        Ok(StepReport {
            step,
            mode: self.name().into(),
            supervised_loss: loss,
            loss_u: Some(bt.loss_u),
            follower_grad_norm: bt.grad_norm,
            augmented_routes: routes.len(),
            bilevel: None,
        })
    }
}

/// Back-translation, then the follower-aware speaker update, then
/// supervised updates.
pub struct Foam;

impl TrainingMode for Foam {
    fn name(&self) -> &'static str {
        "foam"
    }

    fn check_config(&self, cfg: &TrainConfig) -> Result<()> {
        if !cfg.recon && !cfg.bilevel {
            return Err(Error::Config(
                "foam mode needs the reconstruction loss, the bi-level loss, or both".into(),
            ));
        }
        Ok(())
    }

    fn step(
        &self,
        ctx: &mut StepContext<'_>,
        state: &mut TrainState,
        step: u64,
    ) -> Result<StepReport> {
        let routes = ctx
            .pool
            .batch(&ctx.data.world, step, ctx.cfg.batch_augmented)?;
        let bt = bt_follower_step(
            &state.follower,
            &state.speaker,
            &routes,
            ctx.models,
            &ctx.data.world,
            ctx.cfg,
            step,
        )?;
        let mut rng = stream_rng(ctx.cfg.seed, Stream::Batches, 2 * step + 1);
        let recs = sample_records(&ctx.data.train, ctx.cfg.batch_labeled, &mut rng);
        let labeled = follower_batch(&ctx.data.world, &recs)?;
        let (speaker, report) = foam_speaker_step(
            &state.speaker,
            &bt.follower,
            &bt.grad_u,
            &bt.batch,
            &labeled,
            ctx.models,
            &ctx.data.world,
            ctx.cfg,
            step,
            bt.loss_u,
        )?;
        state.speaker = speaker;
        state.follower = bt.follower;
        let (loss, _) = supervised_phase(ctx, &mut state.follower, step)?;
        Ok(StepReport {
            step,
            mode: self.name().into(),
            supervised_loss: loss,
            loss_u: Some(bt.loss_u),
            follower_grad_norm: bt.grad_norm,
            augmented_routes: routes.len(),
            bilevel: Some(report),
        })
    }
}

pub fn default_modes() -> Registry<dyn TrainingMode> {
    let mut r: Registry<dyn TrainingMode> = Registry::new("training mode");
    r.register("foam", Box::new(Foam));
    r.register("envdrop-baseline", Box::new(EnvDropBaseline));
    r.register("supervised-only", Box::new(SupervisedOnly));
    r
}
