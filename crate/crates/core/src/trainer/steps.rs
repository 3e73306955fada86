//! Single optimization steps: supervised imitation, back-translation, and
//! the follower-aware speaker update.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use foam_autodiff::{
    cosine_similarity, flatten_grads, sgd_step, GradVector, Gradients, ParamSet, Tape,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::follower::{
    follower_loss, follower_loss_from_inputs, Episode, EpisodeBatch, FollowerConfig,
};
use crate::language::{Instruction, PAD};
use crate::nn::one_hot;
use crate::rng::{stream_rng, Stream};
use crate::speaker::{
    generate_batch, speaker_probs, weighted_nll, Decoding, RouteInput, SpeakerBatch,
    SpeakerConfig, SpeakerSample,
};
use crate::trainer::config::TrainConfig;
use crate::world::{DropoutMask, Route, World};

/// Shapes of both models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Models {
    pub follower: FollowerConfig,
    pub speaker: SpeakerConfig,
}

impl Models {
    pub fn new(vocab_size: usize, obs_dim: usize, embed_dim: usize, hidden_dim: usize) -> Self {
        Self {
            follower: FollowerConfig {
                vocab_size,
                obs_dim,
                embed_dim,
                hidden_dim,
            },
            speaker: SpeakerConfig {
                vocab_size,
                obs_dim,
                embed_dim,
                hidden_dim,
            },
        }
    }
}

/// Synthetic episodes produced by the speaker for sampled routes.
#[derive(Clone, Debug)]
pub struct AugmentedBatch {
    pub samples: Vec<SpeakerSample>,
    pub masks: Vec<DropoutMask>,
    fingerprint: u64,
}

fn route_fingerprint<'a>(routes: impl Iterator<Item = &'a Route>) -> u64 {
    let mut hasher = DefaultHasher::new();
    for r in routes {
        r.env_id.hash(&mut hasher);
        r.nodes.hash(&mut hasher);
        r.actions.hash(&mut hasher);
    }
    hasher.finish()
}

impl AugmentedBatch {
    pub fn new(samples: Vec<SpeakerSample>, masks: Vec<DropoutMask>) -> Result<Self> {
        if samples.len() != masks.len() || samples.is_empty() {
            return Err(Error::BatchMismatch(format!(
                "{} samples with {} dropout masks",
                samples.len(),
                masks.len()
            )));
        }
        let fingerprint = route_fingerprint(samples.iter().map(|s| &s.route));
        Ok(Self {
            samples,
            masks,
            fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn routes(&self) -> impl Iterator<Item = &Route> {
        self.samples.iter().map(|s| &s.route)
    }

    /// Identifies the routes of the batch, in order.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn episodes(&self) -> Vec<Episode> {
        self.samples
            .iter()
            .zip(&self.masks)
            .map(|(s, m)| Episode {
                instruction: s.instruction.clone(),
                route: s.route.clone(),
                mask: Some(m.clone()),
            })
            .collect()
    }

    pub fn speaker_items(&self) -> Vec<(RouteInput, Instruction)> {
        self.samples
            .iter()
            .zip(&self.masks)
            .map(|(s, m)| {
                (
                    RouteInput {
                        route: s.route.clone(),
                        mask: Some(m.clone()),
                    },
                    s.instruction.clone(),
                )
            })
            .collect()
    }
}

/// Gradient of the augmented-data loss at the pre-update follower,
/// tagged with the batch it came from.
#[derive(Clone, Debug)]
pub struct AugmentedGradient {
    pub vector: GradVector,
    pub fingerprint: u64,
}

#[derive(Clone, Debug)]
pub struct BtOutput {
    pub follower: ParamSet,
    pub grad_u: AugmentedGradient,
    pub batch: AugmentedBatch,
    pub loss_u: f32,
    pub grad_norm: f32,
}

/// Loss and parameter gradients of the follower on a batch.
pub fn follower_grad(
    params: &ParamSet,
    models: &Models,
    batch: &EpisodeBatch,
    forcing: crate::follower::Forcing,
) -> Result<(f32, Gradients)> {
    let mut tape = Tape::new();
    let b = tape.bind(params, true)?;
    let loss = follower_loss(&mut tape, &b, &models.follower, batch, forcing)?;
    let value = tape.value(loss).item();
    Ok((value, tape.backward(loss)?))
}

/// Back-translation step: the speaker describes `routes` under a fresh
/// dropout mask per episode, the follower takes one SGD step on those
/// synthetic pairs, and the pre-update gradient is returned for reuse.
pub fn bt_follower_step(
    follower: &ParamSet,
    speaker: &ParamSet,
    routes: &[Route],
    models: &Models,
    world: &World,
    cfg: &TrainConfig,
    step: u64,
) -> Result<BtOutput> {
    if routes.is_empty() {
        return Err(Error::Data("back-translation needs at least one route".into()));
    }
    let mut drop_rng = stream_rng(cfg.seed, Stream::Dropout, step);
    let dim = world.feature_dim();
    let masks: Vec<DropoutMask> = routes
        .iter()
        .map(|_| DropoutMask::sample(dim, cfg.keep_prob, &mut drop_rng))
        .collect();
    let inputs: Vec<RouteInput> = routes
        .iter()
        .zip(&masks)
        .map(|(r, m)| RouteInput {
            route: r.clone(),
            mask: Some(m.clone()),
        })
        .collect();
    let decoding = if cfg.aug_sampling {
        Decoding::Sample {
            temperature: cfg.temperature,
        }
    } else {
        Decoding::Greedy
    };
    let mut sample_rng = stream_rng(cfg.seed, Stream::SpeakerSampling, step);
    let samples = generate_batch(
        speaker,
        &models.speaker,
        world,
        &inputs,
        decoding,
        cfg.max_instr_len,
        &mut sample_rng,
    )?;
    let batch = AugmentedBatch::new(samples, masks)?;
    let episodes = EpisodeBatch::new(world, &batch.episodes())?;
    let (loss_u, grads) = follower_grad(follower, models, &episodes, cfg.aug_forcing)
        .map_err(|e| with_step(e, "augmented follower loss", step))?;
    let vector = flatten_grads(&grads, follower)?;
    let (updated, stats) = sgd_step(follower, &grads, cfg.eta_f, cfg.clip())?;
    Ok(BtOutput {
        follower: updated,
        grad_u: AugmentedGradient {
            vector,
            fingerprint: batch.fingerprint(),
        },
        batch,
        loss_u,
        grad_norm: stats.grad_norm,
    })
}

fn with_step(e: Error, what: &'static str, step: u64) -> Error {
    match e {
        Error::NonFiniteLoss { context, .. } => Error::NonFiniteLoss {
            what,
            context: format!("step {step}, {context}"),
        },
        other => other,
    }
}

/// Which speaker terms enter the objective, and with what weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeakerTerms {
    pub bilevel: bool,
    pub recon: bool,
    pub reward: f32,
}

#[derive(Clone, Debug)]
pub struct SpeakerObjective {
    pub grads: Gradients,
    /// `reward * mean_k -log P(î_k | r̂_k)` (0 when disabled).
    pub bilevel_term: f32,
    /// `reward * L_u` through the straight-through path (0 when disabled).
    pub recon_term: f32,
}

/// Builds the speaker objective on one tape: the REINFORCE surrogate
/// `reward * mean_k -log P(î_k | r̂_k)` and the straight-through
/// reconstruction loss `reward * L_u`, where the follower reads each sampled
/// token as `st(P_t, onehot(î_t)) E_F`.
pub fn speaker_objective(
    speaker: &ParamSet,
    follower: &ParamSet,
    batch: &AugmentedBatch,
    models: &Models,
    world: &World,
    forcing: crate::follower::Forcing,
    terms: SpeakerTerms,
) -> Result<SpeakerObjective> {
    if !terms.bilevel && !terms.recon {
        return Ok(SpeakerObjective {
            grads: Gradients::zeros_like(speaker),
            bilevel_term: 0.0,
            recon_term: 0.0,
        });
    }
    let sbatch = SpeakerBatch::new(world, &batch.speaker_items())?;
    let mut tape = Tape::new();
    let bs = tape.bind(speaker, true)?;
    let probs = speaker_probs(&mut tape, &bs, &models.speaker, &sbatch)?;
    let mut total = None;
    let mut bilevel_term = 0.0;
    let mut recon_term = 0.0;
    if terms.bilevel {
        let k = batch.len() as f32;
        let nll = weighted_nll(&mut tape, &probs, &sbatch, &vec![1.0 / k; batch.len()])?;
        let term = tape.scale(nll, terms.reward)?;
        bilevel_term = tape.value(term).item();
        total = Some(term);
    }
    if terms.recon {
        for s in &batch.samples {
            if s.token_probs.len() != s.instruction.len() {
                return Err(Error::Data(
                    "straight-through estimate needs the token distributions recorded at \
                     sampling time"
                        .into(),
                ));
            }
        }
        let bf = tape.bind(follower, false)?;
        let table = bf.var("follower.embed");
        let vocab = models.speaker.vocab_size;
        let mut inputs = Vec::with_capacity(probs.len());
        for (t, &p) in probs.iter().enumerate() {
            let ids: Vec<usize> = batch
                .samples
                .iter()
                .map(|s| s.instruction.tokens().get(t).copied().unwrap_or(PAD))
                .collect();
            let hard = tape.constant(one_hot(&ids, vocab));
            let st = tape.straight_through(p, hard)?;
            inputs.push(tape.matmul(st, table)?);
        }
        let episodes = EpisodeBatch::new(world, &batch.episodes())?;
        let lu = follower_loss_from_inputs(
            &mut tape,
            &bf,
            &models.follower,
            &episodes,
            forcing,
            &inputs,
        )?;
        let term = tape.scale(lu, terms.reward)?;
        recon_term = tape.value(term).item();
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let loss = total.expect("at least one term");
    let grads = tape.backward(loss)?;
    Ok(SpeakerObjective {
        grads,
        bilevel_term,
        recon_term,
    })
}

/// `∇_{θ_S} L_u` through the straight-through estimator, unweighted.
pub fn straight_through_grad(
    speaker: &ParamSet,
    follower: &ParamSet,
    batch: &AugmentedBatch,
    models: &Models,
    world: &World,
    forcing: crate::follower::Forcing,
) -> Result<Gradients> {
    let terms = SpeakerTerms {
        bilevel: false,
        recon: true,
        reward: 1.0,
    };
    Ok(speaker_objective(speaker, follower, batch, models, world, forcing, terms)?.grads)
}

/// `-reward * mean_k ∇_{θ_S} log P(î_k | r̂_k)`.
pub fn bilevel_grad(
    speaker: &ParamSet,
    batch: &AugmentedBatch,
    models: &Models,
    world: &World,
    reward: f32,
) -> Result<Gradients> {
    let terms = SpeakerTerms {
        bilevel: true,
        recon: false,
        reward,
    };
    let unused = ParamSet::new();
    Ok(speaker_objective(
        speaker,
        &unused,
        batch,
        models,
        world,
        crate::follower::Forcing::Teacher,
        terms,
    )?
    .grads)
}

/// Per-step record of the follower-aware speaker update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiLevelStepReport {
    pub step: u64,
    /// Augmented-data follower loss before the update.
    pub loss_u: f32,
    /// Labeled-data follower loss after the update.
    pub loss_l: f32,
    /// Cosine alignment of the labeled and augmented follower gradients.
    pub h: f32,
    pub grad_u_norm: f32,
    pub grad_l_norm: f32,
    pub speaker_grad_norm: f32,
    pub bilevel_term: f32,
    pub recon_term: f32,
}

/// Follower-aware speaker update. Scores the updated follower on a labeled
/// batch, rewards the speaker with the cosine between that gradient and
/// the augmented-data gradient, and takes one SGD step on the
/// reward-weighted speaker objective.
#[allow(clippy::too_many_arguments)]
pub fn foam_speaker_step(
    speaker: &ParamSet,
    follower_new: &ParamSet,
    grad_u: &AugmentedGradient,
    batch: &AugmentedBatch,
    labeled: &EpisodeBatch,
    models: &Models,
    world: &World,
    cfg: &TrainConfig,
    step: u64,
    loss_u: f32,
) -> Result<(ParamSet, BiLevelStepReport)> {
    if grad_u.fingerprint != batch.fingerprint() {
        return Err(Error::BatchMismatch(
            "augmented gradient was computed on a different batch of routes".into(),
        ));
    }
    let (loss_l, grads_l) = follower_grad(follower_new, models, labeled, crate::follower::Forcing::Teacher)
        .map_err(|e| with_step(e, "labeled follower loss", step))?;
    let g_l = flatten_grads(&grads_l, follower_new)?;
    let h = cosine_similarity(&g_l, &grad_u.vector)?;
    let terms = SpeakerTerms {
        bilevel: cfg.bilevel,
        recon: cfg.recon,
        reward: h,
    };
    let (updated, speaker_grad_norm, bilevel_term, recon_term) = if cfg.bilevel || cfg.recon {
        let obj =
            speaker_objective(speaker, follower_new, batch, models, world, cfg.aug_forcing, terms)?;
        let (updated, stats) = sgd_step(speaker, &obj.grads, cfg.eta_s, cfg.clip())?;
        (updated, stats.grad_norm, obj.bilevel_term, obj.recon_term)
    } else {
        (speaker.clone(), 0.0, 0.0, 0.0)
    };
    let report = BiLevelStepReport {
        step,
        loss_u,
        loss_l,
        h,
        grad_u_norm: grad_u.vector.norm() as f32,
        grad_l_norm: g_l.norm() as f32,
        speaker_grad_norm,
        bilevel_term,
        recon_term,
    };
    if ![report.loss_l, report.h, report.bilevel_term, report.recon_term]
        .iter()
        .all(|v| v.is_finite())
    {
        return Err(Error::NonFiniteLoss {
            what: "speaker update",
            context: format!("step {step}"),
        });
    }
    Ok((updated, report))
}

/// One imitation step on labeled episodes with teacher forcing.
pub fn supervised_step(
    follower: &ParamSet,
    batch: &EpisodeBatch,
    models: &Models,
    lr: f32,
    clip: Option<f32>,
) -> Result<(ParamSet, f32, f32)> {
    let (loss, grads) = follower_grad(follower, models, batch, crate::follower::Forcing::Teacher)?;
    let (updated, stats) = sgd_step(follower, &grads, lr, clip)?;
    Ok((updated, loss, stats.grad_norm))
}
