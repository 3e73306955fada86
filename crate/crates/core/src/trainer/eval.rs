//! Evaluation policies: how the follower turns an instruction into a
//! route at test time.

use foam_autodiff::ParamSet;

use crate::error::{Error, Result};
use crate::follower::{beam_candidates, rollout_batch, RolloutMode, RolloutRequest};
use crate::language::DatasetRecord;
use crate::metrics::{episode_metrics, EvalResult};
use crate::speaker::{score_batch, RouteInput};
use crate::trainer::registry::Registry;
use crate::trainer::steps::Models;
use crate::world::{Route, Split, World};

/// Everything a policy may consult.
pub struct EvalContext<'a> {
    pub follower: &'a ParamSet,
    pub speaker: Option<&'a ParamSet>,
    pub models: &'a Models,
    pub world: &'a World,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub beam_width: usize,
    pub max_steps: usize,
    pub threshold: f64,
    /// Worker threads for rollouts.
    pub jobs: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            beam_width: 5,
            max_steps: 20,
            threshold: crate::metrics::DEFAULT_SUCCESS_THRESHOLD,
            jobs: 1,
        }
    }
}

pub trait EvalPolicy: Send + Sync {
    fn name(&self) -> &'static str;

    /// One predicted route per request, in order.
    fn navigate(
        &self,
        ctx: &EvalContext<'_>,
        requests: &[RolloutRequest],
        opts: &EvalOptions,
    ) -> Result<Vec<Route>>;
}

/// Argmax action at every step.
pub struct Greedy;

impl EvalPolicy for Greedy {
    fn name(&self) -> &'static str {
        "greedy"
    }

    fn navigate(
        &self,
        ctx: &EvalContext<'_>,
        requests: &[RolloutRequest],
        opts: &EvalOptions,
    ) -> Result<Vec<Route>> {
        let mut unused = rand::rngs::mock::StepRng::new(0, 0);
        let out = rollout_batch(
            ctx.follower,
            &ctx.models.follower,
            ctx.world,
            requests,
            RolloutMode::Greedy,
            opts.max_steps,
            &mut unused,
        )?;
        Ok(out.into_iter().map(|r| r.route).collect())
    }
}

/// The follower proposes `beam_width` candidates and the one the speaker
/// finds most likely to have produced the instruction is kept.
pub struct SpeakerRescoredBeam;

impl EvalPolicy for SpeakerRescoredBeam {
    fn name(&self) -> &'static str {
        "beam"
    }

    fn navigate(
        &self,
        ctx: &EvalContext<'_>,
        requests: &[RolloutRequest],
        opts: &EvalOptions,
    ) -> Result<Vec<Route>> {
        let speaker = ctx
            .speaker
            .ok_or_else(|| Error::Config("beam evaluation needs a speaker checkpoint".into()))?;
        let mut out = Vec::with_capacity(requests.len());
        for req in requests {
            let cands = beam_candidates(
                ctx.follower,
                &ctx.models.follower,
                ctx.world,
                req,
                opts.beam_width,
                opts.max_steps,
            )?;
            if cands.len() == 1 {
                out.push(cands.into_iter().next().unwrap().route);
                continue;
            }
            let items: Vec<_> = cands
                .iter()
                .map(|c| (RouteInput::plain(c.route.clone()), req.instruction.clone()))
                .collect();
            let scores = score_batch(speaker, &ctx.models.speaker, ctx.world, &items)?;
            let mut best = 0;
            for (i, s) in scores.iter().enumerate() {
                if *s > scores[best] {
                    best = i;
                }
            }
            out.push(cands[best].route.clone());
        }
        Ok(out)
    }
}

pub fn default_policies() -> Registry<dyn EvalPolicy> {
    let mut r: Registry<dyn EvalPolicy> = Registry::new("evaluation policy");
    r.register("greedy", Box::new(Greedy));
    r.register("beam", Box::new(SpeakerRescoredBeam));
    r
}

/// Runs `policy` on every record and scores the predictions, splitting the
/// requests over `opts.jobs` threads.
pub fn evaluate(
    ctx: &EvalContext<'_>,
    records: &[DatasetRecord],
    split: Split,
    policy: &dyn EvalPolicy,
    opts: &EvalOptions,
) -> Result<EvalResult> {
    let requests: Vec<RolloutRequest> = records
        .iter()
        .map(|r| RolloutRequest::for_route(r.instruction.clone(), &r.route))
        .collect();
    let jobs = opts.jobs.max(1).min(requests.len().max(1));
    let routes = if jobs == 1 {
        policy.navigate(ctx, &requests, opts)?
    } else {
        let chunk = requests.len().div_ceil(jobs);
        let parts: Vec<Result<Vec<Route>>> = std::thread::scope(|s| {
            let handles: Vec<_> = requests
                .chunks(chunk)
                .map(|c| s.spawn(move || policy.navigate(ctx, c, opts)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        });
        let mut all = Vec::with_capacity(requests.len());
        for p in parts {
            all.extend(p?);
        }
        all
    };
    let mut episodes = Vec::with_capacity(records.len());
    for (rec, pred) in records.iter().zip(&routes) {
        let env = ctx.world.get(&rec.env_id)?;
        episodes.push(episode_metrics(env, pred, &rec.route, opts.threshold)?);
    }
    Ok(EvalResult::new(split, episodes))
}
