//! Instruction follower: encodes an instruction, then decodes one action per
//! step conditioned on the current observation and the previous action.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use foam_autodiff::{Bound, ParamSet, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::language::{Instruction, PAD};
use crate::nn::{self, Memory, MASKED_LOGIT};
use crate::world::{transition, Action, DropoutMask, EnvironmentGraph, Heading, Route, World};

pub const PREFIX: &str = "follower";
/// Previous-action slots: the four actions plus a start marker.
const PREV_SLOTS: usize = Action::COUNT + 1;
const START_SLOT: usize = Action::COUNT;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FollowerConfig {
    pub vocab_size: usize,
    pub obs_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl FollowerConfig {
    pub fn init<R: Rng>(&self, rng: &mut R) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("follower.embed", nn::uniform(rng, &[self.vocab_size, self.embed_dim]));
        nn::add_gru(&mut ps, rng, "follower.enc", self.embed_dim, self.hidden_dim);
        nn::add_gru(
            &mut ps,
            rng,
            "follower.dec",
            self.obs_dim + PREV_SLOTS + self.hidden_dim,
            self.hidden_dim,
        );
        ps.insert("follower.att", nn::uniform(rng, &[self.hidden_dim, self.hidden_dim]));
        nn::add_linear(&mut ps, rng, "follower.out", 2 * self.hidden_dim, Action::COUNT);
        ps
    }

    /// Checks that `params` has exactly the layout `init` would produce.
    pub fn check(&self, params: &ParamSet) -> Result<()> {
        let expected = self.init(&mut rand::rngs::mock::StepRng::new(0, 0)).layout();
        if params.layout() != expected {
            return Err(Error::Data(format!(
                "follower parameters do not match the configured shapes \
                 (vocab {}, obs {}, embed {}, hidden {})",
                self.vocab_size, self.obs_dim, self.embed_dim, self.hidden_dim
            )));
        }
        Ok(())
    }
}

/// Teacher forcing feeds the gold previous action; student forcing feeds
/// the model's own argmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Forcing {
    Teacher,
    Student,
}

/// A labeled or synthetic (instruction, route) pair plus the environment
/// dropout active for its episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub instruction: Instruction,
    pub route: Route,
    pub mask: Option<DropoutMask>,
}

/// Episodes padded to common lengths, with observations precomputed along
/// the gold routes.
#[derive(Clone, Debug)]
pub struct EpisodeBatch {
    size: usize,
    /// `tokens[t][b]`, PAD beyond each instruction.
    tokens: Vec<Vec<usize>>,
    lengths: Vec<usize>,
    /// Per decoding step: `[batch, obs_dim]` observations.
    obs: Vec<Tensor>,
    /// Per decoding step: `[batch, 4]`, 0 or [`MASKED_LOGIT`].
    action_mask: Vec<Tensor>,
    targets: Vec<Vec<usize>>,
    weights: Vec<Vec<f32>>,
    fingerprint: u64,
}

impl EpisodeBatch {
    pub fn new(world: &World, episodes: &[Episode]) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::Data("empty episode batch".into()));
        }
        let size = episodes.len();
        let max_tokens = episodes.iter().map(|e| e.instruction.len()).max().unwrap();
        let max_steps = episodes.iter().map(|e| e.route.actions.len()).max().unwrap();
        if max_tokens == 0 {
            return Err(Error::Data("episode with an empty instruction".into()));
        }
        let lengths: Vec<usize> = episodes.iter().map(|e| e.instruction.len()).collect();
        let tokens = (0..max_tokens)
            .map(|t| {
                episodes
                    .iter()
                    .map(|e| e.instruction.tokens().get(t).copied().unwrap_or(PAD))
                    .collect()
            })
            .collect();
        let total: usize = episodes.iter().map(|e| e.route.actions.len()).sum();
        let w = 1.0 / total as f32;

        let mut per_ep_states = Vec::with_capacity(size);
        let mut hasher = DefaultHasher::new();
        for e in episodes {
            let env = world.get(&e.route.env_id)?;
            per_ep_states.push((env, e.route.states(env)?));
            e.route.env_id.hash(&mut hasher);
            e.route.nodes.hash(&mut hasher);
            e.route.actions.hash(&mut hasher);
        }
        let obs_dim = world.observation_dim();
        let mut obs = Vec::with_capacity(max_steps);
        let mut action_mask = Vec::with_capacity(max_steps);
        let mut targets = Vec::with_capacity(max_steps);
        let mut weights = Vec::with_capacity(max_steps);
        for t in 0..max_steps {
            let mut o = Vec::with_capacity(size * obs_dim);
            let mut m = Vec::with_capacity(size * Action::COUNT);
            let mut tg = Vec::with_capacity(size);
            let mut wt = Vec::with_capacity(size);
            for (e, (env, states)) in episodes.iter().zip(&per_ep_states) {
                let live = t < states.len();
                let (node, heading) = states[t.min(states.len() - 1)];
                o.extend(env.observe(node, heading, e.mask.as_ref())?);
                m.extend(valid_mask(env, node, heading));
                if live {
                    tg.push(e.route.actions[t].index());
                    wt.push(w);
                } else {
                    tg.push(Action::Stop.index());
                    wt.push(0.0);
                }
            }
            obs.push(Tensor::new(vec![size, obs_dim], o)?);
            action_mask.push(Tensor::new(vec![size, Action::COUNT], m)?);
            targets.push(tg);
            weights.push(wt);
        }
        Ok(Self {
            size,
            tokens,
            lengths,
            obs,
            action_mask,
            targets,
            weights,
            fingerprint: hasher.finish(),
        })
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    /// Identifies the routes behind the batch, in order.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn max_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens_at(&self, t: usize) -> &[usize] {
        &self.tokens[t]
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }
}

fn valid_mask(env: &EnvironmentGraph, node: usize, heading: Heading) -> [f32; 4] {
    let mut m = [0.0; 4];
    if !env.can_forward(node, heading) {
        m[Action::Forward.index()] = MASKED_LOGIT;
    }
    m
}

/// Token embeddings per instruction step, looked up from the follower's
/// table.
pub fn embed_tokens(tape: &mut Tape, b: &Bound, batch: &EpisodeBatch) -> Result<Vec<Var>> {
    let table = b.var("follower.embed");
    (0..batch.max_tokens())
        .map(|t| Ok(tape.gather(table, batch.tokens_at(t))?))
        .collect()
}

fn prev_input(tape: &mut Tape, prev: &[usize]) -> Var {
    tape.constant(nn::one_hot(prev, PREV_SLOTS))
}

/// Recurrent decoder state: hidden state and the previous attention
/// context, which is fed back as input.
#[derive(Clone, Copy)]
struct DecState {
    h: Var,
    ctx: Var,
}

impl DecState {
    fn start(tape: &mut Tape, mem: &Memory, hidden: usize) -> Self {
        let ctx = tape.constant(Tensor::zeros(&[mem.batch, hidden]));
        Self { h: mem.last, ctx }
    }
}

/// One decoder step: returns the new state and the masked action
/// distribution.
fn decode_step(
    tape: &mut Tape,
    b: &Bound,
    cfg: &FollowerConfig,
    mem: &Memory,
    state: DecState,
    obs: Var,
    prev: Var,
    mask: Var,
) -> Result<(DecState, Var)> {
    let x = tape.concat(&[obs, prev, state.ctx])?;
    let h = nn::gru_step(tape, b, "follower.dec", x, state.h, cfg.hidden_dim, None)?;
    let q = tape.matmul(h, b.var("follower.att"))?;
    let ctx = nn::attend(tape, mem, q)?;
    let feat = tape.concat(&[h, ctx])?;
    let logits = nn::linear(tape, b, "follower.out", feat)?;
    let logits = tape.add(logits, mask)?;
    let probs = tape.softmax(logits)?;
    Ok((DecState { h, ctx }, probs))
}

/// Mean action cross-entropy over every unpadded step of the batch.
pub fn follower_loss(
    tape: &mut Tape,
    b: &Bound,
    cfg: &FollowerConfig,
    batch: &EpisodeBatch,
    forcing: Forcing,
) -> Result<Var> {
    let inputs = embed_tokens(tape, b, batch)?;
    follower_loss_from_inputs(tape, b, cfg, batch, forcing, &inputs)
}

/// As [`follower_loss`], with the instruction embeddings supplied by the
/// caller (one `[batch, embed_dim]` var per token position).
pub fn follower_loss_from_inputs(
    tape: &mut Tape,
    b: &Bound,
    cfg: &FollowerConfig,
    batch: &EpisodeBatch,
    forcing: Forcing,
    inputs: &[Var],
) -> Result<Var> {
    if inputs.len() != batch.max_tokens() {
        return Err(Error::BatchMismatch(format!(
            "{} embedded positions for {} instruction tokens",
            inputs.len(),
            batch.max_tokens()
        )));
    }
    let mem = nn::encode(tape, b, "follower.enc", inputs, &batch.lengths, cfg.hidden_dim)?;
    let mut state = DecState::start(tape, &mem, cfg.hidden_dim);
    let mut prev = vec![START_SLOT; batch.size];
    let mut loss: Option<Var> = None;
    for t in 0..batch.obs.len() {
        let obs = tape.constant(batch.obs[t].clone());
        let mask = tape.constant(batch.action_mask[t].clone());
        let p = prev_input(tape, &prev);
        let (next, probs) = decode_step(tape, b, cfg, &mem, state, obs, p, mask)?;
        state = next;
        let ce = tape.cross_entropy_weighted(probs, &batch.targets[t], &batch.weights[t])?;
        loss = Some(match loss {
            None => ce,
            Some(l) => tape.add(l, ce)?,
        });
        prev = match forcing {
            Forcing::Teacher => batch.targets[t].clone(),
            Forcing::Student => {
                let v = tape.value(probs);
                (0..batch.size).map(|r| nn::argmax(v.row(r))).collect()
            }
        };
    }
    let loss = loss.ok_or_else(|| Error::Data("batch without actions".into()))?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            what: "follower loss",
            context: format!("batch of {} episodes", batch.size),
        });
    }
    Ok(loss)
}

/// Decoding policy for free-running rollouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RolloutMode {
    Greedy,
    Sample,
}

/// Where a rollout starts and what it is told.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutRequest {
    pub instruction: Instruction,
    pub env_id: String,
    pub start: usize,
    pub heading: Heading,
    pub mask: Option<DropoutMask>,
}

impl RolloutRequest {
    pub fn for_route(instruction: Instruction, route: &Route) -> Self {
        Self {
            instruction,
            env_id: route.env_id.clone(),
            start: route.start(),
            heading: route.start_heading,
            mask: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    /// Traversed route. Its last action is `Stop` only if `stopped`.
    pub route: Route,
    /// Log-probability of each chosen action.
    pub log_probs: Vec<f32>,
    pub stopped: bool,
}

impl Rollout {
    pub fn total_log_prob(&self) -> f32 {
        self.log_probs.iter().sum()
    }
}

struct Agent {
    node: usize,
    heading: Heading,
    nodes: Vec<usize>,
    actions: Vec<Action>,
    log_probs: Vec<f32>,
    done: bool,
}

fn encode_requests(
    tape: &mut Tape,
    b: &Bound,
    cfg: &FollowerConfig,
    requests: &[RolloutRequest],
) -> Result<Memory> {
    let max_len = requests.iter().map(|r| r.instruction.len()).max().unwrap_or(0);
    if max_len == 0 {
        return Err(Error::Data("rollout with an empty instruction".into()));
    }
    let lengths: Vec<usize> = requests.iter().map(|r| r.instruction.len()).collect();
    for r in requests {
        r.instruction.check(cfg.vocab_size)?;
    }
    let table = b.var("follower.embed");
    let mut inputs = Vec::with_capacity(max_len);
    for t in 0..max_len {
        let ids: Vec<usize> = requests
            .iter()
            .map(|r| r.instruction.tokens().get(t).copied().unwrap_or(PAD))
            .collect();
        inputs.push(tape.gather(table, &ids)?);
    }
    nn::encode(tape, b, "follower.enc", &inputs, &lengths, cfg.hidden_dim)
}

/// Runs every request until it stops or `max_steps` actions were taken.
/// Forward moves into walls are masked out of the action distribution.
pub fn rollout_batch<R: Rng>(
    params: &ParamSet,
    cfg: &FollowerConfig,
    world: &World,
    requests: &[RolloutRequest],
    mode: RolloutMode,
    max_steps: usize,
    rng: &mut R,
) -> Result<Vec<Rollout>> {
    if requests.is_empty() {
        return Ok(Vec::new());
    }
    let max_steps = max_steps.max(1);
    let envs = requests
        .iter()
        .map(|r| world.get(&r.env_id))
        .collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::new();
    let b = tape.bind(params, false)?;
    let mem = encode_requests(&mut tape, &b, cfg, requests)?;
    let mut agents: Vec<Agent> = requests
        .iter()
        .zip(&envs)
        .map(|(r, env)| {
            env.node(r.start).map(|_| Agent {
                node: r.start,
                heading: r.heading,
                nodes: vec![r.start],
                actions: Vec::new(),
                log_probs: Vec::new(),
                done: false,
            })
        })
        .collect::<Result<_>>()?;
    let n = requests.len();
    let obs_dim = world.observation_dim();
    let mut state = DecState::start(&mut tape, &mem, cfg.hidden_dim);
    let mut prev = vec![START_SLOT; n];
    for _ in 0..max_steps {
        if agents.iter().all(|a| a.done) {
            break;
        }
        let mut o = Vec::with_capacity(n * obs_dim);
        let mut m = Vec::with_capacity(n * Action::COUNT);
        for ((a, env), r) in agents.iter().zip(&envs).zip(requests) {
            o.extend(env.observe(a.node, a.heading, r.mask.as_ref())?);
            m.extend(valid_mask(env, a.node, a.heading));
        }
        let obs = tape.constant(Tensor::new(vec![n, obs_dim], o)?);
        let mask = tape.constant(Tensor::new(vec![n, Action::COUNT], m)?);
        let p = prev_input(&mut tape, &prev);
        let (next, probs) = decode_step(&mut tape, &b, cfg, &mem, state, obs, p, mask)?;
        state = next;
        let pv = tape.value(probs).clone();
        for (i, (a, env)) in agents.iter_mut().zip(&envs).enumerate() {
            if a.done {
                continue;
            }
            let row = pv.row(i);
            let choice = match mode {
                RolloutMode::Greedy => nn::argmax(row),
                RolloutMode::Sample => sample_index(row, rng),
            };
            let action = Action::from_index(choice);
            let (node, heading) = transition(env, a.node, a.heading, action)
                .unwrap_or((a.node, a.heading));
            if node != a.node {
                a.nodes.push(node);
            }
            a.node = node;
            a.heading = heading;
            a.actions.push(action);
            a.log_probs.push(row[choice].ln());
            a.done = action == Action::Stop;
            prev[i] = choice;
        }
    }
    Ok(agents
        .into_iter()
        .zip(requests)
        .map(|(a, r)| Rollout {
            route: Route {
                env_id: r.env_id.clone(),
                goal: a.node,
                nodes: a.nodes,
                actions: a.actions,
                start_heading: r.heading,
            },
            log_probs: a.log_probs,
            stopped: a.done,
        })
        .collect())
}

/// Single-request convenience wrapper around [`rollout_batch`].
pub fn rollout<R: Rng>(
    params: &ParamSet,
    cfg: &FollowerConfig,
    world: &World,
    request: &RolloutRequest,
    mode: RolloutMode,
    max_steps: usize,
    rng: &mut R,
) -> Result<Rollout> {
    let mut out = rollout_batch(
        params,
        cfg,
        world,
        std::slice::from_ref(request),
        mode,
        max_steps,
        rng,
    )?;
    Ok(out.pop().expect("one request"))
}

/// Inverse-CDF draw from a probability row.
pub fn sample_index<R: Rng>(row: &[f32], rng: &mut R) -> usize {
    let u: f32 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in row.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

struct Hyp {
    node: usize,
    heading: Heading,
    h: Vec<f32>,
    ctx: Vec<f32>,
    prev: usize,
    nodes: Vec<usize>,
    actions: Vec<Action>,
    log_probs: Vec<f32>,
    score: f32,
}

impl Hyp {
    fn finish(self, env_id: &str, heading: Heading, stopped: bool) -> Rollout {
        Rollout {
            route: Route {
                env_id: env_id.to_string(),
                goal: self.node,
                nodes: self.nodes,
                actions: self.actions,
                start_heading: heading,
            },
            log_probs: self.log_probs,
            stopped,
        }
    }
}

/// Beam search over action sequences, ranked by total follower
/// log-probability. A hypothesis is complete when it stops or reaches
/// `max_steps` actions. At most `width` candidates are returned, best first,
/// and the greedy rollout is always among them.
pub fn beam_candidates(
    params: &ParamSet,
    cfg: &FollowerConfig,
    world: &World,
    request: &RolloutRequest,
    width: usize,
    max_steps: usize,
) -> Result<Vec<Rollout>> {
    let width = width.max(1);
    let max_steps = max_steps.max(1);
    let env = world.get(&request.env_id)?;
    env.node(request.start)?;
    let mut tape = Tape::new();
    let b = tape.bind(params, false)?;
    let mem = encode_requests(&mut tape, &b, cfg, std::slice::from_ref(request))?;
    let obs_dim = world.observation_dim();
    let mut alive = vec![Hyp {
        node: request.start,
        heading: request.heading,
        h: tape.value(mem.last).data().to_vec(),
        ctx: vec![0.0; cfg.hidden_dim],
        prev: START_SLOT,
        nodes: vec![request.start],
        actions: Vec::new(),
        log_probs: Vec::new(),
        score: 0.0,
    }];
    let mut finished: Vec<(Hyp, bool)> = Vec::new();
    for step in 0..max_steps {
        if alive.is_empty() {
            break;
        }
        let n = alive.len();
        let mut o = Vec::with_capacity(n * obs_dim);
        let mut m = Vec::with_capacity(n * Action::COUNT);
        let mut hs = Vec::with_capacity(n * cfg.hidden_dim);
        let mut cs = Vec::with_capacity(n * cfg.hidden_dim);
        for hyp in &alive {
            o.extend(env.observe(hyp.node, hyp.heading, request.mask.as_ref())?);
            m.extend(valid_mask(env, hyp.node, hyp.heading));
            hs.extend_from_slice(&hyp.h);
            cs.extend_from_slice(&hyp.ctx);
        }
        let rep = mem.select(&mut tape, &vec![0; n])?;
        let obs = tape.constant(Tensor::new(vec![n, obs_dim], o)?);
        let mask = tape.constant(Tensor::new(vec![n, Action::COUNT], m)?);
        let h = tape.constant(Tensor::new(vec![n, cfg.hidden_dim], hs)?);
        let ctx = tape.constant(Tensor::new(vec![n, cfg.hidden_dim], cs)?);
        let prev: Vec<usize> = alive.iter().map(|x| x.prev).collect();
        let p = prev_input(&mut tape, &prev);
        let (next, probs) = decode_step(&mut tape, &b, cfg, &rep, DecState { h, ctx }, obs, p, mask)?;
        let hv = tape.value(next.h).clone();
        let cv = tape.value(next.ctx).clone();
        let pv = tape.value(probs).clone();

        let mut expansions: Vec<(f32, usize, usize)> = Vec::new();
        for i in 0..n {
            for a in 0..Action::COUNT {
                let pr = pv.row(i)[a];
                if pr > 0.0 {
                    expansions.push((alive[i].score + pr.ln(), i, a));
                }
            }
        }
        expansions.sort_by(|x, y| y.0.total_cmp(&x.0));
        let room = width - finished.len();
        expansions.truncate(room);
        let last_step = step + 1 == max_steps;
        let mut next = Vec::new();
        for (score, i, a) in expansions {
            let parent = &alive[i];
            let action = Action::from_index(a);
            let (node, heading) =
                transition(env, parent.node, parent.heading, action).expect("masked move");
            let mut nodes = parent.nodes.clone();
            if node != parent.node {
                nodes.push(node);
            }
            let mut actions = parent.actions.clone();
            actions.push(action);
            let mut log_probs = parent.log_probs.clone();
            log_probs.push(pv.row(i)[a].ln());
            let hyp = Hyp {
                node,
                heading,
                h: hv.row(i).to_vec(),
                ctx: cv.row(i).to_vec(),
                prev: a,
                nodes,
                actions,
                log_probs,
                score,
            };
            if action == Action::Stop {
                finished.push((hyp, true));
            } else if last_step {
                finished.push((hyp, false));
            } else {
                next.push(hyp);
            }
        }
        alive = next;
    }
    let mut out: Vec<Rollout> = finished
        .into_iter()
        .map(|(h, stopped)| h.finish(&request.env_id, request.heading, stopped))
        .collect();
    out.sort_by(|x, y| y.total_log_prob().total_cmp(&x.total_log_prob()));

    let greedy = rollout(
        params,
        cfg,
        world,
        request,
        RolloutMode::Greedy,
        max_steps,
        &mut rand::rngs::mock::StepRng::new(0, 0),
    )?;
    if !out.iter().any(|c| c.route.actions == greedy.route.actions) {
        if out.len() >= width {
            out.pop();
        }
        out.push(greedy);
        out.sort_by(|x, y| y.total_log_prob().total_cmp(&x.total_log_prob()));
    }
    Ok(out)
}
