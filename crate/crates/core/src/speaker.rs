//! Speaker: encodes a route as a sequence of (observation, action) steps and
//! decodes an instruction token by token.

use foam_autodiff::{Bound, ParamSet, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::follower::sample_index;
use crate::language::{Instruction, BOS, EOS, PAD, UNK};
use crate::nn::{self, Memory, MASKED_LOGIT};
use crate::world::{Action, DropoutMask, Route, World};

pub const PREFIX: &str = "speaker";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeakerConfig {
    pub vocab_size: usize,
    pub obs_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl SpeakerConfig {
    pub fn init<R: Rng>(&self, rng: &mut R) -> ParamSet {
        let mut ps = ParamSet::new();
        nn::add_linear(
            &mut ps,
            rng,
            "speaker.proj",
            self.obs_dim + Action::COUNT,
            self.embed_dim,
        );
        nn::add_gru(&mut ps, rng, "speaker.enc", self.embed_dim, self.hidden_dim);
        ps.insert(
            "speaker.dec.embed",
            nn::uniform(rng, &[self.vocab_size, self.embed_dim]),
        );
        nn::add_gru(
            &mut ps,
            rng,
            "speaker.dec",
            self.embed_dim + self.hidden_dim,
            self.hidden_dim,
        );
        ps.insert("speaker.att", nn::uniform(rng, &[self.hidden_dim, self.hidden_dim]));
        nn::add_linear(&mut ps, rng, "speaker.out", 2 * self.hidden_dim, self.vocab_size);
        ps
    }

    pub fn check(&self, params: &ParamSet) -> Result<()> {
        let expected = self.init(&mut rand::rngs::mock::StepRng::new(0, 0)).layout();
        if params.layout() != expected {
            return Err(Error::Data(format!(
                "speaker parameters do not match the configured shapes \
                 (vocab {}, obs {}, embed {}, hidden {})",
                self.vocab_size, self.obs_dim, self.embed_dim, self.hidden_dim
            )));
        }
        Ok(())
    }

    /// Logit offsets that remove PAD, BOS and UNK from every distribution.
    fn output_mask(&self) -> Tensor {
        let mut m = vec![0.0; self.vocab_size];
        for id in [PAD, BOS, UNK] {
            if id < self.vocab_size {
                m[id] = MASKED_LOGIT;
            }
        }
        Tensor::new(vec![1, self.vocab_size], m).expect("row mask")
    }
}

/// A route to describe, with the dropout applied to its observations.
#[derive(Clone, Debug, PartialEq)]
pub struct RouteInput {
    pub route: Route,
    pub mask: Option<DropoutMask>,
}

impl RouteInput {
    pub fn plain(route: Route) -> Self {
        Self { route, mask: None }
    }
}

/// Padded route encodings.
#[derive(Clone, Debug)]
pub struct RouteBatch {
    size: usize,
    /// Per route step: `[batch, obs_dim + 4]`.
    steps: Vec<Tensor>,
    lengths: Vec<usize>,
}

impl RouteBatch {
    pub fn new(world: &World, inputs: &[RouteInput]) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::Data("empty route batch".into()));
        }
        let size = inputs.len();
        let mut per = Vec::with_capacity(size);
        for input in inputs {
            let env = world.get(&input.route.env_id)?;
            let (_, states) = crate::world::replay(
                env,
                input.route.start(),
                input.route.start_heading,
                &input.route.actions,
            )?;
            if states.is_empty() {
                return Err(Error::Data("route without actions".into()));
            }
            let mut rows = Vec::with_capacity(states.len());
            for (&(node, heading), &a) in states.iter().zip(&input.route.actions) {
                let mut row = env.observe(node, heading, input.mask.as_ref())?;
                let mut onehot = [0.0f32; Action::COUNT];
                onehot[a.index()] = 1.0;
                row.extend_from_slice(&onehot);
                rows.push(row);
            }
            per.push(rows);
        }
        let lengths: Vec<usize> = per.iter().map(Vec::len).collect();
        let max_len = *lengths.iter().max().unwrap();
        let width = per[0][0].len();
        let steps = (0..max_len)
            .map(|t| {
                let mut data = Vec::with_capacity(size * width);
                for rows in &per {
                    data.extend_from_slice(&rows[t.min(rows.len() - 1)]);
                }
                Tensor::new(vec![size, width], data)
            })
            .collect::<foam_autodiff::Result<Vec<_>>>()?;
        Ok(Self {
            size,
            steps,
            lengths,
        })
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }
}

fn encode_routes(
    tape: &mut Tape,
    b: &Bound,
    cfg: &SpeakerConfig,
    routes: &RouteBatch,
) -> Result<Memory> {
    let mut inputs = Vec::with_capacity(routes.steps.len());
    for s in &routes.steps {
        let x = tape.constant(s.clone());
        let e = nn::linear(tape, b, "speaker.proj", x)?;
        inputs.push(tape.tanh(e)?);
    }
    nn::encode(tape, b, "speaker.enc", &inputs, &routes.lengths, cfg.hidden_dim)
}

fn decode_step(
    tape: &mut Tape,
    b: &Bound,
    cfg: &SpeakerConfig,
    mem: &Memory,
    (h, ctx): (Var, Var),
    prev: &[usize],
    mask: Var,
    inv_temperature: f32,
) -> Result<((Var, Var), Var)> {
    let e = tape.gather(b.var("speaker.dec.embed"), prev)?;
    let x = tape.concat(&[e, ctx])?;
    let h = nn::gru_step(tape, b, "speaker.dec", x, h, cfg.hidden_dim, None)?;
    let q = tape.matmul(h, b.var("speaker.att"))?;
    let ctx = nn::attend(tape, mem, q)?;
    let feat = tape.concat(&[h, ctx])?;
    let logits = nn::linear(tape, b, "speaker.out", feat)?;
    let logits = if inv_temperature == 1.0 {
        logits
    } else {
        tape.scale(logits, inv_temperature)?
    };
    let logits = tape.add(logits, mask)?;
    Ok(((h, ctx), tape.softmax(logits)?))
}

/// Routes paired with instructions, padded for teacher forcing.
#[derive(Clone, Debug)]
pub struct SpeakerBatch {
    routes: RouteBatch,
    /// `inputs[t][b]`: BOS, then the instruction shifted right.
    inputs: Vec<Vec<usize>>,
    targets: Vec<Vec<usize>>,
    lengths: Vec<usize>,
}

impl SpeakerBatch {
    pub fn new(world: &World, items: &[(RouteInput, Instruction)]) -> Result<Self> {
        let inputs: Vec<RouteInput> = items.iter().map(|(r, _)| r.clone()).collect();
        let routes = RouteBatch::new(world, &inputs)?;
        Self::with_routes(routes, items.iter().map(|(_, i)| i))
    }

    pub fn with_routes<'a>(
        routes: RouteBatch,
        instructions: impl Iterator<Item = &'a Instruction>,
    ) -> Result<Self> {
        let instrs: Vec<&Instruction> = instructions.collect();
        if instrs.len() != routes.size {
            return Err(Error::BatchMismatch(format!(
                "{} instructions for {} routes",
                instrs.len(),
                routes.size
            )));
        }
        let lengths: Vec<usize> = instrs.iter().map(|i| i.len()).collect();
        if lengths.contains(&0) {
            return Err(Error::Data("empty instruction".into()));
        }
        let max_len = *lengths.iter().max().unwrap();
        let mut inputs = Vec::with_capacity(max_len);
        let mut targets = Vec::with_capacity(max_len);
        for t in 0..max_len {
            inputs.push(
                instrs
                    .iter()
                    .map(|i| match t {
                        0 => BOS,
                        _ => i.tokens().get(t - 1).copied().unwrap_or(PAD),
                    })
                    .collect(),
            );
            targets.push(
                instrs
                    .iter()
                    .map(|i| i.tokens().get(t).copied().unwrap_or(EOS))
                    .collect(),
            );
        }
        Ok(Self {
            routes,
            inputs,
            targets,
            lengths,
        })
    }

    pub fn len(&self) -> usize {
        self.routes.size
    }

    pub fn is_empty(&self) -> bool {
        self.routes.size == 0
    }

    pub fn max_len(&self) -> usize {
        self.targets.len()
    }

    pub fn targets_at(&self, t: usize) -> &[usize] {
        &self.targets[t]
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    fn check_tokens(&self, cfg: &SpeakerConfig) -> Result<()> {
        for (t, row) in self.targets.iter().enumerate() {
            for (b, &id) in row.iter().enumerate() {
                if t >= self.lengths[b] {
                    continue;
                }
                if id >= cfg.vocab_size {
                    return Err(Error::TokenOutOfRange {
                        id,
                        size: cfg.vocab_size,
                    });
                }
                if id == PAD || id == BOS || id == UNK {
                    return Err(Error::Data(format!(
                        "reserved token id {id} cannot be produced by the speaker"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Teacher-forced next-token distributions, one `[batch, vocab]` var per
/// instruction position.
pub fn speaker_probs(
    tape: &mut Tape,
    b: &Bound,
    cfg: &SpeakerConfig,
    batch: &SpeakerBatch,
) -> Result<Vec<Var>> {
    batch.check_tokens(cfg)?;
    let mem = encode_routes(tape, b, cfg, &batch.routes)?;
    let mask = tape.constant(cfg.output_mask());
    let zeros = tape.constant(Tensor::zeros(&[mem.batch, cfg.hidden_dim]));
    let mut h = (mem.last, zeros);
    let mut out = Vec::with_capacity(batch.max_len());
    for t in 0..batch.max_len() {
        let (h2, p) = decode_step(tape, b, cfg, &mem, h, &batch.inputs[t], mask, 1.0)?;
        h = h2;
        out.push(p);
    }
    Ok(out)
}

/// `sum_b w_b * -log P(instruction_b | route_b)`.
pub fn weighted_nll(
    tape: &mut Tape,
    probs: &[Var],
    batch: &SpeakerBatch,
    seq_weights: &[f32],
) -> Result<Var> {
    if seq_weights.len() != batch.len() || probs.len() != batch.max_len() {
        return Err(Error::BatchMismatch("weights or positions do not match".into()));
    }
    let mut total: Option<Var> = None;
    for (t, &p) in probs.iter().enumerate() {
        let w: Vec<f32> = (0..batch.len())
            .map(|b| if t < batch.lengths[b] { seq_weights[b] } else { 0.0 })
            .collect();
        let ce = tape.cross_entropy_weighted(p, &batch.targets[t], &w)?;
        total = Some(match total {
            None => ce,
            Some(acc) => tape.add(acc, ce)?,
        });
    }
    total.ok_or_else(|| Error::Data("empty speaker batch".into()))
}

/// Mean token-level cross-entropy of the gold instructions.
pub fn speaker_loss(
    tape: &mut Tape,
    b: &Bound,
    cfg: &SpeakerConfig,
    batch: &SpeakerBatch,
) -> Result<Var> {
    let probs = speaker_probs(tape, b, cfg, batch)?;
    let tokens: usize = batch.lengths.iter().sum();
    let w = vec![1.0 / tokens as f32; batch.len()];
    let loss = weighted_nll(tape, &probs, batch, &w)?;
    if !tape.value(loss).item().is_finite() {
        return Err(Error::NonFiniteLoss {
            what: "speaker loss",
            context: format!("batch of {} routes", batch.len()),
        });
    }
    Ok(loss)
}

/// Exact `log P(instruction | route)` for each item, EOS included.
pub fn score_batch(
    params: &ParamSet,
    cfg: &SpeakerConfig,
    world: &World,
    items: &[(RouteInput, Instruction)],
) -> Result<Vec<f32>> {
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let batch = SpeakerBatch::new(world, items)?;
    let mut tape = Tape::new();
    let b = tape.bind(params, false)?;
    let probs = speaker_probs(&mut tape, &b, cfg, &batch)?;
    let mut out = vec![0.0f32; batch.len()];
    for (t, &p) in probs.iter().enumerate() {
        let pv = tape.value(p);
        for (i, acc) in out.iter_mut().enumerate() {
            if t < batch.lengths[i] {
                *acc += pv.row(i)[batch.targets[t][i]].ln();
            }
        }
    }
    Ok(out)
}

pub fn score(
    params: &ParamSet,
    cfg: &SpeakerConfig,
    world: &World,
    route: &RouteInput,
    instruction: &Instruction,
) -> Result<f32> {
    Ok(score_batch(params, cfg, world, &[(route.clone(), instruction.clone())])?[0])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decoding {
    Greedy,
    /// Draw from the softmax of `logits / temperature`. A temperature of 0
    /// decodes greedily.
    Sample { temperature: f32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerSample {
    pub route: Route,
    pub instruction: Instruction,
    pub log_prob: f32,
    pub token_log_probs: Vec<f32>,
    /// Distribution each token was drawn from. Not serialized.
    #[serde(skip)]
    pub token_probs: Vec<Vec<f32>>,
}

/// Decodes one instruction per route until EOS or `max_len` tokens.
pub fn generate_batch<R: Rng>(
    params: &ParamSet,
    cfg: &SpeakerConfig,
    world: &World,
    inputs: &[RouteInput],
    decoding: Decoding,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<SpeakerSample>> {
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    let max_len = max_len.max(1);
    let routes = RouteBatch::new(world, inputs)?;
    let n = routes.size;
    let mut tape = Tape::new();
    let b = tape.bind(params, false)?;
    let mem = encode_routes(&mut tape, &b, cfg, &routes)?;
    let mask = tape.constant(cfg.output_mask());
    let (greedy, inv_t) = match decoding {
        Decoding::Greedy => (true, 1.0),
        Decoding::Sample { temperature } if temperature <= 0.0 => (true, 1.0),
        Decoding::Sample { temperature } => (false, 1.0 / temperature),
    };
    let zeros = tape.constant(Tensor::zeros(&[mem.batch, cfg.hidden_dim]));
    let mut h = (mem.last, zeros);
    let mut prev = vec![BOS; n];
    let mut tokens: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut logps: Vec<Vec<f32>> = vec![Vec::new(); n];
    let mut dists: Vec<Vec<Vec<f32>>> = vec![Vec::new(); n];
    let mut done = vec![false; n];
    for _ in 0..max_len {
        if done.iter().all(|&d| d) {
            break;
        }
        let (h2, p) = decode_step(&mut tape, &b, cfg, &mem, h, &prev, mask, inv_t)?;
        h = h2;
        let pv = tape.value(p).clone();
        for i in 0..n {
            if done[i] {
                prev[i] = PAD;
                continue;
            }
            let row = pv.row(i);
            let tok = if greedy {
                nn::argmax(row)
            } else {
                sample_index(row, rng)
            };
            tokens[i].push(tok);
            logps[i].push(row[tok].ln());
            dists[i].push(row.to_vec());
            prev[i] = tok;
            done[i] = tok == EOS;
        }
    }
    Ok(inputs
        .iter()
        .zip(tokens.into_iter().zip(logps).zip(dists))
        .map(|(input, ((toks, lp), d))| SpeakerSample {
            route: input.route.clone(),
            instruction: Instruction(toks),
            log_prob: lp.iter().sum(),
            token_log_probs: lp,
            token_probs: d,
        })
        .collect())
}

pub fn generate<R: Rng>(
    params: &ParamSet,
    cfg: &SpeakerConfig,
    world: &World,
    input: &RouteInput,
    decoding: Decoding,
    max_len: usize,
    rng: &mut R,
) -> Result<SpeakerSample> {
    let mut out = generate_batch(
        params,
        cfg,
        world,
        std::slice::from_ref(input),
        decoding,
        max_len,
        rng,
    )?;
    Ok(out.pop().expect("one route"))
}
