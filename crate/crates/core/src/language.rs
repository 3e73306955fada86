//! Token vocabulary and the rule-based annotator that plays the role of a
//! human instruction writer.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use rand::Rng;

use crate::rng::{stream_rng, Stream};
use crate::world::{
    replay, sample_route, Action, EnvironmentGraph, Heading, Route, RouteBounds, Split, World,
    TAG_NAMES,
};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

const WORDS: &[&str] = &[
    "go", "forward", "walk", "ahead", "move", "straight", "turn", "bear", "veer", "left",
    "right", "past", "the", "by", "near", "stop", "halt", "wait", "at", "here",
];

const FORWARD: [[&str; 2]; 3] = [["go", "forward"], ["walk", "ahead"], ["move", "straight"]];
const TURN: [&str; 3] = ["turn", "bear", "veer"];
const LANDMARK: [&str; 3] = ["past", "by", "near"];
const STOP: [&str; 3] = ["stop", "halt", "wait"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocabulary::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Reserved symbols, grammar words, then the first `num_tags` landmark
    /// tag names.
    pub fn for_tags(num_tags: usize) -> Self {
        let tokens = RESERVED
            .iter()
            .chain(WORDS)
            .chain(&TAG_NAMES[..num_tags.min(TAG_NAMES.len())])
            .map(|s| s.to_string())
            .collect();
        Vocabulary::from_tokens(tokens).expect("built-in tokens are unique")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Data(format!("vocabulary slot {i} must be `{r}`")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::TokenOutOfRange {
                id,
                size: self.tokens.len(),
            })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, words: &[&str]) -> Vec<usize> {
        words.iter().map(|w| self.id(w)).collect()
    }

    /// Space-joined words, stopping before EOS and skipping PAD/BOS.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = Vec::new();
        for &id in ids {
            match id {
                EOS => break,
                PAD | BOS => {}
                _ => out.push(self.token(id)?),
            }
        }
        Ok(out.join(" "))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Token ids ending with EOS when complete. BOS is implicit.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Instruction(pub Vec<usize>);

impl Instruction {
    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.0.last() == Some(&EOS)
    }

    /// Tokens before EOS.
    pub fn words(&self) -> &[usize] {
        match self.0.iter().position(|&t| t == EOS) {
            Some(p) => &self.0[..p],
            None => &self.0,
        }
    }

    pub fn check(&self, vocab_size: usize) -> Result<()> {
        match self.0.iter().find(|&&t| t >= vocab_size) {
            Some(&id) => Err(Error::TokenOutOfRange {
                id,
                size: vocab_size,
            }),
            None => Ok(()),
        }
    }
}

/// Distinct annotator styles.
pub const STYLE_COUNT: u64 = 9;

fn template(style_seed: u64, phrase: usize) -> usize {
    let a = style_seed % 3;
    let b = (style_seed / 3) % 3;
    ((a + phrase as u64 * b) % 3) as usize
}

/// Grammar output for a valid route. Each forward step reads "go forward",
/// each turn "turn left"/"turn right", an intermediate landmark node adds
/// "past the <tag>", and the goal reads "stop at the <tag>" or "stop here".
/// `style_seed` picks one of three paraphrases per phrase.
pub fn annotate(
    route: &Route,
    env: &EnvironmentGraph,
    vocab: &Vocabulary,
    style_seed: u64,
) -> Result<Instruction> {
    route.validate(env)?;
    let mut words: Vec<&str> = Vec::new();
    let mut phrase = 0;
    let mut node_idx = 0;
    let tag_name = |node: usize| env.tag(node).map(|t| TAG_NAMES[t]);
    for &a in &route.actions {
        let k = template(style_seed, phrase);
        phrase += 1;
        match a {
            Action::Forward => {
                words.extend(FORWARD[k]);
                node_idx += 1;
                let node = route.nodes[node_idx];
                if node_idx + 1 < route.nodes.len() {
                    if let Some(tag) = tag_name(node) {
                        let k = template(style_seed, phrase);
                        phrase += 1;
                        words.extend([LANDMARK[k], "the", tag]);
                    }
                }
            }
            Action::TurnLeft => words.extend([TURN[k], "left"]),
            Action::TurnRight => words.extend([TURN[k], "right"]),
            Action::Stop => match tag_name(route.goal) {
                Some(tag) => words.extend([STOP[k], "at", "the", tag]),
                None => words.extend([STOP[k], "here"]),
            },
        }
    }
    let mut ids = vocab.encode(&words);
    if ids.contains(&UNK) {
        return Err(Error::Data(format!(
            "vocabulary of size {} lacks a landmark used in `{}`",
            vocab.len(),
            env.id()
        )));
    }
    ids.push(EOS);
    Ok(Instruction(ids))
}

/// Inverts [`annotate`]: reads the movement phrases back into actions and
/// replays them from `(start, heading)`. Landmark references must match the
/// node they are attached to.
pub fn oracle_parse(
    instruction: &Instruction,
    env: &EnvironmentGraph,
    vocab: &Vocabulary,
    start: usize,
    heading: Heading,
) -> Result<Route> {
    let ids = instruction.words();
    if ids.is_empty() {
        return Err(Error::Parse("empty instruction".into()));
    }
    let words = ids
        .iter()
        .map(|&id| match id {
            PAD | BOS | UNK => Err(Error::Parse(format!("reserved token id {id}"))),
            _ => vocab.token(id),
        })
        .collect::<Result<Vec<_>>>()?;
    let tag_of = |w: &str| TAG_NAMES.iter().position(|&t| t == w);
    let unexpected = |i: usize| Error::Parse(format!("unexpected token at position {i}"));

    let mut actions = Vec::new();
    // (action index, tag) pairs for landmark and goal references
    let mut refs: Vec<(usize, Option<usize>)> = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let w = words[i];
        let next = words.get(i + 1).copied();
        if let Some(k) = FORWARD.iter().position(|p| p[0] == w) {
            if next != Some(FORWARD[k][1]) {
                return Err(unexpected(i + 1));
            }
            actions.push(Action::Forward);
            i += 2;
        } else if TURN.contains(&w) {
            match next {
                Some("left") => actions.push(Action::TurnLeft),
                Some("right") => actions.push(Action::TurnRight),
                _ => return Err(unexpected(i + 1)),
            }
            i += 2;
        } else if LANDMARK.contains(&w) {
            let tag = match (next, words.get(i + 2).and_then(|t| tag_of(t))) {
                (Some("the"), Some(t)) => t,
                _ => return Err(unexpected(i + 1)),
            };
            if actions.last() != Some(&Action::Forward) {
                return Err(Error::Parse(format!("landmark at {i} does not follow a move")));
            }
            refs.push((actions.len(), Some(tag)));
            i += 3;
        } else if STOP.contains(&w) {
            match next {
                Some("here") => {
                    refs.push((actions.len(), None));
                    i += 2;
                }
                Some("at") => {
                    let tag = match (words.get(i + 2), words.get(i + 3).and_then(|t| tag_of(t))) {
                        (Some(&"the"), Some(t)) => t,
                        _ => return Err(unexpected(i + 2)),
                    };
                    refs.push((actions.len(), Some(tag)));
                    i += 4;
                }
                _ => return Err(unexpected(i + 1)),
            }
            actions.push(Action::Stop);
            if i != words.len() {
                return Err(Error::Parse("tokens after the stop phrase".into()));
            }
        } else {
            return Err(unexpected(i));
        }
    }
    if actions.last() != Some(&Action::Stop) {
        return Err(Error::Parse("instruction never stops".into()));
    }
    let (nodes, states) =
        replay(env, start, heading, &actions).map_err(|e| Error::Parse(e.to_string()))?;
    for (at, tag) in refs {
        // position of the agent after the first `at` actions
        let node = states
            .get(at)
            .map(|s| s.0)
            .unwrap_or_else(|| *nodes.last().unwrap());
        if env.tag(node) != tag {
            return Err(Error::Parse(format!(
                "landmark reference does not match node {node}"
            )));
        }
    }
    let route = Route {
        env_id: env.id().to_string(),
        goal: *nodes.last().unwrap(),
        nodes,
        actions,
        start_heading: heading,
    };
    route.validate(env).map_err(|e| Error::Parse(e.to_string()))?;
    Ok(route)
}

/// One labeled example: a gold route and a human-style instruction for it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub env_id: String,
    pub route: Route,
    pub instruction: Instruction,
    pub style_seed: u64,
}

/// How many gold routes and annotations [`build_dataset`] produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    /// Labeled routes per training environment.
    pub train_routes_per_env: usize,
    /// Routes per validation environment, seen or unseen.
    pub val_routes_per_env: usize,
    pub annotations_per_route: usize,
    pub bounds: RouteBounds,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_routes_per_env: 20,
            val_routes_per_env: 20,
            annotations_per_route: 3,
            bounds: RouteBounds::default(),
        }
    }
}

/// Samples gold routes in every environment and annotates each one
/// `annotations_per_route` times, cycling through the annotator styles from
/// a random offset.
pub fn build_dataset(
    world: &World,
    vocab: &Vocabulary,
    cfg: &DatasetConfig,
) -> Result<Vec<DatasetRecord>> {
    let mut out = Vec::new();
    for (e, env) in world.envs().iter().enumerate() {
        let mut routes = stream_rng(cfg.seed, Stream::Routes, e as u64);
        let mut styles = stream_rng(cfg.seed, Stream::Annotation, e as u64);
        let count = match env.split() {
            Split::Train => cfg.train_routes_per_env,
            Split::ValSeen | Split::ValUnseen => cfg.val_routes_per_env,
        };
        for _ in 0..count {
            let route = sample_route(env, &mut routes, cfg.bounds)?;
            let offset = styles.gen_range(0..STYLE_COUNT);
            for k in 0..cfg.annotations_per_route as u64 {
                let style_seed = (offset + k) % STYLE_COUNT;
                out.push(DatasetRecord {
                    env_id: env.id().to_string(),
                    instruction: annotate(&route, env, vocab, style_seed)?,
                    route: route.clone(),
                    style_seed,
                });
            }
        }
    }
    Ok(out)
}

pub fn save_dataset(path: impl AsRef<Path>, records: &[DatasetRecord]) -> Result<()> {
    io::write_jsonl(path, records)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    io::read_jsonl(path)
}
