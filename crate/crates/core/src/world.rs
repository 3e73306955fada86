//! Procedural grid-graph environments, routes, and observation features.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::rng::{stream_rng, Stream};

pub const TAG_NAMES: &[&str] = &[
    "red", "blue", "green", "yellow", "purple", "orange", "white", "black", "brown", "pink",
    "gray", "gold",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "val-seen")]
    ValSeen,
    #[serde(rename = "val-unseen")]
    ValUnseen,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::ValSeen, Split::ValUnseen];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::ValSeen => "val-seen",
            Split::ValUnseen => "val-unseen",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|sp| sp.as_str() == s)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Compass heading; turning right moves clockwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Heading {
    N,
    E,
    S,
    W,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::N, Heading::E, Heading::S, Heading::W];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Heading {
        Heading::ALL[i % 4]
    }

    pub fn left(self) -> Heading {
        Heading::from_index(self.index() + 3)
    }

    pub fn right(self) -> Heading {
        Heading::from_index(self.index() + 1)
    }

    pub fn delta(self) -> (i32, i32) {
        match self {
            Heading::N => (0, -1),
            Heading::E => (1, 0),
            Heading::S => (0, 1),
            Heading::W => (-1, 0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    Forward,
    TurnLeft,
    TurnRight,
    Stop,
}

impl Action {
    pub const COUNT: usize = 4;
    pub const ALL: [Action; 4] = [
        Action::Forward,
        Action::TurnLeft,
        Action::TurnRight,
        Action::Stop,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Action {
        Action::ALL[i]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    pub pos: (i32, i32),
    pub features: Vec<f32>,
    /// Index into [`TAG_NAMES`]; `None` for plain nodes.
    pub tag: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RawEnvironment {
    id: String,
    split: Split,
    width: usize,
    height: usize,
    nodes: Vec<Node>,
    edges: Vec<(usize, usize)>,
}

/// Connected grid graph with per-node features. Immutable once built.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "RawEnvironment", into = "RawEnvironment")]
pub struct EnvironmentGraph {
    id: String,
    split: Split,
    width: usize,
    height: usize,
    nodes: Vec<Node>,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<[Option<usize>; 4]>,
    dist: Vec<u32>,
}

impl From<EnvironmentGraph> for RawEnvironment {
    fn from(e: EnvironmentGraph) -> Self {
        RawEnvironment {
            id: e.id,
            split: e.split,
            width: e.width,
            height: e.height,
            nodes: e.nodes,
            edges: e.edges,
        }
    }
}

impl TryFrom<RawEnvironment> for EnvironmentGraph {
    type Error = Error;

    fn try_from(r: RawEnvironment) -> Result<Self> {
        EnvironmentGraph::new(r.id, r.split, r.width, r.height, r.nodes, r.edges)
    }
}

const UNREACHABLE: u32 = u32::MAX;

impl EnvironmentGraph {
    /// Validates the graph and precomputes neighbour tables and all-pairs
    /// hop distances.
    pub fn new(
        id: String,
        split: Split,
        width: usize,
        height: usize,
        nodes: Vec<Node>,
        edges: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let n = nodes.len();
        if n == 0 {
            return Err(Error::World(format!("environment `{id}` has no nodes")));
        }
        for (i, node) in nodes.iter().enumerate() {
            if node.id != i {
                return Err(Error::World(format!("`{id}`: node {i} has id {}", node.id)));
            }
        }
        let mut neighbors = vec![[None; 4]; n];
        for &(a, b) in &edges {
            if a >= n || b >= n || a == b {
                return Err(Error::World(format!("`{id}`: bad edge ({a}, {b})")));
            }
            let (pa, pb) = (nodes[a].pos, nodes[b].pos);
            let d = (pb.0 - pa.0, pb.1 - pa.1);
            let h = Heading::ALL
                .into_iter()
                .find(|h| h.delta() == d)
                .ok_or_else(|| {
                    Error::World(format!("`{id}`: edge ({a}, {b}) joins non-adjacent cells"))
                })?;
            if neighbors[a][h.index()].is_some() {
                return Err(Error::World(format!("`{id}`: duplicate edge ({a}, {b})")));
            }
            neighbors[a][h.index()] = Some(b);
            neighbors[b][h.left().left().index()] = Some(a);
        }
        let mut env = EnvironmentGraph {
            id,
            split,
            width,
            height,
            nodes,
            edges,
            neighbors,
            dist: Vec::new(),
        };
        env.dist = env.all_pairs();
        if env.dist.contains(&UNREACHABLE) {
            return Err(Error::World(format!("environment `{}` is not connected", env.id)));
        }
        Ok(env)
    }

    fn bfs(&self, src: usize) -> (Vec<u32>, Vec<usize>) {
        let n = self.nodes.len();
        let mut dist = vec![UNREACHABLE; n];
        let mut parent = vec![usize::MAX; n];
        let mut q = VecDeque::new();
        dist[src] = 0;
        q.push_back(src);
        while let Some(u) = q.pop_front() {
            for v in self.neighbors[u].iter().flatten() {
                if dist[*v] == UNREACHABLE {
                    dist[*v] = dist[u] + 1;
                    parent[*v] = u;
                    q.push_back(*v);
                }
            }
        }
        (dist, parent)
    }

    fn all_pairs(&self) -> Vec<u32> {
        let n = self.nodes.len();
        let mut out = Vec::with_capacity(n * n);
        for s in 0..n {
            out.extend(self.bfs(s).0);
        }
        out
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.nodes[0].features.len()
    }

    pub fn node(&self, id: usize) -> Result<&Node> {
        self.nodes.get(id).ok_or_else(|| Error::UnknownNode {
            env: self.id.clone(),
            node: id,
        })
    }

    pub fn tag(&self, id: usize) -> Option<usize> {
        self.nodes.get(id).and_then(|n| n.tag)
    }

    pub fn degree(&self, id: usize) -> usize {
        self.neighbors[id].iter().flatten().count()
    }

    /// Neighbour reached by moving along `heading`, if that edge exists.
    pub fn neighbor(&self, node: usize, heading: Heading) -> Option<usize> {
        self.neighbors.get(node).and_then(|n| n[heading.index()])
    }

    pub fn heading_between(&self, a: usize, b: usize) -> Option<Heading> {
        Heading::ALL
            .into_iter()
            .find(|&h| self.neighbor(a, h) == Some(b))
    }

    /// Hop distance between two nodes.
    pub fn shortest_distance(&self, a: usize, b: usize) -> Result<usize> {
        let n = self.nodes.len();
        self.node(a)?;
        self.node(b)?;
        match self.dist[a * n + b] {
            UNREACHABLE => Err(Error::Disconnected {
                env: self.id.clone(),
                a,
                b,
            }),
            d => Ok(d as usize),
        }
    }

    /// Shortest path from `a` to `b` (inclusive). Ties are broken by
    /// exploring neighbours in N, E, S, W order.
    pub fn shortest_path(&self, a: usize, b: usize) -> Result<Vec<usize>> {
        self.node(a)?;
        self.node(b)?;
        let (dist, parent) = self.bfs(a);
        if dist[b] == UNREACHABLE {
            return Err(Error::Disconnected {
                env: self.id.clone(),
                a,
                b,
            });
        }
        let mut path = vec![b];
        let mut cur = b;
        while cur != a {
            cur = parent[cur];
            path.push(cur);
        }
        path.reverse();
        Ok(path)
    }

    /// Observation vector: the node's features (optionally dropped out),
    /// followed by a one-hot heading.
    pub fn observe(
        &self,
        node: usize,
        heading: Heading,
        mask: Option<&DropoutMask>,
    ) -> Result<Vec<f32>> {
        let feats = &self.node(node)?.features;
        let mut out = match mask {
            Some(m) => m.apply(feats)?,
            None => feats.clone(),
        };
        let mut onehot = [0.0f32; 4];
        onehot[heading.index()] = 1.0;
        out.extend_from_slice(&onehot);
        Ok(out)
    }

    pub fn observation_dim(&self) -> usize {
        self.feature_dim() + 4
    }

    /// Whether moving forward from `(node, heading)` is possible.
    pub fn can_forward(&self, node: usize, heading: Heading) -> bool {
        self.neighbor(node, heading).is_some()
    }
}

/// One agent transition. Forward into a wall is `None`.
pub fn transition(
    env: &EnvironmentGraph,
    node: usize,
    heading: Heading,
    action: Action,
) -> Option<(usize, Heading)> {
    match action {
        Action::Forward => env.neighbor(node, heading).map(|n| (n, heading)),
        Action::TurnLeft => Some((node, heading.left())),
        Action::TurnRight => Some((node, heading.right())),
        Action::Stop => Some((node, heading)),
    }
}

/// Replays `actions` from `(start, heading)`. Returns the visited node
/// sequence (one entry per move, start included) and the state before each
/// action. Invalid forward moves are an error.
pub fn replay(
    env: &EnvironmentGraph,
    start: usize,
    heading: Heading,
    actions: &[Action],
) -> Result<(Vec<usize>, Vec<(usize, Heading)>)> {
    env.node(start)?;
    let mut nodes = vec![start];
    let mut states = Vec::with_capacity(actions.len());
    let (mut node, mut h) = (start, heading);
    for (i, &a) in actions.iter().enumerate() {
        states.push((node, h));
        let (n2, h2) = transition(env, node, h, a).ok_or_else(|| {
            Error::InvalidRoute(format!(
                "action {i} moves forward into a wall at node {node} heading {h:?}"
            ))
        })?;
        if n2 != node {
            nodes.push(n2);
        }
        node = n2;
        h = h2;
    }
    Ok((nodes, states))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    pub env_id: String,
    pub nodes: Vec<usize>,
    pub actions: Vec<Action>,
    pub start_heading: Heading,
    pub goal: usize,
}

impl Route {
    pub fn start(&self) -> usize {
        self.nodes[0]
    }

    /// Path length in hops.
    pub fn hops(&self) -> usize {
        self.nodes.len().saturating_sub(1)
    }

    /// `(node, heading)` before each action.
    pub fn states(&self, env: &EnvironmentGraph) -> Result<Vec<(usize, Heading)>> {
        Ok(replay(env, self.start(), self.start_heading, &self.actions)?.1)
    }

    /// Checks every structural invariant of a complete route in `env`.
    pub fn validate(&self, env: &EnvironmentGraph) -> Result<()> {
        if self.env_id != env.id() {
            return Err(Error::InvalidRoute(format!(
                "route belongs to `{}`, not `{}`",
                self.env_id,
                env.id()
            )));
        }
        if self.nodes.is_empty() {
            return Err(Error::InvalidRoute("empty node sequence".into()));
        }
        for w in self.nodes.windows(2) {
            if env.heading_between(w[0], w[1]).is_none() {
                return Err(Error::InvalidRoute(format!(
                    "nodes {} and {} are not adjacent",
                    w[0], w[1]
                )));
            }
        }
        if self.actions.last() != Some(&Action::Stop) {
            return Err(Error::InvalidRoute("last action is not stop".into()));
        }
        if self.actions[..self.actions.len() - 1].contains(&Action::Stop) {
            return Err(Error::InvalidRoute("stop before the final action".into()));
        }
        let (replayed, _) = replay(env, self.start(), self.start_heading, &self.actions)?;
        if replayed != self.nodes {
            return Err(Error::InvalidRoute(
                "actions do not replay to the node sequence".into(),
            ));
        }
        if self.goal != *self.nodes.last().unwrap() {
            return Err(Error::InvalidRoute("goal is not the final node".into()));
        }
        Ok(())
    }
}

/// Builds the route along a node path, starting with the heading of the
/// first edge and turning the short way at each corner.
pub fn route_from_path(env: &EnvironmentGraph, path: &[usize]) -> Result<Route> {
    if path.is_empty() {
        return Err(Error::InvalidRoute("empty path".into()));
    }
    let start_heading = if path.len() > 1 {
        env.heading_between(path[0], path[1])
            .ok_or_else(|| Error::InvalidRoute("path nodes not adjacent".into()))?
    } else {
        Heading::N
    };
    let mut actions = Vec::new();
    let mut h = start_heading;
    for w in path.windows(2) {
        let want = env
            .heading_between(w[0], w[1])
            .ok_or_else(|| Error::InvalidRoute("path nodes not adjacent".into()))?;
        if want == h.right() {
            actions.push(Action::TurnRight);
        } else if want == h.left() {
            actions.push(Action::TurnLeft);
        } else if want != h {
            actions.push(Action::TurnRight);
            actions.push(Action::TurnRight);
        }
        h = want;
        actions.push(Action::Forward);
    }
    actions.push(Action::Stop);
    Ok(Route {
        env_id: env.id().to_string(),
        nodes: path.to_vec(),
        actions,
        start_heading,
        goal: *path.last().unwrap(),
    })
}

/// Inclusive bounds on the number of nodes in a sampled route.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteBounds {
    pub min_nodes: usize,
    pub max_nodes: usize,
}

impl Default for RouteBounds {
    fn default() -> Self {
        Self {
            min_nodes: 3,
            max_nodes: 8,
        }
    }
}

pub const ROUTE_SAMPLING_ATTEMPTS: usize = 1000;

/// Shortest-path route between two uniformly drawn distinct nodes whose
/// path has a node count within `bounds`.
pub fn sample_route<R: Rng>(
    env: &EnvironmentGraph,
    rng: &mut R,
    bounds: RouteBounds,
) -> Result<Route> {
    let n = env.node_count();
    if n >= 2 && bounds.min_nodes <= bounds.max_nodes {
        for _ in 0..ROUTE_SAMPLING_ATTEMPTS {
            let a = rng.gen_range(0..n);
            let mut b = rng.gen_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            let nodes = env.shortest_distance(a, b)? + 1;
            if (bounds.min_nodes..=bounds.max_nodes).contains(&nodes) {
                let path = env.shortest_path(a, b)?;
                return route_from_path(env, &path);
            }
        }
    }
    Err(Error::RouteSampling {
        env: env.id().to_string(),
        min: bounds.min_nodes,
        max: bounds.max_nodes,
        attempts: ROUTE_SAMPLING_ATTEMPTS,
    })
}

/// Episode-level feature dropout: the same dimensions are zeroed for every
/// observation in an episode, and kept dimensions are rescaled by
/// `1 / keep_prob`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutMask {
    pub kept: Vec<bool>,
    pub keep_prob: f32,
}

impl DropoutMask {
    pub fn all_kept(dim: usize) -> Self {
        Self {
            kept: vec![true; dim],
            keep_prob: 1.0,
        }
    }

    pub fn sample<R: Rng>(dim: usize, keep_prob: f32, rng: &mut R) -> Self {
        let p = f64::from(keep_prob.clamp(0.0, 1.0));
        Self {
            kept: (0..dim).map(|_| rng.gen_bool(p)).collect(),
            keep_prob,
        }
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        (0..self.kept.len()).filter(|&i| self.kept[i]).collect()
    }

    fn check(&self, v: &[f32]) -> Result<()> {
        if v.len() != self.kept.len() {
            return Err(Error::Data(format!(
                "dropout mask of width {} applied to {} features",
                self.kept.len(),
                v.len()
            )));
        }
        Ok(())
    }

    /// Zeroes dropped dimensions without rescaling. Idempotent.
    pub fn zero_out(&self, v: &[f32]) -> Result<Vec<f32>> {
        self.check(v)?;
        Ok(v.iter()
            .zip(&self.kept)
            .map(|(&x, &k)| if k { x } else { 0.0 })
            .collect())
    }

    /// Inverted dropout: zero dropped dimensions, scale kept ones.
    pub fn apply(&self, v: &[f32]) -> Result<Vec<f32>> {
        self.check(v)?;
        let scale = if self.keep_prob > 0.0 {
            1.0 / self.keep_prob
        } else {
            0.0
        };
        Ok(v.iter()
            .zip(&self.kept)
            .map(|(&x, &k)| if k { x * scale } else { 0.0 })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    pub train_envs: usize,
    pub val_seen_envs: usize,
    pub val_unseen_envs: usize,
    pub grid_width: usize,
    pub grid_height: usize,
    pub feature_dim: usize,
    pub num_tags: usize,
    pub tags_per_env: usize,
    pub landmark_prob: f64,
    pub extra_edge_prob: f64,
    pub feature_noise: f32,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_envs: 10,
            val_seen_envs: 2,
            val_unseen_envs: 2,
            grid_width: 5,
            grid_height: 5,
            feature_dim: 16,
            num_tags: 12,
            tags_per_env: 3,
            landmark_prob: 0.4,
            extra_edge_prob: 0.3,
            feature_noise: 0.1,
        }
    }
}

impl WorldConfig {
    /// Tags `0..seen` may appear in train and val-seen; the rest only in
    /// val-unseen.
    pub fn seen_tag_count(&self) -> usize {
        self.num_tags - self.num_tags / 3
    }

    pub fn tag_pool(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train | Split::ValSeen => 0..self.seen_tag_count(),
            Split::ValUnseen => self.seen_tag_count()..self.num_tags,
        }
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_envs,
            Split::ValSeen => self.val_seen_envs,
            Split::ValUnseen => self.val_unseen_envs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for split in Split::ALL {
            if self.count(split) == 0 {
                return Err(Error::World(format!("need at least one {split} environment")));
            }
        }
        if self.grid_width < 3 || self.grid_height < 3 {
            return Err(Error::World(format!(
                "grid must be at least 3x3, got {}x{}",
                self.grid_width, self.grid_height
            )));
        }
        if self.feature_dim < 2 {
            return Err(Error::World("feature dimension must be at least 2".into()));
        }
        if self.num_tags > TAG_NAMES.len() {
            return Err(Error::World(format!(
                "at most {} landmark tags are available",
                TAG_NAMES.len()
            )));
        }
        for split in [Split::Train, Split::ValUnseen] {
            let pool = self.tag_pool(split).len();
            if self.tags_per_env == 0 || self.tags_per_env > pool {
                return Err(Error::World(format!(
                    "{} tags per environment cannot be drawn from the {pool}-tag {split} pool \
                     ({} tags total)",
                    self.tags_per_env, self.num_tags
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.landmark_prob) || !(0.0..=1.0).contains(&self.extra_edge_prob)
        {
            return Err(Error::World("probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn tag_code(seed: u64, tag: usize, dim: usize) -> Vec<f32> {
    let mut rng = stream_rng(seed, Stream::World, 1_000_000 + tag as u64);
    (0..dim)
        .map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
        .collect()
}

/// Feature vector: the tag's sign code, the node degree scaled to [0, 1],
/// and seeded uniform noise.
fn node_features<R: Rng>(
    cfg: &WorldConfig,
    tag: Option<usize>,
    degree: usize,
    rng: &mut R,
) -> Vec<f32> {
    let f = cfg.feature_dim;
    let mut v = match tag {
        Some(t) => tag_code(cfg.seed, t, f - 1),
        None => vec![0.0; f - 1],
    };
    v.push(degree as f32 / 4.0);
    if cfg.feature_noise > 0.0 {
        for x in v.iter_mut() {
            *x += rng.gen_range(-cfg.feature_noise..cfg.feature_noise);
        }
    }
    v
}

fn generate_env(cfg: &WorldConfig, split: Split, index: usize) -> Result<EnvironmentGraph> {
    let global = match split {
        Split::Train => 0,
        Split::ValSeen => 1,
        Split::ValUnseen => 2,
    } * 100_000
        + index as u64;
    let mut rng = stream_rng(cfg.seed, Stream::World, global);
    let (w, h) = (cfg.grid_width, cfg.grid_height);
    let cell = |x: usize, y: usize| y * w + x;

    // random spanning tree (Kruskal over shuffled grid edges) plus extras
    let mut grid_edges = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                grid_edges.push((cell(x, y), cell(x + 1, y)));
            }
            if y + 1 < h {
                grid_edges.push((cell(x, y), cell(x, y + 1)));
            }
        }
    }
    grid_edges.shuffle(&mut rng);
    let mut parent: Vec<usize> = (0..w * h).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut edges = Vec::new();
    for &(a, b) in &grid_edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            edges.push((a, b));
        } else if rng.gen_bool(cfg.extra_edge_prob) {
            edges.push((a, b));
        }
    }
    edges.sort_unstable();

    let mut pool: Vec<usize> = cfg.tag_pool(split).collect();
    pool.shuffle(&mut rng);
    let env_tags = &pool[..cfg.tags_per_env];

    let mut degree = vec![0usize; w * h];
    for &(a, b) in &edges {
        degree[a] += 1;
        degree[b] += 1;
    }
    let mut nodes = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let id = cell(x, y);
            let tag = if rng.gen_bool(cfg.landmark_prob) {
                Some(env_tags[rng.gen_range(0..env_tags.len())])
            } else {
                None
            };
            let features = node_features(cfg, tag, degree[id], &mut rng);
            nodes.push(Node {
                id,
                pos: (x as i32, y as i32),
                features,
                tag,
            });
        }
    }
    EnvironmentGraph::new(
        format!("{}-{index:03}", split.as_str()),
        split,
        w,
        h,
        nodes,
        edges,
    )
}

/// Deterministic world: `train`, then `val-seen`, then `val-unseen`
/// environments. Val-unseen environments draw landmark tags from a pool
/// disjoint from the one used for train and val-seen.
pub fn generate_world(cfg: &WorldConfig) -> Result<Vec<EnvironmentGraph>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for split in Split::ALL {
        for i in 0..cfg.count(split) {
            out.push(generate_env(cfg, split, i)?);
        }
    }
    Ok(out)
}

/// Environments indexed by id.
#[derive(Clone, Debug, Default)]
pub struct World {
    envs: Vec<EnvironmentGraph>,
}

impl World {
    pub fn new(envs: Vec<EnvironmentGraph>) -> Result<Self> {
        let mut ids: Vec<&str> = envs.iter().map(|e| e.id()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::World("duplicate environment id".into()));
        }
        if let Some(e) = envs.first() {
            let f = e.feature_dim();
            if envs.iter().any(|x| x.feature_dim() != f) {
                return Err(Error::World("environments disagree on feature dimension".into()));
            }
        }
        Ok(Self { envs })
    }

    pub fn get(&self, id: &str) -> Result<&EnvironmentGraph> {
        self.envs
            .iter()
            .find(|e| e.id() == id)
            .ok_or_else(|| Error::UnknownEnv(id.to_string()))
    }

    pub fn envs(&self) -> &[EnvironmentGraph] {
        &self.envs
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &EnvironmentGraph> {
        self.envs.iter().filter(move |e| e.split() == split)
    }

    pub fn feature_dim(&self) -> usize {
        self.envs.first().map_or(0, |e| e.feature_dim())
    }

    pub fn observation_dim(&self) -> usize {
        self.feature_dim() + 4
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_jsonl(path, &self.envs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        World::new(io::read_jsonl(path)?)
    }
}

pub fn save_routes(path: impl AsRef<Path>, routes: &[Route]) -> Result<()> {
    io::write_jsonl(path, routes)
}

pub fn load_routes(path: impl AsRef<Path>) -> Result<Vec<Route>> {
    io::read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path_graph() -> EnvironmentGraph {
        let nodes = (0..2)
            .map(|i| Node {
                id: i,
                pos: (i as i32, 0),
                features: vec![0.0, 0.0],
                tag: None,
            })
            .collect();
        EnvironmentGraph::new("p".into(), Split::Train, 2, 1, nodes, vec![(0, 1)]).unwrap()
    }

    #[test]
    fn same_seed_same_world() {
        let cfg = WorldConfig {
            seed: 7,
            ..Default::default()
        };
        let a = generate_world(&cfg).unwrap();
        let b = generate_world(&cfg).unwrap();
        let ja = serde_json::to_string(&a).unwrap();
        let jb = serde_json::to_string(&b).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn unseen_tags_disjoint_from_train() {
        let cfg = WorldConfig::default();
        let world = generate_world(&cfg).unwrap();
        let tags = |split| {
            world
                .iter()
                .filter(|e| e.split() == split)
                .flat_map(|e| e.nodes().iter().filter_map(|n| n.tag))
                .collect::<std::collections::BTreeSet<_>>()
        };
        let train = tags(Split::Train);
        let unseen = tags(Split::ValUnseen);
        assert!(!train.is_empty() && !unseen.is_empty());
        assert!(train.is_disjoint(&unseen));
    }

    #[test]
    fn small_grid_degrees_bounded() {
        let cfg = WorldConfig {
            grid_width: 3,
            grid_height: 3,
            extra_edge_prob: 1.0,
            ..Default::default()
        };
        for env in generate_world(&cfg).unwrap() {
            for n in env.nodes() {
                assert!(env.degree(n.id) <= 4);
            }
        }
    }

    #[test]
    fn infeasible_tag_counts_rejected() {
        let cfg = WorldConfig {
            tags_per_env: 5,
            ..Default::default()
        };
        assert!(matches!(generate_world(&cfg), Err(Error::World(_))));
        let cfg = WorldConfig {
            val_unseen_envs: 0,
            ..Default::default()
        };
        assert!(generate_world(&cfg).is_err());
    }

    #[test]
    fn two_node_route() {
        let env = path_graph();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = sample_route(
            &env,
            &mut rng,
            RouteBounds {
                min_nodes: 2,
                max_nodes: 8,
            },
        )
        .unwrap();
        assert_eq!(r.hops(), 1);
        assert_eq!(r.actions, vec![Action::Forward, Action::Stop]);
        r.validate(&env).unwrap();
    }

    #[test]
    fn impossible_bounds_name_env() {
        let env = path_graph();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_route(
            &env,
            &mut rng,
            RouteBounds {
                min_nodes: 5,
                max_nodes: 8,
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("`p`"));
    }

    #[test]
    fn distance_basics() {
        let env = &generate_world(&WorldConfig::default()).unwrap()[0];
        assert_eq!(env.shortest_distance(3, 3).unwrap(), 0);
        let (a, b) = env.edges()[0];
        assert_eq!(env.shortest_distance(a, b).unwrap(), 1);
        for x in 0..env.node_count() {
            for y in 0..env.node_count() {
                assert_eq!(
                    env.shortest_distance(x, y).unwrap(),
                    env.shortest_distance(y, x).unwrap()
                );
            }
        }
        assert!(env.shortest_distance(0, 999).is_err());
    }

    #[test]
    fn observe_with_masks() {
        let env = &generate_world(&WorldConfig::default()).unwrap()[0];
        let f = env.feature_dim();
        let plain = env.observe(0, Heading::E, None).unwrap();
        let kept = env
            .observe(0, Heading::E, Some(&DropoutMask::all_kept(f)))
            .unwrap();
        assert_eq!(plain, kept);
        assert_eq!(&plain[f..], &[0.0, 1.0, 0.0, 0.0]);

        let mut half = DropoutMask::all_kept(f);
        half.keep_prob = 0.5;
        half.kept[1] = false;
        let obs = env.observe(0, Heading::E, Some(&half)).unwrap();
        assert_eq!(obs[0], plain[0] * 2.0);
        assert_eq!(obs[1], 0.0);

        let other = env.observe(5, Heading::N, Some(&half)).unwrap();
        let zeros = |v: &[f32]| (0..f).filter(|&i| v[i] == 0.0).collect::<Vec<_>>();
        assert!(zeros(&other).contains(&1));
        assert!(zeros(&obs).contains(&1));
        assert!(env.observe(999, Heading::N, None).is_err());
    }

    #[test]
    fn world_file_round_trip() {
        let envs = generate_world(&WorldConfig::default()).unwrap();
        let text: Vec<String> = envs
            .iter()
            .map(|e| serde_json::to_string(e).unwrap())
            .collect();
        let back: Vec<EnvironmentGraph> = text
            .iter()
            .map(|t| serde_json::from_str(t).unwrap())
            .collect();
        for (a, b) in envs.iter().zip(&back) {
            assert_eq!(serde_json::to_string(a).unwrap(), serde_json::to_string(b).unwrap());
            assert_eq!(a.shortest_distance(0, 7).unwrap(), b.shortest_distance(0, 7).unwrap());
        }
    }

    #[test]
    fn disconnected_graph_rejected() {
        let nodes = (0..3)
            .map(|i| Node {
                id: i,
                pos: (i as i32, 0),
                features: vec![0.0, 0.0],
                tag: None,
            })
            .collect();
        assert!(EnvironmentGraph::new("d".into(), Split::Train, 3, 1, nodes, vec![(0, 1)]).is_err());
    }
}
