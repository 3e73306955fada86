use rand::Rng;

use crate::error::{Error, Result};
use crate::follower::{Episode, EpisodeBatch};
use crate::language::{DatasetRecord, Vocabulary};
use crate::rng::{stream_rng, Stream};
use crate::speaker::{RouteInput, SpeakerBatch};
use crate::world::{sample_route, Route, RouteBounds, Split, World};

/// World, vocabulary, and labeled records for every split.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub world: World,
    pub vocab: Vocabulary,
    pub train: Vec<DatasetRecord>,
    pub val_seen: Vec<DatasetRecord>,
    pub val_unseen: Vec<DatasetRecord>,
}

impl TrainData {
    pub fn new(
        world: World,
        vocab: Vocabulary,
        records: impl IntoIterator<Item = DatasetRecord>,
    ) -> Result<Self> {
        let mut data = Self {
            world,
            vocab,
            train: Vec::new(),
            val_seen: Vec::new(),
            val_unseen: Vec::new(),
        };
        for r in records {
            let env = data.world.get(&r.env_id)?;
            if r.route.env_id != r.env_id {
                return Err(Error::Data(format!(
                    "record for `{}` carries a route in `{}`",
                    r.env_id, r.route.env_id
                )));
            }
            r.instruction.check(data.vocab.len())?;
            match env.split() {
                Split::Train => data.train.push(r),
                Split::ValSeen => data.val_seen.push(r),
                Split::ValUnseen => data.val_unseen.push(r),
            }
        }
        if data.train.is_empty() {
            return Err(Error::Data("no labeled training records".into()));
        }
        Ok(data)
    }

    pub fn split(&self, split: Split) -> &[DatasetRecord] {
        match split {
            Split::Train => &self.train,
            Split::ValSeen => &self.val_seen,
            Split::ValUnseen => &self.val_unseen,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.world.observation_dim()
    }
}

/// Uniform draw of `n` training records with replacement.
pub fn sample_records<'a, R: Rng>(
    records: &'a [DatasetRecord],
    n: usize,
    rng: &mut R,
) -> Vec<&'a DatasetRecord> {
    (0..n)
        .map(|_| &records[rng.gen_range(0..records.len())])
        .collect()
}

pub fn follower_batch(world: &World, records: &[&DatasetRecord]) -> Result<EpisodeBatch> {
    let episodes: Vec<Episode> = records
        .iter()
        .map(|r| Episode {
            instruction: r.instruction.clone(),
            route: r.route.clone(),
            mask: None,
        })
        .collect();
    EpisodeBatch::new(world, &episodes)
}

pub fn speaker_batch(world: &World, records: &[&DatasetRecord]) -> Result<SpeakerBatch> {
    let items: Vec<(RouteInput, _)> = records
        .iter()
        .map(|r| (RouteInput::plain(r.route.clone()), r.instruction.clone()))
        .collect();
    SpeakerBatch::new(world, &items)
}

/// Sampled training routes for back-translation. Epoch `e` of the pool is
/// regenerated from `(seed, e)`, so any slice can be rebuilt on resume.
#[derive(Clone, Debug)]
pub struct AugmentPool {
    seed: u64,
    size: usize,
    bounds: RouteBounds,
    epoch: Option<u64>,
    routes: Vec<Route>,
}

impl AugmentPool {
    pub fn new(seed: u64, size: usize, bounds: RouteBounds) -> Self {
        Self {
            seed,
            size: size.max(1),
            bounds,
            epoch: None,
            routes: Vec::new(),
        }
    }

    fn fill(&mut self, world: &World, epoch: u64) -> Result<()> {
        let envs: Vec<_> = world.split(Split::Train).collect();
        if envs.is_empty() {
            return Err(Error::Data("no training environments to sample routes from".into()));
        }
        let mut rng = stream_rng(self.seed, Stream::AugmentPool, epoch);
        self.routes.clear();
        for _ in 0..self.size {
            let env = envs[rng.gen_range(0..envs.len())];
            self.routes.push(sample_route(env, &mut rng, self.bounds)?);
        }
        self.epoch = Some(epoch);
        Ok(())
    }

    /// Routes for the `index`-th augmented batch of size `n`.
    pub fn batch(&mut self, world: &World, index: u64, n: usize) -> Result<Vec<Route>> {
        let mut out = Vec::with_capacity(n);
        for k in 0..n as u64 {
            let flat = index * n as u64 + k;
            let epoch = flat / self.size as u64;
            if self.epoch != Some(epoch) {
                self.fill(world, epoch)?;
            }
            out.push(self.routes[(flat % self.size as u64) as usize].clone());
        }
        Ok(out)
    }
}
