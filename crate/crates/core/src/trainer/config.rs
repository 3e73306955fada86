use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::follower::Forcing;
use crate::world::RouteBounds;

/// Every knob of pretraining and training. Learning rates are plain SGD
/// step sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Follower step size for augmented and supervised updates.
    pub eta_f: f32,
    /// Speaker step size for the follower-aware update.
    pub eta_s: f32,
    pub pretrain_lr_f: f32,
    pub pretrain_lr_s: f32,
    pub batch_labeled: usize,
    pub batch_augmented: usize,
    pub pretrain_steps: usize,
    /// Last step of the run, pretraining included.
    pub total_steps: usize,
    /// Supervised follower updates after each augmented update.
    pub supervised_ratio: usize,
    pub recon: bool,
    pub bilevel: bool,
    pub keep_prob: f32,
    /// Global-norm clip threshold; 0 disables clipping.
    pub clip_norm: f32,
    pub temperature: f32,
    /// Sample augmented instructions; greedy decoding when false.
    pub aug_sampling: bool,
    pub aug_forcing: Forcing,
    pub max_instr_len: usize,
    pub max_steps: usize,
    pub validate_every: usize,
    pub checkpoint_every: usize,
    pub success_threshold: f64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub augment_pool: usize,
    pub route_min_nodes: usize,
    pub route_max_nodes: usize,
    pub divergence_factor: f32,
    pub divergence_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            eta_f: 0.5,
            eta_s: 0.5,
            pretrain_lr_f: 0.5,
            pretrain_lr_s: 0.5,
            batch_labeled: 16,
            batch_augmented: 16,
            pretrain_steps: 5000,
            total_steps: 20000,
            supervised_ratio: 1,
            recon: true,
            bilevel: true,
            keep_prob: 0.7,
            clip_norm: 5.0,
            temperature: 1.0,
            aug_sampling: true,
            aug_forcing: Forcing::Student,
            max_instr_len: 48,
            max_steps: 20,
            validate_every: 500,
            checkpoint_every: 1000,
            success_threshold: crate::metrics::DEFAULT_SUCCESS_THRESHOLD,
            embed_dim: 32,
            hidden_dim: 64,
            augment_pool: 20000,
            route_min_nodes: 3,
            route_max_nodes: 8,
            divergence_factor: 10.0,
            divergence_window: 1000,
        }
    }
}

impl TrainConfig {
    pub fn clip(&self) -> Option<f32> {
        (self.clip_norm > 0.0).then_some(self.clip_norm)
    }

    pub fn route_bounds(&self) -> RouteBounds {
        RouteBounds {
            min_nodes: self.route_min_nodes,
            max_nodes: self.route_max_nodes,
        }
    }

    /// Checks the invariants every mode relies on.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("eta_f", self.eta_f),
            ("eta_s", self.eta_s),
            ("pretrain_lr_f", self.pretrain_lr_f),
            ("pretrain_lr_s", self.pretrain_lr_s),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("train.{name} must be a positive number, got {v}"));
            }
        }
        if self.total_steps < self.pretrain_steps {
            return bad(format!(
                "train.total_steps ({}) is smaller than train.pretrain_steps ({})",
                self.total_steps, self.pretrain_steps
            ));
        }
        for (name, v) in [
            ("batch_labeled", self.batch_labeled),
            ("batch_augmented", self.batch_augmented),
            ("max_instr_len", self.max_instr_len),
            ("max_steps", self.max_steps),
            ("validate_every", self.validate_every),
            ("checkpoint_every", self.checkpoint_every),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("augment_pool", self.augment_pool),
        ] {
            if v == 0 {
                return bad(format!("train.{name} must be at least 1"));
            }
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return bad(format!("train.keep_prob must lie in (0, 1], got {}", self.keep_prob));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return bad(format!("train.clip_norm must be non-negative, got {}", self.clip_norm));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("train.temperature must be positive, got {}", self.temperature));
        }
        if self.route_min_nodes < 2 || self.route_min_nodes > self.route_max_nodes {
            return bad(format!(
                "route length bounds {}..={} are invalid",
                self.route_min_nodes, self.route_max_nodes
            ));
        }
        if !(self.success_threshold >= 0.0) {
            return bad("train.success_threshold must be non-negative".into());
        }
        if !(self.divergence_factor > 1.0) || self.divergence_window == 0 {
            return bad("divergence policy needs a factor above 1 and a window of at least 1".into());
        }
        Ok(())
    }
}
