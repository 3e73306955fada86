//! Loading trained models from a pretraining directory or a run directory.

use std::fs;
use std::path::{Path, PathBuf};

use foam_autodiff::checkpoint;
use foam_core::trainer::run::{checkpoint_steps, load_state, BestStep, RunSnapshot, BEST_FILE, CONFIG_FILE};
use foam_core::trainer::{Models, TrainConfig, TrainData, TrainState};

use crate::error::CliError;
use crate::manifest::{RunManifest, MANIFEST_FILE};

pub const FOLLOWER_CKPT: &str = "follower.ckpt";
pub const SPEAKER_CKPT: &str = "speaker.ckpt";
pub const MODELS_FILE: &str = "models.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    Best,
    Last,
    Step(u64),
}

impl std::str::FromStr for Selection {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "best" => Ok(Selection::Best),
            "last" => Ok(Selection::Last),
            other => other.parse().map(Selection::Step).map_err(|_| {
                CliError::Config(format!("checkpoint must be best, last, or a step number, got `{other}`"))
            }),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Loaded {
    pub models: Models,
    pub config: TrainConfig,
    pub state: TrainState,
    pub step: u64,
    pub source: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?)
}

/// Loads the models stored in `dir`, which is either a training run or a
/// pretraining output. The manifest, when present, is verified first.
pub fn load(dir: &Path, sel: Selection) -> anyhow::Result<Loaded> {
    if dir.join(MANIFEST_FILE).is_file() {
        RunManifest::load(dir)?.verify()?;
    }
    if dir.join(CONFIG_FILE).is_file() {
        let snap: RunSnapshot = read_json(&dir.join(CONFIG_FILE))?;
        let steps = checkpoint_steps(dir)?;
        let step = match sel {
            Selection::Best if dir.join(BEST_FILE).is_file() => {
                read_json::<BestStep>(&dir.join(BEST_FILE))?.step
            }
            Selection::Best | Selection::Last => *steps
                .last()
                .ok_or_else(|| CliError::Data(format!("no checkpoints in {}", dir.display())))?,
            Selection::Step(s) => {
                if !steps.contains(&s) {
                    return Err(CliError::Data(format!(
                        "no checkpoint for step {s} in {}",
                        dir.display()
                    ))
                    .into());
                }
                s
            }
        };
        let state = load_state(dir, step)?;
        snap.models.follower.check(&state.follower)?;
        snap.models.speaker.check(&state.speaker)?;
        return Ok(Loaded {
            models: snap.models,
            config: snap.config,
            state,
            step,
            source: dir.to_path_buf(),
        });
    }
    if dir.join(MODELS_FILE).is_file() {
        let models: Models = read_json(&dir.join(MODELS_FILE))?;
        let manifest = RunManifest::load(dir)?;
        let config = manifest.settings()?.train;
        let state = TrainState {
            follower: checkpoint::load(dir.join(FOLLOWER_CKPT))?,
            speaker: checkpoint::load(dir.join(SPEAKER_CKPT))?,
        };
        models.follower.check(&state.follower)?;
        models.speaker.check(&state.speaker)?;
        return Ok(Loaded {
            models,
            step: config.pretrain_steps as u64,
            config,
            state,
            source: dir.to_path_buf(),
        });
    }
    Err(CliError::Data(format!(
        "{} holds neither a training run nor pretrained models",
        dir.display()
    ))
    .into())
}

/// Both models must use the dataset's vocabulary.
pub fn check_vocab(models: &Models, data: &TrainData) -> Result<(), CliError> {
    let n = data.vocab.len();
    for (name, size) in [
        ("follower", models.follower.vocab_size),
        ("speaker", models.speaker.vocab_size),
    ] {
        if size != n {
            return Err(CliError::Data(format!(
                "vocabulary mismatch: {name} checkpoint has {size} tokens, dataset has {n}"
            )));
        }
    }
    if models.follower.obs_dim != data.obs_dim() {
        return Err(CliError::Data(format!(
            "observation size mismatch: checkpoint expects {}, world provides {}",
            models.follower.obs_dim,
            data.obs_dim()
        )));
    }
    Ok(())
}
