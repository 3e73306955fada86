//! Layout of a generated dataset directory.
//!
//! ```text
//! <data>/world.jsonl        every environment graph
//! <data>/vocab.json         token list
//! <data>/train.jsonl        labeled records, one split per file
//! <data>/val-seen.jsonl
//! <data>/val-unseen.jsonl
//! <data>/config.toml        effective generation config
//! ```

use std::path::{Path, PathBuf};

use foam_core::language::{load_dataset, save_dataset, DatasetRecord, Vocabulary};
use foam_core::trainer::TrainData;
use foam_core::world::{Route, Split, World};

use crate::error::CliError;

pub const WORLD_FILE: &str = "world.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";
pub const CONFIG_FILE: &str = "config.toml";

pub fn split_file(split: Split) -> String {
    format!("{}.jsonl", split.as_str())
}

/// Every file the dataset consists of, in a fixed order.
pub fn data_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = vec![dir.join(WORLD_FILE), dir.join(VOCAB_FILE)];
    out.extend(Split::ALL.iter().map(|&s| dir.join(split_file(s))));
    out
}

pub fn save_data(dir: &Path, world: &World, vocab: &Vocabulary, records: &[DatasetRecord]) -> anyhow::Result<()> {
    world.save(dir.join(WORLD_FILE))?;
    vocab.save(dir.join(VOCAB_FILE))?;
    for split in Split::ALL {
        let recs: Vec<DatasetRecord> = records
            .iter()
            .filter(|r| world.get(&r.env_id).map(|e| e.split() == split).unwrap_or(false))
            .cloned()
            .collect();
        save_dataset(dir.join(split_file(split)), &recs)?;
    }
    Ok(())
}

pub fn load_data(dir: &Path) -> anyhow::Result<TrainData> {
    for f in data_files(dir) {
        if !f.is_file() {
            return Err(CliError::Data(format!("missing dataset file {}", f.display())).into());
        }
    }
    let world = World::load(dir.join(WORLD_FILE))?;
    let vocab = Vocabulary::load(dir.join(VOCAB_FILE))?;
    let mut records = Vec::new();
    for split in Split::ALL {
        records.extend(load_dataset(dir.join(split_file(split)))?);
    }
    Ok(TrainData::new(world, vocab, records)?)
}

pub fn parse_split(name: &str) -> Result<Split, CliError> {
    Split::parse(name).ok_or_else(|| {
        CliError::Config(format!(
            "unknown split `{name}` (expected one of {})",
            Split::ALL.map(Split::as_str).join(", ")
        ))
    })
}

/// Distinct routes of `records` in first-seen order, with the indices of the
/// records that annotate each.
pub fn group_by_route(records: &[DatasetRecord]) -> Vec<(Route, Vec<usize>)> {
    let mut out: Vec<(Route, Vec<usize>)> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        match out.iter_mut().rev().find(|(route, _)| *route == r.route) {
            Some((_, idx)) => idx.push(i),
            None => out.push((r.route.clone(), vec![i])),
        }
    }
    out
}
