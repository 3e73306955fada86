//! The subcommands, callable in-process.

use std::fs;
use std::path::{Path, PathBuf};

use foam_autodiff::checkpoint;
use foam_core::io::write_jsonl;
use foam_core::language::{build_dataset, DatasetRecord, Vocabulary};
use foam_core::metrics::{corpus_bleu, length_histogram, EvalResult, LengthHistogram};
use foam_core::rng::{stream_rng, Stream};
use foam_core::speaker::{generate_batch, Decoding, RouteInput};
use foam_core::trainer::run::CONFIG_FILE as RUN_CONFIG_FILE;
use foam_core::trainer::{
    default_modes, default_policies, evaluate, pretrain, EvalContext, EvalOptions, Models,
    RunOptions, RunSummary, TrainData, TrainState, Which,
};
use foam_core::world::{generate_world, load_routes, Route, Split, World};
use serde::{Deserialize, Serialize};

use crate::checkpoints::{self, check_vocab, Loaded, Selection, FOLLOWER_CKPT, MODELS_FILE, SPEAKER_CKPT};
use crate::config::{Settings, PRETRAIN_KEYS};
use crate::data::{self, data_files, group_by_route, load_data};
use crate::error::CliError;
use crate::manifest::{RunManifest, MANIFEST_FILE};

fn ensure_empty_or_forced(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.is_dir() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| CliError::Data(format!("cannot list {}: {e}", dir.display())))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(CliError::Config(format!(
                "{} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenWorldSummary {
    pub environments: [usize; 3],
    pub records: [usize; 3],
}

/// Generates environments, gold routes and oracle annotations into `out`.
pub fn gen_world(settings: &Settings, out: &Path, force: bool) -> anyhow::Result<GenWorldSummary> {
    settings.world.validate()?;
    let world = World::new(generate_world(&settings.world)?)?;
    let vocab = Vocabulary::for_tags(settings.world.num_tags);
    let records = build_dataset(&world, &vocab, &settings.dataset_config())?;
    ensure_empty_or_forced(out, force)?;
    data::save_data(out, &world, &vocab, &records)?;
    fs::write(out.join(data::CONFIG_FILE), settings.to_toml())?;
    let mut files = data_files(out);
    files.push(out.join(data::CONFIG_FILE));
    let mut manifest = RunManifest::new("gen-world", settings, None, &files)?;
    manifest.finish(out)?;

    let mut summary = GenWorldSummary {
        environments: [0; 3],
        records: [0; 3],
    };
    for (i, split) in Split::ALL.into_iter().enumerate() {
        summary.environments[i] = world.split(split).count();
    }
    for r in &records {
        let split = world.get(&r.env_id)?.split();
        let i = Split::ALL.iter().position(|&s| s == split).expect("known split");
        summary.records[i] += 1;
    }
    Ok(summary)
}

pub fn models_for(settings: &Settings, data: &TrainData) -> Models {
    Models::new(
        data.vocab.len(),
        data.obs_dim(),
        settings.train.embed_dim,
        settings.train.hidden_dim,
    )
}

pub fn initial_params(settings: &Settings, models: &Models) -> TrainState {
    TrainState {
        follower: models.follower.init(&mut stream_rng(settings.seed, Stream::Init, 0)),
        speaker: models.speaker.init(&mut stream_rng(settings.seed, Stream::Init, 1)),
    }
}

/// Pretrains the models named in `which` and stores them in `out`. A model
/// not named keeps its random initialization.
pub fn pretrain_models(
    settings: &Settings,
    data_dir: &Path,
    out: &Path,
    which: &[Which],
    jobs: usize,
) -> anyhow::Result<TrainState> {
    settings.train.validate()?;
    let data = load_data(data_dir)?;
    fs::create_dir_all(out)?;
    let mut manifest = RunManifest::new("pretrain", settings, None, &data_files(data_dir))?;
    manifest.write(out)?;
    let models = models_for(settings, &data);
    let mut state = initial_params(settings, &models);
    for &w in which {
        let init = match w {
            Which::Follower => &state.follower,
            Which::Speaker => &state.speaker,
        };
        let outcome = pretrain(&settings.train, &data, &models, w, init, jobs)?;
        write_jsonl(out.join(format!("pretrain-{}.jsonl", w.as_str())), &outcome.log)?;
        match w {
            Which::Follower => state.follower = outcome.best,
            Which::Speaker => state.speaker = outcome.best,
        }
    }
    checkpoint::save(out.join(FOLLOWER_CKPT), &state.follower)?;
    checkpoint::save(out.join(SPEAKER_CKPT), &state.speaker)?;
    fs::write(out.join(MODELS_FILE), serde_json::to_string_pretty(&models)? + "\n")?;
    manifest.finish(out)?;
    Ok(state)
}

/// Pretrained models in `dir`, reusing them when they were produced from the
/// same data and pretraining configuration and computing them otherwise.
pub fn ensure_pretrained(
    settings: &Settings,
    data_dir: &Path,
    dir: &Path,
    jobs: usize,
) -> anyhow::Result<TrainState> {
    if dir.join(MANIFEST_FILE).is_file() {
        let manifest = RunManifest::load(dir)?;
        let previous = manifest.settings()?;
        let same_inputs = manifest.files.len() == data_files(data_dir).len()
            && manifest
                .files
                .iter()
                .zip(data_files(data_dir))
                .all(|(f, p)| fs::canonicalize(p).map(|p| p == f.path).unwrap_or(false));
        if !same_inputs || previous.subset(PRETRAIN_KEYS) != settings.subset(PRETRAIN_KEYS) {
            return Err(CliError::Config(format!(
                "{} holds pretrained models for other data or settings",
                dir.display()
            ))
            .into());
        }
        if manifest.finished_at.is_some() {
            return Ok(checkpoints::load(dir, Selection::Last)?.state);
        }
    }
    pretrain_models(settings, data_dir, dir, &[Which::Follower, Which::Speaker], jobs)
}

#[derive(Clone, Debug)]
pub struct TrainArgs {
    pub mode: String,
    pub data_dir: PathBuf,
    /// Pretrained models; pretrained into `<run>/pretrained` when absent.
    pub pretrained: Option<PathBuf>,
    pub run_dir: PathBuf,
    pub resume: bool,
    pub stop_after: Option<u64>,
    pub jobs: usize,
}

pub fn train_run(settings: &Settings, args: &TrainArgs) -> anyhow::Result<RunSummary> {
    let modes = default_modes();
    let mode = modes.get(&args.mode)?;
    settings.train.validate()?;
    mode.check_config(&settings.train)?;
    let run_dir = &args.run_dir;
    let existing = run_dir.join(RUN_CONFIG_FILE).is_file();
    if existing && !args.resume {
        return Err(CliError::Config(format!(
            "{} already holds a run; pass --resume or choose another directory",
            run_dir.display()
        ))
        .into());
    }
    if args.resume && !existing {
        return Err(CliError::Data(format!("no run to resume in {}", run_dir.display())).into());
    }

    let data = load_data(&args.data_dir)?;
    let models = models_for(settings, &data);
    let pre_dir = args
        .pretrained
        .clone()
        .unwrap_or_else(|| run_dir.join("pretrained"));
    let init = if args.pretrained.is_some() {
        checkpoints::load(&pre_dir, Selection::Last)?.state
    } else {
        ensure_pretrained(settings, &args.data_dir, &pre_dir, args.jobs)?
    };
    models.follower.check(&init.follower)?;
    models.speaker.check(&init.speaker)?;

    let mut manifest = if args.resume {
        let m = RunManifest::load(run_dir)?;
        m.verify()?;
        if m.config != *settings.flat() || m.mode.as_deref() != Some(mode.name()) {
            return Err(CliError::Config(format!(
                "{} was started with a different mode or configuration",
                run_dir.display()
            ))
            .into());
        }
        m
    } else {
        fs::create_dir_all(run_dir)?;
        let mut files = data_files(&args.data_dir);
        files.push(pre_dir.join(FOLLOWER_CKPT));
        files.push(pre_dir.join(SPEAKER_CKPT));
        let m = RunManifest::new("train", settings, Some(mode.name()), &files)?;
        m.write(run_dir)?;
        m
    };
    let opts = RunOptions {
        run_dir: run_dir.clone(),
        resume: args.resume,
        stop_after: args.stop_after,
        jobs: args.jobs,
    };
    let summary = foam_core::trainer::train(&settings.train, mode, &data, &models, &init, &opts)?;
    if summary.last_step >= settings.train.total_steps as u64 {
        manifest.finish(run_dir)?;
    }
    Ok(summary)
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub data_dir: PathBuf,
    pub model_dir: PathBuf,
    pub checkpoint: Selection,
    pub splits: Vec<String>,
    pub policy: String,
    pub beam_width: usize,
    pub jobs: usize,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub beam_width: Option<usize>,
    pub step: u64,
    pub result: EvalResult,
}

fn eval_options(cfg: &foam_core::trainer::TrainConfig, beam_width: usize, jobs: usize) -> EvalOptions {
    EvalOptions {
        beam_width: beam_width.max(1),
        max_steps: cfg.max_steps,
        threshold: cfg.success_threshold,
        jobs: jobs.max(1),
    }
}

pub fn evaluate_models(
    data: &TrainData,
    loaded: &Loaded,
    split: Split,
    policy: &str,
    beam_width: usize,
    jobs: usize,
) -> anyhow::Result<EvalReport> {
    let policies = default_policies();
    let p = policies.get(policy)?;
    let ctx = EvalContext {
        follower: &loaded.state.follower,
        speaker: Some(&loaded.state.speaker),
        models: &loaded.models,
        world: &data.world,
    };
    let opts = eval_options(&loaded.config, beam_width, jobs);
    let result = evaluate(&ctx, data.split(split), split, p, &opts)?;
    Ok(EvalReport {
        policy: p.name().to_string(),
        beam_width: (p.name() == "beam").then_some(opts.beam_width),
        step: loaded.step,
        result,
    })
}

pub fn evaluate_cmd(args: &EvalArgs) -> anyhow::Result<Vec<EvalReport>> {
    let splits = args
        .splits
        .iter()
        .map(|s| data::parse_split(s))
        .collect::<Result<Vec<_>, _>>()?;
    default_policies().get(&args.policy)?;
    let data = load_data(&args.data_dir)?;
    let loaded = checkpoints::load(&args.model_dir, args.checkpoint)?;
    check_vocab(&loaded.models, &data)?;
    let out_dir = args
        .out_dir
        .clone()
        .unwrap_or_else(|| args.model_dir.join("eval"));
    fs::create_dir_all(&out_dir)?;
    let mut reports = Vec::new();
    for split in splits {
        let report = evaluate_models(&data, &loaded, split, &args.policy, args.beam_width, args.jobs)?;
        let name = match report.beam_width {
            Some(w) => format!("{}-{}{w}-step{}.json", split.as_str(), report.policy, report.step),
            None => format!("{}-{}-step{}.json", split.as_str(), report.policy, report.step),
        };
        fs::write(out_dir.join(name), serde_json::to_string_pretty(&report)? + "\n")?;
        reports.push(report);
    }
    Ok(reports)
}

/// Where the routes to describe come from.
#[derive(Clone, Debug)]
pub enum RouteSource {
    File(PathBuf),
    Split(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpokenInstruction {
    pub index: usize,
    pub env_id: String,
    pub instruction: String,
    pub log_prob: f32,
}

/// Greedy speaker instructions for `routes`, in order.
pub fn speak_routes(
    loaded: &Loaded,
    world: &World,
    routes: &[Route],
) -> anyhow::Result<Vec<foam_core::speaker::SpeakerSample>> {
    let mut out = Vec::with_capacity(routes.len());
    let mut unused = stream_rng(0, Stream::SpeakerSampling, 0);
    for chunk in routes.chunks(64) {
        let inputs: Vec<RouteInput> = chunk.iter().cloned().map(RouteInput::plain).collect();
        out.extend(generate_batch(
            &loaded.state.speaker,
            &loaded.models.speaker,
            world,
            &inputs,
            Decoding::Greedy,
            loaded.config.max_instr_len,
            &mut unused,
        )?);
    }
    Ok(out)
}

pub fn speak_cmd(
    data_dir: &Path,
    model_dir: &Path,
    sel: Selection,
    source: &RouteSource,
    out: &Path,
) -> anyhow::Result<usize> {
    let data = load_data(data_dir)?;
    let loaded = checkpoints::load(model_dir, sel)?;
    check_vocab(&loaded.models, &data)?;
    let routes: Vec<Route> = match source {
        RouteSource::File(p) => load_routes(p)?,
        RouteSource::Split(s) => {
            let split = data::parse_split(s)?;
            group_by_route(data.split(split))
                .into_iter()
                .map(|(r, _)| r)
                .collect()
        }
    };
    for r in &routes {
        r.validate(data.world.get(&r.env_id)?)?;
    }
    let samples = speak_routes(&loaded, &data.world, &routes)?;
    let mut lines = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        lines.push(SpokenInstruction {
            index: i,
            env_id: s.route.env_id.clone(),
            instruction: data.vocab.decode(s.instruction.words())?,
            log_prob: s.log_prob,
        });
    }
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    write_jsonl(out, &lines)?;
    Ok(lines.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub split: Split,
    pub hypotheses: String,
    pub records: usize,
    pub bleu: f64,
    pub histogram: LengthHistogram,
}

/// Corpus BLEU and the reference-minus-hypothesis length histogram, one
/// hypothesis per record, all annotations of the record's route as
/// references.
pub fn compare_records(
    records: &[DatasetRecord],
    hyp_for_record: impl Fn(usize) -> Vec<usize>,
    bucket: usize,
) -> anyhow::Result<(f64, LengthHistogram)> {
    let groups = group_by_route(records);
    let mut refs = vec![Vec::new(); records.len()];
    for (_, idx) in &groups {
        let set: Vec<Vec<usize>> = idx
            .iter()
            .map(|&i| records[i].instruction.words().to_vec())
            .collect();
        for &i in idx {
            refs[i] = set.clone();
        }
    }
    let hyps: Vec<Vec<usize>> = (0..records.len()).map(hyp_for_record).collect();
    let own: Vec<Vec<usize>> = records
        .iter()
        .map(|r| r.instruction.words().to_vec())
        .collect();
    let bleu = corpus_bleu(&refs, &hyps, false)?;
    let hist = length_histogram(&own, &hyps, bucket)?;
    Ok((bleu, hist))
}

pub fn compare_cmd(
    data_dir: &Path,
    model_dir: Option<&Path>,
    sel: Selection,
    split: &str,
    bucket: usize,
) -> anyhow::Result<CompareReport> {
    let split = data::parse_split(split)?;
    let data = load_data(data_dir)?;
    let records = data.split(split);
    if records.is_empty() {
        return Err(CliError::Data(format!("split {split} has no records")).into());
    }
    let (label, bleu, histogram) = match model_dir {
        None => {
            let (b, h) = compare_records(records, |i| records[i].instruction.words().to_vec(), bucket)?;
            ("oracle".to_string(), b, h)
        }
        Some(dir) => {
            let loaded = checkpoints::load(dir, sel)?;
            check_vocab(&loaded.models, &data)?;
            let groups = group_by_route(records);
            let routes: Vec<Route> = groups.iter().map(|(r, _)| r.clone()).collect();
            let samples = speak_routes(&loaded, &data.world, &routes)?;
            let mut per_record = vec![0usize; records.len()];
            for (g, (_, idx)) in groups.iter().enumerate() {
                for &i in idx {
                    per_record[i] = g;
                }
            }
            let (b, h) = compare_records(
                records,
                |i| samples[per_record[i]].instruction.words().to_vec(),
                bucket,
            )?;
            (format!("{} step {}", dir.display(), loaded.step), b, h)
        }
    };
    Ok(CompareReport {
        split,
        hypotheses: label,
        records: records.len(),
        bleu,
        histogram,
    })
}
