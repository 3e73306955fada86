use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use foam_core::trainer::Which;
use serde_json::Value;

use foam_cli::checkpoints::Selection;
use foam_cli::commands::{self, EvalArgs, RouteSource, TrainArgs};
use foam_cli::config::parse_override;
use foam_cli::grid::{self, GridArgs};
use foam_cli::{exit_code, CliError, Settings};

#[derive(Parser)]
#[command(name = "foam", version = foam_cli::manifest::VERSION, about = "Speaker/follower navigation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct ConfigArgs {
    /// TOML file with flat dotted keys (e.g. `train.eta_s = 0.1`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.eta_s=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Global seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self, extra: &[(&str, Value)]) -> Result<Settings, CliError> {
        let mut overrides = Vec::new();
        for s in &self.set {
            overrides.push(parse_override(s)?);
        }
        if let Some(seed) = self.seed {
            overrides.push(("seed".into(), Value::from(seed)));
        }
        overrides.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
        Settings::resolve(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate environments, gold routes and oracle annotations.
    GenWorld {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Environment counts as TRAIN/VAL_SEEN/VAL_UNSEEN.
        #[arg(long)]
        counts: Option<String>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Supervised pretraining of the follower and/or speaker.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// follower, speaker, or both.
        #[arg(long, default_value = "both")]
        model: String,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Train with one of the registered modes.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// foam, envdrop-baseline, or supervised-only.
        #[arg(long, default_value = "foam")]
        mode: String,
        /// Pretrained models; pretrains into `<out>/pretrained` when omitted.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        /// Drop the straight-through reconstruction loss.
        #[arg(long)]
        no_recon: bool,
        /// Drop the bi-level loss.
        #[arg(long)]
        no_bilevel: bool,
        /// Continue the run in `--out` from its latest checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this step (the run can be resumed later).
        #[arg(long)]
        stop_after: Option<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score a checkpoint on one or more splits.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// Training run or pretraining directory.
        #[arg(long)]
        model: PathBuf,
        /// best, last, or a step number.
        #[arg(long, default_value = "best")]
        checkpoint: String,
        #[arg(long = "split", default_values_t = vec!["val-seen".to_string(), "val-unseen".to_string()])]
        splits: Vec<String>,
        /// Speaker-rescored beam search of this width.
        #[arg(long)]
        beam: Option<usize>,
        /// Evaluation policy by name; `--beam` implies `beam`.
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Generate instructions for routes.
    Speak {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "best")]
        checkpoint: String,
        /// JSONL route file; defaults to the routes of `--split`.
        #[arg(long)]
        routes: Option<PathBuf>,
        #[arg(long, default_value = "val-unseen")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Corpus BLEU and length histogram of generated (or oracle) instructions
    /// against the oracle annotations.
    Compare {
        #[arg(long)]
        data: PathBuf,
        /// Speaker to compare; the oracle annotations themselves when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "best")]
        checkpoint: String,
        #[arg(long, default_value = "train")]
        split: String,
        /// Histogram bucket width in tokens.
        #[arg(long, default_value_t = 1)]
        bucket: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Multi-seed grid: the loss ablation (default) or the three modes.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "ablation")]
        grid: String,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn parse_counts(s: &str) -> Result<[usize; 3], CliError> {
    let parts: Vec<&str> = s.split('/').collect();
    let bad = || CliError::Config(format!("--counts expects TRAIN/VAL_SEEN/VAL_UNSEEN, got `{s}`"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| bad())?;
    }
    Ok(out)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenWorld { cfg, out, counts, force } => {
            let mut extra = Vec::new();
            if let Some(c) = counts {
                let [t, s, u] = parse_counts(&c)?;
                extra.push(("world.train_envs", Value::from(t)));
                extra.push(("world.val_seen_envs", Value::from(s)));
                extra.push(("world.val_unseen_envs", Value::from(u)));
            }
            let settings = cfg.resolve(&extra)?;
            let summary = commands::gen_world(&settings, &out, force)?;
            println!(
                "environments train/val-seen/val-unseen: {}/{}/{}",
                summary.environments[0], summary.environments[1], summary.environments[2]
            );
            println!(
                "records      train/val-seen/val-unseen: {}/{}/{}",
                summary.records[0], summary.records[1], summary.records[2]
            );
        }
        Command::Pretrain { cfg, data, out, model, jobs } => {
            let which = match model.as_str() {
                "both" => vec![Which::Follower, Which::Speaker],
                other => vec![Which::parse(other)?],
            };
            let settings = cfg.resolve(&[])?;
            commands::pretrain_models(&settings, &data, &out, &which, jobs)?;
            println!("pretrained models written to {}", out.display());
        }
        Command::Train {
            cfg,
            data,
            out,
            mode,
            pretrained,
            no_recon,
            no_bilevel,
            resume,
            stop_after,
            jobs,
        } => {
            let mut extra = Vec::new();
            if no_recon {
                extra.push(("train.recon", Value::from(false)));
            }
            if no_bilevel {
                extra.push(("train.bilevel", Value::from(false)));
            }
            let settings = cfg.resolve(&extra)?;
            let args = TrainArgs {
                mode,
                data_dir: data,
                pretrained,
                run_dir: out.clone(),
                resume,
                stop_after,
                jobs,
            };
            let summary = commands::train_run(&settings, &args)?;
            println!(
                "steps {}..={} done; best val-seen checkpoint at step {} in {}",
                summary.first_step + 1,
                summary.last_step,
                summary.best_step,
                out.display()
            );
        }
        Command::Evaluate {
            data,
            model,
            checkpoint,
            splits,
            beam,
            policy,
            out,
            jobs,
        } => {
            let policy = policy.unwrap_or_else(|| if beam.is_some() { "beam" } else { "greedy" }.into());
            let args = EvalArgs {
                data_dir: data,
                model_dir: model,
                checkpoint: checkpoint.parse::<Selection>()?,
                splits,
                policy,
                beam_width: beam.unwrap_or(5),
                jobs,
                out_dir: out,
            };
            for r in commands::evaluate_cmd(&args)? {
                println!("{} step {}: {}", r.policy, r.step, r.result.summary_line());
            }
        }
        Command::Speak {
            data,
            model,
            checkpoint,
            routes,
            split,
            out,
        } => {
            let source = match routes {
                Some(p) => RouteSource::File(p),
                None => RouteSource::Split(split),
            };
            let n = commands::speak_cmd(&data, &model, checkpoint.parse()?, &source, &out)?;
            println!("{n} instructions written to {}", out.display());
        }
        Command::Compare {
            data,
            model,
            checkpoint,
            split,
            bucket,
            out,
        } => {
            let report =
                commands::compare_cmd(&data, model.as_deref(), checkpoint.parse()?, &split, bucket)?;
            println!("{} on {} ({} records): BLEU {:.2}", report.hypotheses, report.split, report.records, report.bleu);
            println!("length difference (reference - generated), bucket width {}:", report.histogram.bucket_width);
            for (k, c) in report.histogram.pairs() {
                println!("  {k:>4} {c}");
            }
            if let Some(p) = out {
                std::fs::write(&p, serde_json::to_string_pretty(&report)? + "\n")
                    .with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Ablate {
            cfg,
            data,
            out,
            grid: name,
            seeds,
            beam,
            jobs,
        } => {
            let settings = cfg.resolve(&[])?;
            let args = GridArgs {
                grid: name,
                data_dir: data,
                out_dir: out,
                seeds,
                beam_width: beam,
                jobs,
            };
            let report = grid::run_grid(&settings, &args)?;
            print!("{}", grid::render_table(&report));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
