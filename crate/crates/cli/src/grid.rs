//! Multi-seed experiment grids: every variant trained from the same
//! per-seed pretrained models, evaluated at its best val-seen checkpoint.
//!
//! ```text
//! <out>/seed-<s>/pretrained/     shared by every variant of seed s
//! <out>/seed-<s>/<variant>/      one training run
//! <out>/grid.json                GridReport
//! <out>/grid.md                  summary table
//! ```
//!
//! Runs already present are resumed, so an interrupted grid picks up where
//! it stopped and a finished one is only re-evaluated.

use std::fs;
use std::path::{Path, PathBuf};

use foam_core::io::read_jsonl;
use foam_core::metrics::Aggregate;
use foam_core::trainer::run::{CONFIG_FILE as RUN_CONFIG_FILE, STEPS_FILE};
use foam_core::trainer::StepReport;
use foam_core::world::Split;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoints::{self, Selection};
use crate::commands::{ensure_pretrained, evaluate_models, train_run, TrainArgs};
use crate::config::Settings;
use crate::data::load_data;
use crate::error::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub mode: String,
    pub overrides: Vec<(String, Value)>,
}

impl Variant {
    fn new(name: &str, mode: &str, overrides: &[(&str, Value)]) -> Self {
        Self {
            name: name.into(),
            mode: mode.into(),
            overrides: overrides
                .iter()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect(),
        }
    }
}

/// Full FOAM and the two single-loss ablations.
pub fn ablation_variants() -> Vec<Variant> {
    let on = Value::from(true);
    let off = Value::from(false);
    vec![
        Variant::new("full", "foam", &[("train.recon", on.clone()), ("train.bilevel", on.clone())]),
        Variant::new("-recon", "foam", &[("train.recon", off.clone()), ("train.bilevel", on.clone())]),
        Variant::new("-bilevel", "foam", &[("train.recon", on), ("train.bilevel", off)]),
    ]
}

/// The three training modes with the configured losses.
pub fn mode_variants() -> Vec<Variant> {
    ["supervised-only", "envdrop-baseline", "foam"]
        .into_iter()
        .map(|m| Variant::new(m, m, &[]))
        .collect()
}

pub fn variants_by_name(grid: &str) -> Result<Vec<Variant>, CliError> {
    match grid {
        "ablation" => Ok(ablation_variants()),
        "modes" => Ok(mode_variants()),
        other => Err(CliError::Config(format!(
            "unknown grid `{other}` (expected ablation or modes)"
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for fewer than two values.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self {
            count: values.len(),
            mean,
            std,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HStats {
    pub stats: Stats,
    pub positive_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: String,
    pub mode: String,
    pub seed: u64,
    pub best_step: u64,
    pub val_seen_sr: f64,
    pub val_unseen: Aggregate,
    pub val_unseen_beam_sr: f64,
    /// Gradient-alignment reward over the run's steps.
    pub h: Option<HStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub variant: String,
    pub sr: Stats,
    pub spl: Stats,
    pub ndtw: Stats,
    pub beam_sr: Stats,
    pub h_mean: Option<Stats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub grid: String,
    pub seeds: Vec<u64>,
    pub beam_width: usize,
    pub runs: Vec<RunResult>,
    pub rows: Vec<RowSummary>,
}

impl GridReport {
    pub fn row(&self, variant: &str) -> Option<&RowSummary> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

#[derive(Clone, Debug)]
pub struct GridArgs {
    pub grid: String,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seeds: usize,
    pub beam_width: usize,
    pub jobs: usize,
}

fn h_stats(run_dir: &Path) -> anyhow::Result<Option<HStats>> {
    let reports: Vec<StepReport> = read_jsonl(run_dir.join(STEPS_FILE))?;
    let hs: Vec<f64> = reports
        .iter()
        .filter_map(|r| r.bilevel.as_ref().map(|b| f64::from(b.h)))
        .collect();
    Ok(Stats::of(&hs).map(|stats| HStats {
        positive_fraction: hs.iter().filter(|&&h| h > 0.0).count() as f64 / hs.len() as f64,
        stats,
    }))
}

pub fn run_grid(settings: &Settings, args: &GridArgs) -> anyhow::Result<GridReport> {
    let variants = variants_by_name(&args.grid)?;
    if args.seeds == 0 {
        return Err(CliError::Config("a grid needs at least one seed".into()).into());
    }
    let seeds: Vec<u64> = (0..args.seeds as u64).map(|k| settings.seed + k).collect();
    let per_seed: Vec<Settings> = seeds
        .iter()
        .map(|&s| settings.with("seed", Value::from(s)))
        .collect::<Result<_, _>>()?;
    for s in &per_seed {
        for v in &variants {
            let mut vs = s.clone();
            for (k, val) in &v.overrides {
                vs = vs.with(k, val.clone())?;
            }
            vs.train.validate()?;
            foam_core::trainer::default_modes()
                .get(&v.mode)?
                .check_config(&vs.train)?;
        }
    }
    let data = load_data(&args.data_dir)?;
    let mut runs = Vec::new();
    for (seed, s) in seeds.iter().zip(&per_seed) {
        let seed_dir = args.out_dir.join(format!("seed-{seed}"));
        let pre_dir = seed_dir.join("pretrained");
        ensure_pretrained(s, &args.data_dir, &pre_dir, args.jobs)?;
        for v in &variants {
            let mut vs = s.clone();
            for (k, val) in &v.overrides {
                vs = vs.with(k, val.clone())?;
            }
            let run_dir = seed_dir.join(&v.name);
            let train_args = TrainArgs {
                mode: v.mode.clone(),
                data_dir: args.data_dir.clone(),
                pretrained: Some(pre_dir.clone()),
                resume: run_dir.join(RUN_CONFIG_FILE).is_file(),
                run_dir: run_dir.clone(),
                stop_after: None,
                jobs: args.jobs,
            };
            train_run(&vs, &train_args)?;
            let loaded = checkpoints::load(&run_dir, Selection::Best)?;
            let seen = evaluate_models(&data, &loaded, Split::ValSeen, "greedy", 1, args.jobs)?;
            let unseen = evaluate_models(&data, &loaded, Split::ValUnseen, "greedy", 1, args.jobs)?;
            let beam = evaluate_models(&data, &loaded, Split::ValUnseen, "beam", args.beam_width, args.jobs)?;
            runs.push(RunResult {
                variant: v.name.clone(),
                mode: v.mode.clone(),
                seed: *seed,
                best_step: loaded.step,
                val_seen_sr: seen.result.mean.sr,
                val_unseen: unseen.result.mean,
                val_unseen_beam_sr: beam.result.mean.sr,
                h: h_stats(&run_dir)?,
            });
        }
    }
    let rows = variants
        .iter()
        .map(|v| {
            let mine: Vec<&RunResult> = runs.iter().filter(|r| r.variant == v.name).collect();
            let col = |f: &dyn Fn(&RunResult) -> f64| {
                Stats::of(&mine.iter().map(|r| f(r)).collect::<Vec<_>>()).expect("one run per seed")
            };
            let h_means: Vec<f64> = mine
                .iter()
                .filter_map(|r| r.h.as_ref().map(|h| h.stats.mean))
                .collect();
            RowSummary {
                variant: v.name.clone(),
                sr: col(&|r| r.val_unseen.sr),
                spl: col(&|r| r.val_unseen.spl),
                ndtw: col(&|r| r.val_unseen.ndtw),
                beam_sr: col(&|r| r.val_unseen_beam_sr),
                h_mean: Stats::of(&h_means),
            }
        })
        .collect();
    let report = GridReport {
        grid: args.grid.clone(),
        seeds,
        beam_width: args.beam_width,
        runs,
        rows,
    };
    fs::create_dir_all(&args.out_dir)?;
    fs::write(
        args.out_dir.join("grid.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    fs::write(args.out_dir.join("grid.md"), render_table(&report))?;
    Ok(report)
}

fn pm(s: &Stats, scale: f64) -> String {
    format!("{:.1} ± {:.1}", s.mean * scale, s.std * scale)
}

/// Markdown summary: one row per variant, val-unseen metrics in percent.
pub fn render_table(report: &GridReport) -> String {
    let mut out = format!(
        "{} grid, seeds {:?}, val-unseen, best val-seen checkpoint\n\n\
         | variant | SR | SPL | nDTW | beam{} SR | mean h |\n\
         |---|---|---|---|---|---|\n",
        report.grid, report.seeds, report.beam_width
    );
    for r in &report.rows {
        let h = r
            .h_mean
            .as_ref()
            .map_or("-".to_string(), |h| format!("{:.3} ± {:.3}", h.mean, h.std));
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            r.variant,
            pm(&r.sr, 100.0),
            pm(&r.spl, 100.0),
            pm(&r.ndtw, 100.0),
            pm(&r.beam_sr, 100.0),
            h
        ));
    }
    let with_h: Vec<&RunResult> = report.runs.iter().filter(|r| r.h.is_some()).collect();
    if !with_h.is_empty() {
        out.push_str("\n| run | h mean | h std | h min | h max | h > 0 |\n|---|---|---|---|---|---|\n");
        for r in with_h {
            let h = r.h.as_ref().expect("filtered");
            out.push_str(&format!(
                "| {} seed {} | {:.3} | {:.3} | {:.3} | {:.3} | {:.0}% |\n",
                r.variant,
                r.seed,
                h.stats.mean,
                h.stats.std,
                h.stats.min,
                h.stats.max,
                100.0 * h.positive_fraction
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_by_hand() {
        let s = Stats::of(&[1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!(s.mean, 3.0);
        assert!((s.std - (14.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!((s.min, s.max), (1.0, 6.0));
        assert_eq!(Stats::of(&[4.0]).unwrap().std, 0.0);
        assert!(Stats::of(&[]).is_none());
    }

    #[test]
    fn ablation_grid_has_three_rows() {
        let names: Vec<_> = ablation_variants().into_iter().map(|v| v.name).collect();
        assert_eq!(names, ["full", "-recon", "-bilevel"]);
    }
}
