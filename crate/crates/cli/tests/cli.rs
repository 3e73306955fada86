use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use foam_cli::commands::{compare_cmd, gen_world, EvalReport};
use foam_cli::checkpoints::Selection;
use foam_cli::manifest::{RunManifest, MANIFEST_FILE};
use foam_cli::{CliError, Settings};
use serde_json::Value;
use tempfile::TempDir;

const QUICK: &[&str] = &[
    "world.train_envs=3",
    "world.val_seen_envs=1",
    "world.val_unseen_envs=1",
    "world.grid_width=3",
    "world.grid_height=3",
    "data.train_routes_per_env=4",
    "data.val_routes_per_env=3",
    "data.route_min_nodes=2",
    "data.route_max_nodes=4",
    "train.route_min_nodes=2",
    "train.route_max_nodes=4",
    "train.embed_dim=8",
    "train.hidden_dim=12",
    "train.batch_labeled=4",
    "train.batch_augmented=4",
    "train.augment_pool=30",
    "train.max_instr_len=24",
    "train.max_steps=8",
    "train.pretrain_steps=10",
    "train.total_steps=16",
    "train.validate_every=4",
    "train.checkpoint_every=4",
];

fn foam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_foam"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn with_quick(mut args: Vec<&str>) -> Vec<&str> {
    for s in QUICK {
        args.push("--set");
        args.push(s);
    }
    args
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen_quick(dir: &Path, extra: &[&str]) {
    let mut args = with_quick(vec!["gen-world", "--out", p(dir)]);
    args.extend_from_slice(extra);
    ok(foam(&args));
}

fn files_except_manifest(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != MANIFEST_FILE)
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn gen_world_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen_quick(&a, &[]);
    gen_quick(&b, &[]);
    let fa = files_except_manifest(&a);
    assert!(fa.len() >= 5);
    assert_eq!(fa, files_except_manifest(&b));

    let c = tmp.path().join("c");
    gen_quick(&c, &["--seed", "1"]);
    assert_ne!(fa, files_except_manifest(&c));
}

#[test]
fn gen_world_counts_and_annotations() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("w");
    let stdout = ok(foam(&with_quick(vec![
        "gen-world", "--out", p(&dir), "--counts", "10/2/2",
    ])));
    assert!(stdout.contains("10/2/2"), "{stdout}");
    assert_eq!(fs::read_to_string(dir.join("world.jsonl")).unwrap().lines().count(), 14);

    for split in ["train", "val-seen", "val-unseen"] {
        let records = jsonl(&dir.join(format!("{split}.jsonl")));
        assert!(!records.is_empty());
        assert_eq!(records.len() % 3, 0, "{split}");
        for group in records.chunks(3) {
            assert!(group.iter().all(|r| r["route"] == group[0]["route"]), "{split}");
        }
    }
}

#[test]
fn gen_world_refuses_non_empty_dir() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("keep.txt"), "x").unwrap();
    let out = foam(&with_quick(vec!["gen-world", "--out", p(tmp.path())]));
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(fs::read_to_string(tmp.path().join("keep.txt")).unwrap(), "x");
    ok(foam(&with_quick(vec!["gen-world", "--out", p(tmp.path()), "--force"])));
    assert!(tmp.path().join("world.jsonl").is_file());
}

#[test]
fn config_precedence() {
    let tmp = TempDir::new().unwrap();
    let file = tmp.path().join("c.toml");
    fs::write(&file, "seed = 7\n[train]\neta_s = 0.2\nhidden_dim = 10\n").unwrap();
    let s = Settings::resolve(
        Some(&file),
        &[("train.eta_s".into(), Value::from(0.3))],
    )
    .unwrap();
    assert_eq!(s.train.eta_s, 0.3);
    assert_eq!(s.train.hidden_dim, 10);
    assert_eq!(s.seed, 7);
    assert_eq!(s.train.embed_dim, Settings::resolve(None, &[]).unwrap().train.embed_dim);

    let dir = tmp.path().join("w");
    let args = with_quick(vec![
        "gen-world", "--config", p(&file), "--out", p(&dir), "--set", "train.eta_s=0.3", "--seed", "9",
    ]);
    ok(foam(&args));
    let m = RunManifest::load(&dir).unwrap();
    assert_eq!(m.seed, 9);
    assert_eq!(m.config["train.eta_s"], Value::from(0.3));
    assert_eq!(m.config["train.hidden_dim"], Value::from(12));
    assert_eq!(m.config["train.eta_f"], Settings::resolve(None, &[]).unwrap().flat()["train.eta_f"]);
    assert_eq!(m.settings().unwrap().train.eta_s, 0.3);
}

#[test]
fn bad_configuration_exits_2() {
    let tmp = TempDir::new().unwrap();
    let out = foam(&["gen-world", "--out", p(&tmp.path().join("w")), "--set", "train.eta_q=1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = foam(&["gen-world", "--out", p(&tmp.path().join("w")), "--counts", "1/2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn foam_without_speaker_losses_is_rejected_before_work() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen_quick(&data, &[]);
    let run = tmp.path().join("run");
    let out = foam(&with_quick(vec![
        "train", "--data", p(&data), "--out", p(&run), "--mode", "foam", "--no-recon", "--no-bilevel",
    ]));
    assert_eq!(out.status.code(), Some(2));
    assert!(!run.exists());
    let out = foam(&with_quick(vec!["train", "--data", p(&data), "--out", p(&run), "--mode", "nope"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oracle_compare_is_perfect() {
    let tmp = TempDir::new().unwrap();
    let mut s = Settings::resolve(None, &[]).unwrap();
    for kv in QUICK {
        let (k, v) = foam_cli::config::parse_override(kv).unwrap();
        s = s.with(&k, v).unwrap();
    }
    gen_world(&s, tmp.path(), false).unwrap();
    for split in ["train", "val-unseen"] {
        let r = compare_cmd(tmp.path(), None, Selection::Best, split, 1).unwrap();
        assert_eq!(r.bleu, 100.0);
        let pairs = r.histogram.pairs();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0], (0, r.records));
    }
}

fn reports(dir: &Path) -> Vec<(String, String)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read_to_string(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn checkpoint_files(run: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(run.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    v.sort();
    v
}

/// One trained quick run shared by the downstream command checks.
#[test]
fn train_evaluate_speak_compare() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen_quick(&data, &[]);
    let run = tmp.path().join("run");
    let stdout = ok(foam(&with_quick(vec!["train", "--data", p(&data), "--out", p(&run)])));
    assert!(stdout.contains("best val-seen checkpoint"), "{stdout}");
    let names: Vec<String> = checkpoint_files(&run)
        .iter()
        .map(|f| f.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names.len(), 6);
    assert_eq!(names[4], "step-00000016.follower.ckpt");
    let manifest = RunManifest::load(&run).unwrap();
    assert_eq!(manifest.mode.as_deref(), Some("foam"));
    assert!(manifest.finished_at.is_some());

    // evaluating twice gives identical reports; beam width 1 equals greedy
    let e1 = tmp.path().join("e1");
    let e2 = tmp.path().join("e2");
    for e in [&e1, &e2] {
        ok(foam(&["evaluate", "--data", p(&data), "--model", p(&run), "--out", p(e)]));
    }
    assert_eq!(reports(&e1), reports(&e2));
    assert_eq!(reports(&e1).len(), 2);
    let b1 = tmp.path().join("b1");
    ok(foam(&[
        "evaluate", "--data", p(&data), "--model", p(&run), "--out", p(&b1), "--beam", "1", "--split", "val-unseen",
    ]));
    let greedy: EvalReport = serde_json::from_str(
        &reports(&e1).into_iter().find(|(n, _)| n.starts_with("val-unseen")).unwrap().1,
    )
    .unwrap();
    let beam: EvalReport = serde_json::from_str(&reports(&b1)[0].1).unwrap();
    assert_eq!(beam.beam_width, Some(1));
    assert_eq!(greedy.result, beam.result);

    let out = foam(&["evaluate", "--data", p(&data), "--model", p(&run), "--split", "test"]);
    assert_eq!(out.status.code(), Some(2));

    // one generated line per distinct route
    let spoken = tmp.path().join("spoken.jsonl");
    ok(foam(&["speak", "--data", p(&data), "--model", p(&run), "--out", p(&spoken)]));
    let routes: BTreeSet<String> = jsonl(&data.join("val-unseen.jsonl"))
        .iter()
        .map(|r| r["route"].to_string())
        .collect();
    assert_eq!(jsonl(&spoken).len(), routes.len());
    let route_file = tmp.path().join("routes.jsonl");
    let two: Vec<String> = jsonl(&data.join("train.jsonl"))
        .iter()
        .take(2)
        .map(|r| r["route"].to_string())
        .collect();
    fs::write(&route_file, two.join("\n") + "\n").unwrap();
    let spoken2 = tmp.path().join("spoken2.jsonl");
    ok(foam(&[
        "speak", "--data", p(&data), "--model", p(&run), "--routes", p(&route_file), "--out", p(&spoken2),
    ]));
    assert_eq!(jsonl(&spoken2).len(), 2);

    let report_file = tmp.path().join("cmp.json");
    let stdout = ok(foam(&[
        "compare", "--data", p(&data), "--model", p(&run), "--out", p(&report_file),
    ]));
    assert!(stdout.contains("BLEU"), "{stdout}");
    let cmp: Value = serde_json::from_str(&fs::read_to_string(&report_file).unwrap()).unwrap();
    let bleu = cmp["bleu"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&bleu));

    // a world with another tag inventory has another vocabulary
    let other = tmp.path().join("other");
    gen_quick(&other, &["--set", "world.num_tags=10", "--set", "world.tags_per_env=2"]);
    for cmd in ["evaluate", "speak"] {
        let out_file = tmp.path().join("x.jsonl");
        let mut args = vec![cmd, "--data", p(&other), "--model", p(&run)];
        if cmd == "speak" {
            args.extend(["--out", p(&out_file)]);
        }
        let out = foam(&args);
        assert_eq!(out.status.code(), Some(3), "{cmd}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("vocabulary mismatch"));
    }

    // tampering with a recorded input is caught at load time
    let train_file = data.join("train.jsonl");
    let mut text = fs::read_to_string(&train_file).unwrap();
    text.push('\n');
    fs::write(&train_file, text).unwrap();
    let out = foam(&["evaluate", "--data", p(&data), "--model", p(&run)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("changed since it was recorded"));
    let err = RunManifest::load(&run).unwrap().verify().unwrap_err();
    assert!(matches!(err, CliError::Data(_)));
}

#[test]
fn resumed_cli_run_matches_uninterrupted() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen_quick(&data, &[]);
    let pre = tmp.path().join("pre");
    ok(foam(&with_quick(vec!["pretrain", "--data", p(&data), "--out", p(&pre)])));

    let whole = tmp.path().join("whole");
    ok(foam(&with_quick(vec![
        "train", "--data", p(&data), "--out", p(&whole), "--pretrained", p(&pre),
    ])));
    let split = tmp.path().join("split");
    ok(foam(&with_quick(vec![
        "train", "--data", p(&data), "--out", p(&split), "--pretrained", p(&pre), "--stop-after", "14",
    ])));
    ok(foam(&with_quick(vec![
        "train", "--data", p(&data), "--out", p(&split), "--pretrained", p(&pre), "--resume",
    ])));
    for f in ["steps.jsonl", "validation.jsonl", "best.json"] {
        assert_eq!(fs::read(whole.join(f)).unwrap(), fs::read(split.join(f)).unwrap(), "{f}");
    }
    // the interrupted run also keeps the checkpoint it stopped at
    let a = checkpoint_files(&whole);
    let b = checkpoint_files(&split);
    assert_eq!(b.len(), a.len() + 2);
    for x in &a {
        let y = split.join("checkpoints").join(x.file_name().unwrap());
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
    let steps: Vec<u64> = jsonl(&split.join("steps.jsonl"))
        .iter()
        .map(|r| r["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, (11..=16).collect::<Vec<_>>());
}
