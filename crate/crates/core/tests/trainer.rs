mod common;

use std::fs;

use foam_autodiff::{flatten_grads, ParamSet, Tape, Tensor};
use foam_core::follower::{follower_loss, follower_loss_from_inputs, EpisodeBatch, Forcing};
use foam_core::language::{build_dataset, DatasetConfig, Vocabulary};
use foam_core::speaker::{generate_batch, speaker_probs, Decoding, RouteInput, SpeakerBatch};
use foam_core::trainer::data::{follower_batch, AugmentPool};
use foam_core::trainer::modes::{EnvDropBaseline, Foam, StepContext, SupervisedOnly};
use foam_core::trainer::run::{checkpoint_steps, STEPS_FILE, VALIDATION_FILE};
use foam_core::trainer::steps::{
    bilevel_grad, bt_follower_step, foam_speaker_step, straight_through_grad, AugmentedBatch,
};
use foam_core::trainer::{pretrain, train, Models, RunOptions, TrainConfig, TrainData, TrainState, TrainingMode, Which};
use foam_core::world::{generate_world, DropoutMask, RouteBounds, Split, World, WorldConfig};
use foam_core::ErrorKind;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn data(seed: u64, train_envs: usize) -> TrainData {
    let wc = WorldConfig {
        seed,
        train_envs,
        val_seen_envs: 1,
        val_unseen_envs: 1,
        grid_width: 4,
        grid_height: 4,
        ..WorldConfig::default()
    };
    let world = World::new(generate_world(&wc).unwrap()).unwrap();
    let vocab = Vocabulary::for_tags(wc.num_tags);
    let dc = DatasetConfig {
        seed,
        train_routes_per_env: 6,
        val_routes_per_env: 4,
        annotations_per_route: 2,
        bounds: RouteBounds { min_nodes: 2, max_nodes: 5 },
    };
    let records = build_dataset(&world, &vocab, &dc).unwrap();
    TrainData::new(world, vocab, records).unwrap()
}

fn config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        embed_dim: 8,
        hidden_dim: 12,
        batch_labeled: 4,
        batch_augmented: 4,
        pretrain_steps: 0,
        total_steps: 6,
        validate_every: 3,
        checkpoint_every: 2,
        augment_pool: 40,
        max_instr_len: 24,
        max_steps: 10,
        route_min_nodes: 2,
        route_max_nodes: 5,
        ..TrainConfig::default()
    }
}

fn models(data: &TrainData, cfg: &TrainConfig) -> Models {
    Models::new(data.vocab.len(), data.obs_dim(), cfg.embed_dim, cfg.hidden_dim)
}

fn init(models: &Models, seed: u64) -> TrainState {
    TrainState {
        follower: models.follower.init(&mut ChaCha8Rng::seed_from_u64(seed)),
        speaker: models.speaker.init(&mut ChaCha8Rng::seed_from_u64(seed + 100)),
    }
}

fn routes(data: &TrainData, cfg: &TrainConfig, n: usize) -> Vec<foam_core::world::Route> {
    AugmentPool::new(cfg.seed, cfg.augment_pool, cfg.route_bounds())
        .batch(&data.world, 0, n)
        .unwrap()
}

/// One augmented batch sampled from `speaker`, every feature kept.
fn sampled_batch(data: &TrainData, m: &Models, speaker: &ParamSet, n: usize, max_len: usize, seed: u64) -> AugmentedBatch {
    let cfg = config(seed);
    let inputs: Vec<RouteInput> = routes(data, &cfg, n).into_iter().map(RouteInput::plain).collect();
    let samples = generate_batch(
        speaker,
        &m.speaker,
        &data.world,
        &inputs,
        Decoding::Sample { temperature: 1.0 },
        max_len,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap();
    let masks = vec![DropoutMask::all_kept(data.world.feature_dim()); n];
    AugmentedBatch::new(samples, masks).unwrap()
}

/// Follower loss when it reads the speaker's soft distributions `P_t E_F`
/// in place of sampled tokens, with its gradient w.r.t. the speaker.
fn relaxed_loss(speaker: &ParamSet, follower: &ParamSet, batch: &AugmentedBatch, m: &Models, world: &World, grad: bool) -> (f32, Option<foam_autodiff::Gradients>) {
    let sbatch = SpeakerBatch::new(world, &batch.speaker_items()).unwrap();
    let mut tape = Tape::new();
    let bs = tape.bind(speaker, grad).unwrap();
    let probs = speaker_probs(&mut tape, &bs, &m.speaker, &sbatch).unwrap();
    let bf = tape.bind(follower, false).unwrap();
    let table = bf.var("follower.embed");
    let inputs: Vec<_> = probs.iter().map(|&p| tape.matmul(p, table).unwrap()).collect();
    let episodes = EpisodeBatch::new(world, &batch.episodes()).unwrap();
    let loss = follower_loss_from_inputs(&mut tape, &bf, &m.follower, &episodes, Forcing::Student, &inputs).unwrap();
    let value = tape.value(loss).item();
    (value, grad.then(|| tape.backward(loss).unwrap()))
}

fn max_abs(g: &foam_autodiff::Gradients) -> f32 {
    g.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.abs())).fold(0.0, f32::max)
}

#[test]
fn zero_follower_rate_keeps_parameters_and_returns_gradient() {
    let d = data(1, 2);
    let cfg = TrainConfig { eta_f: 0.0, ..config(1) };
    let m = models(&d, &cfg);
    let s = init(&m, 1);
    let rs = routes(&d, &cfg, 4);
    let bt = bt_follower_step(&s.follower, &s.speaker, &rs, &m, &d.world, &cfg, 1).unwrap();
    assert!(bt.follower.bitwise_eq(&s.follower));
    assert_eq!(bt.grad_u.vector.len(), s.follower.numel());
    assert!(bt.grad_u.vector.norm() > 0.0);

    let episodes = EpisodeBatch::new(&d.world, &bt.batch.episodes()).unwrap();
    let mut tape = Tape::new();
    let b = tape.bind(&s.follower, true).unwrap();
    let l = follower_loss(&mut tape, &b, &m.follower, &episodes, Forcing::Student).unwrap();
    assert_eq!(tape.value(l).item(), bt.loss_u);
    let again = flatten_grads(&tape.backward(l).unwrap(), &s.follower).unwrap();
    assert_eq!(again.as_slice(), bt.grad_u.vector.as_slice());
    for (mask, route) in bt.batch.masks.iter().zip(bt.batch.routes()) {
        assert_eq!(mask.kept.len(), d.world.feature_dim());
        assert!(rs.contains(route));
    }
}

#[test]
fn follower_step_moves_along_negative_gradient() {
    let d = data(2, 2);
    let cfg = TrainConfig { clip_norm: 0.0, eta_f: 0.1, ..config(2) };
    let m = models(&d, &cfg);
    let s = init(&m, 2);
    let bt = bt_follower_step(&s.follower, &s.speaker, &routes(&d, &cfg, 4), &m, &d.world, &cfg, 3).unwrap();
    let mut k = 0;
    for (name, p) in s.follower.iter() {
        let q = bt.follower.get(name).unwrap();
        for (a, b) in p.data().iter().zip(q.data()) {
            let expected = a - 0.1 * bt.grad_u.vector.as_slice()[k];
            assert!((b - expected).abs() < 1e-6);
            k += 1;
        }
    }
}

#[test]
fn zero_reward_gives_zero_bilevel_gradient() {
    let d = data(3, 2);
    let cfg = config(3);
    let m = models(&d, &cfg);
    let s = init(&m, 3);
    let batch = sampled_batch(&d, &m, &s.speaker, 4, 8, 3);
    let g0 = bilevel_grad(&s.speaker, &batch, &m, &d.world, 0.0).unwrap();
    assert_eq!(max_abs(&g0), 0.0);
    let g1 = bilevel_grad(&s.speaker, &batch, &m, &d.world, 0.5).unwrap();
    let g2 = bilevel_grad(&s.speaker, &batch, &m, &d.world, -1.0).unwrap();
    assert!(max_abs(&g1) > 0.0);
    for ((_, a), (_, b)) in g1.iter().zip(g2.iter()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x * -2.0 - y).abs() < 1e-6);
        }
    }
}

#[test]
fn mismatched_batch_is_rejected() {
    let d = data(4, 2);
    let cfg = config(4);
    let m = models(&d, &cfg);
    let s = init(&m, 4);
    let pool = routes(&d, &cfg, 8);
    let a = bt_follower_step(&s.follower, &s.speaker, &pool[..4], &m, &d.world, &cfg, 1).unwrap();
    let b = bt_follower_step(&s.follower, &s.speaker, &pool[4..], &m, &d.world, &cfg, 2).unwrap();
    let recs: Vec<_> = d.train.iter().take(4).collect();
    let labeled = follower_batch(&d.world, &recs).unwrap();
    let err = foam_speaker_step(&s.speaker, &a.follower, &a.grad_u, &b.batch, &labeled, &m, &d.world, &cfg, 1, a.loss_u).unwrap_err();
    assert!(matches!(err, foam_core::Error::BatchMismatch(_)));
    let (_, report) = foam_speaker_step(&s.speaker, &a.follower, &a.grad_u, &a.batch, &labeled, &m, &d.world, &cfg, 1, a.loss_u).unwrap();
    assert!((-1.0..=1.0).contains(&report.h));
}

#[test]
fn straight_through_approaches_relaxation_at_vertices() {
    let d = data(5, 2);
    let cfg = config(5);
    let m = models(&d, &cfg);
    let s = init(&m, 5);
    let mut errors = Vec::new();
    for bias in [4.0f32, 8.0, 12.0, 16.0] {
        let mut speaker = s.speaker.clone();
        let mut b = vec![0.0; m.speaker.vocab_size];
        b[foam_core::language::EOS] = bias;
        speaker.insert("speaker.out.b", Tensor::new(vec![m.speaker.vocab_size], b).unwrap());
        let batch = sampled_batch(&d, &m, &speaker, 4, 6, 5);
        let st = straight_through_grad(&speaker, &s.follower, &batch, &m, &d.world, Forcing::Student).unwrap();
        let (_, relaxed) = relaxed_loss(&speaker, &s.follower, &batch, &m, &d.world, true);
        let relaxed = relaxed.unwrap().restricted_to(&speaker);
        let scale = max_abs(&relaxed);
        let mut diff = 0.0f32;
        for (name, g) in relaxed.iter() {
            for (x, y) in g.data().iter().zip(st.get(name).unwrap().data()) {
                diff = diff.max((x - y).abs());
            }
        }
        errors.push(diff / scale);
    }
    assert!(errors.windows(2).all(|w| w[1] < w[0]), "{errors:?}");
    assert!(*errors.last().unwrap() < 1e-3, "{errors:?}");
}

#[test]
fn instruction_blind_follower_gives_zero_straight_through_gradient() {
    let d = data(6, 2);
    let cfg = config(6);
    let m = models(&d, &cfg);
    let s = init(&m, 6);
    let mut follower = s.follower.clone();
    follower.insert("follower.embed", Tensor::zeros(&[m.follower.vocab_size, m.follower.embed_dim]));
    let batch = sampled_batch(&d, &m, &s.speaker, 4, 8, 6);
    let st = straight_through_grad(&s.speaker, &follower, &batch, &m, &d.world, Forcing::Student).unwrap();
    assert_eq!(max_abs(&st), 0.0);
    let normal = straight_through_grad(&s.speaker, &s.follower, &batch, &m, &d.world, Forcing::Student).unwrap();
    assert!(max_abs(&normal) > 0.0);
}

#[test]
fn straight_through_sign_matches_logit_probe() {
    let d = data(7, 2);
    let cfg = config(7);
    let m = models(&d, &cfg);
    let mut agree = 0;
    let mut probed = 0;
    for seed in 0..12u64 {
        let s = init(&m, seed);
        let speaker = common::rescaled(&s.speaker, 0.5, seed);
        let follower = common::rescaled(&s.follower, 0.5, seed + 50);
        let batch = sampled_batch(&d, &m, &speaker, 1, 1, seed);
        let tok = batch.samples[0].instruction.tokens()[0];
        // sharpen towards the sampled token so the probe stays near its vertex
        let mut speaker = speaker;
        speaker.get_mut("speaker.out.b").unwrap().data_mut()[tok] += 6.0;
        let st = straight_through_grad(&speaker, &follower, &batch, &m, &d.world, Forcing::Student).unwrap();
        let analytic = st.get("speaker.out.b").unwrap().data()[tok];
        let eps = 1e-2;
        let probe = |delta: f32| {
            let mut p = speaker.clone();
            p.get_mut("speaker.out.b").unwrap().data_mut()[tok] += delta;
            relaxed_loss(&p, &follower, &batch, &m, &d.world, false).0
        };
        let fd = (probe(eps) - probe(-eps)) / (2.0 * eps);
        if fd.abs() > 1e-4 {
            probed += 1;
            if fd.signum() == analytic.signum() {
                agree += 1;
            }
        }
    }
    assert!(probed >= 8, "only {probed} informative probes");
    assert_eq!(agree, probed);
}

#[test]
fn zero_pretraining_returns_initialization() {
    let d = data(8, 2);
    let cfg = config(8);
    let m = models(&d, &cfg);
    let s = init(&m, 8);
    for (which, p) in [(Which::Follower, &s.follower), (Which::Speaker, &s.speaker)] {
        let out = pretrain(&cfg, &d, &m, which, p, 1).unwrap();
        assert!(out.best.bitwise_eq(p));
        assert!(out.last.bitwise_eq(p));
        assert!(out.log.is_empty());
    }
}

#[test]
fn pretraining_is_deterministic() {
    let d = data(9, 2);
    let cfg = TrainConfig { pretrain_steps: 20, total_steps: 20, validate_every: 10, ..config(9) };
    let m = models(&d, &cfg);
    let s = init(&m, 9);
    for (which, p) in [(Which::Follower, &s.follower), (Which::Speaker, &s.speaker)] {
        let a = pretrain(&cfg, &d, &m, which, p, 1).unwrap();
        let b = pretrain(&cfg, &d, &m, which, p, 2).unwrap();
        assert!(a.best.bitwise_eq(&b.best));
        assert!(a.last.bitwise_eq(&b.last));
        assert_eq!(a.log, b.log);
        assert!(!a.last.bitwise_eq(p));
    }
}

#[test]
fn one_environment_pretraining_succeeds() {
    let wc = WorldConfig {
        seed: 0,
        train_envs: 1,
        val_seen_envs: 1,
        val_unseen_envs: 1,
        grid_width: 4,
        grid_height: 4,
        ..WorldConfig::default()
    };
    let world = World::new(generate_world(&wc).unwrap()).unwrap();
    let vocab = Vocabulary::for_tags(wc.num_tags);
    let dc = DatasetConfig {
        seed: 0,
        train_routes_per_env: 200,
        val_routes_per_env: 1,
        annotations_per_route: 3,
        bounds: RouteBounds { min_nodes: 2, max_nodes: 6 },
    };
    let records = build_dataset(&world, &vocab, &dc).unwrap();
    let mut d = TrainData::new(world, vocab, records).unwrap();
    // held-out routes of the training environment stand in for val-seen
    let train_env = d.world.split(Split::Train).next().unwrap().id().to_string();
    let routes: Vec<_> = {
        let mut r: Vec<_> = d.train.iter().map(|x| x.route.clone()).collect();
        r.dedup();
        r
    };
    let held: Vec<_> = routes[..12].to_vec();
    let (val, train): (Vec<_>, Vec<_>) = d.train.drain(..).partition(|r| held.contains(&r.route));
    d.train = train;
    d.val_seen = val;
    assert!(d.val_seen.iter().all(|r| r.env_id == train_env));
    let cfg = TrainConfig {
        embed_dim: 16,
        hidden_dim: 32,
        batch_labeled: 16,
        pretrain_lr_f: 1.0,
        pretrain_steps: 1500,
        total_steps: 1500,
        validate_every: 250,
        max_steps: 20,
        ..TrainConfig::default()
    };
    let m = models(&d, &cfg);
    let s = init(&m, 0);
    let out = pretrain(&cfg, &d, &m, Which::Follower, &s.follower, 1).unwrap();
    let sr = foam_core::trainer::pretrain::follower_val_sr(&out.best, &m, &d, &cfg, 1).unwrap();
    assert!(sr > 0.9, "val-seen SR {sr}");
}

fn step_ctx<'a>(d: &'a TrainData, m: &'a Models, cfg: &'a TrainConfig, pool: &'a mut AugmentPool) -> StepContext<'a> {
    StepContext { data: d, models: m, cfg, pool }
}

#[test]
fn modes_touch_only_their_models() {
    let d = data(10, 2);
    let cfg = config(10);
    let m = models(&d, &cfg);
    let s0 = init(&m, 10);
    let mut pool = AugmentPool::new(cfg.seed, cfg.augment_pool, cfg.route_bounds());

    let mut s = s0.clone();
    for step in 1..=3 {
        let r = SupervisedOnly.step(&mut step_ctx(&d, &m, &cfg, &mut pool), &mut s, step).unwrap();
        assert_eq!(r.augmented_routes, 0);
        assert!(r.loss_u.is_none() && r.bilevel.is_none());
    }
    assert!(s.speaker.bitwise_eq(&s0.speaker));
    assert!(!s.follower.bitwise_eq(&s0.follower));

    let mut s = s0.clone();
    for step in 1..=3 {
        let r = EnvDropBaseline.step(&mut step_ctx(&d, &m, &cfg, &mut pool), &mut s, step).unwrap();
        assert_eq!(r.augmented_routes, cfg.batch_augmented);
    }
    assert!(s.speaker.bitwise_eq(&s0.speaker));

    let frozen = TrainConfig { recon: false, bilevel: false, eta_s: 10.0, ..cfg.clone() };
    assert!(Foam.check_config(&frozen).is_err());
    let mut s = s0.clone();
    for step in 1..=3 {
        let r = Foam.step(&mut step_ctx(&d, &m, &frozen, &mut pool), &mut s, step).unwrap();
        let b = r.bilevel.unwrap();
        assert_eq!((b.bilevel_term, b.recon_term), (0.0, 0.0));
    }
    assert!(s.speaker.bitwise_eq(&s0.speaker));

    let mut s = s0.clone();
    for step in 1..=4 {
        let r = Foam.step(&mut step_ctx(&d, &m, &cfg, &mut pool), &mut s, step).unwrap();
        let b = r.bilevel.unwrap();
        assert!((-1.0..=1.0).contains(&b.h));
        assert!([b.loss_u, b.loss_l, b.grad_u_norm, b.grad_l_norm].iter().all(|v| v.is_finite()));
    }
    assert!(!s.speaker.bitwise_eq(&s0.speaker));
}

fn run_files(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for name in [STEPS_FILE, VALIDATION_FILE] {
        out.push((name.to_string(), fs::read(dir.join(name)).unwrap()));
    }
    for s in checkpoint_steps(dir).unwrap() {
        for model in ["follower", "speaker"] {
            let p = foam_core::trainer::run::checkpoint_path(dir, s, model);
            out.push((p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(p).unwrap()));
        }
    }
    out
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let d = data(11, 2);
    let cfg = config(11);
    let m = models(&d, &cfg);
    let s = init(&m, 11);
    let tmp = tempfile::tempdir().unwrap();
    let opts = |name: &str, resume, stop_after| RunOptions {
        run_dir: tmp.path().join(name),
        resume,
        stop_after,
        jobs: 1,
    };
    let whole = train(&cfg, &Foam, &d, &m, &s, &opts("whole", false, None)).unwrap();
    let part = train(&cfg, &Foam, &d, &m, &s, &opts("split", false, Some(3))).unwrap();
    assert_eq!(part.last_step, 3);
    assert!(train(&cfg, &Foam, &d, &m, &s, &opts("split", false, None)).is_err());
    let rest = train(&cfg, &Foam, &d, &m, &s, &opts("split", true, None)).unwrap();
    assert_eq!((rest.first_step, rest.last_step), (3, 6));
    assert!(whole.last.follower.bitwise_eq(&rest.last.follower));
    assert!(whole.last.speaker.bitwise_eq(&rest.last.speaker));
    assert_eq!(run_files(&tmp.path().join("whole")), run_files(&tmp.path().join("split")));
    let other = TrainConfig { eta_s: 0.25, ..cfg.clone() };
    assert!(train(&other, &Foam, &d, &m, &s, &opts("split", true, None)).is_err());
}

#[test]
fn runaway_loss_aborts_the_run() {
    let d = data(12, 2);
    let cfg = TrainConfig {
        eta_f: 200.0,
        clip_norm: 0.0,
        divergence_factor: 1.5,
        divergence_window: 2,
        total_steps: 40,
        ..config(12)
    };
    let m = models(&d, &cfg);
    let s = init(&m, 12);
    let tmp = tempfile::tempdir().unwrap();
    let opts = RunOptions { run_dir: tmp.path().to_path_buf(), resume: false, stop_after: None, jobs: 1 };
    let err = train(&cfg, &SupervisedOnly, &d, &m, &s, &opts).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Numerical, "{err}");
    let logged = fs::read_to_string(tmp.path().join(STEPS_FILE)).unwrap();
    assert!(logged.lines().count() < 40);
}

#[test]
fn sampled_batch_shapes() {
    let d = data(13, 2);
    let cfg = config(13);
    let m = models(&d, &cfg);
    let s = init(&m, 13);
    let batch = sampled_batch(&d, &m, &s.speaker, 3, 5, 13);
    assert_eq!(batch.len(), 3);
    for smp in &batch.samples {
        assert_eq!(smp.token_probs.len(), smp.instruction.len());
        assert!(smp.instruction.len() <= 5);
    }
    assert!(AugmentedBatch::new(batch.samples.clone(), vec![]).is_err());
}
