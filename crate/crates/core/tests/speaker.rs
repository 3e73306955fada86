mod common;

use foam_autodiff::{ParamSet, Tape, Tensor};
use foam_core::language::{Instruction, EOS, RESERVED};
use foam_core::speaker::{
    generate, generate_batch, score, score_batch, speaker_loss, Decoding, RouteInput, SpeakerBatch, SpeakerConfig,
};
use foam_core::world::{route_from_path, Split, World};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn world() -> World {
    common::world_of(vec![
        common::line_env("a", Split::Train, 4, &[], 3),
        common::grid_env("b", Split::Train, 3, 3, 3),
    ])
}

fn config(world: &World, vocab_size: usize) -> SpeakerConfig {
    SpeakerConfig {
        vocab_size,
        obs_dim: world.observation_dim(),
        embed_dim: 5,
        hidden_dim: 6,
    }
}

fn route(world: &World, env: &str, path: &[usize]) -> RouteInput {
    RouteInput::plain(route_from_path(world.get(env).unwrap(), path).unwrap())
}

fn loss_of(params: &ParamSet, cfg: &SpeakerConfig, batch: &SpeakerBatch) -> f32 {
    let mut tape = Tape::new();
    let b = tape.bind(params, false).unwrap();
    let l = speaker_loss(&mut tape, &b, cfg, batch).unwrap();
    tape.value(l).item()
}

/// Every instruction of at most `max_len` tokens the decoder can emit:
/// EOS-terminated ones plus the EOS-free ones cut at `max_len`.
fn all_instructions(producible: &[usize], max_len: usize) -> Vec<Instruction> {
    let words: Vec<usize> = producible.iter().copied().filter(|&t| t != EOS).collect();
    let mut out = Vec::new();
    let mut prefixes: Vec<Vec<usize>> = vec![vec![]];
    for len in 1..=max_len {
        let mut next = Vec::new();
        for p in &prefixes {
            let mut done = p.clone();
            done.push(EOS);
            out.push(Instruction(done));
            for &w in &words {
                let mut q = p.clone();
                q.push(w);
                if len == max_len {
                    out.push(Instruction(q));
                } else {
                    next.push(q);
                }
            }
        }
        prefixes = next;
    }
    out
}

#[test]
fn init_loss_is_ln_of_producible_vocab() {
    let world = world();
    let vocab = common::vocab_with(39);
    assert_eq!(vocab.len(), 43);
    let cfg = config(&world, vocab.len());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let items: Vec<(RouteInput, Instruction)> = (0..24)
        .map(|i| {
            let toks: Vec<usize> = (0..5).map(|k| RESERVED.len() + (i * 11 + k * 7) % 39).chain([EOS]).collect();
            (route(&world, "a", &[i % 3, i % 3 + 1]), Instruction(toks))
        })
        .collect();
    let batch = SpeakerBatch::new(&world, &items).unwrap();
    let mean: f32 = (0..6).map(|_| loss_of(&cfg.init(&mut rng), &cfg, &batch)).sum::<f32>() / 6.0;
    assert!((mean - 40f32.ln()).abs() < 0.1, "init loss {mean}");
}

#[test]
fn duplicated_batch_keeps_mean() {
    let world = world();
    let cfg = config(&world, 8);
    let params = cfg.init(&mut ChaCha8Rng::seed_from_u64(0));
    let items = vec![
        (route(&world, "a", &[0, 1, 2]), Instruction(vec![4, 5, EOS])),
        (route(&world, "b", &[0, 3, 4]), Instruction(vec![6, EOS])),
    ];
    let mut doubled = items.clone();
    doubled.extend(items.clone());
    let a = loss_of(&params, &cfg, &SpeakerBatch::new(&world, &items).unwrap());
    let b = loss_of(&params, &cfg, &SpeakerBatch::new(&world, &doubled).unwrap());
    assert!((a - b).abs() < 1e-5);
}

#[test]
fn greedy_is_deterministic_and_zero_temperature_is_greedy() {
    let world = world();
    let cfg = config(&world, 9);
    let params = common::rescaled(&cfg.init(&mut ChaCha8Rng::seed_from_u64(0)), 1.5, 2);
    let inputs = vec![route(&world, "a", &[0, 1, 2, 3]), route(&world, "b", &[4, 1, 2, 5])];
    let g1 = generate_batch(&params, &cfg, &world, &inputs, Decoding::Greedy, 8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let g2 = generate_batch(&params, &cfg, &world, &inputs, Decoding::Greedy, 8, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(g1, g2);
    for tau in [0.0, 1e-4] {
        let s = generate_batch(&params, &cfg, &world, &inputs, Decoding::Sample { temperature: tau }, 8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for (a, b) in s.iter().zip(&g1) {
            assert_eq!(a.instruction, b.instruction, "temperature {tau}");
        }
    }
}

#[test]
fn flat_logits_sample_uniformly() {
    let world = world();
    let vocab = common::vocab_with(2);
    let cfg = config(&world, vocab.len());
    let mut params = cfg.init(&mut ChaCha8Rng::seed_from_u64(0));
    let hidden2 = 2 * cfg.hidden_dim;
    params.insert("speaker.out.w", Tensor::zeros(&[hidden2, vocab.len()]));
    params.insert("speaker.out.b", Tensor::new(vec![vocab.len()], vec![1.0; vocab.len()]).unwrap());
    let input = route(&world, "a", &[0, 1]);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let producible = [EOS, RESERVED.len(), RESERVED.len() + 1];
    let mut counts = [0usize; 3];
    let n = 10_000;
    for _ in 0..n {
        let s = generate(&params, &cfg, &world, &input, Decoding::Sample { temperature: 1.0 }, 1, &mut rng).unwrap();
        let tok = s.instruction.tokens()[0];
        counts[producible.iter().position(|&p| p == tok).expect("producible token")] += 1;
        assert!((s.log_prob - (1f32 / 3.0).ln()).abs() < 1e-5);
    }
    for c in counts {
        assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.02, "{counts:?}");
    }
}

#[test]
fn score_reproduces_generation_log_probs() {
    let world = world();
    let cfg = config(&world, 10);
    let params = common::rescaled(&cfg.init(&mut ChaCha8Rng::seed_from_u64(0)), 0.8, 5);
    let inputs = vec![route(&world, "a", &[3, 2, 1]), route(&world, "b", &[0, 1, 4, 7, 8])];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for decoding in [Decoding::Greedy, Decoding::Sample { temperature: 1.0 }] {
        for _ in 0..20 {
            let samples = generate_batch(&params, &cfg, &world, &inputs, decoding, 6, &mut rng).unwrap();
            for (s, input) in samples.iter().zip(&inputs) {
                let summed: f32 = s.token_log_probs.iter().sum();
                assert!((summed - s.log_prob).abs() < 1e-5);
                let rescored = score(&params, &cfg, &world, input, &s.instruction).unwrap();
                assert!((rescored - s.log_prob).abs() < 1e-5, "{rescored} vs {}", s.log_prob);
                assert!(rescored <= 0.0);
                assert!(s.instruction.tokens().last() == Some(&EOS) || s.instruction.len() == 6);
            }
        }
    }
}

#[test]
fn sequence_distribution_is_normalized() {
    let world = world();
    for (words, max_len) in [(1usize, 2usize), (2, 2), (2, 3)] {
        let vocab = common::vocab_with(words);
        let cfg = config(&world, vocab.len());
        let producible: Vec<usize> = std::iter::once(EOS).chain(RESERVED.len()..vocab.len()).collect();
        let seqs = all_instructions(&producible, max_len);
        for seed in 0..3 {
            let params = common::rescaled(&cfg.init(&mut ChaCha8Rng::seed_from_u64(seed)), 1.0, seed);
            let input = route(&world, "b", &[0, 1, 2, 5]);
            let items: Vec<(RouteInput, Instruction)> = seqs.iter().map(|s| (input.clone(), s.clone())).collect();
            let total: f64 = score_batch(&params, &cfg, &world, &items)
                .unwrap()
                .iter()
                .map(|&s| f64::from(s).exp())
                .sum();
            assert!((total - 1.0).abs() < 1e-4, "{words} words, length {max_len}: {total}");
        }
    }
}

#[test]
fn out_of_range_token_is_rejected() {
    let world = world();
    let cfg = config(&world, 8);
    let params = cfg.init(&mut ChaCha8Rng::seed_from_u64(0));
    let input = route(&world, "a", &[0, 1]);
    assert!(score(&params, &cfg, &world, &input, &Instruction(vec![4, 8, EOS])).is_err());
    assert!(score(&params, &cfg, &world, &input, &Instruction(vec![])).is_err());
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let world = common::world_of(vec![common::line_env("a", Split::Train, 3, &[], 2)]);
    let cfg = SpeakerConfig {
        vocab_size: 7,
        obs_dim: world.observation_dim(),
        embed_dim: 3,
        hidden_dim: 3,
    };
    let params = common::rescaled(&cfg.init(&mut ChaCha8Rng::seed_from_u64(0)), 0.5, 31);
    let items = vec![
        (route(&world, "a", &[0, 1, 2]), Instruction(vec![4, 5, EOS])),
        (route(&world, "a", &[1, 0]), Instruction(vec![6, EOS])),
    ];
    let batch = SpeakerBatch::new(&world, &items).unwrap();
    let mut tape = Tape::new();
    let b = tape.bind(&params, true).unwrap();
    let l = speaker_loss(&mut tape, &b, &cfg, &batch).unwrap();
    let g = tape.backward(l).unwrap();
    let err = common::finite_difference_error(&params, &g, |p| loss_of(p, &cfg, &batch), 1e-2);
    assert!(err < 1e-3, "relative error {err}");
}
