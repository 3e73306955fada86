#![allow(dead_code)]

use foam_core::language::Vocabulary;
use foam_core::world::{EnvironmentGraph, Node, Split, World};

/// `n` nodes in a row, joined left to right; `tags[i]` labels node `i`.
pub fn line_env(id: &str, split: Split, n: usize, tags: &[Option<usize>], feature_dim: usize) -> EnvironmentGraph {
    let nodes = (0..n)
        .map(|i| Node {
            id: i,
            pos: (i as i32, 0),
            features: (0..feature_dim)
                .map(|k| ((i * 7 + k * 3) % 5) as f32 * 0.25 - 0.5)
                .collect(),
            tag: tags.get(i).copied().flatten(),
        })
        .collect();
    let edges = (1..n).map(|i| (i - 1, i)).collect();
    EnvironmentGraph::new(id.into(), split, n, 1, nodes, edges).unwrap()
}

/// `w x h` grid with every neighbouring pair connected.
pub fn grid_env(id: &str, split: Split, w: usize, h: usize, feature_dim: usize) -> EnvironmentGraph {
    let mut nodes = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            nodes.push(Node {
                id: i,
                pos: (x as i32, y as i32),
                features: (0..feature_dim)
                    .map(|k| ((i * 5 + k * 3) % 7) as f32 * 0.2 - 0.6)
                    .collect(),
                tag: None,
            });
        }
    }
    let mut edges = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                edges.push((i, i + 1));
            }
            if y + 1 < h {
                edges.push((i, i + w));
            }
        }
    }
    EnvironmentGraph::new(id.into(), split, w, h, nodes, edges).unwrap()
}

pub fn world_of(envs: Vec<EnvironmentGraph>) -> World {
    World::new(envs).unwrap()
}

/// Reserved symbols plus `words` extra tokens.
pub fn vocab_with(words: usize) -> Vocabulary {
    let mut tokens: Vec<String> = foam_core::language::RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend((0..words).map(|i| format!("w{i}")));
    Vocabulary::from_tokens(tokens).unwrap()
}

/// `params` with every entry drawn from `[-scale, scale]`.
pub fn rescaled(params: &foam_autodiff::ParamSet, scale: f32, seed: u64) -> foam_autodiff::ParamSet {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = foam_autodiff::ParamSet::new();
    for (name, t) in params.iter() {
        let data = (0..t.len()).map(|_| rng.gen_range(-scale..scale)).collect();
        out.insert(name, foam_autodiff::Tensor::new(t.shape().to_vec(), data).unwrap());
    }
    out
}

/// Compares `analytic` against Richardson-extrapolated central differences
/// of `loss`, coordinate by coordinate. Returns
/// `max |analytic - numeric| / max |numeric|`.
pub fn finite_difference_error(
    params: &foam_autodiff::ParamSet,
    analytic: &foam_autodiff::Gradients,
    loss: impl Fn(&foam_autodiff::ParamSet) -> f32,
    step: f32,
) -> f64 {
    let mut work = params.clone();
    let mut max_diff = 0.0f64;
    let mut max_num = 0.0f64;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name).unwrap().len();
        let g = analytic.get(&name).expect("gradient for every parameter");
        for j in 0..n {
            let orig = params.get(&name).unwrap().data()[j];
            let mut central = |h: f32| {
                work.get_mut(&name).unwrap().data_mut()[j] = orig + h;
                let up = f64::from(loss(&work));
                work.get_mut(&name).unwrap().data_mut()[j] = orig - h;
                let down = f64::from(loss(&work));
                work.get_mut(&name).unwrap().data_mut()[j] = orig;
                (up - down) / (2.0 * f64::from(h))
            };
            let coarse = central(step);
            let fine = central(step / 2.0);
            let numeric = (4.0 * fine - coarse) / 3.0;
            max_diff = max_diff.max((f64::from(g.data()[j]) - numeric).abs());
            max_num = max_num.max(numeric.abs());
        }
    }
    max_diff / max_num.max(1e-6)
}
