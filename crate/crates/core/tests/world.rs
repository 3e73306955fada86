use foam_core::rng::{stream_rng, Stream};
use foam_core::world::{
    generate_world, load_routes, replay, sample_route, save_routes, DropoutMask, RouteBounds,
    Split, World, WorldConfig,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_world(seed: u64) -> World {
    let cfg = WorldConfig {
        seed,
        train_envs: 3,
        val_seen_envs: 1,
        val_unseen_envs: 1,
        ..WorldConfig::default()
    };
    World::new(generate_world(&cfg).unwrap()).unwrap()
}

#[test]
fn seed_seven_twice_identical() {
    let cfg = WorldConfig {
        seed: 7,
        ..WorldConfig::default()
    };
    let a = generate_world(&cfg).unwrap();
    let b = generate_world(&cfg).unwrap();
    let ja: Vec<String> = a.iter().map(|e| serde_json::to_string(e).unwrap()).collect();
    let jb: Vec<String> = b.iter().map(|e| serde_json::to_string(e).unwrap()).collect();
    assert_eq!(ja, jb);
}

#[test]
fn splits_are_disjoint() {
    let cfg = WorldConfig::default();
    let world = World::new(generate_world(&cfg).unwrap()).unwrap();
    let ids = |s: Split| -> Vec<String> { world.split(s).map(|e| e.id().to_string()).collect() };
    let all: Vec<String> = Split::ALL.iter().flat_map(|&s| ids(s)).collect();
    let mut dedup = all.clone();
    dedup.sort();
    dedup.dedup();
    assert_eq!(all.len(), dedup.len());

    let tags = |s: Split| -> std::collections::BTreeSet<usize> {
        world
            .split(s)
            .flat_map(|e| e.nodes().iter().filter_map(|n| n.tag).collect::<Vec<_>>())
            .collect()
    };
    assert!(tags(Split::Train).is_disjoint(&tags(Split::ValUnseen)));
    assert!(tags(Split::ValSeen).is_subset(&cfg.tag_pool(Split::Train).collect()));
}

#[test]
fn three_by_three_degrees() {
    let cfg = WorldConfig {
        grid_width: 3,
        grid_height: 3,
        extra_edge_prob: 1.0,
        ..WorldConfig::default()
    };
    for env in generate_world(&cfg).unwrap() {
        for n in env.nodes() {
            assert!(env.degree(n.id) <= 4);
        }
    }
}

#[test]
fn thousand_routes_on_five_by_five_within_bounds() {
    let world = small_world(3);
    let env = world.split(Split::Train).next().unwrap();
    assert_eq!(env.grid(), (5, 5));
    let bounds = RouteBounds::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let r = sample_route(env, &mut rng, bounds).unwrap();
        assert!((bounds.min_nodes..=bounds.max_nodes).contains(&r.nodes.len()));
        assert_eq!(r.nodes.len(), env.shortest_distance(r.start(), r.goal).unwrap() + 1);
        assert_eq!(r.actions.last(), Some(&foam_core::world::Action::Stop));
        r.validate(env).unwrap();
    }
}

#[test]
fn distances_symmetric_and_zero_on_diagonal() {
    let world = small_world(5);
    for env in world.envs() {
        let n = env.node_count();
        for a in 0..n {
            assert_eq!(env.shortest_distance(a, a).unwrap(), 0);
            for b in 0..n {
                let d = env.shortest_distance(a, b).unwrap();
                assert_eq!(d, env.shortest_distance(b, a).unwrap());
                if env.edges().contains(&(a.min(b), a.max(b))) {
                    assert_eq!(d, 1);
                }
            }
        }
    }
}

#[test]
fn route_file_round_trip() {
    let world = small_world(2);
    let env = &world.envs()[0];
    let mut rng = stream_rng(0, Stream::Routes, 0);
    let routes: Vec<_> = (0..20)
        .map(|_| sample_route(env, &mut rng, RouteBounds::default()).unwrap())
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("routes.jsonl");
    save_routes(&path, &routes).unwrap();
    assert_eq!(load_routes(&path).unwrap(), routes);
}

#[test]
fn dropout_mask_is_episode_consistent() {
    let world = small_world(1);
    let env = &world.envs()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mask = DropoutMask::sample(env.feature_dim(), 0.5, &mut rng);
    let heading = foam_core::world::Heading::N;
    let zeros = |node: usize| -> Vec<usize> {
        let raw = env.observe(node, heading, None).unwrap();
        let masked = env.observe(node, heading, Some(&mask)).unwrap();
        (0..env.feature_dim())
            .filter(|&i| masked[i] == 0.0 && raw[i] != 0.0)
            .collect()
    };
    let dropped: Vec<usize> = (0..env.feature_dim()).filter(|&i| !mask.kept[i]).collect();
    assert_eq!(zeros(0), dropped);
    assert_eq!(zeros(env.node_count() - 1), dropped);
    let raw = env.observe(0, heading, None).unwrap();
    let masked = env.observe(0, heading, Some(&mask)).unwrap();
    for i in mask.kept_indices() {
        assert_eq!(masked[i], 2.0 * raw[i]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampled_routes_replay(seed in 0u64..1000, env_idx in 0usize..5) {
        let world = small_world(seed % 4);
        let env = &world.envs()[env_idx];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = sample_route(env, &mut rng, RouteBounds { min_nodes: 2, max_nodes: 9 }).unwrap();
        let (nodes, _) = replay(env, r.start(), r.start_heading, &r.actions).unwrap();
        prop_assert_eq!(nodes, r.nodes);
    }

    #[test]
    fn zeroing_is_idempotent(
        v in prop::collection::vec(-3.0f32..3.0, 1..32),
        seed in 0u64..1000,
        keep in 0.05f32..1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = DropoutMask::sample(v.len(), keep, &mut rng);
        let once = mask.zero_out(&v).unwrap();
        let twice = mask.zero_out(&once).unwrap();
        prop_assert_eq!(&once, &twice);
        let scaled = mask.apply(&v).unwrap();
        let zeroed: Vec<bool> = scaled.iter().map(|&x| x == 0.0).collect();
        let again: Vec<bool> = mask.apply(&scaled).unwrap().iter().map(|&x| x == 0.0).collect();
        prop_assert_eq!(zeroed, again);
    }
}
