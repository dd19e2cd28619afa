use proptest::prelude::*;

use super::*;
use crate::channel::{ChannelEnv, Layout, PathLossParams, PhasePolicy, ShadowingModel};
use crate::simgen::{make_dataset, SpectrumConfig};

fn tiny_arch() -> ArchConfig {
    ArchConfig::new(8, 4).with_shallow_filters(2).with_pools([2, 1], [2, 2])
}

fn tiny_cfg() -> SpectrumConfig {
    SpectrumConfig {
        n_bands: 4,
        n_points: 8,
        snr_db: -6.0,
        ..SpectrumConfig::default()
    }
}

fn env(n_pu: usize, n_su: usize, seed: u64) -> ChannelEnv {
    ChannelEnv::generate(
        &mut substream(seed, &[tag::GEOMETRY]),
        Layout::Clustered {
            separation_m: 85.0,
            spread_m: 10.0,
        },
        n_pu,
        n_su,
        100,
        PhasePolicy::Aligned,
        None,
        PathLossParams::default(),
        ShadowingModel::default(),
        true,
    )
    .unwrap()
}

fn tiny_datasets(n_nodes: usize, n_train: usize, seed: u64) -> Vec<Dataset> {
    let cfg = tiny_cfg();
    let env = env(cfg.n_bands, n_nodes, seed);
    (0..n_nodes)
        .map(|j| make_dataset(&env, &cfg, j, n_train, 16, &mut substream(seed, &[tag::DATA, j as u64])).unwrap())
        .collect()
}

fn tiny_nodes(topology: &ObservationTopology, seed: u64) -> Vec<NodeState> {
    let data = node_data(&tiny_datasets(topology.n_nodes(), 40, seed));
    init_nodes(tiny_arch(), topology, data, seed).unwrap()
}

fn partial_topology() -> ObservationTopology {
    ObservationTopology::new(vec![vec![1, 1, 0, 0], vec![0, 1, 1, 0], vec![0, 0, 1, 1]]).unwrap()
}

/// Nodes with independently drawn parameters, as after local training.
fn diverged(n_nodes: usize, seed: u64) -> Vec<ModelParams> {
    (0..n_nodes)
        .map(|j| ModelParams::init_seeded(tiny_arch(), seed * 31 + j as u64).unwrap())
        .collect()
}

fn drift(after: &[f64], before: &[f64]) -> f64 {
    after.iter().zip(before).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn topology_validation() {
    assert!(ObservationTopology::new(vec![]).is_err());
    assert!(ObservationTopology::new(vec![vec![1, 0], vec![1, 0]]).is_err());
    assert!(ObservationTopology::new(vec![vec![1, 1], vec![0, 0]]).is_err());
    assert!(ObservationTopology::new(vec![vec![1, 2]]).is_err());
    assert!(ObservationTopology::new(vec![vec![1, 1], vec![1]]).is_err());
    let t = partial_topology();
    assert_eq!(t.observers(1), vec![0, 1]);
    assert_eq!(t.observers(3), vec![2]);
    assert_eq!(ObservationTopology::full(2, 3).unwrap().observers(2), vec![0, 1]);
}

#[test]
fn random_windows_cover_every_band() {
    let mut rng = substream(4, &[]);
    for _ in 0..50 {
        let t = ObservationTopology::random_windows(4, 8, 4, &mut rng).unwrap();
        for m in t.masks() {
            assert_eq!(m.iter().filter(|&&v| v == 1).count(), 4);
            let first = m.iter().position(|&v| v == 1).unwrap();
            assert!(m[first..first + 4].iter().all(|&v| v == 1));
        }
        assert!((0..8).all(|n| !t.observers(n).is_empty()));
    }
    assert!(ObservationTopology::random_windows(2, 8, 3, &mut rng).is_err());
    assert!(ObservationTopology::random_windows(2, 8, 9, &mut rng).is_err());
}

#[test]
fn scheme_names_round_trip() {
    for s in Scheme::ALL {
        assert_eq!(s.as_str().parse::<Scheme>().unwrap(), s);
    }
    assert!("fl".parse::<Scheme>().is_err());
}

#[test]
fn init_is_common_and_deterministic() {
    let t = ObservationTopology::full(4, 4).unwrap();
    let a = tiny_nodes(&t, 9);
    let b = tiny_nodes(&t, 9);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.params, y.params);
    }
    for node in &a[1..] {
        assert_eq!(node.params.blocks(), a[0].params.blocks());
    }
    let data = node_data(&tiny_datasets(3, 8, 1));
    assert!(init_nodes(tiny_arch(), &t, data, 1).is_err());
}

#[test]
fn zero_epochs_leave_params_unchanged() {
    let mut nodes = tiny_nodes(&partial_topology(), 2);
    let before = nodes[0].params.clone();
    let schedule = LrSchedule::new(0.1, 0.001, 10).unwrap();
    let stats = local_train(&mut nodes[0], 0, &schedule, 0, 8).unwrap();
    assert!(stats.losses.is_empty());
    assert_eq!(nodes[0].params, before);
}

#[test]
fn unobserved_deep_blocks_are_untouched_by_training() {
    let mut nodes = tiny_nodes(&partial_topology(), 3);
    let before = nodes[0].params.clone();
    let schedule = LrSchedule::new(0.1, 0.001, 10).unwrap();
    local_train(&mut nodes[0], 0, &schedule, 2, 8).unwrap();
    let after = &nodes[0].params;
    assert_ne!(after.shallow(), before.shallow());
    assert_ne!(after.deep(0), before.deep(0));
    assert_eq!(after.deep(2), before.deep(2));
    assert_eq!(after.deep(3), before.deep(3));
}

#[test]
fn loss_decreases_on_desk_data() {
    let cfg = SpectrumConfig {
        n_bands: 8,
        n_points: 32,
        snr_db: -10.0,
        ..SpectrumConfig::default()
    };
    let env = env(8, 1, 5);
    let data = make_dataset(&env, &cfg, 0, 2000, 10, &mut substream(5, &[tag::DATA])).unwrap();
    let arch = ArchConfig::new(32, 8).with_shallow_filters(8);
    let t = ObservationTopology::full(1, 8).unwrap();
    let mut nodes = init_nodes(arch, &t, node_data(&[data]), 5).unwrap();
    let schedule = LrSchedule::new(0.1, 0.001, 200).unwrap();
    let losses = local_train(&mut nodes[0], 0, &schedule, 4, 32).unwrap().losses;
    let smoothed: Vec<f64> = losses[..200].windows(20).map(|w| w.iter().sum::<f64>() / 20.0).collect();
    let (first, last) = (smoothed[0], smoothed[smoothed.len() - 1]);
    assert!(last < 0.5 * first, "smoothed loss {first} -> {last}");
    assert!(smoothed[1..].iter().all(|&m| m < first));
}

#[test]
fn shallow_average_examples() {
    let mut same = vec![diverged(1, 1).remove(0); 3];
    let before = same[0].clone();
    average_shallow(&mut same).unwrap();
    assert!(same.iter().all(|p| *p == before));

    let w = diverged(1, 2).remove(0);
    let mut neg = w.clone();
    neg.shallow_mut().iter_mut().for_each(|v| *v = -*v);
    let mut pair = vec![w, neg];
    average_shallow(&mut pair).unwrap();
    assert!(pair.iter().all(|p| p.shallow().iter().all(|&v| v == 0.0)));

    let mut three = diverged(3, 3);
    for (j, p) in three.iter_mut().enumerate() {
        p.shallow_mut()[5] = (j + 1) as f64;
    }
    average_shallow(&mut three).unwrap();
    assert!(three.iter().all(|p| p.shallow()[5] == 2.0));

    let mut mixed = vec![ModelParams::init_seeded(tiny_arch(), 1).unwrap()];
    mixed.push(ModelParams::init_seeded(tiny_arch().with_shallow_filters(3), 1).unwrap());
    assert!(average_shallow(&mut mixed).is_err());
}

#[test]
fn deep_average_examples() {
    let t = partial_topology();
    let original = diverged(3, 4);
    let mut nodes = original.clone();
    average_deep(&mut nodes, &t).unwrap();
    // band 3 has a single observer, node 2
    assert!(nodes.iter().all(|p| p.deep(3) == original[2].deep(3)));
    // band 0 observed by node 0 only, band 1 by nodes {0, 1}
    assert!(nodes.iter().all(|p| p.deep(0) == original[0].deep(0)));
    let expected: Vec<f64> = original[0]
        .deep(1)
        .iter()
        .zip(original[1].deep(1))
        .map(|(a, b)| (a + b) / 2.0)
        .collect();
    for p in &nodes {
        for (v, e) in p.deep(1).iter().zip(&expected) {
            assert!((v - e).abs() <= 1e-15 * e.abs().max(1.0));
        }
    }
    // a non-observer's block has no influence
    let mut other = original.clone();
    other[2].deep_mut(1).iter_mut().for_each(|v| *v = 1e6);
    average_deep(&mut other, &t).unwrap();
    assert_eq!(other[0].deep(1), nodes[0].deep(1));
    // shallow untouched
    assert_eq!(nodes[1].shallow(), original[1].shallow());
    assert!(average_deep(&mut nodes[..2], &t).is_err());
}

#[test]
fn full_observation_deep_average_is_fedavg() {
    let t = ObservationTopology::full(3, 4).unwrap();
    let mut decoupled = diverged(3, 5);
    let mut fedavg = decoupled.clone();
    average_shallow(&mut decoupled).unwrap();
    average_deep(&mut decoupled, &t).unwrap();
    average_all(&mut fedavg).unwrap();
    assert_eq!(decoupled, fedavg);
}

#[test]
fn full_observation_round_reduces_to_fedavg() {
    let t = ObservationTopology::full(3, 4).unwrap();
    let nodes = tiny_nodes(&t, 6);
    let cfg = TrainConfig {
        rounds: 2,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let d = run_rounds(Scheme::Decoupled, nodes.clone(), &t, &cfg).unwrap();
    let f = run_rounds(Scheme::Fedavg, nodes, &t, &cfg).unwrap();
    for (a, b) in d.nodes.iter().zip(&f.nodes) {
        assert_eq!(a.params.blocks(), b.params.blocks());
    }
    assert_eq!(d.rounds, f.rounds);
}

fn apply(scheme: Scheme, nodes: &mut [ModelParams], t: &ObservationTopology) {
    match scheme {
        Scheme::Decoupled => {
            average_shallow(nodes).unwrap();
            average_deep(nodes, t).unwrap();
        }
        Scheme::Fedavg => average_all(nodes).unwrap(),
        Scheme::Standalone => {}
    }
}

fn arb_topology() -> impl Strategy<Value = ObservationTopology> {
    (1usize..5)
        .prop_flat_map(|j| proptest::collection::vec(proptest::collection::vec(0u8..2, 4), j))
        .prop_filter_map("uncovered", |m| ObservationTopology::new(m).ok())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn averaging_is_idempotent(t in arb_topology(), seed in 0u64..1000, fed in any::<bool>()) {
        let scheme = if fed { Scheme::Fedavg } else { Scheme::Decoupled };
        let mut once = diverged(t.n_nodes(), seed);
        apply(scheme, &mut once, &t);
        let mut twice = once.clone();
        apply(scheme, &mut twice, &t);
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn averaging_ignores_node_order(t in arb_topology(), seed in 0u64..1000, fed in any::<bool>(), rot in 0usize..4) {
        let scheme = if fed { Scheme::Fedavg } else { Scheme::Decoupled };
        let j = t.n_nodes();
        let rot = rot % j;
        let mut nodes = diverged(j, seed);
        let mut masks = t.masks().to_vec();
        nodes.rotate_left(rot);
        masks.rotate_left(rot);
        let rotated = ObservationTopology::new(masks).unwrap();
        let mut reference = diverged(j, seed);
        apply(scheme, &mut reference, &t);
        apply(scheme, &mut nodes, &rotated);
        for p in &nodes {
            prop_assert_eq!(p, &reference[0]);
        }
    }

    #[test]
    fn averaging_conserves_the_mean(t in arb_topology(), seed in 0u64..1000) {
        let before = diverged(t.n_nodes(), seed);
        let all: Vec<usize> = (0..t.n_nodes()).collect();
        let mut fed = before.clone();
        average_all(&mut fed).unwrap();
        let mut dec = before.clone();
        average_shallow(&mut dec).unwrap();
        average_deep(&mut dec, &t).unwrap();
        prop_assert_eq!(gather(&before, &all, |p| p.shallow()), gather(&fed, &all, |p| p.shallow()));
        prop_assert_eq!(gather(&before, &all, |p| p.shallow()), gather(&dec, &all, |p| p.shallow()));
        for n in 0..t.n_bands() {
            prop_assert_eq!(gather(&before, &all, |p| p.deep(n)), gather(&fed, &all, |p| p.deep(n)));
            // band-wise averaging conserves the mean over the band's observers
            let obs = t.observers(n);
            prop_assert_eq!(gather(&before, &obs, |p| p.deep(n)), gather(&dec, &obs, |p| p.deep(n)));
        }
    }
}

#[test]
fn fedavg_dilutes_partially_observed_blocks() {
    let t = partial_topology();
    let mut trained = tiny_nodes(&t, 7);
    let init = trained[0].params.clone();
    let schedule = LrSchedule::new(0.1, 0.001, 20).unwrap();
    for node in trained.iter_mut() {
        local_train(node, 0, &schedule, 1, 8).unwrap();
    }
    let mut dec = trained.clone();
    average_shallow(&mut dec).unwrap();
    average_deep(&mut dec, &t).unwrap();
    let mut fed = trained;
    average_all(&mut fed).unwrap();
    for n in 0..4 {
        let share = t.observers(n).len() as f64 / 3.0;
        let d = drift(dec[0].params.deep(n), init.deep(n));
        let f = drift(fed[0].params.deep(n), init.deep(n));
        assert!(d > 0.0);
        assert!((f - share * d).abs() <= 1e-9 * d, "band {n}: fedavg {f} vs {share} * {d}");
    }
}

#[test]
fn zero_rounds_leave_nodes_at_init() {
    let t = partial_topology();
    let nodes = tiny_nodes(&t, 8);
    let cfg = TrainConfig {
        rounds: 0,
        ..TrainConfig::default()
    };
    let out = run_rounds(Scheme::Decoupled, nodes.clone(), &t, &cfg).unwrap();
    assert!(out.rounds.is_empty() && out.history.records.is_empty());
    for (a, b) in out.nodes.iter().zip(&nodes) {
        assert_eq!(a.params, b.params);
    }
}

#[test]
fn single_node_schemes_coincide() {
    let datasets = tiny_datasets(1, 40, 10);
    let t = ObservationTopology::full(1, 4).unwrap();
    let cfg = TrainConfig {
        rounds: 2,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let runs: Vec<RunOutput> = Scheme::ALL
        .iter()
        .map(|&s| run_scheme(s, tiny_arch(), &datasets, &t, &cfg, 10).unwrap())
        .collect();
    for r in &runs[1..] {
        assert_eq!(r.nodes[0].params.blocks(), runs[0].nodes[0].params.blocks());
        for (a, b) in r.rounds.iter().zip(&runs[0].rounds) {
            assert_eq!(a.confusion, b.confusion);
            assert_eq!(a.mean_loss, b.mean_loss);
        }
    }
}

#[test]
fn standalone_is_deterministic() {
    let datasets = tiny_datasets(2, 20, 11);
    let cfg = TrainConfig {
        rounds: 2,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let a = run_standalone(tiny_arch(), &datasets, &cfg, 11).unwrap();
    let b = run_standalone(tiny_arch(), &datasets, &cfg, 11).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.nodes[0].params, b.nodes[0].params);
    assert_eq!(a.nodes[0].data.n_train(), 40);
}

#[test]
fn bytes_follow_observation_counts() {
    let t = partial_topology();
    let p = ModelParams::init_seeded(tiny_arch(), 1).unwrap();
    let (s, d) = (p.layout().shallow_len() as u64, p.layout().deep_len() as u64);
    // observer counts per band: 1, 2, 2, 1
    assert_eq!(bytes_per_round(Scheme::Decoupled, &p, &t), 8 * (3 * s + 6 * d));
    assert_eq!(bytes_per_round(Scheme::Fedavg, &p, &t), 8 * (3 * s + 12 * d));
    assert_eq!(bytes_per_round(Scheme::Standalone, &p, &t), 0);
}

#[test]
fn history_has_one_record_per_node_and_round() {
    let t = partial_topology();
    let cfg = TrainConfig {
        rounds: 3,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let out = run_rounds(Scheme::Fedavg, tiny_nodes(&t, 12), &t, &cfg).unwrap();
    assert_eq!(out.history.records.len(), 9);
    assert_eq!(out.rounds.len(), 3);
    for (i, r) in out.history.records.iter().enumerate() {
        assert_eq!((r.round, r.node), (i / 3 + 1, i % 3));
        assert!((0.0..=1.0).contains(&r.accuracy) && r.loss >= 0.0);
    }
    for s in &out.rounds {
        assert_eq!(s.confusion.total(), 3 * 16 * 4);
    }
    let mut buf = Vec::new();
    out.history.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("round,node,scheme,loss,accuracy,bytes_exchanged"));
    assert_eq!(lines.count(), 9);
}
