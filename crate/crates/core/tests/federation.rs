use fedgan::data::{make_texture_corpus, LabeledImageSet};
use fedgan::federation::{
    centralized_equivalent, fedavg_aggregate, local_train, partition, run_round, run_training, sample_clients,
    FedConfig, PartitionMode,
};
use fedgan::gan::{train, Gan, GanConfig, NoSink, Variant};
use fedgan::models::{LayoutEntry, ModelKind, ModelSpec, ParamVector};
use proptest::prelude::*;

fn small_gan(seed: u64) -> Gan {
    let mut g = ModelSpec::new(ModelKind::Generator);
    g.width = 8;
    let mut d = ModelSpec::new(ModelKind::DiscCnn);
    d.width = 8;
    Gan::new(Variant::Acgan, &g, &Variant::Acgan.critic_spec(&d), seed).unwrap()
}

fn gan_cfg() -> GanConfig {
    GanConfig {
        batch_size: 8,
        seed: 17,
        ..Default::default()
    }
}

fn pv(values: Vec<f64>) -> ParamVector {
    let layout = vec![LayoutEntry {
        name: "w".into(),
        shape: vec![values.len()],
    }];
    ParamVector::new(layout, values).unwrap()
}

#[test]
fn one_client_federation_equals_centralized_training() {
    let data = make_texture_corpus(12, 16, 1).unwrap();
    let fed = FedConfig {
        num_clients: 1,
        rounds: 3,
        local_epochs: 2,
        client_fraction: 1.0,
        seed: 5,
        ..Default::default()
    };
    let template = small_gan(2);
    let outcome = run_training(
        &template,
        std::slice::from_ref(&data),
        &fed,
        &gan_cfg(),
        &mut |_| Ok(()),
    )
    .unwrap();
    let mut central = template.clone();
    let h = train(
        &mut central,
        &data,
        &centralized_equivalent(&fed, &gan_cfg()),
        0,
        &mut NoSink,
    )
    .unwrap();
    assert_eq!(h.records.len(), 6);
    let diff = outcome.final_params.max_abs_diff(&central.flatten());
    assert!(diff <= 1e-9, "max abs diff {diff:e}");
}

#[test]
fn identical_clients_submit_identical_weights() {
    let data = make_texture_corpus(8, 16, 2).unwrap();
    let fed = FedConfig {
        num_clients: 2,
        rounds: 1,
        local_epochs: 1,
        ..Default::default()
    };
    let template = small_gan(3);
    let r = run_round(
        &template,
        &template.flatten(),
        &[data.clone(), data],
        &fed,
        &gan_cfg(),
        1,
    )
    .unwrap();
    assert_eq!(r.updates[0].params, r.updates[1].params);
    assert_eq!(r.aggregate.values(), r.updates[0].params.values());
    assert_eq!(r.weights, vec![0.5, 0.5]);
}

#[test]
fn zero_local_epochs_is_a_no_op_round() {
    let data = make_texture_corpus(4, 16, 2).unwrap();
    let template = small_gan(3);
    let global = template.flatten();
    let u = local_train(&template, &global, &data, &gan_cfg(), 1, 0, 0).unwrap();
    assert_eq!(u.params, global);
    let fed = FedConfig {
        num_clients: 2,
        rounds: 1,
        local_epochs: 0,
        ..Default::default()
    };
    let parts = [data.subset(&[0, 1, 4, 5]), data.subset(&[2, 3, 6, 7])];
    let r = run_round(&template, &global, &parts, &fed, &gan_cfg(), 1).unwrap();
    assert_eq!(r.aggregate.values(), global.values());
}

#[test]
fn rounds_list_every_client_and_replay_exactly() {
    let data = make_texture_corpus(16, 16, 4).unwrap();
    let fed = FedConfig {
        num_clients: 4,
        rounds: 3,
        local_epochs: 1,
        client_fraction: 1.0,
        seed: 1,
        ..Default::default()
    };
    let parts = partition(&data, 4, &PartitionMode::Iid, 1).unwrap().subsets(&data);
    let run = || run_training(&small_gan(6), &parts, &fed, &gan_cfg(), &mut |_| Ok(())).unwrap();
    let a = run();
    let b = run();
    assert_eq!(a.rounds.len(), 3);
    for r in &a.rounds {
        assert_eq!(r.sampled, vec![0, 1, 2, 3]);
        assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert_eq!(a.final_params.checksum(), b.final_params.checksum());
    let audits: Vec<_> = a.rounds.iter().map(|r| r.audit()).collect();
    assert_eq!(audits, b.rounds.iter().map(|r| r.audit()).collect::<Vec<_>>());
}

#[test]
fn partial_participation_samples_the_fraction() {
    let s = sample_clients(10, 0.4, 3, 1).unwrap();
    assert_eq!(s.len(), 4);
    assert_eq!(s, sample_clients(10, 0.4, 3, 1).unwrap());
    assert_eq!(sample_clients(10, 1.0, 3, 7).unwrap(), (0..10).collect::<Vec<_>>());
}

fn majority_ok(set: &LabeledImageSet, p: &fedgan::federation::Partition) {
    for c in p.composition(set) {
        let size: usize = c.class_counts.iter().sum();
        let target = c.target.unwrap() * size as f64;
        let got = c.class_counts[c.majority_class] as f64;
        assert!((got - target).abs() <= 1.0, "client {}: {got} vs {target}", c.client);
        assert_eq!(c.majority_class, c.client % 2);
    }
}

fn disjoint_exhaustive(n: usize, p: &fedgan::federation::Partition) {
    let mut all: Vec<usize> = p.clients.iter().flatten().copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..n).collect::<Vec<_>>());
}

#[test]
fn six_clients_with_ratios_drawn_from_sixty_to_ninety_percent() {
    let set = make_texture_corpus(300, 8, 0).unwrap();
    for seed in 0..10 {
        let p = partition(&set, 6, &PartitionMode::NonIid { low: 0.6, high: 0.9 }, seed).unwrap();
        for t in &p.targets {
            assert!((0.6..=0.9).contains(&t.unwrap()));
        }
        majority_ok(&set, &p);
        disjoint_exhaustive(set.len(), &p);
    }
}

#[test]
fn half_ratio_gives_balanced_clients() {
    let set = make_texture_corpus(100, 8, 0).unwrap();
    let p = partition(&set, 4, &PartitionMode::non_iid(0.5), 2).unwrap();
    for c in p.composition(&set) {
        assert!((c.majority_fraction - 0.5).abs() <= 1.0 / 50.0, "{c:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn fedavg_stays_in_the_hull(
        rows in prop::collection::vec((1usize..50, prop::collection::vec(-1e3f64..1e3, 6)), 1..8)
    ) {
        let vectors: Vec<ParamVector> = rows.iter().map(|(_, v)| pv(v.clone())).collect();
        let contributions: Vec<(usize, &ParamVector)> = rows.iter().map(|r| r.0).zip(&vectors).collect();
        let agg = fedavg_aggregate(&contributions).unwrap();
        prop_assert!((agg.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let total: usize = rows.iter().map(|r| r.0).sum();
        for (w, r) in agg.weights.iter().zip(&rows) {
            prop_assert!((w - r.0 as f64 / total as f64).abs() < 1e-15);
        }
        for j in 0..6 {
            let lo = rows.iter().map(|r| r.1[j]).fold(f64::INFINITY, f64::min);
            let hi = rows.iter().map(|r| r.1[j]).fold(f64::NEG_INFINITY, f64::max);
            let v = agg.params.values()[j];
            prop_assert!(lo <= v && v <= hi, "{lo} <= {v} <= {hi}");
            let mean: f64 = rows.iter().map(|r| r.0 as f64 * r.1[j]).sum::<f64>() / total as f64;
            prop_assert!((v - mean).abs() <= 1e-12 * mean.abs().max(1.0));
        }
        let mut reversed = contributions.clone();
        reversed.reverse();
        prop_assert_eq!(fedavg_aggregate(&reversed).unwrap().params, agg.params);
    }

    #[test]
    fn fixed_ratio_partitions_meet_their_targets(
        ratio in prop::sample::select(vec![0.6, 0.7, 0.8, 0.9]),
        clients in 2usize..7,
        per_class in 60usize..120,
        seed in 0u64..1000,
    ) {
        let set = make_texture_corpus(per_class, 4, seed).unwrap();
        let p = partition(&set, clients, &PartitionMode::non_iid(ratio), seed).unwrap();
        majority_ok(&set, &p);
        disjoint_exhaustive(set.len(), &p);
    }

    #[test]
    fn iid_partitions_are_even_and_exhaustive(clients in 1usize..9, per_class in 5usize..40, seed in 0u64..1000) {
        let set = make_texture_corpus(per_class, 4, seed).unwrap();
        let p = partition(&set, clients, &PartitionMode::Iid, seed).unwrap();
        let sizes: Vec<usize> = p.clients.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        disjoint_exhaustive(set.len(), &p);
    }
}
