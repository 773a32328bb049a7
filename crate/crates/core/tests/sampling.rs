use evdl_core::data::{generate_synthetic, Dataset};
use evdl_core::evidential::EvidencePair;
use evdl_core::net::{train, Dense, EvidenceActivation, EvidenceModel, Mode, Network, TrainConfig};
use evdl_core::rng;
use evdl_core::sampling::{
    ensemble_evidence, ensemble_train, load_ensemble, mc_dropout_evidence, member_subset, save_ensemble,
    EnsembleModel,
};
use evdl_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.01,
        batch_size: 32,
        max_epochs: 4,
        dropout: 0.2,
        hidden: vec![8],
        momentum: 0.9,
        seed,
        ..TrainConfig::default()
    }
}

fn dataset(n: usize) -> Dataset {
    generate_synthetic(n, 0.1, 2, 0.5, 11).unwrap()
}

/// Single-layer network whose output is a fixed evidence pair regardless of input.
fn constant_member(e_pos: f64, e_neg: f64, seed: u64) -> evdl_core::net::TrainedModel {
    let mut out = Dense::zeros(2, 1);
    out.bias = vec![e_pos, e_neg];
    let network = Network::from_layers(vec![out], 0.0, EvidenceActivation::Relu).unwrap();
    evdl_core::net::TrainedModel {
        network,
        history: Vec::new(),
        best_epoch: 0,
        config: TrainConfig { seed, ..TrainConfig::default() },
    }
}

#[test]
fn single_full_member_equals_plain_training() {
    let ds = dataset(200);
    let cfg = small_config(0);
    let ens = ensemble_train(&ds.samples, &[], &cfg, 1, 1.0, 9).unwrap();
    let plain = train(&ds.samples, &[], &TrainConfig { seed: 9, ..cfg }).unwrap();
    assert_eq!(ens.members()[0], plain);
    for s in &ds.samples[..20] {
        assert_eq!(ens.evidence(&s.features).unwrap(), plain.network.evidence(&s.features).unwrap());
    }
}

#[test]
fn members_see_distinct_subsets_of_exact_size() {
    let subsets: Vec<Vec<usize>> = (0..5).map(|k| member_subset(1000, 0.8, 40 + k)).collect();
    for s in &subsets {
        assert_eq!(s.len(), 800);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }
    for i in 0..5 {
        for j in i + 1..5 {
            assert_ne!(subsets[i], subsets[j]);
        }
    }
}

#[test]
fn ensemble_training_is_deterministic_and_uses_offset_seeds() {
    let ds = dataset(300);
    let a = ensemble_train(&ds.samples, &[], &small_config(0), 3, 0.8, 5).unwrap();
    let b = ensemble_train(&ds.samples, &[], &small_config(0), 3, 0.8, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.seeds(), &[5, 6, 7]);
    assert_eq!(a.members()[2].config.seed, 7);
}

#[test]
fn subset_smaller_than_a_batch_is_rejected() {
    let ds = dataset(100);
    let cfg = TrainConfig {
        batch_size: 128,
        ..small_config(0)
    };
    assert!(matches!(
        ensemble_train(&ds.samples, &[], &cfg, 2, 0.8, 0),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        ensemble_train(&ds.samples, &[], &small_config(0), 0, 0.8, 0),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        ensemble_train(&ds.samples, &[], &small_config(0), 2, 0.0, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn opposite_members_average_to_half_uncertainty() {
    let ens = EnsembleModel::new(
        vec![constant_member(2.0, 0.0, 0), constant_member(0.0, 2.0, 1)],
        vec![0, 1],
        1.0,
    )
    .unwrap();
    let e = ensemble_evidence(&ens, &[0.3]).unwrap();
    assert_eq!(e, EvidencePair { e_pos: 1.0, e_neg: 1.0 });
    assert_eq!(e.to_beta().uncertainty(), 0.5);
}

#[test]
fn identical_members_and_single_member_are_identity() {
    let one = constant_member(1.5, 0.25, 0);
    let single = EnsembleModel::new(vec![one.clone()], vec![0], 1.0).unwrap();
    let triple = EnsembleModel::new(vec![one.clone(), one.clone(), one.clone()], vec![0, 1, 2], 1.0).unwrap();
    let e = one.network.evidence(&[2.0]).unwrap();
    assert_eq!(ensemble_evidence(&single, &[2.0]).unwrap(), e);
    assert_eq!(ensemble_evidence(&triple, &[2.0]).unwrap(), e);
}

#[test]
fn mismatched_members_are_rejected() {
    let a = constant_member(1.0, 1.0, 0);
    let mut b = constant_member(1.0, 1.0, 1);
    b.network = Network::from_layers(vec![Dense::zeros(2, 3)], 0.0, EvidenceActivation::Relu).unwrap();
    assert!(matches!(
        EnsembleModel::new(vec![a.clone(), b], vec![0, 1], 1.0),
        Err(Error::Shape { .. })
    ));
    assert!(EnsembleModel::new(vec![], vec![], 1.0).is_err());
    assert!(EnsembleModel::new(vec![a], vec![0, 1], 1.0).is_err());
}

#[test]
fn mc_dropout_without_dropout_is_the_eval_pass() {
    let net = Network::init_random(3, &[6, 6], 0.0, EvidenceActivation::Relu, 2).unwrap();
    let x = [0.2, -0.7, 1.1];
    for passes in [1, 7, 50] {
        let e = mc_dropout_evidence(&net, &x, passes, 3).unwrap();
        let eval = net.evidence(&x).unwrap();
        assert!((e.e_pos - eval.e_pos).abs() < 1e-12 && (e.e_neg - eval.e_neg).abs() < 1e-12);
    }
}

#[test]
fn single_mc_pass_is_one_train_mode_forward() {
    let net = Network::init_random(3, &[6, 6], 0.4, EvidenceActivation::Relu, 2).unwrap();
    let x = [0.2, -0.7, 1.1];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let expected = net.forward(&x, Mode::Train, &mut rng).unwrap();
    assert_eq!(mc_dropout_evidence(&net, &x, 1, 17).unwrap(), expected);
    assert_eq!(
        mc_dropout_evidence(&net, &x, 25, 17).unwrap(),
        mc_dropout_evidence(&net, &x, 25, 17).unwrap()
    );
    assert!(mc_dropout_evidence(&net, &x, 0, 17).is_err());
    assert!(matches!(mc_dropout_evidence(&net, &x[..2], 3, 17), Err(Error::Shape { .. })));
}

#[test]
fn mc_dropout_mean_matches_two_state_expectation() {
    // x -> h = relu(w·x + b) -> mask m ∈ {0, 1/(1-p)} -> e = relu(v·h·m + c)
    let rate = 0.3;
    let mut hidden = Dense::zeros(1, 1);
    hidden.weights = vec![1.5];
    hidden.bias = vec![0.2];
    let mut out = Dense::zeros(2, 1);
    out.weights = vec![0.8, -0.4];
    out.bias = vec![0.1, 1.0];
    let net = Network::from_layers(vec![hidden, out], rate, EvidenceActivation::Relu).unwrap();
    let x = 0.6;
    let h: f64 = (1.5 * x + 0.2_f64).max(0.0);
    let relu = |z: f64| z.max(0.0);
    let kept = [relu(0.8 * h / (1.0 - rate) + 0.1), relu(-0.4 * h / (1.0 - rate) + 1.0)];
    let dropped = [relu(0.1), relu(1.0)];
    let n = 10_000;
    let mc = mc_dropout_evidence(&net, &[x], n, 99).unwrap();
    for (c, got) in [mc.e_pos, mc.e_neg].into_iter().enumerate() {
        let mean = rate * dropped[c] + (1.0 - rate) * kept[c];
        let var = rate * (1.0 - rate) * (kept[c] - dropped[c]).powi(2);
        let se = (var / n as f64).sqrt();
        assert!((got - mean).abs() <= 3.0 * se, "component {c}: {got} vs {mean} ± {se}");
    }
}

#[test]
fn ensemble_round_trips_through_a_directory() {
    let ds = dataset(200);
    let ens = ensemble_train(&ds.samples, &[], &small_config(0), 2, 0.8, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_ensemble(&ens, dir.path()).unwrap();
    assert!(dir.path().join("member_0.evdl").exists());
    assert!(dir.path().join("member_1.evdl.meta").exists());
    let manifest = std::fs::read_to_string(dir.path().join("ensemble.txt")).unwrap();
    assert!(manifest.contains("subset_fraction=0.8"));
    assert!(manifest.contains("member=member_1.evdl,4"));
    assert_eq!(load_ensemble(dir.path()).unwrap(), ens);

    std::fs::write(dir.path().join("ensemble.txt"), manifest.replace("members=2", "members=3")).unwrap();
    assert!(matches!(load_ensemble(dir.path()), Err(Error::Format(_))));
}

fn arb_pair() -> impl Strategy<Value = (f64, f64)> {
    (0.0..50.0f64, 0.0..50.0f64)
}

proptest! {
    #[test]
    fn averaged_evidence_is_bounded_and_order_free(pairs in prop::collection::vec(arb_pair(), 1..8), seed in any::<u64>()) {
        let members: Vec<_> = pairs.iter().enumerate().map(|(k, &(p, n))| constant_member(p, n, k as u64)).collect();
        let seeds: Vec<u64> = (0..members.len() as u64).collect();
        let ens = EnsembleModel::new(members.clone(), seeds.clone(), 1.0).unwrap();
        let e = ensemble_evidence(&ens, &[0.0]).unwrap();
        prop_assert!(e.e_pos >= 0.0 && e.e_neg >= 0.0);
        let u = e.to_beta().uncertainty();
        prop_assert!(u > 0.0 && u <= 1.0);
        let max_total = pairs.iter().map(|&(p, n)| p + n).fold(0.0, f64::max);
        prop_assert!(e.total() <= max_total * (1.0 + 1e-12));

        let mut shuffled = members;
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut rng::stream(seed, 0));
        let perm = EnsembleModel::new(shuffled, seeds, 1.0).unwrap();
        let e2 = ensemble_evidence(&perm, &[0.0]).unwrap();
        prop_assert!((e.e_pos - e2.e_pos).abs() <= 1e-12 * e.e_pos.max(1.0));
        prop_assert!((e.e_neg - e2.e_neg).abs() <= 1e-12 * e.e_neg.max(1.0));
    }
}
