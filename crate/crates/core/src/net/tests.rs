use super::*;
use crate::data::{generate_synthetic, Dataset};
use crate::evidential::{data_term, BinaryLabel};
use tempfile::tempdir;

fn blobs(n: usize, seed: u64) -> Dataset {
    generate_synthetic(n, 0.0, 2, 0.5, seed).unwrap()
}

fn refs(ds: &Dataset) -> Vec<&LabeledSample> {
    ds.samples.iter().collect()
}

#[test]
fn zero_network_gives_total_uncertainty() {
    let mut net = Network::init(3, &[4, 4], 0.5, EvidenceActivation::Relu, 1).unwrap();
    for l in net.layers_mut() {
        l.weights.iter_mut().for_each(|w| *w = 0.0);
        l.bias.iter_mut().for_each(|b| *b = 0.0);
    }
    let mut rng = rng::stream(0, rng::STREAM_DROPOUT);
    for mode in [Mode::Train, Mode::Eval] {
        let e = net.forward(&[0.3, -1.0, 2.0], mode, &mut rng).unwrap();
        assert_eq!(e, EvidencePair::default());
        assert_eq!(e.to_beta().uncertainty(), 1.0);
    }
}

#[test]
fn zero_dropout_train_equals_eval() {
    let net = Network::init(2, &[8, 8], 0.0, EvidenceActivation::Relu, 4).unwrap();
    let mut rng = rng::stream(9, rng::STREAM_DROPOUT);
    for x in [[0.1, 0.2], [-3.0, 1.5], [2.0, -0.7]] {
        let train = net.forward(&x, Mode::Train, &mut rng).unwrap();
        let eval = net.forward(&x, Mode::Eval, &mut rng).unwrap();
        assert_eq!(train, eval);
    }
}

#[test]
fn train_mode_is_seed_deterministic() {
    let net = Network::init(2, &[16], 0.5, EvidenceActivation::Relu, 4).unwrap();
    let x = [0.4, -0.2];
    let a = net.forward(&x, Mode::Train, &mut rng::stream(3, 2)).unwrap();
    let b = net.forward(&x, Mode::Train, &mut rng::stream(3, 2)).unwrap();
    assert_eq!(a, b);
    // Different masks eventually give different outputs.
    let mut rng = rng::stream(3, 2);
    let outs: Vec<EvidencePair> = (0..20).map(|_| net.forward(&x, Mode::Train, &mut rng).unwrap()).collect();
    assert!(outs.iter().any(|o| *o != outs[0]));
}

#[test]
fn evidence_is_non_negative() {
    for act in [EvidenceActivation::Relu, EvidenceActivation::Softplus] {
        let net = Network::init(2, &[8], 0.3, act, 11).unwrap();
        for i in 0..50 {
            let x = [i as f64 * 0.3 - 7.0, (i as f64).sin() * 4.0];
            let e = net.evidence(&x).unwrap();
            assert!(e.e_pos >= 0.0 && e.e_neg >= 0.0);
        }
    }
}

#[test]
fn shape_mismatch_is_an_error() {
    let net = Network::init(2, &[4], 0.0, EvidenceActivation::Relu, 0).unwrap();
    assert!(matches!(net.evidence(&[1.0]), Err(Error::Shape { expected: 2, got: 1 })));
}

#[test]
fn construction_rejects_bad_shapes() {
    assert!(Network::init(2, &[4], 1.0, EvidenceActivation::Relu, 0).is_err());
    assert!(Network::from_layers(vec![Dense::zeros(3, 2)], 0.0, EvidenceActivation::Relu).is_err());
    let mismatched = vec![Dense::zeros(4, 2), Dense::zeros(2, 5)];
    assert!(Network::from_layers(mismatched, 0.0, EvidenceActivation::Relu).is_err());
}

fn check_batch(seed: u64) -> Dataset {
    // Overlapping classes so that both labels see mixed evidence.
    generate_synthetic(16, 0.3, 2, 0.5, seed).unwrap()
}

#[test]
fn gradient_matches_finite_differences_on_2_8_8_2() {
    for seed in 0..10u64 {
        let net = Network::init_random(2, &[8, 8], 0.5, EvidenceActivation::Relu, seed).unwrap();
        let ds = check_batch(100 + seed);
        let err = gradient_check(&net, &refs(&ds), 1.0, seed, 1e-5).unwrap();
        assert!(err <= 1e-4, "seed {seed}: max error {err}");
    }
}

#[test]
fn gradient_check_softplus_and_lambda_values() {
    for (seed, lambda) in [(1u64, 0.0), (2, 0.1), (3, 0.001)] {
        let net = Network::init_random(2, &[8, 8], 0.2, EvidenceActivation::Softplus, seed).unwrap();
        let ds = check_batch(seed);
        let err = gradient_check(&net, &refs(&ds), lambda, seed, 1e-5).unwrap();
        assert!(err <= 1e-4, "seed {seed}: max error {err}");
    }
}

#[test]
fn dead_relu_unit_gets_zero_incoming_gradient() {
    let mut net = Network::init(2, &[6, 6], 0.0, EvidenceActivation::Relu, 5).unwrap();
    // Hidden unit 2 of the first layer: zero weights and a negative bias keep it off.
    let first = &mut net.layers_mut()[0];
    first.weights[4] = 0.0;
    first.weights[5] = 0.0;
    first.bias[2] = -1.0;
    net.layers_mut().last_mut().unwrap().bias = vec![0.5, 0.5];
    let ds = check_batch(3);
    let (_, g) = net.backward(&refs(&ds), 1.0, &mut rng::stream(0, 2)).unwrap();
    assert_eq!(&g.layers[0].weights[4..6], &[0.0, 0.0]);
    assert_eq!(g.layers[0].bias[2], 0.0);
    assert!(g.max_abs() > 0.0);
}

#[test]
fn lambda_zero_gradient_is_data_term_gradient() {
    let net = Network::init_random(2, &[5], 0.0, EvidenceActivation::Relu, 8).unwrap();
    let ds = check_batch(21);
    let batch = refs(&ds);
    let (_, g) = net.backward(&batch, 0.0, &mut rng::stream(0, 2)).unwrap();
    let mean_data = |n: &Network| {
        batch
            .iter()
            .map(|s| data_term(s.label, n.evidence(&s.features).unwrap().to_beta()))
            .sum::<f64>()
            / batch.len() as f64
    };
    let h = 1e-5;
    for l in 0..net.layers().len() {
        for k in 0..net.layers()[l].param_count() {
            let mut p = net.clone();
            *p.param_mut(l, k) += h;
            let plus = mean_data(&p);
            *p.param_mut(l, k) -= 2.0 * h;
            let minus = mean_data(&p);
            let fd = (plus - minus) / (2.0 * h);
            let a = g.layers[l].param(k);
            assert!((a - fd).abs() <= 1e-6f64.max(1e-4 * a.abs()), "layer {l} param {k}: {a} vs {fd}");
        }
    }
}

fn quick_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.01,
        batch_size: 32,
        max_epochs: 60,
        patience: 5,
        dropout: 0.2,
        seed,
        hidden: vec![32, 32],
        momentum: 0.9,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic() {
    let ds = blobs(300, 1);
    let cfg = TrainConfig {
        max_epochs: 5,
        ..quick_config(3)
    };
    let a = train(&ds.samples[..250], &ds.samples[250..], &cfg).unwrap();
    let b = train(&ds.samples[..250], &ds.samples[250..], &cfg).unwrap();
    assert_eq!(a, b);
    let c = train(&ds.samples[..250], &ds.samples[250..], &TrainConfig { seed: 4, ..cfg }).unwrap();
    assert_ne!(a.network, c.network);
}

#[test]
fn separable_blobs_are_learned_confidently() {
    let ds = blobs(500, 2);
    let model = train(&ds.samples, &[], &quick_config(0)).unwrap();
    let mut correct = 0;
    let mut u_sum = 0.0;
    for s in &ds.samples {
        let b = model.network.evidence(&s.features).unwrap().to_beta();
        correct += usize::from((b.p_pos() >= 0.5) == s.label.is_positive());
        u_sum += b.uncertainty();
    }
    let acc = correct as f64 / ds.len() as f64;
    let mean_u = u_sum / ds.len() as f64;
    assert!(acc >= 0.99, "accuracy {acc}");
    assert!(mean_u <= 0.5, "mean uncertainty {mean_u}");
    assert_eq!(model.history.len(), 60);
}

#[test]
fn first_epoch_decreases_loss_at_small_learning_rate() {
    let ds = blobs(1000, 6);
    let cfg = TrainConfig {
        max_epochs: 1,
        ..TrainConfig::default()
    };
    let init = Network::init(2, &cfg.hidden, cfg.dropout, cfg.activation, cfg.seed).unwrap();
    let model = train(&ds.samples, &[], &cfg).unwrap();
    let batch = refs(&ds);
    let before = init.batch_loss(&batch, 1.0, Mode::Eval, &mut rng::stream(0, 2)).unwrap();
    let after = model.network.batch_loss(&batch, 1.0, Mode::Eval, &mut rng::stream(0, 2)).unwrap();
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn zero_patience_stops_at_first_non_improving_epoch() {
    let ds = generate_synthetic(400, 0.3, 2, 0.5, 7).unwrap();
    let cfg = TrainConfig {
        patience: 0,
        max_epochs: 200,
        learning_rate: 0.2,
        momentum: 0.9,
        ..quick_config(1)
    };
    let model = train(&ds.samples[..300], &ds.samples[300..], &cfg).unwrap();
    let vals: Vec<f64> = model.history.iter().map(|h| h.val_loss.unwrap()).collect();
    let last = vals.len() - 1;
    assert!(last < 199, "never stopped");
    for i in 1..last {
        assert!(vals[i] < vals[..i].iter().cloned().fold(f64::INFINITY, f64::min));
    }
    assert!(vals[last] >= vals[..last].iter().cloned().fold(f64::INFINITY, f64::min));
    assert_eq!(model.best_epoch, last - 1);
}

#[test]
fn training_leaves_input_untouched() {
    let ds = blobs(100, 3);
    let copy = ds.clone();
    let cfg = TrainConfig {
        max_epochs: 2,
        ..quick_config(0)
    };
    train(&ds.samples, &ds.samples[..10], &cfg).unwrap();
    assert_eq!(ds, copy);
}

#[test]
fn divergence_is_reported() {
    let ds = generate_synthetic(200, 0.2, 2, 0.5, 1).unwrap();
    let mut samples = ds.samples.clone();
    samples[0].features[0] = f64::NAN;
    let cfg = TrainConfig {
        max_epochs: 3,
        ..quick_config(0)
    };
    assert!(matches!(train(&samples, &[], &cfg), Err(Error::Diverged { epoch: 0 })));
}

#[test]
fn invalid_config_rejected() {
    let ds = blobs(10, 0);
    for cfg in [
        TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { momentum: 1.0, ..TrainConfig::default() },
    ] {
        assert!(matches!(train(&ds.samples, &[], &cfg), Err(Error::Config(_))));
    }
    assert!(matches!(train(&[], &[], &TrainConfig::default()), Err(Error::Config(_))));
}

#[test]
fn model_file_round_trip() {
    let ds = blobs(120, 4);
    let cfg = TrainConfig {
        max_epochs: 3,
        ..quick_config(5)
    };
    let model = train(&ds.samples[..100], &ds.samples[100..], &cfg).unwrap();
    let dir = tempdir().unwrap();
    let path = dir.path().join("m.evdl");
    save_model(&model, &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back, model);

    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"EVDL");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), MODEL_FORMAT_VERSION);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
    // rows, cols of the first layer
    assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 32);
    assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 2);
    let expected_len = 12 + 3 * 8 + 8 * model.network.param_count();
    assert_eq!(bytes.len(), expected_len);
    let first_weight = f64::from_le_bytes(bytes[36..44].try_into().unwrap());
    assert_eq!(first_weight, model.network.layers()[0].weights[0]);
}

#[test]
fn corrupt_model_files_rejected() {
    let net = Network::init(2, &[3], 0.1, EvidenceActivation::Relu, 0).unwrap();
    let good = io::encode_network(&net);
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    assert!(matches!(io::decode_network(&bad_magic, 0.1, EvidenceActivation::Relu), Err(Error::Format(_))));
    assert!(matches!(
        io::decode_network(&good[..good.len() - 3], 0.1, EvidenceActivation::Relu),
        Err(Error::Format(_))
    ));
    let mut bad_version = good.clone();
    bad_version[4] = 9;
    assert!(matches!(io::decode_network(&bad_version, 0.1, EvidenceActivation::Relu), Err(Error::Format(_))));
    assert_eq!(io::decode_network(&good, 0.1, EvidenceActivation::Relu).unwrap(), net);
}

#[test]
fn labels_round_trip_through_bool() {
    assert_eq!(BinaryLabel::from(true), BinaryLabel::Positive);
    assert_eq!(BinaryLabel::from(false).flipped(), BinaryLabel::Positive);
}


