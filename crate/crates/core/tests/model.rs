use usg_core::dataset::DemoPlan;
use usg_core::model::{
    majority_baseline, Batch, Hyper, ModelConfig, ModelError, QualityModel, Variant, MODEL_FORMAT_VERSION,
};
use usg_core::nn::Tensor;
use usg_core::phantom::ImageSize;
use usg_core::{build_dataset, Dataset, PhantomConfig, ProbeState, Quat};

const SIDE: usize = 32;

fn phantom() -> PhantomConfig {
    PhantomConfig::with_image(SIDE, SIDE, 1)
}

fn config(v: Variant) -> ModelConfig {
    ModelConfig::desk(v).with_image(ImageSize {
        height: SIDE,
        width: SIDE,
        channels: 1,
    })
}

fn data(n: usize, target: f64, seed: u64) -> Dataset {
    build_dataset(&DemoPlan::standard(n, 10), &phantom(), seed, Some(target)).unwrap()
}

fn linear(i: usize, o: usize) -> usize {
    i * o + o
}

fn conv(i: usize, o: usize) -> usize {
    i * o * 9 + o
}

#[test]
fn desk_net4_parameter_count_matches_hand_count() {
    // 64x64x1: stride-2 conv to 32x32, four 2x2 pools leave 64 x 2 x 2
    let image = conv(1, 16) + conv(16, 32) + conv(32, 64) + conv(64, 64) + linear(64 * 2 * 2, 128);
    let pf = linear(10, 64) + linear(64, 128) + linear(128, 128) + linear(128, 128);
    let head = linear(256, 128) + linear(128, 2);
    let m = QualityModel::build(ModelConfig::desk(Variant::Net4), 0).unwrap();
    assert_eq!(m.param_count(), image + pf + head);
    assert_eq!(ModelConfig::desk(Variant::Net4).param_count(), image + pf + head);

    let pose_only = image + linear(4, 64) + linear(64, 128) + 2 * linear(128, 128) + head;
    assert_eq!(ModelConfig::desk(Variant::Net1).param_count(), pose_only);
    let two_streams = image + linear(4, 64) + linear(6, 64) + 2 * (linear(64, 128) + 2 * linear(128, 128));
    assert_eq!(
        ModelConfig::desk(Variant::Net3).param_count(),
        two_streams + linear(384, 128) + linear(128, 2)
    );
}

#[test]
fn pose_only_variant_rejects_force_rows() {
    let m = QualityModel::build(config(Variant::Net1), 0).unwrap();
    let batch = Batch {
        images: Tensor::zeros(&[1, 1, SIDE, SIDE]),
        pf: Tensor::zeros(&[1, 6]),
    };
    assert!(matches!(m.forward_batch(&batch), Err(ModelError::Shape(_))));
    let frame = usg_core::render(&ProbeState::upright(6.0), &PhantomConfig::default(), 0).unwrap();
    assert!(matches!(
        m.forward(&frame, &ProbeState::upright(6.0)),
        Err(ModelError::Shape(_))
    ));
}

#[test]
fn builds_are_pure_functions_of_config_and_seed() {
    let a = QualityModel::build(config(Variant::Net4), 3).unwrap();
    let b = QualityModel::build(config(Variant::Net4), 3).unwrap();
    let c = QualityModel::build(config(Variant::Net4), 4).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_ne!(a.params.to_bytes(), c.params.to_bytes());
}

#[test]
fn forward_returns_a_probability_and_a_task_feature() {
    let m = QualityModel::build(config(Variant::Net3), 1).unwrap();
    let d = data(100, 0.4, 1);
    for s in d.samples.iter().step_by(9) {
        let p = m.forward(&s.frame, &s.state).unwrap();
        assert!((0.0..=1.0).contains(&p.confidence));
        assert!(((p.probabilities[0] + p.probabilities[1]) - 1.0).abs() < 1e-6);
        assert_eq!(p.confidence, p.probabilities[1]);
        assert_eq!(p.feature.values().len(), 128);
        assert!(p.feature.values().iter().all(|v| v.is_finite()));
        assert_eq!(p, m.forward(&s.frame, &s.state).unwrap());
    }
}

#[test]
fn unnormalized_quaternions_never_reach_the_model() {
    assert!(ProbeState::new(Quat::new(1.0, 0.5, 0.0, 0.0), [0.0, 0.0, 6.0, 0.0, 0.0, 0.0]).is_err());
}

#[test]
fn untrained_models_sit_at_chance_on_balanced_data() {
    let d = data(200, 0.5, 2);
    for seed in 0..4 {
        let m = QualityModel::build(config(Variant::Net4), seed).unwrap();
        let acc = m.evaluate(&d).unwrap().accuracy;
        assert!((0.35..=0.65).contains(&acc), "seed {seed}: {acc}");
    }
}

#[test]
fn every_parameter_gets_gradient_after_one_batch() {
    let d = data(100, 0.4, 3);
    let refs: Vec<_> = d.samples.iter().take(20).collect();
    let labels: Vec<u8> = refs.iter().map(|s| s.label).collect();
    for v in Variant::ALL {
        let mut m = QualityModel::build(config(v), 5).unwrap();
        let batch = m.batch(&refs).unwrap();
        m.loss_and_grads(&batch, &labels).unwrap();
        for p in m.params.iter() {
            assert!(
                p.grad.data().iter().any(|g| *g != 0.0),
                "{v}: {} has no gradient",
                p.name
            );
        }
    }
}

#[test]
fn constant_class_model_scores_the_negative_share() {
    let d = data(500, 0.378, 4);
    let mut m = QualityModel::build(config(Variant::Net4), 0).unwrap();
    m.params.get_mut("head.0.weight").unwrap().value.fill(0.0);
    let b = &mut m.params.get_mut("head.0.bias").unwrap().value;
    b.data_mut().copy_from_slice(&[1.0, 0.0]);
    let e = m.evaluate(&d).unwrap();
    let negatives = d.samples.iter().filter(|s| s.label == 0).count() as f64 / d.len() as f64;
    assert_eq!(e.accuracy, negatives);
    assert!((e.accuracy - 0.622).abs() <= 0.01);
    assert_eq!(e.accuracy, majority_baseline(&d));
}

#[test]
fn evaluation_ignores_sample_order() {
    let d = data(200, 0.4, 5);
    let m = QualityModel::build(config(Variant::Net2), 2).unwrap();
    let mut rev = d.clone();
    rev.samples.reverse();
    let (a, b) = (m.evaluate(&d).unwrap(), m.evaluate(&rev).unwrap());
    assert_eq!(a.confusion, b.confusion);
    assert_eq!(a.accuracy, b.accuracy);
}

#[test]
fn zero_epochs_leave_the_model_alone() {
    let d = data(100, 0.4, 6);
    let mut m = QualityModel::build(config(Variant::Net4), 1).unwrap();
    let before = m.to_bytes();
    let r = m
        .train(
            &d,
            None,
            &Hyper {
                epochs: 0,
                ..Hyper::default()
            },
        )
        .unwrap();
    assert!(r.epochs.is_empty());
    assert_eq!(m.to_bytes(), before);
    assert!((0.0..=1.0).contains(&r.final_evaluation.accuracy));
}

#[test]
fn training_is_bitwise_reproducible_and_reports_every_epoch() {
    let d = data(200, 0.4, 7);
    let (train, val) = d.split(0.2, 0).unwrap();
    let hyper = Hyper {
        epochs: 2,
        seed: 9,
        ..Hyper::default()
    };
    let run = || {
        let mut m = QualityModel::build(config(Variant::Net4), 9).unwrap();
        let r = m.train(&train, Some(&val), &hyper).unwrap();
        (m.to_bytes(), r)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a, b);
    assert_eq!(ra.epochs, rb.epochs);
    assert_eq!(ra.epochs.len(), 2);
    for e in &ra.epochs {
        assert!((0.0..=1.0).contains(&e.train_accuracy));
        assert!(e.val_accuracy.is_some_and(|v| (0.0..=1.0).contains(&v)));
    }
    let csv = ra.to_csv();
    assert!(csv.starts_with("epoch,train_loss,train_accuracy,val_loss,val_accuracy\n"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn runaway_learning_rates_are_reported_as_divergence() {
    let d = data(100, 0.4, 8);
    let mut m = QualityModel::build(config(Variant::Net4), 0).unwrap();
    let hyper = Hyper {
        lr: 1e6,
        epochs: 3,
        ..Hyper::default()
    };
    match m.train(&d, None, &hyper) {
        Err(ModelError::Diverged { epoch, .. }) => assert!(epoch >= 1),
        other => panic!("expected divergence, got {other:?}"),
    }
    assert!(matches!(
        m.train(&d, None, &Hyper { lr: 0.0, ..hyper }),
        Err(ModelError::Hyper(_))
    ));
    let empty = Dataset::new(Vec::new(), phantom(), 0);
    assert!(matches!(
        m.train(&empty, None, &Hyper::default()),
        Err(ModelError::Empty)
    ));
}

#[test]
fn trained_model_is_more_confident_on_good_frames() {
    let d = data(600, 0.378, 9);
    let (train, val) = d.split(0.2, 1).unwrap();
    let mut m = QualityModel::build(config(Variant::Net4), 2).unwrap();
    let r = m
        .train(
            &train,
            Some(&val),
            &Hyper {
                epochs: 6,
                seed: 2,
                ..Hyper::default()
            },
        )
        .unwrap();
    let [neg, pos] = r.final_evaluation.mean_confidence;
    assert!(pos > neg, "label-1 {pos} vs label-0 {neg}");
}

#[test]
fn warm_start_touches_only_the_image_encoder() {
    let d = data(200, 0.4, 10);
    let mut m = QualityModel::build(config(Variant::Net4), 3).unwrap();
    let before = m.params.clone();
    m.pretrain_image_encoder(
        &d,
        None,
        &Hyper {
            epochs: 1,
            ..Hyper::default()
        },
    )
    .unwrap();
    for p in m.params.iter() {
        let old = before.get(&p.name).unwrap();
        if p.name.starts_with("image.") {
            continue;
        }
        assert_eq!(p.value, old.value, "{} changed", p.name);
    }
    assert!(m
        .params
        .iter()
        .filter(|p| p.name.starts_with("image."))
        .any(|p| p.value != before.get(&p.name).unwrap().value));
    assert!(!m.params.iter().any(|p| p.name.starts_with("warmup")));
}

#[test]
fn model_files_round_trip_and_reject_damage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.usgm");
    let d = data(100, 0.4, 11);
    let mut m = QualityModel::build(config(Variant::Net3), 4).unwrap();
    m.train(
        &d,
        None,
        &Hyper {
            epochs: 1,
            ..Hyper::default()
        },
    )
    .unwrap();
    m.save(&path).unwrap();
    let back = QualityModel::load(&path).unwrap();
    assert_eq!(back.to_bytes(), m.to_bytes());
    assert_eq!(back.config, m.config);
    assert_eq!(back.trained_epochs, 1);
    let s = &d.samples[0];
    assert_eq!(
        back.forward(&s.frame, &s.state).unwrap(),
        m.forward(&s.frame, &s.state).unwrap()
    );

    let bytes = m.to_bytes();
    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 1;
    assert!(matches!(
        QualityModel::from_bytes(&flipped),
        Err(ModelError::Checksum { .. })
    ));
    assert!(matches!(
        QualityModel::from_bytes(&bytes[..bytes.len() - 7]),
        Err(ModelError::Truncated(_))
    ));
    let mut future = bytes.clone();
    future[5..9].copy_from_slice(&(MODEL_FORMAT_VERSION + 1).to_le_bytes());
    assert!(matches!(
        QualityModel::from_bytes(&future),
        Err(ModelError::Version { .. })
    ));
    assert!(matches!(
        QualityModel::from_bytes(b"USGD1...."),
        Err(ModelError::BadMagic)
    ));
}
