use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rstd_core::data::{Dataset, Provenance, IMAGE_SIDE};
use rstd_core::nn::{build_table1_network, Layer, LayerCompression, Linear, Network, NetworkSpec};
use rstd_core::tdmodel::TopologyKind;
use rstd_core::trainer::{evaluate, sgd_nesterov_step, train, TrainConfig};
use rstd_core::{DenseTensor, Error, ExecMode};

fn random_dataset(count: usize, seed: u64) -> Dataset {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let images = DenseTensor::from_fn(&[count, 3, IMAGE_SIDE, IMAGE_SIDE], |_| r.random::<f32>()).unwrap();
    let labels = (0..count).map(|i| (i % 10) as u8).collect();
    Dataset::new(images, labels, Provenance::Clean).unwrap()
}

fn tt(ranks: usize) -> LayerCompression {
    LayerCompression::Td {
        kind: TopologyKind::TensorTrain,
        ranks: vec![ranks; 3],
    }
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        lr_milestones: vec![1],
        total_epochs: 2,
        batch_size: 8,
        repetitions: 2,
        seed: 17,
        ..TrainConfig::default()
    }
}

#[test]
fn desk_width_shape_chain() {
    let net = build_table1_network::<f32>(&NetworkSpec::uncompressed(32), 0).unwrap();
    let shapes = net.layer_output_shapes(&[2, 3, 32, 32]).unwrap();
    let conv: Vec<&Vec<usize>> = shapes.iter().filter(|(n, _)| n.starts_with("conv")).map(|(_, s)| s).collect();
    let sides: Vec<usize> = conv.iter().map(|s| s[2]).collect();
    assert_eq!(sides, vec![32, 32, 16, 16, 16, 8, 8]);
    assert!(conv.iter().all(|s| s[1] == 32));
    assert_eq!(shapes.last().unwrap().1, vec![2, 10]);
}

#[test]
fn first_layer_cannot_be_compressed() {
    let mut spec = NetworkSpec::uniform(8, tt(2));
    spec.layers[0] = tt(2);
    assert!(build_table1_network::<f32>(&spec, 0).is_err());
}

#[test]
fn rank1_tr_ratio_at_full_width() {
    let spec = NetworkSpec::uniform(
        256,
        LayerCompression::Td {
            kind: TopologyKind::TensorRing,
            ranks: vec![1; 4],
        },
    );
    let rc = spec.compression_ratio().unwrap();
    assert!((0.003..=0.006).contains(&rc), "{rc}");
}

/// Input channel 0 carries `label / 10`; channel 1 is constant one.
fn encoded_dataset() -> Dataset {
    let n = 50;
    let side = IMAGE_SIDE * IMAGE_SIDE;
    let images = DenseTensor::from_fn(&[n, 3, IMAGE_SIDE, IMAGE_SIDE], |i| {
        let (img, ch) = (i / (3 * side), (i / side) % 3);
        match ch {
            0 => (img % 10) as f32 / 10.0,
            1 => 1.0,
            _ => 0.0,
        }
    })
    .unwrap();
    Dataset::new(images, (0..n).map(|i| (i % 10) as u8).collect(), Provenance::Clean).unwrap()
}

fn pooled_classifier(weight: DenseTensor<f32>) -> Network<f32> {
    let fc = Linear::new(weight, DenseTensor::zeros(&[10]).unwrap()).unwrap();
    Network::from_layers(vec![("pool".into(), Layer::GlobalAvgPool), ("fc".into(), Layer::Linear(fc))]).unwrap()
}

#[test]
fn evaluate_fixtures() {
    let d = encoded_dataset();
    // logit_k = 2 (k/10) f0 - (k/10)^2 f1 peaks at k = label
    let perfect = DenseTensor::from_fn(&[3, 10], |i| {
        let (row, k) = (i / 10, (i % 10) as f32 / 10.0);
        match row {
            0 => 2.0 * k,
            1 => -k * k,
            _ => 0.0,
        }
    })
    .unwrap();
    assert_eq!(evaluate(&pooled_classifier(perfect.clone()), &d).unwrap(), 1.0);
    assert_eq!(evaluate(&pooled_classifier(perfect.scale(12.5)), &d).unwrap(), 1.0);

    let class0 = DenseTensor::from_fn(&[3, 10], |i| if i == 10 { 1.0 } else { 0.0 }).unwrap();
    assert!((evaluate(&pooled_classifier(class0), &d).unwrap() - 0.1).abs() < 1e-12);
}

#[test]
fn zero_epochs_reports_chance_accuracy() {
    let train_set = random_dataset(10, 1);
    let test_set = random_dataset(1000, 2);
    let cfg = TrainConfig {
        lr_milestones: vec![],
        total_epochs: 0,
        repetitions: 3,
        ..TrainConfig::default()
    };
    let out = train::<f32>(&NetworkSpec::uncompressed(8), &train_set, &test_set, &cfg, |_| {}).unwrap();
    let rep = out.report;
    assert!(rep.epochs.is_empty());
    assert_eq!(rep.final_accuracies.len(), 3);
    for &a in &rep.final_accuracies {
        assert!((0.05..=0.15).contains(&a), "{a}");
    }
    let mean = rep.final_accuracies.iter().sum::<f64>() / 3.0;
    assert!((rep.mean_accuracy - mean).abs() < 1e-15);
}

#[test]
fn deterministic_replay_in_both_exec_modes() {
    let train_set = random_dataset(20, 3);
    let test_set = random_dataset(20, 4);
    let spec = NetworkSpec::uniform(4, LayerCompression::decomposition(TopologyKind::TensorRing, vec![2; 4], true));
    let run = |exec| {
        let cfg = TrainConfig { exec, ..tiny_cfg() };
        train::<f32>(&spec, &train_set, &test_set, &cfg, |_| {}).unwrap()
    };
    let a = run(ExecMode::Parallel);
    let b = run(ExecMode::Parallel);
    let c = run(ExecMode::Sequential);
    assert!(a.report.same_results(&b.report));
    assert!(a.report.same_results(&c.report));
    assert_eq!(a.report.epochs.len(), 4);
    assert!(a.report.epochs.iter().all(|e| (0.0..=1.0).contains(&e.test_accuracy)));
    assert_eq!(a.network.named_params(), c.network.named_params());
}

#[test]
fn repetitions_resample_the_shuffle() {
    let spec = NetworkSpec::uniform(4, LayerCompression::decomposition(TopologyKind::TensorTrain, vec![2; 3], true));
    let seeds = [0usize, 1].map(|k| rstd_core::shuffle::repetition_seed(5, k));
    let perms: Vec<Vec<usize>> = seeds
        .iter()
        .map(|&s| {
            let net = build_table1_network::<f32>(&spec, s).unwrap();
            let conv = net.conv_layers().nth(1).unwrap().1;
            conv.shuffle().unwrap().forward().to_vec()
        })
        .collect();
    assert_ne!(perms[0], perms[1]);
}

#[test]
fn overfit_one_batch() {
    let spec = NetworkSpec::uniform(4, tt(2));
    let mut net = build_table1_network::<f64>(&spec, 9).unwrap();
    let d = random_dataset(8, 10);
    let idx: Vec<usize> = (0..8).collect();
    let (x, labels) = d.batch::<f64>(&idx).unwrap();
    let names = net.param_names();
    let mut vel: Vec<DenseTensor<f64>> =
        net.named_params().iter().map(|(_, p)| DenseTensor::zeros(p.shape()).unwrap()).collect();
    let mut losses = Vec::new();
    for _ in 0..6 {
        let (loss, grads) = net.loss_and_grads(&x, &labels).unwrap();
        losses.push(loss);
        sgd_nesterov_step(&mut net.params_mut(), &grads, &mut vel, &names, 0.01, 0.9).unwrap();
    }
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn divergence_is_reported() {
    let train_set = random_dataset(16, 5);
    let cfg = TrainConfig {
        base_lr: 1e300,
        momentum: 0.0,
        ..tiny_cfg()
    };
    let err = train::<f32>(&NetworkSpec::uncompressed(4), &train_set, &train_set, &cfg, |_| {}).unwrap_err();
    assert!(
        matches!(err, Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_)),
        "{err}"
    );
}
