use super::*;
use crate::nn::{Activation, ArchSpec, InputShape, LayerSpec, Padding, PoolKind};
use ndarray::arr1;

/// 10 Gaussian clusters in 8-D: a cheap stand-in classification problem.
fn cluster_centers(classes: usize) -> Vec<Array1<f64>> {
    let mut rng = ChaCha12Rng::seed_from_u64(0xC3);
    (0..classes)
        .map(|_| Array1::from_shape_fn(8, |_| rng.random_range(-3.0..3.0)))
        .collect()
}

fn cluster_dataset(labels: &[usize], n_per: usize, classes: usize, seed: u64) -> LabeledDataset {
    let centers = cluster_centers(classes);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut make = |label: usize| Example {
        input: Value::Vector(Array1::from_shape_fn(8, |j| {
            centers[label][j] + rng.random_range(-0.4..0.4)
        })),
        label,
    };
    let mut train = Vec::new();
    let mut verify = Vec::new();
    for &label in labels {
        for _ in 0..n_per {
            train.push(make(label));
        }
        for _ in 0..(n_per / 4).max(1) {
            verify.push(make(label));
        }
    }
    LabeledDataset::new(classes, train, verify).unwrap()
}

fn cluster_arch() -> ArchSpec {
    ArchSpec {
        input: InputShape::Vector(8),
        layers: vec![
            LayerSpec::Dense { units: 16 },
            LayerSpec::Activation { activation: Activation::Sigmoid },
            LayerSpec::Dense { units: 10 },
            LayerSpec::Softmax,
        ],
    }
}

fn train_contributor(labels: &[usize], seed: u64) -> LayeredModel {
    let data = cluster_dataset(labels, 40, 10, seed);
    let model = LayeredModel::init(&cluster_arch(), seed ^ 0xAB).unwrap();
    let cfg = TrainConfig {
        optimizer: Optimizer::adam(),
        batch_size: 20,
        learning_rate: 0.03,
        max_epochs: 60,
        stop_accuracy: 0.97,
        seed,
    };
    nn::train(&model, &data, &cfg).unwrap().model
}

fn head_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        optimizer: Optimizer::adam(),
        batch_size: 25,
        learning_rate: 0.02,
        max_epochs: 40,
        stop_accuracy: 1.1,
        seed,
    }
}

#[test]
fn stacked_identities_structure() {
    let b = stacked_identities(2, 2);
    assert_eq!(b.dim(), (4, 2));
    assert_eq!(
        b.iter().copied().collect::<Vec<_>>(),
        vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]
    );
}

#[test]
fn strategy2_initial_a_is_block_diagonal() {
    let models = vec![train_contributor(&[0, 1, 2, 3, 4], 1), train_contributor(&[5, 6, 7, 8, 9], 2)];
    let data = cluster_dataset(&(0..10).collect::<Vec<_>>(), 20, 10, 77);
    // zero epochs both stages: inspect the untouched initialization
    let meta = fuse_strategy2(&models, &data, &head_cfg(3), (0, 0)).unwrap();
    let d = 10;
    for ((r, c), &v) in meta.head.a.indexed_iter() {
        let in_block = meta
            .head
            .feature_spans
            .iter()
            .enumerate()
            .any(|(i, &(fs, fe))| r >= fs && r < fe && c >= i * d && c < (i + 1) * d);
        if !in_block {
            assert_eq!(v, 0.0, "off-block entry ({r},{c}) not zero");
        }
    }
    assert_eq!(meta.head.b, stacked_identities(2, 10));
}

#[test]
fn stage_one_training_leaves_masked_entries_bit_exact_zero() {
    let models = vec![train_contributor(&[0, 1, 2, 3, 4], 4), train_contributor(&[5, 6, 7, 8, 9], 5)];
    let data = cluster_dataset(&(0..10).collect::<Vec<_>>(), 15, 10, 78);
    let meta = fuse_strategy2(&models, &data, &head_cfg(6), (8, 0)).unwrap();
    let d = 10;
    for ((r, c), &v) in meta.head.a.indexed_iter() {
        let in_block = meta
            .head
            .feature_spans
            .iter()
            .enumerate()
            .any(|(i, &(fs, fe))| r >= fs && r < fe && c >= i * d && c < (i + 1) * d);
        if !in_block {
            assert!(v == 0.0, "off-block A entry ({r},{c}) = {v}");
        }
    }
    for ((r, c), &v) in meta.head.b.indexed_iter() {
        if r % d != c {
            assert!(v == 0.0, "off-identity B entry ({r},{c}) = {v}");
        } else {
            assert!(v != 0.0);
        }
    }
}

#[test]
fn head_shapes_follow_model_count_and_classes() {
    let models = vec![
        train_contributor(&[0, 1, 2], 7),
        train_contributor(&[3, 4, 5], 8),
        train_contributor(&[6, 7, 8, 9], 9),
    ];
    let data = cluster_dataset(&(0..10).collect::<Vec<_>>(), 10, 10, 79);
    let meta = fuse_strategy1(&models, &data, &head_cfg(10)).unwrap();
    assert_eq!(meta.head.hidden_len(), 3 * 10);
    assert_eq!(meta.head.classes(), 10);
    let scores = meta.forward(&data.train[0].input).unwrap();
    assert!((scores.sum() - 1.0).abs() < 1e-9);
    assert!(scores.iter().all(|&p| p > 0.0 && p < 1.0));
}

/// One plain SGD step recovers the gradient, which must match central finite
/// differences of the cross-entropy loss.
#[test]
fn head_gradient_matches_finite_differences() {
    let models = vec![train_contributor(&[0, 1, 2, 3, 4], 11)];
    let data = cluster_dataset(&[0, 2, 4, 6], 3, 10, 80);
    let lr = 1e-3;
    let sgd_cfg = TrainConfig {
        optimizer: Optimizer::Sgd,
        batch_size: data.train.len(),
        learning_rate: lr,
        max_epochs: 1,
        stop_accuracy: 1.1,
        seed: 42,
    };
    let before = fuse_strategy2(&models, &data, &sgd_cfg, (0, 0)).unwrap();
    let mut after_cfg = sgd_cfg;
    after_cfg.max_epochs = 1;
    // same seed: identical init, then exactly one full-batch step
    let after = fuse_strategy2(&models, &data, &after_cfg, (0, 1)).unwrap();

    let table: Vec<(Array1<f64>, usize)> = data
        .train
        .iter()
        .map(|ex| (concat_features(&models, &ex.input).unwrap(), ex.label))
        .collect();
    let loss = |head: &FusionWeights| -> f64 {
        table
            .iter()
            .map(|(f, label)| {
                let p = head.forward(f).unwrap();
                -(p[*label].max(1e-300)).ln()
            })
            .sum::<f64>()
            / table.len() as f64
    };
    let eps = 1e-5;
    let mut checked = 0;
    for (r, c) in [(0usize, 0usize), (3, 2), (7, 9), (9, 5)] {
        let analytic = (before.head.a[[r, c]] - after.head.a[[r, c]]) / lr;
        let mut hp = before.head.clone();
        hp.a[[r, c]] += eps;
        let mut hm = before.head.clone();
        hm.a[[r, c]] -= eps;
        let numeric = (loss(&hp) - loss(&hm)) / (2.0 * eps);
        let denom = analytic.abs().max(numeric.abs()).max(1e-2);
        assert!(
            (analytic - numeric).abs() / denom <= 1e-4,
            "A[{r},{c}]: {analytic} vs {numeric}"
        );
        checked += 1;
    }
    for (r, c) in [(0usize, 0usize), (5, 3), (9, 9)] {
        let analytic = (before.head.b[[r, c]] - after.head.b[[r, c]]) / lr;
        let mut hp = before.head.clone();
        hp.b[[r, c]] += eps;
        let mut hm = before.head.clone();
        hm.b[[r, c]] -= eps;
        let numeric = (loss(&hp) - loss(&hm)) / (2.0 * eps);
        let denom = analytic.abs().max(numeric.abs()).max(1e-2);
        assert!(
            (analytic - numeric).abs() / denom <= 1e-4,
            "B[{r},{c}]: {analytic} vs {numeric}"
        );
        checked += 1;
    }
    assert_eq!(checked, 7);
}

#[test]
fn concat_features_single_model_is_its_feature_vector() {
    let model = train_contributor(&[0, 1], 12);
    let input = Value::Vector(arr1(&[0.1, -0.2, 0.3, 0.0, 0.5, -0.5, 1.0, -1.0]));
    let f = concat_features(std::slice::from_ref(&model), &input).unwrap();
    assert_eq!(f, model.feature_vector(&input).unwrap());
}

#[test]
fn concat_of_three_conv_models_has_expected_length() {
    // three models whose feature layers flatten to 7*7*16 = 784 each
    let arch = ArchSpec {
        input: InputShape::Image { channels: 1, height: 28, width: 28 },
        layers: vec![
            LayerSpec::Conv { filters: 32, kernel: [5, 5], padding: Padding::Same },
            LayerSpec::Pool { pool: PoolKind::Avg, size: 2 },
            LayerSpec::Conv { filters: 16, kernel: [5, 5], padding: Padding::Same },
            LayerSpec::Pool { pool: PoolKind::Avg, size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 10 },
            LayerSpec::Softmax,
        ],
    };
    let models: Vec<LayeredModel> =
        (0..3).map(|s| LayeredModel::init(&arch, s).unwrap()).collect();
    let input = Value::zeros(&models[0].input_shape);
    let f = concat_features(&models, &input).unwrap();
    assert_eq!(f.len(), 3 * 784);
}

#[test]
fn zero_models_on_zero_input_give_zero_features() {
    // linear feature layer: dense -> dense, no interior activation
    let arch = ArchSpec {
        input: InputShape::Vector(8),
        layers: vec![
            LayerSpec::Dense { units: 6 },
            LayerSpec::Dense { units: 10 },
            LayerSpec::Softmax,
        ],
    };
    let mut model = LayeredModel::init(&arch, 1).unwrap();
    for layer in model.layers.iter_mut() {
        if let Layer::Dense { weights, bias } = layer {
            weights.fill(0.0);
            bias.fill(0.0);
        }
    }
    let f = concat_features(&[model.clone(), model], &Value::Vector(Array1::zeros(8))).unwrap();
    assert!(f.iter().all(|&v| v == 0.0));
}

#[test]
fn fusing_partial_view_model_lands_near_its_coverage_ceiling() {
    // a bottleneck feature layer trained on labels 0..4 collapses the unseen
    // classes, capping full 10-class accuracy near the model's coverage
    let arch = ArchSpec {
        input: InputShape::Vector(8),
        layers: vec![
            LayerSpec::Dense { units: 3 },
            LayerSpec::Activation { activation: Activation::Sigmoid },
            LayerSpec::Dense { units: 10 },
            LayerSpec::Softmax,
        ],
    };
    let data = cluster_dataset(&[0, 1, 2, 3, 4], 40, 10, 13);
    let init = LayeredModel::init(&arch, 13 ^ 0xAB).unwrap();
    let cfg = TrainConfig {
        optimizer: Optimizer::adam(),
        batch_size: 20,
        learning_rate: 0.03,
        max_epochs: 80,
        stop_accuracy: 0.95,
        seed: 13,
    };
    let model = nn::train(&init, &data, &cfg).unwrap().model;
    let head_data = cluster_dataset(&(0..10).collect::<Vec<_>>(), 30, 10, 81);
    let meta = fuse_strategy1(&[model], &head_data, &head_cfg(14)).unwrap();
    let test = cluster_dataset(&(0..10).collect::<Vec<_>>(), 20, 10, 82);
    let acc = meta.evaluate(&test.train).unwrap();
    assert!((0.3..=0.85).contains(&acc), "coverage-ceiling accuracy {acc}");
}

#[test]
fn fusing_duplicates_changes_accuracy_by_at_most_one_point() {
    let model = train_contributor(&[0, 1, 2, 3, 4, 5, 6], 15);
    let head_data = cluster_dataset(&(0..10).collect::<Vec<_>>(), 30, 10, 83);
    let test = cluster_dataset(&(0..10).collect::<Vec<_>>(), 25, 10, 84);
    let once = fuse_strategy1(std::slice::from_ref(&model), &head_data, &head_cfg(16)).unwrap();
    let twice = fuse_strategy1(&[model.clone(), model], &head_data, &head_cfg(16)).unwrap();
    let a = once.evaluate(&test.train).unwrap();
    let b = twice.evaluate(&test.train).unwrap();
    assert!((a - b).abs() <= 0.01 + 1e-9, "{a} vs {b}");
}

#[test]
fn zero_training_epochs_leave_a_chance_level_head() {
    let models = vec![train_contributor(&(0..10).collect::<Vec<_>>(), 17)];
    let head_data = cluster_dataset(&(0..10).collect::<Vec<_>>(), 20, 10, 85);
    let mut cfg = head_cfg(18);
    cfg.max_epochs = 0;
    let meta = fuse_strategy1(&models, &head_data, &cfg).unwrap();
    let test = cluster_dataset(&(0..10).collect::<Vec<_>>(), 30, 10, 86);
    let acc = meta.evaluate(&test.train).unwrap();
    assert!(acc <= 0.3, "untrained head should be near chance, got {acc}");
}

#[test]
fn averaging_identical_models_returns_the_same_model() {
    let model = train_contributor(&[0, 1, 2], 19);
    let avg2 = average_models(&[model.clone(), model.clone()]).unwrap();
    assert_eq!(avg2, model); // x/2 + x/2 is exact in binary
    let avg3 = average_models(&[model.clone(), model.clone(), model.clone()]).unwrap();
    for (a, b) in avg3.layers.iter().zip(&model.layers) {
        if let (Layer::Dense { weights: aw, .. }, Layer::Dense { weights: bw, .. }) = (a, b) {
            for (x, y) in aw.iter().zip(bw.iter()) {
                assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }
}

#[test]
fn fedavg_single_contributor_is_plain_local_training() {
    let data = cluster_dataset(&(0..10).collect::<Vec<_>>(), 15, 10, 87);
    let init = LayeredModel::init(&cluster_arch(), 20).unwrap();
    let cfg = TrainConfig {
        optimizer: Optimizer::adam(),
        batch_size: 30,
        learning_rate: 0.02,
        max_epochs: 0, // unused; local_epochs drives the rounds
        stop_accuracy: 1.1,
        seed: 21,
    };
    let fed = fedavg_baseline(std::slice::from_ref(&data), &init, 1, 6, &cfg).unwrap();
    let plain_cfg = TrainConfig {
        max_epochs: 6,
        stop_accuracy: f64::INFINITY,
        seed: fedavg_local_seed(21, 0, 0),
        ..cfg
    };
    let plain = nn::train(&init, &data, &plain_cfg).unwrap().model;
    assert_eq!(fed.model.unwrap(), plain);
}

#[test]
fn fedavg_accounts_transferred_weight_bytes() {
    let data: Vec<LabeledDataset> =
        (0..3).map(|i| cluster_dataset(&[i, i + 3], 10, 10, 88 + i as u64)).collect();
    let init = LayeredModel::init(&cluster_arch(), 22).unwrap();
    let cfg = TrainConfig {
        optimizer: Optimizer::Sgd,
        batch_size: 10,
        learning_rate: 0.01,
        max_epochs: 0,
        stop_accuracy: 1.1,
        seed: 23,
    };
    let fed = fedavg_baseline(&data, &init, 2, 1, &cfg).unwrap();
    let expected = 2 * 3 * 2 * (init.parameter_count() as u64) * 8;
    assert_eq!(fed.transferred_bytes, expected);
    assert_eq!(fed.round_local_accuracies.len(), 2);
}
