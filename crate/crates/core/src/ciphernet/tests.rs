use super::*;
use crate::ivhe::{gen_keys, HeParams};
use crate::nn::{
    Activation, ArchSpec, InputShape, Layer, LayerSpec, LayeredModel, Padding, PoolKind, Value,
};
use ndarray::{arr1, arr2, Array1, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

#[test]
fn sigmoid_approximation_error_bounds() {
    let taylor = SigmoidApprox::taylor();
    let printed = SigmoidApprox::printed();
    assert!(taylor.max_error_unit_interval() <= 0.05);
    assert!(printed.max_error_unit_interval() <= 0.05);
    // 1/2 + 1/4 - 1/48
    assert!((taylor.eval(1.0) - 0.7291666666666666).abs() < 1e-12);
    assert!((taylor.eval(1.0) - 0.72917).abs() < 1e-5);
}

fn tiny_linear_arch() -> ArchSpec {
    ArchSpec {
        input: InputShape::Image { channels: 1, height: 12, width: 12 },
        layers: vec![
            LayerSpec::Conv { filters: 4, kernel: [5, 5], padding: Padding::Same },
            LayerSpec::Pool { pool: PoolKind::Avg, size: 2 },
            LayerSpec::Conv { filters: 4, kernel: [5, 5], padding: Padding::Same },
            LayerSpec::Pool { pool: PoolKind::Avg, size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 10 },
            LayerSpec::Softmax,
        ],
    }
}

fn random_image(seed: u64, c: usize, h: usize, w: usize) -> Value {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    Value::Image(Array3::from_shape_fn((c, h, w), |_| rng.random_range(0.0..1.0)))
}

#[test]
fn quantize_rounding_examples() {
    // round(0.123 * 2^7) = round(15.744) = 16
    let model = LayeredModel {
        input_shape: InputShape::Vector(1),
        layers: vec![Layer::Dense { weights: arr2(&[[0.123]]), bias: arr1(&[0.0]) }],
    };
    let sm = quantize(&model, 1 << 7, 1000).unwrap();
    match &sm.layers[0] {
        ScaledLayer::Dense { weights, .. } => assert_eq!(weights[[0, 0]], 16),
        _ => unreachable!(),
    }
    // q = 1000 turns input 0.4567 into 457
    let iv = IntValue::from_real(&Value::Vector(arr1(&[0.4567])), 1000);
    assert_eq!(iv.flatten()[0], 457);
    // p = 1 keeps integer weights unchanged
    let int_model = LayeredModel {
        input_shape: InputShape::Vector(2),
        layers: vec![Layer::Dense { weights: arr2(&[[3.0, -7.0]]), bias: arr1(&[0.0]) }],
    };
    let sm1 = quantize(&int_model, 1, 1).unwrap();
    match &sm1.layers[0] {
        ScaledLayer::Dense { weights, .. } => {
            assert_eq!(weights[[0, 0]], 3);
            assert_eq!(weights[[0, 1]], -7);
        }
        _ => unreachable!(),
    }
}

#[test]
fn quantize_rejects_max_pool() {
    let arch = ArchSpec {
        input: InputShape::Image { channels: 1, height: 4, width: 4 },
        layers: vec![
            LayerSpec::Conv { filters: 2, kernel: [3, 3], padding: Padding::Same },
            LayerSpec::Pool { pool: PoolKind::Max, size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 2 },
            LayerSpec::Softmax,
        ],
    };
    let model = LayeredModel::init(&arch, 0).unwrap();
    assert!(matches!(quantize(&model, 128, 1000), Err(CiphernetError::MaxPoolUnsupported)));
}

#[test]
fn dequantize_recovers_weights_within_half_step() {
    let model = LayeredModel::init(&tiny_linear_arch(), 5).unwrap();
    let p = 1 << 7;
    let sm = quantize(&model, p, 1000).unwrap();
    let back = dequantize(&sm).unwrap();
    let tol = 1.0 / (2.0 * p as f64) + 1e-12;
    for (orig, rec) in model.layers.iter().zip(&back.layers) {
        if let (Layer::Conv2d { kernels: a, .. }, Layer::Conv2d { kernels: b, .. }) = (orig, rec) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= tol, "{x} vs {y}");
            }
        }
        if let (Layer::Dense { weights: a, .. }, Layer::Dense { weights: b, .. }) = (orig, rec) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= tol);
            }
        }
    }
}

#[test]
fn scale_ledger_tracks_factors_along_path() {
    let model = LayeredModel::init(&tiny_linear_arch(), 6).unwrap();
    let sm = quantize(&model, 128, 1000).unwrap();
    // q, conv p, avg area 4, conv p, avg area 4, dense p
    assert_eq!(sm.output_scale, vec![1000, 128, 4, 128, 4, 128]);
    assert_eq!(sm.total_scale(), 1000.0 * 128.0 * 4.0 * 128.0 * 4.0 * 128.0);
}

fn scalar_nonneg_params(t_bound: i64, e_bound: i64) -> HeParams {
    HeParams { n: 1, w: 1 << 10, l: 24, a_bound: 4, e_bound, t_bound, non_negative: true }
}

#[test]
fn elementwise_dense_gets_lane_axis() {
    let model = LayeredModel {
        input_shape: InputShape::Vector(3),
        layers: vec![
            Layer::Dense {
                weights: arr2(&[[0.1, -0.2, 0.3], [0.4, 0.5, -0.6]]),
                bias: arr1(&[0.0, 0.0]),
            },
            Layer::SoftmaxOutput,
        ],
    };
    let sm = quantize(&model, 128, 1000).unwrap();
    let (_, swk) = gen_keys(scalar_nonneg_params(4, 0), 3).unwrap();
    let em = encrypt_elementwise(&sm, &swk).unwrap();
    assert_eq!(em.first.encrypted_shape(), vec![2, 3, 2]);
}

#[test]
fn elementwise_rejects_vector_keys() {
    let model = LayeredModel::init(&tiny_linear_arch(), 1).unwrap();
    let sm = quantize(&model, 128, 1000).unwrap();
    let params = HeParams { n: 4, ..HeParams::default_signed(4) };
    let (_, swk) = gen_keys(params, 0).unwrap();
    assert!(matches!(encrypt_elementwise(&sm, &swk), Err(CiphernetError::Mode(_))));
}

#[test]
fn elementwise_weight_roundtrip_is_exact() {
    let model = LayeredModel::init(&tiny_linear_arch(), 7).unwrap();
    let sm = quantize(&model, 128, 1000).unwrap();
    // unit noise still decrypts weights exactly: e*n*l = 24 < w/2
    let (sk, swk) = gen_keys(scalar_nonneg_params(4, 1), 4).unwrap();
    let em = encrypt_elementwise(&sm, &swk).unwrap();
    let back = decrypt_model(&em, &sk).unwrap();
    assert_eq!(sm, back);
}

#[test]
fn matrixpair_shapes_match_filter_counts() {
    // 32 5x5 kernels then 16 5x5 kernels: 5x5x1x33 and 16x33x5x5
    let arch = ArchSpec {
        input: InputShape::Image { channels: 1, height: 12, width: 12 },
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
    let model = LayeredModel::init(&arch, 8).unwrap();
    let sm = quantize(&model, 32, 1000).unwrap();
    let params = HeParams { n: 32, w: 1 << 10, l: 24, a_bound: 4, e_bound: 0, t_bound: 0, non_negative: false };
    let (_, swk) = gen_keys(params, 9).unwrap();
    let em = encrypt_matrixpair(&sm, &swk).unwrap();
    assert_eq!(em.first.encrypted_shape(), vec![5, 5, 1, 33]);
    assert_eq!(em.second_conv_expanded_shape(), Some((16, 33, 5, 5)));
}

#[test]
fn matrixpair_requires_leading_conv_pair() {
    let model = LayeredModel {
        input_shape: InputShape::Vector(4),
        layers: vec![
            Layer::Dense { weights: arr2(&[[0.1, 0.2, 0.3, 0.4]]), bias: arr1(&[0.0]) },
            Layer::SoftmaxOutput,
        ],
    };
    let sm = quantize(&model, 128, 1000).unwrap();
    let (_, swk) = gen_keys(HeParams::default_signed(1), 0).unwrap();
    assert!(matches!(encrypt_matrixpair(&sm, &swk), Err(CiphernetError::Strategy(_))));
}

#[test]
fn cipher_forward_zero_input_gives_zero_lanes() {
    let model = LayeredModel::init(&tiny_linear_arch(), 11).unwrap();
    let sm = quantize(&model, 128, 1000).unwrap();
    let (_, swk) = gen_keys(scalar_nonneg_params(4, 0), 12).unwrap();
    let em = encrypt_elementwise(&sm, &swk).unwrap();
    let zero = Value::zeros(&em.input_shape);
    let cf = forward_cipher(&em, &zero, true).unwrap();
    assert!(cf.lane1.iter().all(|&v| v == 0));
    assert!(cf.lane2.iter().all(|&v| v == 0));
}

/// On linear+pooling networks the decrypted cipherspace forward equals the
/// quantized plaintext forward element-exactly (no interior nonlinearity).
#[test]
fn elementwise_linear_forward_is_exact() {
    let model = LayeredModel::init(&tiny_linear_arch(), 13).unwrap();
    let sm = quantize(&model, 128, 1000).unwrap();
    for seed in [0u64, 1, 2] {
        let (sk, swk) = gen_keys(scalar_nonneg_params(4, 0), 100 + seed).unwrap();
        let em = encrypt_elementwise(&sm, &swk).unwrap();
        for input_seed in 0..20 {
            let input = random_image(input_seed, 1, 12, 12);
            let plain = sm.forward_int(&input).unwrap();
            let cf = forward_cipher(&em, &input, true).unwrap();
            assert!(cf.budget_ok);
            let cipher = decrypt_scores_int(&cf, &sk, em.strategy).unwrap();
            assert_eq!(plain, cipher);
        }
    }
}

#[test]
fn matrixpair_linear_forward_is_exact_with_zero_secret() {
    let model = LayeredModel::init(&tiny_linear_arch(), 14).unwrap();
    let sm = quantize(&model, 32, 1000).unwrap();
    let params = HeParams { n: 4, w: 1 << 10, l: 30, a_bound: 4, e_bound: 0, t_bound: 0, non_negative: false };
    let (sk, swk) = gen_keys(params, 15).unwrap();
    let em = encrypt_matrixpair(&sm, &swk).unwrap();
    for input_seed in 0..10 {
        let input = random_image(input_seed, 1, 12, 12);
        let plain = sm.forward_int(&input).unwrap();
        let cf = forward_cipher(&em, &input, true).unwrap();
        let cipher = decrypt_scores_int(&cf, &sk, em.strategy).unwrap();
        assert_eq!(plain, cipher);
    }
}

fn relu_arch() -> ArchSpec {
    ArchSpec {
        input: InputShape::Image { channels: 1, height: 1, width: 32 },
        layers: vec![
            LayerSpec::Conv { filters: 4, kernel: [1, 5], padding: Padding::Same },
            LayerSpec::Activation { activation: Activation::Relu },
            LayerSpec::Pool { pool: PoolKind::Sum, size: 1 },
            LayerSpec::Conv { filters: 3, kernel: [1, 3], padding: Padding::Same },
            LayerSpec::Activation { activation: Activation::Relu },
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 2 },
            LayerSpec::Softmax,
        ],
    }
}

#[test]
fn relu_rejects_signed_keys() {
    let model = LayeredModel::init(&relu_arch(), 16).unwrap();
    let sm = quantize(&model, 128, 1000).unwrap();
    let params = HeParams { n: 1, w: 1 << 10, l: 24, a_bound: 4, e_bound: 0, t_bound: 4, non_negative: false };
    let (_, swk) = gen_keys(params, 17).unwrap();
    let em = encrypt_elementwise(&sm, &swk).unwrap();
    let input = random_image(0, 1, 1, 32);
    assert!(matches!(forward_cipher(&em, &input, false), Err(CiphernetError::Mode(_))));
}

/// With a zero secret and no randomization the decryption-relevant lane is the
/// exact w-scaled pre-activation, so lane zeroing reproduces plaintext ReLU.
#[test]
fn relu_forward_exact_with_zero_secret() {
    let model = LayeredModel::init(&relu_arch(), 18).unwrap();
    let sm = quantize(&model, 128, 1000).unwrap();
    let (sk, swk) = gen_keys(scalar_nonneg_params(0, 0), 19).unwrap();
    let em = encrypt_elementwise(&sm, &swk).unwrap();
    for input_seed in 0..30 {
        let input = random_image(1000 + input_seed, 1, 1, 32);
        let plain = sm.forward_int(&input).unwrap();
        let cf = forward_cipher(&em, &input, true).unwrap();
        let cipher = decrypt_scores_int(&cf, &sk, em.strategy).unwrap();
        assert_eq!(plain, cipher);
    }
}

/// Nonzero secrets mix the randomizer lane into ReLU decisions; disagreement
/// is confined to pre-activations near zero, so argmax agreement stays high.
#[test]
fn relu_forward_with_mixing_secret_keeps_high_argmax_agreement() {
    let model = LayeredModel::init(&relu_arch(), 20).unwrap();
    let sm = quantize(&model, 128, 1000).unwrap();
    let (sk, swk) = gen_keys(scalar_nonneg_params(4, 0), 21).unwrap();
    let em = encrypt_elementwise(&sm, &swk).unwrap();
    let mut agree = 0;
    let total = 200;
    for input_seed in 0..total {
        let input = random_image(5000 + input_seed, 1, 1, 32);
        let plain = sm.forward_int(&input).unwrap();
        let cf = forward_cipher(&em, &input, false).unwrap();
        let cipher = decrypt_scores_int(&cf, &sk, em.strategy).unwrap();
        let pa = (0..plain.len()).max_by_key(|&i| plain[i]).unwrap();
        let ca = (0..cipher.len()).max_by_key(|&i| cipher[i]).unwrap();
        agree += (pa == ca) as usize;
    }
    assert!(agree as f64 / total as f64 >= 0.95, "agreement {agree}/{total}");
}

#[test]
fn strict_noise_flag_controls_budget_failures() {
    let model = LayeredModel::init(&tiny_linear_arch(), 22).unwrap();
    let sm = quantize(&model, 128, 1000).unwrap();
    // unit noise: fine for weight decryption, hopeless for deep weighted sums
    let (_, swk) = gen_keys(scalar_nonneg_params(4, 1), 23).unwrap();
    let em = encrypt_elementwise(&sm, &swk).unwrap();
    let input = random_image(3, 1, 12, 12);
    assert!(matches!(
        forward_cipher(&em, &input, true),
        Err(CiphernetError::Budget { .. })
    ));
    let cf = forward_cipher(&em, &input, false).unwrap();
    assert!(!cf.budget_ok);
    assert!(cf.noise_bound > 0);
}

#[test]
fn quantization_argmax_agreement_is_monotone_in_p() {
    let model = LayeredModel::init(&tiny_linear_arch(), 24).unwrap();
    let inputs: Vec<Value> = (0..200).map(|s| random_image(7000 + s, 1, 12, 12)).collect();
    let reference: Vec<usize> = inputs
        .iter()
        .map(|x| crate::nn::argmax(&model.forward(x).unwrap()))
        .collect();
    let mut agreements = Vec::new();
    for p in [8i64, 32, 128] {
        let sm = quantize(&model, p, 1000).unwrap();
        let agree = inputs
            .iter()
            .zip(&reference)
            .filter(|(x, &r)| {
                let ints = sm.forward_int(x).unwrap();
                (0..ints.len()).max_by_key(|&i| ints[i]).unwrap() == r
            })
            .count();
        agreements.push(agree);
    }
    assert!(
        agreements[0] <= agreements[1] && agreements[1] <= agreements[2],
        "agreement not monotone: {agreements:?}"
    );
    assert!(agreements[2] >= 194, "p=128 agreement unexpectedly low: {agreements:?}");
}

#[test]
fn worked_example_lane_recombination() {
    // lanes [10] and [1] under T=[2], w=4 decrypt to 3, then scale down
    let params = HeParams { n: 1, w: 4, l: 4, a_bound: 1, e_bound: 0, t_bound: 2, non_negative: false };
    let a = crate::ivhe::IntMat::from_rows(vec![vec![1, 0, 1, 0]]);
    let e = crate::ivhe::IntMat::zeros(1, 4);
    let (sk, _) = crate::ivhe::keys_from_parts(params, vec![2], a, e).unwrap();
    let cf = CipherForward {
        lane1: arr1(&[10]),
        lane2: arr1(&[1]),
        feature_lanes: vec![10, 1],
        output_scale: vec![6],
        noise_bound: 0,
        budget_ok: true,
    };
    let ints = decrypt_scores_int(&cf, &sk, Strategy::ElementWise).unwrap();
    assert_eq!(ints, arr1(&[3]));
    let reals = decrypt_scores(&cf, &sk, Strategy::ElementWise, false).unwrap();
    assert!((reals[0] - 0.5).abs() < 1e-12);
}

#[test]
fn zero_scale_is_rejected() {
    let params = scalar_nonneg_params(0, 0);
    let (sk, _) = gen_keys(params, 0).unwrap();
    let cf = CipherForward {
        lane1: arr1(&[4]),
        lane2: arr1(&[0]),
        feature_lanes: vec![],
        output_scale: vec![0],
        noise_bound: 0,
        budget_ok: true,
    };
    assert!(matches!(
        decrypt_scores(&cf, &sk, Strategy::ElementWise, false),
        Err(CiphernetError::Param(_))
    ));
}

#[test]
fn zero_secret_ignores_second_lane_in_scores() {
    let params = scalar_nonneg_params(0, 0);
    let (sk, _) = gen_keys(params, 30).unwrap();
    let mut cf = CipherForward {
        lane1: arr1(&[1 << 10, -(1 << 11)]),
        lane2: arr1(&[123, 456]),
        feature_lanes: vec![],
        output_scale: vec![1],
        noise_bound: 0,
        budget_ok: true,
    };
    let a = decrypt_scores_int(&cf, &sk, Strategy::ElementWise).unwrap();
    cf.lane2 = arr1(&[0, 0]);
    let b = decrypt_scores_int(&cf, &sk, Strategy::ElementWise).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, arr1(&[1, -2]));
}

#[test]
fn encrypted_model_json_roundtrip() {
    let model = LayeredModel::init(&relu_arch(), 31).unwrap();
    let sm = quantize(&model, 128, 1000).unwrap();
    let (_, swk) = gen_keys(scalar_nonneg_params(2, 0), 32).unwrap();
    let em = encrypt_elementwise(&sm, &swk).unwrap();
    let js = em.to_json();
    let back = EncryptedModel::from_json(&js).unwrap();
    assert_eq!(em, back);
    assert!(EncryptedModel::from_json("{}").is_err());
}

#[test]
fn encrypt_deeper_layer_keeps_prefix_plain() {
    let model = LayeredModel::init(&tiny_linear_arch(), 33).unwrap();
    let sm = quantize(&model, 128, 1000).unwrap();
    let (sk, swk) = gen_keys(scalar_nonneg_params(4, 0), 34).unwrap();
    let em = encrypt_elementwise_at(&sm, &swk, 1).unwrap();
    assert_eq!(em.encrypted_index, 1);
    assert!(!em.prefix.is_empty());
    // still exact end to end
    let input = random_image(8, 1, 12, 12);
    let plain = sm.forward_int(&input).unwrap();
    let cf = forward_cipher(&em, &input, true).unwrap();
    assert_eq!(decrypt_scores_int(&cf, &sk, em.strategy).unwrap(), plain);
}

#[test]
fn forward_scores_match_dequantized_model_closely() {
    let model = LayeredModel::init(&tiny_linear_arch(), 35).unwrap();
    let sm = quantize(&model, 1 << 10, 100_000).unwrap();
    let input = random_image(9, 1, 12, 12);
    let fine = sm.forward_scores(&input).unwrap();
    let direct = model.forward(&input).unwrap();
    for (a, b) in fine.iter().zip(direct.iter()) {
        assert!((a - b).abs() < 1e-2, "{a} vs {b}");
    }
}
