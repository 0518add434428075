use super::*;
use proptest::prelude::*;

/// The hand-expanded 1-digit example: n=1, l=4, w=4, T=[2], A=[1,0,1,0], E=0.
/// S* = [8,4,2,1], T·A = [2,0,2,0], so M = [[6,4,0,1],[1,0,1,0]].
fn worked_example_keys() -> (SecretKey, SwitchKey) {
    let params = HeParams { n: 1, w: 4, l: 4, a_bound: 1, e_bound: 0, t_bound: 2, non_negative: false };
    let a = IntMat::from_rows(vec![vec![1, 0, 1, 0]]);
    let e = IntMat::zeros(1, 4);
    keys_from_parts(params, vec![2], a, e).unwrap()
}

#[test]
fn worked_example_switch_matrix() {
    let (_, swk) = worked_example_keys();
    assert_eq!(swk.matrix(), &IntMat::from_rows(vec![vec![6, 4, 0, 1], vec![1, 0, 1, 0]]));
}

#[test]
fn worked_example_encrypt_decrypt() {
    let (sk, swk) = worked_example_keys();
    let ct = encrypt(&[3], &swk, swk.params()).unwrap();
    assert_eq!(ct.digits, vec![10, 1]);
    // S'·c' = 10 + 2·1 = 12, round(12/4) = 3.
    assert_eq!(decrypt(&ct, &sk).unwrap(), vec![3]);
}

#[test]
fn switch_key_self_consistency() {
    let (sk, swk) = worked_example_keys();
    assert!(swk.is_consistent_with(&sk));
    let (other_sk, _) = keys_from_parts(
        *swk.params(),
        vec![1],
        IntMat::from_rows(vec![vec![1, 0, 1, 0]]),
        IntMat::zeros(1, 4),
    )
    .unwrap();
    assert!(!swk.is_consistent_with(&other_sk));
}

#[test]
fn zero_secret_ignores_second_lane() {
    let params = HeParams { n: 1, w: 16, l: 10, a_bound: 3, e_bound: 0, t_bound: 0, non_negative: false };
    let (sk, swk) = gen_keys(params, 7).unwrap();
    assert_eq!(sk.secret_column(), &[0]);
    let mut ct = encrypt(&[5], &swk, &params).unwrap();
    ct.digits[1] = 9999; // decryption must not care
    assert_eq!(decrypt(&ct, &sk).unwrap(), vec![5]);
}

#[test]
fn keygen_is_deterministic() {
    let params = HeParams::default_signed(4);
    let (sk1, swk1) = gen_keys(params, 42).unwrap();
    let (sk2, swk2) = gen_keys(params, 42).unwrap();
    assert_eq!(sk1.secret_column(), sk2.secret_column());
    assert_eq!(swk1.matrix(), swk2.matrix());
    assert_eq!(sk1.to_bytes(), sk2.to_bytes());
    assert_eq!(swk1.to_bytes(), swk2.to_bytes());
    let (sk3, _) = gen_keys(params, 43).unwrap();
    assert_ne!(sk1.secret_column(), sk3.secret_column());
}

#[test]
fn rejects_bad_params() {
    assert!(gen_keys(HeParams { w: 1, ..HeParams::default_signed(2) }, 0).is_err());
    assert!(gen_keys(HeParams { l: 0, ..HeParams::default_signed(2) }, 0).is_err());
    assert!(gen_keys(HeParams { a_bound: -1, ..HeParams::default_signed(2) }, 0).is_err());
}

#[test]
fn bit_decompose_examples() {
    assert_eq!(bit_decompose(&[5], 3).unwrap(), vec![1, 0, 1]);
    assert_eq!(bit_decompose(&[-5], 3).unwrap(), vec![-1, 0, -1]);
    assert_eq!(bit_decompose(&[12], 4).unwrap(), vec![1, 1, 0, 0]);
}

#[test]
fn bit_decompose_overflow_names_index() {
    let err = bit_decompose(&[1, 8, 2], 3).unwrap_err();
    match err {
        IvheError::DigitOverflow { index, value, bits } => {
            assert_eq!((index, value, bits), (1, 8, 3));
        }
        other => panic!("unexpected error {other:?}"),
    }
}

#[test]
fn star_expand_examples() {
    assert_eq!(star_expand(&IntMat::from_rows(vec![vec![2]]), 3), IntMat::from_rows(vec![vec![8, 4, 2]]));
    assert_eq!(
        star_expand(&IntMat::identity(2), 2),
        IntMat::from_rows(vec![vec![2, 1, 0, 0], vec![0, 0, 2, 1]])
    );
    // S=[[2]], l=3, c=[5]: S*·c* = 8 + 0 + 2 = 10 = S·c.
    let star = star_expand(&IntMat::from_rows(vec![vec![2]]), 3);
    let cstar = bit_decompose(&[5], 3).unwrap();
    assert_eq!(star.matvec(&cstar).unwrap(), vec![10]);
}

#[test]
fn decrypt_rounds_half_away_from_zero() {
    let params = HeParams { n: 2, w: 10, l: 8, a_bound: 0, e_bound: 0, t_bound: 0, non_negative: false };
    let sk = SecretKey::identity(params);
    let ct = Ciphertext { digits: vec![32, -18], key: KeyId::IDENTITY, params, scale: vec![], noise_bound: 0 };
    assert_eq!(decrypt(&ct, &sk).unwrap(), vec![3, -2]);
    // exact halves go away from zero
    let ct = Ciphertext { digits: vec![25, -25], key: KeyId::IDENTITY, params, scale: vec![], noise_bound: 0 };
    assert_eq!(decrypt(&ct, &sk).unwrap(), vec![3, -3]);
}

#[test]
fn decrypt_rejects_shape_mismatch() {
    let (sk, swk) = worked_example_keys();
    let mut ct = encrypt(&[2], &swk, swk.params()).unwrap();
    ct.digits.push(0);
    assert!(matches!(decrypt(&ct, &sk), Err(IvheError::Shape(_))));
}

/// Round-trip parameters chosen so e_bound·n·l < w/2: 1·16·30 = 480 < 1024.
fn roundtrip_params() -> HeParams {
    HeParams { n: 16, w: 1 << 11, l: 30, a_bound: 16, e_bound: 1, t_bound: 16, non_negative: false }
}

#[test]
fn roundtrip_thousand_random_vectors() {
    let params = roundtrip_params();
    assert!(params.noise_budget_ok());
    let (sk, swk) = gen_keys(params, 1).unwrap();
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(99);
    for _ in 0..1000 {
        let x: Vec<i64> = (0..params.n).map(|_| rng.random_range(-1000..=1000)).collect();
        let ct = encrypt(&x, &swk, &params).unwrap();
        assert_eq!(decrypt(&ct, &sk).unwrap(), x);
    }
}

#[test]
fn roundtrip_zero_vector() {
    let params = roundtrip_params();
    let (sk, swk) = gen_keys(params, 2).unwrap();
    let x = vec![0i64; params.n];
    assert_eq!(decrypt(&encrypt(&x, &swk, &params).unwrap(), &sk).unwrap(), x);
}

#[test]
fn shape_law_one_switch_adds_one_lane() {
    let params = roundtrip_params();
    let (_, swk) = gen_keys(params, 3).unwrap();
    let identity = Ciphertext::identity_of(&vec![1; params.n], params).unwrap();
    assert_eq!(identity.digits.len(), params.n);
    let switched = key_switch(&identity, &swk).unwrap();
    assert_eq!(switched.digits.len(), params.n + 1);
}

#[test]
fn homomorphic_add_matches_plaintext_oracle() {
    let params = roundtrip_params();
    let (sk, swk) = gen_keys(params, 4).unwrap();
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
    for _ in 0..500 {
        let x: Vec<i64> = (0..params.n).map(|_| rng.random_range(-500..=500)).collect();
        let y: Vec<i64> = (0..params.n).map(|_| rng.random_range(-500..=500)).collect();
        let sum = he_add(&encrypt(&x, &swk, &params).unwrap(), &encrypt(&y, &swk, &params).unwrap()).unwrap();
        let expect: Vec<i64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        assert_eq!(decrypt(&sum, &sk).unwrap(), expect);
    }
}

#[test]
fn add_identity_element() {
    let params = roundtrip_params();
    let (sk, swk) = gen_keys(params, 6).unwrap();
    let x: Vec<i64> = (0..params.n as i64).collect();
    let ct = encrypt(&x, &swk, &params).unwrap();
    let zero = encrypt(&vec![0; params.n], &swk, &params).unwrap();
    assert_eq!(decrypt(&he_add(&ct, &zero).unwrap(), &sk).unwrap(), decrypt(&ct, &sk).unwrap());
}

/// Weighted-sum parameters: fresh noise bound 4·19 = 76, so three terms with
/// |weight| <= 10 stay inside w/2 = 2048.
fn weighted_params() -> HeParams {
    HeParams { n: 4, w: 1 << 12, l: 19, a_bound: 16, e_bound: 1, t_bound: 16, non_negative: false }
}

#[test]
fn weighted_sum_matches_plaintext_oracle() {
    let params = weighted_params();
    let (sk, swk) = gen_keys(params, 7).unwrap();
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(8);
    for _ in 0..1000 {
        let xs: Vec<Vec<i64>> = (0..3)
            .map(|_| (0..params.n).map(|_| rng.random_range(-100..=100)).collect())
            .collect();
        let weights: Vec<i64> = (0..3).map(|_| rng.random_range(-8..=8)).collect();
        let cts: Vec<Ciphertext> = xs.iter().map(|x| encrypt(x, &swk, &params).unwrap()).collect();
        let refs: Vec<&Ciphertext> = cts.iter().collect();
        let combined = he_weighted_sum(&weights, &refs, None).unwrap();
        let expect: Vec<i64> = (0..params.n)
            .map(|i| weights.iter().zip(&xs).map(|(w, x)| w * x[i]).sum())
            .collect();
        assert_eq!(decrypt(&combined, &sk).unwrap(), expect);
    }
}

#[test]
fn weighted_sum_worked_example() {
    // weights [2,3] on plaintexts 1 and 2 decrypts to 8
    let params = weighted_params();
    let (sk, swk) = gen_keys(params, 9).unwrap();
    let one = encrypt(&vec![1; params.n], &swk, &params).unwrap();
    let two = encrypt(&vec![2; params.n], &swk, &params).unwrap();
    let out = he_weighted_sum(&[2, 3], &[&one, &two], None).unwrap();
    assert_eq!(decrypt(&out, &sk).unwrap(), vec![8; params.n]);

    let zeros = he_weighted_sum(&[0, 0], &[&one, &two], None).unwrap();
    assert_eq!(decrypt(&zeros, &sk).unwrap(), vec![0; params.n]);

    let same = he_weighted_sum(&[1], &[&one], None).unwrap();
    assert_eq!(same.digits, one.digits);
}

#[test]
fn weighted_sum_budget_error() {
    let params = roundtrip_params(); // fresh noise bound 480, w/2 = 1024
    let (_, swk) = gen_keys(params, 10).unwrap();
    let ct = encrypt(&vec![1; params.n], &swk, &params).unwrap();
    assert_eq!(ct.noise_bound, 480);
    let err = he_weighted_sum(&[3], &[&ct], None).unwrap_err();
    assert!(matches!(err, IvheError::NoiseBudget { bound: 1440, limit: 1024 }));
}

#[test]
fn weighted_sum_declared_scale_extends_ledger() {
    let params = roundtrip_params();
    let (_, swk) = gen_keys(params, 11).unwrap();
    let ct = encrypt(&vec![1; params.n], &swk, &params).unwrap();
    let out = he_weighted_sum(&[1], &[&ct], Some(128)).unwrap();
    assert_eq!(out.scale, vec![128]);
    // mismatched ledgers refuse to combine
    assert!(matches!(he_add(&out, &ct), Err(IvheError::Incompatible(_))));
}

#[test]
fn sign_preservation_non_negative_mode() {
    // Scalar plaintexts, T >= 0, A >= 0, E = 0: every digit carries the sign of x.
    let params =
        HeParams { n: 1, w: 1 << 10, l: 24, a_bound: 8, e_bound: 0, t_bound: 8, non_negative: true };
    for seed in 0..20 {
        let (sk, swk) = gen_keys(params, seed).unwrap();
        assert!(sk.secret_column().iter().all(|&t| t >= 0));
        assert!(swk.matrix().data.iter().all(|&m| m >= 0));
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(1000 + seed);
        for _ in 0..50 {
            let mag: i64 = rng.random_range(1..=4000);
            for x in [mag, -mag] {
                let ct = encrypt(&[x], &swk, &params).unwrap();
                for &d in &ct.digits {
                    assert!(d.signum() == x.signum(), "digit {d} lost sign of {x}");
                }
                assert_eq!(decrypt(&ct, &sk).unwrap(), vec![x]);
            }
        }
    }
}

#[test]
fn non_negative_mode_validates_w_against_t_bound() {
    let params =
        HeParams { n: 1, w: 24, l: 20, a_bound: 8, e_bound: 0, t_bound: 8, non_negative: true };
    // lowest set bit of 24 is 8 < 16 = 2*t_bound
    assert!(params.validate().is_err());
}

#[test]
fn serialization_roundtrips() {
    let params = roundtrip_params();
    let (sk, swk) = gen_keys(params, 12).unwrap();
    let ct = encrypt(&vec![7; params.n], &swk, &params).unwrap();

    let sk2 = SecretKey::from_bytes(&sk.to_bytes()).unwrap();
    assert_eq!(sk2.secret_column(), sk.secret_column());
    assert_eq!(sk2.id(), sk.id());

    let swk2 = SwitchKey::from_bytes(&swk.to_bytes()).unwrap();
    assert_eq!(swk2.matrix(), swk.matrix());
    assert!(swk2.is_consistent_with(&sk2));

    let ct2 = Ciphertext::from_bytes(&ct.to_bytes()).unwrap();
    assert_eq!(ct2, ct);
    assert_eq!(decrypt(&ct2, &sk2).unwrap(), vec![7; params.n]);

    assert!(Ciphertext::from_bytes(&sk.to_bytes()).is_err());
    assert!(SecretKey::from_bytes(b"IVHEgarbage").is_err());

    // the JSON debug form exists and round-trips too
    let js = serde_json::to_string(&ct).unwrap();
    assert_eq!(serde_json::from_str::<Ciphertext>(&js).unwrap(), ct);
}

proptest! {
    #[test]
    fn prop_star_identity(values in proptest::collection::vec(-500i64..=500, 1..6), extra in 0u32..4) {
        let l = 10 + extra;
        let n = values.len();
        let mut s = IntMat::zeros(2, n);
        for c in 0..n {
            s.set(0, c, (c as i64 % 7) - 3);
            s.set(1, c, (c as i64 % 5) - 2);
        }
        let star = star_expand(&s, l);
        let cstar = bit_decompose(&values, l).unwrap();
        let via_star = star.matvec(&cstar).unwrap();
        let direct = s.matvec(&values).unwrap();
        prop_assert_eq!(via_star, direct);
    }

    #[test]
    fn prop_roundtrip(seed in 0u64..200, x in proptest::collection::vec(-1000i64..=1000, 16)) {
        let params = roundtrip_params();
        let (sk, swk) = gen_keys(params, seed).unwrap();
        let ct = encrypt(&x, &swk, &params).unwrap();
        prop_assert_eq!(decrypt(&ct, &sk).unwrap(), x);
    }
}
