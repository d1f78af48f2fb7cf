use ndarray::{Array1, Array2};
use proptest::prelude::*;

use vitcrypt::cipher::{decrypt_image, encrypt_image, encrypt_model, split_blocks};
use vitcrypt::flsim::{
    fedavg, finalize_with_encryption, run_federation, ClientState, FederationConfig,
};
use vitcrypt::keygen::{
    build_eb, generate_key, gram_schmidt_orthogonal, make_permutation, KeyGeometry, MatrixMode,
    SplitMix64,
};
use vitcrypt::layout::{flat_index, patch_matrix};
use vitcrypt::synth::{class_dataset, natural_image, uniform_images, SyntheticSpec};
use vitcrypt::tensorio::ImageTensor;
use vitcrypt::vit::{
    classify, embed, encoder_forward, init_random_model, model_to_blobs, predict,
    train_linear_head, Head, Hyperparams, ViTModel,
};

fn max_abs(m: &Array2<f64>) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

fn max_abs_diff<'a>(
    a: impl IntoIterator<Item = &'a f64>,
    b: impl IntoIterator<Item = &'a f64>,
) -> f64 {
    a.into_iter()
        .zip(b)
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Determinant by Gaussian elimination with partial pivoting.
fn det_lu(m: &Array2<f64>) -> f64 {
    let n = m.nrows();
    let mut a = m.clone();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[[i, col]].abs().partial_cmp(&a[[j, col]].abs()).unwrap())
            .unwrap();
        if a[[pivot, col]] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            for k in 0..n {
                a.swap([pivot, k], [col, k]);
            }
            det = -det;
        }
        det *= a[[col, col]];
        for row in col + 1..n {
            let f = a[[row, col]] / a[[col, col]];
            for k in col..n {
                a[[row, k]] -= f * a[[col, k]];
            }
        }
    }
    det
}

#[derive(Debug, Clone, Copy)]
struct Triple {
    p: usize,
    c: usize,
    d: usize,
    n: usize,
    seed: u64,
}

fn triples() -> impl Strategy<Value = Triple> {
    (
        prop::sample::select(vec![2usize, 4]),
        prop::sample::select(vec![1usize, 3]),
        prop::sample::select(vec![8usize, 16]),
        prop::sample::select(vec![4usize, 16]),
        any::<u64>(),
    )
        .prop_map(|(p, c, d, n, seed)| Triple { p, c, d, n, seed })
}

fn build(t: Triple) -> (ViTModel, vitcrypt::keygen::KeyMaterial, ImageTensor) {
    let side = (t.n as f64).sqrt() as usize * t.p;
    let hp = Hyperparams::new(t.p, t.c, t.n, t.d, 1, 2, 3).unwrap();
    let model = init_random_model(t.seed, hp).unwrap();
    let key = generate_key(
        t.seed.wrapping_add(1),
        KeyGeometry::new(t.p, t.c, t.n).unwrap(),
        MatrixMode::Orthogonal,
    )
    .unwrap();
    let img = uniform_images(t.seed.wrapping_add(2), 1, side, side, t.c).remove(0);
    (model, key, img)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn encrypted_tokens_are_permuted_plain_tokens(t in triples()) {
        let (model, key, img) = build(t);
        let z = embed(&model, &img).unwrap();
        let z_enc = embed(&encrypt_model(&model, &key).unwrap(), &encrypt_image(&img, &key).unwrap()).unwrap();
        let expected = key.eb().to_dense().dot(&z);
        let rel = max_abs_diff(&z_enc, &expected) / max_abs(&expected);
        prop_assert!(rel < 1e-9, "relative error {rel:e} for {t:?}");
    }

    #[test]
    fn encrypted_logits_match_plain_logits(t in triples()) {
        let (model, key, img) = build(t);
        let base = classify(&model, &img).unwrap();
        let enc = classify(&encrypt_model(&model, &key).unwrap(), &encrypt_image(&img, &key).unwrap()).unwrap();
        let scale = base.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        prop_assert!(max_abs_diff(&enc, &base) / scale < 1e-8);
    }

    #[test]
    fn encoder_commutes_with_slot_permutations(t in triples()) {
        let (model, key, img) = build(t);
        let z = embed(&model, &img).unwrap();
        let eb = key.eb().to_dense();
        let lhs = encoder_forward(&model, &eb.dot(&z)).unwrap();
        let rhs = eb.dot(&encoder_forward(&model, &z).unwrap());
        prop_assert!(max_abs_diff(&lhs, &rhs) / max_abs(&rhs) < 1e-9);
    }

    #[test]
    fn block_norms_are_preserved(t in triples()) {
        let (_, key, img) = build(t);
        let plain = split_blocks(&img, t.p).unwrap();
        let enc = split_blocks(&encrypt_image(&img, &key).unwrap(), t.p).unwrap();
        let norms = |m: &Array2<f64>| {
            let mut v: Vec<f64> = m.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
            v.sort_by(f64::total_cmp);
            v
        };
        let (a, b) = (norms(plain.as_matrix()), norms(enc.as_matrix()));
        prop_assert!(max_abs_diff(&a, &b) < 1e-10);
    }

    #[test]
    fn decrypt_inverts_encrypt(t in triples()) {
        let (_, key, img) = build(t);
        let back = decrypt_image(&encrypt_image(&img, &key).unwrap(), &key).unwrap();
        prop_assert!(max_abs_diff(img.data(), back.data()) < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gram_schmidt_rows_are_orthonormal(seed in any::<u64>(), l in 1usize..=64) {
        let q = gram_schmidt_orthogonal(seed, l).unwrap();
        let gram = q.dot(&q.t());
        prop_assert!(max_abs_diff(&gram, &Array2::<f64>::eye(l)) < 1e-10);
    }

    #[test]
    fn orthogonal_matrices_have_unit_determinant(seed in any::<u64>(), l in 1usize..=10) {
        let q = gram_schmidt_orthogonal(seed, l).unwrap();
        prop_assert!((det_lu(&q).abs() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn eb_is_a_permutation_fixing_slot_zero(seed in any::<u64>(), n in 1usize..=256) {
        let m = build_eb(&make_permutation(seed, n).unwrap()).to_dense();
        prop_assert_eq!(m.dim(), (n + 1, n + 1));
        prop_assert!(m.iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert!(m.rows().into_iter().all(|r| r.sum() == 1.0));
        prop_assert!(m.columns().into_iter().all(|c| c.sum() == 1.0));
        prop_assert_eq!(m[[0, 0]], 1.0);
    }

    #[test]
    fn keys_are_deterministic_and_seed_sensitive(seed in any::<u64>()) {
        let g = KeyGeometry::new(4, 3, 64).unwrap();
        let a = generate_key(seed, g, MatrixMode::Orthogonal).unwrap();
        prop_assert_eq!(&a, &generate_key(seed, g, MatrixMode::Orthogonal).unwrap());
        let b = generate_key(seed ^ 1, g, MatrixMode::Orthogonal).unwrap();
        prop_assert!(max_abs_diff(a.ea(), b.ea()) > 0.1);
        prop_assert_ne!(a.lt(), b.lt());
    }

    #[test]
    fn wrong_key_decryption_destroys_the_image(seed in any::<u64>()) {
        let g = KeyGeometry::new(4, 3, 64).unwrap();
        let k1 = generate_key(seed, g, MatrixMode::Orthogonal).unwrap();
        let k2 = generate_key(seed.wrapping_add(1), g, MatrixMode::Orthogonal).unwrap();
        let img = natural_image(seed, 32, 32, 3);
        let bad = decrypt_image(&encrypt_image(&img, &k1).unwrap(), &k2).unwrap();
        prop_assert!(max_abs_diff(img.data(), bad.data()) > 1e-2);
    }

    #[test]
    fn fedavg_is_linear(seed in any::<u64>(), clients in 1usize..6, alpha in -4.0f64..4.0) {
        let hp = Hyperparams::new(2, 1, 4, 8, 1, 2, 3).unwrap();
        let mut rng = SplitMix64::new(seed);
        let models: Vec<ViTModel> = (0..clients)
            .map(|_| {
                let mut m = init_random_model(seed, hp).unwrap();
                m.head = Head {
                    weight: Array2::from_shape_simple_fn((8, 3), || rng.next_normal()),
                    bias: Array1::from_shape_simple_fn(3, || rng.next_normal()),
                };
                m.patch_embed.mapv_inplace(|v| v + rng.next_normal());
                m
            })
            .collect();
        let scaled: Vec<ViTModel> = models
            .iter()
            .map(|m| {
                let mut s = m.clone();
                s.head.weight *= alpha;
                s.head.bias *= alpha;
                s.patch_embed *= alpha;
                s
            })
            .collect();
        let avg = fedavg(&models).unwrap();
        let avg_scaled = fedavg(&scaled).unwrap();
        prop_assert!(max_abs_diff(&avg_scaled.head.weight, &(&avg.head.weight * alpha)) < 1e-12);
        prop_assert!(max_abs_diff(&avg_scaled.head.bias, &(&avg.head.bias * alpha)) < 1e-12);
        prop_assert!(max_abs_diff(&avg_scaled.patch_embed, &(&avg.patch_embed * alpha)) < 1e-12);
        // Tensors identical on every client come back bit-identical.
        prop_assert_eq!(&avg.layers, &models[0].layers);
    }

    #[test]
    fn cipher_and_embedding_share_the_flattening(p in 1usize..5, c in 1usize..4, grid in 1usize..4, seed in any::<u64>()) {
        let side = p * grid;
        let img = uniform_images(seed, 1, side, side, c).remove(0);
        let from_cipher = split_blocks(&img, p).unwrap();
        let from_layout = patch_matrix(&img, p).unwrap();
        prop_assert_eq!(from_cipher.as_matrix(), &from_layout);
        for (b, row) in from_layout.rows().into_iter().enumerate() {
            let (bi, bj) = (b / grid, b % grid);
            for r in 0..p {
                for s in 0..p {
                    for ch in 0..c {
                        prop_assert_eq!(row[flat_index(r, s, ch, p, c)], img.get(bi * p + r, bj * p + s, ch));
                    }
                }
            }
        }
    }
}

fn small_federation(seed: u64) -> (ViTModel, Vec<vitcrypt::flsim::RoundLog>) {
    let hp = Hyperparams::new(4, 1, 16, 8, 1, 2, 2).unwrap();
    let spec = SyntheticSpec::new(16, 16, 1);
    let init = init_random_model(seed, hp).unwrap();
    let mut clients: Vec<ClientState> = (0..3)
        .map(|id| ClientState {
            id,
            model: init.clone(),
            shard: class_dataset(&spec, 2, 30, seed ^ (id as u64 + 1)),
            key: None,
        })
        .collect();
    let config = FederationConfig {
        rounds: 3,
        local_epochs: 5,
        lr: 0.5,
    };
    run_federation(&init, &mut clients, config).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn federation_is_deterministic(seed in any::<u64>()) {
        let (g1, l1) = small_federation(seed);
        let (g2, l2) = small_federation(seed);
        prop_assert_eq!(l1, l2);
        prop_assert_eq!(model_to_blobs(&g1), model_to_blobs(&g2));
    }
}

#[test]
fn rekeying_needs_no_retraining() {
    let (global, _) = small_federation(5);
    let before = global.clone();
    let first = finalize_with_encryption(&global, &[1, 2], MatrixMode::Orthogonal).unwrap();
    let second = finalize_with_encryption(&global, &[3, 4], MatrixMode::Orthogonal).unwrap();
    assert_eq!(global, before);
    let img = class_dataset(&SyntheticSpec::new(16, 16, 1), 2, 1, 9)
        .images
        .remove(0);
    let base = classify(&global, &img).unwrap();
    for (model, key) in first.iter().chain(&second) {
        let enc = classify(model, &encrypt_image(&img, key).unwrap()).unwrap();
        assert!(max_abs_diff(&enc, &base) < 1e-8 * base.iter().fold(0.0f64, |a, v| a.max(v.abs())));
    }
    assert_ne!(first[0].1, second[0].1);
}

#[test]
fn wrong_key_agreement_stays_near_chance() {
    let k = 4;
    let hp = Hyperparams::desk_scale(k);
    let spec = SyntheticSpec::desk_scale();
    let train = class_dataset(&spec, k, 400, 61);
    let model = train_linear_head(&init_random_model(60, hp).unwrap(), &train, 300, 0.5).unwrap();
    let test = class_dataset(&spec, k, 200, 62).images;
    let baseline = predict(&model, &test).unwrap();
    let g = KeyGeometry::new(4, 3, 64).unwrap();
    let model_key = generate_key(63, g, MatrixMode::Orthogonal).unwrap();
    let enc_model = encrypt_model(&model, &model_key).unwrap();
    let bound = 2.0 / k as f64 + 0.15;
    for seed in 64..69 {
        let query_key = generate_key(seed, g, MatrixMode::Orthogonal).unwrap();
        let enc: Vec<ImageTensor> = test
            .iter()
            .map(|x| encrypt_image(x, &query_key).unwrap())
            .collect();
        let preds = predict(&enc_model, &enc).unwrap();
        let agree =
            preds.iter().zip(&baseline).filter(|(a, b)| a == b).count() as f64 / test.len() as f64;
        assert!(agree < bound, "key {seed}: agreement {agree} >= {bound}");
    }
}
