//! Dense adapter contracts: pyramid geometry, token-map bijection, fusion
//! semantics, decoder shapes and widths, parameter-count calibration,
//! finite-difference gradients and the frozen-encoder training loop.

use ndarray::{Array2, IxDyn};
use radenc_core::gradcheck::check_gradients;
use radenc_core::ops;
use radenc_core::tensor::{Arr, Bindings, Tensor};
use radenc_core::{param_hash, Error, ImageBatch, ParameterStore, Rng};
use radenc_data::synth::synth_squares;
use radenc_model::dense::{
    align_fuse, conv_pyramid, count_trainable, decode, forward_dense, map_to_tokens_raw,
    param_spec, register_dense, tokens_to_map, train_segmenter, DenseConfig, Scale,
};
use radenc_model::encoder::{register as register_encoder, EncoderConfig, Tokens};
use radenc_model::fwd::Fwd;

fn tiny_enc() -> EncoderConfig {
    EncoderConfig {
        layer_scale_init: 1.0,
        pos_grid: (16, 16),
        ..EncoderConfig::tiny()
    }
}

fn dense_store(cfg: &DenseConfig, enc: &EncoderConfig, seed: u64) -> (ParameterStore, Rng) {
    let mut store = ParameterStore::new();
    let mut rng = Rng::seed_from(seed);
    register_encoder(&mut store, enc, "encoder", &mut rng).unwrap();
    store.freeze_prefix("encoder.");
    register_dense(&mut store, cfg, enc.embed_dim, &mut rng).unwrap();
    (store, rng)
}

fn rand_batch(b: usize, size: usize, seed: u64) -> ImageBatch {
    let mut rng = Rng::seed_from(seed);
    ImageBatch::new(Arr::from_shape_fn(IxDyn(&[b, 3, size, size]), |_| rng.normal() * 0.4)).unwrap()
}

#[test]
fn pyramid_strides_at_448() {
    let cfg = DenseConfig::tiny_test(2);
    let enc = tiny_enc();
    let (store, _) = dense_store(&cfg, &enc, 1);
    let bind = Bindings::eval(&store);
    let fwd = Fwd::eval(&bind);
    let img = rand_batch(1, 448, 2);
    let (c8, c16, c32) = conv_pyramid(&fwd, &cfg, &img).unwrap();
    assert_eq!(&c8.shape()[2..], &[56, 56]);
    assert_eq!(&c16.shape()[2..], &[28, 28]);
    assert_eq!(&c32.shape()[2..], &[14, 14]);
}

#[test]
fn pyramid_small_input_arithmetic() {
    let cfg = DenseConfig::tiny_test(2);
    let enc = tiny_enc();
    let (store, _) = dense_store(&cfg, &enc, 2);
    let bind = Bindings::eval(&store);
    let fwd = Fwd::eval(&bind);
    let img = rand_batch(1, 96, 3);
    let (c8, c16, c32) = conv_pyramid(&fwd, &cfg, &img).unwrap();
    assert_eq!(&c8.shape()[2..], &[12, 12]);
    assert_eq!(&c16.shape()[2..], &[6, 6]);
    assert_eq!(&c32.shape()[2..], &[3, 3]);
    // Indivisible dims are rejected.
    let bad = rand_batch(1, 100, 4);
    assert!(matches!(conv_pyramid(&fwd, &cfg, &bad), Err(Error::Shape(_))));
}

#[test]
fn zero_image_zero_init_gives_zero_activations() {
    let cfg = DenseConfig::tiny_test(2);
    let enc = tiny_enc();
    let (mut store, _) = dense_store(&cfg, &enc, 5);
    // Zero image with zero conv bias and zero BN shift: every activation 0.
    let img = ImageBatch::new(Arr::zeros(IxDyn(&[1, 3, 64, 64]))).unwrap();
    for i in 0..5 {
        let bias_path = format!("dense.pyramid.{i}.conv.bias");
        let shape = store.value(&bias_path).unwrap().raw_dim();
        store.set_value(&bias_path, Arr::zeros(shape)).unwrap();
    }
    let bind = Bindings::train(&store);
    let mut rng = Rng::seed_from(0);
    let fwd = Fwd::train(&bind, &mut rng);
    let (c8, c16, c32) = conv_pyramid(&fwd, &cfg, &img).unwrap();
    for t in [c8, c16, c32] {
        assert!(t.value().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn tokens_to_map_row_major_layout() {
    // grid 2x2, D=1, tokens [1,2,3,4] -> map [[1,2],[3,4]].
    let cls = Arr::zeros(IxDyn(&[1, 1, 1]));
    let patches = Arr::from_shape_vec(IxDyn(&[1, 4, 1]), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let x = ndarray::concatenate(ndarray::Axis(1), &[cls.view(), patches.view()])
        .unwrap()
        .into_dyn();
    let tokens = Tokens {
        x: Tensor::lit(x),
        grid: (2, 2),
    };
    let map = tokens_to_map(&tokens).unwrap();
    assert_eq!(map.shape(), &[1, 1, 2, 2]);
    let v = map.value();
    assert_eq!(
        [v[[0, 0, 0, 0]], v[[0, 0, 0, 1]], v[[0, 0, 1, 0]], v[[0, 0, 1, 1]]],
        [1.0, 2.0, 3.0, 4.0]
    );
}

#[test]
fn token_map_round_trip_bit_exact() {
    let mut rng = Rng::seed_from(7);
    let patches = Arr::from_shape_fn(IxDyn(&[2, 12, 5]), |_| rng.normal());
    let cls = Arr::from_shape_fn(IxDyn(&[2, 1, 5]), |_| rng.normal());
    let x = ndarray::concatenate(ndarray::Axis(1), &[cls.view(), patches.view()])
        .unwrap()
        .into_dyn();
    let tokens = Tokens {
        x: Tensor::lit(x),
        grid: (3, 4),
    };
    let map = tokens_to_map(&tokens).unwrap();
    let back = map_to_tokens_raw(map.value());
    assert_eq!(back.shape(), patches.shape());
    for (a, b) in back.iter().zip(patches.iter()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn grid_at_448_is_32x32() {
    let enc = tiny_enc();
    let mut store = ParameterStore::new();
    let mut rng = Rng::seed_from(8);
    register_encoder(&mut store, &enc, "encoder", &mut rng).unwrap();
    let bind = Bindings::eval(&store);
    let fwd = Fwd::eval(&bind);
    let encd = radenc_model::encoder::Encoder::new(&fwd, &enc, "encoder");
    let img = rand_batch(1, 448, 9);
    let tokens = encd.patchify(&img).unwrap();
    let map = tokens_to_map(&tokens).unwrap();
    assert_eq!(&map.shape()[2..], &[32, 32]);
}

#[test]
fn fuse_geometry_and_additive_identity() {
    let cfg = DenseConfig::tiny_test(2);
    let enc = tiny_enc();
    let (store, mut rng) = dense_store(&cfg, &enc, 10);
    let bind = Bindings::eval(&store);
    let fwd = Fwd::eval(&bind);

    // 448 input: tokens at 32x32 upsampled to 56x56 at stride 8.
    let v = Tensor::lit(Arr::from_shape_fn(IxDyn(&[1, enc.embed_dim, 32, 32]), |_| rng.normal()));
    let prior = Tensor::lit(Arr::from_shape_fn(IxDyn(&[1, cfg.pyramid[2], 56, 56]), |_| rng.normal()));
    let f8 = align_fuse(&fwd, &v, &prior, Scale::S8, (448, 448)).unwrap();
    assert_eq!(f8.shape(), &[1, cfg.d_f, 56, 56]);

    // Zero prior: output equals the projected, resized tokens (the prior
    // projection has no bias).
    let zero_prior = Tensor::lit(Arr::zeros(IxDyn(&[1, cfg.pyramid[2], 56, 56])));
    let with_zero = align_fuse(&fwd, &v, &zero_prior, Scale::S8, (448, 448)).unwrap();
    let tw = fwd.get("dense.fuse.s8.token_proj.weight");
    let tb = fwd.get("dense.fuse.s8.token_proj.bias");
    let manual = ops::bilinear2d(&ops::conv2d(&v, &tw, Some(&tb), 1, 0), 56, 56);
    assert_eq!(with_zero.value(), manual.value());

    // Constant token map stays constant through resize (per channel).
    let const_v = Tensor::lit(Arr::from_elem(IxDyn(&[1, enc.embed_dim, 32, 32]), 0.37));
    let fused = align_fuse(&fwd, &const_v, &zero_prior, Scale::S8, (448, 448)).unwrap();
    let fv = fused.value();
    for c in 0..cfg.d_f {
        let first = fv[[0, c, 0, 0]];
        assert!(fv
            .slice(ndarray::s![0, c, .., ..])
            .iter()
            .all(|&x| (x - first).abs() < 1e-12));
    }
}

#[test]
fn decoder_logits_at_eighth_resolution() {
    let cfg = DenseConfig::tiny_test(3);
    let enc = tiny_enc();
    let (store, mut rng) = dense_store(&cfg, &enc, 11);
    let bind = Bindings::eval(&store);
    let fwd = Fwd::eval(&bind);
    let d = cfg.d_f;
    let f8 = Tensor::lit(Arr::from_shape_fn(IxDyn(&[1, d, 56, 56]), |_| rng.normal()));
    let f16 = Tensor::lit(Arr::from_shape_fn(IxDyn(&[1, d, 28, 28]), |_| rng.normal()));
    let f32_ = Tensor::lit(Arr::from_shape_fn(IxDyn(&[1, d, 14, 14]), |_| rng.normal()));
    let logits = decode(&fwd, &cfg, &f8, &f16, &f32_).unwrap();
    assert_eq!(logits.shape(), &[1, 3, 56, 56], "n_classes channels at H/8");

    // Width bookkeeping: stage-1 conv expects 2*d_f input channels.
    let w = store.value("dense.decode.0.conv1.weight").unwrap();
    assert_eq!(w.shape(), &[d, 2 * d, 3, 3]);

    // Mismatched width is rejected.
    let bad = Tensor::lit(Arr::zeros(IxDyn(&[1, d + 1, 56, 56])));
    assert!(matches!(
        decode(&fwd, &cfg, &bad, &f16, &f32_),
        Err(Error::Shape(_))
    ));
}

#[test]
fn full_forward_geometry_at_448() {
    let cfg = DenseConfig::tiny_test(2);
    let enc = tiny_enc();
    let (store, _) = dense_store(&cfg, &enc, 12);
    let bind = Bindings::eval(&store);
    let fwd = Fwd::eval(&bind);
    let img = rand_batch(1, 448, 13);
    let logits = forward_dense(&fwd, &enc, &cfg, &img).unwrap();
    assert_eq!(logits.shape(), &[1, 2, 56, 56]);
}

#[test]
fn decode_output_follows_input_size() {
    let cfg = DenseConfig::tiny_test(2);
    let enc = tiny_enc();
    let (store, _) = dense_store(&cfg, &enc, 14);
    let bind = Bindings::eval(&store);
    let fwd = Fwd::eval(&bind);
    for size in [224usize, 448] {
        let img = rand_batch(1, size, 15);
        let logits = forward_dense(&fwd, &enc, &cfg, &img).unwrap();
        assert_eq!(&logits.shape()[2..], &[size / 8, size / 8]);
    }
}

#[test]
fn preset_parameter_counts_match_within_one_percent() {
    let small = DenseConfig::small(2);
    let base = DenseConfig::base(2);
    let small_n = count_trainable(&small, 384);
    let base_n = count_trainable(&base, 768);
    let small_target = 14.27e6;
    let base_target = 69.76e6;
    assert!(
        (small_n as f64 - small_target).abs() / small_target < 0.01,
        "small preset {small_n}"
    );
    assert!(
        (base_n as f64 - base_target).abs() / base_target < 0.01,
        "base preset {base_n}"
    );
}

#[test]
fn pyramid_width_calibration_is_reproducible() {
    // Re-derive the calibrated stage width by search and check the presets
    // store exactly the best integer solution.
    for (enc_dim, d_f, target, expect) in [(384usize, 256usize, 14.27e6, 707usize), (768, 512, 69.76e6, 1664)] {
        let mut best = (usize::MAX, f64::INFINITY);
        for c in 1..4096usize {
            let cfg = DenseConfig {
                pyramid: [64, 128, c, c, c],
                ..if d_f == 256 { DenseConfig::small(2) } else { DenseConfig::base(2) }
            };
            let n = count_trainable(&cfg, enc_dim) as f64;
            let err = (n - target).abs();
            if err < best.1 {
                best = (c, err);
            }
        }
        assert_eq!(best.0, expect, "calibrated width for d_f {d_f}");
    }
}

#[test]
fn registered_store_matches_spec_enumeration() {
    let cfg = DenseConfig::tiny_test(2);
    let enc = tiny_enc();
    let mut store = ParameterStore::new();
    let mut rng = Rng::seed_from(16);
    register_dense(&mut store, &cfg, enc.embed_dim, &mut rng).unwrap();
    assert_eq!(store.num_trainable(), count_trainable(&cfg, enc.embed_dim));
    for (path, shape, _) in param_spec(&cfg, enc.embed_dim) {
        assert_eq!(store.value(&path).unwrap().shape(), &shape[..], "{path}");
    }
}

#[test]
fn adapter_gradients_match_finite_differences_and_encoder_gets_none() {
    let mut cfg = DenseConfig::tiny_test(2);
    cfg.d_f = 8;
    cfg.pyramid = [4, 4, 8, 8, 8];
    let enc = EncoderConfig {
        depth: 2,
        embed_dim: 16,
        heads: 2,
        drop_path_rate: 0.0,
        layer_scale_init: 0.5,
        mlp_ratio: 2.0,
        pos_grid: (4, 4),
        ..EncoderConfig::tiny()
    };
    cfg.tap_layers = vec![0, 1, 1];
    let (store, mut rng) = dense_store(&cfg, &enc, 17);
    let img = rand_batch(1, 224, 18);
    let probe = Arr::from_shape_fn(IxDyn(&[1, 2, 28, 28]), |_| rng.normal());

    let loss_of = |s: &ParameterStore| {
        let bind = Bindings::eval(s);
        let fwd = Fwd::eval(&bind);
        let logits = forward_dense(&fwd, &enc, &cfg, &img).unwrap();
        (logits.value() * &probe).sum()
    };

    let bind = Bindings::train(&store);
    let fwd = Fwd::eval(&bind); // batch stats still come from eval? no: eval uses running stats
    // Use train-mode forward so BN uses batch statistics on both sides.
    drop(fwd);
    let analytic_grads;
    {
        let fwd = Fwd::train(&bind, &mut rng);
        let logits = forward_dense(&fwd, &enc, &cfg, &img).unwrap();
        let loss = ops::sum_all(&ops::mul(&logits, &Tensor::lit(probe.clone())));
        loss.backward();
        analytic_grads = bind.grads();
    }
    // Frozen encoder: no gradient reaches any encoder tensor.
    for path in analytic_grads.keys() {
        assert!(
            path.starts_with("dense."),
            "unexpected gradient for {path}"
        );
    }

    let paths: Vec<String> = store
        .trainable_paths()
        .into_iter()
        .filter(|p| p.starts_with("dense."))
        .collect();
    let inputs: Vec<Arr> = paths.iter().map(|p| store.value(p).unwrap().clone()).collect();
    let analytic: Vec<Arr> = paths
        .iter()
        .map(|p| {
            analytic_grads
                .get(p)
                .cloned()
                .unwrap_or_else(|| Arr::zeros(store.value(p).unwrap().raw_dim()))
        })
        .collect();

    // FD loss must also run BN in batch-stat mode for consistency.
    let mut store_mut = store.clone();
    let mut fd_rng = Rng::seed_from(99);
    let loss_fn = |xs: &[Arr]| {
        for (p, x) in paths.iter().zip(xs.iter()) {
            store_mut.set_value(p, x.clone()).unwrap();
        }
        let bind = Bindings::eval(&store_mut);
        let mut r = Rng::seed_from(0);
        let fwd = Fwd::train(&bind, &mut r);
        let logits = forward_dense(&fwd, &enc, &cfg, &img).unwrap();
        (logits.value() * &probe).sum()
    };
    let _ = loss_of;
    let report = check_gradients(loss_fn, &inputs, &analytic, 2, 1e-3, &mut fd_rng);
    assert!(report.checked > 20, "probed {}", report.checked);
}

#[test]
fn training_fits_squares_and_freezes_encoder() {
    let ds = synth_squares(24, 224, 19);
    let mut cfg = DenseConfig::tiny_test(2);
    cfg.epochs = 20;
    cfg.early_stop_miou = Some(0.92);
    cfg.seed = 20;
    let enc = tiny_enc();

    let mut rng = Rng::seed_from(cfg.seed);
    let mut store = ParameterStore::new();
    register_encoder(&mut store, &enc, "encoder", &mut rng).unwrap();
    store.freeze_prefix("encoder.");
    register_dense(&mut store, &cfg, enc.embed_dim, &mut rng).unwrap();
    let before = param_hash(&store, "encoder.");

    let run = radenc_model::dense::train_segmenter_with(store, &ds, &cfg, &enc, &mut rng).unwrap();
    assert_eq!(before, param_hash(&run.store, "encoder."), "frozen encoder moved");
    let best = run
        .history
        .iter()
        .map(|e| e.miou)
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(best >= 0.90, "val mIoU should reach 0.90, got {best}");
}

#[test]
fn three_class_config_emits_three_channels() {
    let cfg = DenseConfig::tiny_test(3);
    let enc = tiny_enc();
    let (store, _) = dense_store(&cfg, &enc, 21);
    let bind = Bindings::eval(&store);
    let fwd = Fwd::eval(&bind);
    let img = rand_batch(1, 224, 22);
    let logits = forward_dense(&fwd, &enc, &cfg, &img).unwrap();
    assert_eq!(logits.shape()[1], 3);
}

#[test]
fn mask_size_mismatch_is_data_error() {
    let mut ds = synth_squares(10, 224, 23);
    ds.train.masks[0] = Array2::zeros((100, 100));
    let cfg = DenseConfig::tiny_test(2);
    let err = train_segmenter(&ds, &cfg, &tiny_enc()).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
}

#[test]
fn bilinear_upsample_preserves_constants_exactly() {
    let x = Tensor::lit(Arr::from_elem(IxDyn(&[1, 3, 7, 7]), -1.75));
    let y = ops::bilinear2d(&x, 14, 14);
    assert!(y.value().iter().all(|&v| v == -1.75));
}
