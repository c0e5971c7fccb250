use enki::data::{generate_cutouts, generate_field, split_ids, FieldSpec};
use enki::evaluation::{estimate_bias, evaluate, parse_csv, rmse, EvalItem, EvalOptions, ImageRow, SigmaBin};
use enki::model::{MaskedAutoencoder, ModelConfig, ModelParams};
use enki::numerics::{Graph, Tensor};
use enki::patching::{gather_patches, patchify, random_mask_seeded, scatter_patches, unpatchify, MaskSpec, PatchGrid};
use enki::pipeline::{batch_reconstruct, compute_offset, reconstruct_masked, ShiftedIdentity};
use enki::rng::rng_from_seed;
use enki::training::{lr_at, AdamW, TrainConfig};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn toy() -> ModelConfig {
    ModelConfig::toy(16, 4, 16)
}

fn small_spec() -> FieldSpec {
    FieldSpec {
        size: 16,
        ..FieldSpec::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gather_then_scatter_is_identity(n in 1usize..40, len in 1usize..6, seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let rows: Vec<f64> = (0..n * len).map(|_| rng.random::<f64>()).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let back = scatter_patches(&gather_patches(&rows, len, &perm), len, &perm);
        prop_assert_eq!(back, rows);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let x = Tensor::from_fn(&[rows, cols], |_| rng.random_range(-30.0..30.0));
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.softmax(v).unwrap();
        for row in g.value(s).data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_content_never_reaches_the_loss(seed in any::<u64>(), p in 10.0f64..80.0) {
        let cfg = toy();
        let model = MaskedAutoencoder::new(cfg.clone(), seed).unwrap();
        let img = generate_field(&small_spec(), seed, 0).unwrap().values;
        let mask = random_mask_seeded(&cfg.grid(), p, seed).unwrap();
        let mut scrambled = img.clone();
        let mut rng = rng_from_seed(seed ^ 1);
        for k in mask.masked() {
            for o in cfg.grid().pixel_offsets(k) {
                scrambled[o] = rng.random_range(-100.0..100.0);
            }
        }
        let a = model.predict(&img, &mask).unwrap();
        let b = model.predict(&scrambled, &mask).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn loss_depends_on_flags_not_on_the_rng(seed in any::<u64>()) {
        let cfg = toy();
        let model = MaskedAutoencoder::new(cfg.clone(), 3).unwrap();
        let img = generate_field(&small_spec(), seed, 0).unwrap().values;
        let drawn = random_mask_seeded(&cfg.grid(), 50.0, seed).unwrap();
        let rebuilt = MaskSpec::from_flags(drawn.flags.clone());
        let a = model.loss_and_grads(&[&img], &[&img], &[drawn], None).unwrap();
        let b = model.loss_and_grads(&[&img], &[&img], &[rebuilt], None).unwrap();
        prop_assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    }

    #[test]
    fn composite_keeps_visible_pixels_and_bias_is_linear(seed in any::<u64>(), bias in -0.5f64..0.5) {
        let cfg = toy();
        let model = MaskedAutoencoder::new(cfg.clone(), seed).unwrap();
        let img = generate_field(&small_spec(), seed, 1).unwrap();
        let mask = random_mask_seeded(&cfg.grid(), 40.0, seed).unwrap();
        let plain = reconstruct_masked(&model, &img, &mask, 0.0).unwrap();
        let shifted = reconstruct_masked(&model, &img, &mask, bias).unwrap();
        let again = reconstruct_masked(&model, &img, &mask, bias).unwrap();
        prop_assert_eq!(&shifted, &again);
        for k in mask.visible() {
            for o in cfg.grid().pixel_offsets(k) {
                prop_assert_eq!(shifted.composite.values[o].to_bits(), img.values[o].to_bits());
            }
        }
        prop_assert!((shifted.offset - (plain.offset - bias)).abs() < 1e-12);
    }

    #[test]
    fn rmse_scales_with_amplitude(seed in any::<u64>(), alpha in -5.0f64..5.0) {
        let grid = PatchGrid::new(16, 4).unwrap();
        let mut rng = rng_from_seed(seed);
        let y: Vec<f64> = (0..256).map(|_| rng.random::<f64>()).collect();
        let yhat: Vec<f64> = (0..256).map(|_| rng.random::<f64>()).collect();
        let mask = random_mask_seeded(&grid, 50.0, seed).unwrap();
        let base = rmse(&y, &yhat, &mask, &grid, false).unwrap();
        let ay: Vec<f64> = y.iter().map(|v| alpha * v).collect();
        let ayhat: Vec<f64> = yhat.iter().map(|v| alpha * v).collect();
        let scaled = rmse(&ay, &ayhat, &mask, &grid, false).unwrap();
        prop_assert!((scaled - alpha.abs() * base).abs() < 1e-12 * (1.0 + base));
    }

    #[test]
    fn rmse_ignores_pixel_order(seed in any::<u64>()) {
        // permuting pixels together with the mask leaves the error unchanged
        let grid = PatchGrid::new(16, 4).unwrap();
        let mut rng = rng_from_seed(seed);
        let y: Vec<f64> = (0..256).map(|_| rng.random::<f64>()).collect();
        let yhat: Vec<f64> = (0..256).map(|_| rng.random::<f64>()).collect();
        let mask = random_mask_seeded(&grid, 50.0, seed).unwrap();
        let mut perm: Vec<usize> = (0..grid.num_patches()).collect();
        perm.shuffle(&mut rng);
        let permute = |img: &[f64]| unpatchify(&gather_patches(&patchify(img, &grid).unwrap(), 16, &perm), &grid).unwrap();
        let pmask = MaskSpec::from_flags(perm.iter().map(|&k| mask.flags[k]).collect());
        let a = rmse(&y, &yhat, &mask, &grid, false).unwrap();
        let b = rmse(&permute(&y), &permute(&yhat), &pmask, &grid, false).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn bias_follows_a_constant_shift(c in -0.3f64..0.3) {
        let grid = PatchGrid::new(16, 4).unwrap();
        let stack = generate_cutouts(&small_spec(), 4, 0..6).unwrap();
        let at = |shift: f64| {
            let batch = batch_reconstruct(&ShiftedIdentity { grid, shift }, &stack, 30.0, 1, 0.0);
            estimate_bias(&batch.results).unwrap()
        };
        prop_assert!((at(0.1 + c) - at(0.1) - c).abs() < 1e-12);
    }

    #[test]
    fn generated_cutouts_are_normalized_and_replayable(seed in any::<u64>(), id in 0u64..1000) {
        let a = generate_field(&small_spec(), seed, id).unwrap();
        let b = generate_field(&small_spec(), seed, id).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.all_finite());
        prop_assert!(a.mean().abs() < 1e-6);
        prop_assert!(a.sigma_t() >= 0.01 - 1e-6 && a.sigma_t() <= 1.0 + 1e-6);
    }

    #[test]
    fn schedule_warms_up_then_decays_to_zero(warmup in 0usize..5, extra in 1usize..10, spe in 1usize..7) {
        let cfg = TrainConfig {
            warmup_epochs: warmup,
            total_epochs: warmup + extra,
            ..TrainConfig::desk(30.0)
        };
        let steps = cfg.total_epochs * spe;
        let lrs: Vec<f64> = (0..steps).map(|s| lr_at(s, &cfg, spe)).collect();
        let peak = warmup * spe;
        prop_assert!(lrs[..peak].windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(lrs[peak..].windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(lrs.iter().all(|&l| l >= 0.0 && l <= cfg.base_learning_rate));
        if steps > peak + 1 {
            prop_assert_eq!(lrs[steps - 1], 0.0);
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let cfg = toy();
    let model = MaskedAutoencoder::new(cfg.clone(), 9).unwrap();
    let img = generate_field(&small_spec(), 9, 0).unwrap().values;
    let mask = random_mask_seeded(&cfg.grid(), 30.0, 9).unwrap();
    let a = model.loss_and_grads(&[&img], &[&img], std::slice::from_ref(&mask), None).unwrap();
    let b = model.loss_and_grads(&[&img], &[&img], &[mask], None).unwrap();
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    assert_eq!(a.grads, b.grads);
}

#[test]
fn zero_gradients_leave_parameters_alone() {
    let cfg = toy();
    let params = ModelParams::init(&cfg, 4).unwrap();
    let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();

    let mut still = params.clone();
    let no_decay = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::desk(30.0)
    };
    AdamW::new(&still, &no_decay).update(&mut still, &zeros, 1e-2).unwrap();
    assert_eq!(still, params);

    // with decay on, only the flagged tensors move
    let mut decayed = params.clone();
    AdamW::new(&decayed, &TrainConfig::desk(30.0)).update(&mut decayed, &zeros, 1e-2).unwrap();
    for i in 0..params.len() {
        let before = &params.tensors()[i];
        let after = &decayed.tensors()[i];
        if params.decays(i) {
            assert!(before.data().iter().all(|&w| w == 0.0) || before != after, "{}", params.names()[i]);
        } else {
            assert_eq!(before, after, "{} must not decay", params.names()[i]);
        }
    }
    for name in params.names() {
        let no_decay = name.ends_with(".bias") || name.contains("norm") || name == "mask_token";
        let i = params.names().iter().position(|n| n == name).unwrap();
        assert_eq!(params.decays(i), !no_decay, "{name}");
    }
}

#[test]
fn training_masks_change_every_epoch() {
    let cfg = TrainConfig::desk(10.0);
    let model = ModelConfig::desk();
    for id in 0..100 {
        let masks: Vec<MaskSpec> = (0..5).map(|e| cfg.mask_for(&model, e, id).unwrap()).collect();
        for a in 0..5 {
            for b in a + 1..5 {
                assert_ne!(masks[a].flags, masks[b].flags, "cutout {id}, epochs {a} and {b}");
            }
        }
    }
}

#[test]
fn splits_are_disjoint() {
    let (train, val) = split_ids(4096, 256);
    assert_eq!(train.end - train.start, 4096);
    assert_eq!(val.end - val.start, 256);
    assert!(train.end <= val.start || val.end <= train.start);
}

#[test]
fn border_exclusion_drops_sixty_positions() {
    let grid = PatchGrid::default();
    assert_eq!((0..grid.num_patches()).filter(|&k| grid.is_border(k)).count(), 60);
}

#[test]
fn offset_is_a_signed_median() {
    let grid = PatchGrid::new(8, 4).unwrap();
    let original = vec![0.0; 64];
    let mut recon = vec![0.0; 64];
    let mask = MaskSpec::from_flags(vec![true, false, false, false]);
    for (n, o) in grid.pixel_offsets(0).enumerate() {
        recon[o] = if n < 10 { -0.2 } else { 0.5 };
    }
    assert_eq!(compute_offset(&original, &recon, &mask, &grid).unwrap(), -0.2);
}

#[test]
fn report_tables_reparse() {
    let grid = PatchGrid::default();
    let stack = generate_cutouts(&FieldSpec::default(), 2, 0..20).unwrap();
    let batch = batch_reconstruct(&ShiftedIdentity { grid, shift: 0.02 }, &stack, 30.0, 3, 0.0);
    let items: Vec<EvalItem> = batch.results.iter().map(EvalItem::from).collect();
    let report = evaluate(&items, &grid, &EvalOptions::default()).unwrap();
    assert_eq!(parse_csv::<ImageRow>(&report.images_csv().unwrap()).unwrap(), report.images);
    assert_eq!(parse_csv::<SigmaBin>(&report.sigma_csv().unwrap()).unwrap(), report.sigma_bins);
}
