mod common;

use cellseg::adapt::*;
use cellseg::data::{crop_training_set, CropSpec, DomainDataset, Sample};
use cellseg::meta::MetaConfig;
use cellseg::models::{build_network, Architecture, NetworkSpec};
use cellseg::Error;
use ndarray::Array2;
use proptest::prelude::*;

fn net(arch: Architecture) -> (cellseg::models::SegmentationNetwork, cellseg::models::ParameterVector) {
    build_network(&NetworkSpec::new(arch, 4, 2), 21).unwrap()
}

fn quick_finetune(size: usize) -> FinetuneConfig {
    FinetuneConfig { epochs: 3, tile_size: size, ..FinetuneConfig::default() }
}

#[test]
fn zero_learning_rate_fine_tune_keeps_weights() {
    let (n, theta) = net(Architecture::Fcrn);
    let d = common::blobs("t", 16, 3, 1);
    let shots: Vec<&Sample> = d.samples.iter().take(2).collect();
    let out = fine_tune(&n, &theta, &shots, &FinetuneConfig { lr: 0.0, ..quick_finetune(16) }).unwrap();
    for (i, e) in theta.entries().iter().enumerate() {
        if !e.kind.is_running_stat() {
            assert_eq!(out.params.slice(i), theta.slice(i), "{}", e.name);
        }
    }
}

#[test]
fn fine_tuning_is_deterministic_and_reduces_the_loss() {
    let (n, theta) = net(Architecture::UNetLight);
    let d = common::blobs("t", 16, 3, 1);
    let shots: Vec<&Sample> = d.samples.iter().take(2).collect();
    let cfg = FinetuneConfig { epochs: 15, lr: 0.01, ..quick_finetune(16) };
    let a = fine_tune(&n, &theta, &shots, &cfg).unwrap();
    let b = fine_tune(&n, &theta, &shots, &cfg).unwrap();
    assert!(a.params.bit_eq(&b.params));
    assert!(a.losses.last().unwrap() < &a.losses[0]);
}

#[test]
fn unet_fine_tuning_keeps_batch_norm_affine_fixed() {
    for (arch, learns) in [(Architecture::UNetLight, false), (Architecture::Fcrn, true)] {
        let (n, theta) = net(arch);
        let d = common::blobs("t", 16, 3, 1);
        let shots: Vec<&Sample> = d.samples.iter().take(2).collect();
        let out = fine_tune(&n, &theta, &shots, &FinetuneConfig { lr: 0.01, ..quick_finetune(16) }).unwrap();
        let changed = theta
            .entries()
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind.is_bn_affine())
            .any(|(i, _)| out.params.slice(i) != theta.slice(i));
        assert_eq!(changed, learns, "{arch:?}");
    }
}

#[test]
fn large_shots_are_tiled_and_mixed_sizes_need_tiling() {
    let (n, theta) = net(Architecture::Fcrn);
    let big = common::blobs("t", 40, 1, 1);
    let small = common::blobs("s", 24, 1, 1);
    let shots = vec![&big.samples[0], &small.samples[0]];
    fine_tune(&n, &theta, &shots, &quick_finetune(16)).unwrap();
    let whole = FinetuneConfig { tile_shots: false, ..quick_finetune(16) };
    assert!(fine_tune(&n, &theta, &shots, &whole).is_err());
    assert!(fine_tune(&n, &theta, &[], &quick_finetune(16)).is_err());
}

#[test]
fn finetune_config_validation() {
    assert!(FinetuneConfig { epochs: 0, ..FinetuneConfig::default() }.validate().is_err());
    assert!(FinetuneConfig { binarize_threshold: 1.0, ..FinetuneConfig::default() }.validate().is_err());
    FinetuneConfig::default().validate().unwrap();
}

#[test]
fn iou_examples() {
    let mask = Array2::from_shape_vec((2, 3), vec![1u8, 1, 0, 1, 1, 0]).unwrap();
    let pred = Array2::from_shape_vec((2, 3), vec![0.9, 0.6, 0.8, 0.2, 0.1, 0.3]).unwrap();
    assert!((iou(&pred, &mask, 0.5).unwrap() - 0.4).abs() < 1e-15);
    let disjoint = Array2::from_shape_vec((2, 3), vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
    assert_eq!(iou(&disjoint, &mask, 0.5).unwrap(), 0.0);
    assert_eq!(iou(&mask.mapv(f64::from), &mask, 0.5).unwrap(), 1.0);
    // Binarization is strict.
    assert_eq!(iou(&Array2::from_elem((2, 3), 0.5), &Array2::zeros((2, 3)), 0.5).unwrap(), 1.0);
}

#[test]
fn evaluate_averages_per_image_and_ignores_order() {
    let (n, theta) = net(Architecture::Fcrn);
    let d = common::blobs("t", 16, 5, 3);
    let refs: Vec<&Sample> = d.samples.iter().collect();
    let score = evaluate(&n, &theta, &refs, 0.5).unwrap();
    let per: Vec<f64> = refs.iter().map(|s| evaluate(&n, &theta, &[*s], 0.5).unwrap()).collect();
    assert!((score - per.iter().sum::<f64>() / 5.0).abs() < 1e-12);
    let rev: Vec<&Sample> = refs.iter().rev().copied().collect();
    assert!((evaluate(&n, &theta, &rev, 0.5).unwrap() - score).abs() < 1e-12);
    assert!(matches!(evaluate(&n, &theta, &[], 0.5), Err(Error::Argument(_))));
}

#[test]
fn full_resolution_evaluation_after_crop_training() {
    let spec = NetworkSpec::new(Architecture::Fcrn, 4, 3);
    let sources = vec![common::blobs("a", 32, 3, 1), common::blobs("b", 32, 3, 2)];
    let cfg = MetaConfig { outer_iterations: 1, k: 2, inner_steps: 1, ..MetaConfig::default() };
    let (n, out) = cellseg::meta::meta_train(&sources, &spec, &cfg).unwrap();
    let image = Array2::from_shape_fn((520, 696), |(y, x)| ((y + x) % 9) as f64 / 9.0);
    let s = Sample::new("big", "t", image, Array2::zeros((520, 696))).unwrap();
    let score = evaluate(&n, &out.params, &[&s], 0.5).unwrap();
    assert!((0.0..=1.0).contains(&score));
}

#[test]
fn transfer_training_pools_sources_and_learns() {
    let sources = vec![common::blobs("a", 16, 4, 1), common::blobs("b", 16, 6, 2)];
    let spec = NetworkSpec::new(Architecture::Fcrn, 4, 2);
    let cfg = TransferConfig { epochs: 8, batch_size: 5, lr: 0.01, ..TransferConfig::default() };
    let (_, out) = transfer_train(&sources, &spec, &cfg).unwrap();
    // 10 pooled samples in batches of 5.
    assert_eq!(out.steps, 16);
    assert!(out.epoch_losses.last().unwrap() < &out.epoch_losses[0]);
    let (_, again) = transfer_train(&sources, &spec, &cfg).unwrap();
    assert!(again.params.bit_eq(&out.params));
    let capped = TransferConfig { max_steps: Some(3), ..cfg };
    assert_eq!(transfer_train(&sources, &spec, &capped).unwrap().1.steps, 3);
    assert!(transfer_train(&[], &spec, &cfg).is_err());
}

fn protocol(k_grid: Vec<usize>, repeats: usize) -> ProtocolConfig {
    ProtocolConfig {
        k_grid,
        repeats,
        meta: MetaConfig { outer_iterations: 1, k: 2, inner_steps: 1, ..MetaConfig::default() },
        finetune: FinetuneConfig { epochs: 2, tile_size: 16, ..FinetuneConfig::default() },
        transfer: None,
        crop: CropSpec { size: 16, ..CropSpec::default() },
        seed: 4,
    }
}

#[test]
fn minimal_leave_one_out_grid() {
    let ds = vec![common::blobs("a", 16, 4, 1), common::blobs("b", 16, 4, 2), common::blobs("c", 16, 4, 3)];
    let spec = NetworkSpec::new(Architecture::Fcrn, 4, 2);
    let out = leave_one_out(&ds[..2], Method::TRANSFER, &spec, &protocol(vec![1], 2)).unwrap();
    assert_eq!(out.results.len(), 2);
    assert!(out.results.iter().all(|r| r.repeat_ious.len() == 2));
    let meta = leave_one_out(&ds, Method::ML_FULL, &spec, &protocol(vec![1, 2], 2)).unwrap();
    assert_eq!(meta.results.len(), 6);
    for r in &meta.results {
        let (m, s) = mean_std(&r.repeat_ious);
        assert!((m - r.mean_iou).abs() < 1e-9 && (s - r.std_iou).abs() < 1e-9);
    }
}

#[test]
fn protocol_rejects_small_datasets() {
    let ds = vec![common::blobs("a", 16, 4, 1), common::blobs("b", 16, 3, 2)];
    let spec = NetworkSpec::new(Architecture::Fcrn, 4, 2);
    let err = leave_one_out(&ds, Method::ML_BCE, &spec, &protocol(vec![1, 3], 1)).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(leave_one_out(&ds[..1], Method::ML_BCE, &spec, &protocol(vec![1], 1)).is_err());
}

#[test]
fn repeats_share_the_trained_initialization() {
    let ds = [common::blobs("a", 16, 4, 1), common::blobs("b", 16, 5, 2)];
    let spec = NetworkSpec::new(Architecture::Fcrn, 4, 2);
    let cfg = protocol(vec![2], 3);
    let (n, theta) = train_for_target(&ds[..1], "b", Trainer::Transfer, &spec, &cfg).unwrap();
    let (result, sels) = evaluate_cell(&n, &theta, &ds[1], Method::TRANSFER, 2, &cfg).unwrap();
    for (sel, iou) in sels.iter().zip(&result.repeat_ious) {
        assert_eq!(evaluate_selection(&n, &theta, &ds[1], sel, &cfg.finetune).unwrap(), *iou);
    }
}

#[test]
fn training_init_depends_on_target_not_method() {
    let cfg = protocol(vec![1], 1);
    assert_eq!(cfg.init_seed("x"), cfg.init_seed("x"));
    assert_ne!(cfg.init_seed("x"), cfg.init_seed("y"));
    let crops = crop_training_set(&common::blobs("a", 16, 2, 1), &cfg.crop).unwrap();
    let _: &DomainDataset = &crops;
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in prop::collection::vec(0u8..=1, 36), b in prop::collection::vec(0u8..=1, 36)) {
        let ma = Array2::from_shape_vec((6, 6), a).unwrap();
        let mb = Array2::from_shape_vec((6, 6), b).unwrap();
        let ab = iou(&ma.mapv(f64::from), &mb, 0.5).unwrap();
        let ba = iou(&mb.mapv(f64::from), &ma, 0.5).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
    }
}
