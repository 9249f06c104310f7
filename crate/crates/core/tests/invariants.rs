//! Cross-module properties checked through the public API.

use std::collections::BTreeSet;

use erasing_core::attention::{attention_maps, AttentionMethod};
use erasing_core::datasets::{
    augment_train, generate_synthetic, generate_synthetic_logged, Dataset, SyntheticDataset, SyntheticSpec,
};
use erasing_core::masking::{erase, soft_threshold};
use erasing_core::nn::{ConvNet, ConvNetConfig};
use erasing_core::pipeline::{evaluate_dataset, pseudo_label};
use erasing_core::segmentation::{read_mask, write_mask};
use erasing_core::training::{train, HyperParams};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn thousand_synthetic_samples_hold_every_invariant() {
    let spec = SyntheticSpec {
        canvas_size: 32,
        max_shapes: 3,
        ..SyntheticSpec::default()
    };
    let ds = SyntheticDataset::new(spec.clone(), 0, 1000).unwrap();
    for i in 0..ds.len() {
        let img = ds.get(i).unwrap();
        assert!(img.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(img.label.positive_count() >= 1);
        let n = img.label.positive_count();
        assert!((spec.min_shapes..=spec.max_shapes).contains(&n));

        let gt = ds.ground_truth(i).unwrap().unwrap();
        let in_mask: BTreeSet<usize> = gt.labels().iter().filter(|&&v| v > 0).map(|&v| v as usize - 1).collect();
        let in_label: BTreeSet<usize> = img.label.positives().into_iter().collect();
        assert_eq!(in_mask, in_label, "image {i}");
    }
}

#[test]
fn two_shapes_give_three_mask_values_matching_the_placement_log() {
    let spec = SyntheticSpec {
        min_shapes: 2,
        max_shapes: 2,
        ..SyntheticSpec::default()
    };
    for index in 0..50 {
        let (_, mask, log) = generate_synthetic_logged(&spec, index).unwrap();
        let values: BTreeSet<u8> = mask.labels().iter().copied().collect();
        let mut expected: BTreeSet<u8> = log.iter().map(|s| s.class as u8 + 1).collect();
        expected.insert(0);
        assert_eq!(values, expected);
        for shape in &log {
            let count = mask.labels().iter().filter(|&&v| v as usize == shape.class + 1).count();
            assert_eq!(count, shape.area);
        }
    }
}

#[test]
fn masks_survive_png_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for index in 0..10 {
        let (_, mask) = generate_synthetic(&SyntheticSpec::default(), index).unwrap();
        let p = dir.path().join(format!("{index}.png"));
        write_mask(&mask, &p).unwrap();
        assert_eq!(read_mask(&p, 3).unwrap(), mask);
    }
}

#[test]
fn a_short_training_run_feeds_the_pipeline() {
    let spec = SyntheticSpec {
        canvas_size: 16,
        ..SyntheticSpec::default()
    };
    let train_ds = SyntheticDataset::new(spec.clone(), 0, 16).unwrap();
    let eval_ds = SyntheticDataset::new(spec, 16, 4).unwrap();
    let hp = HyperParams {
        batch_size: 4,
        phase_length: 2,
        epochs: 2,
        crop: 16,
        augment: false,
        ..HyperParams::default()
    };
    let cfg = ConvNetConfig {
        channels: vec![4, 6],
        pool_after: vec![true, false],
        ..ConvNetConfig::small(3)
    };
    let st = train(
        &train_ds,
        &hp,
        ConvNet::new(cfg.clone(), 0).unwrap(),
        ConvNet::new(cfg, 1).unwrap(),
        None,
        |_| Ok(()),
    )
    .unwrap();
    assert_eq!(st.history.len(), 8);
    let cm = evaluate_dataset(&st.localizer, &eval_ds, AttentionMethod::GradCam, hp.rho).unwrap();
    assert_eq!(cm.total(), 4 * 16 * 16);
    let img = eval_ds.get(0).unwrap();
    let seg = pseudo_label(&st.localizer, &img, AttentionMethod::Cam, hp.rho).unwrap();
    // only labelled classes can appear
    assert!(seg.labels().iter().all(|&v| v == 0 || img.label.is_set(v as usize - 1)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn augmentation_keeps_label_and_crop_size(index in 0u64..500, crop in 8usize..80, seed in any::<u64>(), flip in any::<bool>()) {
        let (img, _) = generate_synthetic(&SyntheticSpec::default(), index).unwrap();
        let out = augment_train(&img, crop, &mut ChaCha8Rng::seed_from_u64(seed), flip).unwrap();
        prop_assert_eq!(&out.label, &img.label);
        prop_assert_eq!((out.height(), out.width()), (crop, crop));
        prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        let again = augment_train(&img, crop, &mut ChaCha8Rng::seed_from_u64(seed), flip).unwrap();
        prop_assert_eq!(out.pixels(), again.pixels());
    }

    #[test]
    fn maps_masks_and_erasure_stay_in_range(index in 0u64..200, net_seed in 0u64..50, omega in 1.0f64..300.0, psi in 0.0f64..1.0) {
        let spec = SyntheticSpec { canvas_size: 16, ..SyntheticSpec::default() };
        let (img, _) = generate_synthetic(&spec, index).unwrap();
        let cfg = ConvNetConfig { channels: vec![4, 4], pool_after: vec![true, false], ..ConvNetConfig::small(3) };
        let net = ConvNet::new(cfg, net_seed).unwrap();
        for method in [AttentionMethod::Cam, AttentionMethod::GradCam] {
            for map in attention_maps(&net, &img, &img.label.positives(), method).unwrap() {
                prop_assert!(map.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
                let max = map.max();
                prop_assert!(max == 0.0 || (max - 1.0).abs() < 1e-12);
                let up = erasing_core::attention::upsample(&map, img.height(), img.width()).unwrap();
                let mask = soft_threshold(&up, omega, psi).unwrap();
                prop_assert!(mask.values.iter().all(|&m| (0.0..=1.0).contains(&m)));
                let erased = erase(&img, &mask).unwrap();
                for ((c, y, x), &v) in erased.pixels.indexed_iter() {
                    prop_assert!(v <= img.pixels()[[c, y, x]] + 1e-15);
                    prop_assert!(v >= 0.0);
                }
            }
        }
    }
}
