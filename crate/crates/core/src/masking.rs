//! Soft thresholding of attention into masks, and image erasing.

use ndarray::{Array2, Array3, Axis};

use crate::attention::{upsample, AttentionMap};
use crate::datasets::{LabeledImage, MultiHotLabel};
use crate::error::{Error, Result};
use crate::graph::sigmoid;

pub const DEFAULT_OMEGA: f64 = 100.0;
pub const DEFAULT_PSI: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask {
    pub class_id: usize,
    pub values: Array2<f64>,
    pub omega: f64,
    pub psi: f64,
}

/// An image with one class's attended region removed.
#[derive(Clone, Debug, PartialEq)]
pub struct ErasedExample {
    pub pixels: Array3<f64>,
    pub erased_class: usize,
    pub source_label: MultiHotLabel,
    pub source_id: String,
}

pub(crate) fn check_omega(omega: f64) -> Result<()> {
    if omega > 0.0 && omega.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("omega must be positive and finite, got {omega}")))
    }
}

/// Pointwise `sigmoid(omega * (a - psi))`.
pub fn soft_threshold(map: &AttentionMap, omega: f64, psi: f64) -> Result<SoftMask> {
    check_omega(omega)?;
    Ok(SoftMask {
        class_id: map.class_id,
        values: map.values.mapv(|a| sigmoid(omega * (a - psi))),
        omega,
        psi,
    })
}

/// `x * (1 - mask)` on every channel.
pub fn erase(img: &LabeledImage, mask: &SoftMask) -> Result<ErasedExample> {
    if mask.values.dim() != (img.height(), img.width()) {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} vs image {}x{}",
            mask.values.dim(),
            img.height(),
            img.width()
        )));
    }
    if !img.label.is_set(mask.class_id) {
        return Err(Error::invalid(format!(
            "class {} is not a positive label of `{}`",
            mask.class_id, img.id
        )));
    }
    let keep = mask.values.mapv(|m| 1.0 - m);
    let mut pixels = img.pixels().clone();
    for mut channel in pixels.axis_iter_mut(Axis(0)) {
        channel *= &keep;
    }
    Ok(ErasedExample {
        pixels,
        erased_class: mask.class_id,
        source_label: img.label.clone(),
        source_id: img.id.clone(),
    })
}

/// One erased copy of `img` per positive class. `maps` may be at feature
/// resolution; they are resized to the image first.
pub fn erase_all_classes(
    img: &LabeledImage,
    maps: &[AttentionMap],
    omega: f64,
    psi: f64,
) -> Result<Vec<ErasedExample>> {
    img.label
        .positives()
        .into_iter()
        .map(|c| {
            let map = maps
                .iter()
                .find(|m| m.class_id == c)
                .ok_or_else(|| Error::invalid(format!("no attention map for positive class {c}")))?;
            let up = upsample(map, img.height(), img.width())?;
            erase(img, &soft_threshold(&up, omega, psi)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::arr2;
    use proptest::prelude::*;

    fn one(v: f64) -> AttentionMap {
        AttentionMap {
            class_id: 0,
            values: arr2(&[[v]]),
        }
    }

    fn flat_image(v: f64, h: usize, w: usize, classes: &[usize]) -> LabeledImage {
        LabeledImage::new(
            "img",
            Array3::from_elem((3, h, w), v),
            MultiHotLabel::from_classes(4, classes).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn threshold_values() {
        assert_eq!(soft_threshold(&one(0.5), 100.0, 0.5).unwrap().values[[0, 0]], 0.5);
        let hi = soft_threshold(&one(0.6), 100.0, 0.5).unwrap().values[[0, 0]];
        assert_relative_eq!(hi, 1.0 / (1.0 + (-10.0f64).exp()), max_relative = 1e-12);
        assert!((hi - 0.9999546).abs() < 1e-7);
        let lo = soft_threshold(&one(0.0), 100.0, 0.5).unwrap().values[[0, 0]];
        assert_relative_eq!(lo, 1.0 / (1.0 + 50f64.exp()), max_relative = 1e-12);
        assert!((lo - 1.93e-22).abs() < 0.01e-22);
        assert!(soft_threshold(&one(0.3), 0.0, 0.5).is_err());
        assert!(soft_threshold(&one(0.3), -1.0, 0.5).is_err());
    }

    #[test]
    fn erase_examples() {
        let img = flat_image(0.8, 1, 1, &[0]);
        for (m, expect) in [(1.0, 0.0), (0.0, 0.8), (0.5, 0.4)] {
            let mask = SoftMask {
                class_id: 0,
                values: arr2(&[[m]]),
                omega: 100.0,
                psi: 0.5,
            };
            let e = erase(&img, &mask).unwrap();
            assert!(e.pixels.iter().all(|&v| (v - expect).abs() < 1e-15));
        }
    }

    #[test]
    fn erase_errors() {
        let img = flat_image(0.8, 2, 2, &[0]);
        let wrong_dims = SoftMask {
            class_id: 0,
            values: Array2::zeros((3, 2)),
            omega: 1.0,
            psi: 0.5,
        };
        assert!(erase(&img, &wrong_dims).is_err());
        let wrong_class = SoftMask {
            class_id: 2,
            values: Array2::zeros((2, 2)),
            omega: 1.0,
            psi: 0.5,
        };
        assert!(erase(&img, &wrong_class).is_err());
    }

    #[test]
    fn one_erased_copy_per_positive_class() {
        let img = flat_image(0.6, 4, 4, &[1, 3]);
        let maps = vec![AttentionMap::zeros(1, 2, 2), AttentionMap::zeros(3, 2, 2)];
        let out = erase_all_classes(&img, &maps, 100.0, 0.5).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].erased_class, 1);
        assert_eq!(out[1].erased_class, 3);
        let keep = 1.0 - 1.0 / (1.0 + 50f64.exp());
        for e in &out {
            for (a, b) in e.pixels.iter().zip(img.pixels().iter()) {
                assert!((a - b * keep).abs() < 1e-20 && (a - b).abs() < 1e-20);
            }
        }
        let single = flat_image(0.6, 4, 4, &[2]);
        let maps = vec![AttentionMap::zeros(2, 2, 2)];
        assert_eq!(erase_all_classes(&single, &maps, 100.0, 0.5).unwrap().len(), 1);
        assert!(erase_all_classes(&img, &maps, 100.0, 0.5).is_err());
    }

    #[test]
    fn hard_limit_matches_indicator() {
        let vals: Vec<f64> = (0..=1000).map(|i| i as f64 / 1000.0).collect();
        let map = AttentionMap {
            class_id: 0,
            values: Array2::from_shape_vec((1, vals.len()), vals.clone()).unwrap(),
        };
        let m = soft_threshold(&map, 1e6, 0.5).unwrap();
        for (&a, &v) in vals.iter().zip(m.values.iter()) {
            if (a - 0.5).abs() < 1e-5 {
                continue;
            }
            let hard = if a > 0.5 { 1.0 } else { 0.0 };
            assert!((v - hard).abs() < 1e-3, "a={a} mask={v}");
        }
    }

    proptest! {
        #[test]
        fn masks_in_open_unit_interval_and_monotone(
            a in 0.0f64..1.0, b in 0.0f64..1.0, omega in 0.1f64..30.0, psi in 0.0f64..1.0,
        ) {
            let ma = soft_threshold(&one(a), omega, psi).unwrap().values[[0, 0]];
            let mb = soft_threshold(&one(b), omega, psi).unwrap().values[[0, 0]];
            prop_assert!(ma > 0.0 && ma < 1.0);
            if a >= b { prop_assert!(ma >= mb); }
        }

        #[test]
        fn erasing_never_brightens(
            px in 0.0f64..1.0, a in 0.0f64..1.0, bump in 0.0f64..0.5,
        ) {
            let img = flat_image(px, 1, 1, &[0]);
            let lo = erase(&img, &soft_threshold(&one(a), 100.0, 0.5).unwrap()).unwrap();
            let hi = erase(&img, &soft_threshold(&one(a + bump), 100.0, 0.5).unwrap()).unwrap();
            prop_assert!(lo.pixels[[0, 0, 0]] <= px);
            prop_assert!(hi.pixels[[0, 0, 0]] <= lo.pixels[[0, 0, 0]]);
        }
    }
}
