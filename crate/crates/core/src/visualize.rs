//! Side-by-side panels: input, attention overlay, soft mask, erased image.

use image::{GenericImage, Rgb, RgbImage};

use crate::attention::{attention_maps, upsample, AttentionMap, AttentionMethod};
use crate::datasets::LabeledImage;
use crate::error::Result;
use crate::masking::{erase, soft_threshold};
use crate::nn::Classifier;

/// Blue-to-red ramp for values in `[0, 1]`.
pub fn heat_color(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
    [r, g, b]
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Half-and-half blend of the image with the colour-mapped attention, which
/// must already be at image resolution.
pub fn overlay(img: &LabeledImage, map: &AttentionMap) -> RgbImage {
    let px = img.pixels();
    RgbImage::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let heat = heat_color(map.values[[y, x]]);
        Rgb(std::array::from_fn(|c| to_u8(0.5 * px[[c, y, x]] + 0.5 * heat[c])))
    })
}

/// The four panels for one class, each `H x W`.
pub fn panels(img: &LabeledImage, map: &AttentionMap, omega: f64, psi: f64) -> Result<[RgbImage; 4]> {
    let up = upsample(map, img.height(), img.width())?;
    let mask = soft_threshold(&up, omega, psi)?;
    let erased = erase(img, &mask)?;
    let (w, h) = (img.width() as u32, img.height() as u32);
    let mask_panel = RgbImage::from_fn(w, h, |x, y| {
        let v = to_u8(mask.values[[y as usize, x as usize]]);
        Rgb([v, v, v])
    });
    let erased_panel = RgbImage::from_fn(w, h, |x, y| {
        Rgb(std::array::from_fn(|c| to_u8(erased.pixels[[c, y as usize, x as usize]])))
    });
    Ok([img.to_rgb8(), overlay(img, &up), mask_panel, erased_panel])
}

/// One row of four panels per positive class.
pub fn panel_sheet<C: Classifier + ?Sized>(
    localizer: &C,
    img: &LabeledImage,
    method: AttentionMethod,
    omega: f64,
    psi: f64,
) -> Result<RgbImage> {
    let classes = img.label.positives();
    let maps = attention_maps(localizer, img, &classes, method)?;
    let (w, h) = (img.width() as u32, img.height() as u32);
    let mut sheet = RgbImage::new(4 * w, h * classes.len() as u32);
    for (row, map) in maps.iter().enumerate() {
        for (col, panel) in panels(img, map, omega, psi)?.iter().enumerate() {
            sheet
                .copy_from(panel, col as u32 * w, row as u32 * h)
                .expect("panel fits in sheet");
        }
    }
    Ok(sheet)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic, SyntheticSpec};
    use ndarray::Array2;

    #[test]
    fn erased_panel_matches_recomputed_erasure() {
        let (img, _) = generate_synthetic(&SyntheticSpec::default(), 4).unwrap();
        let c = img.label.positives()[0];
        let values = Array2::from_shape_fn((8, 8), |(y, x)| ((y * 8 + x) as f64 / 63.0).powi(2));
        let map = AttentionMap { class_id: c, values };
        let [input, over, _, erased] = panels(&img, &map, 10.0, 0.5).unwrap();
        assert_eq!(over.dimensions(), input.dimensions());
        let up = upsample(&map, img.height(), img.width()).unwrap();
        let px = img.pixels();
        for (x, y, e) in erased.enumerate_pixels() {
            let (x, y) = (x as usize, y as usize);
            let m = 1.0 / (1.0 + (-10.0 * (up.values[[y, x]] - 0.5)).exp());
            for c in 0..3 {
                let expect = px[[c, y, x]] * (1.0 - m);
                assert!((e[c] as f64 / 255.0 - expect).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }
}
