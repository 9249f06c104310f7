//! Browser demo over the core crate: generate a synthetic image, erase its
//! attended region with adjustable soft-threshold settings, and turn the
//! attention into a segmentation with an adjustable background score.
//!
//! [`Session`] holds the state and is plain Rust; [`Demo`] is the
//! `wasm-bindgen` wrapper the page talks to.

use erasing_core::attention::{attention_maps, upsample, AttentionMap, AttentionMethod};
use erasing_core::checkpoint::Checkpoint;
use erasing_core::datasets::{generate_synthetic, LabeledImage, SyntheticSpec};
use erasing_core::nn::{ConvNet, ConvNetConfig};
use erasing_core::segmentation::{segment_with_label, SegmentationMask};
use erasing_core::visualize::{overlay, panels};
use erasing_core::Result;
use wasm_bindgen::prelude::*;

const PALETTE: [[u8; 3]; 6] = [
    [230, 40, 40],
    [40, 210, 60],
    [50, 80, 240],
    [240, 220, 40],
    [220, 40, 220],
    [40, 220, 220],
];

fn rgba(img: &image::RgbImage) -> Vec<u8> {
    img.pixels().flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

pub struct Session {
    spec: SyntheticSpec,
    net: ConvNet,
    image: LabeledImage,
    truth: SegmentationMask,
    maps: Vec<AttentionMap>,
    class_slot: usize,
}

impl Session {
    /// Untrained three-class localizer; its maps are noisy but exercise
    /// every operation until a checkpoint is loaded.
    pub fn new(seed: u64) -> Result<Self> {
        let spec = SyntheticSpec::default();
        let net = ConvNet::new(ConvNetConfig::small(spec.class_count), seed)?;
        let (image, truth) = generate_synthetic(&spec, 0)?;
        let mut s = Self {
            spec,
            net,
            image,
            truth,
            maps: Vec::new(),
            class_slot: 0,
        };
        s.refresh()?;
        Ok(s)
    }

    fn refresh(&mut self) -> Result<()> {
        self.maps = attention_maps(
            &self.net,
            &self.image,
            &self.image.label.positives(),
            AttentionMethod::GradCam,
        )?;
        self.class_slot = self.class_slot.min(self.maps.len().saturating_sub(1));
        Ok(())
    }

    /// Swap in a trained localizer; the synthetic spec follows its class count.
    pub fn load_checkpoint(&mut self, json: &str) -> Result<()> {
        let ck: Checkpoint = serde_json::from_str(json)?;
        ck.localizer.config.validate()?;
        self.spec.class_count = ck.localizer.config.classes;
        self.spec.max_shapes = self.spec.max_shapes.min(self.spec.class_count);
        self.net = ck.localizer;
        self.generate(0)
    }

    pub fn generate(&mut self, index: u64) -> Result<()> {
        let (image, truth) = generate_synthetic(&self.spec, index)?;
        self.image = image;
        self.truth = truth;
        self.class_slot = 0;
        self.refresh()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.image.label.positives()
    }

    /// Which positive class the erase view shows; wraps around.
    pub fn select_class(&mut self, slot: usize) -> usize {
        self.class_slot = slot % self.maps.len().max(1);
        self.maps[self.class_slot].class_id
    }

    pub fn image_rgba(&self) -> Vec<u8> {
        rgba(&self.image.to_rgb8())
    }

    pub fn truth_rgba(&self) -> Vec<u8> {
        mask_rgba(&self.truth)
    }

    /// Overlay, soft mask and erased image side by side (`3W x H`).
    pub fn erase_rgba(&self, omega: f64, psi: f64) -> Result<Vec<u8>> {
        let map = &self.maps[self.class_slot];
        let [_, over, mask, erased] = panels(&self.image, map, omega, psi)?;
        let (w, h) = (self.width(), self.height());
        let mut out = Vec::with_capacity(3 * w * h * 4);
        for y in 0..h as u32 {
            for panel in [&over, &mask, &erased] {
                for x in 0..w as u32 {
                    let p = panel.get_pixel(x, y);
                    out.extend_from_slice(&[p[0], p[1], p[2], 255]);
                }
            }
        }
        Ok(out)
    }

    pub fn attention_rgba(&self) -> Result<Vec<u8>> {
        let up = upsample(&self.maps[self.class_slot], self.height(), self.width())?;
        Ok(rgba(&overlay(&self.image, &up)))
    }

    pub fn segment(&self, rho: f64) -> Result<SegmentationMask> {
        segment_with_label(&self.maps, &self.image.label, self.height(), self.width(), rho)
    }

    pub fn segment_rgba(&self, rho: f64) -> Result<Vec<u8>> {
        Ok(mask_rgba(&self.segment(rho)?))
    }
}

/// Background black, class `c` in the palette colour of `c`.
pub fn mask_rgba(mask: &SegmentationMask) -> Vec<u8> {
    mask.labels()
        .iter()
        .flat_map(|&v| match v {
            0 => [0, 0, 0, 255],
            255 => [255, 255, 255, 255],
            c => {
                let [r, g, b] = PALETTE[(c as usize - 1) % PALETTE.len()];
                [r, g, b, 255]
            }
        })
        .collect()
}

fn js(e: erasing_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    inner: Session,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, JsError> {
        Ok(Demo {
            inner: Session::new(seed as u64).map_err(js)?,
        })
    }

    #[wasm_bindgen(js_name = loadCheckpoint)]
    pub fn load_checkpoint(&mut self, json: &str) -> Result<(), JsError> {
        self.inner.load_checkpoint(json).map_err(js)
    }

    pub fn generate(&mut self, index: u32) -> Result<(), JsError> {
        self.inner.generate(index as u64).map_err(js)
    }

    pub fn width(&self) -> u32 {
        self.inner.width() as u32
    }

    pub fn height(&self) -> u32 {
        self.inner.height() as u32
    }

    pub fn classes(&self) -> Vec<u32> {
        self.inner.classes().into_iter().map(|c| c as u32).collect()
    }

    #[wasm_bindgen(js_name = selectClass)]
    pub fn select_class(&mut self, slot: u32) -> u32 {
        self.inner.select_class(slot as usize) as u32
    }

    #[wasm_bindgen(js_name = imageRgba)]
    pub fn image_rgba(&self) -> Vec<u8> {
        self.inner.image_rgba()
    }

    #[wasm_bindgen(js_name = truthRgba)]
    pub fn truth_rgba(&self) -> Vec<u8> {
        self.inner.truth_rgba()
    }

    #[wasm_bindgen(js_name = eraseRgba)]
    pub fn erase_rgba(&self, omega: f64, psi: f64) -> Result<Vec<u8>, JsError> {
        self.inner.erase_rgba(omega, psi).map_err(js)
    }

    #[wasm_bindgen(js_name = segmentRgba)]
    pub fn segment_rgba(&self, rho: f64) -> Result<Vec<u8>, JsError> {
        self.inner.segment_rgba(rho).map_err(js)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffers_have_canvas_sizes() {
        let mut s = Session::new(3).unwrap();
        s.generate(5).unwrap();
        let (w, h) = (s.width(), s.height());
        assert_eq!(s.image_rgba().len(), w * h * 4);
        assert_eq!(s.truth_rgba().len(), w * h * 4);
        assert_eq!(s.erase_rgba(100.0, 0.5).unwrap().len(), 3 * w * h * 4);
        assert_eq!(s.attention_rgba().unwrap().len(), w * h * 4);
        assert_eq!(s.segment_rgba(0.3).unwrap().len(), w * h * 4);
    }

    #[test]
    fn erase_rejects_bad_omega() {
        let s = Session::new(1).unwrap();
        assert!(s.erase_rgba(0.0, 0.5).is_err());
    }

    #[test]
    fn higher_rho_never_grows_foreground() {
        let s = Session::new(2).unwrap();
        let fg = |rho| s.segment(rho).unwrap().labels().iter().filter(|&&v| v != 0).count();
        assert!(fg(0.2) >= fg(0.5));
        assert!(fg(0.5) >= fg(0.9));
    }

    #[test]
    fn class_selection_wraps() {
        let mut s = Session::new(0).unwrap();
        let n = s.classes().len();
        assert_eq!(s.select_class(n), s.classes()[0]);
    }

    #[test]
    fn checkpoint_round_trip_through_json() {
        let mut s = Session::new(0).unwrap();
        let net = ConvNet::new(ConvNetConfig::small(4), 9).unwrap();
        let hp = erasing_core::training::HyperParams::default();
        let st = erasing_core::training::TrainState::new(net.clone(), net, hp).unwrap();
        let names = (0..4).map(|c| format!("c{c}")).collect();
        let json = serde_json::to_string(&Checkpoint::from_state(&st, names)).unwrap();
        s.load_checkpoint(&json).unwrap();
        assert!(s.classes().iter().all(|&c| c < 4));
        assert!(s.load_checkpoint("{}").is_err());
    }
}
