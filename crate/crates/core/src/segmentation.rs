//! Attention maps to dense label maps, and the 8-bit mask raster format.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use ndarray::Array2;

use crate::attention::{upsample, AttentionMap};
use crate::datasets::MultiHotLabel;
use crate::error::{Error, Result};

pub const IGNORE: u8 = 255;

/// Per-pixel labels: 0 is background, `c + 1` is class `c`, 255 is ignored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationMask {
    labels: Array2<u8>,
    class_count: usize,
}

impl SegmentationMask {
    pub fn new(labels: Array2<u8>, class_count: usize) -> Result<Self> {
        if class_count > 254 {
            return Err(Error::invalid("at most 254 foreground classes fit in 8 bits"));
        }
        if let Some(v) = labels
            .iter()
            .find(|&&v| v != IGNORE && v as usize > class_count)
        {
            return Err(Error::invalid(format!(
                "mask value {v} exceeds class count {class_count}"
            )));
        }
        Ok(Self {
            labels,
            class_count,
        })
    }

    pub fn labels(&self) -> &Array2<u8> {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn height(&self) -> usize {
        self.labels.dim().0
    }

    pub fn width(&self) -> usize {
        self.labels.dim().1
    }
}

/// Stack a constant `rho` background channel in front of the class maps and
/// take the per-pixel argmax. `maps[c]` is class `c`; ties go to the lower
/// channel, so background wins any tie.
pub fn attention_to_segmentation(maps: &[AttentionMap], rho: f64) -> Result<SegmentationMask> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::invalid(format!("rho must lie in (0, 1), got {rho}")));
    }
    let first = maps
        .first()
        .ok_or_else(|| Error::invalid("need at least one attention map"))?;
    let dim = first.values.dim();
    if maps.iter().any(|m| m.values.dim() != dim) {
        return Err(Error::ShapeMismatch("attention maps differ in size".into()));
    }
    let labels = Array2::from_shape_fn(dim, |(y, x)| {
        let mut best = rho;
        let mut label = 0u8;
        for (c, m) in maps.iter().enumerate() {
            let v = m.values[[y, x]];
            if v > best {
                best = v;
                label = (c + 1) as u8;
            }
        }
        label
    });
    SegmentationMask::new(labels, maps.len())
}

/// Label-aware conversion: maps of classes absent from `label` are zeroed,
/// the rest are resized to `height x width` before stacking.
pub fn segment_with_label(
    maps: &[AttentionMap],
    label: &MultiHotLabel,
    height: usize,
    width: usize,
    rho: f64,
) -> Result<SegmentationMask> {
    let full: Vec<AttentionMap> = (0..label.class_count())
        .map(|c| match maps.iter().find(|m| m.class_id == c) {
            Some(m) if label.is_set(c) => upsample(m, height, width),
            _ => Ok(AttentionMap::zeros(c, height, width)),
        })
        .collect::<Result<_>>()?;
    attention_to_segmentation(&full, rho)
}

/// Write a mask as an 8-bit single-channel PNG.
pub fn write_mask(mask: &SegmentationMask, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = mask.labels.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([mask.labels[[y as usize, x as usize]]])
    });
    img.save_with_format(path.as_ref(), image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_mask(path: impl AsRef<Path>, class_count: usize) -> Result<SegmentationMask> {
    let img = image::open(path.as_ref())?.to_luma8();
    let (w, h) = img.dimensions();
    let labels = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0]
    });
    SegmentationMask::new(labels, class_count)
}

pub fn export_mask(mask: &SegmentationMask, path: impl AsRef<Path>) -> Result<()> {
    write_mask(mask, path)
}

/// `<id> <path>` lines, paths relative to the manifest's directory.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[(String, PathBuf)]) -> Result<()> {
    let path = path.as_ref();
    let text: String = entries
        .iter()
        .map(|(id, p)| format!("{id} {}\n", p.display()))
        .collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Entries of a manifest with paths resolved against its directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<(String, PathBuf)>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let (id, p) = l.trim().split_once(' ').ok_or_else(|| Error::Parse {
                what: "manifest",
                line: i + 1,
                reason: "expected `<id> <path>`".into(),
            })?;
            Ok((id.to_string(), base.join(p.trim())))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn map(class_id: usize, v: Vec<Vec<f64>>) -> AttentionMap {
        let h = v.len();
        let w = v[0].len();
        AttentionMap {
            class_id,
            values: Array2::from_shape_vec((h, w), v.concat()).unwrap(),
        }
    }

    #[test]
    fn dominant_class_above_rho_wins() {
        let maps: Vec<_> = (0..5)
            .map(|c| map(c, vec![vec![if c == 2 { 0.8 } else { 0.0 }]]))
            .collect();
        let seg = attention_to_segmentation(&maps, 0.3).unwrap();
        assert_eq!(seg.labels()[[0, 0]], 3);
    }

    #[test]
    fn weak_attention_is_background() {
        let maps: Vec<_> = (0..4).map(|c| map(c, vec![vec![0.2]])).collect();
        assert_eq!(attention_to_segmentation(&maps, 0.3).unwrap().labels()[[0, 0]], 0);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let maps = vec![map(0, vec![vec![0.1]]), map(1, vec![vec![0.9]]), map(2, vec![vec![0.9]])];
        assert_eq!(attention_to_segmentation(&maps, 0.3).unwrap().labels()[[0, 0]], 2);
        let at_rho = vec![map(0, vec![vec![0.3]])];
        assert_eq!(attention_to_segmentation(&at_rho, 0.3).unwrap().labels()[[0, 0]], 0);
    }

    #[test]
    fn rho_bounds_are_enforced() {
        let maps = vec![map(0, vec![vec![0.5]])];
        assert!(attention_to_segmentation(&maps, 0.0).is_err());
        assert!(attention_to_segmentation(&maps, 1.0).is_err());
    }

    #[test]
    fn absent_classes_are_zeroed_with_label() {
        let maps = vec![map(0, vec![vec![0.9, 0.9]]), map(1, vec![vec![1.0, 0.2]])];
        let label = MultiHotLabel::from_classes(2, &[0]).unwrap();
        let seg = segment_with_label(&maps, &label, 1, 2, 0.3).unwrap();
        assert_eq!(seg.labels(), &arr2(&[[1, 1]]));
    }

    #[test]
    fn mask_file_round_trip_keeps_ignore() {
        let dir = tempfile::tempdir().unwrap();
        let labels = arr2(&[[0u8, 1, 2], [255, 3, 0]]);
        let mask = SegmentationMask::new(labels, 3).unwrap();
        let p = dir.path().join("m.png");
        export_mask(&mask, &p).unwrap();
        assert_eq!(read_mask(&p, 3).unwrap(), mask);

        let bg = SegmentationMask::new(Array2::zeros((4, 4)), 3).unwrap();
        export_mask(&bg, &p).unwrap();
        assert!(image::open(&p).unwrap().to_luma8().iter().all(|&v| v == 0));
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let mask = SegmentationMask::new(Array2::zeros((2, 2)), 1).unwrap();
        assert!(export_mask(&mask, "/nonexistent-dir/x/m.png").is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.txt");
        write_manifest(&p, &[("a".into(), PathBuf::from("masks/a.png"))]).unwrap();
        let back = read_manifest(&p).unwrap();
        assert_eq!(back, vec![("a".to_string(), dir.path().join("masks/a.png"))]);
    }
}
