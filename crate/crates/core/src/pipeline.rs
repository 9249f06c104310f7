//! Pseudo-label generation and dataset-level evaluation.

use crate::attention::{attention_maps, AttentionMethod};
use crate::datasets::{Dataset, LabeledImage};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::nn::{predict, Classifier};
use crate::segmentation::{segment_with_label, SegmentationMask};

/// Segmentation from the maps of the image's labelled classes.
pub fn pseudo_label<C: Classifier + ?Sized>(
    localizer: &C,
    img: &LabeledImage,
    method: AttentionMethod,
    rho: f64,
) -> Result<SegmentationMask> {
    let maps = attention_maps(localizer, img, &img.label.positives(), method)?;
    segment_with_label(&maps, &img.label, img.height(), img.width(), rho)
}

/// Segmentation without image labels: classes whose predicted score reaches
/// `score_threshold` contribute maps.
pub fn predict_segmentation<C: Classifier + ?Sized>(
    localizer: &C,
    img: &LabeledImage,
    method: AttentionMethod,
    rho: f64,
    score_threshold: f64,
) -> Result<SegmentationMask> {
    let t = img.to_tensor();
    let shape = [1, t.shape()[0], t.shape()[1], t.shape()[2]];
    let scores = predict(localizer, t.reshaped(&shape));
    let present: Vec<usize> = scores
        .data()
        .iter()
        .enumerate()
        .filter_map(|(c, &s)| (s >= score_threshold).then_some(c))
        .collect();
    let maps = attention_maps(localizer, img, &present, method)?;
    let bits: Vec<bool> = (0..localizer.class_count()).map(|c| present.contains(&c)).collect();
    if present.is_empty() {
        let labels = ndarray::Array2::zeros((img.height(), img.width()));
        return SegmentationMask::new(labels, localizer.class_count());
    }
    let gate = crate::datasets::MultiHotLabel::new(bits)?;
    segment_with_label(&maps, &gate, img.height(), img.width(), rho)
}

/// Confusion matrix of pseudo-labels against ground truth over a dataset.
pub fn evaluate_dataset<C: Classifier + ?Sized>(
    localizer: &C,
    dataset: &dyn Dataset,
    method: AttentionMethod,
    rho: f64,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(dataset.class_count());
    for i in 0..dataset.len() {
        let img = dataset.get(i)?;
        let gt = dataset
            .ground_truth(i)?
            .ok_or_else(|| Error::invalid(format!("no ground truth for `{}`", img.id)))?;
        let pred = pseudo_label(localizer, &img, method, rho)?;
        cm.accumulate(&pred, &gt)?;
    }
    Ok(cm)
}
