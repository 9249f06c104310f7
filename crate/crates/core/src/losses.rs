//! Classification, attention-mining, area-regularization and total losses.
//!
//! Each loss exists twice: a value-level function over domain types, and a
//! graph builder used by the training engine. Both reduce the same way:
//! mean over images, and for the adversarial terms mean over erased copies.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMap;
use crate::datasets::{LabeledImage, MultiHotLabel};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::masking::ErasedExample;
use crate::nn::{forward, predict, Classifier};
use crate::tensor::Tensor;

/// Scores are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside every BCE.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("beta", beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(Self { alpha, beta })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loc: f64,
    pub adv: f64,
    pub am: f64,
    pub reg: f64,
    pub total: f64,
}

/// How erased copies are scored by the adversarial classifier.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversarialTarget {
    /// Every erased copy is scored against the full multi-hot label.
    #[default]
    Full,
    /// Only the erased class's own term counts for each copy.
    ErasedClass,
}

/// Which adversarial output the attention-mining loss averages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MiningScore {
    #[default]
    Sigmoid,
    Logit,
}

macro_rules! parse_enum {
    ($ty:ty, $($s:literal => $v:expr),+ $(,)?) => {
        impl std::str::FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    other => Err(Error::invalid(format!(
                        concat!("unknown ", stringify!($ty), " `{}`"), other
                    ))),
                }
            }
        }
    };
}

parse_enum!(AdversarialTarget, "full" => AdversarialTarget::Full, "erased-class" => AdversarialTarget::ErasedClass);
parse_enum!(MiningScore, "sigmoid" => MiningScore::Sigmoid, "logit" => MiningScore::Logit);

impl std::fmt::Display for AdversarialTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::ErasedClass => "erased-class",
        })
    }
}

impl std::fmt::Display for MiningScore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sigmoid => "sigmoid",
            Self::Logit => "logit",
        })
    }
}

/// Mean binary cross entropy over the `C` classes of one image.
pub fn bce_multilabel(scores: &[f64], label: &MultiHotLabel) -> Result<f64> {
    if scores.len() != label.class_count() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores for {} classes",
            scores.len(),
            label.class_count()
        )));
    }
    let total: f64 = scores
        .iter()
        .zip(label.bits())
        .map(|(&s, &y)| {
            let s = s.clamp(BCE_EPS, 1.0 - BCE_EPS);
            if y {
                s.ln()
            } else {
                (1.0 - s).ln()
            }
        })
        .sum();
    Ok(-total / scores.len() as f64)
}

pub fn total_localizer_loss(loc: f64, am: f64, reg: f64, w: LossWeights) -> LossBreakdown {
    LossBreakdown {
        loc,
        adv: 0.0,
        am,
        reg,
        total: loc + w.alpha * am + w.beta * reg,
    }
}

/// `(1 / (h w C))` times the summed attention of each image's positive
/// classes, averaged over images.
pub fn regularization_loss(maps: &[AttentionMap], class_count: usize) -> f64 {
    maps.iter()
        .map(|m| m.values.sum() / (m.values.len() as f64 * class_count as f64))
        .sum()
}

pub(crate) fn stack_images(images: impl Iterator<Item = Tensor>) -> Tensor {
    let items: Vec<Tensor> = images.collect();
    Tensor::stack(&items)
}

pub(crate) fn erased_batch(erased: &[ErasedExample]) -> Tensor {
    stack_images(erased.iter().map(|e| {
        let (c, h, w) = e.pixels.dim();
        Tensor::from_vec(&[c, h, w], e.pixels.iter().copied().collect())
    }))
}

/// Mean of per-image BCE of the classifier's scores on `batch`.
pub fn localizer_classification_loss<C: Classifier + ?Sized>(handle: &C, batch: &[LabeledImage]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let scores = predict(handle, stack_images(batch.iter().map(LabeledImage::to_tensor)));
    let c = handle.class_count();
    let mut total = 0.0;
    for (img, row) in batch.iter().zip(scores.data().chunks(c)) {
        total += bce_multilabel(row, &img.label)?;
    }
    Ok(total / batch.len() as f64)
}

/// Adversarial classification loss over erased copies.
pub fn adversarial_classification_loss<C: Classifier + ?Sized>(
    handle: &C,
    erased: &[ErasedExample],
    target: AdversarialTarget,
) -> Result<f64> {
    if erased.is_empty() {
        return Err(Error::invalid("no erased examples"));
    }
    let scores = predict(handle, erased_batch(erased));
    let mut g = Graph::new();
    let s = g.constant(scores);
    let labels: Vec<&MultiHotLabel> = erased.iter().map(|e| &e.source_label).collect();
    let classes: Vec<usize> = erased.iter().map(|e| e.erased_class).collect();
    let loss = adversarial_loss_graph(&mut g, s, &labels, &classes, target);
    Ok(g.value(loss).item())
}

/// Attention-mining loss of one image: `(1/C) * sum` of the adversarial
/// score of each erased class on its own erased copy.
pub fn attention_mining_loss<C: Classifier + ?Sized>(
    handle: &C,
    erased: &[ErasedExample],
    class_count: usize,
) -> Result<f64> {
    if erased.is_empty() {
        return Ok(0.0);
    }
    let mut seen = HashSet::new();
    for e in erased {
        if !seen.insert(e.erased_class) {
            return Err(Error::invalid(format!("class {} erased twice", e.erased_class)));
        }
    }
    let scores = predict(handle, erased_batch(erased));
    let c = handle.class_count();
    let total: f64 = erased
        .iter()
        .enumerate()
        .map(|(m, e)| scores.data()[m * c + e.erased_class])
        .sum();
    Ok(total / class_count as f64)
}

/// Mean multi-label BCE of `scores (N, C)` against `targets`, row-major.
pub fn bce_graph(g: &mut Graph, scores: Var, targets: &[f64]) -> Var {
    let n = targets.len();
    g.bce(scores, targets, &vec![1.0; n], n as f64, BCE_EPS)
}

/// Adversarial loss over erased-copy scores `(M, C)`; `labels[m]` is the
/// source label of copy `m` and `classes[m]` its erased class.
pub fn adversarial_loss_graph(
    g: &mut Graph,
    scores: Var,
    labels: &[&MultiHotLabel],
    classes: &[usize],
    target: AdversarialTarget,
) -> Var {
    let (m, c) = g.value(scores).dims2();
    let mut targets = Vec::with_capacity(m * c);
    let mut weights = Vec::with_capacity(m * c);
    for (label, &erased) in labels.iter().zip(classes) {
        targets.extend(label.as_targets());
        weights.extend((0..c).map(|k| match target {
            AdversarialTarget::Full => 1.0,
            AdversarialTarget::ErasedClass => (k == erased) as u8 as f64,
        }));
    }
    g.bce(scores, &targets, &weights, (m * c) as f64, BCE_EPS)
}

/// Attention-mining loss averaged over `images` source images.
pub fn attention_mining_graph(
    g: &mut Graph,
    outputs: Var,
    classes: &[usize],
    class_count: usize,
    images: usize,
) -> Var {
    let idx: Vec<(usize, usize)> = classes.iter().copied().enumerate().collect();
    g.gather_sum(outputs, &idx, 1.0 / (class_count as f64 * images as f64))
}

/// Area regularizer over normalized maps `(M, 1, h, w)`, averaged over images.
pub fn regularization_graph(g: &mut Graph, maps: Var, class_count: usize, images: usize) -> Var {
    let (_, _, h, w) = g.value(maps).dims4();
    g.sum_scaled(maps, 1.0 / ((h * w * class_count) as f64 * images as f64))
}

/// `loc + alpha * am + beta * reg` as a graph node.
pub fn total_graph(g: &mut Graph, loc: Var, am: Var, reg: Var, w: LossWeights) -> Var {
    let a = g.scale(am, w.alpha);
    let b = g.scale(reg, w.beta);
    let s = g.add(loc, a);
    g.add(s, b)
}

/// Scores of the localizer on a batch, as a differentiable forward pass.
pub fn classification_graph<C: Classifier + ?Sized>(
    g: &mut Graph,
    handle: &C,
    batch: Var,
    labels: &[&MultiHotLabel],
    trainable: bool,
) -> (crate::nn::Forward, Var) {
    let fwd = forward(handle, g, batch, trainable);
    let targets: Vec<f64> = labels.iter().flat_map(|l| l.as_targets()).collect();
    let loss = bce_graph(g, fwd.scores, &targets);
    (fwd, loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ConvNet, ConvNetConfig};
    use approx::assert_abs_diff_eq;
    use ndarray::{Array2, Array3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn label(c: usize, pos: &[usize]) -> MultiHotLabel {
        MultiHotLabel::from_classes(c, pos).unwrap()
    }

    #[test]
    fn bce_examples() {
        let y = label(2, &[0]);
        assert!(bce_multilabel(&[1.0 - BCE_EPS, BCE_EPS], &y).unwrap() < 1e-6);
        assert_abs_diff_eq!(bce_multilabel(&[0.5, 0.5], &y).unwrap(), 0.693147, epsilon = 1e-6);
        let y4 = label(4, &[0, 1]);
        assert_abs_diff_eq!(
            bce_multilabel(&[0.5; 4], &y4).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-12
        );
        assert!(bce_multilabel(&[0.5; 3], &y4).is_err());
        assert!(bce_multilabel(&[0.0, 1.0], &y).unwrap().is_finite());
    }

    #[test]
    fn regularization_examples() {
        let ones = AttentionMap {
            class_id: 0,
            values: Array2::ones((2, 2)),
        };
        assert_abs_diff_eq!(regularization_loss(&[ones.clone()], 20), 0.05, epsilon = 1e-15);
        let mut second = ones.clone();
        second.class_id = 1;
        assert_abs_diff_eq!(regularization_loss(&[ones, second], 20), 0.1, epsilon = 1e-15);
        assert_eq!(regularization_loss(&[AttentionMap::zeros(0, 2, 2)], 20), 0.0);
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::new(0.0, 0.0).unwrap();
        assert_eq!(total_localizer_loss(0.7, 0.3, 0.2, w).total, 0.7);
        let w = LossWeights::new(0.05, 1e-5).unwrap();
        assert_abs_diff_eq!(total_localizer_loss(1.0, 0.4, 0.1, w).total, 1.020001, epsilon = 1e-12);
        assert_eq!(total_localizer_loss(0.0, 0.0, 0.0, w).total, 0.0);
        assert!(LossWeights::new(-1.0, 0.0).is_err());
        assert!(LossWeights::new(0.0, f64::NAN).is_err());
    }

    #[test]
    fn mining_graph_examples() {
        let mut g = Graph::new();
        let mut scores = vec![0.0; 20];
        scores[3] = 0.7;
        let s = g.constant(Tensor::from_vec(&[1, 20], scores));
        let am = attention_mining_graph(&mut g, s, &[3], 20, 1);
        assert_abs_diff_eq!(g.value(am).item(), 0.035, epsilon = 1e-15);

        let mut two = vec![0.0; 40];
        two[1] = 0.4;
        two[20 + 5] = 0.6;
        let s = g.constant(Tensor::from_vec(&[2, 20], two));
        let am = attention_mining_graph(&mut g, s, &[1, 5], 20, 1);
        assert_abs_diff_eq!(g.value(am).item(), 0.05, epsilon = 1e-15);

        let z = g.constant(Tensor::zeros(&[2, 20]));
        let am = attention_mining_graph(&mut g, z, &[1, 5], 20, 1);
        assert_eq!(g.value(am).item(), 0.0);
    }

    #[test]
    fn adversarial_graph_reduces_to_bce() {
        let y = label(2, &[0]);
        let mut g = Graph::new();
        let s = g.constant(Tensor::from_vec(&[1, 2], vec![0.5, 0.5]));
        let l = adversarial_loss_graph(&mut g, s, &[&y], &[0], AdversarialTarget::Full);
        assert_abs_diff_eq!(g.value(l).item(), std::f64::consts::LN_2, epsilon = 1e-12);

        // two copies from one 2-class image: mean of per-copy BCE
        let y2 = label(3, &[0, 2]);
        let rows = [vec![0.9, 0.2, 0.4], vec![0.3, 0.1, 0.8]];
        let s = g.constant(Tensor::from_vec(&[2, 3], rows.concat()));
        let l = adversarial_loss_graph(&mut g, s, &[&y2, &y2], &[0, 2], AdversarialTarget::Full);
        let oracle = rows
            .iter()
            .map(|r| bce_multilabel(r, &y2).unwrap())
            .sum::<f64>()
            / 2.0;
        assert_abs_diff_eq!(g.value(l).item(), oracle, epsilon = 1e-12);

        let l = adversarial_loss_graph(&mut g, s, &[&y2, &y2], &[0, 2], AdversarialTarget::ErasedClass);
        let oracle = -(0.9f64.ln() + 0.8f64.ln()) / 6.0;
        assert_abs_diff_eq!(g.value(l).item(), oracle, epsilon = 1e-12);
    }

    fn random_image(rng: &mut ChaCha8Rng, c: usize) -> LabeledImage {
        let px = Array3::from_shape_fn((3, 8, 8), |_| rng.random_range(0.0..1.0));
        let k = rng.random_range(0..c);
        LabeledImage::new("r", px, label(c, &[k])).unwrap()
    }

    #[test]
    fn batch_loss_matches_per_item_loop() {
        let net = ConvNet::new(ConvNetConfig::small(3), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch: Vec<_> = (0..5).map(|_| random_image(&mut rng, 3)).collect();
        let oracle: f64 = batch
            .iter()
            .map(|img| {
                let s = predict(&net, stack_images(std::iter::once(img.to_tensor())));
                bce_multilabel(s.data(), &img.label).unwrap()
            })
            .sum::<f64>()
            / batch.len() as f64;
        let got = localizer_classification_loss(&net, &batch).unwrap();
        assert_abs_diff_eq!(got, oracle, epsilon = 1e-12);

        let same = vec![batch[0].clone(), batch[0].clone()];
        let single = localizer_classification_loss(&net, &batch[..1]).unwrap();
        assert_abs_diff_eq!(localizer_classification_loss(&net, &same).unwrap(), single, epsilon = 1e-14);
        assert!(localizer_classification_loss(&net, &[]).is_err());
    }

    fn erased_from(img: &LabeledImage, class: usize) -> ErasedExample {
        ErasedExample {
            pixels: img.pixels().clone(),
            erased_class: class,
            source_label: img.label.clone(),
            source_id: img.id.clone(),
        }
    }

    #[test]
    fn value_level_adversarial_and_mining_losses() {
        let net = ConvNet::new(ConvNetConfig::small(3), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let px = Array3::from_shape_fn((3, 8, 8), |_| rng.random_range(0.0..1.0));
        let img = LabeledImage::new("two", px, label(3, &[0, 2])).unwrap();
        let erased = vec![erased_from(&img, 0), erased_from(&img, 2)];
        let scores = predict(&net, erased_batch(&erased));
        let oracle = (bce_multilabel(&scores.data()[..3], &img.label).unwrap()
            + bce_multilabel(&scores.data()[3..], &img.label).unwrap())
            / 2.0;
        let adv = adversarial_classification_loss(&net, &erased, AdversarialTarget::Full).unwrap();
        assert_abs_diff_eq!(adv, oracle, epsilon = 1e-12);
        assert!(adversarial_classification_loss(&net, &[], AdversarialTarget::Full).is_err());

        let am = attention_mining_loss(&net, &erased, 3).unwrap();
        assert_abs_diff_eq!(am, (scores.data()[0] + scores.data()[5]) / 3.0, epsilon = 1e-12);
        let dup = vec![erased_from(&img, 0), erased_from(&img, 0)];
        assert!(attention_mining_loss(&net, &dup, 3).is_err());
    }

    #[test]
    fn regularizer_gradient_is_constant() {
        let mut g = Graph::new();
        let maps = g.param(Tensor::from_vec(&[2, 1, 2, 3], vec![0.1, 0.5, 0.9, 0.0, 1.0, 0.3, 0.2, 0.2, 0.2, 0.7, 0.6, 0.4]));
        let r = regularization_graph(&mut g, maps, 20, 1);
        let grads = g.backward(r);
        let expected = 1.0 / (2.0 * 3.0 * 20.0);
        for &d in grads.get(maps).unwrap().data() {
            assert_abs_diff_eq!(d, expected, epsilon = 1e-18);
        }
        // finite differences agree
        let base = g.value(r).item();
        let mut g2 = Graph::new();
        let mut t = g.value(maps).clone();
        t.data_mut()[4] += 1e-4;
        let m2 = g2.constant(t);
        let r2 = regularization_graph(&mut g2, m2, 20, 1);
        assert_abs_diff_eq!((g2.value(r2).item() - base) / 1e-4, expected, epsilon = 1e-9);
    }

    proptest! {
        #[test]
        fn bce_is_non_negative_and_finite(
            scores in proptest::collection::vec(0.0f64..=1.0, 5),
            pos in 0usize..5,
        ) {
            let y = label(5, &[pos]);
            let v = bce_multilabel(&scores, &y).unwrap();
            prop_assert!(v >= 0.0 && v.is_finite());
        }
    }
}
