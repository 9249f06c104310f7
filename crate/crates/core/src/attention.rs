//! Class activation maps (CAM and Grad-CAM), normalization and resizing.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledImage;
use crate::error::{Error, Result};
use crate::graph::{lerp_table, Graph, Var};
use crate::nn::{forward, Classifier, Forward};
use crate::tensor::Tensor;

/// Maps whose maximum is at or below this stay all-zero under normalization.
pub const NORMALIZE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMethod {
    #[default]
    Cam,
    GradCam,
}

impl std::str::FromStr for AttentionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cam" => Ok(Self::Cam),
            "grad_cam" | "grad-cam" | "gradcam" => Ok(Self::GradCam),
            other => Err(Error::invalid(format!(
                "unknown attention method `{other}` (expected cam or grad_cam)"
            ))),
        }
    }
}

impl std::fmt::Display for AttentionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Cam => "cam",
            Self::GradCam => "grad_cam",
        })
    }
}

/// Non-negative spatial evidence for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub class_id: usize,
    pub values: Array2<f64>,
}

impl AttentionMap {
    pub fn zeros(class_id: usize, height: usize, width: usize) -> Self {
        Self {
            class_id,
            values: Array2::zeros((height, width)),
        }
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// 8-bit grayscale raster, `round(255 * a)` clamped to `[0, 255]`.
    pub fn to_gray8(&self) -> GrayImage {
        GrayImage::from_fn(self.width() as u32, self.height() as u32, |x, y| {
            let v = self.values[[y as usize, x as usize]];
            Luma([(255.0 * v).round().clamp(0.0, 255.0) as u8])
        })
    }

    const MAGIC: &'static [u8; 4] = b"ATTN";

    /// Exact binary form: magic, class id, height, width (u32 LE), then
    /// row-major f64 LE values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.values.len());
        out.extend_from_slice(Self::MAGIC);
        for v in [self.class_id, self.height(), self.width()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in self.values.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |why: &str| Error::Parse {
            what: "attention map",
            line: 0,
            reason: why.into(),
        };
        if bytes.len() < 16 || &bytes[..4] != Self::MAGIC {
            return Err(bad("missing header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (class_id, h, w) = (word(0), word(1), word(2));
        if bytes.len() != 16 + 8 * h * w {
            return Err(bad("payload length does not match dims"));
        }
        let values = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            class_id,
            values: Array2::from_shape_vec((h, w), values).map_err(|e| bad(&e.to_string()))?,
        })
    }

    pub fn save_raw(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_raw(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Divide by the maximum; maps with maximum below [`NORMALIZE_EPS`] come
/// back as zeros.
pub fn normalize(map: &AttentionMap) -> AttentionMap {
    let mx = map.max();
    let values = if mx > NORMALIZE_EPS {
        map.values.mapv(|v| v / mx)
    } else {
        Array2::zeros(map.values.dim())
    };
    AttentionMap {
        class_id: map.class_id,
        values,
    }
}

/// Corner-aligned bilinear resize.
pub fn upsample(map: &AttentionMap, target_h: usize, target_w: usize) -> Result<AttentionMap> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::invalid("upsample target must be non-empty"));
    }
    let (h, w) = map.values.dim();
    let rows = lerp_table(h, target_h);
    let cols = lerp_table(w, target_w);
    let src = &map.values;
    let values = Array2::from_shape_fn((target_h, target_w), |(i, j)| {
        let (r, q) = (rows[i], cols[j]);
        let top = src[[r.lo, q.lo]] * (1.0 - q.frac) + src[[r.lo, q.hi]] * q.frac;
        let bot = src[[r.hi, q.lo]] * (1.0 - q.frac) + src[[r.hi, q.hi]] * q.frac;
        top * (1.0 - r.frac) + bot * r.frac
    });
    Ok(AttentionMap {
        class_id: map.class_id,
        values,
    })
}

/// `normalize(ReLU(sum_k weights[k] * features[k]))` for features `(K, h, w)`.
pub fn cam_from_features(features: &Array3<f64>, weights: &[f64], class_id: usize) -> Result<AttentionMap> {
    let (k, h, w) = features.dim();
    if k != weights.len() {
        return Err(Error::ShapeMismatch(format!(
            "{k} feature channels but {} class weights",
            weights.len()
        )));
    }
    let mut acc = Array2::<f64>::zeros((h, w));
    for (ch, &wt) in weights.iter().enumerate() {
        acc.scaled_add(wt, &features.index_axis(ndarray::Axis(0), ch));
    }
    acc.mapv_inplace(|v| v.max(0.0));
    Ok(normalize(&AttentionMap { class_id, values: acc }))
}

fn single_batch(img: &LabeledImage) -> Tensor {
    let t = img.to_tensor();
    let shape = [1, t.shape()[0], t.shape()[1], t.shape()[2]];
    t.reshaped(&shape)
}

fn check_class<C: Classifier + ?Sized>(handle: &C, class_id: usize) -> Result<()> {
    if class_id >= handle.class_count() {
        return Err(Error::invalid(format!(
            "class {class_id} out of range for {} classes",
            handle.class_count()
        )));
    }
    Ok(())
}

fn plane(t: &Tensor, sample: usize, channel: usize) -> Array2<f64> {
    let (_, c, h, w) = t.dims4();
    let off = (sample * c + channel) * h * w;
    Array2::from_shape_vec((h, w), t.data()[off..off + h * w].to_vec()).expect("plane shape")
}

fn features_array(t: &Tensor) -> Array3<f64> {
    let (_, k, h, w) = t.dims4();
    Array3::from_shape_vec((k, h, w), t.data()[..k * h * w].to_vec()).expect("feature shape")
}

/// Post-ReLU class maps `(N, C, h, w)` from final features and class weights.
pub fn class_maps_graph(g: &mut Graph, features: Var, class_weights: Var) -> Var {
    let (c, k) = g.value(class_weights).dims2();
    let w = g.reshape(class_weights, &[c, k, 1, 1]);
    let maps = g.conv2d(features, w, None, 1, 0);
    g.relu(maps)
}

/// Normalized attention `(M, 1, h, w)` for `(sample, class)` pairs, taken
/// from a forward pass, differentiable in the classifier's parameters.
pub fn attention_graph<C: Classifier + ?Sized>(
    g: &mut Graph,
    handle: &C,
    fwd: &Forward,
    pairs: &[(usize, usize)],
) -> Var {
    let weights = handle.class_weights(&fwd.params);
    let maps = class_maps_graph(g, fwd.features, weights);
    let sel = g.select_maps(maps, pairs);
    g.normalize_max(sel, NORMALIZE_EPS)
}

/// CAM of `class_id` at final-feature resolution, normalized to max 1.
pub fn cam<C: Classifier + ?Sized>(handle: &C, img: &LabeledImage, class_id: usize) -> Result<AttentionMap> {
    check_class(handle, class_id)?;
    let mut g = Graph::new();
    let x = g.constant(single_batch(img));
    let fwd = forward(handle, &mut g, x, false);
    let feats = features_array(g.value(fwd.features));
    let weights = g.value(handle.class_weights(&fwd.params));
    let (_, k) = weights.dims2();
    let row = weights.data()[class_id * k..(class_id + 1) * k].to_vec();
    cam_from_features(&feats, &row, class_id)
}

/// Grad-CAM of `class_id`: channel weights are the spatially averaged
/// gradients of the pre-sigmoid class score w.r.t. the final features.
pub fn grad_cam<C: Classifier + ?Sized>(handle: &C, img: &LabeledImage, class_id: usize) -> Result<AttentionMap> {
    check_class(handle, class_id)?;
    let mut g = Graph::new();
    let x = g.param(single_batch(img));
    let fwd = forward(handle, &mut g, x, true);
    let mut seed = Tensor::zeros(g.value(fwd.logits).shape());
    seed.data_mut()[class_id] = 1.0;
    let grads = g.backward_from(fwd.logits, seed);
    let feats = g.value(fwd.features);
    let dfeats = grads.get_or_zeros(fwd.features, feats);
    let (_, k, h, w) = feats.dims4();
    let channel_weights: Vec<f64> = dfeats
        .data()
        .chunks(h * w)
        .take(k)
        .map(|p| p.iter().sum::<f64>() / (h * w) as f64)
        .collect();
    cam_from_features(&features_array(feats), &channel_weights, class_id)
}

/// Attention for every class via the chosen method.
pub fn attention_maps<C: Classifier + ?Sized>(
    handle: &C,
    img: &LabeledImage,
    classes: &[usize],
    method: AttentionMethod,
) -> Result<Vec<AttentionMap>> {
    classes
        .iter()
        .map(|&c| match method {
            AttentionMethod::Cam => cam(handle, img, c),
            AttentionMethod::GradCam => grad_cam(handle, img, c),
        })
        .collect()
}

/// One `(sample, channel)` plane of a rank-4 graph value.
pub fn graph_plane(g: &Graph, v: Var, sample: usize, channel: usize) -> Array2<f64> {
    plane(g.value(v), sample, channel)
}
