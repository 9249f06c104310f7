//! Classifier networks usable as localizer or adversarial model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Ordered, named parameter list of one network.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.push(Param {
            name: name.into(),
            value,
        });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Register every parameter as a graph leaf, in order.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Bitwise equality of every parameter value.
    pub fn bit_equal(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.value.shape() == b.value.shape()
                    && a
                        .value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// A multi-label classifier from which class activation maps can be taken:
/// final convolutional features plus a per-class weight vector over their
/// channels.
pub trait Classifier {
    fn class_count(&self) -> usize;

    fn params(&self) -> &ParamSet;

    fn params_mut(&mut self) -> &mut ParamSet;

    /// Final convolutional features `(N, K, h, w)` of an image batch
    /// `(N, 3, H, W)` with pixel values in `[0, 1]`.
    fn features(&self, g: &mut Graph, bound: &[Var], x: Var) -> Var;

    /// Pre-sigmoid class scores `(N, C)` from final features.
    fn logits(&self, g: &mut Graph, bound: &[Var], features: Var) -> Var;

    /// Per-class weights over feature channels, `(C, K)`.
    fn class_weights(&self, bound: &[Var]) -> Var;
}

/// Graph handles from one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub params: Vec<Var>,
    pub features: Var,
    pub logits: Var,
    pub scores: Var,
}

pub fn forward<C: Classifier + ?Sized>(net: &C, g: &mut Graph, x: Var, trainable: bool) -> Forward {
    let params = net.params().bind(g, trainable);
    let features = net.features(g, &params, x);
    let logits = net.logits(g, &params, features);
    let scores = g.sigmoid(logits);
    Forward {
        params,
        features,
        logits,
        scores,
    }
}

/// Post-sigmoid scores for one batch, no gradients.
pub fn predict<C: Classifier + ?Sized>(net: &C, batch: Tensor) -> Tensor {
    let mut g = Graph::new();
    let x = g.constant(batch);
    let f = forward(net, &mut g, x, false);
    g.value(f.scores).clone()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvNetConfig {
    pub classes: usize,
    /// Output channels of each 3x3 convolution.
    pub channels: Vec<usize>,
    /// Apply 2x2 max pooling after the convolution at the same index.
    pub pool_after: Vec<bool>,
    pub input_mean: [f64; 3],
    pub input_std: [f64; 3],
}

impl ConvNetConfig {
    /// Four-layer network used for desk-scale runs.
    pub fn small(classes: usize) -> Self {
        Self {
            classes,
            channels: vec![8, 16, 16, 16],
            pool_after: vec![true, true, false, false],
            input_mean: [0.485, 0.456, 0.406],
            input_std: [0.229, 0.224, 0.225],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::invalid("classifier needs at least one class"));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::invalid("channel list must be non-empty and positive"));
        }
        if self.pool_after.len() != self.channels.len() {
            return Err(Error::invalid("pool_after must have one entry per convolution"));
        }
        if self.input_std.iter().any(|&s| s <= 0.0) {
            return Err(Error::invalid("input std must be positive"));
        }
        Ok(())
    }

    /// Spatial size of the final features for an input side length.
    pub fn feature_side(&self, input: usize) -> usize {
        self.pool_after.iter().fold(input, |s, &p| if p { s / 2 } else { s })
    }
}

/// Plain convolutional classifier: `[conv3x3 -> relu (-> maxpool)]*`,
/// global average pooling, linear head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvNet {
    pub config: ConvNetConfig,
    pub params: ParamSet,
}

impl ConvNet {
    pub fn new(config: ConvNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let mut cin = 3;
        for (i, &cout) in config.channels.iter().enumerate() {
            let fan_in = (cin * 9) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
            let w = (0..cout * cin * 9).map(|_| normal.sample(&mut rng)).collect();
            params.push(format!("conv{i}.weight"), Tensor::from_vec(&[cout, cin, 3, 3], w));
            params.push(format!("conv{i}.bias"), Tensor::zeros(&[cout]));
            cin = cout;
        }
        let normal = Normal::new(0.0, (1.0 / cin as f64).sqrt()).expect("finite std");
        let w = (0..config.classes * cin)
            .map(|_| normal.sample(&mut rng))
            .collect();
        params.push("head.weight", Tensor::from_vec(&[config.classes, cin], w));
        params.push("head.bias", Tensor::zeros(&[config.classes]));
        Ok(Self { config, params })
    }

    fn head_index(&self) -> usize {
        2 * self.config.channels.len()
    }
}

impl Classifier for ConvNet {
    fn class_count(&self) -> usize {
        self.config.classes
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn features(&self, g: &mut Graph, bound: &[Var], x: Var) -> Var {
        let scale: Vec<f64> = self.config.input_std.iter().map(|s| 1.0 / s).collect();
        let mut h = g.channel_affine(x, &scale, &self.config.input_mean);
        for (i, &pool) in self.config.pool_after.iter().enumerate() {
            h = g.conv2d(h, bound[2 * i], Some(bound[2 * i + 1]), 1, 1);
            h = g.relu(h);
            if pool {
                h = g.max_pool2(h);
            }
        }
        h
    }

    fn logits(&self, g: &mut Graph, bound: &[Var], features: Var) -> Var {
        let pooled = g.global_avg_pool(features);
        let head = self.head_index();
        g.linear(pooled, bound[head], Some(bound[head + 1]))
    }

    fn class_weights(&self, bound: &[Var]) -> Var {
        bound[self.head_index()]
    }
}
