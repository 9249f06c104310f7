//! Stochastic gradient descent.

use serde::{Deserialize, Serialize};

use crate::nn::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// One update `p <- p - lr * (g + wd * p)`, with heavy-ball momentum
    /// when `momentum > 0`. `grads` follows the parameter order.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.momentum > 0.0 && self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        }
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let data = p.value.data_mut();
            if self.momentum > 0.0 {
                let v = self.velocity[i].data_mut();
                for ((w, &gr), vel) in data.iter_mut().zip(g.data()).zip(v.iter_mut()) {
                    let d = gr + self.weight_decay * *w;
                    *vel = self.momentum * *vel + d;
                    *w -= self.lr * *vel;
                }
            } else {
                for (w, &gr) in data.iter_mut().zip(g.data()) {
                    let d = gr + self.weight_decay * *w;
                    *w -= self.lr * d;
                }
            }
        }
    }
}
