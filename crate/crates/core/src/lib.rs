//! End-to-end adversarial erasing for weakly-supervised semantic segmentation.
//!
//! A localizer classifier produces class activation maps; those maps are
//! soft-thresholded into masks that erase the attended region from the input,
//! and an adversarial classifier tries to recognize the class anyway. The
//! localizer is rewarded when the adversarial fails, which pushes its
//! attention from the most discriminative parts towards whole objects. The
//! final attention maps become segmentation masks via a background threshold.

pub mod attention;
pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod graph;
pub mod losses;
pub mod masking;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod segmentation;
pub mod tensor;
pub mod training;
pub mod visualize;

pub use error::{Error, Result};
