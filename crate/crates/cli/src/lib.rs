//! Command-line front end for adversarial-erasing training and evaluation.

pub mod ablation;
pub mod app;
pub mod commands;
pub mod config;
