//! Deterministic simulation of federated semi-supervised learning with
//! three-player pseudo-labeling.
//!
//! Clients hold a few labeled and many unlabeled images. Training runs in
//! two phases: supervised FedAvg pretraining, then rounds in which each
//! client pseudo-labels its unlabeled data by averaging the predictions of
//! its local model, the global model and a spliced model (global shallow
//! layers plus local deep layers), keeping only predictions above a
//! server-scheduled confidence threshold.

pub mod augment;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod nn;
pub mod rng;
pub mod trinet;

pub use error::{Error, Result};
