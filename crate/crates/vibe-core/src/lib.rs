//! Two-stage visual-to-neural encoding pipeline.
//!
//! Stage I learns a compact latent space for M/EEG recordings with a
//! spatio-temporal convolutional VAE. Stage II maps image embeddings into
//! that latent space through a query transformer and a projection head,
//! trained against the frozen encoder's posteriors with an MSE plus
//! sliced-Wasserstein alignment objective. Inference chains the Stage II
//! mapper with the frozen Stage I decoder to predict recordings for unseen
//! images.
//!
//! The crate is self-contained: tensors, autodiff, kernels, optimizers, the
//! container format, dataset synthesis, and evaluation all live here, so
//! runs are bit-reproducible from a seed on any platform.

pub mod align;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nd;
pub mod pipeline;
pub mod qformer;
pub mod vae;

pub use error::{Error, Result};
