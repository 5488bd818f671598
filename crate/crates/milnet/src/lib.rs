//! Weak-label audio event detection and tagging toolkit.
//!
//! The crate trains two small networks from clip-level ("weak") labels only:
//!
//! - **WHEN** — a convolutional-recurrent detector predicting, per time
//!   frame, whether *any* event is active. It is trained as a
//!   multiple-instance-learning problem: a recording is a bag of frame
//!   instances carrying a single bag label. Several bag losses are provided,
//!   including a max+mean+min compound loss that keeps every frame in the
//!   gradient.
//! - **WHO** — a convolutional tagger predicting which classes are present
//!   in a clip, trained with plain binary cross-entropy.
//!
//! Both networks share the same convolutional trunk architecture, which
//! enables three training regimes: fully separate models, a joint model with
//! two heads and weighted losses, and a tied-weights mode where two models
//! physically share trunk parameters but train in alternating epochs on
//! different input streams.
//!
//! Everything runs on a self-contained reverse-mode autodiff tape
//! ([`tensor`]), with log mel-band energy features ([`features`]), balanced
//! and conventional minibatch samplers plus a synthetic dataset generator
//! ([`data`]), Adam with a halving learning-rate schedule ([`train`]), and
//! ROC-AUC evaluation ([`metrics`]).

pub mod data;
pub mod error;
pub mod features;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
