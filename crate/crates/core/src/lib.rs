//! gestcall: a vision-based need-announcement system.
//!
//! A static hand-gesture frame flows through skin segmentation
//! ([`segmentation`]), contour and fingertip geometry ([`handgeom`]),
//! orientation-histogram features ([`features`]) and a small neural network
//! ([`classifier`]). The [`pipeline`] debounces per-frame decisions and maps
//! them to lingual descriptions, which [`announce`] delivers to a remote
//! receiver. [`synth`] renders labelled hands with exact ground truth.

pub mod announce;
pub mod classifier;
pub mod features;
pub mod handgeom;
pub mod imaging;
pub mod overlay;
pub mod pipeline;
mod quoting;
pub mod rng;
pub mod segmentation;
pub mod synth;
