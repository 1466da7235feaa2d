//! Outfit compatibility scoring with factor-level reasons.
//!
//! An outfit (a top and a bottom garment) is judged `good`, `normal`, or
//! `bad` by a small factor-structured network, and for non-normal judgments
//! the factor responsible (color, print, or design) is extracted from the
//! network's own gradients rather than from a separate classifier head.
//! Because that extraction is differentiable, it can also be supervised
//! during training, which is the whole point of this crate: the reason
//! regularizers need gradients of gradients, so everything is built on a
//! small reverse-mode autodiff engine that can differentiate its own
//! backward pass.
//!
//! Module map:
//!
//! - [`autodiff`]: the graph engine (tensors, ops, `grad`).
//! - [`record`]: outfit records, labels, and NDJSON feature files.
//! - [`colorfeat`]: quantized color histograms and the color feature vector.
//! - [`compatnet`]: the factor-structured scoring network and checkpoints.
//! - [`reasoning`]: contribution vectors, reason extraction, regularizers.
//! - [`synthdata`]: rule-based synthetic outfit generator.
//! - [`training`]: balanced sampling, SGD, the training loop.
//! - [`evalharness`]: metrics, baselines, and the sweep experiments.
//! - [`explain`]: template-based explanation sentences.
//! - [`gradcheck`]: finite-difference oracles used by tests and `selfcheck`.

pub mod autodiff;
pub mod colorfeat;
pub mod compatnet;
pub mod evalharness;
pub mod explain;
pub mod gradcheck;
pub mod reasoning;
pub mod record;
pub mod synthdata;
pub mod training;
