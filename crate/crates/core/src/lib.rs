//! Few-shot object detection, desk scale.
//!
//! The pipeline matches a handful of labeled support crops against query
//! images: a weight-shared feature extractor feeds a support-conditioned
//! region proposal network (depth-wise cross-correlation attention), and a
//! multi-relation detector re-scores each proposal against the support with
//! three complementary heads (global, local, patch). Training is contrastive:
//! triplets of (query, same-category support, other-category support) with a
//! 1:2:1 foreground/background/negative pair ratio. Evaluation follows the
//! episodic N-way K-shot protocol.
//!
//! Everything here is pure computation over in-memory tensors; file formats,
//! image IO and the command-line front end live in the companion `fsdet-cli`
//! crate. The crate is `no_std`-compatible (with `alloc`) when the default
//! `std` feature is disabled.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod backbone;
pub mod data;
pub mod detector;
pub mod episode;
pub mod feature;
pub mod geometry;
pub mod gradcheck;
pub mod math;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod rpn;
pub mod synth;
pub mod tensor;
pub mod train;

pub use geometry::{BBox, Detection, GroundTruthSet};
pub use tensor::Tensor;
