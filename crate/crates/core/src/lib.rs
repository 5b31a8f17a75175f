//! Guided image inpainting.
//!
//! Given an image with a hole and a second "guidance" image, a localization
//! network regresses an affine transform that aligns a matching guidance patch
//! with the hole, and a synthesis network fills the hole by reusing guidance
//! content where it agrees with the surrounding context and generating new
//! content where it does not.
//!
//! The crate is `no_std` (with `alloc`) so the numerical core can be embedded
//! anywhere; file formats, the CLI and training drivers live in the
//! `guided-inpaint` companion crate.
//!
//! Module map:
//!
//! * [`domain`]: images, holes, affine transforms, the cut-paste compositor.
//! * [`warp`]: affine sampling grids and the differentiable bilinear sampler.
//! * [`tensor`], [`graph`], [`nn`], [`optim`]: a small reverse-mode autodiff
//!   substrate with the layers the networks need.
//! * [`datagen`]: the synthetic corruption generator for training pairs.
//! * [`locnet`], [`synthnet`], [`percept`], [`critic`]: networks and losses.
//! * [`train`]: single-step training logic (the loops with IO live upstream).
//! * [`eval`]: restoration metrics and the local-context-matching baseline.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod config;
pub mod critic;
pub mod datagen;
pub mod domain;
pub mod error;
pub mod eval;
pub mod graph;
pub mod locnet;
pub mod nn;
pub mod optim;
pub mod percept;
pub mod scalar;
pub mod scenes;
pub mod synthnet;
pub mod tensor;
pub mod train;
pub mod warp;

pub use config::ModelConfig;
pub use domain::{AffineTransform, BoxRegion, HoleSpec, ImageTensor, TrainingExample};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
