//! Core algorithms for a clothes-changing person-retrieval pipeline built
//! around generative data expansion.
//!
//! The crate is organized around one end-to-end flow:
//!
//! 1. [`synth`] generates a deterministic synthetic benchmark with
//!    ground-truth identity/clothing factors, masks, and descriptors.
//! 2. [`diffusion`] implements a conditional denoising diffusion model from
//!    scratch (noise schedule, forward process, MLP denoiser with manual
//!    backpropagation, ancestral sampling, masked inpainting).
//! 3. [`guidance`] optionally corrects the sampler with the input-gradient
//!    of a real-vs-generated discriminator.
//! 4. [`expansion`] produces K clothes-changed variants per training image.
//! 5. [`reid`] trains a small embedding model with a progressive pairing
//!    schedule over the generated variants.
//! 6. [`retrieval`] evaluates clothes-changed retrieval (top-1 / mAP) and
//!    refines predictions by ensembling rank lists of inpainted query
//!    variants.
//!
//! The crate is `no_std`-compatible (requires `alloc`); the `std` feature
//! (default) is only needed for `std::error::Error` integration, and the
//! `parallel` feature adds multi-core batch processing with deterministic
//! reductions.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod diffusion;
pub mod expansion;
pub mod grid;
pub mod guidance;
pub mod nn;
pub mod reid;
pub mod retrieval;
pub mod rng;
pub mod synth;

mod error;

pub use error::{Error, Result};
pub use grid::{Image, Mask};
pub use synth::{ClothesId, SampleId, SubjectId};
