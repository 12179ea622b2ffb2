//! Group-token vision backbone with a self-distillation training harness.
//!
//! The only token-mixing primitive in the model is an iterative perceptual
//! grouping operation: input patch tokens bind onto a set of sampled group
//! tokens through doubly-normalized attention, and the group tokens feed
//! context back into the patch tokens. The crate bundles:
//!
//! - [`tensor`]: a dense-tensor engine with tape-based reverse-mode
//!   differentiation and an explicit gradient barrier,
//! - [`samplers`]: learnable seed distributions (Gaussian, one-step affine
//!   flow) for group-token initialization,
//! - [`grouping`]: the multi-head binding operation,
//! - [`model`]: patch embedding, grouping layers/blocks, and the attention
//!   pooling summary head,
//! - [`ssl`]: student-teacher self-distillation training and linear probing,
//! - [`analysis`]: grouping-entropy diagnostics, analytic FLOP counts, peak
//!   activation-memory estimates, and attention-map export,
//! - [`data`]: the synthetic shapes dataset and PPM/PGM image I/O.

pub mod check;
pub mod config;
pub mod analysis;
pub mod augment;
pub mod data;
pub mod grouping;
pub mod init;
pub mod model;
pub mod params;
pub mod rng;
pub mod samplers;
pub mod ssl;
pub mod tensor;
