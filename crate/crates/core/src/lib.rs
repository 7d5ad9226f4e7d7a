//! DenoiseRank: learning to rank with a denoising diffusion model over
//! relevance labels.
//!
//! The crate is organized bottom-up:
//!
//! - [`data`]: LETOR/SVMLight parsing, z-score normalization, binary caches.
//! - [`autodiff`]: a small reverse-mode engine over dense tensors.
//! - [`schedule`]: noise schedules, forward marginals and Gaussian posteriors.
//! - [`model`]: the transformer encoder plus timestep-conditioned denoiser.
//! - [`losses`]: pointwise, pairwise and listwise training objectives.
//! - [`optim`]: AdamW with decoupled weight decay.
//! - [`trainer`]: the training loop and model selection.
//! - [`sampler`]: iterative (optionally strided) reverse sampling.
//! - [`metrics`]: NDCG, ERR, MAP, MRR, Precision and ranking-sequence
//!   diversity.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
