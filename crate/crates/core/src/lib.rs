//! Conditional radiance fields for radiograph-to-CT-projection synthesis.
//!
//! The pipeline runs end to end on a CPU: procedural attenuation phantoms
//! ([`phantom`]), simulated radiographs ([`drr`]), a latent-conditioned
//! radiance field ([`field`]) rendered by volumetric compositing ([`render`]),
//! a multi-scale patch discriminator ([`adversary`]), reconstruction and
//! uncertainty-weighted multitask losses ([`objective`]), adversarial
//! training with single-view fine-tuning and full-orbit rendering
//! ([`trainloop`]), and image-quality metrics ([`metrics`]).
//!
//! Everything is deterministic for fixed seeds: repeated runs produce
//! bit-identical volumes, datasets, loss histories, and rendered stacks.

pub mod adversary;
pub mod drr;
pub mod error;
pub mod field;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod objective;
pub mod phantom;
pub mod plot;
pub mod render;
pub mod tensor;
pub mod trainloop;

pub use error::{Error, Result};
pub use tensor::Tensor;
