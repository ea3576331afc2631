//! Conditional VAE-GAN for disentangling label-specified factors of variation
//! from the remaining unspecified variability, trained with only class labels.
//!
//! The crate is organized around a small reverse-mode autodiff engine
//! ([`tensor`]), plain layers and SGD ([`nn`]), the three networks and their
//! losses ([`model`]), the alternating training loop ([`trainer`]), dataset
//! loading and sampling ([`data`]), and the evaluation protocols ([`eval`]):
//! swap grids, interpolation, retrieval, conditional sampling, and the
//! classifier-based disentanglement metric.

pub(crate) mod bytes;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod png;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};

/// Element type for all tensor storage. The default build uses 64-bit floats;
/// the `f32` feature switches storage to 32-bit for speed.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

use std::sync::OnceLock;

static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();

/// Thread pool for kernel-internal parallelism, sized by `DISENT_THREADS`
/// (0 or unset = one thread per core). Results are bitwise deterministic
/// regardless of the thread count: every output element is reduced in a
/// fixed sequential order.
pub fn kernel_pool() -> &'static rayon::ThreadPool {
    POOL.get_or_init(|| {
        let n = std::env::var("DISENT_THREADS")
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .unwrap_or(0);
        let mut builder = rayon::ThreadPoolBuilder::new();
        if n > 0 {
            builder = builder.num_threads(n);
        }
        builder.build().expect("failed to build kernel thread pool")
    })
}
