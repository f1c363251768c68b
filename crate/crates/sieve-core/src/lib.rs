//! Learns, per input feature, how much Gaussian noise a frozen classifier can
//! tolerate, thresholds the learned noise scales into a keep/suppress mask,
//! trains utility-preserving constant replacement values, and evaluates the
//! resulting sifted representations for utility, mutual-information leakage,
//! adversarial inferability, and fairness.
//!
//! The crate is organized around the offline/online split of the pipeline:
//!
//! * [`tensor`] / [`tape`] — dense f32 tensors with reverse-mode autodiff,
//!   enough to backpropagate classifier loss into input-additive noise
//!   parameters.
//! * [`nn`] — classifier construction, training, and prediction for target,
//!   substitute, and adversary models.
//! * [`data`] — IDX ingestion, synthetic dataset generators, and splits.
//! * [`noisemap`] — learns the per-feature noise distribution (mu, rho)
//!   against a frozen classifier.
//! * [`suppression`] — thresholds a noise map into a binary mask, trains
//!   constant suppression values, and produces sifted representations.
//! * [`infotheory`] — k-NN mutual-information and entropy estimators plus the
//!   analytical Gaussian upper bound.
//! * [`evaluation`] — experimental protocols: stochastic accuracy, privacy
//!   versus accuracy sweeps, adversary inference, fairness, black-box mode.
//! * [`checkpoint`] — the SIV1 container used for all persisted artifacts.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod infotheory;
pub mod linalg;
pub mod nn;
pub mod noisemap;
pub mod optim;
pub mod suppression;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

use std::sync::OnceLock;

/// Worker parallelism cap, read once from `SIEVE_THREADS`.
///
/// Returns the number of worker threads rayon was configured with. Parallel
/// sections all use order-preserving maps so results do not depend on the
/// thread count.
pub fn init_thread_pool() -> usize {
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| {
        let requested = std::env::var("SIEVE_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1);
        if let Some(n) = requested {
            // Ignore the error if a global pool already exists.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
        rayon::current_num_threads()
    })
}
