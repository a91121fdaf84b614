//! Joint intrinsic image decomposition and semantic segmentation at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`imaging`]: image, label-map and sample types plus the `I = R × S` image formation model.
//! * [`scenegen`]: a procedural Lambertian scene renderer with exact ground truth and the
//!   `ISEG1` sample container.
//! * [`nn`]: a small reverse-mode autodiff engine and the shared-encoder / multi-decoder network.
//! * [`losses`]: MSE, scale-invariant MSE, combined/intrinsic losses, weighted cross entropy
//!   and the joint loss, all expressed on the autodiff graph.
//! * [`metrics`]: evaluation measures (brightness-adjusted MSE, LMSE, DSSIM, confusion
//!   matrices, global/class/mIoU scores).
//! * [`train`]: Adadelta, experiment configurations, the training loop and checkpoints.
//! * [`report`]: comparison tables and deterministic raster plots.

pub mod error;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod scenegen;
pub mod train;

pub use error::{Error, Result};

/// Configure the global worker pool from `ISEG_THREADS`, if set.
///
/// Safe to call more than once; only the first successful call has an effect.
pub fn init_threads_from_env() {
    if let Some(n) = std::env::var("ISEG_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}
