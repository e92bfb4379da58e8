//! Audio-visual segmentation of sounding objects, built around two uses of
//! unlabeled video frames: dense optical flow from the frame right after a
//! labeled one feeds the model as a motion channel, and frames far from the
//! labeled one are folded into training through weak-to-strong teacher-student
//! consistency.
//!
//! Everything runs on a small reverse-mode autodiff engine ([`tensor`]) and a
//! from-scratch Farneback flow estimator ([`flow`]); the benchmark is a
//! synthetic moving-sounding-shapes dataset ([`dataset`]).

pub mod augment;
pub mod dataset;
pub mod flow;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;

/// Caps the global rayon pool. Reads `UFE_THREADS` when `cap` is `None`.
/// Safe to call more than once; only the first call takes effect.
pub fn init_thread_pool(cap: Option<usize>) {
    let cap = cap.or_else(|| {
        std::env::var("UFE_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = cap.filter(|&n| n > 0) {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}
