//! Learning and evaluating local image patch descriptors.
//!
//! A small convolutional network maps 32×32 grayscale patches to compact
//! descriptor vectors compared with the plain L2 distance. Training runs on
//! triplets of patches (two views of the same scene point plus one
//! distractor) under a squared-softmax objective over the positive distance
//! and the smaller of the two negative distances; pairwise hinge embedding
//! and a single-negative softmax ratio are included as baselines. Evaluation
//! covers pair classification (ROC, false positive rate at 95% recall) and
//! nearest-neighbour matching against overlap ground truth (precision-recall
//! and average precision).

pub mod checkpoint;
pub mod data;
pub mod descfile;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{GradPair, Scalar, Tensor};

/// Version string stamped into CSV headers and reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Forces all library parallelism onto a single thread for the rest of the
/// process. Results are bit-identical either way (reductions run in fixed
/// order regardless of thread count); the flag exists to pin scheduling for
/// reproducibility audits. Returns false if a thread pool was already live.
pub fn force_single_thread() -> bool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build_global()
        .is_ok()
}
