//! Distribution distances, perceptual distances, sweep matrices, monotonicity
//! reports and latent PCA.

mod features;
mod latent;
mod stats;
mod sweep;

pub use features::{patch_perceptual_distance, FeatureExtractor, FeatureMap, PixelExtractor, RandomProjectionExtractor};
pub use latent::{bottleneck_activations, latent_pca, Pca};
pub use stats::{extract_stats, frechet_distance, spearman, FeatureStats};
pub use sweep::{
    monotonicity_report, set_distance, sweep_matrix, GeneratorHandle, Metric, MonotonicityReport, SweepMatrix,
};
