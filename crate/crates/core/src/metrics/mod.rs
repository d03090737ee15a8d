//! Reconstruction quality: pixel-level and feature-level scores of generated
//! images against their references.

mod features;
mod image;
mod lowlevel;
mod suite;

pub use features::{
    feature_distance, rank_generations, two_way_identification, FeatureExtractor, RandomProjection, TableExtractor,
    STANDARD_EXTRACTORS,
};
pub use image::Image;
pub use lowlevel::{pearson, pixcorr, ssim, SSIM_K1, SSIM_K2, SSIM_RANGE, SSIM_SIGMA, SSIM_WINDOW};
pub use suite::{
    evaluate_dirs, evaluate_pairs, pair_lines, per_rank_table, table4, DirReport, MetricOptions, MetricReport,
    PairRecord, DEFAULT_CANDIDATES,
};
