//! Cost accounting, sample-quality metrics and mask analysis.

mod cost;
mod mmd;
mod report;
mod timing;

pub use cost::{block_macs, dense_macs, mask_cost, CostModel};
pub use mmd::{median_bandwidth, mmd, mmd_biased, permutation_threshold};
pub use report::{
    distortion_csv, feature_distortion, histogram, mask_report, near_binary_fraction, MaskReport, Summary,
    HEATMAP_WINDOW, HISTOGRAM_BINS,
};
pub use timing::{wall_clock, LatencyStats, TimingSummary};
