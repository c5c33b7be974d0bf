//! Image-quality metrics, timed evaluation and report tables.

mod metrics;
mod report;

pub use metrics::{gaussian_taps, psnr, ssim, DYNAMIC_RANGE, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
pub use report::{
    evaluate_checkpoint, evaluate_generator, render_table, timed_restore, Failure, ImageMetrics, MetricsReport,
    TimingSpec, REFERENCE_GOPRO,
};
