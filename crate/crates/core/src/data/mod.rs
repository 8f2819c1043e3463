//! Hourly series ingestion, synthetic generation, perturbation and the
//! model's feature bundles.

mod features;
mod series;

pub use features::{
    build_bundles, bundles_for_range, compute_slope, BundleSet, FeatureBundle, NormStats,
    SplitBundles, SplitSpec, CALENDAR_WIDTH, MONTHS, WARMUP, WEEKDAYS, WINDOW,
};
pub use series::{
    default_synthetic_start, ingest_csv, parse_timestamp, perturb_training, synthesize_series,
    Series, SeriesRow, TimeRange, MIN_SYNTHETIC_DAYS, TIMESTAMP_FORMAT,
};
