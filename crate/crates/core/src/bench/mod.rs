//! Task metrics, inference sweeps, latency measurement and reports.

mod latency;
mod metrics;
mod report;

pub use latency::{
    latency_benchmark, median, time_ar, time_diffusion, time_median, DecoderKind, LatencyRecord,
    LatencySettings,
};
pub use metrics::{
    evaluate, evaluate_all, sweep, token_f1, ArDecoder, Decoded, Decoder, DiffusionDecoder,
    EvalSet, Metric, MetricReport, SettingsEcho,
};
pub use report::{
    latency_csv, metrics_csv, parse_latency_csv, parse_metrics_csv, report, Summary, SummaryRecord,
    LATENCY_CSV, METRICS_CSV, SUMMARY_JSON,
};
