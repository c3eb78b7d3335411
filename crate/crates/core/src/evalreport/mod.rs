//! Accuracy, earliness and cost of trained models, comparisons against
//! published competitor numbers, and numeric exports for plotting.

mod compare;
mod metrics;
mod trace;

pub use compare::{
    competitor_param, domination_table, export_scatter, load_competitors, CompetitorRow, CompetitorTable,
    DatasetComparison, Domination, Outcome,
};
pub use metrics::{
    evaluate, evaluate_predictions, final_accuracy, read_records, write_records, EvalRecord, SeriesOutcome,
};
pub use trace::{export_trace, trace_rows, TraceRow};
