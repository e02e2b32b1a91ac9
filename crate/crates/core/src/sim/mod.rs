//! Desk-scale verification rig: an oracle detector with a known confusion
//! process, IoU matching, AP metrics, and the classifier training stand-in.

mod convergence;
mod learner;
mod matching;
mod metrics;
mod oracle;
mod report;

pub use convergence::{
    default_confusion, run_convergence_experiment, synthetic_ground_truth, BatchRecord,
    ConvergenceRun,
};
pub use learner::{run_train_sim, SimOutcome, SimRecord, TrainSimConfig};
pub use matching::{match_predictions, DEFAULT_IOU_THRESHOLD};
pub use metrics::{average_precision, compute_metrics, mean_and_spread, MetricsReport};
pub use oracle::{OracleDetector, ScoreDistribution};
pub use report::{append_rows, ExperimentRow, CSV_HEADER};
