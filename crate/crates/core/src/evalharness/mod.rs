//! Hold-out evaluation, the mixed-field ablation, and complexity benchmarks.

mod ablation;
mod bench;
mod flops;
mod holdout;
mod infer;
mod split;

pub use ablation::{
    run_ablation, table2_rows, AblationReport, AblationSpec, Strategy, StrategyRun, Table2Row,
    TABLE2_FILE, TABLE2_HEADER, TABLE2_METRICS,
};
pub use bench::{
    bench_scaling, bench_tower, loglog_slope, median, repeat_stability, time_tower, ScalingReport,
    ScalingSpec, TimingPoint, Tower, SCALING_HEADER,
};
pub use flops::{flops, model_flops, total_flops, BlockDims, BlockKind, FlopEntry};
pub use holdout::{
    evaluate_split, report_rows, run_test, Identity, Predictor, TestOptions, TestReport,
    SAMPLES_FILE, TABLE1_FILE,
};
pub use infer::{infer_volume, write_outputs, InferOutcome};
pub use split::{apportion, make_split, split_counts, SplitSpec, DEFAULT_SPLIT_FRACTIONS};
