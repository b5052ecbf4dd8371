//! Alignment of adapter training with dense fine-tuning.
//!
//! * [`equiv`]: equivalent weight and gradient of a low-rank adapter, and
//!   the exact split of one SGD step into first-order and remainder terms.
//! * [`train`]: SGD on synthetic tasks, optionally beside a dense or
//!   upcycled-MoE reference fed identical batches.
//! * [`montecarlo`]: sampling checks of routing weights, the Kaiming scale
//!   rule and the optimality of the residual weight.
//! * [`gradcheck`]: finite-difference verification of the layer backward.
//! * [`experiments`]: constructed instances and seeded comparison suites.

pub mod equiv;
pub mod experiments;
pub mod gradcheck;
pub mod montecarlo;
pub mod tasks;
pub mod train;

pub use equiv::{
    decompose_lora_step, equivalent_gradient, equivalent_weight, sgd_step_lora, EquivState,
    StepDecomposition,
};
pub use experiments::{
    convergence_comparison, exact_alignment_layer, exact_alignment_layer_with, gradient_fixture,
    load_balance_experiment, median, ConvergenceOutcome, SuiteConfig,
};
pub use gradcheck::{check_layer_gradients, relative_error, BlockCheck};
pub use montecarlo::{
    deviation_moments, verify_expected_gradient_scale, verify_router_stats,
    verify_router_stats_with, verify_w_res_optimality, GradientScaleReport, LogitDist, RouterStats,
    WResReport,
};
pub use tasks::{Sample, SyntheticTask, TaskKind};
pub use train::{
    run_alignment_experiment, run_experiment, train_reference, Reference, ReferenceRun, RunOutput,
    StepRecord, TrainConfig, TrajectoryReport, TrajectoryRow,
};
