//! The split-learning protocol: model partition, run schedule, the three
//! role loops, an in-process driver and the training trace.

mod baseline;
mod model;
mod roles;
mod schedule;
mod sim;
mod trace;

pub use baseline::{train_baseline, BaselineOutput};
pub use model::{FeatureDims, Forward, ModelPartition, MonoStep, Monolithic};
pub use roles::{
    run_role, FaultKind, FaultPhase, FaultPlan, HolderInput, Labels, RoleOutput, RoleReport, RoleSetup, RunOptions,
};
pub use schedule::{Schedule, TrainStep};
pub use sim::{dealer_seed, finish, mask_seed, predict_local, run_local, train_local, LocalSim, SimOutcome, SplitData, TrainOutput};
pub use trace::{TraceRecord, TrainingTrace, TRACE_COLUMNS};
