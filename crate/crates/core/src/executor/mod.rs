//! Sandboxed execution, worker pools and collection semantics.

pub mod frequency;
pub mod pool;
pub mod sandbox;

pub use frequency::{
    frequency_law, sample_frequency_experiment, simulate_batch_virtual, simulate_frequency_virtual,
    LeasedSampler,
};
pub use pool::{cancellable_sleep, ContinuousCollector, Job, WorkerPool};
pub use sandbox::{
    live_processes_in_groups, prepare_jail, remove_jail, run_sandboxed, CancelToken,
    ExecutionRequest, Limits, RunOutcome, INPUT_DIR, JAIL_ALIAS, WORK_DIR,
};
