//! Training core for reinforcement-learning agents whose actions are programs.
//!
//! An action is a generated solution (plan + code) that runs in a sandboxed
//! working directory and takes a variable amount of wall-clock time. The crate
//! provides:
//!
//! - [`policy`]: an exact-gradient factored softmax policy over a solution
//!   library, plus a client for external generative backends.
//! - [`learner`]: advantage estimation and PPO updates whose per-sample
//!   contribution is weighted by execution duration.
//! - [`executor`]: a process sandbox, a worker pool with completion-order
//!   collection, and the continuous (time-share) collector.
//! - [`instrument`]: progress markers, partial-credit rewards and graders.
//! - [`selfimprove`]: the previous-solution buffer and prompt construction.
//! - [`envs`]: synthetic tasks that make each mechanism observable.
//! - [`orchestrator`]: the training loop, checkpoints, metrics and evaluation.

pub mod attempt;
pub mod backend;
pub mod config;
pub mod envs;
pub mod error;
pub mod executor;
pub mod instrument;
pub mod learner;
pub mod orchestrator;
pub mod policy;
pub mod selfimprove;
pub mod task;

pub use attempt::{
    parse_solution, sign_adjust, ExecutionRecord, ExitStatus, Mode, ParsedSolution,
    RewardBreakdown, SolutionAttempt, TrajectoryBatch, TrajectoryEntry,
};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use task::{GraderSpec, Metric, MetricDirection, TaskSpec};
