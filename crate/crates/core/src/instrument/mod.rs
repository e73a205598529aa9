//! Marker protocol, instrumenters, grading and partial-credit rewards.

pub mod grader;
pub mod inserter;
pub mod markers;
mod pyscan;
pub mod reward;

pub use grader::{grade, GradeResult, InvalidReason};
pub use inserter::{
    instrument_or_passthrough, strip_markers, AstPluginInserter, ExternalModelInserter,
    Instrumented, Instrumenter, Passthrough, PatternInserter,
};
pub use markers::{MarkerMode, MarkerProtocol, MarkerStage, ParsedMarkers};
pub use reward::{compute_reward, execution_feedback_summary, RewardOptions};
