#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use mlerl::executor::{run_sandboxed, ExecutionRequest, Limits, RunOutcome};
use mlerl::instrument::{
    grade, instrument_or_passthrough, GradeResult, MarkerProtocol, ParsedMarkers, PatternInserter,
};
use mlerl::{ExecutionRecord, TaskSpec};

pub struct Run {
    pub record: ExecutionRecord,
    pub markers: ParsedMarkers,
    pub grade: Option<GradeResult>,
}

pub fn request(task: &TaskSpec, code: &str, jail: &Path, timeout_s: f64) -> ExecutionRequest {
    ExecutionRequest {
        attempt_id: 0,
        instrumented_code: code.to_string(),
        task: Arc::new(task.clone()),
        jail: jail.to_path_buf(),
        limits: Limits {
            wall_timeout: Duration::from_secs_f64(timeout_s),
            max_output_bytes: 1 << 16,
        },
        wrapper: Vec::new(),
    }
}

pub fn run_raw(task: &TaskSpec, code: &str, jail: &Path, timeout_s: f64) -> ExecutionRecord {
    match run_sandboxed(&request(task, code, jail, timeout_s), None, &|_| {}) {
        RunOutcome::Finished(r) => r,
        RunOutcome::Cancelled => panic!("cancelled without a token"),
    }
}

/// Sanitize, instrument, run and grade, as the trainer does.
pub fn run_instrumented(
    task: &TaskSpec,
    code: &str,
    protocol: &MarkerProtocol,
    jail: &Path,
) -> Run {
    let clean = protocol.sanitize(code);
    let code = instrument_or_passthrough(&PatternInserter, &clean, protocol).code;
    let record = run_raw(task, &code, jail, 60.0);
    let markers = protocol.parse_markers(&record.stdout);
    let grade = if record.sandbox_violation.is_none() {
        Some(grade(task, &record.workdir).expect("grader runs"))
    } else {
        None
    };
    Run {
        record,
        markers,
        grade,
    }
}
