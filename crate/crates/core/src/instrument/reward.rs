//! Partial-credit rewards and execution feedback.

use std::collections::BTreeSet;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::grader::GradeResult;
use super::markers::{MarkerStage, ParsedMarkers};
use crate::attempt::{sign_adjust, ExecutionRecord, ExitStatus, RewardBreakdown};
use crate::task::MetricDirection;

pub const FAIL_REWARD: f64 = -10.0;
pub const STAGE_CREDIT: f64 = 0.1;
pub const FEEDBACK_LIMIT: usize = 2000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardOptions {
    /// Lower bound applied to valid rewards.
    pub valid_clamp: Option<f64>,
    /// Maps rewards affinely so that the failure reward becomes 0 and a
    /// valid score of 1 becomes 1.
    pub normalize: bool,
}

pub fn invalid_reward(matched: usize) -> f64 {
    FAIL_REWARD + STAGE_CREDIT * matched as f64
}

fn normalize(r: f64) -> f64 {
    (r - FAIL_REWARD) / (1.0 - FAIL_REWARD)
}

/// Reward for a finished execution. `grade` is `None` when the run ended in
/// a way that is never graded (timeout, spawn failure, sandbox violation).
pub fn compute_reward(
    exec: &ExecutionRecord,
    matched: &BTreeSet<MarkerStage>,
    grade: Option<&GradeResult>,
    direction: MetricDirection,
    opts: RewardOptions,
) -> RewardBreakdown {
    let credit = STAGE_CREDIT * matched.len() as f64;
    let invalid = |reason: String| {
        let r = invalid_reward(matched.len());
        RewardBreakdown {
            valid: false,
            matched_stages: matched.clone(),
            partial_credit: credit,
            raw_score: None,
            final_reward: if opts.normalize { normalize(r) } else { r },
            invalid_reason: Some(reason),
        }
    };
    if let Some(v) = &exec.sandbox_violation {
        return invalid(format!("sandbox_violation: {v}"));
    }
    match (&exec.exit_status, grade) {
        (ExitStatus::Timeout, _) => invalid("timeout".into()),
        (ExitStatus::SpawnError(e), _) => invalid(format!("spawn_error: {e}")),
        (_, None) => invalid("not_graded".into()),
        (_, Some(GradeResult::Invalid(reason))) => invalid(reason.as_str().into()),
        (_, Some(GradeResult::Valid(raw))) => match sign_adjust(*raw, direction) {
            Ok(mut r) => {
                if let Some(c) = opts.valid_clamp {
                    r = r.max(c);
                }
                RewardBreakdown {
                    valid: true,
                    matched_stages: matched.clone(),
                    partial_credit: credit,
                    raw_score: Some(*raw),
                    final_reward: if opts.normalize { normalize(r) } else { r },
                    invalid_reason: None,
                }
            }
            Err(_) => invalid("nonfinite".into()),
        },
    }
}

fn head_utf8(s: &str, max: usize) -> &str {
    if s.len() <= max {
        return s;
    }
    let mut i = max;
    while !s.is_char_boundary(i) {
        i -= 1;
    }
    &s[..i]
}

fn tail_utf8(s: &str, max: usize) -> &str {
    if s.len() <= max {
        return s;
    }
    let mut i = s.len() - max;
    while !s.is_char_boundary(i) {
        i += 1;
    }
    &s[i..]
}

/// Bounded plain-text summary of a run for the improve prompt.
pub fn execution_feedback_summary(
    exec: &ExecutionRecord,
    markers: &ParsedMarkers,
    grade: Option<&GradeResult>,
) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "exit status: {}", exec.exit_status.token());
    let _ = writeln!(s, "duration: {:.2}s", exec.duration);
    let stages: Vec<&str> = markers.matched.iter().map(|m| m.name()).collect();
    let _ = writeln!(
        s,
        "progress: {}",
        if stages.is_empty() {
            "none".to_string()
        } else {
            stages.join(", ")
        }
    );
    for stage in [MarkerStage::TrainingLoss, MarkerStage::TestingLoss] {
        if let Some(v) = markers.last_loss(stage) {
            let _ = writeln!(s, "{} {v}", stage.plain_text());
        }
    }
    let _ = match grade {
        Some(GradeResult::Valid(x)) => writeln!(s, "grade: valid, score {x}"),
        Some(GradeResult::Invalid(r)) => writeln!(s, "grade: invalid ({r})"),
        None => writeln!(s, "grade: not graded"),
    };
    if let Some(v) = &exec.sandbox_violation {
        let _ = writeln!(s, "sandbox violation: {}", head_utf8(v, 200));
    }
    let head = head_utf8(&s, FEEDBACK_LIMIT).to_string();
    let mut out = head;
    let budget = FEEDBACK_LIMIT.saturating_sub(out.len());
    let stdout: String = exec
        .stdout
        .lines()
        .filter(|l| !l.starts_with("##EI:"))
        .collect::<Vec<_>>()
        .join("\n");
    let sections = [
        ("stdout", stdout.as_str()),
        ("stderr", exec.stderr.as_str()),
    ];
    let per = budget / 2;
    for (name, text) in sections {
        let text = text.trim_end();
        if text.is_empty() {
            continue;
        }
        let label = format!("{name} (tail):\n");
        if per <= label.len() + 1 {
            continue;
        }
        let body = tail_utf8(text, per - label.len() - 1);
        out.push_str(&label);
        out.push_str(body);
        out.push('\n');
    }
    debug_assert!(out.len() <= FEEDBACK_LIMIT);
    out
}
