//! Attempts, execution records, rewards and batches, plus response parsing.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrument::markers::MarkerStage;
use crate::task::MetricDirection;

/// Which prompt family produced an attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Scratch,
    Improve,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Scratch => "scratch",
            Mode::Improve => "improve",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedSolution {
    pub plan: String,
    pub code: String,
    /// Set when more than one fenced block was present; only the first is used.
    pub extra_blocks: bool,
    /// Set when the first block had no closing fence; code runs to end of text.
    pub unterminated: bool,
}

fn is_fence(line: &str) -> bool {
    line.trim_start().starts_with("```")
}

/// Splits a response into the plan (text before the first fenced block) and
/// the code inside that block. Bare and language-tagged fences are accepted.
pub fn parse_solution(response: &str) -> Result<ParsedSolution> {
    let lines: Vec<&str> = response.split('\n').collect();
    let open = lines
        .iter()
        .position(|l| is_fence(l))
        .ok_or(Error::NoCodeBlock)?;
    let close = lines[open + 1..]
        .iter()
        .position(|l| l.trim() == "```")
        .map(|p| p + open + 1);
    let body_end = close.unwrap_or(lines.len());
    let plan = lines[..open].join("\n").trim().to_string();
    let code = lines[open + 1..body_end].join("\n");
    let extra_blocks = close
        .map(|c| lines[c + 1..].iter().any(|l| is_fence(l)))
        .unwrap_or(false);
    Ok(ParsedSolution {
        plan,
        code,
        extra_blocks,
        unterminated: close.is_none(),
    })
}

/// Maps a grader score to a reward: lower-is-better metrics are negated.
pub fn sign_adjust(raw_score: f64, direction: MetricDirection) -> Result<f64> {
    if !raw_score.is_finite() {
        return Err(Error::Reward(format!("non-finite score {raw_score}")));
    }
    Ok(match direction {
        MetricDirection::HigherBetter => raw_score,
        // `0.0 - x` keeps +0.0 for a zero score.
        MetricDirection::LowerBetter => 0.0 - raw_score,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionAttempt {
    pub attempt_id: u64,
    pub task_id: String,
    pub mode: Mode,
    pub prompt: String,
    pub response: String,
    pub plan: String,
    pub code: String,
    /// Behavior log-probabilities, one per discrete choice (library slots) or
    /// per token (generative backends).
    pub logprob_data: Vec<f64>,
    pub parent: Option<u64>,
    /// Library choice per slot; empty for generative attempts.
    pub action: Vec<usize>,
    pub policy_version: u64,
    pub extra_blocks: bool,
}

impl SolutionAttempt {
    pub fn behavior_logprob(&self) -> f64 {
        self.logprob_data.iter().sum()
    }

    pub fn parsed(&self) -> bool {
        !self.code.is_empty()
    }

    /// Checks the structural invariants of an attempt.
    pub fn check(&self) -> Result<()> {
        if self.mode == Mode::Improve && self.parent.is_none() {
            return Err(Error::Mode("improve attempt without parent".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitStatus {
    Ok,
    /// Exit code, or the negated signal number when killed by a signal.
    Nonzero(i32),
    Timeout,
    SpawnError(String),
}

impl ExitStatus {
    pub fn token(&self) -> String {
        match self {
            ExitStatus::Ok => "ok".into(),
            ExitStatus::Nonzero(c) => format!("nonzero({c})"),
            ExitStatus::Timeout => "timeout".into(),
            ExitStatus::SpawnError(_) => "spawn_error".into(),
        }
    }

    pub fn is_ok(&self) -> bool {
        matches!(self, ExitStatus::Ok)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub attempt_id: u64,
    pub instrumented_code: String,
    pub exit_status: ExitStatus,
    pub stdout: String,
    pub stderr: String,
    pub stdout_truncated: bool,
    pub stderr_truncated: bool,
    /// Wall-clock seconds from spawn to termination (monotonic clock).
    pub duration: f64,
    pub submission_present: bool,
    pub workdir: PathBuf,
    /// Set when the guest touched the sandbox outside its working directory.
    pub sandbox_violation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub valid: bool,
    pub matched_stages: BTreeSet<MarkerStage>,
    pub partial_credit: f64,
    pub raw_score: Option<f64>,
    pub final_reward: f64,
    pub invalid_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub attempt: SolutionAttempt,
    pub execution: ExecutionRecord,
    pub reward: RewardBreakdown,
    pub advantage: f64,
    pub duration_weight: f64,
}

impl TrajectoryEntry {
    pub fn new(
        attempt: SolutionAttempt,
        execution: ExecutionRecord,
        reward: RewardBreakdown,
    ) -> Self {
        Self {
            attempt,
            execution,
            reward,
            advantage: 0.0,
            duration_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBatch {
    pub entries: Vec<TrajectoryEntry>,
}

impl TrajectoryBatch {
    pub fn new(entries: Vec<TrajectoryEntry>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn durations(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.execution.duration).collect()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.reward.final_reward).collect()
    }

    pub fn set_advantages(&mut self, adv: &[f64]) {
        for (e, a) in self.entries.iter_mut().zip(adv) {
            e.advantage = *a;
        }
    }

    pub fn set_weights(&mut self, w: &[f64]) {
        for (e, x) in self.entries.iter_mut().zip(w) {
            e.duration_weight = *x;
        }
    }
}
