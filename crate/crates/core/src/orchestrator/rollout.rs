//! Drawing attempts from the policy and running them in the sandbox.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use rand::Rng;

use crate::attempt::{parse_solution, ExecutionRecord, ExitStatus, Mode, SolutionAttempt};
use crate::backend::HttpBackend;
use crate::config::{ImprovePick, InstrumenterKind, RunConfig};
use crate::error::{Error, Result};
use crate::executor::{
    remove_jail, run_sandboxed, CancelToken, ExecutionRequest, Limits, RunOutcome,
};
use crate::instrument::{
    grade, instrument_or_passthrough, AstPluginInserter, ExternalModelInserter, GradeResult,
    Instrumenter, MarkerProtocol, ParsedMarkers, Passthrough, PatternInserter,
};
use crate::policy::{LibraryPolicy, StateKey};

use crate::selfimprove::{
    build_prompt, data_snippet, sample_mode, PrevSolutionBuffer, PrevSolutionEntry,
};
use crate::task::TaskSpec;

const SNIPPET_BYTES: usize = 4096;

/// Read-only state shared by the orchestrator and every worker.
pub(crate) struct RunContext {
    pub tasks: Vec<Arc<TaskSpec>>,
    pub task_index: HashMap<String, usize>,
    snippets: Vec<String>,
    instrumenter: Arc<dyn Instrumenter>,
    instrumentation: bool,
    wrapper: Vec<String>,
    exec_timeout: f64,
    max_output_bytes: usize,
    max_prompt_length: usize,
    temperature: f64,
    pub scratch: PathBuf,
}

pub(crate) fn make_instrumenter(cfg: &RunConfig) -> Result<Arc<dyn Instrumenter>> {
    Ok(match cfg.instrumenter {
        InstrumenterKind::Pattern => Arc::new(PatternInserter),
        InstrumenterKind::Passthrough => Arc::new(Passthrough),
        InstrumenterKind::External => {
            let url = cfg
                .backend_url
                .as_deref()
                .ok_or_else(|| Error::Config("instrumenter = external needs backend_url".into()))?;
            let backend = HttpBackend::new(url, Duration::from_secs(120));
            Arc::new(ExternalModelInserter::new(
                Arc::new(backend),
                url,
                cfg.num_workers,
            ))
        }
        InstrumenterKind::Plugin => Arc::new(AstPluginInserter::new(
            cfg.plugin_command.clone(),
            Duration::from_secs(30),
        )?),
    })
}

impl RunContext {
    pub fn new(cfg: &RunConfig, tasks: Vec<TaskSpec>, scratch: PathBuf) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Config("no tasks registered".into()));
        }
        let task_index = tasks
            .iter()
            .enumerate()
            .map(|(i, t)| (t.task_id.clone(), i))
            .collect();
        let snippets = tasks
            .iter()
            .map(|t| data_snippet(t, SNIPPET_BYTES))
            .collect();
        Ok(Self {
            tasks: tasks.into_iter().map(Arc::new).collect(),
            task_index,
            snippets,
            instrumenter: make_instrumenter(cfg)?,
            instrumentation: cfg.instrumentation,
            wrapper: cfg.sandbox_wrapper.clone(),
            exec_timeout: cfg.exec_timeout,
            max_output_bytes: cfg.max_output_bytes,
            max_prompt_length: cfg.max_prompt_length,
            temperature: cfg.temperature,
            scratch,
        })
    }

    pub fn task(&self, id: &str) -> Result<&Arc<TaskSpec>> {
        self.task_index
            .get(id)
            .map(|&i| &self.tasks[i])
            .ok_or_else(|| Error::State(id.to_string()))
    }

    /// Picks a task uniformly, a prompt mode and, for improve prompts, the
    /// previous solution, then draws an attempt.
    pub fn draw<R: Rng + ?Sized>(
        &self,
        policy: &LibraryPolicy,
        buffer: &PrevSolutionBuffer,
        self_improve: bool,
        pick: ImprovePick,
        rng: &mut R,
    ) -> Result<SolutionAttempt> {
        let task = if self.tasks.len() > 1 {
            rng.gen_range(0..self.tasks.len())
        } else {
            0
        };
        let id = &self.tasks[task].task_id;
        let mode = sample_mode(buffer, id, self_improve, rng);
        let parent = match mode {
            Mode::Improve => buffer.pick(id, pick, rng),
            Mode::Scratch => None,
        };
        self.choose(policy, task, mode, parent, rng)
    }

    /// Draws an attempt for `task` in `mode`. The attempt id is assigned
    /// later so that a leased choice can be re-run.
    pub fn choose<R: Rng + ?Sized>(
        &self,
        policy: &LibraryPolicy,
        task: usize,
        mode: Mode,
        parent: Option<&PrevSolutionEntry>,
        rng: &mut R,
    ) -> Result<SolutionAttempt> {
        let spec = &self.tasks[task];
        let prompt = build_prompt(
            spec,
            &self.snippets[task],
            mode,
            parent,
            self.max_prompt_length,
        )?;
        let key = StateKey::new(&spec.task_id, mode);
        let sample = policy.sample(&key, self.temperature, rng)?;
        let (plan, code, extra_blocks) = match parse_solution(&sample.response) {
            Ok(p) => (p.plan, p.code, p.extra_blocks),
            Err(_) => (String::new(), String::new(), false),
        };
        Ok(SolutionAttempt {
            attempt_id: 0,
            task_id: spec.task_id.clone(),
            mode,
            prompt,
            response: sample.response,
            plan,
            code,
            logprob_data: sample.logprobs,
            parent: parent.map(|p| p.attempt_id),
            action: sample.action,
            policy_version: policy.version(),
            extra_blocks,
        })
    }
}

/// A finished, graded run.
#[derive(Debug, Clone)]
pub(crate) struct Outcome {
    pub attempt: SolutionAttempt,
    pub record: ExecutionRecord,
    pub markers: ParsedMarkers,
    /// `None` when the run ended in a way that is never graded.
    pub grade: Option<GradeResult>,
}

fn unrun_record(attempt: &SolutionAttempt, reason: &str) -> ExecutionRecord {
    ExecutionRecord {
        attempt_id: attempt.attempt_id,
        instrumented_code: String::new(),
        exit_status: ExitStatus::SpawnError(reason.to_string()),
        stdout: String::new(),
        stderr: String::new(),
        stdout_truncated: false,
        stderr_truncated: false,
        duration: 0.0,
        submission_present: false,
        workdir: PathBuf::new(),
        sandbox_violation: None,
    }
}

/// Sanitizes, instruments, runs and grades one attempt. Returns `None` when
/// the run was cancelled.
pub(crate) fn execute(
    ctx: &RunContext,
    attempt: SolutionAttempt,
    protocol: &MarkerProtocol,
    cancel: Option<&CancelToken>,
) -> Option<Outcome> {
    let Ok(task) = ctx.task(&attempt.task_id).cloned() else {
        let record = unrun_record(&attempt, "unknown task");
        return Some(Outcome {
            attempt,
            record,
            markers: ParsedMarkers::default(),
            grade: None,
        });
    };
    if attempt.code.is_empty() {
        let record = unrun_record(&attempt, "no code block");
        return Some(Outcome {
            attempt,
            record,
            markers: ParsedMarkers::default(),
            grade: None,
        });
    }
    let clean = protocol.sanitize(&attempt.code);
    let code = if ctx.instrumentation {
        instrument_or_passthrough(ctx.instrumenter.as_ref(), &clean, protocol).code
    } else {
        clean
    };
    let jail = ctx
        .scratch
        .join(format!("attempt-{:08}", attempt.attempt_id));
    let req = ExecutionRequest {
        attempt_id: attempt.attempt_id,
        instrumented_code: code,
        task: task.clone(),
        jail: jail.clone(),
        limits: Limits {
            wall_timeout: Duration::from_secs_f64(ctx.exec_timeout.min(task.exec_timeout)),
            max_output_bytes: ctx.max_output_bytes,
        },
        wrapper: ctx.wrapper.clone(),
    };
    let outcome = match run_sandboxed(&req, cancel, &|_| {}) {
        RunOutcome::Cancelled => None,
        RunOutcome::Finished(record) => {
            let markers = protocol.parse_markers(&record.stdout);
            let gradeable = record.sandbox_violation.is_none()
                && matches!(record.exit_status, ExitStatus::Ok | ExitStatus::Nonzero(_));
            let grade = if gradeable {
                match grade(&task, &record.workdir) {
                    Ok(g) => Some(g),
                    Err(e) => {
                        log::error!("grading attempt {}: {e}", attempt.attempt_id);
                        None
                    }
                }
            } else {
                None
            };
            Some(Outcome {
                attempt,
                record,
                markers,
                grade,
            })
        }
    };
    remove_jail(&jail);
    outcome
}
