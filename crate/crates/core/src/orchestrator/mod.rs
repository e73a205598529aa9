//! The training loop: draw `m * B` attempts, run them, keep the first `B`
//! completions, reward, weight by duration, update, and refill the
//! previous-solution buffer. Also checkpointing and evaluation.

pub mod checkpoint;
pub mod metrics;
mod rollout;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tempfile::TempDir;

use crate::attempt::{Mode, TrajectoryBatch, TrajectoryEntry};
use crate::config::{CollectionMode, RunConfig};
use crate::error::{Error, Result};
use crate::executor::{ContinuousCollector, Job, LeasedSampler, WorkerPool};
use crate::instrument::{
    compute_reward, execution_feedback_summary, MarkerProtocol, RewardOptions,
};
use crate::learner::{
    apply_update, duration_weights, estimate_advantages, ppo_loss_and_grad, LossReport, PpoConfig,
};
use crate::policy::{LibraryPolicy, PolicySnapshot, StateKey, TaskLibrary};
use crate::selfimprove::{test_time_best, PrevSolutionBuffer, PrevSolutionEntry};
use crate::task::TaskSpec;

pub use checkpoint::{Checkpoint, TrainState};
pub use metrics::{read_metrics, IterationMetrics, MetricsWriter, METRICS_FILE, METRICS_HEADER};
use rollout::{execute, Outcome, RunContext};

pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Loads the library of every task and checks that ids agree.
pub fn load_libraries(tasks: &[TaskSpec]) -> Result<Vec<TaskLibrary>> {
    tasks
        .iter()
        .map(|t| {
            let lib = TaskLibrary::load(&t.library_path())?;
            if lib.task_id != t.task_id {
                return Err(Error::Task {
                    task: t.task_id.clone(),
                    reason: format!("library is for task `{}`", lib.task_id),
                });
            }
            Ok(lib)
        })
        .collect()
}

fn scratch_dir(cfg: &RunConfig) -> Result<(PathBuf, Option<TempDir>)> {
    match &cfg.scratch_root {
        Some(root) => {
            std::fs::create_dir_all(root).map_err(|e| Error::path(root, e))?;
            let dir = tempfile::Builder::new().prefix("mlerl-").tempdir_in(root)?;
            Ok((dir.path().to_path_buf(), Some(dir)))
        }
        None => {
            let dir = tempfile::Builder::new().prefix("mlerl-").tempdir()?;
            Ok((dir.path().to_path_buf(), Some(dir)))
        }
    }
}

fn quantize(d: f64, q: f64) -> f64 {
    if q > 0.0 {
        (d / q).round() * q
    } else {
        d
    }
}

struct WorkerState {
    rng: ChaCha8Rng,
    lease: LeasedSampler<Option<crate::attempt::SolutionAttempt>>,
}

/// Continuous-collection machinery: workers read the newest snapshot and
/// buffer through shared handles published after each update.
struct ContinuousRun {
    policy: Arc<RwLock<PolicySnapshot>>,
    buffer: Arc<RwLock<PrevSolutionBuffer>>,
    next_id: Arc<AtomicU64>,
    collector: ContinuousCollector<Outcome>,
}

pub struct Trainer {
    cfg: RunConfig,
    ctx: Arc<RunContext>,
    policy: LibraryPolicy,
    reference: PolicySnapshot,
    buffer: PrevSolutionBuffer,
    rng: ChaCha8Rng,
    state: TrainState,
    out_dir: PathBuf,
    metrics: MetricsWriter,
    history: Vec<IterationMetrics>,
    last_batch: Option<TrajectoryBatch>,
    pool: WorkerPool,
    continuous: Option<ContinuousRun>,
    started: Instant,
    _scratch: Option<TempDir>,
}

impl Trainer {
    /// Fresh run: uniform policy over every task's library, metrics file
    /// created under `out_dir`.
    pub fn new(cfg: RunConfig, tasks: Vec<TaskSpec>, out_dir: &Path) -> Result<Self> {
        cfg.validate()?;
        let libs = load_libraries(&tasks)?;
        let policy = LibraryPolicy::from_task_libraries(&libs)?;
        let reference = policy.clone();
        let state = TrainState {
            task_ids: tasks.iter().map(|t| t.task_id.clone()).collect(),
            ..Default::default()
        };
        let ck = Checkpoint {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            buffer: PrevSolutionBuffer::new(cfg.buffer_capacity),
            policy,
            reference,
            state,
            config: cfg,
        };
        Self::from_checkpoint(ck, tasks, out_dir, MetricsWriter::create(out_dir)?)
    }

    /// Continues from a checkpoint directory; metrics are appended to
    /// `out_dir/metrics.csv`.
    pub fn resume(checkpoint_dir: &Path, task_root: &Path, out_dir: &Path) -> Result<Self> {
        let ck = Checkpoint::load(checkpoint_dir)?;
        let tasks = ck
            .state
            .task_ids
            .iter()
            .map(|id| TaskSpec::load(task_root, id))
            .collect::<Result<Vec<_>>>()?;
        let libs = load_libraries(&tasks)?;
        let fresh = LibraryPolicy::from_task_libraries(&libs)?;
        if fresh.header().states != ck.policy.header().states {
            return Err(Error::Checkpoint(
                "task libraries changed since the checkpoint".into(),
            ));
        }
        Self::from_checkpoint(ck, tasks, out_dir, MetricsWriter::append(out_dir)?)
    }

    fn from_checkpoint(
        ck: Checkpoint,
        tasks: Vec<TaskSpec>,
        out_dir: &Path,
        metrics: MetricsWriter,
    ) -> Result<Self> {
        let cfg = ck.config;
        cfg.validate()?;
        let (scratch, guard) = scratch_dir(&cfg)?;
        let ctx = Arc::new(RunContext::new(&cfg, tasks, scratch)?);
        Ok(Self {
            pool: WorkerPool::new(cfg.num_workers),
            cfg,
            ctx,
            policy: ck.policy,
            reference: ck.reference.snapshot(),
            buffer: ck.buffer,
            rng: ck.rng,
            state: ck.state,
            out_dir: out_dir.to_path_buf(),
            metrics,
            history: Vec::new(),
            last_batch: None,
            continuous: None,
            started: Instant::now(),
            _scratch: guard,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn policy(&self) -> &LibraryPolicy {
        &self.policy
    }

    pub fn buffer(&self) -> &PrevSolutionBuffer {
        &self.buffer
    }

    /// Completed iterations, including those before a resume.
    pub fn iteration(&self) -> usize {
        self.state.iteration
    }

    /// Metrics of the iterations run by this process.
    pub fn history(&self) -> &[IterationMetrics] {
        &self.history
    }

    pub fn last_batch(&self) -> Option<&TrajectoryBatch> {
        self.last_batch.as_ref()
    }

    fn wallclock(&self) -> f64 {
        self.state.wallclock_s + self.started.elapsed().as_secs_f64()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut state = self.state.clone();
        state.wallclock_s = self.wallclock();
        if let Some(c) = &self.continuous {
            state.next_attempt_id = c.next_id.load(Ordering::SeqCst);
        }
        Checkpoint {
            policy: self.policy.clone(),
            reference: (*self.reference).clone(),
            buffer: self.buffer.clone(),
            rng: self.rng.clone(),
            state,
            config: self.cfg.clone(),
        }
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        self.checkpoint().save(dir)
    }

    fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.out_dir.join(CHECKPOINT_DIR).join(name)
    }

    /// One iteration. A worker-pool failure saves an `abort` checkpoint
    /// before the error is returned.
    pub fn step(&mut self) -> Result<IterationMetrics> {
        let collected = match self.cfg.collection_mode {
            CollectionMode::BatchOverprovision => self.collect_batch(),
            CollectionMode::Continuous => self.collect_continuous(),
        };
        let (old, outcomes) = match collected {
            Ok(x) => x,
            Err(e @ Error::Liveness(_)) => {
                let path = self.checkpoint_path("abort");
                if let Err(ce) = self.save_checkpoint(&path) {
                    log::error!("saving abort checkpoint: {ce}");
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let m = self.learn(old, outcomes)?;
        if let Some(c) = &self.continuous {
            *c.policy.write().unwrap_or_else(|e| e.into_inner()) = self.policy.snapshot();
            *c.buffer.write().unwrap_or_else(|e| e.into_inner()) = self.buffer.clone();
        }
        self.metrics.write(&m)?;
        self.history.push(m.clone());
        let every = self.cfg.checkpoint_interval;
        if every > 0 && self.state.iteration.is_multiple_of(every) {
            self.save_checkpoint(
                &self.checkpoint_path(&format!("iter-{:06}", self.state.iteration)),
            )?;
        }
        Ok(m)
    }

    /// Runs until `total_iterations` are complete, then writes the `final`
    /// checkpoint.
    pub fn run(&mut self) -> Result<PathBuf> {
        while self.state.iteration < self.cfg.total_iterations {
            self.step()?;
        }
        let path = self.checkpoint_path("final");
        self.save_checkpoint(&path)?;
        Ok(path)
    }

    fn next_attempt_id(&mut self) -> u64 {
        let id = self.state.next_attempt_id;
        self.state.next_attempt_id += 1;
        id
    }

    fn collect_batch(&mut self) -> Result<(PolicySnapshot, Vec<Outcome>)> {
        let old = self.policy.snapshot();
        let mut jobs: Vec<Job<Outcome>> = Vec::with_capacity(self.cfg.launch_count());
        for _ in 0..self.cfg.launch_count() {
            let mut attempt = self.ctx.draw(
                &old,
                &self.buffer,
                self.cfg.self_improve,
                self.cfg.improve_pick,
                &mut self.rng,
            )?;
            attempt.attempt_id = self.next_attempt_id();
            let protocol = MarkerProtocol::fresh(self.cfg.marker_mode, &mut self.rng);
            let ctx = self.ctx.clone();
            jobs.push(Box::new(move |cancel| {
                execute(&ctx, attempt, &protocol, Some(cancel))
            }));
        }
        let mut kept =
            self.pool
                .collect_batch(jobs, self.cfg.batch_size, self.cfg.straggler_action)?;
        kept.sort_by_key(|(i, _)| *i);
        Ok((old, kept.into_iter().map(|(_, o)| o).collect()))
    }

    fn start_continuous(&mut self) -> ContinuousRun {
        let policy = Arc::new(RwLock::new(self.policy.snapshot()));
        let buffer = Arc::new(RwLock::new(self.buffer.clone()));
        let next_id = Arc::new(AtomicU64::new(self.state.next_attempt_id));
        let workers = self.cfg.num_workers;
        let states: Arc<Vec<Mutex<WorkerState>>> = Arc::new(
            (0..workers)
                .map(|w| {
                    let seed = self
                        .cfg
                        .seed
                        .wrapping_add((w as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
                        .wrapping_add(self.state.iteration as u64);
                    Mutex::new(WorkerState {
                        rng: ChaCha8Rng::seed_from_u64(seed),
                        lease: LeasedSampler::new(self.cfg.lease_s),
                    })
                })
                .collect(),
        );
        let (ctx, cfg) = (self.ctx.clone(), self.cfg.clone());
        let (p, b, ids) = (policy.clone(), buffer.clone(), next_id.clone());
        let start = Instant::now();
        let collector = ContinuousCollector::start(workers, move |w, cancel| {
            let mut st = states[w].lock().unwrap_or_else(|e| e.into_inner());
            let WorkerState { rng, lease } = &mut *st;
            let now = start.elapsed().as_secs_f64();
            let choice = lease.next(now, || {
                let snapshot = p.read().unwrap_or_else(|e| e.into_inner()).clone();
                let buf = b.read().unwrap_or_else(|e| e.into_inner());
                match ctx.draw(&snapshot, &buf, cfg.self_improve, cfg.improve_pick, rng) {
                    Ok(a) => Some(a),
                    Err(e) => {
                        log::error!("drawing an attempt: {e}");
                        None
                    }
                }
            });
            let Some(mut attempt) = choice else {
                lease.reset();
                drop(st);
                thread::sleep(Duration::from_millis(50));
                return None;
            };
            // A leased action re-runs under the newest snapshot's share of
            // time, so it is tagged with that snapshot.
            let snapshot = p.read().unwrap_or_else(|e| e.into_inner()).clone();
            let key = StateKey::new(&attempt.task_id, attempt.mode);
            if let Ok(lp) = snapshot
                .state_index(&key)
                .and_then(|s| snapshot.log_prob_at(s, &attempt.action, cfg.temperature))
            {
                attempt.logprob_data = vec![lp];
                attempt.policy_version = snapshot.version();
            }
            attempt.attempt_id = ids.fetch_add(1, Ordering::SeqCst);
            let protocol = MarkerProtocol::fresh(cfg.marker_mode, rng);
            drop(st);
            execute(&ctx, attempt, &protocol, Some(cancel))
        });
        ContinuousRun {
            policy,
            buffer,
            next_id,
            collector,
        }
    }

    fn collect_continuous(&mut self) -> Result<(PolicySnapshot, Vec<Outcome>)> {
        if self.continuous.is_none() {
            self.continuous = Some(self.start_continuous());
        }
        let run = self.continuous.as_ref().expect("started");
        let old = self.policy.snapshot();
        let min = old.version().saturating_sub(self.cfg.max_staleness);
        let deadline = Instant::now() + Duration::from_secs_f64(self.cfg.exec_timeout * 4.0 + 60.0);
        let mut out = Vec::with_capacity(self.cfg.batch_size);
        while out.len() < self.cfg.batch_size {
            let need = self.cfg.batch_size - out.len();
            let left = deadline.saturating_duration_since(Instant::now());
            for o in run.collector.next_batch(need, Some(left))? {
                if o.attempt.policy_version >= min {
                    out.push(o);
                }
            }
        }
        self.state.next_attempt_id = run.next_id.load(Ordering::SeqCst);
        Ok((old, out))
    }

    fn best_summary(&self) -> Option<f64> {
        let ids = &self.state.task_ids;
        if ids.len() == 1 {
            return self.state.best.get(&ids[0]).copied();
        }
        let vals: Vec<f64> = ids
            .iter()
            .filter_map(|id| self.state.best.get(id).copied())
            .collect();
        (vals.len() == ids.len()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    fn learn(&mut self, old: PolicySnapshot, outcomes: Vec<Outcome>) -> Result<IterationMetrics> {
        let cfg = &self.cfg;
        let opts = RewardOptions {
            valid_clamp: cfg.valid_reward_clamp,
            normalize: cfg.reward_normalize,
        };
        let mut entries = Vec::with_capacity(outcomes.len());
        let mut prev = Vec::new();
        for o in outcomes {
            let task = self.ctx.task(&o.attempt.task_id)?.clone();
            let mut record = o.record;
            if cfg.deterministic {
                record.duration = quantize(record.duration, cfg.timing_quantum_s);
            }
            let reward = compute_reward(
                &record,
                &o.markers.matched,
                o.grade.as_ref(),
                task.metric_direction,
                opts,
            );
            if let Some(raw) = reward.raw_score {
                let best = self.state.best.entry(task.task_id.clone()).or_insert(raw);
                *best = task.metric_direction.best(*best, raw);
            }
            if reward.valid || cfg.include_failed_in_buffer {
                prev.push(PrevSolutionEntry {
                    task_id: task.task_id.clone(),
                    attempt_id: o.attempt.attempt_id,
                    plan: o.attempt.plan.clone(),
                    code: o.attempt.code.clone(),
                    action: o.attempt.action.clone(),
                    feedback: execution_feedback_summary(&record, &o.markers, o.grade.as_ref()),
                    reward: reward.final_reward,
                    seq: 0,
                });
            }
            entries.push(TrajectoryEntry::new(o.attempt, record, reward));
        }
        let mut batch = TrajectoryBatch::new(entries);
        let adv = estimate_advantages(
            &batch,
            cfg.advantage_estimator,
            &mut self.state.values,
            cfg.critic_learning_rate,
        )?;
        batch.set_advantages(&adv);
        let durations = batch.durations();
        batch.set_weights(&duration_weights(
            &durations,
            cfg.duration_weighting,
            cfg.duration_floor_s,
            cfg.weight_clamp,
        ));
        let ppo = PpoConfig::from_run(cfg);
        let mut report: Option<LossReport> = None;
        for _ in 0..cfg.inner_epochs {
            let (r, grad) = ppo_loss_and_grad(&batch, &self.policy, &old, &self.reference, &ppo)?;
            report.get_or_insert(r);
            match apply_update(&mut self.policy, &grad, cfg.learning_rate, cfg.grad_clip) {
                Ok(_) => {}
                Err(Error::Update(m)) => {
                    log::warn!("iteration {}: {m}", self.state.iteration + 1);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let report = report.unwrap_or_default();
        for e in prev {
            self.buffer.insert(e);
        }
        self.state.iteration += 1;
        let n = batch.len() as f64;
        let sum_duration: f64 = durations.iter().sum();
        let wallclock = if cfg.deterministic {
            self.state.logical_clock += sum_duration / cfg.num_workers as f64;
            self.state.logical_clock
        } else {
            self.wallclock()
        };
        let m = IterationMetrics {
            iteration: self.state.iteration,
            mean_reward: batch.rewards().iter().sum::<f64>() / n,
            mean_duration_s: sum_duration / n,
            valid_fraction: batch.entries.iter().filter(|e| e.reward.valid).count() as f64 / n,
            best_score_so_far: self.best_summary(),
            policy_entropy: report.entropy_term,
            clip_fraction: report.clip_fraction,
            kl: report.kl_term,
            wallclock_s: wallclock,
        };
        self.last_batch = Some(batch);
        Ok(m)
    }
}

/// Summary of a finished training run.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub metrics: Vec<IterationMetrics>,
    pub final_checkpoint: PathBuf,
}

/// Trains for `cfg.total_iterations` iterations on `tasks`, writing metrics
/// and checkpoints under `out_dir`.
pub fn train(cfg: RunConfig, tasks: Vec<TaskSpec>, out_dir: &Path) -> Result<TrainSummary> {
    let mut t = Trainer::new(cfg, tasks, out_dir)?;
    let final_checkpoint = t.run()?;
    Ok(TrainSummary {
        metrics: t.history().to_vec(),
        final_checkpoint,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub scratch_attempt: u64,
    pub improve_attempt: u64,
    pub scratch_score: Option<f64>,
    pub improved_score: Option<f64>,
    /// Best of the two under the task's direction.
    pub best: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_id: String,
    pub n_samples: usize,
    pub mean_score: Option<f64>,
    /// Best per-sample score in the metric's direction (the minimum for errors).
    pub max_score: Option<f64>,
    pub valid_fraction: f64,
    pub records: Vec<EvalRecord>,
}

const EVAL_SALT: u64 = 0x6576_616c;

fn run_all(
    pool: &WorkerPool,
    ctx: &Arc<RunContext>,
    jobs: Vec<(crate::attempt::SolutionAttempt, MarkerProtocol)>,
) -> Result<Vec<Outcome>> {
    let n = jobs.len();
    let jobs: Vec<Job<Outcome>> = jobs
        .into_iter()
        .map(|(a, p)| {
            let ctx = ctx.clone();
            Box::new(move |c: &crate::executor::CancelToken| execute(&ctx, a, &p, Some(c)))
                as Job<Outcome>
        })
        .collect();
    let mut out = pool.collect_batch(jobs, n, crate::config::StragglerAction::Cancel)?;
    out.sort_by_key(|(i, _)| *i);
    Ok(out.into_iter().map(|(_, o)| o).collect())
}

/// Draws `n_samples` scratch attempts and one improve attempt per scratch
/// attempt; each sample scores the better of its two solutions.
pub fn evaluate_policy(
    cfg: &RunConfig,
    policy: &LibraryPolicy,
    task: TaskSpec,
    n_samples: usize,
) -> Result<EvalReport> {
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be >= 1".into()));
    }
    let direction = task.metric_direction;
    let task_id = task.task_id.clone();
    let (scratch, _guard) = scratch_dir(cfg)?;
    let ctx = Arc::new(RunContext::new(cfg, vec![task], scratch)?);
    let pool = WorkerPool::new(cfg.num_workers);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ EVAL_SALT);
    let mut jobs = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let mut a = ctx.choose(policy, 0, Mode::Scratch, None, &mut rng)?;
        a.attempt_id = i as u64;
        jobs.push((a, MarkerProtocol::fresh(cfg.marker_mode, &mut rng)));
    }
    let scratch_runs = run_all(&pool, &ctx, jobs)?;
    let mut jobs = Vec::with_capacity(n_samples);
    for (i, o) in scratch_runs.iter().enumerate() {
        let parent = PrevSolutionEntry {
            task_id: task_id.clone(),
            attempt_id: o.attempt.attempt_id,
            plan: o.attempt.plan.clone(),
            code: o.attempt.code.clone(),
            action: o.attempt.action.clone(),
            feedback: execution_feedback_summary(&o.record, &o.markers, o.grade.as_ref()),
            reward: 0.0,
            seq: 0,
        };
        let mut a = ctx.choose(policy, 0, Mode::Improve, Some(&parent), &mut rng)?;
        a.attempt_id = (n_samples + i) as u64;
        jobs.push((a, MarkerProtocol::fresh(cfg.marker_mode, &mut rng)));
    }
    let improve_runs = run_all(&pool, &ctx, jobs)?;
    let valid_score = |o: &Outcome| {
        o.grade
            .as_ref()
            .and_then(|g| g.score())
            .filter(|s| s.is_finite())
    };
    let records: Vec<EvalRecord> = scratch_runs
        .iter()
        .zip(&improve_runs)
        .map(|(s, i)| {
            let (a, b) = (valid_score(s), valid_score(i));
            EvalRecord {
                scratch_attempt: s.attempt.attempt_id,
                improve_attempt: i.attempt.attempt_id,
                scratch_score: a,
                improved_score: b,
                best: test_time_best(a, b, direction).ok(),
            }
        })
        .collect();
    let bests: Vec<f64> = records.iter().filter_map(|r| r.best).collect();
    let mean_score = (!bests.is_empty()).then(|| bests.iter().sum::<f64>() / bests.len() as f64);
    let max_score = bests.iter().copied().reduce(|a, b| direction.best(a, b));
    Ok(EvalReport {
        task_id,
        n_samples,
        mean_score,
        max_score,
        valid_fraction: bests.len() as f64 / n_samples as f64,
        records,
    })
}

/// [`evaluate_policy`] with the policy and configuration of a checkpoint.
pub fn evaluate(
    checkpoint_dir: &Path,
    task_root: &Path,
    task_id: &str,
    n_samples: usize,
) -> Result<EvalReport> {
    let ck = Checkpoint::load(checkpoint_dir)?;
    let task = TaskSpec::load(task_root, task_id)?;
    evaluate_policy(&ck.config, &ck.policy, task, n_samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization() {
        assert_eq!(quantize(0.04, 0.1), 0.0);
        assert_eq!(quantize(0.26, 0.1), 0.30000000000000004);
        assert_eq!(quantize(0.26, 0.0), 0.26);
    }
}
