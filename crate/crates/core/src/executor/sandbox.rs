//! Running one guest program in a fresh jail directory.
//!
//! ```text
//! <jail>/program.*   the instrumented program
//! <jail>/input/      copies of the task's public files (guest reads ../input/)
//! <jail>/work/       empty working directory, the guest's cwd
//! ```
//!
//! The guest runs in its own process group, which is killed on timeout,
//! cancellation and after normal exit. Any change to the jail outside
//! `work/` is reported as a sandbox violation. Stronger isolation (mount
//! namespaces, seccomp) comes from an optional wrapper command.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::os::unix::fs::PermissionsExt;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant, SystemTime};

use crate::attempt::{ExecutionRecord, ExitStatus};
use crate::error::{Error, Result};
use crate::task::TaskSpec;

pub const WORK_DIR: &str = "work";
pub const INPUT_DIR: &str = "input";
const PROGRAM_FILE: &str = "program.py";
/// Stands in for the jail path in captured output.
pub const JAIL_ALIAS: &str = "/jail";

/// Shared cancellation flag for one execution.
#[derive(Debug, Clone, Default)]
pub struct CancelToken(Arc<AtomicBool>);

impl CancelToken {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Limits {
    pub wall_timeout: Duration,
    pub max_output_bytes: usize,
}

#[derive(Debug, Clone)]
pub struct ExecutionRequest {
    pub attempt_id: u64,
    pub instrumented_code: String,
    pub task: Arc<TaskSpec>,
    /// Jail directory; created if missing, must be empty.
    pub jail: PathBuf,
    pub limits: Limits,
    /// Command prefix placed before the interpreter, e.g. a container runner.
    pub wrapper: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    Finished(ExecutionRecord),
    Cancelled,
}

fn copy_tree_readonly(src: &Path, dst: &Path) -> Result<()> {
    fs::create_dir_all(dst).map_err(|e| Error::path(dst, e))?;
    for entry in fs::read_dir(src).map_err(|e| Error::path(src, e))? {
        let entry = entry?;
        let from = entry.path();
        let to = dst.join(entry.file_name());
        let ft = entry.file_type()?;
        if ft.is_dir() {
            copy_tree_readonly(&from, &to)?;
        } else if ft.is_file() {
            fs::copy(&from, &to).map_err(|e| Error::path(&from, e))?;
            fs::set_permissions(&to, fs::Permissions::from_mode(0o444))?;
        }
    }
    fs::set_permissions(dst, fs::Permissions::from_mode(0o555))?;
    Ok(())
}

type Listing = BTreeMap<PathBuf, (u64, Option<SystemTime>, u32)>;

/// Everything under `jail` except the working directory.
fn listing(jail: &Path) -> Listing {
    fn walk(dir: &Path, root: &Path, out: &mut Listing) {
        let Ok(rd) = fs::read_dir(dir) else { return };
        for entry in rd.flatten() {
            let path = entry.path();
            let rel = path.strip_prefix(root).unwrap_or(&path).to_path_buf();
            if rel == Path::new(WORK_DIR) {
                continue;
            }
            let Ok(md) = fs::symlink_metadata(&path) else {
                continue;
            };
            out.insert(rel, (md.len(), md.modified().ok(), md.permissions().mode()));
            if md.is_dir() {
                walk(&path, root, out);
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(jail, jail, &mut out);
    out
}

fn diff_listing(before: &Listing, after: &Listing) -> Option<String> {
    for (p, v) in after {
        match before.get(p) {
            None => return Some(format!("created {}", p.display())),
            Some(b) if b != v => return Some(format!("modified {}", p.display())),
            _ => {}
        }
    }
    before
        .keys()
        .find(|p| !after.contains_key(*p))
        .map(|p| format!("removed {}", p.display()))
}

/// Creates the jail layout for a request and returns the working directory.
pub fn prepare_jail(jail: &Path, task: &TaskSpec, code: &str) -> Result<PathBuf> {
    fs::create_dir_all(jail).map_err(|e| Error::path(jail, e))?;
    if fs::read_dir(jail)?.next().is_some() {
        return Err(Error::Config(format!(
            "jail {} is not empty",
            jail.display()
        )));
    }
    let work = jail.join(WORK_DIR);
    fs::create_dir(&work)?;
    copy_tree_readonly(&task.data_dir, &jail.join(INPUT_DIR))?;
    let program = jail.join(PROGRAM_FILE);
    fs::write(&program, code).map_err(|e| Error::path(&program, e))?;
    fs::set_permissions(&program, fs::Permissions::from_mode(0o444))?;
    Ok(work)
}

/// Removes a jail, restoring write permission on read-only directories first.
pub fn remove_jail(jail: &Path) {
    fn make_writable(dir: &Path) {
        let _ = fs::set_permissions(dir, fs::Permissions::from_mode(0o755));
        if let Ok(rd) = fs::read_dir(dir) {
            for e in rd.flatten() {
                if e.file_type().map(|t| t.is_dir()).unwrap_or(false) {
                    make_writable(&e.path());
                }
            }
        }
    }
    make_writable(jail);
    let _ = fs::remove_dir_all(jail);
}

struct Capture {
    buf: Arc<Mutex<Vec<u8>>>,
    truncated: Arc<AtomicBool>,
    done: mpsc::Receiver<()>,
}

fn capture<R: Read + Send + 'static>(mut src: R, cap: usize) -> Capture {
    let buf = Arc::new(Mutex::new(Vec::new()));
    let truncated = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel();
    let (b, t) = (buf.clone(), truncated.clone());
    thread::spawn(move || {
        let mut chunk = [0u8; 8192];
        loop {
            match src.read(&mut chunk) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let mut g = b.lock().unwrap_or_else(|e| e.into_inner());
                    let room = cap.saturating_sub(g.len());
                    if n > room {
                        t.store(true, Ordering::SeqCst);
                    }
                    g.extend_from_slice(&chunk[..n.min(room)]);
                }
            }
        }
        let _ = tx.send(());
    });
    Capture {
        buf,
        truncated,
        done: rx,
    }
}

impl Capture {
    fn finish(self, grace: Duration) -> (String, bool) {
        let _ = self.done.recv_timeout(grace);
        let bytes = self.buf.lock().unwrap_or_else(|e| e.into_inner()).clone();
        (
            String::from_utf8_lossy(&bytes).into_owned(),
            self.truncated.load(Ordering::SeqCst),
        )
    }
}

fn kill_group(pgid: i32) {
    if pgid > 0 {
        // SAFETY: plain syscall; ESRCH for an empty group is ignored.
        unsafe {
            libc::killpg(pgid, libc::SIGKILL);
        }
    }
}

/// Non-zombie processes whose process group is one of `pgids`.
pub fn live_processes_in_groups(pgids: &[i32]) -> Vec<i32> {
    let mut out = Vec::new();
    let Ok(rd) = fs::read_dir("/proc") else {
        return out;
    };
    for e in rd.flatten() {
        let Some(pid) = e.file_name().to_str().and_then(|s| s.parse::<i32>().ok()) else {
            continue;
        };
        let Ok(stat) = fs::read_to_string(e.path().join("stat")) else {
            continue;
        };
        // Fields after the parenthesised command: state ppid pgrp ...
        let Some(rest) = stat.rfind(')').map(|i| &stat[i + 1..]) else {
            continue;
        };
        let f: Vec<&str> = rest.split_whitespace().collect();
        if f.len() < 3 || f[0] == "Z" || f[0] == "X" {
            continue;
        }
        if let Ok(pgrp) = f[2].parse::<i32>() {
            if pgids.contains(&pgrp) {
                out.push(pid);
            }
        }
    }
    out
}

fn base_record(req: &ExecutionRequest, work: PathBuf, status: ExitStatus) -> ExecutionRecord {
    ExecutionRecord {
        attempt_id: req.attempt_id,
        instrumented_code: req.instrumented_code.clone(),
        exit_status: status,
        stdout: String::new(),
        stderr: String::new(),
        stdout_truncated: false,
        stderr_truncated: false,
        duration: 0.0,
        submission_present: false,
        workdir: work,
        sandbox_violation: None,
    }
}

/// Replaces the jail's absolute path with [`JAIL_ALIAS`] so that output
/// does not depend on where the scratch directory was created.
fn redact_jail(text: String, jail: &Path) -> String {
    let mut out = text;
    let canonical = fs::canonicalize(jail).ok();
    for p in std::iter::once(jail).chain(canonical.as_deref()) {
        let s = p.to_string_lossy();
        if !s.is_empty() && out.contains(s.as_ref()) {
            out = out.replace(s.as_ref(), JAIL_ALIAS);
        }
    }
    out
}

/// Runs the request to completion, timeout or cancellation. `on_spawn`
/// receives the guest's process-group id.
pub fn run_sandboxed(
    req: &ExecutionRequest,
    cancel: Option<&CancelToken>,
    on_spawn: &dyn Fn(i32),
) -> RunOutcome {
    let work = req.jail.join(WORK_DIR);
    if cancel.is_some_and(|c| c.is_cancelled()) {
        return RunOutcome::Cancelled;
    }
    if let Err(e) = prepare_jail(&req.jail, &req.task, &req.instrumented_code) {
        return RunOutcome::Finished(base_record(
            req,
            work,
            ExitStatus::SpawnError(e.to_string()),
        ));
    }
    let before = listing(&req.jail);
    let argv: Vec<String> = req
        .wrapper
        .iter()
        .chain(req.task.interpreter.iter())
        .cloned()
        .chain(std::iter::once(format!("../{PROGRAM_FILE}")))
        .collect();
    let mut cmd = Command::new(&argv[0]);
    cmd.args(&argv[1..])
        .current_dir(&work)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .env_clear()
        .env(
            "PATH",
            std::env::var_os("PATH").unwrap_or_else(|| "/usr/bin:/bin".into()),
        )
        .env("HOME", &work)
        .env("LANG", "C.UTF-8")
        .env("PYTHONHASHSEED", "0")
        .env("PYTHONDONTWRITEBYTECODE", "1")
        .process_group(0);
    let start = Instant::now();
    let mut child = match cmd.spawn() {
        Ok(c) => c,
        Err(e) => {
            return RunOutcome::Finished(base_record(
                req,
                work,
                ExitStatus::SpawnError(e.to_string()),
            ))
        }
    };
    let pgid = child.id() as i32;
    on_spawn(pgid);
    let out = capture(
        child.stdout.take().expect("piped"),
        req.limits.max_output_bytes,
    );
    let err = capture(
        child.stderr.take().expect("piped"),
        req.limits.max_output_bytes,
    );
    let (tx, rx) = mpsc::channel();
    let waiter = thread::spawn(move || {
        let st = child.wait();
        let _ = tx.send((st, Instant::now()));
    });

    let deadline = start + req.limits.wall_timeout;
    let poll = Duration::from_millis(5);
    let mut status = None;
    let mut cancelled = false;
    let mut end = start;
    loop {
        let now = Instant::now();
        if now >= deadline {
            break;
        }
        let wait = if cancel.is_some() {
            poll.min(deadline - now)
        } else {
            deadline - now
        };
        match rx.recv_timeout(wait) {
            Ok((st, t)) => {
                status = Some(st);
                end = t;
                break;
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {
                if cancel.is_some_and(|c| c.is_cancelled()) {
                    cancelled = true;
                    break;
                }
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => break,
        }
    }
    kill_group(pgid);
    let _ = waiter.join();
    if cancelled {
        return RunOutcome::Cancelled;
    }
    let grace = Duration::from_millis(500);
    let (stdout, stdout_truncated) = out.finish(grace);
    let (stderr, stderr_truncated) = err.finish(grace);
    let (stdout, stderr) = (
        redact_jail(stdout, &req.jail),
        redact_jail(stderr, &req.jail),
    );
    let exit_status = match status {
        None => ExitStatus::Timeout,
        Some(Err(e)) => ExitStatus::SpawnError(e.to_string()),
        Some(Ok(st)) => match (st.code(), st.signal()) {
            (Some(0), _) => ExitStatus::Ok,
            (Some(c), _) => ExitStatus::Nonzero(c),
            (None, Some(sig)) => ExitStatus::Nonzero(-sig),
            (None, None) => ExitStatus::Nonzero(-1),
        },
    };
    let duration = if exit_status == ExitStatus::Timeout {
        req.limits.wall_timeout.as_secs_f64()
    } else {
        end.saturating_duration_since(start).as_secs_f64()
    };
    let submission_present = fs::symlink_metadata(work.join(&req.task.submission_relpath))
        .map(|m| m.is_file())
        .unwrap_or(false);
    let sandbox_violation = diff_listing(&before, &listing(&req.jail));
    RunOutcome::Finished(ExecutionRecord {
        attempt_id: req.attempt_id,
        instrumented_code: req.instrumented_code.clone(),
        exit_status,
        stdout,
        stderr,
        stdout_truncated,
        stderr_truncated,
        duration,
        submission_present,
        workdir: work,
        sandbox_violation,
    })
}
