mod common;

use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use common::{request, run_raw};
use mlerl::envs::make_duration_bandit;
use mlerl::executor::{
    live_processes_in_groups, remove_jail, run_sandboxed, CancelToken, RunOutcome, JAIL_ALIAS,
};
use mlerl::instrument::grade;
use mlerl::{ExitStatus, TaskSpec};

fn task(dir: &std::path::Path) -> TaskSpec {
    make_duration_bandit(&dir.join("tasks/t"), 0.01, 0.01, 0.5, 0.5)
        .unwrap()
        .spec
}

#[test]
fn measures_sleep_duration() {
    let dir = tempfile::tempdir().unwrap();
    let t = task(dir.path());
    let rec = run_raw(
        &t,
        "import time\ntime.sleep(0.3)\nprint('hi')\n",
        &dir.path().join("j"),
        10.0,
    );
    assert_eq!(rec.exit_status, ExitStatus::Ok);
    assert_eq!(rec.stdout, "hi\n");
    assert!(
        rec.duration >= 0.3 && rec.duration < 3.0,
        "{}",
        rec.duration
    );
    assert!(!rec.submission_present);
}

#[test]
fn timeout_kills_the_group() {
    let dir = tempfile::tempdir().unwrap();
    let t = task(dir.path());
    let code = "import subprocess, time\nsubprocess.Popen(['sleep', '60'])\ntime.sleep(60)\n";
    let groups = Arc::new(Mutex::new(Vec::new()));
    let g2 = groups.clone();
    let start = Instant::now();
    let out = run_sandboxed(
        &request(&t, code, &dir.path().join("j"), 0.5),
        None,
        &move |g| g2.lock().unwrap().push(g),
    );
    let RunOutcome::Finished(rec) = out else {
        panic!("cancelled")
    };
    assert_eq!(rec.exit_status, ExitStatus::Timeout);
    assert_eq!(rec.duration, 0.5);
    assert!(start.elapsed() < Duration::from_secs(5));
    let groups = groups.lock().unwrap().clone();
    thread::sleep(Duration::from_millis(200));
    assert!(live_processes_in_groups(&groups).is_empty());
}

#[test]
fn cancellation_stops_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let t = task(dir.path());
    let token = CancelToken::new();
    let t2 = token.clone();
    let canceller = thread::spawn(move || {
        thread::sleep(Duration::from_millis(300));
        t2.cancel();
    });
    let start = Instant::now();
    let out = run_sandboxed(
        &request(
            &t,
            "import time\ntime.sleep(30)\n",
            &dir.path().join("j"),
            60.0,
        ),
        Some(&token),
        &|_| {},
    );
    canceller.join().unwrap();
    assert_eq!(out, RunOutcome::Cancelled);
    assert!(start.elapsed() < Duration::from_secs(5));
}

#[test]
fn output_is_truncated() {
    let dir = tempfile::tempdir().unwrap();
    let t = task(dir.path());
    let rec = run_raw(&t, "print('x' * 200000)\n", &dir.path().join("j"), 10.0);
    assert!(rec.stdout_truncated);
    assert!(rec.stdout.len() <= 1 << 16);
}

#[test]
fn writing_outside_work_is_a_violation() {
    let dir = tempfile::tempdir().unwrap();
    let t = task(dir.path());
    let code =
        "import os\nos.chmod('../input', 0o755)\nopen('../input/extra.csv', 'w').write('id\\n')\n";
    let rec = run_raw(&t, code, &dir.path().join("j"), 10.0);
    assert!(rec.sandbox_violation.is_some(), "{rec:?}");
}

#[test]
fn private_answers_are_not_reachable_by_relative_path() {
    let dir = tempfile::tempdir().unwrap();
    let t = task(dir.path());
    let code = "import os\nfound = []\nfor root, dirs, files in os.walk('..'):\n    found += files\nprint(sorted(found))\n";
    let rec = run_raw(&t, code, &dir.path().join("j"), 10.0);
    assert_eq!(rec.exit_status, ExitStatus::Ok, "{}", rec.stderr);
    assert!(!rec.stdout.contains("answers"), "{}", rec.stdout);
    assert!(rec.stdout.contains("test.csv"));
}

#[test]
fn jail_path_is_redacted_from_output() {
    let dir = tempfile::tempdir().unwrap();
    let t = task(dir.path());
    let jail = dir.path().join("jail-x");
    let rec = run_raw(
        &t,
        "import os\nprint(os.getcwd())\nraise SystemExit(3)\n",
        &jail,
        10.0,
    );
    assert_eq!(rec.exit_status, ExitStatus::Nonzero(3));
    assert_eq!(rec.stdout, format!("{JAIL_ALIAS}/work\n"));
    assert!(!rec.stdout.contains(&*jail.to_string_lossy()));
}

#[test]
fn symlinked_submission_is_missing() {
    let dir = tempfile::tempdir().unwrap();
    let t = task(dir.path());
    let code = "import os\nos.symlink('../input/test.csv', 'submission.csv')\n";
    let jail = dir.path().join("j");
    let rec = run_raw(&t, code, &jail, 10.0);
    assert!(!rec.submission_present);
    let g = grade(&t, &rec.workdir).unwrap();
    assert!(g.score().is_none());
    remove_jail(&jail);
    assert!(!jail.exists());
}
