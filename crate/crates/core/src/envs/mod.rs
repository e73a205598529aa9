//! Synthetic tasks and guest-program libraries.
//!
//! Every generator writes a complete task directory (`spec.json`,
//! `library.json`, `prepared/public/`, `private/answers.csv`) and returns the
//! loaded spec, the library and the reference programs it is built from.
//! Generation is a pure function of the arguments.

pub mod guests;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrument::markers::{MarkerProtocol, MarkerStage};
use crate::instrument::PatternInserter;
use crate::policy::{Fragment, Slot, SolutionLibrary, TaskLibrary};
use crate::task::{GraderSpec, Metric, TaskSpec, PRIVATE_DIR, PUBLIC_DIR};

/// Number of features in tabular data.
pub const TABULAR_FEATURES: usize = 4;

const GUEST_INTERPRETER: [&str; 3] = ["python3", "-I", "-S"];

/// A reference guest program with its declared behaviour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuestProgram {
    pub name: String,
    /// Marker-free source.
    pub code: String,
    /// Furthest marker stage the program reaches once instrumented.
    pub expected_stage: Option<MarkerStage>,
    /// Intended run time from explicit sleeps, excluding interpreter start.
    pub duration_s: f64,
    /// Grader score when the program is valid.
    pub expected_score: Option<f64>,
}

impl GuestProgram {
    /// Variant that prints the plain markers itself, for runs without an
    /// instrumenter.
    pub fn with_plain_markers(&self) -> String {
        PatternInserter::apply(&self.code, &MarkerProtocol::plain())
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedTask {
    pub spec: TaskSpec,
    pub library: TaskLibrary,
    pub programs: Vec<GuestProgram>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TabularKind {
    Regression,
    Classification,
}

fn task_id_of(dir: &Path) -> Result<String> {
    dir.file_name()
        .and_then(|n| n.to_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Config(format!("task directory {} has no name", dir.display())))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::path(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::path(path, e))
}

struct TaskFiles<'a> {
    description: String,
    metric: Metric,
    public: Vec<(&'a str, String)>,
    answers: String,
    submission_example: String,
    exec_timeout: f64,
    packages: Vec<String>,
}

fn write_task(dir: &Path, files: TaskFiles<'_>, library: &TaskLibrary) -> Result<TaskSpec> {
    let public = dir.join(PUBLIC_DIR);
    for (name, text) in &files.public {
        write_file(&public.join(name), text)?;
    }
    write_file(&dir.join(PRIVATE_DIR).join("answers.csv"), &files.answers)?;
    let spec = TaskSpec {
        task_id: task_id_of(dir)?,
        description: files.description,
        data_dir: public,
        submission_relpath: PathBuf::from("submission.csv"),
        metric_direction: files.metric.natural_direction(),
        grader: GraderSpec {
            metric: files.metric,
            answer_path: dir.join(PRIVATE_DIR).join("answers.csv"),
            id_column: "id".into(),
            target_column: "y".into(),
        },
        exec_timeout: files.exec_timeout,
        interpreter: GUEST_INTERPRETER.iter().map(|s| s.to_string()).collect(),
        packages: files.packages,
        submission_example: files.submission_example,
        data_files: files.public.iter().map(|(n, _)| n.to_string()).collect(),
        task_dir: dir.to_path_buf(),
    };
    spec.save()?;
    library.save(&spec.library_path())?;
    TaskSpec::load_dir(dir)
}

fn program_fragment(p: &GuestProgram, plan: &str) -> Fragment {
    Fragment {
        label: p.name.clone(),
        plan: plan.to_string(),
        code: p.code.clone(),
    }
}

/// Two-armed bandit: a fast program scoring `r_fast` and a slow one scoring
/// `r_slow`. Scores are accuracies over 100 test rows, so they are rounded to
/// hundredths.
pub fn make_duration_bandit(
    dir: &Path,
    dt_fast: f64,
    dt_slow: f64,
    r_fast: f64,
    r_slow: f64,
) -> Result<GeneratedTask> {
    if !(dt_fast > 0.0 && dt_fast <= dt_slow) {
        return Err(Error::Config("bandit needs 0 < dt_fast <= dt_slow".into()));
    }
    if !((0.0..=1.0).contains(&r_fast) && (0.0..=1.0).contains(&r_slow)) {
        return Err(Error::Config("bandit scores must lie in [0, 1]".into()));
    }
    const ROWS: usize = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(0xBA9D);
    let truth: Vec<u8> = (0..ROWS).map(|_| rng.gen_range(0..2)).collect();
    let labels_for = |score: f64| -> String {
        let correct = (score * ROWS as f64).round() as usize;
        truth
            .iter()
            .enumerate()
            .map(|(i, &t)| if i < correct { t } else { 1 - t })
            .map(|b| char::from(b'0' + b))
            .collect()
    };
    let mut test = String::from("id\n");
    let mut answers = String::from("id,y\n");
    for (i, t) in truth.iter().enumerate() {
        let _ = writeln!(test, "{i}");
        let _ = writeln!(answers, "{i},{t}");
    }
    let fast = GuestProgram {
        name: "fast".into(),
        code: guests::bandit_program(dt_fast, &labels_for(r_fast)),
        expected_stage: None,
        duration_s: dt_fast,
        expected_score: Some((r_fast * ROWS as f64).round() / ROWS as f64),
    };
    let slow = GuestProgram {
        name: "slow".into(),
        code: guests::bandit_program(dt_slow, &labels_for(r_slow)),
        expected_stage: None,
        duration_s: dt_slow,
        expected_score: Some((r_slow * ROWS as f64).round() / ROWS as f64),
    };
    let library = TaskLibrary {
        task_id: task_id_of(dir)?,
        scratch: SolutionLibrary::flat(vec![
            program_fragment(&fast, "Write a quick heuristic labelling."),
            program_fragment(&slow, "Spend longer to produce a careful labelling."),
        ]),
        improve: None,
    };
    let files = TaskFiles {
        description: "Your task is to predict the binary label `y` for every id in test.csv."
            .into(),
        metric: Metric::Accuracy,
        public: vec![("test.csv", test)],
        answers,
        submission_example: "id,y\n0,0\n1,1".into(),
        exec_timeout: (dt_slow * 20.0).max(10.0),
        packages: vec![],
    };
    let spec = write_task(dir, files, &library)?;
    Ok(GeneratedTask {
        spec,
        library,
        programs: vec![fast, slow],
    })
}

struct TabularData {
    train: String,
    test: String,
    answers: String,
    first_test_ids: Vec<usize>,
}

fn tabular_data(kind: TabularKind, seed: u64, n_rows: usize, noise: f64) -> TabularData {
    let tag = match kind {
        TabularKind::Regression => 0x5265,
        TabularKind::Classification => 0x436c,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ tag);
    let weights: Vec<f64> = (0..TABULAR_FEATURES)
        .map(|_| {
            let m: f64 = rng.gen_range(0.5..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    let bias: f64 = rng.gen_range(-1.0..1.0);
    let n_train = (n_rows * 7).div_ceil(10);
    let header: String = (0..TABULAR_FEATURES).map(|j| format!(",x{j}")).collect();
    let mut train = format!("id{header},y\n");
    let mut test = format!("id{header}\n");
    let mut answers = String::from("id,y\n");
    let mut first_test_ids = Vec::new();
    for i in 0..n_rows {
        let x: Vec<f64> = (0..TABULAR_FEATURES)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let eps: f64 = rng.sample(StandardNormal);
        let z = bias + weights.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>() + noise * eps;
        let y = match kind {
            TabularKind::Regression => format!("{z}"),
            TabularKind::Classification => format!("{}", u8::from(z > 0.0)),
        };
        let xs: String = x.iter().map(|v| format!(",{v}")).collect();
        if i < n_train {
            let _ = writeln!(train, "{i}{xs},{y}");
        } else {
            let _ = writeln!(test, "{i}{xs}");
            let _ = writeln!(answers, "{i},{y}");
            if first_test_ids.len() < 2 {
                first_test_ids.push(i);
            }
        }
    }
    TabularData {
        train,
        test,
        answers,
        first_test_ids,
    }
}

fn tabular_files(kind: TabularKind, data: TabularData) -> TaskFiles<'static> {
    let (metric, what, example) = match kind {
        TabularKind::Regression => (Metric::Rmse, "the numeric target `y`", "0.0"),
        TabularKind::Classification => (
            Metric::Auc,
            "the probability that the binary target `y` is 1",
            "0.5",
        ),
    };
    let submission_example = std::iter::once("id,y".to_string())
        .chain(data.first_test_ids.iter().map(|i| format!("{i},{example}")))
        .collect::<Vec<_>>()
        .join("\n");
    TaskFiles {
        description: format!(
            "Your task is to predict {what} for every row of test.csv from the numeric features x0..x{}.",
            TABULAR_FEATURES - 1
        ),
        metric,
        public: vec![("train.csv", data.train), ("test.csv", data.test)],
        answers: data.answers,
        submission_example,
        exec_timeout: 30.0,
        packages: vec!["csv".into(), "math".into()],
    }
}

/// Tabular task with a planted linear signal. Graded by RMSE (regression)
/// or AUC (classification).
///
/// The scratch library holds least-squares programs on feature subsets of
/// size at most two (the empty subset is the mean predictor) and a program
/// that fails to load its data; the improve library adds least squares on
/// all features, reachable only by revising a previous solution.
pub fn make_tabular_task(
    dir: &Path,
    kind: TabularKind,
    seed: u64,
    n_rows: usize,
    noise: f64,
) -> Result<GeneratedTask> {
    if n_rows < 20 {
        return Err(Error::Config("tabular tasks need at least 20 rows".into()));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config(
            "noise must be finite and non-negative".into(),
        ));
    }
    let files = tabular_files(kind, tabular_data(kind, seed, n_rows, noise));
    let subsets: [&[usize]; 5] = [&[], &[0], &[1, 2], &[2, 3], &[0, 3]];
    let mut programs: Vec<GuestProgram> = subsets
        .iter()
        .map(|cols| GuestProgram {
            name: if cols.is_empty() {
                "mean".into()
            } else {
                format!(
                    "lsq_{}",
                    cols.iter()
                        .map(|c| format!("x{c}"))
                        .collect::<Vec<_>>()
                        .join("_")
                )
            },
            code: guests::least_squares_program(Some(cols), 0.0),
            expected_stage: Some(MarkerStage::PredictedTestLabels),
            duration_s: 0.0,
            expected_score: None,
        })
        .collect();
    programs.push(GuestProgram {
        name: "bad_path".into(),
        code: guests::least_squares_program(None, 0.0)
            .replace("../input/train.csv", "../input/training.csv"),
        expected_stage: Some(MarkerStage::ImportedPackages),
        duration_s: 0.0,
        expected_score: None,
    });
    let full = GuestProgram {
        name: "lsq_all".into(),
        code: guests::least_squares_program(None, 0.0),
        expected_stage: Some(MarkerStage::PredictedTestLabels),
        duration_s: 0.0,
        expected_score: None,
    };
    let plan_of = |p: &GuestProgram| match p.name.as_str() {
        "mean" => "Predict the training mean for every row.".to_string(),
        "bad_path" => "Fit least squares on all features.".to_string(),
        "lsq_all" => "Extend the previous model to use every feature.".to_string(),
        n => format!(
            "Fit ordinary least squares on {}.",
            n.trim_start_matches("lsq_").replace('_', " and ")
        ),
    };
    let scratch = SolutionLibrary::flat(
        programs
            .iter()
            .map(|p| program_fragment(p, &plan_of(p)))
            .collect(),
    );
    let mut improve = scratch.clone();
    improve.slots[0]
        .fragments
        .push(program_fragment(&full, &plan_of(&full)));
    programs.push(full);
    let library = TaskLibrary {
        task_id: task_id_of(dir)?,
        scratch,
        improve: Some(improve),
    };
    let spec = write_task(dir, files, &library)?;
    Ok(GeneratedTask {
        spec,
        library,
        programs,
    })
}

/// Stage slots of the staged-failure library, in program order.
pub const STAGE_SLOTS: [&str; 6] = ["imports", "load", "model", "fit", "predict", "write"];

/// Furthest marker reached by a program whose first wrong slot is `slot`
/// (`None`: every slot correct).
fn furthest_before(slot: Option<usize>) -> Option<MarkerStage> {
    match slot {
        Some(0) => None,
        Some(1) => Some(MarkerStage::ImportedPackages),
        Some(2) => Some(MarkerStage::LoadedData),
        Some(3) => Some(MarkerStage::DefinedModel),
        Some(4) => Some(MarkerStage::TrainedModel),
        _ => Some(MarkerStage::PredictedTestLabels),
    }
}

/// Index of the working fragment in slot `k`.
pub fn staged_correct_index(k: usize, n_actions: usize) -> usize {
    (k * 2 + 1) % n_actions
}

fn staged_fragment(k: usize, variant: Option<usize>) -> (String, String) {
    let wrong = variant.map(|v| v + 1);
    match (k, wrong) {
        (0, None) => ("Import csv and math.".into(), guests::IMPORTS.into()),
        (0, Some(j)) => (
            format!("Import csv, math and a fast linear algebra module (variant {j})."),
            format!("{}\nimport fastlinalg{j}", guests::IMPORTS),
        ),
        (1, None) => (
            "Read the training and test files.".into(),
            guests::LOAD.into(),
        ),
        (1, Some(j)) => (
            format!("Read the partitioned training file {j}."),
            guests::LOAD.replace("../input/train.csv", &format!("../input/train_part{j}.csv")),
        ),
        (2, None) => (
            "Define a least-squares model.".into(),
            format!("{}\n\n\n{}", guests::MODEL_CODE, guests::construct(1e-6)),
        ),
        (2, Some(j)) => (
            format!("Define a least-squares model with ridge {}.", -(j as f64)),
            format!(
                "{}\n\n\n{}",
                guests::MODEL_CODE,
                guests::construct(-(j as f64))
            ),
        ),
        (3, None) => ("Fit it on the training rows.".into(), guests::FIT.into()),
        (3, Some(j)) => (
            format!("Fit it on the training rows, skipping the first {j} targets."),
            guests::FIT.replace("model.fit(X, y)", &format!("model.fit(X, y[{j}:])")),
        ),
        (4, None) => ("Predict the test rows.".into(), guests::PREDICT.into()),
        (4, Some(j)) => (
            format!("Predict the test rows in batches of {j}."),
            format!("preds = model.predict(X_test, batch_size={j})"),
        ),
        (5, None) => (
            "Write the submission.".into(),
            guests::write_submission("submission.csv"),
        ),
        (_, Some(j)) => (
            format!("Write the submission as version {j}."),
            guests::write_submission(&format!("submission_v{j}.csv")),
        ),
        _ => unreachable!("six slots"),
    }
}

/// Factored library whose slots are program stages with `n_actions` options
/// each, exactly one of which works. A program's reward grows with the
/// number of stages it gets through. Data is a low-noise classification
/// task, so the working program scores close to 1.
///
/// `programs` lists the ladder: the program failing first at each slot, in
/// slot order, followed by the fully working one.
pub fn make_staged_failure_task(dir: &Path, n_actions: usize, seed: u64) -> Result<GeneratedTask> {
    if n_actions < 2 {
        return Err(Error::Config("staged task needs n_actions >= 2".into()));
    }
    let files = tabular_files(
        TabularKind::Classification,
        tabular_data(TabularKind::Classification, seed, 200, 0.1),
    );
    let slots: Vec<Slot> = STAGE_SLOTS
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let correct = staged_correct_index(k, n_actions);
            let mut wrong = 0;
            let fragments = (0..n_actions)
                .map(|i| {
                    let variant = if i == correct {
                        None
                    } else {
                        wrong += 1;
                        Some(wrong - 1)
                    };
                    let (plan, code) = staged_fragment(k, variant);
                    Fragment {
                        label: format!("{name}_{}", if variant.is_some() { "bad" } else { "ok" }),
                        plan,
                        code,
                    }
                })
                .collect();
            Slot {
                name: name.to_string(),
                fragments,
            }
        })
        .collect();
    let scratch = SolutionLibrary { slots };
    let correct: Vec<usize> = (0..STAGE_SLOTS.len())
        .map(|k| staged_correct_index(k, n_actions))
        .collect();
    let mut programs = Vec::new();
    for fail in (0..STAGE_SLOTS.len()).map(Some).chain([None]) {
        let mut action = correct.clone();
        if let Some(k) = fail {
            action[k] = (correct[k] + 1) % n_actions;
        }
        let (_, _, code) = scratch.render(&action)?;
        programs.push(GuestProgram {
            name: match fail {
                Some(k) => format!("fail_at_{}", STAGE_SLOTS[k]),
                None => "valid".into(),
            },
            code: code + "\n",
            expected_stage: furthest_before(fail),
            duration_s: 0.0,
            expected_score: None,
        });
    }
    let library = TaskLibrary {
        task_id: task_id_of(dir)?,
        scratch,
        improve: None,
    };
    let spec = write_task(dir, files, &library)?;
    Ok(GeneratedTask {
        spec,
        library,
        programs,
    })
}

/// Action choosing the working fragment in every slot.
pub fn staged_valid_action(n_actions: usize) -> Vec<usize> {
    (0..STAGE_SLOTS.len())
        .map(|k| staged_correct_index(k, n_actions))
        .collect()
}
