//! Task registration and the on-disk task layout.
//!
//! ```text
//! <root>/<task_id>/spec.json            task description, grader, limits
//! <root>/<task_id>/prepared/public/     inputs visible to the guest
//! <root>/<task_id>/private/answers.*    ground truth, never staged into a sandbox
//! <root>/<task_id>/library.json         solution library for the library policy
//! ```

use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPEC_FILE: &str = "spec.json";
pub const LIBRARY_FILE: &str = "library.json";
pub const PUBLIC_DIR: &str = "prepared/public";
pub const PRIVATE_DIR: &str = "private";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricDirection {
    HigherBetter,
    LowerBetter,
}

impl MetricDirection {
    /// True when `a` is strictly better than `b` under this direction.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            MetricDirection::HigherBetter => a > b,
            MetricDirection::LowerBetter => a < b,
        }
    }

    pub fn best(self, a: f64, b: f64) -> f64 {
        if self.better(b, a) {
            b
        } else {
            a
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Auc,
    Rmse,
    Logloss,
    Accuracy,
}

impl Metric {
    pub fn natural_direction(self) -> MetricDirection {
        match self {
            Metric::Auc | Metric::Accuracy => MetricDirection::HigherBetter,
            Metric::Rmse | Metric::Logloss => MetricDirection::LowerBetter,
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Metric::Auc => "area under the ROC curve between the predicted probability and the observed outcomes",
            Metric::Rmse => "root mean squared error between the predicted and the observed values",
            Metric::Logloss => "binary log loss of the predicted probabilities",
            Metric::Accuracy => "classification accuracy of the predicted labels",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraderSpec {
    pub metric: Metric,
    /// Relative to the task directory in `spec.json`; absolute once loaded.
    pub answer_path: PathBuf,
    pub id_column: String,
    pub target_column: String,
}

fn default_submission() -> PathBuf {
    PathBuf::from("submission.csv")
}

fn default_timeout() -> f64 {
    60.0
}

fn default_interpreter() -> Vec<String> {
    vec!["python3".into()]
}

/// A registered, gradeable task. Paths are absolute after [`TaskSpec::load`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub description: String,
    pub data_dir: PathBuf,
    #[serde(default = "default_submission")]
    pub submission_relpath: PathBuf,
    pub metric_direction: MetricDirection,
    pub grader: GraderSpec,
    #[serde(default = "default_timeout")]
    pub exec_timeout: f64,
    /// Guest interpreter command; the program file is appended as last argument.
    #[serde(default = "default_interpreter")]
    pub interpreter: Vec<String>,
    #[serde(default)]
    pub packages: Vec<String>,
    /// Header plus a couple of example rows, shown verbatim in the task prompt.
    #[serde(default)]
    pub submission_example: String,
    /// Public files, in the order the prompt lists them. The last one is used
    /// for the data snippet.
    #[serde(default)]
    pub data_files: Vec<String>,
    #[serde(skip)]
    pub task_dir: PathBuf,
}

/// Rejects absolute paths and any `..` component.
pub fn check_relative(path: &Path) -> std::result::Result<(), String> {
    if path.as_os_str().is_empty() {
        return Err("empty path".into());
    }
    for comp in path.components() {
        match comp {
            Component::Normal(_) | Component::CurDir => {}
            _ => {
                return Err(format!(
                    "`{}` must be relative without `..`",
                    path.display()
                ))
            }
        }
    }
    Ok(())
}

impl TaskSpec {
    pub fn task_dir_in(root: &Path, task_id: &str) -> PathBuf {
        root.join(task_id)
    }

    /// Loads `<root>/<task_id>/spec.json`, resolves paths and checks invariants.
    pub fn load(root: &Path, task_id: &str) -> Result<Self> {
        let dir = Self::task_dir_in(root, task_id);
        Self::load_dir(&dir)
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let spec_path = dir.join(SPEC_FILE);
        let text = fs::read_to_string(&spec_path).map_err(|e| Error::path(&spec_path, e))?;
        let mut spec: TaskSpec = serde_json::from_str(&text)?;
        spec.task_dir = dir.to_path_buf();
        spec.resolve()?;
        Ok(spec)
    }

    fn invalid(&self, reason: impl Into<String>) -> Error {
        Error::Task {
            task: self.task_id.clone(),
            reason: reason.into(),
        }
    }

    fn resolve(&mut self) -> Result<()> {
        check_relative(&self.submission_relpath).map_err(|r| self.invalid(r))?;
        check_relative(&self.grader.answer_path).map_err(|r| self.invalid(r))?;
        if self.data_dir.is_relative() {
            self.data_dir = self.task_dir.join(&self.data_dir);
        }
        self.grader.answer_path = self.task_dir.join(&self.grader.answer_path);
        self.validate()
    }

    /// Registration-time invariants: readable data dir, answers outside it.
    pub fn validate(&self) -> Result<()> {
        fs::read_dir(&self.data_dir)
            .map_err(|e| self.invalid(format!("data_dir {}: {e}", self.data_dir.display())))?;
        check_relative(&self.submission_relpath).map_err(|r| self.invalid(r))?;
        if !self.grader.answer_path.is_file() {
            return Err(self.invalid(format!(
                "answer file {} missing",
                self.grader.answer_path.display()
            )));
        }
        let data = fs::canonicalize(&self.data_dir)?;
        let answers = fs::canonicalize(&self.grader.answer_path)?;
        if answers.starts_with(&data) {
            return Err(self.invalid("answer file lies inside the guest-visible data tree"));
        }
        if self.exec_timeout <= 0.0 || !self.exec_timeout.is_finite() {
            return Err(self.invalid("exec_timeout must be positive"));
        }
        if self.interpreter.is_empty() {
            return Err(self.invalid("interpreter command is empty"));
        }
        Ok(())
    }

    /// Writes `spec.json` with paths relative to the task directory.
    pub fn save(&self) -> Result<()> {
        let mut on_disk = self.clone();
        if let Ok(rel) = self.data_dir.strip_prefix(&self.task_dir) {
            on_disk.data_dir = rel.to_path_buf();
        }
        if let Ok(rel) = self.grader.answer_path.strip_prefix(&self.task_dir) {
            on_disk.grader.answer_path = rel.to_path_buf();
        }
        fs::create_dir_all(&self.task_dir)?;
        let path = self.task_dir.join(SPEC_FILE);
        fs::write(&path, serde_json::to_string_pretty(&on_disk)? + "\n")
            .map_err(|e| Error::path(path, e))
    }

    pub fn library_path(&self) -> PathBuf {
        self.task_dir.join(LIBRARY_FILE)
    }

    /// Every task directory under `root` that carries a `spec.json`, sorted by id.
    pub fn discover(root: &Path) -> Result<Vec<TaskSpec>> {
        let mut out = Vec::new();
        let entries = fs::read_dir(root).map_err(|e| Error::path(root, e))?;
        for entry in entries {
            let entry = entry?;
            if entry.path().join(SPEC_FILE).is_file() {
                out.push(Self::load_dir(&entry.path())?);
            }
        }
        out.sort_by(|a, b| a.task_id.cmp(&b.task_id));
        Ok(out)
    }
}
