//! Previous-solution buffer, prompt construction and test-time aggregation.

use std::collections::BTreeMap;
use std::fs;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attempt::Mode;
use crate::config::ImprovePick;
use crate::error::{Error, Result};
use crate::task::{MetricDirection, TaskSpec};

const SYSTEM_LINE: &str = "You are given a machine learning task. You must solve the task by training a model and running the model on the test set to produce a submission file.";

/// Where guests find the public task files, relative to their working directory.
pub const GUEST_INPUT_PATH: &str = "../input/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrevSolutionEntry {
    pub task_id: String,
    pub attempt_id: u64,
    pub plan: String,
    pub code: String,
    /// Library choice that produced the solution, when known.
    #[serde(default)]
    pub action: Vec<usize>,
    pub feedback: String,
    pub reward: f64,
    /// Insertion order, used to break eviction ties.
    pub seq: u64,
}

/// Per-task bounded buffer; the lowest reward is evicted first, the older
/// entry on ties.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrevSolutionBuffer {
    pub capacity: usize,
    entries: BTreeMap<String, Vec<PrevSolutionEntry>>,
    next_seq: u64,
}

impl PrevSolutionBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            entries: BTreeMap::new(),
            next_seq: 0,
        }
    }

    pub fn len(&self, task_id: &str) -> usize {
        self.entries.get(task_id).map_or(0, |v| v.len())
    }

    pub fn is_empty(&self, task_id: &str) -> bool {
        self.len(task_id) == 0
    }

    pub fn entries(&self, task_id: &str) -> &[PrevSolutionEntry] {
        self.entries.get(task_id).map_or(&[], |v| v.as_slice())
    }

    pub fn insert(&mut self, mut entry: PrevSolutionEntry) {
        entry.seq = self.next_seq;
        self.next_seq += 1;
        let v = self.entries.entry(entry.task_id.clone()).or_default();
        v.push(entry);
        while v.len() > self.capacity {
            let worst = v
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| a.reward.total_cmp(&b.reward).then(a.seq.cmp(&b.seq)))
                .map(|(i, _)| i)
                .expect("non-empty");
            v.remove(worst);
        }
    }

    /// Entry to improve on, or `None` for an empty task buffer.
    pub fn pick<R: Rng + ?Sized>(
        &self,
        task_id: &str,
        how: ImprovePick,
        rng: &mut R,
    ) -> Option<&PrevSolutionEntry> {
        let v = self.entries.get(task_id).filter(|v| !v.is_empty())?;
        match how {
            ImprovePick::Uniform => Some(&v[rng.gen_range(0..v.len())]),
            ImprovePick::Best => v
                .iter()
                .max_by(|a, b| a.reward.total_cmp(&b.reward).then(b.seq.cmp(&a.seq))),
        }
    }
}

/// Improve with probability one half when the task has buffered solutions
/// and self-improvement is enabled; otherwise scratch, without touching `rng`.
pub fn sample_mode<R: Rng + ?Sized>(
    buffer: &PrevSolutionBuffer,
    task_id: &str,
    enabled: bool,
    rng: &mut R,
) -> Mode {
    if !enabled || buffer.is_empty(task_id) {
        return Mode::Scratch;
    }
    if rng.gen_bool(0.5) {
        Mode::Improve
    } else {
        Mode::Scratch
    }
}

/// Best of the two test-time scores; an absent score counts as worst.
pub fn test_time_best(
    scratch: Option<f64>,
    improved: Option<f64>,
    direction: MetricDirection,
) -> Result<f64> {
    match (scratch, improved) {
        (Some(a), Some(b)) => Ok(direction.best(a, b)),
        (Some(a), None) | (None, Some(a)) => Ok(a),
        (None, None) => Err(Error::NoValidSolution),
    }
}

/// Prefix of `text` holding at most `limit` whitespace-separated words.
pub fn truncate_words(text: &str, limit: usize) -> &str {
    let mut count = 0;
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            in_word = false;
        } else if !in_word {
            if count == limit {
                return text[..i].trim_end();
            }
            count += 1;
            in_word = true;
        }
    }
    text
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Leading part of the last public data file, at most `max_bytes`.
pub fn data_snippet(task: &TaskSpec, max_bytes: usize) -> String {
    let Some(name) = task.data_files.last() else {
        return String::new();
    };
    let Ok(bytes) = fs::read(task.data_dir.join(name)) else {
        return String::new();
    };
    let text = String::from_utf8_lossy(&bytes[..bytes.len().min(max_bytes)]).into_owned();
    // Cut at the last complete line.
    match text.rfind('\n') {
        Some(i) if bytes.len() > max_bytes => text[..=i].to_string(),
        _ => text,
    }
}

fn scratch_prompt(task: &TaskSpec, snippet: &str) -> String {
    let files = task.data_files.join(" and ");
    let sub = task.submission_relpath.display();
    let mut p = String::new();
    p.push_str("<|im_start|>system\n");
    p.push_str(SYSTEM_LINE);
    p.push_str("<|im_end|>\n<|im_start|>user\n");
    p.push_str("First outline your proposed solution in natural language (3-5 sentences), followed by a single markdown code block (wrapped in ```). Note:\n");
    p.push_str(&format!(
        "- Datasets {files} are available in `{GUEST_INPUT_PATH}`.\n"
    ));
    p.push_str(&format!(
        "- You MUST produce a submission file at `./{sub}` by running your model on the test split.\n"
    ));
    p.push_str(&format!("- {}\n", task.description.trim()));
    p.push_str(&format!(
        "- Submissions are evaluated on the {}.\n",
        task.grader.metric.describe()
    ));
    if !task.packages.is_empty() {
        let pk: Vec<String> = task.packages.iter().map(|x| format!("`{x}`")).collect();
        p.push_str(&format!(
            "- Your can use pre-installed packages such as: {}.\n",
            pk.join(", ")
        ));
    }
    p.push_str(
        "- You can't access the internet so don't use any pre-trained models need downloading.\n",
    );
    p.push_str(&format!(
        "- `./{sub}` should have the following format:\n```\n"
    ));
    p.push_str(task.submission_example.trim_end());
    p.push_str("\netc\n```\n");
    if let Some(last) = task.data_files.last() {
        p.push_str(&format!(
            "- Data snippet:\n-> {GUEST_INPUT_PATH}{last}:\n\n{}\n...\n",
            snippet.trim_end()
        ));
    }
    p.push_str("\n<|im_end|>\n<|im_start|>assistant\n");
    p
}

fn improve_prompt(plan: &str, code: &str, feedback: &str) -> String {
    let mut prev = String::new();
    prev.push('\n');
    if !plan.trim().is_empty() {
        prev.push_str(plan.trim());
        prev.push_str("\n\n");
    }
    prev.push_str(code.trim_end_matches('\n'));
    prev.push('\n');
    if !feedback.trim().is_empty() {
        prev.push_str("\nExecution feedback:\n");
        prev.push_str(feedback.trim_end());
        prev.push('\n');
    }
    format!(
        "<|im_start|>system\n\n{SYSTEM_LINE}\n\n<|im_end|>\n\n<|im_start|>user\n\nYou have implemented a previous solution. Revise the solution to improve the performance on the test set. First outline your proposed solution in natural language (3-5 sentences), followed by a single markdown code block (wrapped in ```) which implements this solution. If you reuse parts of the example code, include those sections again in your final solution. Previous solution:\n\n```{prev}```\n\n<|im_end|>\n\n<|im_start|>assistant:\n\n"
    )
}

/// Builds the scratch or improve prompt, at most `max_units` whitespace
/// words when the template itself fits. Scratch prompts shorten the data
/// snippet; improve prompts shorten the feedback, then the previous code.
pub fn build_prompt(
    task: &TaskSpec,
    snippet: &str,
    mode: Mode,
    prev: Option<&PrevSolutionEntry>,
    max_units: usize,
) -> Result<String> {
    match mode {
        Mode::Scratch => {
            let full = scratch_prompt(task, snippet);
            let over = word_count(&full).saturating_sub(max_units);
            if over == 0 {
                return Ok(full);
            }
            let keep = word_count(snippet).saturating_sub(over);
            Ok(scratch_prompt(task, truncate_words(snippet, keep)))
        }
        Mode::Improve => {
            let prev = prev
                .ok_or_else(|| Error::Mode("improve prompt without a previous solution".into()))?;
            let full = improve_prompt(&prev.plan, &prev.code, &prev.feedback);
            let mut over = word_count(&full).saturating_sub(max_units);
            if over == 0 {
                return Ok(full);
            }
            let fb_words = word_count(&prev.feedback);
            let feedback = truncate_words(&prev.feedback, fb_words.saturating_sub(over));
            over = over.saturating_sub(fb_words);
            let code = truncate_words(&prev.code, word_count(&prev.code).saturating_sub(over));
            Ok(improve_prompt(&prev.plan, code, feedback))
        }
    }
}
