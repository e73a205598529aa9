//! Instrumenters: programs in, programs with marker emissions out.
//!
//! Every implementation is frozen: its behaviour is fixed at construction and
//! summarised by [`Instrumenter::state_hash`]. Output must contain the input
//! lines as a byte-identical subsequence; [`strip_markers`] undoes insertion.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver};
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::markers::{MarkerMode, MarkerProtocol, MarkerStage};
use super::pyscan;
use crate::attempt::parse_solution;
use crate::backend::GenerativeBackend;
use crate::error::{Error, Result};

pub trait Instrumenter: Send + Sync {
    fn name(&self) -> &str;

    fn instrument(&self, code: &str, protocol: &MarkerProtocol) -> Result<String>;

    /// Fingerprint of everything that determines the instrumenter's output.
    fn state_hash(&self) -> u64;
}

fn hash_of(parts: &[&str]) -> u64 {
    let mut h = DefaultHasher::new();
    parts.hash(&mut h);
    h.finish()
}

/// Returns the code unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct Passthrough;

impl Instrumenter for Passthrough {
    fn name(&self) -> &str {
        "passthrough"
    }

    fn instrument(&self, code: &str, _protocol: &MarkerProtocol) -> Result<String> {
        Ok(code.to_string())
    }

    fn state_hash(&self) -> u64 {
        hash_of(&["passthrough"])
    }
}

/// Outcome of instrumenting with a Passthrough fallback.
#[derive(Debug, Clone, PartialEq)]
pub struct Instrumented {
    pub code: String,
    /// Why the configured instrumenter failed, if it did.
    pub fallback: Option<String>,
}

/// Runs `inst`; on failure, or on output that breaks the subsequence
/// contract, returns the code unchanged with the reason attached.
pub fn instrument_or_passthrough(
    inst: &dyn Instrumenter,
    code: &str,
    protocol: &MarkerProtocol,
) -> Instrumented {
    match inst.instrument(code, protocol) {
        Ok(out) if strip_markers(&out, protocol) == code => Instrumented {
            code: out,
            fallback: None,
        },
        Ok(_) => {
            log::warn!(
                "{}: output is not a marker-only extension of the input",
                inst.name()
            );
            Instrumented {
                code: code.to_string(),
                fallback: Some(format!(
                    "{}: output modifies the original program",
                    inst.name()
                )),
            }
        }
        Err(e) => {
            log::warn!("{}: {e}", inst.name());
            Instrumented {
                code: code.to_string(),
                fallback: Some(e.to_string()),
            }
        }
    }
}

fn emission_regex(protocol: &MarkerProtocol, stage: MarkerStage) -> Regex {
    let bare = regex::escape(&protocol.emission_line(stage, None));
    let head = regex::escape(&protocol.emission_line(stage, Some("")));
    // `print("text", )` with the value expression cut out.
    let head = head.trim_end_matches("\\)").trim_end_matches(' ');
    Regex::new(&format!(r"^(?:{bare}|{head} .+\))$")).expect("static pattern")
}

fn is_emission(line: &str, res: &[Regex]) -> bool {
    let t = line.trim();
    res.iter().any(|r| r.is_match(t))
}

/// Removes inserted marker lines, including the blank line added when a
/// group was placed after an existing blank line.
pub fn strip_markers(code: &str, protocol: &MarkerProtocol) -> String {
    let res: Vec<Regex> = MarkerStage::ALL
        .iter()
        .map(|s| emission_regex(protocol, *s))
        .collect();
    let lines: Vec<&str> = code.split('\n').collect();
    let mut out: Vec<&str> = Vec::with_capacity(lines.len());
    let mut i = 0;
    while i < lines.len() {
        if !is_emission(lines[i], &res) {
            out.push(lines[i]);
            i += 1;
            continue;
        }
        let start = i;
        while i < lines.len() && is_emission(lines[i], &res) {
            i += 1;
        }
        let blank_before = start > 0 && lines[start - 1].trim().is_empty();
        let blank_after = i < lines.len() && lines[i].trim().is_empty();
        if blank_before && blank_after {
            i += 1;
        }
    }
    out.join("\n")
}

/// Counts emission lines for each stage in instrumented code.
pub fn count_emissions(code: &str, protocol: &MarkerProtocol) -> Vec<(MarkerStage, usize)> {
    MarkerStage::ALL
        .iter()
        .map(|s| {
            let re = emission_regex(protocol, *s);
            (
                *s,
                code.split('\n').filter(|l| re.is_match(l.trim())).count(),
            )
        })
        .collect()
}

struct Rules {
    import: Regex,
    read: Regex,
    write_mode: Regex,
    model: Regex,
    train: Regex,
    predict: Regex,
    loss_assign: Regex,
}

fn rules() -> &'static Rules {
    static R: OnceLock<Rules> = OnceLock::new();
    R.get_or_init(|| Rules {
        import: Regex::new(r"^(?:import\s+\S|from\s+\S+\s+import\s)").unwrap(),
        read: Regex::new(
            r"(?:\bread_(?:csv|json|parquet|table|excel|feather|pickle)\s*\(|\bopen\s*\(|\bcsv\.(?:reader|DictReader)\s*\(|\bjson\.loads?\s*\(|\bnp\.load\s*\(|\bnumpy\.load\s*\(|\bloadtxt\s*\(|\bgenfromtxt\s*\(|\bpickle\.load\s*\(|\bload_dataset\s*\()",
        )
        .unwrap(),
        write_mode: Regex::new(r#"open\s*\([^)]*,\s*(?:mode\s*=\s*)?["'][^"']*[wax]"#).unwrap(),
        model: Regex::new(
            r"\b([A-Za-z_][A-Za-z0-9_]*(?:Classifier|Regressor|Regression|Model|Net|Network|Estimator|SVC|SVR|NB|Forest|Tree|Boost|Sequential|Pipeline|KMeans|Perceptron|MLP))\s*\(",
        )
        .unwrap(),
        train: Regex::new(r"(?:\.fit\s*\(|\btrain\s*\(|\boptimizer\.step\s*\(|\.fit_generator\s*\()").unwrap(),
        predict: Regex::new(r"\.predict(?:_proba|_log_proba)?\s*\(").unwrap(),
        loss_assign: Regex::new(r"^([A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z_][A-Za-z0-9_]*)*)\s*(?:\+|-|\*|/)?=([^=].*)$").unwrap(),
    })
}

const HEADER_KEYWORDS: [&str; 13] = [
    "for ",
    "while ",
    "async for ",
    "if ",
    "elif ",
    "else",
    "try",
    "except",
    "finally",
    "with ",
    "async with ",
    "def ",
    "class ",
];

#[derive(Debug)]
struct Stmt {
    start: usize,
    end: usize,
    indent: usize,
    text: String,
    first: String,
    header: bool,
}

impl Stmt {
    fn keyword(&self) -> Option<&'static str> {
        HEADER_KEYWORDS
            .iter()
            .copied()
            .find(|k| self.first.starts_with(k))
    }

    fn is_loop(&self) -> bool {
        self.header && matches!(self.keyword(), Some("for " | "while " | "async for "))
    }

    fn is_def(&self) -> bool {
        self.first.starts_with("def ")
            || self.first.starts_with("async def ")
            || self.first.starts_with("class ")
    }
}

fn collect_statements(lines: &[&str]) -> Vec<Stmt> {
    let groups = pyscan::statements(lines);
    let mut stmts: Vec<Stmt> = groups
        .into_iter()
        .map(|(s, e)| Stmt {
            start: s,
            end: e,
            indent: pyscan::indent_of(lines[s]).len(),
            text: lines[s..=e].join("\n"),
            first: lines[s].trim().to_string(),
            header: false,
        })
        .collect();
    for i in 0..stmts.len() {
        let deeper = stmts
            .get(i + 1)
            .map(|n| n.indent > stmts[i].indent)
            .unwrap_or(false);
        let kw = stmts[i].keyword().is_some() || stmts[i].first.starts_with("async def ");
        stmts[i].header = kw && deeper;
    }
    stmts
}

/// Heuristic line-rule instrumenter.
///
/// A marker is placed after the statement that performs its operation:
/// `imported packages` after the last top-level import, `loaded data` after
/// the last read, `defined model` after the first estimator construction,
/// `trained model` after the last fit/train call and `predicted test labels`
/// after the last predict call. A trigger inside a loop is moved past the
/// outermost enclosing loop; a trigger that is itself a block header (a
/// `with open(...)`) is placed after its block. Assignments to a loss
/// variable get an inline print of the value, and may recur. When the line
/// following the anchor is blank the group goes after that blank line,
/// followed by a new blank line.
#[derive(Debug, Clone, Copy, Default)]
pub struct PatternInserter;

const PATTERN_RULES_VERSION: &str = "pattern-rules-v1";

struct Insertion {
    after: usize,
    indent: String,
    stage: MarkerStage,
    value: Option<String>,
    order: usize,
}

impl PatternInserter {
    /// Index of the last statement in the block opened by header `h`.
    fn block_end(stmts: &[Stmt], h: usize) -> usize {
        let mut j = h;
        while j + 1 < stmts.len() && stmts[j + 1].indent > stmts[h].indent {
            j += 1;
        }
        j
    }

    /// Enclosing headers of statement `i`, innermost first.
    fn enclosing(stmts: &[Stmt], i: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut indent = stmts[i].indent;
        for j in (0..i).rev() {
            if stmts[j].indent < indent {
                if stmts[j].header {
                    out.push(j);
                }
                indent = stmts[j].indent;
                if indent == 0 {
                    break;
                }
            }
        }
        out
    }

    /// Statement after which a completed-operation marker for trigger `i` goes.
    fn anchor(stmts: &[Stmt], i: usize) -> usize {
        let mut anchor = if stmts[i].header {
            Self::block_end(stmts, i)
        } else {
            i
        };
        for h in Self::enclosing(stmts, i) {
            if stmts[h].is_def() {
                break;
            }
            if stmts[h].is_loop() {
                anchor = Self::block_end(stmts, h);
            }
        }
        anchor
    }

    fn anchor_indent(stmts: &[Stmt], i: usize) -> usize {
        let mut indent = stmts[i].indent;
        for h in Self::enclosing(stmts, i) {
            if stmts[h].is_def() {
                break;
            }
            if stmts[h].is_loop() {
                indent = stmts[h].indent;
            }
        }
        indent
    }

    fn continues_block(stmts: &[Stmt], anchor: usize, indent: usize) -> bool {
        stmts.get(anchor + 1).is_some_and(|n| {
            n.indent == indent
                && ["else", "elif ", "except", "finally"]
                    .iter()
                    .any(|k| n.first.starts_with(k))
        })
    }

    fn plan(lines: &[&str]) -> Vec<Insertion> {
        let r = rules();
        let stmts = collect_statements(lines);
        let mut found: Vec<(MarkerStage, usize)> = Vec::new();
        let mut last_import = None;
        let mut last_read = None;
        let mut first_model = None;
        let mut last_train = None;
        let mut last_predict = None;
        let mut losses = Vec::new();
        for (i, s) in stmts.iter().enumerate() {
            if s.first.starts_with('#') {
                continue;
            }
            if s.indent == 0 && r.import.is_match(&s.first) {
                last_import = Some(i);
                continue;
            }
            if s.is_def() {
                continue;
            }
            let raw = strip_comment_lines(&s.text);
            let code = pyscan::mask_strings(&raw);
            if r.read.is_match(&code) && !(code.contains("open") && r.write_mode.is_match(&raw)) {
                last_read = Some(i);
            }
            if first_model.is_none() && !s.header {
                if let Some(m) = r.model.captures(&code) {
                    if !m[1].ends_with("Vectorizer") {
                        first_model = Some(i);
                    }
                }
            }
            if r.train.is_match(&code) && !s.first.starts_with("def ") {
                last_train = Some(i);
            }
            if r.predict.is_match(&code) {
                last_predict = Some(i);
            }
            if !s.header {
                if let Some(c) = r.loss_assign.captures(&s.first) {
                    let target = c[1].to_string();
                    let rhs = c[2].trim();
                    if let Some(stage) = loss_stage(&target, rhs) {
                        losses.push((i, stage, target));
                    }
                }
            }
        }
        if let Some(i) = last_import {
            found.push((MarkerStage::ImportedPackages, i));
        }
        if let Some(i) = last_read {
            found.push((MarkerStage::LoadedData, i));
        }
        if let Some(i) = first_model {
            found.push((MarkerStage::DefinedModel, i));
        }
        if let Some(i) = last_train {
            found.push((MarkerStage::TrainedModel, i));
        }
        if let Some(i) = last_predict {
            found.push((MarkerStage::PredictedTestLabels, i));
        }

        let mut out = Vec::new();
        for (stage, i) in found {
            let a = Self::anchor(&stmts, i);
            let indent = Self::anchor_indent(&stmts, i);
            if Self::continues_block(&stmts, a, indent) {
                continue;
            }
            out.push(Insertion {
                after: stmts[a].end,
                indent: " ".repeat(indent).chars().collect(),
                stage,
                value: None,
                order: stage.ordinal(),
            });
        }
        for (i, stage, target) in losses {
            out.push(Insertion {
                after: stmts[i].end,
                indent: pyscan::indent_of(lines[stmts[i].start]).to_string(),
                stage,
                value: Some(target),
                order: stage.ordinal(),
            });
        }
        // Preserve the original indentation characters for anchors at a
        // header's level.
        for ins in out.iter_mut() {
            if let Some(src) = lines[..=ins.after]
                .iter()
                .rev()
                .find(|l| !l.trim().is_empty() && pyscan::indent_of(l).len() == ins.indent.len())
            {
                ins.indent = pyscan::indent_of(src).to_string();
            }
        }
        // Deeper (inline) emissions first so a loop body stays contiguous.
        out.sort_by_key(|x| (x.after, std::cmp::Reverse(x.indent.len()), x.order));
        out
    }

    pub fn apply(code: &str, protocol: &MarkerProtocol) -> String {
        if code.is_empty() {
            return String::new();
        }
        let lines: Vec<&str> = code.split('\n').collect();
        let plan = Self::plan(&lines);
        let mut out: Vec<String> = Vec::with_capacity(lines.len() + plan.len() * 2);
        let mut next = 0;
        let mut k = 0;
        while k < plan.len() {
            let after = plan[k].after;
            let group_end = plan[k..].iter().take_while(|x| x.after == after).count() + k;
            let blank_next = lines.get(after + 1).is_some_and(|l| l.trim().is_empty());
            let upto = if blank_next { after + 1 } else { after };
            let present = emitted_after(&lines, upto, protocol);
            let todo: Vec<&Insertion> = plan[k..group_end]
                .iter()
                .filter(|i| !present.contains(&i.stage))
                .collect();
            if todo.is_empty() {
                k = group_end;
                continue;
            }
            out.extend(lines[next..=upto].iter().map(|l| l.to_string()));
            next = upto + 1;
            for ins in todo {
                out.push(format!(
                    "{}{}",
                    ins.indent,
                    protocol.emission_line(ins.stage, ins.value.as_deref())
                ));
            }
            if blank_next {
                out.push(String::new());
            }
            k = group_end;
        }
        out.extend(lines[next..].iter().map(|l| l.to_string()));
        out.join("\n")
    }
}

/// Stages already emitted right after line `after`, so that instrumenting
/// instrumented code adds nothing.
fn emitted_after(lines: &[&str], after: usize, protocol: &MarkerProtocol) -> Vec<MarkerStage> {
    let res: Vec<(MarkerStage, Regex)> = MarkerStage::ALL
        .iter()
        .map(|s| (*s, emission_regex(protocol, *s)))
        .collect();
    let mut out = Vec::new();
    for line in lines.iter().skip(after + 1) {
        let t = line.trim();
        match res.iter().find(|(_, r)| r.is_match(t)) {
            Some((s, _)) => out.push(*s),
            None => break,
        }
    }
    out
}

fn strip_comment_lines(text: &str) -> String {
    text.lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .collect::<Vec<_>>()
        .join("\n")
}

fn loss_stage(target: &str, rhs: &str) -> Option<MarkerStage> {
    let name = target
        .rsplit('.')
        .next()
        .unwrap_or(target)
        .to_ascii_lowercase();
    if !name.contains("loss") || name.contains("losses") {
        return None;
    }
    if [
        "fn", "func", "function", "fct", "history", "hist", "list", "log",
    ]
    .iter()
    .any(|s| name.ends_with(s))
    {
        return None;
    }
    let rhs_first = rhs.chars().next()?;
    if matches!(rhs_first, '[' | '{' | '"' | '\'') || rhs.starts_with("lambda") {
        return None;
    }
    // A bare class construction, e.g. `nn.MSELoss()`, is a loss function.
    let callee = rhs.split('(').next().unwrap_or("");
    let last = callee.rsplit('.').next().unwrap_or("");
    if rhs.contains('(') && last.chars().next().is_some_and(|c| c.is_ascii_uppercase()) {
        return None;
    }
    if name.contains("test") || name.contains("val") {
        Some(MarkerStage::TestingLoss)
    } else {
        Some(MarkerStage::TrainingLoss)
    }
}

impl Instrumenter for PatternInserter {
    fn name(&self) -> &str {
        "pattern"
    }

    fn instrument(&self, code: &str, protocol: &MarkerProtocol) -> Result<String> {
        Ok(Self::apply(code, protocol))
    }

    fn state_hash(&self) -> u64 {
        hash_of(&["pattern", PATTERN_RULES_VERSION])
    }
}

/// The instrumentation request sent to a generative model.
pub fn instrumentation_prompt(code: &str) -> String {
    let mut p = String::from(
        "Please insert print statements in the given python script. The print statements are supposed to reflect the progress of executing a script that solves a Kaggle challenge machine learning benchmark. These print statements will be used to debug the python script so it needs to capture the progress of execution.\n\nPrint Statements:\n",
    );
    for s in MarkerStage::ALL {
        p.push_str(&format!("- print(\"{}\")\n", s.plain_text()));
    }
    p.push_str(
        "\nRequirements:\n\
         - Only insert print statement AFTER an operation is actually performed (e.g., data have actually been loaded).\n\
         - Insert print statements for \"training loss:\" and \"testing loss:\" if applicable (i.e., the code actually computes training or testing losses).\n\
         - Output the entire python script after inserting print statements in a single markdown code block (wrapped in ```).\n\
         - Do not modify the original python code, other than inserting print statements.\n\
         \nNow please insert print statements for this python script: ",
    );
    p.push_str(code);
    p
}

/// Counting semaphore bounding concurrent wire requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
            while *free == 0 {
                free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
            }
            *free -= 1;
        }
        let out = f();
        *self.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.cv.notify_one();
        out
    }
}

/// Sends the instrumentation prompt to a frozen generative model. The model
/// is asked for plain print statements; they are validated and rewritten to
/// the execution's marker protocol.
pub struct ExternalModelInserter {
    backend: Arc<dyn GenerativeBackend>,
    identity: String,
    max_tokens: usize,
    gate: Gate,
}

impl ExternalModelInserter {
    pub fn new(
        backend: Arc<dyn GenerativeBackend>,
        identity: impl Into<String>,
        max_concurrent: usize,
    ) -> Self {
        Self {
            backend,
            identity: identity.into(),
            max_tokens: 4096,
            gate: Gate::new(max_concurrent),
        }
    }

    /// Checks the model output and rewrites its print lines.
    pub fn rewrite(original: &str, model_code: &str, protocol: &MarkerProtocol) -> Result<String> {
        let plain = MarkerProtocol::plain();
        let res: Vec<(MarkerStage, Regex)> = MarkerStage::ALL
            .iter()
            .map(|s| (*s, emission_regex(&plain, *s)))
            .collect();
        // Fenced blocks lose trailing newlines; compare without them.
        let body = original.trim_end_matches('\n');
        let tail = &original[body.len()..];
        let model_code = model_code.trim_end_matches('\n');
        let mut out = Vec::new();
        let orig: Vec<&str> = body.split('\n').collect();
        let mut oi = 0;
        for line in model_code.split('\n') {
            if oi < orig.len() && line == orig[oi] {
                out.push(line.to_string());
                oi += 1;
                continue;
            }
            let t = line.trim();
            if t.is_empty() {
                out.push(line.to_string());
                continue;
            }
            let stage = res
                .iter()
                .find(|(_, r)| r.is_match(t))
                .map(|(s, _)| *s)
                .ok_or_else(|| {
                    Error::Instrumenter(format!(
                        "model output modifies the program at `{}`",
                        truncate(t, 80)
                    ))
                })?;
            let value = t
                .strip_prefix(&format!("print(\"{}\", ", stage.plain_text()))
                .and_then(|v| v.strip_suffix(')'));
            out.push(format!(
                "{}{}",
                pyscan::indent_of(line),
                protocol.emission_line(stage, value)
            ));
        }
        if oi != orig.len() {
            return Err(Error::Instrumenter(
                "model output drops original lines".into(),
            ));
        }
        // Blank lines the model added must follow the strip rule, otherwise the
        // result is not a marker-only extension.
        let out = out.join("\n") + tail;
        if strip_markers(&out, protocol) != original {
            return Err(Error::Instrumenter(
                "model output changes blank lines".into(),
            ));
        }
        Ok(out)
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

impl Instrumenter for ExternalModelInserter {
    fn name(&self) -> &str {
        "external"
    }

    fn instrument(&self, code: &str, protocol: &MarkerProtocol) -> Result<String> {
        let prompt = instrumentation_prompt(code);
        let gen = self
            .gate
            .run(|| self.backend.generate(&prompt, 1.0, self.max_tokens))?;
        let parsed = parse_solution(&gen.text)
            .map_err(|_| Error::Instrumenter("model response has no code block".into()))?;
        Self::rewrite(code, &parsed.code, protocol)
    }

    fn state_hash(&self) -> u64 {
        hash_of(&["external", &self.identity])
    }
}

#[derive(Serialize)]
struct PluginProtocol {
    mode: MarkerMode,
    nonce: String,
    markers: Vec<(MarkerStage, String)>,
}

#[derive(Serialize)]
struct PluginRequest<'a> {
    code: &'a str,
    protocol: PluginProtocol,
}

#[derive(Deserialize)]
struct PluginResponse {
    ok: bool,
    #[serde(default)]
    code: Option<String>,
    #[serde(default)]
    reason: Option<String>,
}

struct PluginProcess {
    child: Child,
    stdin: ChildStdin,
    frames: Receiver<std::io::Result<Vec<u8>>>,
}

impl Drop for PluginProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Client for an out-of-process instrumenter speaking length-prefixed JSON
/// (4-byte big-endian length, then a UTF-8 JSON document) over stdio. The
/// process is spawned lazily and respawned after a failure.
pub struct AstPluginInserter {
    command: Vec<String>,
    timeout: Duration,
    proc: Mutex<Option<PluginProcess>>,
}

impl AstPluginInserter {
    pub fn new(command: Vec<String>, timeout: Duration) -> Result<Self> {
        if command.is_empty() {
            return Err(Error::Instrumenter("empty plugin command".into()));
        }
        Ok(Self {
            command,
            timeout,
            proc: Mutex::new(None),
        })
    }

    fn spawn(&self) -> Result<PluginProcess> {
        let mut child = Command::new(&self.command[0])
            .args(&self.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| Error::Instrumenter(format!("spawning plugin: {e}")))?;
        let stdin = child.stdin.take().expect("piped");
        let mut stdout = child.stdout.take().expect("piped");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || loop {
            let mut len = [0u8; 4];
            if let Err(e) = stdout.read_exact(&mut len) {
                let _ = tx.send(Err(e));
                return;
            }
            let mut buf = vec![0; u32::from_be_bytes(len) as usize];
            let r = stdout.read_exact(&mut buf).map(|_| buf);
            let failed = r.is_err();
            if tx.send(r).is_err() || failed {
                return;
            }
        });
        Ok(PluginProcess {
            child,
            stdin,
            frames: rx,
        })
    }

    fn request(&self, proc: &mut PluginProcess, body: &[u8]) -> Result<PluginResponse> {
        let len = u32::try_from(body.len())
            .map_err(|_| Error::Instrumenter("request too large".into()))?;
        proc.stdin
            .write_all(&len.to_be_bytes())
            .and_then(|_| proc.stdin.write_all(body))
            .and_then(|_| proc.stdin.flush())
            .map_err(|e| Error::Instrumenter(format!("plugin write: {e}")))?;
        let frame = proc
            .frames
            .recv_timeout(self.timeout)
            .map_err(|_| Error::Instrumenter("plugin did not answer in time".into()))?
            .map_err(|e| Error::Instrumenter(format!("plugin read: {e}")))?;
        serde_json::from_slice(&frame)
            .map_err(|e| Error::Instrumenter(format!("malformed plugin response: {e}")))
    }
}

impl Instrumenter for AstPluginInserter {
    fn name(&self) -> &str {
        "plugin"
    }

    fn instrument(&self, code: &str, protocol: &MarkerProtocol) -> Result<String> {
        let req = PluginRequest {
            code,
            protocol: PluginProtocol {
                mode: protocol.mode,
                nonce: format!("{:016x}", protocol.nonce),
                markers: MarkerStage::ALL
                    .iter()
                    .map(|s| (*s, protocol.marker_text(*s)))
                    .collect(),
            },
        };
        let body = serde_json::to_vec(&req)?;
        let mut guard = self.proc.lock().unwrap_or_else(|e| e.into_inner());
        if guard.is_none() {
            *guard = Some(self.spawn()?);
        }
        let resp = self.request(guard.as_mut().expect("spawned"), &body);
        let resp = match resp {
            Ok(r) => r,
            Err(e) => {
                *guard = None;
                return Err(e);
            }
        };
        match (resp.ok, resp.code) {
            (true, Some(c)) => Ok(c),
            (true, None) => Err(Error::Instrumenter("plugin response missing code".into())),
            (false, _) => Err(Error::Instrumenter(format!(
                "plugin declined: {}",
                resp.reason.unwrap_or_else(|| "unspecified".into())
            ))),
        }
    }

    fn state_hash(&self) -> u64 {
        let parts: Vec<&str> = std::iter::once("plugin")
            .chain(self.command.iter().map(|s| s.as_str()))
            .collect();
        hash_of(&parts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;

    pub const C4_BEFORE: &str = include_str!("../../tests/fixtures/c4_before.py");
    pub const C4_AFTER: &str = include_str!("../../tests/fixtures/c4_after.py");

    #[test]
    fn reproduces_figure_pair() {
        let out = PatternInserter::apply(C4_BEFORE, &MarkerProtocol::plain());
        assert_eq!(out, C4_AFTER);
        assert_eq!(strip_markers(&out, &MarkerProtocol::plain()), C4_BEFORE);
    }

    #[test]
    fn empty_code() {
        assert_eq!(PatternInserter::apply("", &MarkerProtocol::plain()), "");
    }

    #[test]
    fn no_triggers_no_markers() {
        let code = "x = 1\ny = x + 2\nprint(y)\n";
        assert_eq!(
            PatternInserter::apply(code, &MarkerProtocol::nonce(3)),
            code
        );
    }

    #[test]
    fn loop_triggers_move_after_loop() {
        let code = "import csv\nfor f in files:\n    rows = open(f).read()\n    model.fit(rows)\n    loss = model.score(rows)\nprint('done')";
        let p = MarkerProtocol::plain();
        let out = PatternInserter::apply(code, &p);
        let expect = "import csv\nprint(\"imported packages\")\nfor f in files:\n    rows = open(f).read()\n    model.fit(rows)\n    loss = model.score(rows)\n    print(\"training loss:\", loss)\nprint(\"loaded data\")\nprint(\"trained model\")\nprint('done')";
        assert_eq!(out, expect);
        assert_eq!(strip_markers(&out, &p), code);
    }

    #[test]
    fn with_open_block_and_write_mode() {
        let code = "with open('../input/train.csv') as fh:\n    rows = fh.read()\nwith open('submission.csv', 'w') as out:\n    out.write('x')\n";
        let out = PatternInserter::apply(code, &MarkerProtocol::plain());
        assert_eq!(
            out,
            "with open('../input/train.csv') as fh:\n    rows = fh.read()\nprint(\"loaded data\")\nwith open('submission.csv', 'w') as out:\n    out.write('x')\n"
        );
    }

    #[test]
    fn loss_allowlist() {
        assert_eq!(
            loss_stage("loss", "criterion(out, y)"),
            Some(MarkerStage::TrainingLoss)
        );
        assert_eq!(
            loss_stage("val_loss", "mse(a, b)"),
            Some(MarkerStage::TestingLoss)
        );
        assert_eq!(
            loss_stage("test_loss", "0.0"),
            Some(MarkerStage::TestingLoss)
        );
        assert_eq!(loss_stage("loss_fn", "mse"), None);
        assert_eq!(loss_stage("criterion_loss", "nn.MSELoss()"), None);
        assert_eq!(loss_stage("losses", "[]"), None);
        assert_eq!(loss_stage("x", "1"), None);
    }

    #[test]
    fn external_inserter_rewrites_to_nonce() {
        let reply = format!("Here it is.\n```python\n{C4_AFTER}```\n");
        let backend =
            Arc::new(MockBackend::new(vec![]).with_rule("insert print statements", reply));
        let ext = ExternalModelInserter::new(backend, "mock", 2);
        let p = MarkerProtocol::nonce(0x1234);
        let out = ext.instrument(C4_BEFORE, &p).unwrap();
        assert!(out.contains("##EI:0000000000001234:loaded_data##"));
        assert!(!out.contains("print(\"loaded data\")"));
        assert_eq!(strip_markers(&out, &p), C4_BEFORE);
    }

    #[test]
    fn external_inserter_rejects_modified_code() {
        let reply = "```python\nimport os\nprint(\"imported packages\")\nos.remove('x')\n```";
        let backend = Arc::new(MockBackend::new(vec![reply.into()]));
        let ext = ExternalModelInserter::new(backend, "mock", 1);
        let r = instrument_or_passthrough(&ext, "import os\n", &MarkerProtocol::plain());
        assert_eq!(r.code, "import os\n");
        assert!(r.fallback.is_some());
    }

    #[test]
    fn external_inserter_backend_failure_falls_back() {
        let backend = Arc::new(MockBackend::new(vec![]));
        let ext = ExternalModelInserter::new(backend, "mock", 1);
        let r = instrument_or_passthrough(&ext, "x = 1", &MarkerProtocol::plain());
        assert_eq!(r.code, "x = 1");
        assert!(r.fallback.is_some());
    }

    #[test]
    fn prompt_contains_code_and_requirements() {
        let p = instrumentation_prompt("x = 1");
        assert!(p.ends_with("for this python script: x = 1"));
        assert!(p.contains("Only insert print statement AFTER an operation is actually performed"));
        assert!(p.contains("print(\"testing loss:\")"));
    }

    #[test]
    fn state_hash_is_stable() {
        assert_eq!(PatternInserter.state_hash(), PatternInserter.state_hash());
        assert_ne!(PatternInserter.state_hash(), Passthrough.state_hash());
    }

    #[test]
    fn missing_plugin_falls_back() {
        let plugin =
            AstPluginInserter::new(vec!["/nonexistent/plugin".into()], Duration::from_secs(1))
                .unwrap();
        let r = instrument_or_passthrough(&plugin, "import os", &MarkerProtocol::plain());
        assert_eq!(r.code, "import os");
        assert!(r.fallback.unwrap().contains("spawning plugin"));
    }
}
