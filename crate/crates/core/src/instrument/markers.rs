//! Progress markers: emission lines, stdout parsing and sanitation.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::pyscan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerStage {
    ImportedPackages,
    LoadedData,
    DefinedModel,
    TrainingLoss,
    TrainedModel,
    TestingLoss,
    PredictedTestLabels,
}

impl MarkerStage {
    pub const ALL: [MarkerStage; 7] = [
        MarkerStage::ImportedPackages,
        MarkerStage::LoadedData,
        MarkerStage::DefinedModel,
        MarkerStage::TrainingLoss,
        MarkerStage::TrainedModel,
        MarkerStage::TestingLoss,
        MarkerStage::PredictedTestLabels,
    ];

    /// The plain-mode marker text.
    pub fn plain_text(self) -> &'static str {
        match self {
            MarkerStage::ImportedPackages => "imported packages",
            MarkerStage::LoadedData => "loaded data",
            MarkerStage::DefinedModel => "defined model",
            MarkerStage::TrainingLoss => "training loss:",
            MarkerStage::TrainedModel => "trained model",
            MarkerStage::TestingLoss => "testing loss:",
            MarkerStage::PredictedTestLabels => "predicted test labels",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MarkerStage::ImportedPackages => "imported_packages",
            MarkerStage::LoadedData => "loaded_data",
            MarkerStage::DefinedModel => "defined_model",
            MarkerStage::TrainingLoss => "training_loss",
            MarkerStage::TrainedModel => "trained_model",
            MarkerStage::TestingLoss => "testing_loss",
            MarkerStage::PredictedTestLabels => "predicted_test_labels",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn is_loss(self) -> bool {
        matches!(self, MarkerStage::TrainingLoss | MarkerStage::TestingLoss)
    }

    pub fn ordinal(self) -> usize {
        self as usize
    }
}

impl fmt::Display for MarkerStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerMode {
    Plain,
    #[default]
    Nonce,
}

impl MarkerMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MarkerMode::Plain => "plain",
            MarkerMode::Nonce => "nonce",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedMarkers {
    pub matched: BTreeSet<MarkerStage>,
    pub losses: Vec<(MarkerStage, f64)>,
}

impl ParsedMarkers {
    pub fn last_loss(&self, stage: MarkerStage) -> Option<f64> {
        self.losses
            .iter()
            .rev()
            .find(|(s, _)| *s == stage)
            .map(|(_, v)| *v)
    }
}

/// Marker format for one execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerProtocol {
    pub mode: MarkerMode,
    pub nonce: u64,
}

fn py_quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

impl MarkerProtocol {
    pub fn plain() -> Self {
        Self {
            mode: MarkerMode::Plain,
            nonce: 0,
        }
    }

    pub fn nonce(nonce: u64) -> Self {
        Self {
            mode: MarkerMode::Nonce,
            nonce,
        }
    }

    /// A protocol for a new execution; draws a nonce in nonce mode only.
    pub fn fresh<R: Rng + ?Sized>(mode: MarkerMode, rng: &mut R) -> Self {
        match mode {
            MarkerMode::Plain => Self::plain(),
            MarkerMode::Nonce => Self::nonce(rng.gen()),
        }
    }

    /// The text printed on stdout for a stage, without any value.
    pub fn marker_text(&self, stage: MarkerStage) -> String {
        match self.mode {
            MarkerMode::Plain => stage.plain_text().to_string(),
            MarkerMode::Nonce => format!("##EI:{:016x}:{}##", self.nonce, stage.name()),
        }
    }

    /// A guest statement (no indentation) printing the marker, optionally
    /// followed by the value of `value_expr`.
    pub fn emission_line(&self, stage: MarkerStage, value_expr: Option<&str>) -> String {
        let text = py_quote(&self.marker_text(stage));
        match value_expr {
            Some(v) => format!("print({text}, {v})"),
            None => format!("print({text})"),
        }
    }

    fn match_line(&self, line: &str) -> Option<(MarkerStage, Option<f64>)> {
        let line = line.trim_end_matches(['\r', ' ', '\t']);
        match self.mode {
            MarkerMode::Plain => {
                for stage in MarkerStage::ALL {
                    let text = stage.plain_text();
                    if stage.is_loss() {
                        if let Some(rest) = line.strip_prefix(text) {
                            if rest.is_empty() || rest.starts_with([' ', '\t']) {
                                return Some((stage, parse_value(rest)));
                            }
                        }
                    } else if line == text {
                        return Some((stage, None));
                    }
                }
                None
            }
            MarkerMode::Nonce => {
                let rest = line.strip_prefix("##EI:")?;
                let (hex, rest) = rest.split_at_checked(16)?;
                if u64::from_str_radix(hex, 16).ok()? != self.nonce
                    || !hex.bytes().all(|b| b.is_ascii_hexdigit())
                {
                    return None;
                }
                let rest = rest.strip_prefix(':')?;
                let end = rest.find("##")?;
                let stage = MarkerStage::from_name(&rest[..end])?;
                let tail = &rest[end + 2..];
                if !(tail.is_empty() || tail.starts_with([' ', '\t'])) {
                    return None;
                }
                let value = if stage.is_loss() {
                    parse_value(tail)
                } else {
                    None
                };
                Some((stage, value))
            }
        }
    }

    /// Distinct matched stages plus every parseable loss value, in order.
    pub fn parse_markers(&self, stdout: &str) -> ParsedMarkers {
        let mut out = ParsedMarkers::default();
        for line in stdout.lines() {
            if let Some((stage, value)) = self.match_line(line) {
                out.matched.insert(stage);
                if let Some(v) = value {
                    out.losses.push((stage, v));
                }
            }
        }
        out
    }

    /// Neutralises agent lines that could print a plain marker. Simple
    /// statements become `pass` with the original kept as a comment; lines in
    /// the middle of a bracketed or multi-line construct have the marker text
    /// redacted in place. Nonce mode leaves the code untouched.
    pub fn sanitize(&self, code: &str) -> String {
        if self.mode == MarkerMode::Nonce || !contains_plain_marker(code) {
            return code.to_string();
        }
        let lines: Vec<&str> = code.split('\n').collect();
        let states = pyscan::scan(&lines);
        let mut out = Vec::with_capacity(lines.len());
        for (i, line) in lines.iter().enumerate() {
            if !contains_plain_marker(line) {
                out.push(line.to_string());
                continue;
            }
            let st = &states[i];
            let prev = if i > 0 { Some(&states[i - 1]) } else { None };
            let body = line.trim();
            let simple = st.starts_statement(prev) && st.ends_statement() && !body.ends_with(':');
            if simple {
                out.push(format!(
                    "{}pass  # [sanitized] {}",
                    pyscan::indent_of(line),
                    body
                ));
            } else {
                out.push(redact(line));
            }
        }
        out.join("\n")
    }
}

fn parse_value(rest: &str) -> Option<f64> {
    let tok = rest.split_whitespace().next()?;
    let v: f64 = tok.trim_end_matches(',').parse().ok()?;
    v.is_finite().then_some(v)
}

fn contains_plain_marker(text: &str) -> bool {
    MarkerStage::ALL
        .iter()
        .any(|s| text.contains(s.plain_text()))
}

fn redact(line: &str) -> String {
    let mut s = line.to_string();
    for stage in MarkerStage::ALL {
        s = s.replace(stage.plain_text(), "[sanitized]");
    }
    s
}
