//! Line-level lexical scan of guest source: bracket depth, open triple
//! quotes and backslash continuations, enough to group physical lines into
//! logical statements without a full parser.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LineState {
    /// Bracket depth at the start of the line.
    pub depth_before: usize,
    pub depth_after: usize,
    /// Line starts inside a triple-quoted string.
    pub in_string_before: bool,
    pub in_string_after: bool,
    pub backslash: bool,
}

impl LineState {
    /// True when the line begins a fresh logical statement.
    pub fn starts_statement(&self, prev: Option<&LineState>) -> bool {
        self.depth_before == 0
            && !self.in_string_before
            && !prev.map(|p| p.backslash).unwrap_or(false)
    }

    /// True when the logical statement is complete at the end of this line.
    pub fn ends_statement(&self) -> bool {
        self.depth_after == 0 && !self.in_string_after && !self.backslash
    }
}

pub fn scan(lines: &[&str]) -> Vec<LineState> {
    let mut out = Vec::with_capacity(lines.len());
    let mut depth: usize = 0;
    let mut triple: Option<char> = None;
    for line in lines {
        let mut st = LineState {
            depth_before: depth,
            in_string_before: triple.is_some(),
            ..Default::default()
        };
        let chars: Vec<char> = line.chars().collect();
        let mut i = 0;
        let mut single: Option<char> = None;
        while i < chars.len() {
            let c = chars[i];
            if let Some(q) = triple {
                if c == '\\' {
                    i += 2;
                    continue;
                }
                if c == q && chars.get(i + 1) == Some(&q) && chars.get(i + 2) == Some(&q) {
                    triple = None;
                    i += 3;
                    continue;
                }
                i += 1;
                continue;
            }
            if let Some(q) = single {
                if c == '\\' {
                    i += 2;
                    continue;
                }
                if c == q {
                    single = None;
                }
                i += 1;
                continue;
            }
            match c {
                '#' => break,
                '"' | '\'' => {
                    if chars.get(i + 1) == Some(&c) && chars.get(i + 2) == Some(&c) {
                        triple = Some(c);
                        i += 3;
                        continue;
                    }
                    single = Some(c);
                }
                '(' | '[' | '{' => depth += 1,
                ')' | ']' | '}' => depth = depth.saturating_sub(1),
                _ => {}
            }
            i += 1;
        }
        st.depth_after = depth;
        st.in_string_after = triple.is_some();
        st.backslash = triple.is_none() && line.trim_end().ends_with('\\');
        out.push(st);
    }
    out
}

/// Groups line indices into logical statements `[start, end]` (inclusive).
/// Blank and comment-only lines outside statements are skipped.
pub fn statements(lines: &[&str]) -> Vec<(usize, usize)> {
    let states = scan(lines);
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, st) in states.iter().enumerate() {
        if start.is_none() {
            let t = lines[i].trim();
            if st.starts_statement(if i > 0 { Some(&states[i - 1]) } else { None })
                && (t.is_empty() || t.starts_with('#'))
            {
                continue;
            }
            start = Some(i);
        }
        if st.ends_statement() {
            out.push((start.take().unwrap_or(i), i));
        }
    }
    if let Some(s) = start {
        out.push((s, lines.len() - 1));
    }
    out
}

/// Replaces the contents of string literals and comments in a logical
/// statement with spaces, keeping the quotes, so that patterns only match
/// code.
pub fn mask_strings(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    let mut quote: Option<(char, bool)> = None;
    while i < chars.len() {
        let c = chars[i];
        match quote {
            Some((q, triple)) => {
                if c == '\\' {
                    out.push_str("  ");
                    i += 2;
                    continue;
                }
                let closes = c == q
                    && (!triple || (chars.get(i + 1) == Some(&q) && chars.get(i + 2) == Some(&q)));
                if closes {
                    let n = if triple { 3 } else { 1 };
                    out.extend(std::iter::repeat_n(q, n));
                    quote = None;
                    i += n;
                    continue;
                }
                out.push(if c == '\n' { '\n' } else { ' ' });
            }
            None => match c {
                '#' => {
                    while i < chars.len() && chars[i] != '\n' {
                        out.push(' ');
                        i += 1;
                    }
                    continue;
                }
                '"' | '\'' => {
                    let triple = chars.get(i + 1) == Some(&c) && chars.get(i + 2) == Some(&c);
                    let n = if triple { 3 } else { 1 };
                    out.extend(std::iter::repeat_n(c, n));
                    quote = Some((c, triple));
                    i += n;
                    continue;
                }
                _ => out.push(c),
            },
        }
        i += 1;
    }
    out
}

pub fn indent_of(line: &str) -> &str {
    &line[..line.len() - line.trim_start().len()]
}
