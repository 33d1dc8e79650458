//! Turns raw model output into a canonical ranked list of titles.

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// Lines longer than this are never treated as bare list entries.
pub const MAX_BARE_LINE_CHARS: usize = 200;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedList {
    items: Vec<String>,
    pub k_requested: usize,
    pub source_instance_id: String,
}

impl RankedList {
    /// Builds a list from already-canonical items, dropping empty entries and
    /// later duplicates and truncating to `k_requested`.
    pub fn new<I, S>(items: I, k_requested: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut seen = HashSet::new();
        let items = items
            .into_iter()
            .map(Into::into)
            .filter(|s: &String| !s.is_empty())
            .filter(|s| seen.insert(s.clone()))
            .take(k_requested)
            .collect();
        Self {
            items,
            k_requested,
            source_instance_id: String::new(),
        }
    }

    pub fn with_source(mut self, id: impl Into<String>) -> Self {
        self.source_instance_id = id.into();
        self
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Renders the list back as a numbered list.
    pub fn to_numbered(&self) -> String {
        self.items
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{}. {}\n", i + 1, t))
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    pub raw_line_count: usize,
    pub parsed_count: usize,
    pub duplicates_removed: usize,
    pub short_list: bool,
    /// Entries dropped because `k` items had already been collected.
    pub overflow: usize,
    pub unparseable_lines: Vec<(usize, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("no list entries found ({} unparseable lines)", .unparseable_lines.len())]
    EmptyList {
        unparseable_lines: Vec<(usize, String)>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizeOptions {
    pub strip_trailing_parenthetical: bool,
}

impl Default for NormalizeOptions {
    fn default() -> Self {
        Self {
            strip_trailing_parenthetical: true,
        }
    }
}

fn marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"^(?:\d{1,4}\s*[.)]\s+|\d{1,4}\s*[.)](?:[^\d\s.)])|\d{1,4}\s*-\s+|[-*–]\s+|[•·]\s*)",
        )
        .expect("valid marker regex")
    })
}

fn parenthetical_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\s*[(\[][^()\[\]]*[)\]]\s*$").expect("valid paren regex"))
}

/// Length in bytes of a leading enumeration marker, if any.
fn marker_len(line: &str) -> Option<usize> {
    let m = marker_re().find(line)?;
    let s = m.as_str();
    // The `1.Title` alternative consumes the first title character.
    let consumed_title_char = s.chars().last().is_some_and(|c| {
        !c.is_whitespace() && !matches!(c, '.' | ')' | '-' | '•' | '*' | '·' | '–')
    });
    Some(if consumed_title_char {
        s.len() - s.chars().last().map_or(0, char::len_utf8)
    } else {
        s.len()
    })
}

const QUOTE_PAIRS: [(char, char); 6] = [
    ('"', '"'),
    ('\'', '\''),
    ('“', '”'),
    ('‘', '’'),
    ('«', '»'),
    ('`', '`'),
];

fn strip_wrapping(s: &str) -> Option<&str> {
    for (open, close) in QUOTE_PAIRS {
        if let Some(inner) = s.strip_prefix(open).and_then(|r| r.strip_suffix(close)) {
            return Some(inner);
        }
    }
    for emph in ["**", "__", "*", "_"] {
        if s.len() > 2 * emph.len() {
            if let Some(inner) = s.strip_prefix(emph).and_then(|r| r.strip_suffix(emph)) {
                return Some(inner);
            }
        }
    }
    None
}

fn normalize_step(s: &str, opts: NormalizeOptions) -> String {
    let mut cur = s.trim();
    if let Some(n) = marker_len(cur) {
        cur = cur[n..].trim();
    }
    let mut owned = cur.to_string();
    if opts.strip_trailing_parenthetical {
        if let Some(m) = parenthetical_re().find(&owned) {
            owned.truncate(m.start());
        }
    }
    let mut cur = owned.trim();
    while let Some(inner) = strip_wrapping(cur) {
        cur = inner.trim();
    }
    cur.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Canonical form of one title. Rules are applied until nothing changes, so
/// the result is a fixed point (`normalize(normalize(s)) == normalize(s)`).
pub fn normalize_title_with(raw: &str, opts: NormalizeOptions) -> String {
    let mut cur = normalize_step(raw, opts);
    loop {
        let next = normalize_step(&cur, opts);
        if next == cur {
            return cur;
        }
        cur = next;
    }
}

pub fn normalize_title(raw: &str) -> String {
    normalize_title_with(raw, NormalizeOptions::default())
}

fn looks_like_prose(line: &str) -> bool {
    line.ends_with(':') || line.ends_with('.') || line.chars().count() > MAX_BARE_LINE_CHARS
}

pub fn parse_list(raw_text: &str, k: usize) -> Result<(RankedList, ParseReport), ParseError> {
    parse_list_with(raw_text, k, NormalizeOptions::default())
}

/// Extracts at most `k` distinct titles in order of appearance.
///
/// If any line carries an enumeration or bullet marker only marked lines are
/// entries. Otherwise the output is treated as a bare list: every short line
/// that does not read like a sentence or a heading counts, provided there
/// are at least two of them.
pub fn parse_list_with(
    raw_text: &str,
    k: usize,
    opts: NormalizeOptions,
) -> Result<(RankedList, ParseReport), ParseError> {
    if k == 0 {
        return Err(ParseError::ZeroK);
    }
    let lines: Vec<(usize, &str)> = raw_text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect();
    let any_marked = lines.iter().any(|(_, l)| marker_len(l).is_some());

    let mut report = ParseReport {
        raw_line_count: raw_text.lines().count(),
        ..Default::default()
    };
    let mut candidates: Vec<(usize, &str)> = Vec::new();
    for &(no, line) in &lines {
        let is_entry = if any_marked {
            marker_len(line).is_some()
        } else {
            !looks_like_prose(line)
        };
        if is_entry {
            candidates.push((no, line));
        } else {
            report.unparseable_lines.push((no, line.to_string()));
        }
    }
    if !any_marked && candidates.len() < 2 {
        report
            .unparseable_lines
            .extend(candidates.drain(..).map(|(n, l)| (n, l.to_string())));
        report.unparseable_lines.sort();
    }

    let mut seen = HashSet::new();
    let mut items = Vec::new();
    for (no, line) in candidates {
        let title = normalize_title_with(line, opts);
        if title.is_empty() {
            report.unparseable_lines.push((no, line.to_string()));
            continue;
        }
        if items.len() == k {
            report.overflow += 1;
            continue;
        }
        report.parsed_count += 1;
        if seen.insert(title.clone()) {
            items.push(title);
        } else {
            report.duplicates_removed += 1;
        }
    }
    if items.is_empty() {
        return Err(ParseError::EmptyList {
            unparseable_lines: report.unparseable_lines,
        });
    }
    report.short_list = items.len() < k;
    let list = RankedList {
        items,
        k_requested: k,
        source_instance_id: String::new(),
    };
    Ok((list, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_title("3. \"Billie Jean\""), "billie jean");
        assert_eq!(normalize_title("- Inception (2010)"), "inception");
        assert_eq!(normalize_title("   Thriller  "), "thriller");
        assert_eq!(normalize_title("• **Bad**"), "bad");
        assert_eq!(normalize_title("12) Smooth   Criminal"), "smooth criminal");
        assert_eq!(normalize_title("4.Beat It"), "beat it");
        assert_eq!(normalize_title("“Man in the Mirror”"), "man in the mirror");
    }

    #[test]
    fn numeric_titles_survive() {
        assert_eq!(normalize_title("1. 1999"), "1999");
        assert_eq!(
            normalize_title("2001: A Space Odyssey (1968)"),
            "2001: a space odyssey"
        );
        assert_eq!(normalize_title("1. 1-800-273-8255"), "1-800-273-8255");
        assert_eq!(normalize_title("7. 99 Problems"), "99 problems");
    }

    #[test]
    fn parenthetical_stripping_is_optional() {
        let keep = NormalizeOptions {
            strip_trailing_parenthetical: false,
        };
        assert_eq!(
            normalize_title_with("Inception (2010)", keep),
            "inception (2010)"
        );
    }

    #[test]
    fn dedup_and_short_list() {
        let (list, rep) = parse_list("1. A\n2. B\n3. A\n4. C", 25).unwrap();
        assert_eq!(list.items(), ["a", "b", "c"]);
        assert_eq!(rep.duplicates_removed, 1);
        assert!(rep.short_list);
        assert_eq!(rep.parsed_count, list.len() + rep.duplicates_removed);
        assert_eq!(rep.raw_line_count, 4);
    }

    #[test]
    fn full_list() {
        let text: String = (1..=25).map(|i| format!("{i}. Song {i}\n")).collect();
        let (list, rep) = parse_list(&text, 25).unwrap();
        assert_eq!(list.len(), 25);
        assert!(!rep.short_list);
    }

    #[test]
    fn truncates_to_k() {
        let text: String = (1..=30).map(|i| format!("{i}. Song {i}\n")).collect();
        let (list, rep) = parse_list(&text, 25).unwrap();
        assert_eq!(list.len(), 25);
        assert_eq!(rep.overflow, 5);
        assert_eq!(list.items()[24], "song 25");
    }

    #[test]
    fn refusal_is_empty_list_error() {
        let err = parse_list("I'm sorry, I can't help with that.", 25).unwrap_err();
        assert!(matches!(err, ParseError::EmptyList { .. }));
        assert!(parse_list("", 25).is_err());
        assert_eq!(parse_list("1. a", 0).unwrap_err(), ParseError::ZeroK);
    }

    #[test]
    fn preamble_is_ignored_when_enumerated() {
        let text = "Here are 3 songs you might like:\n\n1. One\n2. Two\n3. Three\n\nEnjoy!";
        let (list, rep) = parse_list(text, 3).unwrap();
        assert_eq!(list.items(), ["one", "two", "three"]);
        assert_eq!(rep.unparseable_lines.len(), 2);
        assert_eq!(rep.unparseable_lines[0].0, 1);
    }

    #[test]
    fn bare_list() {
        let (list, _) = parse_list("Thriller\nBad\nDangerous", 25).unwrap();
        assert_eq!(list.items(), ["thriller", "bad", "dangerous"]);
        let (list, _) = parse_list("Sure! Here you go:\nHelp!\nYesterday", 25).unwrap();
        assert_eq!(list.items(), ["help!", "yesterday"]);
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize_title(&s);
            prop_assert_eq!(normalize_title(&once), once.clone());
        }

        #[test]
        fn normalize_is_idempotent_on_listy_input(
            n in 1u32..40,
            body in "[A-Za-z0-9 ()\"'*.-]{0,30}",
        ) {
            let s = format!("{n}. {body}");
            let once = normalize_title(&s);
            prop_assert_eq!(normalize_title(&once), once.clone());
        }

        #[test]
        fn reparse_of_rendered_list_is_stable(
            titles in proptest::collection::vec("[A-Za-z][A-Za-z0-9 '&]{0,20}( \\(19[0-9]{2}\\))?", 1..30),
            k in 1usize..30,
        ) {
            let raw: String = titles.iter().enumerate().map(|(i, t)| format!("{}. {}\n", i + 1, t)).collect();
            if let Ok((first, _)) = parse_list(&raw, k) {
                let (second, rep) = parse_list(&first.to_numbered(), k).unwrap();
                prop_assert_eq!(second.items(), first.items());
                prop_assert_eq!(rep.duplicates_removed, 0);
                // order is the order of first appearance in the input
                let normalized: Vec<String> = titles.iter().map(|t| normalize_title(t)).collect();
                let mut last = 0;
                for item in first.items() {
                    let pos = normalized.iter().position(|t| t == item).unwrap();
                    prop_assert!(pos >= last);
                    last = pos;
                }
            }
        }
    }
}
