//! Unified diffs: the Coder's minimal-edit action format.
//!
//! Parsing validates hunk counts against hunk bodies; application is strict
//! (zero fuzz) and byte-exact, including line endings and the
//! `\ No newline at end of file` marker.

mod apply;
mod make;
mod parse;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::types::RelPath;

pub use apply::apply_diff;
pub use make::make_diff;
pub use parse::{parse_patch_set, parse_unified_diff};

pub const NO_NEWLINE_MARKER: &str = "\\ No newline at end of file";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DiffError {
    #[error("ParseError at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("CountError at line {line}: {message}")]
    Count { line: usize, message: String },
    #[error("OrderError: hunk {hunk} overlaps or precedes hunk {}", hunk - 1)]
    Order { hunk: usize },
    #[error("expected a single-file diff, found {0} files")]
    MultipleFiles(usize),
    #[error("ApplyError: hunk {hunk} does not match at line {line}: expected {expected:?}, found {found:?}")]
    Apply {
        hunk: usize,
        line: usize,
        expected: String,
        found: String,
    },
    #[error("RangeError: hunk {hunk} reaches line {line} beyond end of file ({file_lines} lines)")]
    Range {
        hunk: usize,
        line: usize,
        file_lines: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LineTag {
    Context,
    Add,
    Remove,
}

impl LineTag {
    fn prefix(self) -> char {
        match self {
            LineTag::Context => ' ',
            LineTag::Add => '+',
            LineTag::Remove => '-',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HunkLine {
    pub tag: LineTag,
    /// Line text without its `\n` terminator (a `\r` is kept).
    pub text: String,
    /// The line is the last of its side and has no trailing newline.
    pub no_newline: bool,
}

impl HunkLine {
    pub fn new(tag: LineTag, text: impl Into<String>) -> Self {
        HunkLine {
            tag,
            text: text.into(),
            no_newline: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hunk {
    pub original_start: usize,
    pub original_count: usize,
    pub new_start: usize,
    pub new_count: usize,
    /// Trailing text of the `@@` header (usually a function name).
    pub section: String,
    pub lines: Vec<HunkLine>,
}

impl Hunk {
    /// 0-based index of the first original line this hunk consumes. Zero-count hunks
    /// name the line they insert after.
    pub fn original_offset(&self) -> usize {
        if self.original_count == 0 {
            self.original_start
        } else {
            self.original_start - 1
        }
    }

    fn count(&self, tag: LineTag) -> usize {
        self.lines.iter().filter(|l| l.tag == tag).count()
    }
}

/// One file's worth of hunks. `None` paths stand for `/dev/null`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UnifiedDiff {
    pub source_path: Option<RelPath>,
    pub target_path: Option<RelPath>,
    pub hunks: Vec<Hunk>,
}

impl UnifiedDiff {
    /// Path the diff edits: the new path, or the old one for deletions.
    pub fn path(&self) -> Option<&RelPath> {
        self.target_path.as_ref().or(self.source_path.as_ref())
    }

    pub fn is_creation(&self) -> bool {
        self.source_path.is_none() && self.target_path.is_some()
    }

    pub fn is_deletion(&self) -> bool {
        self.target_path.is_none() && self.source_path.is_some()
    }

    /// Checks count consistency, ordering, and marker placement.
    pub fn validate(&self) -> Result<(), DiffError> {
        let mut prev_end = 0usize;
        for (i, h) in self.hunks.iter().enumerate() {
            let hunk = i + 1;
            let old = h.count(LineTag::Context) + h.count(LineTag::Remove);
            let new = h.count(LineTag::Context) + h.count(LineTag::Add);
            if old != h.original_count || new != h.new_count {
                return Err(DiffError::Count {
                    line: hunk,
                    message: format!(
                        "hunk {hunk} declares -{},+{} but body has -{old},+{new}",
                        h.original_count, h.new_count
                    ),
                });
            }
            if h.original_count > 0 && h.original_start == 0 {
                return Err(DiffError::Parse {
                    line: hunk,
                    message: format!("hunk {hunk} starts at line 0"),
                });
            }
            let start = h.original_offset();
            if i > 0 && start < prev_end {
                return Err(DiffError::Order { hunk });
            }
            prev_end = start + h.original_count;
            check_markers(h, hunk)?;
        }
        Ok(())
    }
}

fn check_markers(h: &Hunk, hunk: usize) -> Result<(), DiffError> {
    let last_old = h.lines.iter().rposition(|l| l.tag != LineTag::Add);
    let last_new = h.lines.iter().rposition(|l| l.tag != LineTag::Remove);
    for (i, l) in h.lines.iter().enumerate() {
        if !l.no_newline {
            continue;
        }
        let ok = match l.tag {
            LineTag::Context => Some(i) == last_old && Some(i) == last_new,
            LineTag::Remove => Some(i) == last_old,
            LineTag::Add => Some(i) == last_new,
        };
        if !ok {
            return Err(DiffError::Parse {
                line: hunk,
                message: format!("hunk {hunk}: no-newline marker on a line that is not last"),
            });
        }
    }
    Ok(())
}

fn render_header_path(path: Option<&RelPath>, prefix: &str) -> String {
    match path {
        Some(p) => format!("{prefix}{p}"),
        None => "/dev/null".to_string(),
    }
}

fn render_range(start: usize, count: usize) -> String {
    if count == 1 {
        start.to_string()
    } else {
        format!("{start},{count}")
    }
}

impl fmt::Display for UnifiedDiff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.hunks.is_empty() {
            return Ok(());
        }
        writeln!(f, "--- {}", render_header_path(self.source_path.as_ref(), "a/"))?;
        writeln!(f, "+++ {}", render_header_path(self.target_path.as_ref(), "b/"))?;
        for h in &self.hunks {
            writeln!(
                f,
                "@@ -{} +{} @@{}",
                render_range(h.original_start, h.original_count),
                render_range(h.new_start, h.new_count),
                h.section
            )?;
            for l in &h.lines {
                writeln!(f, "{}{}", l.tag.prefix(), l.text)?;
                if l.no_newline {
                    writeln!(f, "{NO_NEWLINE_MARKER}")?;
                }
            }
        }
        Ok(())
    }
}

impl Serialize for UnifiedDiff {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for UnifiedDiff {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_unified_diff(&text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffStats {
    pub added: usize,
    pub removed: usize,
    pub hunks: usize,
}

pub fn diff_stats(diff: &UnifiedDiff) -> DiffStats {
    let mut stats = DiffStats {
        hunks: diff.hunks.len(),
        ..DiffStats::default()
    };
    for line in diff.hunks.iter().flat_map(|h| &h.lines) {
        match line.tag {
            LineTag::Add => stats.added += 1,
            LineTag::Remove => stats.removed += 1,
            LineTag::Context => {}
        }
    }
    stats
}

/// Whitespace-delimited word count, the token proxy used for edit-size accounting.
pub fn approx_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}
