use std::sync::OnceLock;

use regex::Regex;

use super::{DiffError, Hunk, HunkLine, LineTag, UnifiedDiff};
use crate::types::RelPath;

fn hunk_header() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^@@ -(\d+)(?:,(\d+))? \+(\d+)(?:,(\d+))? @@(.*)$").unwrap())
}

/// Parses text that must describe at most one file. Empty input yields an empty diff.
pub fn parse_unified_diff(text: &str) -> Result<UnifiedDiff, DiffError> {
    let mut files = parse_patch_set(text)?;
    match files.len() {
        0 => Ok(UnifiedDiff::default()),
        1 => Ok(files.remove(0)),
        n => Err(DiffError::MultipleFiles(n)),
    }
}

/// Parses a multi-file patch. Lines outside file sections (commit messages,
/// `diff --git`/`index` headers) are ignored.
pub fn parse_patch_set(text: &str) -> Result<Vec<UnifiedDiff>, DiffError> {
    let mut lines: Vec<&str> = text.split('\n').collect();
    if text.ends_with('\n') || text.is_empty() {
        lines.pop();
    }

    let mut files: Vec<UnifiedDiff> = Vec::new();
    let mut current: Option<UnifiedDiff> = None;
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i];
        if is_file_header(&lines, i) {
            if let Some(done) = current.take() {
                files.push(done);
            }
            current = Some(UnifiedDiff {
                source_path: header_path(&line[4..], i + 1)?,
                target_path: header_path(&lines[i + 1][4..], i + 2)?,
                hunks: Vec::new(),
            });
            i += 2;
        } else if line.starts_with("--- ") {
            return Err(DiffError::Parse {
                line: i + 1,
                message: "`---` header without a following `+++` header".into(),
            });
        } else if line.starts_with("@@") {
            let Some(file) = current.as_mut() else {
                return Err(DiffError::Parse {
                    line: i + 1,
                    message: "hunk before any file header".into(),
                });
            };
            let (hunk, next) = parse_hunk(&lines, i)?;
            file.hunks.push(hunk);
            i = next;
        } else {
            i += 1;
        }
    }
    if let Some(done) = current.take() {
        files.push(done);
    }
    for f in &files {
        f.validate()?;
    }
    Ok(files)
}

fn is_file_header(lines: &[&str], i: usize) -> bool {
    lines[i].starts_with("--- ") && lines.get(i + 1).is_some_and(|l| l.starts_with("+++ "))
}

fn header_path(raw: &str, line: usize) -> Result<Option<RelPath>, DiffError> {
    // Drop an optional tab-separated timestamp.
    let raw = raw.split('\t').next().unwrap_or("").trim_end();
    if raw == "/dev/null" {
        return Ok(None);
    }
    let stripped = raw
        .strip_prefix("a/")
        .or_else(|| raw.strip_prefix("b/"))
        .unwrap_or(raw);
    RelPath::new(stripped)
        .map(Some)
        .map_err(|e| DiffError::Parse {
            line,
            message: e.to_string(),
        })
}

fn parse_num(s: Option<regex::Match<'_>>, line: usize) -> Result<Option<usize>, DiffError> {
    s.map(|m| {
        m.as_str().parse::<usize>().map_err(|_| DiffError::Parse {
            line,
            message: format!("bad number {:?}", m.as_str()),
        })
    })
    .transpose()
}

fn parse_hunk(lines: &[&str], at: usize) -> Result<(Hunk, usize), DiffError> {
    let header_line = at + 1;
    let caps = hunk_header()
        .captures(lines[at])
        .ok_or_else(|| DiffError::Parse {
            line: header_line,
            message: format!("malformed hunk header {:?}", lines[at]),
        })?;
    let original_start = parse_num(caps.get(1), header_line)?.unwrap_or(0);
    let original_count = parse_num(caps.get(2), header_line)?.unwrap_or(1);
    let new_start = parse_num(caps.get(3), header_line)?.unwrap_or(0);
    let new_count = parse_num(caps.get(4), header_line)?.unwrap_or(1);
    let section = caps.get(5).map_or("", |m| m.as_str()).to_string();

    let mut old_left = original_count;
    let mut new_left = new_count;
    let mut body: Vec<HunkLine> = Vec::new();
    let mut j = at + 1;
    let short = |j: usize, old_left: usize, new_left: usize| DiffError::Count {
        line: header_line,
        message: format!(
            "hunk body ends at line {} with {old_left} original and {new_left} new lines missing",
            j + 1
        ),
    };
    while old_left > 0 || new_left > 0 {
        let Some(&l) = lines.get(j) else {
            return Err(short(j, old_left, new_left));
        };
        let (tag, text) = match l.as_bytes().first() {
            Some(b' ') => (LineTag::Context, &l[1..]),
            Some(b'-') => (LineTag::Remove, &l[1..]),
            Some(b'+') => (LineTag::Add, &l[1..]),
            // Editors and models often strip the space from blank context lines.
            None => (LineTag::Context, ""),
            Some(b'\\') => {
                mark_no_newline(&mut body, j)?;
                j += 1;
                continue;
            }
            _ => return Err(short(j, old_left, new_left)),
        };
        let (takes_old, takes_new) = match tag {
            LineTag::Context => (true, true),
            LineTag::Remove => (true, false),
            LineTag::Add => (false, true),
        };
        if (takes_old && old_left == 0) || (takes_new && new_left == 0) {
            return Err(DiffError::Count {
                line: header_line,
                message: format!("line {} exceeds the counts declared in the hunk header", j + 1),
            });
        }
        if takes_old {
            old_left -= 1;
        }
        if takes_new {
            new_left -= 1;
        }
        body.push(HunkLine::new(tag, text));
        j += 1;
    }
    if lines.get(j).is_some_and(|l| l.starts_with('\\')) {
        mark_no_newline(&mut body, j)?;
        j += 1;
    }
    if let Some(&l) = lines.get(j) {
        let stray = matches!(l.as_bytes().first(), Some(b' ' | b'+' | b'-')) && !is_file_header(lines, j);
        if stray {
            return Err(DiffError::Count {
                line: header_line,
                message: format!("line {} exceeds the counts declared in the hunk header", j + 1),
            });
        }
    }
    Ok((
        Hunk {
            original_start,
            original_count,
            new_start,
            new_count,
            section,
            lines: body,
        },
        j,
    ))
}

fn mark_no_newline(body: &mut [HunkLine], j: usize) -> Result<(), DiffError> {
    match body.last_mut() {
        Some(last) => {
            last.no_newline = true;
            Ok(())
        }
        None => Err(DiffError::Parse {
            line: j + 1,
            message: "no-newline marker before any hunk line".into(),
        }),
    }
}
