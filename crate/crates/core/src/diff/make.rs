use similar::{capture_diff_slices, group_diff_ops, Algorithm, ChangeTag};

use super::{Hunk, HunkLine, LineTag, UnifiedDiff};
use crate::types::RelPath;

const CONTEXT_LINES: usize = 3;

/// Builds the unified diff turning `old` into `new` for `path`. An empty `old`
/// is treated as file creation.
pub fn make_diff(path: &str, old: &str, new: &str) -> UnifiedDiff {
    let rel = RelPath::new(path).ok();
    // Lines end at `\n` only; a lone `\r` stays part of its line, as in the applier.
    let old_lines: Vec<&str> = old.split_inclusive('\n').collect();
    let new_lines: Vec<&str> = new.split_inclusive('\n').collect();
    let ops = capture_diff_slices(Algorithm::Myers, &old_lines, &new_lines);
    let mut hunks = Vec::new();
    for group in group_diff_ops(ops, CONTEXT_LINES) {
        let Some(first) = group.first() else {
            continue;
        };
        let old_range = first.old_range();
        let new_range = first.new_range();
        let mut lines = Vec::new();
        for op in &group {
            for change in op.iter_changes(&old_lines, &new_lines) {
                let tag = match change.tag() {
                    ChangeTag::Equal => LineTag::Context,
                    ChangeTag::Delete => LineTag::Remove,
                    ChangeTag::Insert => LineTag::Add,
                };
                let value = change.value();
                let (text, no_newline) = match value.strip_suffix('\n') {
                    Some(t) => (t, false),
                    None => (value, true),
                };
                lines.push(HunkLine {
                    tag,
                    text: text.to_string(),
                    no_newline,
                });
            }
        }
        let original_count = lines.iter().filter(|l| l.tag != LineTag::Add).count();
        let new_count = lines.iter().filter(|l| l.tag != LineTag::Remove).count();
        let start = |at: usize, count: usize| if count == 0 { at } else { at + 1 };
        hunks.push(Hunk {
            original_start: start(old_range.start, original_count),
            original_count,
            new_start: start(new_range.start, new_count),
            new_count,
            section: String::new(),
            lines,
        });
    }
    UnifiedDiff {
        source_path: if old.is_empty() { None } else { rel.clone() },
        target_path: if new.is_empty() && !old.is_empty() { None } else { rel },
        hunks,
    }
}
