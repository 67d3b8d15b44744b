use super::{DiffError, LineTag, UnifiedDiff};

/// Splits text into lines without their `\n`; the flag records a trailing newline.
pub(crate) fn split_lines(text: &str) -> (Vec<&str>, bool) {
    if text.is_empty() {
        return (Vec::new(), true);
    }
    let ends_with_newline = text.ends_with('\n');
    let body = if ends_with_newline {
        &text[..text.len() - 1]
    } else {
        text
    };
    (body.split('\n').collect(), ends_with_newline)
}

/// Applies `diff` to `original` with zero fuzz. Context and removed lines must
/// match byte-for-byte at the stated positions, newline state included.
pub fn apply_diff(diff: &UnifiedDiff, original: &str) -> Result<String, DiffError> {
    diff.validate()?;
    let (orig, orig_ends_nl) = split_lines(original);
    let has_newline = |idx: usize| !(idx + 1 == orig.len() && !orig_ends_nl);

    let mut out: Vec<(&str, bool)> = Vec::with_capacity(orig.len());
    let mut cursor = 0usize;
    for (i, hunk) in diff.hunks.iter().enumerate() {
        let hunk_no = i + 1;
        let start = hunk.original_offset();
        if start > orig.len() {
            return Err(DiffError::Range {
                hunk: hunk_no,
                line: start + 1,
                file_lines: orig.len(),
            });
        }
        for idx in cursor..start {
            out.push((orig[idx], has_newline(idx)));
        }
        let mut idx = start;
        for line in &hunk.lines {
            match line.tag {
                LineTag::Add => out.push((&line.text, !line.no_newline)),
                LineTag::Context | LineTag::Remove => {
                    let Some(&found) = orig.get(idx) else {
                        return Err(DiffError::Range {
                            hunk: hunk_no,
                            line: idx + 1,
                            file_lines: orig.len(),
                        });
                    };
                    if found != line.text {
                        return Err(DiffError::Apply {
                            hunk: hunk_no,
                            line: idx + 1,
                            expected: line.text.clone(),
                            found: found.to_string(),
                        });
                    }
                    if has_newline(idx) == line.no_newline {
                        return Err(DiffError::Apply {
                            hunk: hunk_no,
                            line: idx + 1,
                            expected: newline_state(!line.no_newline).into(),
                            found: newline_state(has_newline(idx)).into(),
                        });
                    }
                    if line.tag == LineTag::Context {
                        out.push((found, !line.no_newline));
                    }
                    idx += 1;
                }
            }
        }
        cursor = idx;
    }
    for idx in cursor..orig.len() {
        out.push((orig[idx], has_newline(idx)));
    }

    let mut result = String::with_capacity(original.len());
    for (text, newline) in out {
        result.push_str(text);
        if newline {
            result.push('\n');
        }
    }
    Ok(result)
}

fn newline_state(has: bool) -> &'static str {
    if has {
        "(line ends with newline)"
    } else {
        "(no newline at end of file)"
    }
}

#[cfg(test)]
mod tests {
    use super::super::{make_diff, parse_unified_diff};
    use super::*;

    #[test]
    fn zero_hunk_diff_is_identity() {
        let original = "a\nb\r\nc";
        assert_eq!(apply_diff(&UnifiedDiff::default(), original).unwrap(), original);
    }

    #[test]
    fn replace_middle_line() {
        let d = parse_unified_diff("--- a/f\n+++ b/f\n@@ -3,1 +3,1 @@\n-c\n+X\n").unwrap();
        assert_eq!(apply_diff(&d, "a\nb\nc\nd\ne\n").unwrap(), "a\nb\nX\nd\ne\n");
    }

    #[test]
    fn context_mismatch_names_hunk_and_line() {
        let d = parse_unified_diff("--- a/f\n+++ b/f\n@@ -2,2 +2,2 @@\n b\n-c\n+X\n").unwrap();
        let err = apply_diff(&d, "a\nb\nZ\nd\n").unwrap_err();
        assert_eq!(
            err,
            DiffError::Apply {
                hunk: 1,
                line: 3,
                expected: "c".into(),
                found: "Z".into()
            }
        );
        assert!(err.to_string().starts_with("ApplyError"));
    }

    #[test]
    fn hunk_beyond_eof_is_range_error() {
        let d = parse_unified_diff("--- a/f\n+++ b/f\n@@ -9,1 +9,1 @@\n-c\n+X\n").unwrap();
        assert!(matches!(apply_diff(&d, "a\nb\n"), Err(DiffError::Range { hunk: 1, .. })));
        let d = parse_unified_diff("--- a/f\n+++ b/f\n@@ -2,2 +2,2 @@\n b\n-c\n+X\n").unwrap();
        assert!(matches!(
            apply_diff(&d, "a\nb\n"),
            Err(DiffError::Range { hunk: 1, line: 3, file_lines: 2 })
        ));
    }

    #[test]
    fn newline_marker_round_trip() {
        for (a, b) in [("x\ny", "x\ny\n"), ("x\ny\n", "x\ny"), ("", "z"), ("z", ""), ("a\r\nb\r\n", "a\r\nc\r\n")] {
            let d = make_diff("f", a, b);
            let reparsed = parse_unified_diff(&d.to_string()).unwrap();
            assert_eq!(apply_diff(&reparsed, a).unwrap(), b, "{a:?} -> {b:?}");
        }
    }

    #[test]
    fn missing_newline_state_must_match() {
        let d = make_diff("f", "a\nb\n", "a\nc\n");
        assert!(matches!(apply_diff(&d, "a\nb"), Err(DiffError::Apply { hunk: 1, line: 2, .. })));
    }

    #[test]
    fn pure_insertion_and_deletion() {
        let d = parse_unified_diff("--- a/f\n+++ b/f\n@@ -1,0 +2,1 @@\n+new\n").unwrap();
        assert_eq!(apply_diff(&d, "a\nb\n").unwrap(), "a\nnew\nb\n");
        let d = parse_unified_diff("--- a/f\n+++ b/f\n@@ -0,0 +1,1 @@\n+top\n").unwrap();
        assert_eq!(apply_diff(&d, "a\n").unwrap(), "top\na\n");
        let d = parse_unified_diff("--- a/f\n+++ /dev/null\n@@ -1,2 +0,0 @@\n-a\n-b\n").unwrap();
        assert_eq!(apply_diff(&d, "a\nb\n").unwrap(), "");
    }
}
