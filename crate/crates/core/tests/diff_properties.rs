use std::process::Command;

use groundloop_core::diff::{
    apply_diff, approx_tokens, diff_stats, make_diff, parse_unified_diff, DiffStats, UnifiedDiff,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_file(rng: &mut ChaCha8Rng, lines: usize) -> String {
    let mut s = String::new();
    for _ in 0..lines {
        // Small alphabet so edits produce shared context.
        s.push_str(["alpha", "beta", "gamma", "delta", "eps"][rng.gen_range(0..5)]);
        s.push_str(&rng.gen_range(0..4).to_string());
        s.push('\n');
    }
    s
}

fn system_diff(a: &str, b: &str) -> String {
    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.txt"), dir.path().join("b.txt"));
    std::fs::write(&pa, a).unwrap();
    std::fs::write(&pb, b).unwrap();
    let out = Command::new("diff").current_dir(dir.path()).args(["-u", "a.txt", "b.txt"]).output().unwrap();
    String::from_utf8(out.stdout).unwrap()
}

fn system_patch(original: &str, diff: &str) -> String {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("f.txt");
    std::fs::write(&target, original).unwrap();
    std::fs::write(dir.path().join("p.diff"), diff).unwrap();
    let status = Command::new("patch")
        .current_dir(dir.path())
        .args(["--fuzz=0", "-s", "f.txt", "p.diff"])
        .status()
        .unwrap();
    assert!(status.success());
    std::fs::read_to_string(target).unwrap()
}

#[test]
fn system_diff_output_parses_and_reapplies() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..40 {
        let a = random_file(&mut rng, 50);
        let b = random_file(&mut rng, 50);
        let text = system_diff(&a, &b);
        let diff = parse_unified_diff(&text).unwrap();
        assert_eq!(apply_diff(&diff, &a).unwrap(), b);
    }
}

#[test]
fn generated_diffs_apply_with_system_patch() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..40 {
        let a = random_file(&mut rng, 50);
        let mut lines: Vec<String> = a.lines().map(String::from).collect();
        for _ in 0..rng.gen_range(1..6) {
            let i = rng.gen_range(0..lines.len());
            match rng.gen_range(0..3) {
                0 => lines[i] = format!("edited{}", rng.gen::<u16>()),
                1 => lines.insert(i, "inserted".into()),
                _ => {
                    lines.remove(i);
                }
            }
        }
        let b = lines.join("\n") + "\n";
        let diff = make_diff("f.txt", &a, &b);
        assert_eq!(system_patch(&a, &diff.to_string()), b);
    }
}

#[test]
fn five_line_replacement_matches_reference_tooling() {
    let a = "a\nb\nc\nd\ne\n";
    let text = "--- a/f\n+++ b/f\n@@ -3,1 +3,1 @@\n-c\n+X\n";
    assert_eq!(system_patch(a, text), "a\nb\nX\nd\ne\n");
    assert_eq!(apply_diff(&parse_unified_diff(text).unwrap(), a).unwrap(), "a\nb\nX\nd\ne\n");
}

fn naive_stats(text: &str) -> DiffStats {
    let mut s = DiffStats::default();
    for line in text.lines() {
        if line.starts_with("@@") {
            s.hunks += 1;
        } else if line.starts_with('+') && !line.starts_with("+++") {
            s.added += 1;
        } else if line.starts_with('-') && !line.starts_with("---") {
            s.removed += 1;
        }
    }
    s
}

fn content() -> impl Strategy<Value = String> {
    (
        prop::collection::vec(prop::sample::select(vec!["x", "y", "z", "", "  w", "x\r", "a\rb", "tab\t"]), 0..30),
        any::<bool>(),
    )
        .prop_map(|(lines, trailing)| {
            let mut s = lines.join("\n");
            if trailing && !s.is_empty() {
                s.push('\n');
            }
            s
        })
}

/// Line indices of `a` that lie outside every hunk's original range.
fn untouched_lines(diff: &UnifiedDiff, total: usize) -> Vec<usize> {
    (0..total)
        .filter(|&i| {
            diff.hunks.iter().all(|h| {
                let start = h.original_offset();
                i < start || i >= start + h.original_count
            })
        })
        .collect()
}

proptest! {
    #[test]
    fn round_trip_is_byte_exact(a in content(), b in content()) {
        let diff = make_diff("f.txt", &a, &b);
        prop_assert_eq!(apply_diff(&diff, &a).unwrap(), b.clone());
        let reparsed = parse_unified_diff(&diff.to_string()).unwrap();
        prop_assert_eq!(apply_diff(&reparsed, &a).unwrap(), b);
    }

    #[test]
    fn stats_match_naive_scan(a in content(), b in content()) {
        let diff = make_diff("f.txt", &a, &b);
        prop_assert_eq!(diff_stats(&diff), naive_stats(&diff.to_string()));
    }

    #[test]
    fn lines_outside_hunks_are_preserved(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_file(&mut rng, 60);
        let mut lines: Vec<String> = a.lines().map(String::from).collect();
        let i = rng.gen_range(0..lines.len());
        lines[i] = "changed".into();
        let b = lines.join("\n") + "\n";
        let diff = make_diff("f.txt", &a, &b);
        let out = apply_diff(&diff, &a).unwrap();
        let orig: Vec<&str> = a.lines().collect();
        let new: Vec<&str> = out.lines().collect();
        // Same-length edit: untouched indices line up.
        for idx in untouched_lines(&diff, orig.len()) {
            prop_assert_eq!(orig[idx], new[idx]);
        }
    }

    #[test]
    fn small_edits_cost_fewer_tokens_as_diffs(seed in any::<u64>(), len in 200usize..400, frac in 1usize..=10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_file(&mut rng, len);
        let k = (len * frac / 100).clamp(1, len / 10);
        let mut lines: Vec<String> = a.lines().map(String::from).collect();
        let at = rng.gen_range(0..=len - k);
        for line in &mut lines[at..at + k] {
            *line = format!("edited {}", rng.gen::<u32>());
        }
        let b = lines.join("\n") + "\n";
        let diff_tokens = approx_tokens(&make_diff("f.txt", &a, &b).to_string());
        prop_assert!((diff_tokens as f64) < 0.5 * approx_tokens(&b) as f64,
            "diff {} vs full {}", diff_tokens, approx_tokens(&b));
    }
}
