use serde::{Deserialize, Serialize};

use super::ExecutionOutcome;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMatch {
    /// Token must not be adjacent to an identifier character (`[A-Za-z0-9_]`).
    #[default]
    WordBoundary,
    Substring,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredicateConfig {
    #[serde(default)]
    pub token_match: TokenMatch,
    /// Escape hatch for runners that log progress to stderr. Off by default.
    #[serde(default)]
    pub allow_stderr: bool,
}

const FAILURE_TOKENS: [&str; 2] = ["FAILED", "ERROR"];

fn is_ident(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Case-sensitive token search.
pub fn contains_token(haystack: &str, token: &str, mode: TokenMatch) -> bool {
    match mode {
        TokenMatch::Substring => haystack.contains(token),
        TokenMatch::WordBoundary => haystack.match_indices(token).any(|(at, _)| {
            let before = haystack[..at].chars().next_back();
            let after = haystack[at + token.len()..].chars().next();
            !before.is_some_and(is_ident) && !after.is_some_and(is_ident)
        }),
    }
}

/// The stream-only check: stderr empty and stdout free of failure tokens.
pub fn stream_predicate(stdout: &str, stderr: &str, cfg: &PredicateConfig) -> bool {
    (cfg.allow_stderr || stderr.is_empty())
        && !FAILURE_TOKENS
            .iter()
            .any(|t| contains_token(stdout, t, cfg.token_match))
}

/// Full pass predicate: the stream check plus a zero exit status and no timeout.
pub fn pass_predicate(outcome: &ExecutionOutcome, cfg: &PredicateConfig) -> bool {
    stream_predicate(&outcome.stdout, &outcome.stderr, cfg)
        && outcome.exit_status == 0
        && !outcome.timed_out
}
