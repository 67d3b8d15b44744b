//! Domain types shared by every stage of the pipeline.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::diff::{self, UnifiedDiff};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TypeError {
    #[error("invalid path {path:?}: {reason}")]
    Path { path: String, reason: &'static str },
    #[error("{field} must not be empty")]
    Empty { field: &'static str },
    #[error("duplicate context file {0}")]
    DuplicatePath(String),
    #[error("plan has no coder step")]
    NoCoderStep,
    #[error("patched artifact for {0} has no origin diff")]
    MissingDiff(String),
    #[error("artifact diff does not reproduce content: {0}")]
    DiffMismatch(String),
}

/// A normalized, repository-relative path. Never absolute, never escapes the root.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct RelPath(String);

impl RelPath {
    pub fn new(raw: impl AsRef<str>) -> Result<Self, TypeError> {
        let raw = raw.as_ref();
        let err = |reason| TypeError::Path {
            path: raw.to_string(),
            reason,
        };
        if raw.contains('\0') {
            return Err(err("contains NUL"));
        }
        if raw.starts_with('/') || raw.starts_with('\\') {
            return Err(err("absolute path"));
        }
        if raw.contains('\\') {
            return Err(err("backslash separator"));
        }
        let bytes = raw.as_bytes();
        if bytes.len() >= 2 && bytes[1] == b':' && bytes[0].is_ascii_alphabetic() {
            return Err(err("drive prefix"));
        }
        let mut parts = Vec::new();
        for part in raw.split('/') {
            match part {
                "" | "." => continue,
                ".." => return Err(err("parent-directory component")),
                p => parts.push(p),
            }
        }
        if parts.is_empty() {
            return Err(err("empty path"));
        }
        Ok(RelPath(parts.join("/")))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Final path component.
    pub fn file_name(&self) -> &str {
        self.0.rsplit('/').next().unwrap_or(&self.0)
    }

    pub fn parent(&self) -> Option<&str> {
        self.0.rsplit_once('/').map(|(dir, _)| dir)
    }

    /// Sibling path `test_<file name>`; the sandbox runner discovers tests by this prefix.
    pub fn test_path(&self) -> RelPath {
        let name = format!("test_{}", self.file_name());
        match self.parent() {
            Some(dir) => RelPath(format!("{dir}/{name}")),
            None => RelPath(name),
        }
    }
}

impl fmt::Display for RelPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for RelPath {
    type Error = TypeError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        RelPath::new(value)
    }
}

impl From<RelPath> for String {
    fn from(value: RelPath) -> Self {
        value.0
    }
}

impl AsRef<str> for RelPath {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub String);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextFile {
    pub path: RelPath,
    pub content: String,
}

/// A natural-language task plus the files it may touch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTask")]
pub struct Task {
    pub id: TaskId,
    pub description: String,
    #[serde(default)]
    pub context_files: Vec<ContextFile>,
}

#[derive(Deserialize)]
struct RawTask {
    id: TaskId,
    description: String,
    #[serde(default)]
    context_files: Vec<ContextFile>,
}

impl TryFrom<RawTask> for Task {
    type Error = TypeError;
    fn try_from(raw: RawTask) -> Result<Self, Self::Error> {
        Task::new(raw.id.0, raw.description, raw.context_files)
    }
}

impl Task {
    pub fn new(
        id: impl Into<String>,
        description: impl Into<String>,
        context_files: Vec<ContextFile>,
    ) -> Result<Self, TypeError> {
        let description = description.into();
        if description.trim().is_empty() {
            return Err(TypeError::Empty {
                field: "description",
            });
        }
        let mut seen = BTreeSet::new();
        for file in &context_files {
            if !seen.insert(file.path.clone()) {
                return Err(TypeError::DuplicatePath(file.path.to_string()));
            }
        }
        Ok(Task {
            id: TaskId(id.into()),
            description,
            context_files,
        })
    }

    pub fn context_file(&self, path: &RelPath) -> Option<&str> {
        self.context_files
            .iter()
            .find(|f| &f.path == path)
            .map(|f| f.content.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentRole {
    Planner,
    Coder,
    Tester,
    Debugger,
    Critic,
}

impl AgentRole {
    pub const ALL: [AgentRole; 5] = [
        AgentRole::Planner,
        AgentRole::Coder,
        AgentRole::Tester,
        AgentRole::Debugger,
        AgentRole::Critic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentRole::Planner => "planner",
            AgentRole::Coder => "coder",
            AgentRole::Tester => "tester",
            AgentRole::Debugger => "debugger",
            AgentRole::Critic => "critic",
        }
    }

    pub fn parse(s: &str) -> Option<AgentRole> {
        AgentRole::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub agent: AgentRole,
    pub description: String,
    #[serde(rename = "file", default)]
    pub target_file: Option<RelPath>,
}

impl Step {
    pub fn new(agent: AgentRole, description: impl Into<String>, target_file: Option<RelPath>) -> Self {
        Step {
            agent,
            description: description.into(),
            target_file,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub explanation: String,
    pub steps: Vec<Step>,
}

impl Plan {
    pub fn new(explanation: impl Into<String>, steps: Vec<Step>) -> Result<Self, TypeError> {
        if steps.is_empty() {
            return Err(TypeError::Empty { field: "steps" });
        }
        if steps.iter().any(|s| s.description.trim().is_empty()) {
            return Err(TypeError::Empty {
                field: "steps[].description",
            });
        }
        if !steps.iter().any(|s| s.agent == AgentRole::Coder) {
            return Err(TypeError::NoCoderStep);
        }
        Ok(Plan {
            explanation: explanation.into(),
            steps,
        })
    }

    pub fn roles(&self) -> Vec<AgentRole> {
        self.steps.iter().map(|s| s.agent).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    NewFile,
    PatchedFile,
}

/// A candidate action: either a whole new file or a file produced by applying a diff.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeArtifact {
    pub kind: ArtifactKind,
    pub path: RelPath,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_diff: Option<UnifiedDiff>,
}

impl CodeArtifact {
    pub fn new_file(path: RelPath, content: impl Into<String>) -> Self {
        CodeArtifact {
            kind: ArtifactKind::NewFile,
            path,
            content: content.into(),
            origin_diff: None,
        }
    }

    /// Applies `diff` to `original`; the content is by construction the result of the diff.
    pub fn patched(
        path: RelPath,
        original: &str,
        diff: UnifiedDiff,
    ) -> Result<Self, diff::DiffError> {
        let content = diff::apply_diff(&diff, original)?;
        Ok(CodeArtifact {
            kind: ArtifactKind::PatchedFile,
            path,
            content,
            origin_diff: Some(diff),
        })
    }

    /// Replacement content at the same path. Patched artifacts carry the diff from
    /// their previous content so the kind invariant keeps holding.
    pub fn replaced(&self, content: impl Into<String>) -> Self {
        let content = content.into();
        match self.kind {
            ArtifactKind::NewFile => CodeArtifact::new_file(self.path.clone(), content),
            ArtifactKind::PatchedFile => {
                let diff = diff::make_diff(self.path.as_str(), &self.content, &content);
                CodeArtifact {
                    kind: ArtifactKind::PatchedFile,
                    path: self.path.clone(),
                    content,
                    origin_diff: Some(diff),
                }
            }
        }
    }

    /// Checks the kind/diff invariant against the pre-edit file.
    pub fn verify(&self, pre_edit: &str) -> Result<(), TypeError> {
        match (&self.kind, &self.origin_diff) {
            (ArtifactKind::PatchedFile, None) => Err(TypeError::MissingDiff(self.path.to_string())),
            (_, Some(d)) => {
                let applied = diff::apply_diff(d, pre_edit)
                    .map_err(|e| TypeError::DiffMismatch(e.to_string()))?;
                if applied == self.content {
                    Ok(())
                } else {
                    Err(TypeError::DiffMismatch(format!(
                        "applied content differs for {}",
                        self.path
                    )))
                }
            }
            (ArtifactKind::NewFile, None) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestSuite {
    pub path: RelPath,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestResult {
    pub id: String,
    pub passed: bool,
}

impl TestResult {
    pub fn new(id: impl Into<String>, passed: bool) -> Self {
        TestResult {
            id: id.into(),
            passed,
        }
    }
}

/// Per-test results for the FAIL_TO_PASS and PASS_TO_PASS sets.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestOutcomes {
    pub fail_to_pass: Vec<TestResult>,
    pub pass_to_pass: Vec<TestResult>,
}

impl TestOutcomes {
    pub fn all_f2p_pass(&self) -> bool {
        self.fail_to_pass.iter().all(|t| t.passed)
    }

    pub fn all_p2p_pass(&self) -> bool {
        self.pass_to_pass.iter().all(|t| t.passed)
    }
}
