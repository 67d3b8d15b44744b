//! The pipeline as a finite-horizon decision process over repository states.
//!
//! A state is `(repository view, memory handle, execution history)`; a
//! transition applies one code artifact and appends its execution outcome.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::sandbox::ExecutionOutcome;
use crate::types::{CodeArtifact, RelPath, TestOutcomes, TypeError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MdpError {
    #[error("PathError: {0}")]
    Path(#[from] TypeError),
    #[error("InvalidOutcome: {0}")]
    InvalidOutcome(String),
}

/// Opaque reference to the episodic store a state is bound to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MemoryHandle(pub String);

#[derive(Debug, Clone)]
pub struct HistoryEntry {
    pub action: Arc<CodeArtifact>,
    pub stdout: String,
    pub stderr: String,
    pub exit_status: i32,
    pub timestamp: Instant,
}

#[derive(Debug, Clone)]
pub struct PipelineState {
    repo: BTreeMap<RelPath, Arc<str>>,
    memory: MemoryHandle,
    history: Arc<Vec<Arc<HistoryEntry>>>,
}

impl PipelineState {
    pub fn new(files: impl IntoIterator<Item = (RelPath, String)>, memory: MemoryHandle) -> Self {
        PipelineState {
            repo: files.into_iter().map(|(p, c)| (p, Arc::from(c))).collect(),
            memory,
            history: Arc::new(Vec::new()),
        }
    }

    pub fn repo(&self) -> impl Iterator<Item = (&RelPath, &str)> {
        self.repo.iter().map(|(p, c)| (p, c.as_ref()))
    }

    pub fn file(&self, path: &RelPath) -> Option<&str> {
        self.repo.get(path).map(|c| c.as_ref())
    }

    pub fn repo_len(&self) -> usize {
        self.repo.len()
    }

    pub fn memory(&self) -> &MemoryHandle {
        &self.memory
    }

    pub fn history(&self) -> &[Arc<HistoryEntry>] {
        &self.history
    }

    /// Serialized snapshot of the repository, for handing to an executor.
    pub fn snapshot(&self) -> Vec<(RelPath, String)> {
        self.repo.iter().map(|(p, c)| (p.clone(), c.to_string())).collect()
    }

    /// `s' = (R ⊕ a, M, H ∪ {(a, o, e)})`. The receiver is left untouched.
    pub fn apply_transition(
        &self,
        action: &CodeArtifact,
        outcome: &ExecutionOutcome,
    ) -> Result<PipelineState, MdpError> {
        let path = RelPath::new(action.path.as_str())?;
        let mut repo = self.repo.clone();
        repo.insert(path, Arc::from(action.content.as_str()));
        let mut history = Vec::with_capacity(self.history.len() + 1);
        history.extend(self.history.iter().cloned());
        history.push(Arc::new(HistoryEntry {
            action: Arc::new(action.clone()),
            stdout: outcome.stdout.clone(),
            stderr: outcome.stderr.clone(),
            exit_status: outcome.exit_status,
            timestamp: Instant::now(),
        }));
        Ok(PipelineState {
            repo,
            memory: self.memory.clone(),
            history: Arc::new(history),
        })
    }
}

fn check_unique(results: &[crate::types::TestResult], list: &str) -> Result<(), MdpError> {
    let mut seen = BTreeSet::new();
    for t in results {
        if !seen.insert(t.id.as_str()) {
            return Err(MdpError::InvalidOutcome(format!("duplicate test id {:?} in {list}", t.id)));
        }
    }
    Ok(())
}

/// Binary reward: 1 iff every FAIL_TO_PASS test passes and no PASS_TO_PASS test regresses.
pub fn reward(outcomes: &TestOutcomes) -> Result<u8, MdpError> {
    if outcomes.fail_to_pass.is_empty() {
        return Err(MdpError::InvalidOutcome("fail_to_pass is empty".into()));
    }
    check_unique(&outcomes.fail_to_pass, "fail_to_pass")?;
    check_unique(&outcomes.pass_to_pass, "pass_to_pass")?;
    Ok(u8::from(outcomes.all_f2p_pass() && outcomes.all_p2p_pass()))
}

/// Discount and horizon of the decision process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MdpConfig {
    pub gamma: f64,
    pub horizon: u32,
}

impl Default for MdpConfig {
    fn default() -> Self {
        MdpConfig {
            gamma: 1.0,
            horizon: 3,
        }
    }
}

impl MdpConfig {
    /// `Σ_{t=0}^{T} γ^t r_t`; rewards past the horizon are ignored.
    pub fn discounted_return(&self, rewards: &[u8]) -> f64 {
        rewards
            .iter()
            .take(self.horizon as usize + 1)
            .enumerate()
            .map(|(t, &r)| self.gamma.powi(t as i32) * f64::from(r))
            .sum()
    }
}
