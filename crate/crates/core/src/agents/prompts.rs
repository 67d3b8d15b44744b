use sha2::{Digest, Sha256};

/// A system prompt shipped as a data file. Transcripts reference it by [`id`](Self::id).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: &'static str,
    pub version: u32,
    pub text: &'static str,
}

impl PromptTemplate {
    /// `name@vN:` followed by the first 12 hex digits of the text's SHA-256.
    pub fn id(&self) -> String {
        let digest = hex::encode(Sha256::digest(self.text.as_bytes()));
        format!("{}@v{}:{}", self.name, self.version, &digest[..12])
    }
}

pub const PLANNER: PromptTemplate = PromptTemplate {
    name: "planner",
    version: 1,
    text: include_str!("../../prompts/planner.txt"),
};

pub const CODER_DIFF: PromptTemplate = PromptTemplate {
    name: "coder_diff",
    version: 1,
    text: include_str!("../../prompts/coder_diff.txt"),
};

pub const CODER_NEW: PromptTemplate = PromptTemplate {
    name: "coder_new",
    version: 1,
    text: include_str!("../../prompts/coder_new.txt"),
};

pub const TESTER: PromptTemplate = PromptTemplate {
    name: "tester",
    version: 1,
    text: include_str!("../../prompts/tester.txt"),
};

pub const DEBUGGER: PromptTemplate = PromptTemplate {
    name: "debugger",
    version: 1,
    text: include_str!("../../prompts/debugger.txt"),
};

pub const CRITIC: PromptTemplate = PromptTemplate {
    name: "critic",
    version: 1,
    text: include_str!("../../prompts/critic.txt"),
};

pub const ALL: [PromptTemplate; 6] = [PLANNER, CODER_DIFF, CODER_NEW, TESTER, DEBUGGER, CRITIC];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_distinct_and_stable() {
        let ids: std::collections::BTreeSet<String> = ALL.iter().map(|t| t.id()).collect();
        assert_eq!(ids.len(), ALL.len());
        assert!(PLANNER.id().starts_with("planner@v1:"));
        assert_eq!(PLANNER.id(), PLANNER.id());
    }
}
