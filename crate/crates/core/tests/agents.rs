use std::process::Command;
use std::sync::Arc;

use groundloop_core::agents::*;
use groundloop_core::retrieval::RetrievalHit;
use groundloop_core::sandbox::{pass_predicate, PredicateConfig, ResourceLimits, Sandbox, SubprocessExecutor};
use groundloop_core::types::{AgentRole, ArtifactKind, ContextFile, RelPath, Step, Task};
use serde_json::json;

fn task() -> Task {
    Task::new("t1", "add two numbers", vec![]).unwrap()
}

fn backend(entries: Vec<ScriptEntry>) -> ScriptedBackend {
    ScriptedBackend::new(entries).unwrap()
}

fn session(b: &ScriptedBackend) -> AgentSession<'_> {
    AgentSession::new(b, ModelParams::default(), ContextBudget::default())
}

fn coder_step(file: Option<&str>) -> Step {
    Step::new(AgentRole::Coder, "implement it", file.map(|f| RelPath::new(f).unwrap()))
}

const PLAN: &str = r#"{"explanation": "simple", "steps": [
  {"agent": "coder", "description": "write add", "file": "calc.py"},
  {"agent": "tester", "description": "test add", "file": "calc.py"},
  {"agent": "critic", "description": "review", "file": null}]}"#;

#[test]
fn plan_fixture_parses_in_order() {
    let b = backend(vec![ScriptEntry::once(Some(AgentRole::Planner), None, format!("```json\n{PLAN}\n```"))]);
    let mut s = session(&b);
    let plan = s.plan(&task(), &[], &[]).unwrap();
    assert_eq!(plan.roles(), vec![AgentRole::Coder, AgentRole::Tester, AgentRole::Critic]);
    assert_eq!(plan.steps[0].target_file.as_ref().unwrap().as_str(), "calc.py");
    assert_eq!(s.transcripts().len(), 1);
}

#[test]
fn non_json_twice_is_plan_parse_error() {
    let b = backend(vec![ScriptEntry::always(Some(AgentRole::Planner), None, "I think we should write code.")]);
    let mut s = session(&b);
    assert!(matches!(s.plan(&task(), &[], &[]), Err(AgentError::PlanParse(_))));
    // One re-prompt, so two calls and two transcripts.
    assert_eq!(b.calls().len(), 2);
    assert_eq!(s.transcripts().len(), 2);
}

#[test]
fn reprompt_recovers_plan() {
    let b = backend(vec![
        ScriptEntry::once(Some(AgentRole::Planner), None, "sure!"),
        ScriptEntry::once(Some(AgentRole::Planner), Some("not valid JSON"), PLAN),
    ]);
    assert_eq!(session(&b).plan(&task(), &[], &[]).unwrap().steps.len(), 3);
}

#[test]
fn unknown_agent_names_the_field() {
    let b = backend(vec![ScriptEntry::once(
        None,
        None,
        r#"{"explanation":"", "steps":[{"agent":"coder","description":"a","file":null},{"agent":"reviewer","description":"b","file":null}]}"#,
    )]);
    let result = session(&b).plan(&task(), &[], &[]);
    match result {
        Err(AgentError::Schema { field, message }) => {
            assert_eq!(field, "steps[1].agent");
            assert!(message.contains("reviewer"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn zero_steps_is_empty_plan() {
    let b = backend(vec![ScriptEntry::once(None, None, r#"{"explanation":"nothing","steps":[]}"#)]);
    assert_eq!(session(&b).plan(&task(), &[], &[]), Err(AgentError::EmptyPlan));
}

#[test]
fn plan_prompt_orders_context_by_similarity() {
    let b = backend(vec![ScriptEntry::once(None, None, PLAN)]);
    let hit = |id: &str, sim: f64| RetrievalHit {
        id: id.into(),
        similarity: sim,
        payload: json!({"path": id, "content": format!("content of {id}")}),
    };
    let task = Task::new(
        "t",
        "fix it",
        vec![ContextFile {
            path: RelPath::new("a.py").unwrap(),
            content: "x = 1\n".into(),
        }],
    )
    .unwrap();
    session(&b).plan(&task, &[], &[hit("low.py", 0.2), hit("high.py", 0.9)]).unwrap();
    let input = &b.calls()[0].user_input;
    assert!(input.find("high.py").unwrap() < input.find("low.py").unwrap());
    assert!(input.contains("x = 1"));
}

#[test]
fn coder_new_file() {
    let b = backend(vec![ScriptEntry::once(Some(AgentRole::Coder), None, "def add(a, b):\n    return a + b\n")]);
    let out = session(&b).generate_code(&task(), &coder_step(Some("calc.py")), None, &[]).unwrap();
    assert_eq!(out.artifact.kind, ArtifactKind::NewFile);
    assert_eq!(out.artifact.content, "def add(a, b):\n    return a + b\n");
    assert_eq!(out.apply_error, None);
    let default = session(&backend(vec![ScriptEntry::once(None, None, "x = 1\n")]))
        .generate_code(&task(), &coder_step(None), None, &[])
        .unwrap();
    assert_eq!(default.artifact.path.as_str(), DEFAULT_NEW_FILE);
}

fn gnu_patch(original: &str, diff: &str) -> String {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("calc.py"), original).unwrap();
    std::fs::write(dir.path().join("fix.diff"), diff).unwrap();
    let st = Command::new("patch")
        .args(["-p1", "--fuzz=0", "-s", "-i", "fix.diff"])
        .current_dir(dir.path())
        .status()
        .unwrap();
    assert!(st.success());
    std::fs::read_to_string(dir.path().join("calc.py")).unwrap()
}

#[test]
fn coder_diff_matches_independent_patch() {
    let original = "def add(a, b):\n    return a - b\n\n\ndef sub(a, b):\n    return a - b\n";
    let diff = "--- a/calc.py\n+++ b/calc.py\n@@ -1,3 +1,3 @@\n def add(a, b):\n-    return a - b\n+    return a + b\n \n";
    let b = backend(vec![ScriptEntry::once(Some(AgentRole::Coder), Some("Current contents"), format!("```diff\n{diff}```\n"))]);
    let out = session(&b)
        .generate_code(&task(), &coder_step(Some("calc.py")), Some(original), &[])
        .unwrap();
    assert_eq!(out.apply_error, None);
    assert_eq!(out.artifact.kind, ArtifactKind::PatchedFile);
    assert_eq!(out.artifact.content, gnu_patch(original, diff));
    out.artifact.verify(original).unwrap();
}

#[test]
fn mismatched_context_routes_apply_error() {
    let original = "def add(a, b):\n    return a - b\n";
    let diff = "--- a/calc.py\n+++ b/calc.py\n@@ -1,2 +1,2 @@\n def plus(a, b):\n-    return a - b\n+    return a + b\n";
    let b = backend(vec![ScriptEntry::once(None, None, diff)]);
    let out = session(&b)
        .generate_code(&task(), &coder_step(Some("calc.py")), Some(original), &[])
        .unwrap();
    let err = out.apply_error.unwrap();
    assert!(err.contains("ApplyError"), "{err}");
    assert_eq!(out.artifact.content, original);
    out.artifact.verify(original).unwrap();
}

#[test]
fn empty_outputs_are_typed_errors() {
    let b = backend(vec![ScriptEntry::always(None, None, "```\n```")]);
    let mut s = session(&b);
    assert_eq!(s.generate_code(&task(), &coder_step(None), None, &[]), Err(AgentError::CoderEmpty));
    let code = groundloop_core::types::CodeArtifact::new_file(RelPath::new("calc.py").unwrap(), "x = 1\n");
    assert_eq!(s.generate_tests(&code, &coder_step(None)), Err(AgentError::TesterEmpty));
    assert_eq!(s.debug(&code, "boom"), Err(AgentError::DebuggerEmpty));
}

#[test]
fn tester_names_suite_after_code() {
    let suite_text = "from calc import add\n\ndef test_add():\n    assert add(2, 3) == 5\n";
    let b = backend(vec![ScriptEntry::once(Some(AgentRole::Tester), Some("module `calc`"), suite_text)]);
    let code = groundloop_core::types::CodeArtifact::new_file(
        RelPath::new("calc.py").unwrap(),
        "def add(a, b):\n    return a + b\n",
    );
    let suite = session(&b).generate_tests(&code, &Step::new(AgentRole::Tester, "test", None)).unwrap();
    assert_eq!(suite.path.as_str(), "test_calc.py");
    assert_eq!(suite.content, suite_text);
    let bare = groundloop_core::types::CodeArtifact::new_file(RelPath::new("calc").unwrap(), "x");
    assert_eq!(bare.path.test_path().as_str(), "test_calc");

    // The suite passes against known-good code when actually run.
    let sandbox = Sandbox::new(Arc::new(SubprocessExecutor::new()), ResourceLimits::default(), "python:3.10-slim", 1);
    let outcome = sandbox.execute(&code, &suite, &[]).unwrap();
    assert!(pass_predicate(&outcome, &PredicateConfig::default()), "{outcome:?}");
}

#[test]
fn debugger_repair_then_passes() {
    let buggy = groundloop_core::types::CodeArtifact::new_file(
        RelPath::new("rng.py").unwrap(),
        "def upto(n):\n    return list(range(n))\n",
    );
    let suite = groundloop_core::types::TestSuite {
        path: RelPath::new("test_rng.py").unwrap(),
        content: "from rng import upto\n\ndef test_inclusive():\n    assert upto(3) == [0, 1, 2, 3]\n".into(),
    };
    let sandbox = Sandbox::new(Arc::new(SubprocessExecutor::new()), ResourceLimits::default(), "python:3.10-slim", 1);
    let first = sandbox.execute(&buggy, &suite, &[]).unwrap();
    assert!(!pass_predicate(&first, &PredicateConfig::default()));

    let b = backend(vec![ScriptEntry::once(
        Some(AgentRole::Debugger),
        Some("assert"),
        "def upto(n):\n    return list(range(n + 1))\n",
    )]);
    let fixed = session(&b).debug(&buggy, &first.combined_output()).unwrap();
    assert_eq!(fixed.path, buggy.path);
    let second = sandbox.execute(&fixed, &suite, &[]).unwrap();
    assert!(pass_predicate(&second, &PredicateConfig::default()), "{second:?}");

    let noop = backend(vec![ScriptEntry::once(None, None, buggy.content.clone())]);
    assert_eq!(session(&noop).debug(&buggy, "err").unwrap(), buggy);
    assert!(matches!(session(&noop).debug(&buggy, "  "), Err(AgentError::Precondition(_))));
}

#[test]
fn critic_verdicts() {
    let results = vec!["step 1 ok".to_string()];
    let pass = backend(vec![ScriptEntry::once(None, None, "PASS\nall steps verified")]);
    let v = session(&pass).critique(&task(), &results).unwrap();
    assert!(v.is_pass());
    assert_eq!(v.rationale, "all steps verified");
    let fail = backend(vec![ScriptEntry::once(None, None, "FAIL\nregression in step 2")]);
    assert_eq!(session(&fail).critique(&task(), &results).unwrap().value, VerdictValue::Fail);
    let maybe = backend(vec![ScriptEntry::always(None, None, "MAYBE")]);
    let mut s = session(&maybe);
    assert_eq!(s.critique(&task(), &results).unwrap(), Verdict::fail("unparseable verdict"));
    assert_eq!(s.transcripts().len(), 2);
    assert!(matches!(s.critique(&task(), &[]), Err(AgentError::Precondition(_))));
}

#[test]
fn scripted_backend_contract() {
    let b = backend(vec![ScriptEntry::always(None, None, "same")]);
    let mut s = session(&b);
    for _ in 0..3 {
        assert_eq!(s.critique(&task(), &["r".into()]).unwrap(), Verdict::fail("unparseable verdict"));
    }
    let b = backend(vec![
        ScriptEntry::once(Some(AgentRole::Coder), None, "coder says"),
        ScriptEntry::once(Some(AgentRole::Planner), None, PLAN),
    ]);
    let mut s = session(&b);
    s.plan(&task(), &[], &[]).unwrap();
    let out = s.generate_code(&task(), &coder_step(None), None, &[]).unwrap();
    assert_eq!(out.artifact.content, "coder says");
    assert!(matches!(
        s.generate_code(&task(), &coder_step(None), None, &[]),
        Err(AgentError::Backend(BackendError::ScriptExhausted { .. }))
    ));
    assert!(ScriptedBackend::new(vec![]).is_err());
}

#[test]
fn transcripts_conserve_usage_and_stream_tokens() {
    let b = backend(vec![ScriptEntry::always(None, None, "PASS\nlooks right to me")]);
    let mut streamed = String::new();
    {
        let mut s = AgentSession::new(&b, ModelParams::default(), ContextBudget::default())
            .with_token_observer(|role, t| {
                assert_eq!(role, AgentRole::Critic);
                streamed.push_str(t);
            });
        s.critique(&task(), &["a".into()]).unwrap();
        s.critique(&task(), &["b".into()]).unwrap();
        let total: TokenUsage = s.transcripts().iter().map(|t| t.usage).sum();
        assert_eq!(s.usage(), total);
        assert!(s.transcripts().iter().all(|t| t.system_prompt_id == prompts::CRITIC.id()));
    }
    assert_eq!(streamed, "PASS\nlooks right to mePASS\nlooks right to me");
}

#[test]
fn oversized_input_is_truncated_to_budget() {
    let b = backend(vec![ScriptEntry::always(None, None, "PASS")]);
    let params = ModelParams {
        max_input_tokens: 120,
        max_output_tokens: 1,
        ..ModelParams::default()
    };
    let mut s = AgentSession::new(&b, params, ContextBudget::default());
    let long = "word ".repeat(5000);
    s.critique(&task(), &[long]).unwrap();
    let t = &s.transcripts()[0];
    assert!(t.usage.input_tokens <= 120, "{:?}", t.usage);
    assert!(t.usage.output_tokens <= 1);
}
