mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use fcflow_core::agents::{
    check_outcome, escalation_channel, execute_plan, make_plan, make_plan_default, DecidedBy, EscalationChannel,
    ExecutorOptions, HostCapacity, HumanDecision, Plan, PlanError, PlanReport, PlanStatus, Remediation, ReportEntry,
    StepBinding, StepDriver, StepSpec, Verdict, INVALID_PLAN_PREFIX,
};
use fcflow_core::backend::ScriptedBackend;
use fcflow_core::engine::{ExecutionRecord, FutureState};
use fcflow_core::registry::{CheckKind, OutcomePredicate};
use fcflow_core::{Backend, Engine, Registry};
use indexmap::IndexMap;
use proptest::prelude::*;

const END_TO_END: &str = "run the phylogeny workflow end to end";

fn chain_specs() -> Vec<StepSpec> {
    serde_json::from_value(serde_json::json!([
        {"task": "vcf_transform", "files": {"vep_vcf": common::VCF}},
        {"task": "pyclone_vi", "after": {"vcf_future_id": 1}},
        {"task": "spruce_format", "after": {"pyclone_future_id": 2}},
        {"task": "spruce_phylogeny", "after": {"spruce_future_id": 3}}
    ]))
    .unwrap()
}

fn backend(name: &str) -> Arc<dyn Backend> {
    Arc::new(common::script(name))
}

async fn plan_with(registry: &Registry, name: &str) -> Plan {
    make_plan_default(END_TO_END, registry, &common::script(name)).await.unwrap().plan
}

/// Answers every escalation with the next decision in `decisions`, and
/// records the questions it saw.
fn operator(decisions: Vec<HumanDecision>) -> (EscalationChannel, tokio::task::JoinHandle<Vec<(String, usize, String)>>) {
    let (channel, mut rx) = escalation_channel();
    let handle = tokio::spawn(async move {
        let mut seen = Vec::new();
        let mut decisions = decisions.into_iter();
        while let Some(pending) = rx.recv().await {
            seen.push((pending.id.clone(), pending.step, pending.question.clone()));
            let decision = decisions.next().unwrap_or(HumanDecision::Abort { reason: None });
            let _ = pending.answer(decision);
        }
        seen
    });
    (channel, handle)
}

fn assert_chain_dispatched_in_order(report: &PlanReport, engine: &Engine) {
    let futures = engine.futures();
    let ok: Vec<_> = futures.iter().filter(|f| f.state == FutureState::Succeeded).collect();
    let tasks: Vec<&str> = ok.iter().map(|f| f.task.as_str()).collect();
    assert_eq!(tasks, ["vcf_transform", "pyclone_vi", "spruce_format", "spruce_phylogeny"]);
    for pair in ok.windows(2) {
        let upstream: Vec<_> = pair[1].upstream.values().collect();
        assert_eq!(upstream, vec![&pair[0].id]);
        let before = pair[0].record.as_ref().unwrap().finished_at_us;
        assert!(pair[1].record.as_ref().unwrap().started_at_us.unwrap() >= before);
    }
    assert!(report.is_completed(), "{:#?}", report.status);
}

#[tokio::test]
async fn planner_produces_the_four_step_chain() {
    let registry = common::demo_registry();
    let planning = make_plan_default(END_TO_END, &registry, &common::script("plan_demo.json")).await.unwrap();
    let expected = Plan::from_specs(END_TO_END, chain_specs(), &registry).unwrap();
    assert_eq!(planning.plan, expected);
    assert!(planning.forwarded_errors.is_empty());
    assert_eq!(planning.plan.steps[1].binding, StepBinding::After([("vcf_future_id".to_string(), 1)].into_iter().collect()));
    // Defaults come from the task definitions.
    let pyclone = registry.task("pyclone_vi").unwrap();
    assert_eq!(planning.plan.steps[1].expected_outcome, pyclone.effective_checks());
    assert_eq!(planning.plan.steps[1].constraints.max_memory, Some(1_073_741_824));
}

#[tokio::test]
async fn planner_produces_a_single_step_plan() {
    let registry = common::demo_registry();
    let planning = make_plan_default("only transform the vcf", &registry, &common::script("plan_demo.json"))
        .await
        .unwrap();
    assert_eq!(planning.plan.len(), 1);
    assert_eq!(planning.plan.steps[0].task, "vcf_transform");
}

#[tokio::test]
async fn planner_forwards_validation_errors() {
    let registry = common::demo_registry();
    let backend = common::script("plan_correcting.json");
    let planning = make_plan_default(END_TO_END, &registry, &backend).await.unwrap();
    assert_eq!(planning.plan.len(), 4);
    assert_eq!(planning.forwarded_errors.len(), 1);
    assert!(planning.forwarded_errors[0].contains("vcf_transfrom"));
    let correction = planning
        .messages
        .iter()
        .find(|m| m.content.starts_with(INVALID_PLAN_PREFIX))
        .expect("the error was sent back");
    assert!(correction.content.contains("unknown task"));
    assert_eq!(backend.call_count(), 2);
}

#[tokio::test]
async fn planner_gives_up_after_the_retry_bound() {
    let registry = common::demo_registry();
    let backend =
        ScriptedBackend::load_script(r#"{"rules": [{"match": "always", "respond": {"final": "I would rather not."}}]}"#)
            .unwrap();
    let err = make_plan(END_TO_END, &registry, &backend, 3).await.unwrap_err();
    assert!(matches!(err, PlanError::Unplannable { attempts: 3, .. }), "{err}");
    assert_eq!(backend.call_count(), 3);
}

#[test]
fn plan_validation_rejects_bad_documents() {
    let registry = common::demo_registry();
    let parse = |text: &str| Plan::parse("d", text, &registry);
    assert!(matches!(parse("not json"), Err(PlanError::Parse(_))));
    assert!(matches!(parse(r#"{"steps": []}"#), Err(PlanError::Empty)));
    assert!(matches!(
        parse(r#"{"steps": [{"task": "nope", "files": {}}]}"#),
        Err(PlanError::UnknownTask { step: 1, .. })
    ));
    assert!(matches!(
        parse(r#"{"steps": [{"task": "pyclone_vi", "after": {"vcf_future_id": 1}}]}"#),
        Err(PlanError::ForwardReference { step: 1, target: 1, .. })
    ));
    assert!(matches!(
        parse(
            r#"{"steps": [{"task": "vcf_transform", "files": {"vep_vcf": "a"}},
                          {"task": "spruce_format", "after": {"pyclone_future_id": 1}}]}"#
        ),
        Err(PlanError::SlotTaskMismatch { step: 2, .. })
    ));
    assert!(matches!(
        parse(r#"{"steps": [{"task": "vcf_transform", "files": {"wrong": "a"}}]}"#),
        Err(PlanError::Binding { step: 1, .. })
    ));
    assert!(matches!(
        parse(
            r#"{"steps": [{"task": "vcf_transform", "files": {"vep_vcf": "a"},
                           "expected_outcome": [{"kind": "output-exists", "target": "nothing"}]}]}"#
        ),
        Err(PlanError::InvalidPredicate { step: 1, .. })
    ));
    let fenced = "```json\n{\"steps\": [{\"task\": \"vcf_transform\", \"files\": {\"vep_vcf\": \"a\"}}]}\n```";
    assert_eq!(parse(fenced).unwrap().len(), 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn conversation_driver_runs_the_chain_in_order() {
    let registry = common::demo_registry();
    let runs = common::scratch();
    let engine = common::engine(registry.clone(), runs.path(), 1);
    let plan = plan_with(&registry, "plan_demo.json").await;
    let report = execute_plan(
        plan,
        &engine,
        backend("plan_demo.json"),
        &EscalationChannel::closed(),
        ExecutorOptions::default(),
        None,
    )
    .await;
    assert_chain_dispatched_in_order(&report, &engine);
    assert_eq!(report.dispatch_order(), vec![1, 2, 3, 4]);
    for outcome in report.outcomes() {
        assert_eq!(outcome.verdict, Verdict::Ok);
        assert!(outcome.checks.iter().all(|c| c.passed));
        let conversation = outcome.conversation.as_ref().expect("step conversation kept");
        assert!(conversation.is_done());
        assert_eq!(conversation.dispatches().len(), 1);
        assert!(conversation.instruction().starts_with("Call fcall_"));
    }
    let steps: Vec<_> = report.outcomes().map(|o| o.step_index).collect();
    assert_eq!(steps, vec![1, 2, 3, 4]);
}

#[tokio::test(flavor = "multi_thread")]
async fn direct_driver_runs_the_chain_in_order() {
    let registry = common::demo_registry();
    let runs = common::scratch();
    let engine = common::engine(registry.clone(), runs.path(), 1);
    let plan = Plan::from_specs(END_TO_END, chain_specs(), &registry).unwrap();
    let report = execute_plan(
        plan,
        &engine,
        backend("plan_demo.json"),
        &EscalationChannel::closed(),
        ExecutorOptions {
            driver: StepDriver::Direct,
            ..ExecutorOptions::default()
        },
        None,
    )
    .await;
    assert_chain_dispatched_in_order(&report, &engine);
    assert!(report.outcomes().all(|o| o.conversation.is_none()));
}

#[tokio::test(flavor = "multi_thread")]
async fn independent_steps_run_concurrently() {
    let registry = common::demo_registry();
    let runs = common::scratch();
    let engine = common::engine(registry.clone(), runs.path(), 1);
    let specs: Vec<StepSpec> = serde_json::from_value(serde_json::json!([
        {"task": "vcf_transform", "files": {"vep_vcf": common::VCF}},
        {"task": "vcf_transform", "files": {"vep_vcf": common::VCF}},
        {"task": "pyclone_vi", "after": {"vcf_future_id": 2}}
    ]))
    .unwrap();
    let plan = Plan::from_specs("two roots", specs, &registry).unwrap();
    let report = execute_plan(
        plan,
        &engine,
        backend("plan_demo.json"),
        &EscalationChannel::closed(),
        ExecutorOptions::default(),
        None,
    )
    .await;
    assert!(report.is_completed());
    let order = report.dispatch_order();
    assert_eq!(order.len(), 3);
    assert_eq!(order[2], 3);
    let pyclone = engine.futures().into_iter().find(|f| f.task == "pyclone_vi").unwrap();
    let step2 = report.outcomes().find(|o| o.step_index == 2).unwrap();
    assert_eq!(pyclone.upstream["vcf_future_id"], *step2.future_id.as_ref().unwrap());
}

#[tokio::test(flavor = "multi_thread")]
async fn debugger_retry_recovers_a_flaky_step() {
    let registry = common::faulty_registry();
    let runs = common::scratch();
    let engine = common::engine(registry.clone(), runs.path(), 1);
    let plan = plan_with(&registry, "plan_debug_retry.json").await;
    let report = execute_plan(
        plan,
        &engine,
        backend("plan_debug_retry.json"),
        &EscalationChannel::closed(),
        ExecutorOptions::default(),
        None,
    )
    .await;
    assert!(report.is_completed(), "{:#?}", report.status);
    assert_eq!(report.step_history(2), ["failed", "retry_step", "ok"]);
    assert_eq!(report.dispatch_order(), vec![1, 2, 2, 3, 4]);
    let remediations: Vec<_> = report.remediations().collect();
    assert_eq!(remediations, vec![(&Remediation::RetryStep { binding: None }, DecidedBy::Debugger)]);
    let failed = report.outcomes().find(|o| !o.is_ok()).unwrap();
    let record = failed.record.as_ref().unwrap();
    assert_eq!(record.exit_code, 1);
    assert!(std::fs::read_to_string(&record.stderr_path).unwrap().contains("injected failure"));
}

#[tokio::test(flavor = "multi_thread")]
async fn unusable_debugger_reply_escalates_to_a_human() {
    let registry = common::faulty_registry();
    let runs = common::scratch();
    let engine = common::engine(registry.clone(), runs.path(), 1);
    let plan = plan_with(&registry, "plan_debug_garbage.json").await;
    let (channel, seen) = operator(vec![HumanDecision::ApproveRetry]);
    let report = execute_plan(
        plan,
        &engine,
        backend("plan_debug_garbage.json"),
        &channel,
        ExecutorOptions::default(),
        None,
    )
    .await;
    drop(channel);
    let seen = seen.await.unwrap();
    assert!(report.is_completed(), "{:#?}", report.status);
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].0, "esc-1");
    assert_eq!(seen[0].1, 2);
    assert!(seen[0].2.contains("pyclone_vi"));
    assert_eq!(report.step_history(2), ["failed", "retry_step", "ok"]);
    let remediations: Vec<_> = report.remediations().map(|(_, by)| by).collect();
    assert_eq!(remediations, vec![DecidedBy::Human]);
    assert!(report.entries.iter().any(|e| matches!(
        e,
        ReportEntry::EscalationAnswered { escalation_id, decision: HumanDecision::ApproveRetry, .. } if escalation_id == "esc-1"
    )));
}

#[tokio::test(flavor = "multi_thread")]
async fn operator_abort_stops_the_plan_with_causes() {
    let registry = common::faulty_registry();
    let runs = common::scratch();
    let engine = common::engine(registry.clone(), runs.path(), 1);
    let plan = plan_with(&registry, "plan_debug_garbage.json").await;
    let (channel, seen) = operator(vec![HumanDecision::Abort {
        reason: Some("inputs are wrong".into()),
    }]);
    let report = execute_plan(
        plan,
        &engine,
        backend("plan_debug_garbage.json"),
        &channel,
        ExecutorOptions::default(),
        None,
    )
    .await;
    drop(channel);
    assert_eq!(seen.await.unwrap().len(), 1);
    let PlanStatus::Aborted { reason, causes } = &report.status else {
        panic!("plan should abort: {:?}", report.status);
    };
    assert_eq!(reason, "inputs are wrong");
    assert!(causes[0].contains("pyclone_vi"), "{causes:?}");
    assert!(causes[1].contains("operator"), "{causes:?}");
    assert_eq!(report.dispatch_order(), vec![1, 2]);
    assert!(engine.futures().iter().all(|f| f.task != "spruce_format"));
}

#[tokio::test(flavor = "multi_thread")]
async fn closed_escalation_channel_aborts() {
    let registry = common::faulty_registry();
    let runs = common::scratch();
    let engine = common::engine(registry.clone(), runs.path(), 1);
    let plan = plan_with(&registry, "plan_debug_garbage.json").await;
    let report = execute_plan(
        plan,
        &engine,
        backend("plan_debug_garbage.json"),
        &EscalationChannel::closed(),
        ExecutorOptions::default(),
        None,
    )
    .await;
    assert!(matches!(report.status, PlanStatus::Aborted { .. }));
    assert_eq!(report.step_history(2), ["failed", "abort"]);
}

#[tokio::test(flavor = "multi_thread")]
async fn capacity_violation_never_launches_and_forces_escalation() {
    let registry = common::demo_registry();
    let runs = common::scratch();
    let engine = common::engine(registry.clone(), runs.path(), 1);
    let plan = Plan::from_specs(END_TO_END, chain_specs(), &registry).unwrap();
    let (channel, seen) = operator(vec![HumanDecision::Abort { reason: None }]);
    let report = execute_plan(
        plan,
        &engine,
        backend("plan_debug_retry.json"),
        &channel,
        ExecutorOptions {
            capacity: HostCapacity {
                memory_bytes: Some(1024),
                ..HostCapacity::default()
            },
            ..ExecutorOptions::default()
        },
        None,
    )
    .await;
    drop(channel);
    let seen = seen.await.unwrap();
    // Two debugger retries, then the executor stops asking the debugger.
    assert_eq!(
        report.step_history(1),
        ["failed", "retry_step", "failed", "retry_step", "failed", "abort"]
    );
    assert_eq!(seen.len(), 1);
    assert!(seen[0].2.contains("after 2 debugger attempts"), "{}", seen[0].2);
    let outcome = report.outcomes().next().unwrap();
    assert!(outcome.error.as_deref().unwrap().contains("constraint violated: max_memory"));
    assert!(outcome.record.is_none());
    assert!(report.dispatch_order().is_empty());
    assert!(engine.futures().is_empty());
}

#[test]
fn host_capacity_checks_every_constraint() {
    let registry = common::demo_registry();
    let plan = Plan::from_specs(END_TO_END, chain_specs(), &registry).unwrap();
    let step = &plan.steps[0];
    assert_eq!(HostCapacity::default().violation(step), None);
    let roomy = HostCapacity {
        memory_bytes: Some(1 << 40),
        storage_bytes: Some(1 << 40),
        server_classes: vec!["cpu".into()],
    };
    assert_eq!(roomy.violation(step), None);
    let small_disk = HostCapacity {
        storage_bytes: Some(10),
        ..roomy.clone()
    };
    assert!(small_disk.violation(step).unwrap().contains("max_storage"));
    let gpu_only = HostCapacity {
        server_classes: vec!["gpu".into()],
        ..roomy
    };
    assert!(gpu_only.violation(step).unwrap().contains("server class `cpu`"));
}

#[tokio::test(flavor = "multi_thread")]
async fn operator_binding_replaces_missing_inputs() {
    let registry = common::demo_registry();
    let runs = common::scratch();
    let engine = common::engine(registry.clone(), runs.path(), 1);
    let mut specs = chain_specs();
    specs[0].files = Some([("vep_vcf".to_string(), "./example_data/missing.vcf".to_string())].into_iter().collect());
    let plan = Plan::from_specs(END_TO_END, specs, &registry).unwrap();
    let values: IndexMap<String, String> = [("vep_vcf".to_string(), common::VCF.to_string())].into_iter().collect();
    let (channel, seen) = operator(vec![HumanDecision::ProvideBinding { values: values.clone() }]);
    let report = execute_plan(
        plan,
        &engine,
        backend("plan_debug_garbage.json"),
        &channel,
        ExecutorOptions::default(),
        None,
    )
    .await;
    drop(channel);
    assert_eq!(seen.await.unwrap().len(), 1);
    assert!(report.is_completed(), "{:#?}", report.status);
    assert_eq!(report.step_history(1), ["failed", "retry_step", "ok"]);
    assert_eq!(report.plan.steps[0].binding, StepBinding::Files(values));
    assert_eq!(report.plan.len(), 4);
    assert!(report.entries.iter().any(|e| matches!(e, ReportEntry::PlanModified { .. })));
}

#[tokio::test(flavor = "multi_thread")]
async fn invalid_operator_binding_aborts() {
    let registry = common::demo_registry();
    let runs = common::scratch();
    let engine = common::engine(registry.clone(), runs.path(), 1);
    let mut specs = chain_specs();
    specs[0].files = Some([("vep_vcf".to_string(), "missing.vcf".to_string())].into_iter().collect());
    let plan = Plan::from_specs(END_TO_END, specs, &registry).unwrap();
    let values: IndexMap<String, String> = [("wrong".to_string(), "x".to_string())].into_iter().collect();
    let (channel, _seen) = operator(vec![HumanDecision::ProvideBinding { values }]);
    let report = execute_plan(
        plan,
        &engine,
        backend("plan_debug_garbage.json"),
        &channel,
        ExecutorOptions::default(),
        None,
    )
    .await;
    let PlanStatus::Aborted { reason, .. } = &report.status else {
        panic!("expected abort: {:?}", report.status);
    };
    assert!(reason.starts_with("invalid binding"), "{reason}");
}

#[tokio::test(flavor = "multi_thread")]
async fn debugger_plan_change_replaces_the_failed_suffix() {
    let registry = common::faulty_registry();
    let runs = common::scratch();
    let engine = common::engine(registry.clone(), runs.path(), 1);
    let replacement = serde_json::json!({
        "action": "modify_plan",
        "steps": [
            {"task": "pyclone_vi", "after": {"vcf_future_id": 1}},
            {"task": "spruce_format", "after": {"pyclone_future_id": 2}}
        ]
    });
    let script = serde_json::json!({"rules": [
        {"match": {"regex": "^Call (?P<f>fcall_\\w+) with arguments (?P<a>\\{.*\\})$"},
         "respond": {"function_call": {"name": "${f}", "arguments": "${a}"}}},
        {"match": {"contains": "Diagnose failed step"}, "respond": {"final": replacement.to_string()}},
        {"match": "always", "respond": {"final": "DONE"}}
    ]});
    let backend: Arc<dyn Backend> = Arc::new(ScriptedBackend::load_script(&script.to_string()).unwrap());
    let plan = Plan::from_specs(END_TO_END, chain_specs(), &registry).unwrap();
    let report = execute_plan(
        plan,
        &engine,
        backend,
        &EscalationChannel::closed(),
        ExecutorOptions::default(),
        None,
    )
    .await;
    assert!(report.is_completed(), "{:#?}", report.status);
    assert_eq!(report.plan.len(), 3);
    assert_eq!(report.step_history(2), ["failed", "modify_plan", "ok"]);
    assert_eq!(report.step_history(4), Vec::<String>::new());
    assert!(engine.futures().iter().all(|f| f.task != "spruce_phylogeny"));
}

#[tokio::test(flavor = "multi_thread")]
async fn report_observer_sees_every_entry() {
    let registry = common::demo_registry();
    let runs = common::scratch();
    let engine = common::engine(registry.clone(), runs.path(), 1);
    let plan = Plan::from_specs(END_TO_END, chain_specs(), &registry).unwrap();
    let seen = Arc::new(std::sync::Mutex::new(Vec::new()));
    let sink = seen.clone();
    let report = execute_plan(
        plan,
        &engine,
        backend("plan_demo.json"),
        &EscalationChannel::closed(),
        ExecutorOptions::default(),
        Some(Arc::new(move |e: &ReportEntry| sink.lock().unwrap().push(e.clone()))),
    )
    .await;
    assert_eq!(*seen.lock().unwrap(), report.entries);
    let json = serde_json::to_string(&report).unwrap();
    let back: PlanReport = serde_json::from_str(&json).unwrap();
    assert_eq!(serde_json::to_string(&back).unwrap(), json);
}

fn fake_record(dir: &std::path::Path, exit_code: i32, stderr: &str) -> ExecutionRecord {
    std::fs::write(dir.join("stdout.txt"), "").unwrap();
    std::fs::write(dir.join("stderr.txt"), stderr).unwrap();
    ExecutionRecord {
        exit_code,
        output_dir: dir.to_path_buf(),
        stdout_path: dir.join("stdout.txt"),
        stderr_path: dir.join("stderr.txt"),
        produced_outputs: BTreeMap::new(),
        wall_time: Duration::ZERO,
        started_at_us: Some(0),
        finished_at_us: 1,
        cause: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    /// The verdict is ok iff the exit code is zero and every predicate holds,
    /// with predicates evaluated here straight from the filesystem.
    #[test]
    fn verdict_matches_filesystem_oracle(
        exit_code in prop_oneof![Just(0), Just(1), Just(2)],
        formatted in any::<bool>(),
        samples in 0usize..3,
        stderr in prop_oneof![Just(String::new()), Just("warning\n".to_string())],
        predicates in proptest::sample::subsequence(vec![0usize, 1, 2, 3], 0..=4),
    ) {
        let registry = common::demo_registry();
        let task = registry.task("vcf_transform").unwrap();
        let all = [
            OutcomePredicate::exit_code_zero(),
            OutcomePredicate { kind: CheckKind::OutputExists, target: Some("pyclone_vi_formatted".into()) },
            OutcomePredicate { kind: CheckKind::GlobNonempty, target: Some("pyclone_formatted_tsvs".into()) },
            OutcomePredicate { kind: CheckKind::StderrEmpty, target: None },
        ];
        let chosen: Vec<OutcomePredicate> = predicates.iter().map(|&i| all[i].clone()).collect();
        let mut spec = chain_specs().remove(0);
        spec.expected_outcome = Some(chosen.clone());
        let plan = Plan::from_specs("d", vec![spec], &registry).unwrap();

        let dir = common::scratch();
        if formatted {
            std::fs::write(dir.path().join("pyclone_vi_formatted.tsv"), "x").unwrap();
        }
        std::fs::create_dir(dir.path().join("pyclone_samples")).unwrap();
        for i in 0..samples {
            std::fs::write(dir.path().join("pyclone_samples").join(format!("s{i}.tsv")), "x").unwrap();
        }
        let record = fake_record(dir.path(), exit_code, &stderr);
        let outcome = check_outcome(&plan.steps[0], task, &record);

        let holds = |p: &OutcomePredicate| -> bool {
            let dir: PathBuf = dir.path().to_path_buf();
            match p.kind {
                CheckKind::ExitCodeZero => exit_code == 0,
                CheckKind::OutputExists => dir.join("pyclone_vi_formatted.tsv").is_file(),
                CheckKind::GlobNonempty => std::fs::read_dir(dir.join("pyclone_samples")).unwrap()
                    .filter_map(Result::ok)
                    .any(|e| e.file_name().to_string_lossy().ends_with(".tsv")),
                CheckKind::StderrEmpty => std::fs::read(dir.join("stderr.txt")).unwrap().is_empty(),
            }
        };
        let expected_ok = exit_code == 0 && chosen.iter().all(holds);
        prop_assert_eq!(outcome.is_ok(), expected_ok);
        prop_assert_eq!(outcome.checks.len(), chosen.len());
        for check in &outcome.checks {
            prop_assert_eq!(check.passed, holds(&check.predicate));
        }
    }

    /// Replacing the steps from `from` on keeps the prefix, renumbers the
    /// suffix and re-validates references against the new plan.
    #[test]
    fn plan_replacement_keeps_the_prefix(from in 1usize..=4, keep in 0usize..=4) {
        let registry = common::demo_registry();
        let plan = Plan::from_specs(END_TO_END, chain_specs(), &registry).unwrap();
        let specs: Vec<StepSpec> = chain_specs().into_iter().skip(from - 1).take(keep).collect();
        let result = plan.with_replacement(from, specs.clone(), &registry);
        let expected_len = from - 1 + specs.len();
        if expected_len == 0 {
            prop_assert!(matches!(result, Err(PlanError::Empty)));
        } else {
            let replaced = result.unwrap();
            prop_assert_eq!(replaced.len(), expected_len);
            prop_assert_eq!(&replaced.steps[..from - 1], &plan.steps[..from - 1]);
            for (i, step) in replaced.steps.iter().enumerate() {
                prop_assert_eq!(step.index, i + 1);
                prop_assert_eq!(&step.task, &plan.steps[i].task);
            }
            prop_assert_eq!(&replaced.source_description, &plan.source_description);
        }
        // A suffix that skips a step breaks the chain's references.
        if from < 4 {
            let broken: Vec<StepSpec> = chain_specs().into_iter().skip(from).collect();
            prop_assert!(plan.with_replacement(from, broken, &registry).is_err());
        }
    }
}

#[test]
fn remediation_documents_round_trip() {
    let cases = [
        r#"{"action":"retry_step"}"#,
        r#"{"action":"retry_step","binding":{"vep_vcf":"a.vcf"}}"#,
        r#"{"action":"escalate","question":"which file?"}"#,
        r#"{"action":"abort","reason":"bad data"}"#,
    ];
    for text in cases {
        let parsed: Remediation = serde_json::from_str(text).unwrap();
        assert_eq!(serde_json::to_string(&parsed).unwrap(), text);
    }
    assert!(serde_json::from_str::<Remediation>(r#"{"action":"reboot"}"#).is_err());
    let decision: HumanDecision =
        serde_json::from_str(r#"{"decision":"provide_binding","values":{"vep_vcf":"b.vcf"}}"#).unwrap();
    assert!(matches!(decision, HumanDecision::ProvideBinding { .. }));
}
