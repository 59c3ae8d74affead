from __future__ import annotations

import json
from pathlib import Path

import pytest

from conftest import fenced, multi_task_fixtures, replay_config, write_fixtures
from vapu.errors import (
    AbortedRun,
    EmptyChangeList,
    EmptyInstruction,
    NoCodeInResponse,
    UnparseableTaskList,
    UnparseableVerdict,
)
from vapu.gateway import GenerationParams, ReplayGateway, load_replay_fixtures
from vapu.models import AgentRole, ChangeRequest, Task
from vapu.pipeline import (
    RecordingGateway,
    execute_task,
    finalize_code,
    make_task_prompt,
    plan_tasks,
    reexecute_transcript,
    run_baseline,
    run_update,
    verify_task,
)
from vapu.prompts import PromptText
from vapu.workspace import Method, load_transcript

PARAMS = GenerationParams(temperature=0.0)


def gateway_for(tmp_path: Path, entries: dict[str, str], name: str = "fx") -> ReplayGateway:
    directory = write_fixtures(tmp_path / name, entries)
    return ReplayGateway(load_replay_fixtures(directory))


# --- plan_tasks ---

def test_plan_tasks_from_fixtures(tmp_path, sample_req, sample_doc) -> None:
    gateway = gateway_for(tmp_path, {
        "manager-0": "1. Update data access\n2. Update form helpers",
        "manager-1": "1. Update data access\n2. Update form helpers",
    })
    plan = plan_tasks(sample_req, sample_doc, gateway, PARAMS)
    assert [t.description for t in plan.tasks] == ["Update data access", "Update form helpers"]
    assert plan.reflected


def test_reflection_reorders_draft(tmp_path, sample_req, sample_doc) -> None:
    # Draft lists the steps out of order; the reflection pass fixes them.
    gateway = gateway_for(tmp_path, {
        "manager-0": "2. second step\n1. first step",
        "manager-1": "1. first step\n2. second step",
    })
    plan = plan_tasks(sample_req, sample_doc, gateway, PARAMS)
    assert [t.description for t in plan.tasks] == ["first step", "second step"]


def test_reflection_prompt_embeds_draft(tmp_path, sample_req, sample_doc) -> None:
    gateway = RecordingGateway(gateway_for(tmp_path, {
        "manager-0": "1. alpha\n2. beta",
        "manager-1": "1. alpha\n2. beta",
    }))
    plan_tasks(sample_req, sample_doc, gateway, PARAMS)
    reflection = gateway.exchanges[1]
    assert "1. alpha" in reflection.prompt and "2. beta" in reflection.prompt


def test_unparseable_reflection_falls_back_to_draft(tmp_path, sample_req, sample_doc) -> None:
    gateway = gateway_for(tmp_path, {
        "manager-0": "1. only task",
        "manager-1": "sounds good to me",
    })
    plan = plan_tasks(sample_req, sample_doc, gateway, PARAMS)
    assert [t.description for t in plan.tasks] == ["only task"]


def test_zero_tasks_after_both_exchanges(tmp_path, sample_req, sample_doc) -> None:
    gateway = gateway_for(tmp_path, {
        "manager-0": "cannot help",
        "manager-1": "still cannot help",
    })
    with pytest.raises(UnparseableTaskList):
        plan_tasks(sample_req, sample_doc, gateway, PARAMS)


def test_single_task_plans_are_permitted(tmp_path, sample_req, sample_doc) -> None:
    gateway = gateway_for(tmp_path, {"manager-0": "1. all in one", "manager-1": "1. all in one"})
    assert len(plan_tasks(sample_req, sample_doc, gateway, PARAMS).tasks) == 1


# --- make_task_prompt ---

def test_make_task_prompt_returns_fixture_text(tmp_path, sample_req, sample_doc) -> None:
    gateway = gateway_for(tmp_path, {
        "prompt_maker-0": "Replace $variant['Variant'] access with entity getters",
    })
    out = make_task_prompt(sample_req, Task(1, "update access"), sample_doc, gateway, PARAMS)
    assert out.text == "Replace $variant['Variant'] access with entity getters"


def test_make_task_prompt_blank_response(tmp_path, sample_req, sample_doc) -> None:
    gateway = gateway_for(tmp_path, {"prompt_maker-0": "   "})
    with pytest.raises(EmptyInstruction):
        make_task_prompt(sample_req, Task(1, "t"), sample_doc, gateway, PARAMS)


def test_two_tasks_get_distinct_prompts_in_fixture_order(tmp_path, sample_req, sample_doc) -> None:
    gateway = gateway_for(tmp_path, {
        "prompt_maker-0": "first instruction",
        "prompt_maker-1": "second instruction",
    })
    first = make_task_prompt(sample_req, Task(1, "a"), sample_doc, gateway, PARAMS)
    second = make_task_prompt(sample_req, Task(2, "b"), sample_doc, gateway, PARAMS)
    assert (first.text, second.text) == ("first instruction", "second instruction")


# --- execute_task ---

def instruction() -> PromptText:
    return PromptText(text="do the update", origin="test")


def test_execute_task_extracts_fenced_code(tmp_path, sample_doc) -> None:
    gateway = gateway_for(tmp_path, {"executor-0": "done:\n```\necho 1;\n```"})
    updated = execute_task(instruction(), sample_doc, gateway, PARAMS)
    assert updated.content == "echo 1;"
    assert updated.path == sample_doc.path
    assert updated.language_tag == sample_doc.language_tag


def test_execute_task_prose_flags_no_fence(tmp_path, sample_doc) -> None:
    recorder = RecordingGateway(gateway_for(tmp_path, {"executor-0": "  bare statement  "}))
    updated = execute_task(instruction(), sample_doc, recorder, PARAMS)
    assert updated.content == "bare statement"
    assert "no_fence" in recorder.exchanges[-1].flags


def test_execute_task_concatenates_two_blocks(tmp_path, sample_doc) -> None:
    gateway = gateway_for(tmp_path, {"executor-0": "```\na\n```\nand\n```\nb\n```"})
    assert execute_task(instruction(), sample_doc, gateway, PARAMS).content == "a\n\nb"


def test_execute_task_blank_response(tmp_path, sample_doc) -> None:
    gateway = gateway_for(tmp_path, {"executor-0": ""})
    with pytest.raises(NoCodeInResponse):
        execute_task(instruction(), sample_doc, gateway, PARAMS)


def test_execute_task_retries_truncated_output(tmp_path, sample_doc) -> None:
    recorder = RecordingGateway(gateway_for(tmp_path, {
        "executor-0": "```php\ncut off mid-file",
        "executor-1": fenced("echo 'complete';"),
    }))
    updated = execute_task(instruction(), sample_doc, recorder, PARAMS)
    assert updated.content == "echo 'complete';"
    assert "truncated" in recorder.exchanges[0].flags
    assert len(recorder.exchanges) == 2


# --- verify_task ---

def test_verify_accept(tmp_path, sample_req, sample_doc) -> None:
    gateway = gateway_for(tmp_path, {"verifier-0": "ACCEPT"})
    verdict = verify_task(sample_req, Task(1, "t"), sample_doc,
                          sample_doc.with_content("new"), gateway, PARAMS)
    assert verdict.accepted


def test_verify_reject(tmp_path, sample_req, sample_doc) -> None:
    gateway = gateway_for(tmp_path, {"verifier-0": "REJECT:\n- restore URL helper"})
    verdict = verify_task(sample_req, Task(1, "t"), sample_doc,
                          sample_doc.with_content("new"), gateway, PARAMS)
    assert not verdict.accepted and len(verdict.changes) == 1


def test_verify_unparseable_raises(tmp_path, sample_req, sample_doc) -> None:
    gateway = gateway_for(tmp_path, {"verifier-0": "maybe"})
    with pytest.raises(UnparseableVerdict):
        verify_task(sample_req, Task(1, "t"), sample_doc,
                    sample_doc.with_content("new"), gateway, PARAMS)


def test_verify_requires_same_path(tmp_path, sample_req, sample_doc) -> None:
    other = sample_doc.with_content("x")
    other.path = "elsewhere.php"
    with pytest.raises(ValueError):
        verify_task(sample_req, Task(1, "t"), sample_doc, other, None, PARAMS)


# --- finalize_code ---

def test_finalize_returns_corrected_code(tmp_path, sample_doc) -> None:
    gateway = gateway_for(tmp_path, {"finalizer-0": fenced("echo 'fixed';")})
    updated = finalize_code(sample_doc, [ChangeRequest("restore helper")], gateway, PARAMS)
    assert updated.content == "echo 'fixed';"


def test_finalize_rejects_empty_change_list(tmp_path, sample_doc) -> None:
    with pytest.raises(EmptyChangeList):
        finalize_code(sample_doc, [], None, PARAMS)


def test_finalizer_prompt_lists_changes(tmp_path, sample_doc) -> None:
    recorder = RecordingGateway(gateway_for(tmp_path, {"finalizer-0": fenced("x")}))
    finalize_code(sample_doc, [ChangeRequest("fix a"), ChangeRequest("fix b")],
                  recorder, PARAMS)
    prompt = recorder.exchanges[0].prompt
    assert "- fix a" in prompt and "- fix b" in prompt


# --- run_update ---

def exchanges_of(config, run_id: str):
    return load_transcript(Path(config.output_dir) / f"{run_id}.jsonl").exchanges


def test_all_accept_run_never_invokes_finalizer(tmp_path, sample_req, sample_doc) -> None:
    fixtures = write_fixtures(tmp_path / "fx", multi_task_fixtures(
        tasks=3, verifier_responses=["ACCEPT"] * 3, finalizer_count=0))
    config = replay_config(tmp_path / "out", fixtures)
    result = run_update(sample_req, sample_doc, config)
    assert not result.unverified
    assert all(o.finalizer_iterations == 0 for o in result.per_task_outcomes)
    roles = [e.role for e in exchanges_of(config, result.transcript_ref)]
    assert AgentRole.FINALIZER not in roles
    # final code is the last executor output, untouched
    assert result.final_code.content == "echo 'executed 3';"


def test_reject_once_then_accept(tmp_path, sample_req, sample_doc) -> None:
    fixtures = write_fixtures(tmp_path / "fx", multi_task_fixtures(
        tasks=1,
        verifier_responses=["REJECT:\n- not quite", "ACCEPT"],
        finalizer_count=1))
    config = replay_config(tmp_path / "out", fixtures)
    result = run_update(sample_req, sample_doc, config)
    outcome = result.per_task_outcomes[0]
    assert outcome.accepted and outcome.finalizer_iterations == 1
    assert not result.unverified
    assert result.final_code.content == "echo 'finalized 0';"


def test_always_reject_exhausts_budget_and_carries_last_output(
        tmp_path, sample_req, sample_doc) -> None:
    fixtures = write_fixtures(tmp_path / "fx", multi_task_fixtures(
        tasks=1, verifier_responses=["REJECT:\n- still wrong"] * 3, finalizer_count=2))
    config = replay_config(tmp_path / "out", fixtures)
    result = run_update(sample_req, sample_doc, config)
    outcome = result.per_task_outcomes[0]
    assert not outcome.accepted
    assert outcome.finalizer_iterations == 2
    assert result.unverified
    assert result.final_code.content == "echo 'finalized 1';"


def test_unparseable_verdict_reasked_then_accepted(tmp_path, sample_req, sample_doc) -> None:
    fixtures = write_fixtures(tmp_path / "fx", multi_task_fixtures(
        tasks=1, verifier_responses=["maybe", "ACCEPT"], finalizer_count=0))
    config = replay_config(tmp_path / "out", fixtures)
    result = run_update(sample_req, sample_doc, config)
    assert result.per_task_outcomes[0].accepted
    roles = [e.role for e in exchanges_of(config, result.transcript_ref)]
    assert roles.count(AgentRole.VERIFIER) == 2


def test_persistently_unparseable_verdict_fails_safe_into_loop(
        tmp_path, sample_req, sample_doc) -> None:
    # Two unparseable answers become a generic rejection; the loop then
    # runs the finalizer and the next verdicts accept.
    fixtures = write_fixtures(tmp_path / "fx", multi_task_fixtures(
        tasks=1, verifier_responses=["maybe", "hmm", "ACCEPT"], finalizer_count=1))
    config = replay_config(tmp_path / "out", fixtures)
    result = run_update(sample_req, sample_doc, config)
    outcome = result.per_task_outcomes[0]
    assert outcome.accepted and outcome.finalizer_iterations == 1


def test_missing_fixture_aborts_with_task_index(tmp_path, sample_req, sample_doc) -> None:
    entries = multi_task_fixtures(tasks=2, verifier_responses=["ACCEPT"], finalizer_count=0)
    del entries["executor-1"]  # second task's executor response is missing
    fixtures = write_fixtures(tmp_path / "fx", entries)
    config = replay_config(tmp_path / "out", fixtures)
    with pytest.raises(AbortedRun) as excinfo:
        run_update(sample_req, sample_doc, config)
    assert excinfo.value.task_index == 2
    transcript = load_transcript(
        Path(config.output_dir) / f"{excinfo.value.run_id}.jsonl")
    assert transcript.status == "aborted"
    assert transcript.outcome["failed_task_index"] == 2
    assert len(transcript.exchanges) > 0


def test_planning_failure_aborts_with_index_zero(tmp_path, sample_req, sample_doc) -> None:
    fixtures = write_fixtures(tmp_path / "fx", {"manager-0": "nope", "manager-1": "nope"})
    config = replay_config(tmp_path / "out", fixtures)
    with pytest.raises(AbortedRun) as excinfo:
        run_update(sample_req, sample_doc, config)
    assert excinfo.value.task_index == 0


def test_truncated_executor_output_marks_run(tmp_path, sample_req, sample_doc) -> None:
    entries = multi_task_fixtures(tasks=1, verifier_responses=["ACCEPT"], finalizer_count=0)
    entries["executor-0"] = "```php\ncut off"
    entries["executor-1"] = fenced("echo 'recovered';")
    fixtures = write_fixtures(tmp_path / "fx", entries)
    config = replay_config(tmp_path / "out", fixtures)
    result = run_update(sample_req, sample_doc, config)
    assert result.truncated
    assert result.final_code.content == "echo 'recovered';"


def test_replay_runs_are_deterministic(tmp_path, sample_req, sample_doc) -> None:
    entries = multi_task_fixtures(
        tasks=2, verifier_responses=["REJECT:\n- more", "ACCEPT", "ACCEPT"], finalizer_count=1)
    first = run_update(sample_req, sample_doc,
                       replay_config(tmp_path / "out1", write_fixtures(tmp_path / "fx1", entries)))
    second = run_update(sample_req, sample_doc,
                        replay_config(tmp_path / "out2", write_fixtures(tmp_path / "fx2", entries)))
    assert first.final_code.content == second.final_code.content
    assert first.per_task_outcomes == second.per_task_outcomes


def test_transcript_exchange_order_is_strict(tmp_path, sample_req, sample_doc) -> None:
    fixtures = write_fixtures(tmp_path / "fx", multi_task_fixtures(
        tasks=3, verifier_responses=["ACCEPT"] * 3, finalizer_count=0))
    config = replay_config(tmp_path / "out", fixtures)
    result = run_update(sample_req, sample_doc, config)
    exchanges = exchanges_of(config, result.transcript_ref)
    stamps = [e.started_at for e in exchanges]
    assert stamps == sorted(stamps)
    assert len(set(stamps)) == len(stamps)


def test_tasks_execute_once_each_in_order(tmp_path, sample_req, sample_doc) -> None:
    fixtures = write_fixtures(tmp_path / "fx", multi_task_fixtures(
        tasks=3, verifier_responses=["ACCEPT"] * 3, finalizer_count=0))
    config = replay_config(tmp_path / "out", fixtures)
    result = run_update(sample_req, sample_doc, config)
    assert [o.task_index for o in result.per_task_outcomes] == [1, 2, 3]
    prompts = [e.prompt for e in exchanges_of(config, result.transcript_ref)
               if e.role is AgentRole.PROMPT_MAKER]
    assert ["task number 1" in p for p in prompts] == [True, False, False]


# --- run_baseline ---

def test_zsl_baseline_run(tmp_path, sample_req, sample_doc) -> None:
    fixtures = write_fixtures(tmp_path / "fx", {"baseline-0": fenced("echo 'zsl';")})
    config = replay_config(tmp_path / "out", fixtures, method=Method.ZSL)
    result = run_baseline(sample_req, sample_doc, config)
    assert result.final_code.content == "echo 'zsl';"
    assert result.fenced and not result.truncated
    transcript = load_transcript(Path(config.output_dir) / f"{result.transcript_ref}.jsonl")
    assert [e.role for e in transcript.exchanges] == [AgentRole.BASELINE]


def test_osl_baseline_embeds_one_example(tmp_path, sample_req, sample_doc) -> None:
    example_path = tmp_path / "example.json"
    example_path.write_text(json.dumps({"input": "old()", "output": "new()"}), encoding="utf-8")
    fixtures = write_fixtures(tmp_path / "fx", {"baseline-0": fenced("echo 'osl';")})
    config = replay_config(tmp_path / "out", fixtures,
                           method=Method.OSL, example_path=example_path)
    result = run_baseline(sample_req, sample_doc, config)
    transcript = load_transcript(Path(config.output_dir) / f"{result.transcript_ref}.jsonl")
    prompt = transcript.exchanges[0].prompt
    assert prompt.count("Example input:") == 1
    assert "old()" in prompt and "new()" in prompt


def test_baseline_refuses_pipeline_method(tmp_path, sample_req, sample_doc) -> None:
    fixtures = write_fixtures(tmp_path / "fx", {"baseline-0": "x"})
    config = replay_config(tmp_path / "out", fixtures)  # method defaults to vapu
    with pytest.raises(ValueError):
        run_baseline(sample_req, sample_doc, config)


# --- transcript re-execution ---

def test_reexecute_reproduces_update(tmp_path, sample_req, sample_doc) -> None:
    fixtures = write_fixtures(tmp_path / "fx", multi_task_fixtures(
        tasks=2, verifier_responses=["REJECT:\n- nope", "ACCEPT", "ACCEPT"], finalizer_count=1))
    config = replay_config(tmp_path / "out", fixtures)
    result = run_update(sample_req, sample_doc, config)
    transcript = load_transcript(Path(config.output_dir) / f"{result.transcript_ref}.jsonl")
    recorded, replayed = reexecute_transcript(transcript, tmp_path / "scratch")
    assert recorded == replayed


def test_reexecute_reproduces_baseline(tmp_path, sample_req, sample_doc) -> None:
    fixtures = write_fixtures(tmp_path / "fx", {"baseline-0": fenced("echo 'b';")})
    config = replay_config(tmp_path / "out", fixtures, method=Method.ZSL)
    result = run_baseline(sample_req, sample_doc, config)
    transcript = load_transcript(Path(config.output_dir) / f"{result.transcript_ref}.jsonl")
    recorded, replayed = reexecute_transcript(transcript, tmp_path / "scratch")
    assert recorded == replayed
