"""The render-check-regenerate loop: budgets, feedback, folding, failure modes."""

from __future__ import annotations

import json

import pytest

from chartforge.builder import (
    BuilderDeps,
    CandidateWorkspace,
    MemoryLog,
    fold_candidate,
    generate_plot_code,
    next_step,
    refine_until_valid,
    run_candidate,
)
from chartforge.config import PipelineConfig
from chartforge.errors import ContractViolation
from chartforge.model import CandidateState, PlotCode, RenderStatus
from chartforge.sandbox import ScriptedSandbox
from chartforge.util import canonical_json
from conftest import ENDPOINT, details_dict, scripted_gateway

CODE_REPLY = (
    "```python\nimport chart_details\nchart_details.record(variables=['age','chol'],"
    " encodings={'x':'age','y':'chol'}, row_count_used=300)\n```"
)
PASS_VERDICT = json.dumps({"needs_correction": False, "problems": []})
FAIL_VERDICT = json.dumps(
    {
        "needs_correction": True,
        "problems": [{"category": "overplotting", "note": "points overlap heavily"}],
    }
)


def build_deps(tmp_path, gateway, sandbox, config=None):
    csv = tmp_path / "data.csv"
    if not csv.exists():
        csv.write_text("age,chol\n1,2\n")
    return BuilderDeps(
        gateway=gateway,
        generator=ENDPOINT,
        checker=ENDPOINT,
        sandbox=sandbox,
        config=config or PipelineConfig(),
        dataset_csv=csv,
    )


def make_workspace(tmp_path) -> CandidateWorkspace:
    return CandidateWorkspace(root=tmp_path / "cand" / "c1", rel_root=tmp_path)


def run_with(tmp_path, proposal, context, llm_rules, sandbox_outcomes, config=None):
    gateway, backend = scripted_gateway(llm_rules)
    sandbox = ScriptedSandbox(sandbox_outcomes)
    deps = build_deps(tmp_path, gateway, sandbox, config)
    log = MemoryLog()
    candidate = refine_until_valid(
        "c1", proposal, context, deps, make_workspace(tmp_path), log
    )
    return candidate, log, backend


def ok_outcome():
    return ("ok", details_dict())


class TestRetryBudget:
    @pytest.mark.parametrize(
        "verdicts,state,renders,retries",
        [
            (["pass"], CandidateState.RETAINED, 1, 0),
            (["fail", "pass"], CandidateState.RETAINED, 2, 1),
            (["fail", "fail", "fail", "pass"], CandidateState.RETAINED, 4, 3),
            (["fail", "fail", "fail", "fail"], CandidateState.DISCARDED, 4, 3),
        ],
    )
    def test_verdict_sequences(self, tmp_path, proposal, context, verdicts, state, renders, retries):
        rules = [("## TASK: plot code", CODE_REPLY, None)]
        rules += [
            ("## TASK: rendered chart check", PASS_VERDICT if v == "pass" else FAIL_VERDICT)
            for v in verdicts
        ]
        candidate, _, _ = run_with(
            tmp_path, proposal, context, rules, [ok_outcome() for _ in verdicts]
        )
        assert candidate.state is state
        assert len(candidate.renders) == renders
        assert candidate.retries_used == retries
        assert len(candidate.code_versions) == len(candidate.renders)
        assert len(candidate.renders) <= PipelineConfig().retry_budget + 1

    def test_feedback_log_holds_only_correction_verdicts(self, tmp_path, proposal, context):
        rules = [
            ("## TASK: plot code", CODE_REPLY, None),
            ("## TASK: rendered chart check", FAIL_VERDICT),
            ("## TASK: rendered chart check", PASS_VERDICT),
        ]
        candidate, _, _ = run_with(
            tmp_path, proposal, context, rules, [ok_outcome(), ok_outcome()]
        )
        assert len(candidate.feedback_log) == 1
        assert candidate.feedback_log[0].needs_correction
        assert len(candidate.verdicts) == 2
        assert not candidate.verdicts[-1].needs_correction

    def test_regeneration_prompt_carries_feedback_and_family(self, tmp_path, proposal, context):
        rules = [
            ("## TASK: plot code generation", CODE_REPLY),
            ("## TASK: plot code regeneration", CODE_REPLY),
            ("## TASK: rendered chart check", FAIL_VERDICT),
            ("## TASK: rendered chart check", PASS_VERDICT),
        ]
        candidate, _, backend = run_with(
            tmp_path, proposal, context, rules, [ok_outcome(), ok_outcome()]
        )
        assert candidate.state is CandidateState.RETAINED
        regen_prompt = next(
            c for c in backend.calls if "plot code regeneration" in c
        )
        assert "overplotting" in regen_prompt
        assert proposal.chart_family in regen_prompt
        assert candidate.code_versions[1].generated_from_feedback is not None


class TestExecErrors:
    def test_exec_error_consumes_retry_with_stderr_feedback(self, tmp_path, proposal, context):
        rules = [
            ("## TASK: plot code", CODE_REPLY, None),
            ("## TASK: rendered chart check", PASS_VERDICT),
        ]
        outcomes = [("exec_error", "Traceback: KeyError 'chol'"), ok_outcome()]
        candidate, _, backend = run_with(tmp_path, proposal, context, rules, outcomes)
        assert candidate.state is CandidateState.RETAINED
        assert candidate.retries_used == 1
        assert candidate.renders[0].status is RenderStatus.EXEC_ERROR
        regen_prompt = next(c for c in backend.calls if "regeneration" in c)
        assert "KeyError" in regen_prompt

    def test_exec_errors_exhaust_budget_to_failed(self, tmp_path, proposal, context):
        rules = [("## TASK: plot code", CODE_REPLY, None)]
        outcomes = [("exec_error", f"boom {i}") for i in range(4)]
        candidate, _, _ = run_with(tmp_path, proposal, context, rules, outcomes)
        assert candidate.state is CandidateState.FAILED
        assert len(candidate.renders) == 4
        assert candidate.retries_used == 3
        assert "still failing" in candidate.failure_reason

    def test_timeout_consumes_retry(self, tmp_path, proposal, context):
        rules = [
            ("## TASK: plot code", CODE_REPLY, None),
            ("## TASK: rendered chart check", PASS_VERDICT),
        ]
        outcomes = [("timeout",), ok_outcome()]
        candidate, _, _ = run_with(tmp_path, proposal, context, rules, outcomes)
        assert candidate.state is CandidateState.RETAINED
        assert candidate.renders[0].status is RenderStatus.TIMEOUT
        assert candidate.retries_used == 1

    def test_invalid_details_demoted_to_missing_output(self, tmp_path, proposal, context):
        rules = [
            ("## TASK: plot code", CODE_REPLY, None),
            ("## TASK: rendered chart check", PASS_VERDICT),
        ]
        outcomes = [
            ("ok", details_dict(variables=("age", "mystery_column"))),
            ok_outcome(),
        ]
        candidate, _, _ = run_with(tmp_path, proposal, context, rules, outcomes)
        assert candidate.renders[0].status is RenderStatus.MISSING_OUTPUT
        assert "mystery_column" in candidate.renders[0].stderr_excerpt
        assert candidate.state is CandidateState.RETAINED


class TestCheckerContract:
    def test_contradictory_verdict_fails_candidate(self, tmp_path, proposal, context):
        contradiction = json.dumps({"needs_correction": True, "problems": []})
        rules = [
            ("## TASK: plot code", CODE_REPLY, None),
            ("## TASK: rendered chart check", contradiction),
        ]
        gateway, _ = scripted_gateway(rules)
        sandbox = ScriptedSandbox([ok_outcome()])
        deps = build_deps(tmp_path, gateway, sandbox)
        candidate = run_candidate(
            "c1", proposal, context, deps, make_workspace(tmp_path), MemoryLog()
        )
        assert candidate.state is CandidateState.FAILED
        assert "checker" in candidate.failure_reason

    def test_unknown_problem_category_maps_to_other(self, tmp_path, proposal, context):
        odd = json.dumps(
            {
                "needs_correction": True,
                "problems": [{"category": "too_much_neon", "note": "wild palette"}],
            }
        )
        rules = [
            ("## TASK: plot code", CODE_REPLY, None),
            ("## TASK: rendered chart check", odd),
            ("## TASK: rendered chart check", PASS_VERDICT),
        ]
        candidate, _, _ = run_with(
            tmp_path, proposal, context, rules, [ok_outcome(), ok_outcome()]
        )
        from chartforge.model import ProblemCategory

        assert candidate.feedback_log[0].problems[0][0] is ProblemCategory.OTHER


class TestInfrastructure:
    def test_sandbox_unreachable_fails_candidate_not_discards(self, tmp_path, proposal, context):
        rules = [("## TASK: plot code", CODE_REPLY, None)]
        gateway, _ = scripted_gateway(rules)
        sandbox = ScriptedSandbox([("infra", "sandbox daemon gone")])
        deps = build_deps(tmp_path, gateway, sandbox)
        candidate = run_candidate(
            "c1", proposal, context, deps, make_workspace(tmp_path), MemoryLog()
        )
        assert candidate.state is CandidateState.FAILED
        assert "infrastructure" in candidate.failure_reason

    def test_codegen_gateway_death_propagates_from_proposed(self, tmp_path, proposal, context):
        gateway, _ = scripted_gateway([])  # exhausted fixture
        sandbox = ScriptedSandbox([])
        deps = build_deps(tmp_path, gateway, sandbox)
        from chartforge.errors import FixtureExhaustedError

        with pytest.raises(FixtureExhaustedError):
            run_candidate(
                "c1", proposal, context, deps, make_workspace(tmp_path), MemoryLog()
            )


class TestGeneratePlotCode:
    def test_prose_without_code_repairs_then_fails(self, context, proposal):
        gateway, backend = scripted_gateway(
            [
                ("## TASK: plot code generation", "I would plot age against chol."),
                ("contained no code", "Still just prose, sorry."),
            ]
        )
        with pytest.raises(ContractViolation):
            generate_plot_code(
                proposal, context, None, gateway, ENDPOINT, PipelineConfig(), 1
            )
        assert backend.call_count == 2

    def test_bare_code_without_fence_accepted(self, context, proposal):
        gateway, _ = scripted_gateway(
            [("## TASK: plot code generation", "import matplotlib\nprint('hi')\n")]
        )
        code = generate_plot_code(
            proposal, context, None, gateway, ENDPOINT, PipelineConfig(), 1
        )
        assert code.version == 1
        assert "import matplotlib" in code.source_text


class TestFoldReplay:
    def test_replay_reconstructs_byte_identical_state(self, tmp_path, proposal, context):
        rules = [
            ("## TASK: plot code", CODE_REPLY, None),
            ("## TASK: rendered chart check", FAIL_VERDICT),
            ("## TASK: rendered chart check", PASS_VERDICT),
        ]
        candidate, log, _ = run_with(
            tmp_path, proposal, context, rules, [ok_outcome(), ok_outcome()]
        )
        replayed = fold_candidate(log.events())
        assert canonical_json(replayed.to_dict()) == canonical_json(candidate.to_dict())

    def test_fold_from_any_prefix_resumes_to_same_terminal(self, tmp_path, proposal, context):
        # Stop the loop after each prefix of the event log and confirm the
        # remaining steps derived by next_step converge to the same terminal.
        rules = [
            ("## TASK: plot code", CODE_REPLY, None),
            ("## TASK: rendered chart check", FAIL_VERDICT, None),
        ]
        candidate, log, _ = run_with(
            tmp_path,
            proposal,
            context,
            rules,
            [ok_outcome() for _ in range(4)],
        )
        assert candidate.state is CandidateState.DISCARDED
        events = log.events()
        for cut in range(1, len(events)):
            partial = fold_candidate(events[:cut])
            assert next_step(partial) != "done"
        assert next_step(fold_candidate(events)) == "done"
