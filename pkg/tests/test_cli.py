"""CLI entry points: dry-run generate, annotate, evaluate, report, stats,
inspect, and config errors."""

from __future__ import annotations

import json
import pytest
import yaml

from chartforge.cli import main
from conftest import write_dataset_dir, write_dry_run_fixture


@pytest.fixture
def project(tmp_path):
    """Config file + fixture + ingest directory for a complete dry run."""
    ingest = tmp_path / "ingest"
    write_dataset_dir(ingest, "set_0", n_rows=250, n_cols=3)
    fixture = write_dry_run_fixture(tmp_path / "fixture.json", n_renders=10)
    config = {
        "endpoints": {
            "model_a": {"model_id": "model-a"},
            "model_b": {"model_id": "model-b"},
        },
        "pipeline": {
            "proposal_count": 2,
            "diversity_floor": 2,
            "seed": 11,
            "min_instances": 100,
        },
        "eval": {
            "candidate_models": ["model_a", "model_b"],
            "bootstrap_resamples": 200,
            "bootstrap_seed": 11,
        },
        "fixture_path": str(fixture),
    }
    config_path = tmp_path / "config.yaml"
    config_path.write_text(yaml.safe_dump(config))
    return tmp_path, config_path, ingest


def run_cli(*argv) -> int:
    return main([str(a) for a in argv])


class TestCommands:
    def test_ingest_validates(self, project, capsys):
        tmp_path, config, ingest = project
        assert run_cli("--config", config, "ingest", "--source", ingest) == 0
        out = capsys.readouterr().out
        assert "set_0: 250 rows x 3 features" in out

    def test_generate_annotate_stats_inspect_report(self, project, capsys):
        tmp_path, config, ingest = project
        ws = tmp_path / "ws"
        assert (
            run_cli(
                "--config", config, "generate", "--workspace", ws, "--ingest", ingest,
                "--run-id", "r1", "--dry-run",
            )
            == 0
        )
        summary = json.loads(capsys.readouterr().out)
        assert summary["candidates_retained"] == 2

        assert (
            run_cli(
                "--config", config, "annotate", "--workspace", ws, "--run-id", "r1",
                "--dry-run",
            )
            == 0
        )
        assert json.loads(capsys.readouterr().out)["charts_annotated"] == 2

        assert (
            run_cli("--config", config, "stats", "--workspace", ws, "--run-id", "r1", "--json")
            == 0
        )
        stats = json.loads(capsys.readouterr().out)
        assert stats["n_charts"] == 2
        assert stats["n_qa"] == 40
        assert stats["n_orphans"] == 0

        charts = sorted(
            p.name for p in (ws / "runs" / "r1" / "charts").iterdir() if p.is_dir()
        )
        assert (
            run_cli(
                "--config", config, "inspect", charts[0], "--workspace", ws, "--run-id", "r1"
            )
            == 0
        )
        lineage = capsys.readouterr().out
        assert "code versions: 1, renders: 1" in lineage
        assert "qa items: 20" in lineage
        assert "check 1: pass" in lineage

        assert (
            run_cli(
                "--config", config, "evaluate", "--workspace", ws, "--run-id", "r1",
                "--eval-id", "e1", "--dry-run",
            )
            == 0
        )
        assert (ws / "evals" / "e1" / "verdicts.jsonl").is_file()

        assert (
            run_cli(
                "--config", config, "report", "--workspace", ws, "--run-id", "r1",
                "--eval-id", "e1",
            )
            == 0
        )
        accuracy = (ws / "evals" / "e1" / "accuracy.csv").read_text()
        assert accuracy.splitlines()[0].startswith("model,qtype,chart_family")
        assert "model-a,," in accuracy  # overall row per model

    def test_generate_dry_run_without_fixture_errors(self, project, capsys):
        tmp_path, config, ingest = project
        bare_config = tmp_path / "bare.yaml"
        bare_config.write_text(yaml.safe_dump({"pipeline": {"seed": 1}}))
        code = run_cli(
            "--config", bare_config, "generate", "--workspace", tmp_path / "w",
            "--ingest", ingest, "--run-id", "r1", "--dry-run",
        )
        assert code == 1
        assert "fixture" in capsys.readouterr().err

    def test_invalid_config_reports_field(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text(yaml.safe_dump({"pipeline": {"retry_budgt": 3}}))
        code = run_cli("--config", bad, "stats", "--workspace", tmp_path, "--run-id", "x")
        assert code == 2
        assert "pipeline.retry_budgt" in capsys.readouterr().err

    def test_unknown_chart_id(self, project, capsys):
        tmp_path, config, ingest = project
        ws = tmp_path / "ws2"
        run_cli(
            "--config", config, "generate", "--workspace", ws, "--ingest", ingest,
            "--run-id", "r1", "--dry-run",
        )
        capsys.readouterr()
        code = run_cli(
            "--config", config, "inspect", "nonexistent", "--workspace", ws, "--run-id", "r1"
        )
        assert code == 1
        assert "unknown chart id" in capsys.readouterr().err
