import json
import logging
import pytest
from tests.util import INPUTS_DIR
from relstack._logger import RelstackLogger
from relstack._parameters import RunConfig
from relstack.cli import main

TINY = f"{INPUTS_DIR}/tiny_config.txt"


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    assert main(["train", "-c", TINY, "-o", str(out), "--total-steps", "100", "-P"]) == 0
    return out


def test_print_config(capsys):
    assert main(["train", "-c", TINY, "--set", "seed=3", "rounds=2", "--print-config", "-P"]) == 0
    config = RunConfig.from_text(capsys.readouterr().out)
    assert config.seed == 3
    assert config.rounds == 2
    assert config.embed_dim == 8


def test_paper_preset(capsys):
    assert main(["train", "--preset", "paper", "--print-config", "-P"]) == 0
    config = RunConfig.from_text(capsys.readouterr().out)
    assert config.workers == 35
    assert config.replay_capacity == 100_000


def test_flags_override_config_file(capsys):
    assert main(["train", "-c", TINY, "--rounds", "4", "--curriculum", "uniform", "--print-config", "-P"]) == 0
    config = RunConfig.from_text(capsys.readouterr().out)
    assert config.rounds == 4
    assert config.curriculum == "uniform"


def test_bad_override_is_reported(capsys):
    assert main(["train", "-c", TINY, "--set", "colour=red", "--print-config", "-P"]) == 1
    assert "KeyError" in capsys.readouterr().err


def test_train_writes_checkpoint(run_dir, capsys):
    assert (run_dir / "checkpoints" / "latest").exists()
    assert (run_dir / "metrics.csv").exists()


def test_evaluate(run_dir, tmp_path, capsys):
    report = tmp_path / "eval.json"
    code = main(
        ["evaluate", str(run_dir), "-t", "pick-and-place-1", "--episodes", "2", "--output", str(report), "-P"]
    )
    assert code == 0
    with open(report, "r", encoding="utf-8") as fp:
        summary = json.load(fp)
    assert summary["task"] == "pick-and-place-1"
    assert summary["episodes"] == 2
    assert (tmp_path / "eval.csv").exists()
    assert "pick-and-place-1 (stochastic)" in capsys.readouterr().out


def test_evaluate_unknown_task(run_dir, capsys):
    assert main(["evaluate", str(run_dir), "-t", "stack-3", "--episodes", "1", "-P"]) == 1
    assert "UnknownTaskError" in capsys.readouterr().err


def test_evaluate_wrong_architecture(run_dir, capsys):
    assert main(["evaluate", str(run_dir), "--architecture", "mlp", "--episodes", "1", "-P"]) == 1
    assert "ArchitectureMismatchError" in capsys.readouterr().err


def test_evaluate_missing_checkpoint(tmp_path, capsys):
    assert main(["evaluate", str(tmp_path / "nothing"), "-P"]) == 1
    assert "CheckpointFormatError" in capsys.readouterr().err


def test_export_attention_and_replay_trace(run_dir, tmp_path, capsys):
    attention = tmp_path / "attention.jsonl"
    trace = tmp_path / "trace.jsonl"
    code = main(
        [
            "export-attention",
            str(run_dir),
            "-t",
            "pick-and-place-2",
            "--output",
            str(attention),
            "--trace",
            str(trace),
            "-P",
        ]
    )
    assert code == 0
    assert "100 steps of 2x2 attention" in capsys.readouterr().out
    with open(attention, "r", encoding="utf-8") as fp:
        first = json.loads(fp.readline())
    assert first["n"] == 2
    assert len(first["rounds"]) == 1

    table = tmp_path / "steps.csv"
    assert main(["replay-trace", str(trace), "--output", str(table), "--max-rows", "5", "-P"]) == 0
    out = capsys.readouterr().out
    assert "success" in out or "failure" in out
    assert table.exists()


def test_replay_trace_empty_file(tmp_path, capsys):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("", encoding="utf-8")
    assert main(["replay-trace", str(empty), "-P"]) == 1


def test_gradcheck_primitives_only(tmp_path, capsys):
    report = tmp_path / "gradcheck.csv"
    assert main(["gradcheck", "--primitives-only", "--output", str(report), "-P"]) == 0
    out = capsys.readouterr().out
    assert "ok" in out
    assert "FAIL" not in out
    assert report.exists()


def test_console_handler_is_replaced(capsys):
    log = RelstackLogger()
    first = log.log_to_console()
    second = log.log_to_console(logging.INFO, to_stdout=True)
    try:
        assert first not in log.handlers
        assert second in log.handlers
        log.info("Test: hello")
        assert "[INFO] Test: hello" in capsys.readouterr().out
    finally:
        log.removeHandler(second)
        log.console = None
