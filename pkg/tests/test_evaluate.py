import json
import numpy as np
import pandas as pd
import pytest
from tests.util import OUTPUTS_DIR, IdlePolicy, ScriptedStacker, make_trace
from relstack._evaluate import (
    FAILURE_TAGS,
    EvalReport,
    EvaluationCallback,
    Policy,
    classify_failure,
    episode_seeds,
    evaluate,
    rollout,
    sweep,
)
from relstack._goals import GoalSet, TaskSpec
from relstack._trace import EpisodeTrace
from relstack.error import SuccessfulEpisodeError, UnknownTaskError


def flags(pattern: str, n: int = 2):
    """'.' no block at goal, '+' some, '#' all"""
    rows = {".": [False] * n, "+": [True] + [False] * (n - 1), "#": [True] * n}
    return [rows[c] for c in pattern]


def test_classify_success_raises():
    with pytest.raises(SuccessfulEpisodeError):
        classify_failure(make_trace(flags("..+#")))


def test_classify_fall_off_after():
    off = [[False, False]] * 5 + [[True, False]] * 3
    assert classify_failure(make_trace(flags("..##+...."[:8]), off_table=off)) == "fall-off-after"


def test_classify_fall_off_during():
    off = [[False, False]] * 3 + [[False, True]] * 5
    assert classify_failure(make_trace(flags("..++++++"), off_table=off)) == "fall-off-during"


def test_classify_insufficient_recovery():
    assert classify_failure(make_trace(flags("..+##+++"))) == "insufficient-recovery"


def test_classify_oscillation():
    trace = make_trace(flags("+" * 60), gripper=np.zeros((60, 3)))
    assert classify_failure(trace) == "oscillation"


def test_classify_oscillation_small_jitter():
    gripper = np.zeros((60, 3))
    gripper[::2, 0] = 0.02
    assert classify_failure(make_trace(flags("." * 60), gripper=gripper)) == "oscillation"


def test_classify_other_when_moving():
    assert classify_failure(make_trace(flags("+" * 60))) == "other"


def test_classify_other_when_count_changes():
    trace = make_trace(flags("." * 30 + "+" * 30), gripper=np.zeros((60, 3)))
    assert classify_failure(trace) == "other"


def test_classify_other_short_episode():
    assert classify_failure(make_trace(flags("+" * 10), gripper=np.zeros((10, 3)))) == "other"


def test_rollout_with_scripted_policy():
    goals = GoalSet(np.array([[0.1, 0.1, 0.025]]), "single-tower-1")
    result = rollout(ScriptedStacker(), goals, np.random.default_rng(0), "deterministic", record_trace=True)
    assert result.success
    assert result.blocks_at_goal == 1
    assert result.env_steps == 50
    assert result.trace.length == 50
    assert len(result.records) == 50
    result.episode.validate()


def test_rollout_on_step_callback():
    steps = []
    goals = GoalSet(np.array([[0.1, 0.1, 0.025]]), "single-tower-1")
    rollout(IdlePolicy(), goals, np.random.default_rng(0), on_step=lambda t, obs: steps.append(t))
    assert steps == list(range(50))


def test_policies_satisfy_protocol():
    assert isinstance(ScriptedStacker(), Policy)
    assert isinstance(IdlePolicy(), Policy)
    assert isinstance(lambda done, total, success: None, EvaluationCallback)


def test_evaluate_scripted_policy():
    calls = []
    report = evaluate(
        ScriptedStacker(),
        "single-tower-1",
        episodes=5,
        mode="deterministic",
        callback=lambda done, total, success: calls.append((done, total, success)),
    )
    assert report.success_rate == 1.0
    assert report.mean_blocks_at_goal == 1.0
    assert report.failure_counts() == {tag: 0 for tag in FAILURE_TAGS}
    assert calls[-1] == (5, 5, True)


def test_evaluate_idle_policy_oscillates():
    report = evaluate(IdlePolicy(), "single-tower-2", episodes=4, mode="deterministic", seed=3)
    assert report.success_rate == 0.0
    assert report.failure_counts()["oscillation"] == 4
    assert report.summary()["seeds"] == episode_seeds(3, 4)


def test_evaluate_is_seeded():
    a = evaluate(IdlePolicy(), TaskSpec("pick-and-place", 1), episodes=3, seed=7)
    b = evaluate(IdlePolicy(), TaskSpec("pick-and-place", 1), episodes=3, seed=7)
    assert a.episodes.equals(b.episodes)


def test_evaluate_unknown_task():
    with pytest.raises(UnknownTaskError):
        evaluate(IdlePolicy(), "tower-12", episodes=1)


def test_evaluate_writes_traces(tmp_path):
    evaluate(ScriptedStacker(), "single-tower-1", episodes=2, mode="deterministic", trace_dir=tmp_path / "traces")
    files = sorted(p.name for p in (tmp_path / "traces").iterdir())
    assert files == ["single-tower-1_0000.jsonl", "single-tower-1_0001.jsonl"]
    trace = EpisodeTrace.load(tmp_path / "traces" / files[0])
    assert trace.success
    assert trace.length == 50


def test_report_save():
    report = evaluate(IdlePolicy(), "single-tower-2", episodes=2, mode="deterministic")
    table = report.save(f"{OUTPUTS_DIR}/report.json")
    assert table.name == "report.csv"
    with open(f"{OUTPUTS_DIR}/report.json", "r", encoding="utf-8") as fp:
        summary = json.load(fp)
    assert summary["task"] == "single-tower-2"
    assert summary["episodes"] == 2
    assert summary["failures"]["oscillation"] == 2


def test_empty_report():
    report = EvalReport("tower-2", "stochastic", pd.DataFrame(columns=["seed", "success", "blocks_at_goal", "failure"]))
    assert report.success_rate == 0.0
    assert report.mean_blocks_at_goal == 0.0


def test_sweep_rows():
    seen = []
    table = sweep(
        IdlePolicy(),
        [TaskSpec("single-tower", 2), TaskSpec("single-tower", 3)],
        episodes=2,
        mode="deterministic",
        callback=lambda label, report: seen.append(label),
    )
    assert list(table["task"]) == ["single-tower-2", "single-tower-3"]
    assert seen == ["single-tower-2", "single-tower-3"]
    assert set(FAILURE_TAGS) <= set(table.columns)
    assert (table["success_rate"] == 0.0).all()
