import numpy as np
from tests.util import OUTPUTS_DIR, ScriptedStacker
from relstack._env import BlockWorld
from relstack._evaluate import rollout
from relstack._goals import GoalSet
from relstack._trace import EpisodeTrace, trace_records, trace_save, trace_table


def scripted_rollout():
    goals = GoalSet(np.array([[0.1, 0.1, 0.025]]), "single-tower-1")
    result = rollout(ScriptedStacker(), goals, np.random.default_rng(1), "deterministic", BlockWorld(), record_trace=True)
    return result


def test_trace_save_and_load():
    result = scripted_rollout()
    trace_save(result.records, f"{OUTPUTS_DIR}/trace.jsonl")
    records = trace_records(f"{OUTPUTS_DIR}/trace.jsonl")
    assert len(records) == result.episode.length
    assert records[0]["step"] == 1
    loaded = EpisodeTrace.load(f"{OUTPUTS_DIR}/trace.jsonl")
    assert np.allclose(loaded.gripper, result.trace.gripper)
    assert np.array_equal(loaded.at_goal, result.trace.at_goal)
    assert loaded.success == result.success


def test_trace_table():
    result = scripted_rollout()
    table = trace_table(result.records)
    assert len(table) == result.episode.length
    assert list(table.columns) == [
        "step",
        "gripper_x",
        "gripper_y",
        "gripper_z",
        "gap",
        "held",
        "reward",
        "at_goal",
        "full_stack",
        "off_table",
    ]
    assert (table["held"] >= -1).all()
    assert (table["held"] >= 0).any()
    assert table["at_goal"].max() == 1
    assert (table["off_table"] == 0).all()


def test_episode_trace_success_flag():
    empty = EpisodeTrace(np.zeros((0, 3)), np.zeros((0, 1), dtype=bool), np.zeros(0, dtype=bool), np.zeros((0, 1), dtype=bool))
    assert empty.length == 0
    assert not empty.success
