import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st
from relstack._env import EnvParams
from relstack._goals import (
    TaskSpec,
    parse_task,
    pyramid_rows,
    sample_multiple_towers,
    sample_pick_and_place,
    sample_pyramid,
    sample_single_tower,
    zero_shot_tasks,
)
from relstack.error import GoalSamplingError, UnknownTaskError


def test_single_tower_column():
    goals = sample_single_tower(4, np.random.default_rng(0))
    assert goals.positions.shape == (4, 3)
    assert np.allclose(goals.positions[:, :2], goals.positions[0, :2])
    assert np.allclose(goals.positions[:, 2], [0.025, 0.075, 0.125, 0.175])
    assert goals.tower_heights() == [4]
    assert goals.grip_away_penalty


def test_single_tower_base_in_region():
    params = EnvParams()
    rng = np.random.default_rng(1)
    for _ in range(50):
        base = sample_single_tower(2, rng, params).positions[0]
        assert params.spawn_low[0] <= base[0] <= params.spawn_high[0]
        assert params.spawn_low[1] <= base[1] <= params.spawn_high[1]


def test_single_tower_too_tall():
    params = EnvParams(workspace_high=(0.25, 0.35, 0.2))
    with pytest.raises(GoalSamplingError):
        sample_single_tower(6, np.random.default_rng(0), params)


@pytest.mark.parametrize("n,k", [(4, 2), (5, 2), (6, 3), (9, 3)])
def test_multiple_towers(n, k):
    goals = sample_multiple_towers(n, k, np.random.default_rng(n * k))
    heights = goals.tower_heights()
    assert sum(heights) == n
    assert max(heights) - min(heights) <= 1
    bases = [goals.positions[goals.towers == t][:, :2].mean(axis=0) for t in range(k)]
    for i in range(k):
        for j in range(i + 1, k):
            assert np.linalg.norm(bases[i] - bases[j]) >= 0.15
    for t in range(k):
        levels = np.sort(goals.positions[goals.towers == t][:, 2])
        assert np.allclose(levels, 0.025 + 0.05 * np.arange(levels.size))


def test_multiple_towers_impossible_region():
    params = EnvParams(spawn_low=(-0.02, -0.02), spawn_high=(0.02, 0.02))
    with pytest.raises(GoalSamplingError):
        sample_multiple_towers(4, 2, np.random.default_rng(0), params)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 9), st.integers(0, 2**32 - 1))
def test_single_tower_geometry(n, seed):
    params = EnvParams()
    goals = sample_single_tower(n, np.random.default_rng(seed), params)
    pos = goals.positions
    assert np.allclose(pos[:, :2], pos[0, :2])
    assert np.allclose(np.diff(pos[:, 2]), 0.05)
    assert np.all(pos[0, :2] >= params.spawn_low) and np.all(pos[0, :2] <= params.spawn_high)


@settings(max_examples=50, deadline=None)
@given(st.integers(4, 9), st.sampled_from([2, 3]), st.integers(0, 2**32 - 1))
def test_multiple_towers_geometry(n, k, seed):
    goals = sample_multiple_towers(n, k, np.random.default_rng(seed))
    heights = goals.tower_heights()
    assert max(heights) - min(heights) <= 1
    assert sum(heights) == n
    bases = np.stack([goals.positions[goals.towers == t][:, :2].mean(axis=0) for t in range(k)])
    for i in range(k):
        for j in range(i + 1, k):
            assert np.linalg.norm(bases[i] - bases[j]) >= 0.15


@pytest.mark.parametrize(
    "n,rows",
    [(3, [2, 1]), (4, [3, 1]), (5, [3, 2]), (6, [3, 2, 1]), (7, [4, 3]), (9, [4, 3, 2])],
)
def test_pyramid_rows(n, rows):
    assert pyramid_rows(n) == rows


def test_pyramid_bridges_supporters():
    goals = sample_pyramid(6, np.random.default_rng(4))
    pos = goals.positions
    for upper in pos[pos[:, 2] > 0.03]:
        below = pos[np.isclose(pos[:, 2], upper[2] - 0.05)]
        offsets = np.abs(below[:, :2] - upper[:2]).max(axis=1)
        assert np.sum(np.isclose(offsets, 0.025)) == 2


def test_pick_and_place_two_blocks():
    rng = np.random.default_rng(2)
    for _ in range(20):
        goals = sample_pick_and_place(2, rng)
        assert goals.positions[0, 2] == pytest.approx(0.025)
        assert np.max(np.abs(goals.positions[0, :2] - goals.positions[1, :2])) >= 0.05
        assert 0.025 <= goals.positions[1, 2] <= 0.25
        assert not goals.grip_away_penalty


def test_pick_and_place_air_probability():
    rng = np.random.default_rng(5)
    air = [sample_pick_and_place(1, rng).positions[0, 2] > 0.03 for _ in range(400)]
    assert 0.4 < np.mean(air) < 0.6


@pytest.mark.parametrize(
    "label,spec",
    [
        ("single-tower-6", TaskSpec("single-tower", 6)),
        ("multi-towers-6-2", TaskSpec("multi-towers", 6, 2)),
        ("Multi-Tower-5-3", TaskSpec("multi-towers", 5, 3)),
        ("pyramid-3", TaskSpec("pyramid", 3)),
        ("pick-and-place-1", TaskSpec("pick-and-place", 1)),
        ("pp-2", TaskSpec("pick-and-place", 2)),
        ("tower-4", TaskSpec("tower", 4)),
    ],
)
def test_parse_task(label, spec):
    assert parse_task(label) == spec


@pytest.mark.parametrize("label", ["", "tower", "pyramid-2", "single-tower-10", "multi-towers-3-4", "pp-3", "stack-3"])
def test_parse_task_rejects(label):
    with pytest.raises(UnknownTaskError):
        parse_task(label)


def test_task_labels_round_trip():
    for spec in zero_shot_tasks():
        assert parse_task(spec.label) == spec


def test_zero_shot_grid():
    labels = [spec.label for spec in zero_shot_tasks()]
    assert "single-tower-9" in labels
    assert "multi-towers-9-3" in labels
    assert "pyramid-9" in labels
    assert len(labels) == len(set(labels))


def test_task_sample_uses_label():
    goals = TaskSpec("tower", 3).sample(np.random.default_rng(0))
    assert goals.label == "tower-3"
    assert goals.n_blocks == 3
