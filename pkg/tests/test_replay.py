import numpy as np
import pytest
from tests.util import ScriptedStacker
from relstack._env import BlockWorld, compute_reward
from relstack._evaluate import rollout
from relstack._goals import GoalSet, sample_single_tower
from relstack._replay import EpisodeRecorder, ReplayBuffer, StoredEpisode
from relstack.error import CheckpointFormatError, InconsistentEpisodeError, InsufficientReplayError


def random_episode(rng: np.random.Generator, n_blocks: int = 2, length: int = 10) -> StoredEpisode:
    """Random-walk episode whose stored rewards match its goals"""
    blocks = rng.normal(scale=0.1, size=(length + 1, n_blocks, 15))
    ee = rng.normal(scale=0.1, size=(length + 1, 8))
    goals = rng.normal(scale=0.1, size=(n_blocks, 3))
    achieved = blocks[..., :3].copy()
    rewards = np.array([compute_reward(achieved[t + 1], goals, ee[t + 1, :3]) for t in range(length)])
    return StoredEpisode(
        ee=ee,
        blocks=blocks,
        achieved=achieved,
        goals=goals,
        actions=rng.uniform(-1, 1, size=(length, 4)),
        rewards=rewards,
        versions=np.arange(length, dtype=np.int64),
    )


def test_store_and_len():
    rng = np.random.default_rng(0)
    replay = ReplayBuffer(capacity=100)
    ids = [replay.store_episode(random_episode(rng, length=10)) for _ in range(3)]
    assert ids == [0, 1, 2]
    assert len(replay) == 30
    assert replay.n_episodes == 3


def test_eviction_whole_episodes_oldest_first():
    rng = np.random.default_rng(0)
    replay = ReplayBuffer(capacity=25)
    for _ in range(4):
        replay.store_episode(random_episode(rng, length=10))
    assert replay.episode_ids() == [2, 3]
    assert len(replay) == 20


def test_episode_longer_than_capacity():
    replay = ReplayBuffer(capacity=5)
    with pytest.raises(InconsistentEpisodeError):
        replay.store_episode(random_episode(np.random.default_rng(0), length=10))


def test_inconsistent_achieved_chain():
    episode = random_episode(np.random.default_rng(0))
    episode.achieved[4, 1, 0] += 0.5
    with pytest.raises(InconsistentEpisodeError, match="observation 4"):
        ReplayBuffer().store_episode(episode)


def test_inconsistent_reward():
    episode = random_episode(np.random.default_rng(0))
    episode.validate()
    episode.rewards[3] += 1.0
    with pytest.raises(InconsistentEpisodeError, match="step 3"):
        ReplayBuffer().store_episode(episode)


def test_reward_check_follows_penalty_direction():
    episode = random_episode(np.random.default_rng(0))
    episode.goals = episode.achieved[-1].copy()
    episode.ee[-1, :3] = episode.goals.mean(axis=0) + 1.0
    episode.rewards = compute_reward(
        episode.achieved[1:], episode.goals, episode.ee[1:, :3], penalty_when_far=True
    )
    assert episode.rewards[-1] == episode.n_blocks - 1
    episode.validate(penalty_when_far=True)
    with pytest.raises(InconsistentEpisodeError, match=f"step {episode.length - 1}"):
        episode.validate()


def test_episode_shape_check():
    episode = random_episode(np.random.default_rng(0))
    episode.rewards = episode.rewards[:-1]
    with pytest.raises(InconsistentEpisodeError, match="rewards"):
        episode.validate()


def test_sample_insufficient():
    replay = ReplayBuffer()
    replay.store_episode(random_episode(np.random.default_rng(0), length=10))
    with pytest.raises(InsufficientReplayError):
        replay.sample_batch(11, np.random.default_rng(0))


def test_sample_groups_by_block_count():
    rng = np.random.default_rng(0)
    replay = ReplayBuffer()
    replay.store_episode(random_episode(rng, n_blocks=1, length=20))
    replay.store_episode(random_episode(rng, n_blocks=3, length=20))
    batch = replay.sample_batch(64, rng)
    assert batch.size == 64
    assert set(batch.groups) <= {1, 3}
    for n, group in batch.groups.items():
        group.validate()
        assert group.obs.blocks.shape[1:] == (n, 15)
        assert group.obs.goals.shape[1:] == (n, 3)


def test_relabeled_rewards_consistent():
    """Every sampled reward equals the reward function at the sampled goal"""
    rng = np.random.default_rng(1)
    replay = ReplayBuffer()
    for _ in range(5):
        replay.store_episode(random_episode(rng, n_blocks=2, length=15))
    batch = replay.sample_batch(200, rng, relabel_fraction=0.8)
    group = batch.groups[2]
    next_achieved = group.next_obs.blocks[..., :3]
    expected = compute_reward(next_achieved, group.obs.goals, group.next_obs.ee[:, :3])
    assert np.allclose(group.rewards, expected)
    assert 0.6 < group.relabeled.mean() < 0.95


def test_relabeled_goal_from_future():
    rng = np.random.default_rng(2)
    replay = ReplayBuffer()
    episode = random_episode(rng, n_blocks=2, length=12)
    replay.store_episode(episode)
    group = replay.sample_batch(100, rng, relabel_fraction=1.0).groups[2]
    assert group.relabeled.all()
    assert np.all(group.goal_steps >= group.steps)
    for goal, f in zip(group.obs.goals, group.goal_steps):
        assert np.array_equal(goal, episode.achieved[f + 1])


def test_no_relabel_keeps_original():
    rng = np.random.default_rng(3)
    replay = ReplayBuffer()
    episode = random_episode(rng, length=8)
    replay.store_episode(episode)
    group = replay.sample_batch(30, rng, relabel_fraction=0.0).groups[2]
    assert not group.relabeled.any()
    assert np.all(group.goal_steps == -1)
    assert np.allclose(group.rewards, episode.rewards[group.steps])
    assert np.all(group.dones == (group.steps == 7))


def test_sampling_is_seeded():
    rng = np.random.default_rng(4)
    replay = ReplayBuffer()
    for _ in range(3):
        replay.store_episode(random_episode(rng, length=10))
    a = replay.sample_batch(16, np.random.default_rng(9)).groups[2]
    b = replay.sample_batch(16, np.random.default_rng(9)).groups[2]
    assert np.array_equal(a.steps, b.steps)
    assert np.array_equal(a.rewards, b.rewards)


def test_relabeled_success_with_scripted_episode():
    """A successful stacking episode relabeled with its own final state scores every block"""
    policy = ScriptedStacker()
    rng = np.random.default_rng(0)
    goals = GoalSet(np.array([[0.0, 0.0, 0.025]]), "single-tower-1")
    result = rollout(policy, goals, rng, "deterministic", BlockWorld())
    replay = ReplayBuffer()
    replay.store_episode(result.episode)
    group = replay.sample_batch(50, rng, relabel_fraction=1.0).groups[1]
    last = group.goal_steps == result.episode.length - 1
    assert np.all(group.rewards[last & (group.steps == group.goal_steps)] >= 0)
    assert np.all(group.rewards >= -1) and np.all(group.rewards <= 1)


def test_recorder_builds_valid_episode():
    env = BlockWorld()
    goals = sample_single_tower(2, np.random.default_rng(0))
    obs = env.reset(2, goals, seed=0)
    recorder = EpisodeRecorder(obs, goals.positions, env.penalty, goals.label)
    for _ in range(5):
        action = np.array([0.0, 0.0, -1.0, 1.0])
        obs, reward, _, _ = env.step(action)
        recorder.add(action, reward, obs, version=3)
    episode = recorder.build()
    episode.validate()
    assert episode.length == 5
    assert episode.task == "single-tower-2"
    assert np.all(episode.versions == 3)


def test_recent_versions():
    rng = np.random.default_rng(0)
    replay = ReplayBuffer()
    assert replay.recent_versions().size == 0
    replay.store_episode(random_episode(rng, length=4))
    assert replay.recent_versions().tolist() == [0, 1, 2, 3]


def test_save_load(tmp_path):
    rng = np.random.default_rng(5)
    replay = ReplayBuffer(capacity=40)
    for _ in range(5):
        replay.store_episode(random_episode(rng, length=10))
    replay.save(tmp_path)

    restored = ReplayBuffer(capacity=40)
    restored.load(tmp_path)
    assert restored.episode_ids() == replay.episode_ids()
    assert len(restored) == len(replay)
    assert restored.store_episode(random_episode(rng, length=10)) == 5
    a = replay.sample_batch(20, np.random.default_rng(0)).groups[2]
    b = ReplayBuffer(capacity=40)
    b.load(tmp_path)
    b_group = b.sample_batch(20, np.random.default_rng(0)).groups[2]
    assert np.array_equal(a.rewards, b_group.rewards)
    assert np.array_equal(a.obs.goals, b_group.obs.goals)
    assert b_group.versions.dtype == np.int64


def test_save_is_byte_stable(tmp_path):
    rng = np.random.default_rng(6)
    replay = ReplayBuffer()
    replay.store_episode(random_episode(rng))
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    replay.save(tmp_path / "a")
    replay.save(tmp_path / "b")
    for name in ("replay.params", "replay.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_load_missing_index(tmp_path):
    with pytest.raises(CheckpointFormatError):
        ReplayBuffer().load(tmp_path)
