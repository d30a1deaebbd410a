"""Defines episodic replay storage with hindsight goal relabeling."""

from __future__ import annotations
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Deque, Dict, List, Optional, Union
import threading
import numpy as np

# ----
from relstack._checkpoint import json_load, json_save, params_load, params_save
from relstack._env import compute_reward
from relstack._logger import RelstackLogger
from relstack._renn import ObsBatch
from relstack.consts import ACTION_DIM, BLOCK_FEATURE_DIM, DELTA, EE_DIM, GOAL_DIM
from relstack.error import (
    CheckpointFormatError,
    InconsistentEpisodeError,
    InsufficientReplayError,
    ShapeMismatchError,
)

EPISODE_ARRAYS = ("ee", "blocks", "achieved", "goals", "actions", "rewards", "versions")


@dataclass
class StoredEpisode:
    """One episode of T transitions over N blocks.

    ee: (T + 1, 8) and blocks: (T + 1, N, 15) hold every observation, so step t
    goes from index t to t + 1. achieved: (T + 1, N, 3) block positions.
    goals: (N, 3), actions: (T, 4), rewards: (T,), versions: (T,) snapshot
    version that chose each action.
    """

    ee: np.ndarray
    blocks: np.ndarray
    achieved: np.ndarray
    goals: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    versions: np.ndarray
    penalty: bool = True
    task: str = ""

    @property
    def length(self) -> int:
        return int(self.actions.shape[0])

    @property
    def n_blocks(self) -> int:
        return int(self.goals.shape[0])

    def validate(self, delta: float = DELTA, penalty_when_far: bool = False) -> None:
        """Checks shapes, the achieved-goal chain and the stored rewards against `compute_reward`

        Raises:
            InconsistentEpisodeError: with a diagnostic naming the offending step
        """
        t, n = self.length, self.n_blocks
        if t == 0:
            raise InconsistentEpisodeError("Episode is empty")
        expected = {
            "ee": (t + 1, EE_DIM),
            "blocks": (t + 1, n, BLOCK_FEATURE_DIM),
            "achieved": (t + 1, n, GOAL_DIM),
            "goals": (n, GOAL_DIM),
            "actions": (t, ACTION_DIM),
            "rewards": (t,),
            "versions": (t,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise InconsistentEpisodeError(
                    f"Episode field '{name}' has shape {getattr(self, name).shape}, expected {shape}"
                )
        mismatch = np.nonzero(np.any(self.achieved != self.blocks[..., :GOAL_DIM], axis=(1, 2)))[0]
        if mismatch.size:
            raise InconsistentEpisodeError(
                f"Achieved goals disagree with block positions at observation {int(mismatch[0])}"
            )
        after = self.achieved[1:]
        recomputed = compute_reward(
            after,
            np.broadcast_to(self.goals, after.shape),
            self.ee[1:, :GOAL_DIM],
            delta,
            self.penalty,
            penalty_when_far,
        )
        wrong = np.nonzero(~np.isclose(self.rewards, recomputed))[0]
        if wrong.size:
            step = int(wrong[0])
            raise InconsistentEpisodeError(
                f"Stored reward {self.rewards[step]} disagrees with compute_reward ({recomputed[step]}) at step {step}"
            )


class EpisodeRecorder:
    """Accumulates observations during a rollout and builds a StoredEpisode"""

    def __init__(self, first, goals: np.ndarray, penalty: bool = True, task: str = "") -> None:
        self.goals = np.array(goals, dtype=np.float64)
        self.penalty = penalty
        self.task = task
        self._ee = [first.ee]
        self._blocks = [first.blocks]
        self._achieved = [first.achieved]
        self._actions: List[np.ndarray] = []
        self._rewards: List[float] = []
        self._versions: List[int] = []

    def add(self, action: np.ndarray, reward: float, next_obs, version: int) -> None:
        self._actions.append(np.asarray(action, dtype=np.float64))
        self._rewards.append(float(reward))
        self._versions.append(int(version))
        self._ee.append(next_obs.ee)
        self._blocks.append(next_obs.blocks)
        self._achieved.append(next_obs.achieved)

    def build(self) -> StoredEpisode:
        return StoredEpisode(
            ee=np.stack(self._ee),
            blocks=np.stack(self._blocks),
            achieved=np.stack(self._achieved),
            goals=self.goals,
            actions=np.stack(self._actions),
            rewards=np.array(self._rewards),
            versions=np.array(self._versions, dtype=np.int64),
            penalty=self.penalty,
            task=self.task,
        )


@dataclass
class TransitionGroup:
    """Dense batch of transitions that share the block count"""

    obs: ObsBatch
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: ObsBatch
    dones: np.ndarray
    episode_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    steps: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    goal_steps: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    relabeled: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    versions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    penalty: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def size(self) -> int:
        return int(self.actions.shape[0])

    def validate(self) -> None:
        b = self.size
        if (
            self.actions.shape != (b, ACTION_DIM)
            or self.rewards.shape != (b,)
            or self.dones.shape != (b,)
            or self.obs.batch_size != b
            or self.next_obs.batch_size != b
        ):
            raise ShapeMismatchError(f"Transition batch of {b} has inconsistent field shapes")


@dataclass
class TransitionBatch:
    """Sampled transitions grouped by block count"""

    groups: Dict[int, TransitionGroup]

    @property
    def size(self) -> int:
        return sum(g.size for g in self.groups.values())


class ReplayBuffer:
    """Episode-aligned transition store with "future" hindsight relabeling.

    Capacity counts transitions; whole episodes are evicted oldest first. All
    access goes through one lock so samples never see a partial append.
    """

    def __init__(
        self,
        capacity: int = 100_000,
        delta: float = DELTA,
        penalty_when_far: bool = False,
    ) -> None:
        self.capacity = int(capacity)
        self.delta = delta
        self.penalty_when_far = penalty_when_far
        self.logger = RelstackLogger()
        self._episodes: Deque[StoredEpisode] = deque()
        self._ids: Deque[int] = deque()
        self._next_id = 0
        self._size = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return self._size

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self._size}/{self.capacity} transitions, {len(self._episodes)} episodes>"

    @property
    def n_episodes(self) -> int:
        return len(self._episodes)

    def episode_ids(self) -> List[int]:
        with self._lock:
            return list(self._ids)

    def store_episode(self, episode: StoredEpisode) -> int:
        """Appends an episode, evicting the oldest ones past capacity

        Raises:
            InconsistentEpisodeError: Episode fails validation

        Returns:
            int: id assigned to the episode
        """
        episode.validate(self.delta, self.penalty_when_far)
        if episode.length > self.capacity:
            raise InconsistentEpisodeError(
                f"Episode of {episode.length} transitions exceeds capacity {self.capacity}"
            )
        with self._lock:
            eid = self._next_id
            self._next_id += 1
            self._episodes.append(episode)
            self._ids.append(eid)
            self._size += episode.length
            while self._size > self.capacity:
                old = self._episodes.popleft()
                old_id = self._ids.popleft()
                self._size -= old.length
                self.logger.debug(f"ReplayBuffer: evicted episode {old_id} ({old.length} transitions)")
        return eid

    def sample_batch(
        self, batch_size: int, rng: np.random.Generator, relabel_fraction: float = 0.8
    ) -> TransitionBatch:
        """Samples transitions uniformly; a relabel_fraction share gets goals from a
        uniformly chosen future step of its own episode and a recomputed reward

        Raises:
            InsufficientReplayError: Fewer than batch_size transitions stored
        """
        with self._lock:
            if self._size < batch_size:
                raise InsufficientReplayError(
                    f"Replay holds {self._size} transitions, {batch_size} requested"
                )
            episodes = list(self._episodes)
            ids = list(self._ids)

        lengths = np.array([e.length for e in episodes])
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        flat = rng.integers(0, int(lengths.sum()), size=batch_size)
        which = np.searchsorted(starts, flat, side="right") - 1
        steps = flat - starts[which]
        relabel = rng.random(batch_size) < relabel_fraction
        future = np.array(
            [rng.integers(int(t), int(lengths[w])) for t, w in zip(steps, which)], dtype=np.int64
        )

        by_n: Dict[int, List[int]] = {}
        for i, w in enumerate(which):
            by_n.setdefault(episodes[w].n_blocks, []).append(i)

        groups: Dict[int, TransitionGroup] = {}
        for n in sorted(by_n):
            rows = by_n[n]
            groups[n] = self._gather(episodes, ids, which[rows], steps[rows], future[rows], relabel[rows])
        return TransitionBatch(groups)

    def _gather(
        self,
        episodes: List[StoredEpisode],
        ids: List[int],
        which: np.ndarray,
        steps: np.ndarray,
        future: np.ndarray,
        relabel: np.ndarray,
    ) -> TransitionGroup:
        ee, blocks, goals, actions, rewards = [], [], [], [], []
        next_ee, next_blocks, dones, versions, penalty, goal_steps = [], [], [], [], [], []
        for w, t, f, r in zip(which, steps, future, relabel):
            ep = episodes[w]
            ee.append(ep.ee[t])
            blocks.append(ep.blocks[t])
            next_ee.append(ep.ee[t + 1])
            next_blocks.append(ep.blocks[t + 1])
            actions.append(ep.actions[t])
            dones.append(float(t == ep.length - 1))
            versions.append(ep.versions[t])
            penalty.append(ep.penalty)
            if r:
                goal = ep.achieved[f + 1]
                reward = compute_reward(
                    ep.achieved[t + 1],
                    goal,
                    ep.ee[t + 1, :3],
                    self.delta,
                    ep.penalty,
                    self.penalty_when_far,
                )
                goal_steps.append(f)
            else:
                goal, reward = ep.goals, ep.rewards[t]
                goal_steps.append(-1)
            goals.append(goal)
            rewards.append(reward)
        goals_arr = np.stack(goals)
        return TransitionGroup(
            obs=ObsBatch(np.stack(ee), np.stack(blocks), goals_arr),
            actions=np.stack(actions),
            rewards=np.array(rewards, dtype=np.float64),
            next_obs=ObsBatch(np.stack(next_ee), np.stack(next_blocks), goals_arr),
            dones=np.array(dones),
            episode_ids=np.array([ids[w] for w in which], dtype=np.int64),
            steps=np.asarray(steps, dtype=np.int64),
            goal_steps=np.array(goal_steps, dtype=np.int64),
            relabeled=np.asarray(relabel, dtype=bool),
            versions=np.array(versions, dtype=np.int64),
            penalty=np.array(penalty, dtype=bool),
        )

    def recent_versions(self) -> np.ndarray:
        """Snapshot versions of every stored transition in storage order"""
        with self._lock:
            if not self._episodes:
                return np.zeros(0, dtype=np.int64)
            return np.concatenate([e.versions for e in self._episodes])

    def save(self, directory: Union[str, Path]):
        """Writes every stored episode to `replay.params` and its index to `replay.json`"""
        with self._lock:
            episodes = list(self._episodes)
            ids = list(self._ids)
            next_id = self._next_id
        arrays: Dict[str, np.ndarray] = {}
        for i, ep in enumerate(episodes):
            for name in EPISODE_ARRAYS:
                arrays[f"{i}.{name}"] = getattr(ep, name)
        d = Path(directory)
        params_save(arrays, d / "replay.params")
        json_save(
            {
                "next_id": next_id,
                "ids": ids,
                "tasks": [ep.task for ep in episodes],
                "penalty": [bool(ep.penalty) for ep in episodes],
            },
            d / "replay.json",
        )

    def load(self, directory: Union[str, Path]):
        """Replaces the contents with files written by save()

        Raises:
            CheckpointFormatError: Index missing or inconsistent with the arrays
        """
        d = Path(directory)
        index = json_load(d / "replay.json")
        if index is None:
            raise CheckpointFormatError(f"No replay index in {d}")
        data = params_load(d / "replay.params")
        episodes = []
        try:
            for i, (task, penalty) in enumerate(zip(index["tasks"], index["penalty"])):
                fields = {name: data[f"{i}.{name}"] for name in EPISODE_ARRAYS}
                fields["versions"] = fields["versions"].astype(np.int64)
                episodes.append(StoredEpisode(penalty=bool(penalty), task=str(task), **fields))
        except KeyError as ex:
            raise CheckpointFormatError(f"Replay arrays missing {ex}") from ex
        ids = [int(v) for v in index["ids"]]
        if len(ids) != len(episodes):
            raise CheckpointFormatError(f"Replay index lists {len(ids)} ids for {len(episodes)} episodes")
        with self._lock:
            self._episodes = deque(episodes)
            self._ids = deque(ids)
            self._next_id = int(index["next_id"])
            self._size = sum(e.length for e in episodes)
        self.logger.debug(f"ReplayBuffer: loaded {len(episodes)} episodes from {d}")
