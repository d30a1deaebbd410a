"""Defines goal configurations (GoalSet), their samplers and task label parsing."""

from __future__ import annotations
from dataclasses import dataclass
from typing import List, Optional, Tuple
import re
import numpy as np

# ----
from relstack._env import EnvParams
from relstack.consts import MAX_BLOCKS
from relstack.error import GoalSamplingError, UnknownTaskError

MIN_BASE_DISTANCE = 0.15
MAX_ATTEMPTS = 1000
AIR_Z_RANGE = (0.05, 0.25)
AIR_PROBABILITY = 0.5


@dataclass
class GoalSet:
    """N target block centres and the configuration they form.

    `towers` holds the tower index of each goal for tower-like configurations.
    `grip_away_penalty` is False for pick-and-place goals, which may require
    holding a block in the air.
    """

    positions: np.ndarray
    label: str
    towers: Optional[np.ndarray] = None
    grip_away_penalty: bool = True

    @property
    def n_blocks(self) -> int:
        return int(self.positions.shape[0])

    def tower_heights(self) -> List[int]:
        if self.towers is None:
            return [self.n_blocks]
        return [int(c) for c in np.bincount(self.towers)]


def _in_region(xy: np.ndarray, params: EnvParams) -> bool:
    return bool(
        np.all(xy >= np.array(params.spawn_low) - 1e-12)
        and np.all(xy <= np.array(params.spawn_high) + 1e-12)
    )


def _sample_xy(rng: np.random.Generator, params: EnvParams) -> np.ndarray:
    return rng.uniform(params.spawn_low, params.spawn_high)


def _tower_column(base: np.ndarray, height: int, params: EnvParams) -> np.ndarray:
    levels = np.arange(height, dtype=np.float64)
    column = np.zeros((height, 3))
    column[:, 0] = base[0]
    column[:, 1] = base[1]
    column[:, 2] = params.rest_z + params.block_size * levels
    return column


def sample_single_tower(
    n: int, rng: np.random.Generator, params: Optional[EnvParams] = None, label: Optional[str] = None
) -> GoalSet:
    """One tower of n blocks on a base sampled uniformly in the goal region. Goal 0 is the bottom block."""
    params = params or EnvParams()
    if not 1 <= n <= MAX_BLOCKS:
        raise ValueError(f"Tower height must be in [1, {MAX_BLOCKS}], got {n}")
    top = params.rest_z + params.block_size * (n - 1)
    if top > params.workspace_high[2] + 1e-12:
        raise GoalSamplingError(f"A tower of {n} blocks exceeds the workspace height")
    base = _sample_xy(rng, params)
    return GoalSet(
        _tower_column(base, n, params),
        label or f"single-tower-{n}",
        towers=np.zeros(n, dtype=np.int64),
    )


def sample_multiple_towers(
    n: int, k: int, rng: np.random.Generator, params: Optional[EnvParams] = None
) -> GoalSet:
    """k towers of near-equal height; blocks dealt round-robin after a shuffle

    Raises:
        GoalSamplingError: No base placement with pairwise distance >= 0.15 m in 1000 tries
    """
    params = params or EnvParams()
    if k not in (2, 3) or n < k or n > MAX_BLOCKS:
        raise ValueError(f"multi-towers needs k in {{2, 3}} and k <= n <= {MAX_BLOCKS}, got n={n} k={k}")
    for _ in range(MAX_ATTEMPTS):
        bases = np.stack([_sample_xy(rng, params) for _ in range(k)])
        dists = [np.linalg.norm(bases[i] - bases[j]) for i in range(k) for j in range(i + 1, k)]
        if min(dists) >= MIN_BASE_DISTANCE:
            break
    else:
        raise GoalSamplingError(f"Could not place {k} tower bases {MIN_BASE_DISTANCE} m apart")

    order = rng.permutation(n)
    positions = np.zeros((n, 3))
    towers = np.zeros(n, dtype=np.int64)
    for slot, block in enumerate(order):
        tower, level = slot % k, slot // k
        positions[block] = [
            bases[tower, 0],
            bases[tower, 1],
            params.rest_z + params.block_size * level,
        ]
        towers[block] = tower
    return GoalSet(positions, f"multi-towers-{n}-{k}", towers=towers)


def pyramid_rows(n: int) -> List[int]:
    """Row sizes from the bottom: base width b is the smallest with b(b+1)/2 >= n, filled greedily"""
    b = 1
    while b * (b + 1) // 2 < n:
        b += 1
    rows: List[int] = []
    left = n
    for width in range(b, 0, -1):
        take = min(width, left)
        if take == 0:
            break
        rows.append(take)
        left -= take
    return rows


def sample_pyramid(n: int, rng: np.random.Generator, params: Optional[EnvParams] = None) -> GoalSet:
    """Pyramid along a random table axis; each upper block bridges two supporters

    Raises:
        GoalSamplingError: No corner keeps the footprint on the table in 1000 tries
    """
    params = params or EnvParams()
    if not 3 <= n <= MAX_BLOCKS:
        raise ValueError(f"Pyramid size must be in [3, {MAX_BLOCKS}], got {n}")
    rows = pyramid_rows(n)
    width = (rows[0] - 1) * params.block_size
    for _ in range(MAX_ATTEMPTS):
        corner = _sample_xy(rng, params)
        axis = int(rng.integers(2))
        far = corner.copy()
        far[axis] += width
        if _in_region(far, params):
            break
    else:
        raise GoalSamplingError(f"Could not fit a {n}-block pyramid on the table")

    positions = []
    for level, count in enumerate(rows):
        for slot in range(count):
            p = np.array([corner[0], corner[1], params.rest_z + params.block_size * level])
            p[axis] += level * params.block_size / 2 + slot * params.block_size
            positions.append(p)
    return GoalSet(np.array(positions), f"pyramid-{n}")


def _air_or_table(rng: np.random.Generator, params: EnvParams) -> float:
    if rng.random() < AIR_PROBABILITY:
        return float(rng.uniform(*AIR_Z_RANGE))
    return params.rest_z


def sample_pick_and_place(
    n: int, rng: np.random.Generator, params: Optional[EnvParams] = None
) -> GoalSet:
    """One or two free-standing goals. The first lies on the table when n = 2;
    otherwise each goal is on the table or in the air with equal probability."""
    params = params or EnvParams()
    if n not in (1, 2):
        raise ValueError(f"pick-and-place supports 1 or 2 blocks, got {n}")
    first = _sample_xy(rng, params)
    z0 = params.rest_z if n == 2 else _air_or_table(rng, params)
    positions = [np.array([first[0], first[1], z0])]
    if n == 2:
        for _ in range(MAX_ATTEMPTS):
            second = _sample_xy(rng, params)
            if np.max(np.abs(second - first)) >= params.block_size:
                break
        else:
            raise GoalSamplingError("Could not separate two pick-and-place goals")
        positions.append(np.array([second[0], second[1], _air_or_table(rng, params)]))
    return GoalSet(np.array(positions), f"pick-and-place-{n}", grip_away_penalty=False)


@dataclass(frozen=True)
class TaskSpec:
    """A task: block count and the goal configuration family to sample from"""

    kind: str
    n_blocks: int
    towers: int = 1

    @property
    def label(self) -> str:
        if self.kind == "multi-towers":
            return f"multi-towers-{self.n_blocks}-{self.towers}"
        return f"{self.kind}-{self.n_blocks}"

    def sample(self, rng: np.random.Generator, params: Optional[EnvParams] = None) -> GoalSet:
        if self.kind == "single-tower":
            return sample_single_tower(self.n_blocks, rng, params)
        if self.kind == "tower":
            return sample_single_tower(self.n_blocks, rng, params, label=self.label)
        if self.kind == "multi-towers":
            return sample_multiple_towers(self.n_blocks, self.towers, rng, params)
        if self.kind == "pyramid":
            return sample_pyramid(self.n_blocks, rng, params)
        if self.kind == "pick-and-place":
            return sample_pick_and_place(self.n_blocks, rng, params)
        raise UnknownTaskError(self.kind)


_TASK_PATTERNS: List[Tuple[str, "re.Pattern[str]"]] = [
    ("multi-towers", re.compile(r"^multi-towers?-(\d+)-(\d+)$")),
    ("single-tower", re.compile(r"^single-tower-(\d+)$")),
    ("pyramid", re.compile(r"^pyramid-(\d+)$")),
    ("pick-and-place", re.compile(r"^(?:pick-and-place|pp)-(\d+)$")),
    ("tower", re.compile(r"^tower-(\d+)$")),
]


def parse_task(label: str) -> TaskSpec:
    """Parses a task label such as `single-tower-6`, `multi-towers-5-2`, `pyramid-6`,
    `pick-and-place-1` or `tower-3`

    Raises:
        UnknownTaskError: The label is not recognised or its sizes are out of range
    """
    text = label.strip().lower()
    for kind, pattern in _TASK_PATTERNS:
        match = pattern.match(text)
        if match is None:
            continue
        n = int(match.group(1))
        k = int(match.group(2)) if kind == "multi-towers" else 1
        valid = {
            "multi-towers": k in (2, 3) and k <= n <= MAX_BLOCKS,
            "single-tower": 1 <= n <= MAX_BLOCKS,
            "tower": 1 <= n <= MAX_BLOCKS,
            "pyramid": 3 <= n <= MAX_BLOCKS,
            "pick-and-place": n in (1, 2),
        }[kind]
        if not valid:
            raise UnknownTaskError(f"Task '{label}' has sizes out of range")
        return TaskSpec(kind, n, k)
    raise UnknownTaskError(f"Unknown task label '{label}'")


def zero_shot_tasks() -> List[TaskSpec]:
    """Generalization grid: single towers 1..9, multi-towers with 2 and 3 towers, pyramids 3..9"""
    tasks = [TaskSpec("single-tower", n) for n in range(1, MAX_BLOCKS + 1)]
    tasks += [TaskSpec("multi-towers", n, k) for n in range(4, MAX_BLOCKS + 1) for k in (2, 3)]
    tasks += [TaskSpec("pyramid", n) for n in range(3, MAX_BLOCKS + 1)]
    return tasks
