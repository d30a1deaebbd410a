"""Defines the kinematic blocks-world environment, its reward and its settling rule."""

from __future__ import annotations
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple, Union
import numpy as np

# ----
from relstack._logger import RelstackLogger
from relstack.consts import (
    ACTION_DIM,
    ACTION_SCALE,
    BLOCK_SIZE,
    DELTA,
    FINGER_SIZE,
    GRASP_GAP,
    GRASP_HEIGHT,
    GRASP_RADIUS,
    MAX_BLOCKS,
    MAX_FINGER_GAP,
    RELEASE_GAP,
    STABLE_OFFSET,
    STEPS_PER_BLOCK,
    TABLE_Z,
)
from relstack.error import (
    EpisodeFinishedError,
    InvalidActionError,
    SettleError,
    ShapeMismatchError,
    SpawnRegionError,
)

_EPS = 1e-9
Vec2 = Tuple[float, float]
Vec3 = Tuple[float, float, float]
SeedLike = Union[None, int, np.random.SeedSequence, np.random.Generator]


@dataclass
class EnvParams:
    """Geometry and rule thresholds of the blocks world (meters, steps)"""

    block_size: float = BLOCK_SIZE
    delta: float = DELTA
    table_z: float = TABLE_Z
    workspace_low: Vec3 = (-0.25, -0.35, 0.025)
    workspace_high: Vec3 = (0.25, 0.35, 0.425)
    table_low: Vec2 = (-0.2, -0.3)
    table_high: Vec2 = (0.2, 0.3)
    spawn_low: Vec2 = (-0.125, -0.175)
    spawn_high: Vec2 = (0.125, 0.175)
    home: Vec3 = (0.0, 0.0, 0.225)
    action_scale: float = ACTION_SCALE
    max_gap: float = MAX_FINGER_GAP
    grasp_gap: float = GRASP_GAP
    release_gap: float = RELEASE_GAP
    grasp_radius: float = GRASP_RADIUS
    grasp_height: float = GRASP_HEIGHT
    stable_offset: float = STABLE_OFFSET
    finger_size: float = FINGER_SIZE
    steps_per_block: int = STEPS_PER_BLOCK
    spawn_attempts: int = 1000
    floor_drop: float = 0.4
    penalty_when_far: bool = False

    @property
    def rest_z(self) -> float:
        """Centre height of a block resting on the table"""
        return self.table_z + self.block_size / 2

    @property
    def floor_z(self) -> float:
        return self.table_z - self.floor_drop + self.block_size / 2

    def on_table(self, position: np.ndarray) -> bool:
        x, y = float(position[0]), float(position[1])
        return (
            self.table_low[0] <= x <= self.table_high[0]
            and self.table_low[1] <= y <= self.table_high[1]
        )

    def max_steps(self, n_blocks: int) -> int:
        return self.steps_per_block * n_blocks

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def copy(self) -> EnvParams:
        return replace(self)


@dataclass
class Action:
    """delta: 3-D end-effector displacement command, grip: finger gap command, all in [-1, 1]"""

    delta: np.ndarray
    grip: float

    @classmethod
    def from_array(cls, arr: np.ndarray) -> Action:
        arr = np.asarray(arr, dtype=np.float64).reshape(-1)
        if arr.shape != (ACTION_DIM,):
            raise InvalidActionError(f"Action must have {ACTION_DIM} components, got {arr.shape}")
        return cls(arr[:3].copy(), float(arr[3]))

    def as_array(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.delta, dtype=np.float64), [self.grip]])


@dataclass
class GripperState:
    position: np.ndarray
    velocity: np.ndarray
    gap: float
    gap_velocity: float

    def features(self) -> np.ndarray:
        """8-D gripper features: position, velocity, gap, gap velocity"""
        return np.concatenate([self.position, self.velocity, [self.gap, self.gap_velocity]])


@dataclass
class BlockState:
    position: np.ndarray
    velocity: np.ndarray
    grasped: bool = False
    orientation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def features(self, gripper_position: np.ndarray) -> np.ndarray:
        """15-D block features: position, orientation, position relative to the gripper,
        velocity, angular velocity"""
        return np.concatenate(
            [
                self.position,
                self.orientation,
                self.position - gripper_position,
                self.velocity,
                self.angular_velocity,
            ]
        )


@dataclass
class Observation:
    """What the agent sees.

    ee: (8,) gripper features
    blocks: (N, 15) block features
    goals: (N, 3) desired block positions
    achieved: (N, 3) current block positions
    """

    ee: np.ndarray
    blocks: np.ndarray
    goals: np.ndarray
    achieved: np.ndarray

    @property
    def n_blocks(self) -> int:
        return int(self.blocks.shape[0])

    @property
    def gripper_position(self) -> np.ndarray:
        return self.ee[:3]

    def permute(self, order: np.ndarray) -> Observation:
        """Reorders blocks, goals and achieved positions jointly"""
        order = np.asarray(order)
        return Observation(
            self.ee.copy(), self.blocks[order], self.goals[order], self.achieved[order]
        )

    def with_goals(self, goals: np.ndarray) -> Observation:
        return Observation(self.ee, self.blocks, np.asarray(goals, dtype=np.float64), self.achieved)

    def copy(self) -> Observation:
        return Observation(
            self.ee.copy(), self.blocks.copy(), self.goals.copy(), self.achieved.copy()
        )


def goal_distances(achieved: np.ndarray, goals: np.ndarray) -> np.ndarray:
    diff = np.asarray(achieved, dtype=np.float64) - np.asarray(goals, dtype=np.float64)
    return np.sqrt(np.sum(diff * diff, axis=-1))


def compute_reward(
    achieved: np.ndarray,
    goals: np.ndarray,
    gripper_pos: np.ndarray,
    delta: float = DELTA,
    penalty: Union[bool, np.ndarray] = True,
    penalty_when_far: bool = False,
) -> Union[float, np.ndarray]:
    """Step-wise sparse reward, vectorised over any leading batch axes.

    reward = #blocks within delta of their goal - grip_away, where grip_away
    fires when every block is within delta and the gripper is within 2*delta
    of the mean goal position (beyond 2*delta when `penalty_when_far`).

    Args:
        achieved (np.ndarray): (..., N, 3) block positions
        goals (np.ndarray): (..., N, 3) goal positions
        gripper_pos (np.ndarray): (..., 3) gripper position
        delta (float, optional): Success radius. Defaults to 0.05.
        penalty (bool | np.ndarray, optional): Enables the grip-away term, per sample if an array.
        penalty_when_far (bool, optional): Literal reading of the penalty direction. Defaults to False.

    Returns:
        float | np.ndarray: reward, scalar when inputs carry no batch axis
    """
    goals = np.asarray(goals, dtype=np.float64)
    at_goal = goal_distances(achieved, goals) < delta
    count = at_goal.sum(axis=-1)
    full = at_goal.all(axis=-1)
    centre = goals.sum(axis=-2) / goals.shape[-2]
    away = goal_distances(gripper_pos, centre)
    near = away > 2.0 * delta if penalty_when_far else away < 2.0 * delta
    grip_away = full & near & np.asarray(penalty, dtype=bool)
    reward = (count - grip_away).astype(np.float64)
    return float(reward) if reward.ndim == 0 else reward


def is_success(observation: Observation, delta: float = DELTA) -> bool:
    """True iff every block is strictly within delta of its goal"""
    return bool(np.all(goal_distances(observation.achieved, observation.goals) < delta))


def _overlaps_xy(a: np.ndarray, b: np.ndarray, size: float) -> bool:
    return abs(a[0] - b[0]) < size - _EPS and abs(a[1] - b[1]) < size - _EPS


def _overlaps(a: np.ndarray, b: np.ndarray, reach: float) -> bool:
    return bool(np.all(np.abs(a - b) < reach - _EPS))


def _settle_block(
    positions: np.ndarray, i: int, below: List[int], params: EnvParams
) -> Optional[np.ndarray]:
    size = params.block_size
    p = positions[i].copy()
    for _ in range(len(below) + 1):
        supports = [k for k in below if _overlaps_xy(positions[k], p, size)]
        if not supports:
            p[2] = params.rest_z
            return p
        top = max(positions[k, 2] for k in supports)
        level = [k for k in supports if positions[k, 2] >= top - _EPS]

        def offset(k: int) -> float:
            return float(np.max(np.abs(p[:2] - positions[k, :2])))

        if any(offset(k) <= params.stable_offset + _EPS for k in level):
            p[2] = top + size
            return p
        # unstable: slide off the nearest supporter along the dominant offset axis
        k = min(level, key=lambda k: (offset(k), k))
        off = p[:2] - positions[k, :2]
        axis = int(np.argmax(np.abs(off)))
        direction = 1.0 if off[axis] >= 0 else -1.0
        p[axis] = positions[k, axis] + direction * size
    return None


def settle(
    positions: np.ndarray,
    params: Optional[EnvParams] = None,
    held: Optional[int] = None,
    off_table: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Drops every unsupported, ungrasped block onto the highest support below it.

    Blocks are processed bottom-up. A block resting on another is stable iff its
    horizontal centre offset is within `stable_offset` on both axes; otherwise it
    slides off next to its supporter and keeps falling. Blocks leaving the table
    footprint fall to the floor and are marked off-table.

    Args:
        positions (np.ndarray): (N, 3) block centres
        params (EnvParams, optional): World geometry
        held (int, optional): Index of the grasped block, left in place and never a support
        off_table (np.ndarray, optional): (N,) blocks already on the floor

    Raises:
        SettleError: No fixpoint after N + 1 sweeps

    Returns:
        Tuple[np.ndarray, np.ndarray]: settled positions, off-table mask
    """
    params = params or EnvParams()
    pos = np.array(positions, dtype=np.float64).reshape(-1, 3)
    n = pos.shape[0]
    gone = np.zeros(n, dtype=bool) if off_table is None else np.array(off_table, dtype=bool)

    for _ in range(n + 1):
        changed = False
        order = sorted(range(n), key=lambda i: (pos[i, 2], i))
        for rank, i in enumerate(order):
            if i == held or gone[i]:
                continue
            if params.on_table(pos[i]):
                below = [k for k in order[:rank] if k != held and not gone[k]]
                new = _settle_block(pos, i, below, params)
                if new is None:
                    raise SettleError(f"Block {i} found no resting place")
                if not np.array_equal(new, pos[i]):
                    pos[i] = new
                    changed = True
            if not params.on_table(pos[i]):
                pos[i, 2] = params.floor_z
                gone[i] = True
                changed = True
        if not changed:
            return pos, gone
    raise SettleError(f"No fixpoint after {n + 1} sweeps")


class BlockWorld:
    """Deterministic kinematic pick-and-place world with N blocks and a point gripper"""

    def __init__(self, params: Optional[EnvParams] = None, record_trace: bool = False) -> None:
        """BlockWorld constructor

        Args:
            params (EnvParams, optional): Geometry and rule thresholds. Defaults to EnvParams().
            record_trace (bool, optional): Keep one record per step in `self.trace`. Defaults to False.
        """
        self.params = params or EnvParams()
        self.record_trace = record_trace
        self.logger = RelstackLogger()
        self.n_blocks = 0
        self.goals = np.zeros((0, 3))
        self.penalty = True
        self.max_steps = 0
        self.step_count = 0
        self.positions = np.zeros((0, 3))
        self.velocities = np.zeros((0, 3))
        self.off_table = np.zeros(0, dtype=bool)
        self.gripper = np.array(self.params.home, dtype=np.float64)
        self.gripper_velocity = np.zeros(3)
        self.gap = self.params.max_gap
        self.gap_velocity = 0.0
        self.held: Optional[int] = None
        self._held_offset = np.zeros(3)
        self._active = False
        self.trace: List[Dict[str, Any]] = []

    def __repr__(self) -> str:
        return f"<{type(self).__name__} n={self.n_blocks} step={self.step_count}/{self.max_steps}>"

    @property
    def done(self) -> bool:
        return not self._active

    def reset(
        self,
        n_blocks: int,
        goal_set: Any,
        seed: SeedLike = None,
        penalty: Optional[bool] = None,
    ) -> Observation:
        """Starts a new episode

        Args:
            n_blocks (int): Number of blocks, 1 to 9
            goal_set (GoalSet | np.ndarray): (N, 3) goal positions or an object with `.positions`
            seed (SeedLike, optional): Spawn randomness
            penalty (bool, optional): Enables the grip-away term. Defaults to goal_set.grip_away_penalty or True.

        Raises:
            SpawnRegionError: Blocks could not be placed without overlap

        Returns:
            Observation: initial observation
        """
        if not 1 <= n_blocks <= MAX_BLOCKS:
            raise ValueError(f"n_blocks must be in [1, {MAX_BLOCKS}], got {n_blocks}")
        goals = np.array(getattr(goal_set, "positions", goal_set), dtype=np.float64).reshape(-1, 3)
        if goals.shape[0] != n_blocks:
            raise ShapeMismatchError(f"{goals.shape[0]} goals for {n_blocks} blocks")
        if penalty is None:
            penalty = bool(getattr(goal_set, "grip_away_penalty", True))
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

        self.n_blocks = n_blocks
        self.goals = goals
        self.penalty = penalty
        self.max_steps = self.params.max_steps(n_blocks)
        self.step_count = 0
        self.positions = self._spawn(n_blocks, rng)
        self.velocities = np.zeros((n_blocks, 3))
        self.off_table = np.zeros(n_blocks, dtype=bool)
        self.gripper = np.array(self.params.home, dtype=np.float64)
        self.gripper_velocity = np.zeros(3)
        self.gap = self.params.max_gap
        self.gap_velocity = 0.0
        self.held = None
        self._held_offset = np.zeros(3)
        self._active = True
        self.trace = []
        self.logger.debug(f"BlockWorld: reset n={n_blocks} limit={self.max_steps}")
        return self.observe()

    def _spawn(self, n_blocks: int, rng: np.random.Generator) -> np.ndarray:
        p = self.params
        placed: List[np.ndarray] = []
        for i in range(n_blocks):
            for _ in range(p.spawn_attempts):
                xy = rng.uniform(p.spawn_low, p.spawn_high)
                if all(np.max(np.abs(xy - q)) >= p.block_size for q in placed):
                    placed.append(xy)
                    break
            else:
                raise SpawnRegionError(
                    f"Could not place block {i} of {n_blocks} after {p.spawn_attempts} samples"
                )
        out = np.zeros((n_blocks, 3))
        out[:, :2] = placed
        out[:, 2] = p.rest_z
        return out

    def set_state(
        self,
        positions: np.ndarray,
        gripper: Optional[np.ndarray] = None,
        gap: Optional[float] = None,
        held: Optional[int] = None,
    ) -> Observation:
        """Places blocks and gripper directly (no settling), zeroing velocities"""
        positions = np.array(positions, dtype=np.float64).reshape(-1, 3)
        if positions.shape[0] != self.n_blocks:
            raise ShapeMismatchError(f"{positions.shape[0]} positions for {self.n_blocks} blocks")
        self.positions = positions
        self.velocities = np.zeros_like(positions)
        if gripper is not None:
            self.gripper = np.array(gripper, dtype=np.float64)
        if gap is not None:
            self.gap = float(gap)
        self.gripper_velocity = np.zeros(3)
        self.gap_velocity = 0.0
        self.held = held
        if held is not None:
            self._held_offset = self.positions[held] - self.gripper
            self.gap = self.params.block_size
        self.off_table = np.array([not self.params.on_table(q) for q in positions], dtype=bool)
        return self.observe()

    def step(self, action: Union[Action, np.ndarray]) -> Tuple[Observation, float, bool, Dict[str, Any]]:
        """Advances one step: move, grasp/release, push, settle

        Raises:
            InvalidActionError: Wrong shape or NaN in the action
            EpisodeFinishedError: The episode already reached its time limit

        Returns:
            Tuple[Observation, float, bool, Dict[str, Any]]: observation, reward, done, info
        """
        if not self._active:
            raise EpisodeFinishedError("step() called after the episode ended; call reset()")
        a = action.as_array() if isinstance(action, Action) else np.asarray(action, dtype=np.float64)
        a = a.reshape(-1)
        if a.shape != (ACTION_DIM,):
            raise InvalidActionError(f"Action must have {ACTION_DIM} components, got {a.shape}")
        if np.isnan(a).any():
            raise InvalidActionError(f"Action contains NaN: {a}")
        a = np.clip(a, -1.0, 1.0)

        p = self.params
        prev_gripper = self.gripper.copy()
        prev_positions = self.positions.copy()
        prev_gap = self.gap
        target_gap = (a[3] + 1.0) / 2.0 * p.max_gap

        self._move(a[:3] * p.action_scale)
        self._grasp_or_release(target_gap, prev_gap)
        if self.held is None:
            self.gap = target_gap
            if target_gap < p.block_size:
                self._push(prev_gripper)
        else:
            self.gap = p.block_size
        self.positions, self.off_table = settle(self.positions, p, self.held, self.off_table)

        self.velocities = self.positions - prev_positions
        self.gripper_velocity = self.gripper - prev_gripper
        self.gap_velocity = self.gap - prev_gap
        self.step_count += 1

        obs = self.observe()
        at_goal = goal_distances(self.positions, self.goals) < p.delta
        reward = compute_reward(
            self.positions, self.goals, self.gripper, p.delta, self.penalty, p.penalty_when_far
        )
        done = self.step_count >= self.max_steps
        if done:
            self._active = False
        info = {
            "at_goal": at_goal,
            "full_stack": bool(at_goal.all()),
            "off_table": self.off_table.copy(),
            "is_success": bool(at_goal.all()),
            "held": self.held,
        }
        if self.record_trace:
            self.trace.append(self._trace_record(a, reward, info))
        return obs, reward, done, info

    def _move(self, displacement: np.ndarray) -> None:
        p = self.params
        low, high = np.array(p.workspace_low), np.array(p.workspace_high)
        target = np.clip(self.gripper + displacement, low, high)
        if self.held is None:
            self.gripper = target
            return

        block = target + self._held_offset
        lift = p.rest_z - block[2]
        if lift > 0:
            block[2] += lift
            target[2] += lift
        for _ in range(self.n_blocks):
            hit = False
            for k in range(self.n_blocks):
                if k == self.held or self.off_table[k]:
                    continue
                d = block - self.positions[k]
                if not _overlaps(block, self.positions[k], p.block_size):
                    continue
                pen = p.block_size - np.abs(d)
                axis = int(np.argmin(pen))
                shift = (1.0 if d[axis] >= 0 else -1.0) * pen[axis]
                block[axis] += shift
                target[axis] += shift
                hit = True
            if not hit:
                break
        self.gripper = target
        self.positions[self.held] = block

    def _grasp_or_release(self, target_gap: float, prev_gap: float) -> None:
        p = self.params
        if self.held is not None:
            if target_gap > p.release_gap:
                self.logger.debug(f"BlockWorld: released block {self.held}")
                self.held = None
            return
        # fingers must close around the block from an open position
        if target_gap >= p.grasp_gap or prev_gap < p.block_size:
            return
        best: Optional[Tuple[float, int]] = None
        for k in range(self.n_blocks):
            if self.off_table[k]:
                continue
            d = self.positions[k] - self.gripper
            if np.hypot(d[0], d[1]) > p.grasp_radius + _EPS or abs(d[2]) > p.grasp_height + _EPS:
                continue
            cand = (float(np.sqrt(np.sum(d * d))), k)
            if best is None or cand < best:
                best = cand
        if best is not None:
            self.held = best[1]
            self._held_offset = self.positions[self.held] - self.gripper
            self.logger.debug(f"BlockWorld: grasped block {self.held}")

    def _push(self, prev_gripper: np.ndarray) -> None:
        p = self.params
        reach = (p.block_size + p.finger_size) / 2
        for k in range(self.n_blocks):
            if self.off_table[k] or not _overlaps(self.gripper, self.positions[k], reach):
                continue
            d = self.positions[k] - self.gripper
            if prev_gripper[2] >= self.positions[k, 2] + reach - _EPS:
                # came from above: rest the fingers on the block top
                self.gripper[2] = self.positions[k, 2] + reach
                continue
            pen = reach - np.abs(d[:2])
            axis = int(np.argmin(pen))
            self.positions[k, axis] += (1.0 if d[axis] >= 0 else -1.0) * pen[axis]
            self._separate(k)

    def _separate(self, moved: int) -> None:
        size = self.params.block_size
        for _ in range(self.n_blocks):
            hit = False
            for k in range(self.n_blocks):
                if k == moved or k == self.held or self.off_table[k]:
                    continue
                if not _overlaps(self.positions[moved], self.positions[k], size):
                    continue
                d = self.positions[moved] - self.positions[k]
                pen = size - np.abs(d[:2])
                axis = int(np.argmin(pen))
                self.positions[moved, axis] += (1.0 if d[axis] >= 0 else -1.0) * pen[axis]
                hit = True
            if not hit:
                return

    def gripper_state(self) -> GripperState:
        return GripperState(
            self.gripper.copy(), self.gripper_velocity.copy(), self.gap, self.gap_velocity
        )

    def block_states(self) -> List[BlockState]:
        return [
            BlockState(self.positions[i].copy(), self.velocities[i].copy(), self.held == i)
            for i in range(self.n_blocks)
        ]

    def observe(self) -> Observation:
        gripper = self.gripper_state()
        blocks = np.stack([b.features(self.gripper) for b in self.block_states()])
        return Observation(gripper.features(), blocks, self.goals.copy(), self.positions.copy())

    def _trace_record(self, action: np.ndarray, reward: float, info: Dict[str, Any]) -> Dict[str, Any]:
        return {
            "step": self.step_count,
            "gripper": {
                "position": self.gripper.tolist(),
                "velocity": self.gripper_velocity.tolist(),
                "gap": self.gap,
                "gap_velocity": self.gap_velocity,
            },
            "blocks": [
                {"position": b.position.tolist(), "velocity": b.velocity.tolist(), "grasped": b.grasped}
                for b in self.block_states()
            ],
            "goals": self.goals.tolist(),
            "action": action.tolist(),
            "reward": float(reward),
            "at_goal": [bool(f) for f in info["at_goal"]],
            "full_stack": info["full_stack"],
            "off_table": [bool(f) for f in info["off_table"]],
        }
