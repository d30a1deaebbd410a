from pathlib import Path
from typing import List, Optional
import numpy as np
from relstack._env import EnvParams, Observation
from relstack._renn import ActorOutput, Module, NetInputs, ObsBatch
from relstack._replay import TransitionBatch, TransitionGroup
from relstack._tensor import Parameter, Tape, Tensor, add, matvec
from relstack._trace import EpisodeTrace

CWD = Path(__file__).parent.as_posix()
INPUTS_DIR = f"{CWD}/inputs"
OUTPUTS_DIR = f"{CWD}/outputs"
Path(OUTPUTS_DIR).mkdir(exist_ok=True)


class ScriptedStacker:
    """Hand-written policy that places blocks in goal-height order.

    Free gripper: fly to the next block with open fingers, then close.
    Holding: rise to a travel height, move over the goal, descend, release.
    Once everything is placed the gripper rises out of the penalty zone.
    """

    version = 0

    def __init__(self, params: Optional[EnvParams] = None, tolerance: float = 1e-6) -> None:
        self.params = params or EnvParams()
        self.tolerance = tolerance

    def _delta(self, gripper: np.ndarray, target: np.ndarray) -> np.ndarray:
        return np.clip((target - gripper) / self.params.action_scale, -1.0, 1.0)

    def act(self, obs: Observation, mode: str, rng: np.random.Generator) -> np.ndarray:
        gripper = obs.ee[:3]
        gap = obs.ee[6]
        holding = abs(gap - self.params.block_size) < 1e-9
        order = sorted(range(obs.n_blocks), key=lambda i: (obs.goals[i, 2], i))
        remaining = [i for i in order if np.linalg.norm(obs.achieved[i] - obs.goals[i]) > 1e-4]

        if holding:
            held = int(np.argmin(np.linalg.norm(obs.achieved - gripper, axis=1)))
            offset = obs.achieved[held] - gripper
            target = obs.goals[held] - offset
            others = [obs.achieved[k, 2] for k in range(obs.n_blocks) if k != held]
            travel = max([obs.goals[:, 2].max()] + others) + 0.1
            if np.linalg.norm(gripper[:2] - target[:2]) > self.tolerance:
                if gripper[2] < travel - self.tolerance:
                    waypoint = np.array([gripper[0], gripper[1], travel])
                else:
                    waypoint = np.array([target[0], target[1], travel])
                return np.concatenate([self._delta(gripper, waypoint), [-1.0]])
            if np.linalg.norm(gripper - target) > self.tolerance:
                return np.concatenate([self._delta(gripper, target), [-1.0]])
            return np.array([0.0, 0.0, 0.0, 1.0])

        if not remaining:
            top = np.array([gripper[0], gripper[1], self.params.workspace_high[2]])
            return np.concatenate([self._delta(gripper, top), [1.0]])
        block = obs.achieved[remaining[0]]
        if np.linalg.norm(gripper - block) > self.tolerance or gap < self.params.grasp_gap:
            return np.concatenate([self._delta(gripper, block), [1.0]])
        return np.array([0.0, 0.0, 0.0, -1.0])


class IdlePolicy:
    """Never moves, fingers open"""

    version = 0

    def act(self, obs: Observation, mode: str, rng: np.random.Generator) -> np.ndarray:
        return np.array([0.0, 0.0, 0.0, 1.0])


def make_trace(
    at_goal: List[List[bool]],
    gripper: Optional[np.ndarray] = None,
    off_table: Optional[List[List[bool]]] = None,
) -> EpisodeTrace:
    """EpisodeTrace from per-step at-goal flags; gripper defaults to a fast sweep"""
    flags = np.array(at_goal, dtype=bool)
    t, n = flags.shape
    if gripper is None:
        gripper = np.zeros((t, 3))
        gripper[:, 0] = np.linspace(-0.2, 0.2, t)
    off = np.zeros((t, n), dtype=bool) if off_table is None else np.array(off_table, dtype=bool)
    return EpisodeTrace(np.asarray(gripper, dtype=np.float64), flags, flags.all(axis=1), off)


def random_observation(rng: np.random.Generator, n_blocks: int) -> Observation:
    blocks = rng.normal(size=(n_blocks, 15))
    return Observation(rng.normal(size=8), blocks, rng.normal(size=(n_blocks, 3)), blocks[:, :3].copy())


# ---- two-state, two-action MDP: s' = a, reward 1 for (s=1, a=1)


class TabularCritic(Module):
    """Q(s, a) table indexed by s = ee[0] > .5 and a = action[0] > 0"""

    def __init__(self, name: str) -> None:
        self.name = name
        self.table = Parameter(f"{name}.table", np.zeros(4))

    def forward(self, tape: Tape, inputs: NetInputs, action) -> Tensor:
        a = action.data if isinstance(action, Tensor) else np.asarray(action)
        index = 2 * (inputs.ee[:, 0] > 0.5).astype(int) + (a[:, 0] > 0).astype(int)
        onehot = np.eye(4)[index]
        return matvec(onehot, tape.param(self.table))


class ConstantActor(Module):
    """tanh(3) on every action dimension, essentially deterministic"""

    architecture = "table"

    def __init__(self) -> None:
        self.name = "actor"
        self.bias = Parameter("actor.bias", np.full(4, 3.0))

    def forward(self, tape: Tape, inputs: NetInputs) -> ActorOutput:
        b = inputs.batch_size
        mean = add(np.zeros((b, 4)), tape.param(self.bias))
        log_std = Tensor(np.full((b, 4), -20.0))
        return ActorOutput(mean, log_std, [])


def tiny_mdp_batch() -> TransitionBatch:
    """All four (s, a) pairs once"""
    states = np.array([0.0, 0.0, 1.0, 1.0])
    actions_sign = np.array([-1.0, 1.0, -1.0, 1.0])

    def obs(s: np.ndarray) -> ObsBatch:
        ee = np.zeros((s.shape[0], 8))
        ee[:, 0] = s
        return ObsBatch(ee, np.zeros((s.shape[0], 1, 15)), np.zeros((s.shape[0], 1, 3)))

    actions = np.zeros((4, 4))
    actions[:, 0] = actions_sign
    next_states = (actions_sign > 0).astype(float)
    rewards = ((states == 1.0) & (actions_sign > 0)).astype(float)
    group = TransitionGroup(obs(states), actions, rewards, obs(next_states), np.zeros(4))
    return TransitionBatch({1: group})
