"""Defines episode rollouts, success-rate evaluation, zero-shot sweeps and failure classification."""

from __future__ import annotations
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Protocol, Sequence, Union, runtime_checkable
import numpy as np
import pandas as pd

# ----
from relstack._checkpoint import json_save, table_save
from relstack._env import BlockWorld, EnvParams, Observation, is_success
from relstack._goals import GoalSet, TaskSpec, parse_task, zero_shot_tasks
from relstack._logger import RelstackLogger
from relstack._replay import EpisodeRecorder, StoredEpisode
from relstack._trace import EpisodeTrace, trace_save
from relstack.error import SuccessfulEpisodeError

OSCILLATION = "oscillation"
INSUFFICIENT_RECOVERY = "insufficient-recovery"
FALL_OFF_DURING = "fall-off-during"
FALL_OFF_AFTER = "fall-off-after"
OTHER = "other"
FAILURE_TAGS = (OSCILLATION, INSUFFICIENT_RECOVERY, FALL_OFF_DURING, FALL_OFF_AFTER, OTHER)


@runtime_checkable
class Policy(Protocol):
    def act(self, observation: Observation, mode: str, rng: np.random.Generator) -> np.ndarray:
        ...


@runtime_checkable
class EvaluationCallback(Protocol):
    def __call__(self, done: int, total: int, success: bool) -> None:
        ...


@dataclass
class Rollout:
    """Result of one episode"""

    episode: StoredEpisode
    trace: EpisodeTrace
    success: bool
    blocks_at_goal: int
    records: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def env_steps(self) -> int:
        return self.episode.length


def rollout(
    policy: Policy,
    goal_set: GoalSet,
    rng: np.random.Generator,
    mode: str = "stochastic",
    env: Optional[BlockWorld] = None,
    record_trace: bool = False,
    on_step: Optional[Callable[[int, Observation], None]] = None,
) -> Rollout:
    """Runs one full episode of `policy` toward `goal_set`

    Args:
        policy (Policy): Object with act(observation, mode, rng)
        goal_set (GoalSet): Episode goals
        rng (np.random.Generator): Drives spawning and action sampling
        mode (str, optional): Action mode. Defaults to "stochastic".
        env (BlockWorld, optional): Environment to reuse. Defaults to a fresh BlockWorld.
        record_trace (bool, optional): Keep per-step trace records. Defaults to False.
        on_step (Callable, optional): Called with (step, observation) before each action

    Returns:
        Rollout: stored episode, flags trace and outcome
    """
    env = env or BlockWorld()
    env.record_trace = record_trace
    version = int(getattr(policy, "version", 0))
    obs = env.reset(goal_set.n_blocks, goal_set, rng)
    recorder = EpisodeRecorder(obs, goal_set.positions, env.penalty, goal_set.label)
    gripper, at_goal, full, off = [], [], [], []
    done = False
    while not done:
        if on_step is not None:
            on_step(env.step_count, obs)
        action = policy.act(obs, mode, rng)
        obs, reward, done, info = env.step(action)
        recorder.add(action, reward, obs, version)
        gripper.append(obs.gripper_position.copy())
        at_goal.append(info["at_goal"])
        full.append(info["full_stack"])
        off.append(info["off_table"])
    trace = EpisodeTrace(
        np.array(gripper), np.array(at_goal, dtype=bool), np.array(full, dtype=bool), np.array(off, dtype=bool)
    )
    return Rollout(
        episode=recorder.build(),
        trace=trace,
        success=is_success(obs, env.params.delta),
        blocks_at_goal=int(at_goal[-1].sum()),
        records=list(env.trace),
    )


def classify_failure(trace: EpisodeTrace, window: int = 50, displacement: float = 0.05) -> str:
    """Tags an unsuccessful episode. Fall-off categories take precedence, then
    insufficient recovery, then oscillation.

    Args:
        trace (EpisodeTrace): Per-step flags
        window (int, optional): Oscillation window in steps. Defaults to 50.
        displacement (float, optional): Gripper displacement bound within the window. Defaults to 0.05.

    Raises:
        SuccessfulEpisodeError: The episode succeeded

    Returns:
        str: one of FAILURE_TAGS
    """
    if trace.success:
        raise SuccessfulEpisodeError("Cannot classify the failure of a successful episode")
    any_off = trace.off_table.any(axis=1) if trace.off_table.size else np.zeros(trace.length, dtype=bool)
    if any_off.any():
        first_off = int(np.argmax(any_off))
        return FALL_OFF_AFTER if trace.full_stack[:first_off].any() else FALL_OFF_DURING
    if trace.full_stack.any():
        return INSUFFICIENT_RECOVERY
    if trace.length >= window:
        tail = trace.gripper[-window:]
        moved = np.sqrt(np.sum((tail - tail[0]) ** 2, axis=1)).max()
        counts = trace.at_goal[-window:].sum(axis=1)
        if moved <= displacement and np.all(counts == counts[0]):
            return OSCILLATION
    return OTHER


@dataclass
class EvalReport:
    """Per-episode outcomes of one task"""

    task: str
    mode: str
    episodes: pd.DataFrame

    @property
    def n_episodes(self) -> int:
        return len(self.episodes)

    @property
    def successes(self) -> int:
        return int(self.episodes["success"].sum()) if self.n_episodes else 0

    @property
    def success_rate(self) -> float:
        return self.successes / self.n_episodes if self.n_episodes else 0.0

    @property
    def mean_blocks_at_goal(self) -> float:
        return float(self.episodes["blocks_at_goal"].mean()) if self.n_episodes else 0.0

    def failure_counts(self) -> Dict[str, int]:
        tags = self.episodes.loc[~self.episodes["success"], "failure"]
        return {tag: int((tags == tag).sum()) for tag in FAILURE_TAGS}

    def summary(self) -> Dict[str, Any]:
        return {
            "task": self.task,
            "mode": self.mode,
            "episodes": self.n_episodes,
            "successes": self.successes,
            "success_rate": self.success_rate,
            "mean_blocks_at_goal": self.mean_blocks_at_goal,
            "failures": self.failure_counts(),
            "seeds": [int(s) for s in self.episodes["seed"]],
        }

    def save(self, path: Union[str, Path], table_path: Optional[Union[str, Path]] = None) -> Path:
        """Writes the JSON summary to `path` and the per-episode table next to it
        (csv unless `table_path` names another format)"""
        path = Path(path)
        json_save(self.summary(), path)
        table = Path(table_path) if table_path is not None else path.with_suffix(".csv")
        table_save(self.episodes, table)
        return table


def episode_seeds(seed: int, episodes: int) -> List[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(episodes)]


def evaluate(
    policy: Policy,
    task: Union[str, TaskSpec],
    episodes: int = 100,
    mode: str = "stochastic",
    seeds: Optional[Sequence[int]] = None,
    seed: int = 0,
    env_params: Optional[EnvParams] = None,
    callback: Optional[EvaluationCallback] = None,
    trace_dir: Optional[Union[str, Path]] = None,
) -> EvalReport:
    """Success rate of `policy` on `task`, one fresh seed per episode

    Args:
        policy (Policy): Object with act(observation, mode, rng)
        task (str | TaskSpec): Task label or spec
        episodes (int, optional): Number of episodes. Defaults to 100.
        mode (str, optional): stochastic | deterministic | explore. Defaults to "stochastic".
        seeds (Sequence[int], optional): Explicit episode seeds, overrides `episodes` and `seed`
        seed (int, optional): Root seed for the episode seeds. Defaults to 0.
        env_params (EnvParams, optional): World geometry
        callback (EvaluationCallback, optional): Called after each episode with (done, total, success)
        trace_dir (str | Path, optional): Write one step trace per episode into this directory

    Returns:
        EvalReport: per-episode table plus summary
    """
    logger = RelstackLogger()
    spec = parse_task(task) if isinstance(task, str) else task
    seeds = list(seeds) if seeds is not None else episode_seeds(seed, episodes)
    if trace_dir is not None:
        Path(trace_dir).mkdir(parents=True, exist_ok=True)
    env = BlockWorld(env_params)
    rows = []
    for i, s in enumerate(seeds):
        rng = np.random.default_rng(s)
        result = rollout(policy, spec.sample(rng, env.params), rng, mode, env, record_trace=trace_dir is not None)
        if trace_dir is not None:
            trace_save(result.records, Path(trace_dir) / f"{spec.label}_{i:04d}.jsonl")
        failure = "" if result.success else classify_failure(result.trace)
        rows.append(
            {
                "seed": int(s),
                "success": result.success,
                "blocks_at_goal": result.blocks_at_goal,
                "failure": failure,
            }
        )
        if callback is not None:
            callback(i + 1, len(seeds), result.success)
    table = pd.DataFrame(rows, columns=["seed", "success", "blocks_at_goal", "failure"])
    table["success"] = table["success"].astype(bool)
    report = EvalReport(spec.label, mode, table)
    logger.debug(f"Evaluate: {spec.label} {report.successes}/{report.n_episodes} successes")
    return report


def sweep(
    policy: Policy,
    tasks: Optional[Sequence[TaskSpec]] = None,
    episodes: int = 100,
    mode: str = "stochastic",
    seed: int = 0,
    env_params: Optional[EnvParams] = None,
    callback: Optional[Callable[[str, EvalReport], None]] = None,
) -> pd.DataFrame:
    """Evaluates one policy across the zero-shot task grid, one row per task"""
    tasks = list(tasks) if tasks is not None else zero_shot_tasks()
    children = np.random.SeedSequence(seed).spawn(len(tasks))
    rows = []
    for spec, child in zip(tasks, children):
        seeds = [int(s) for s in child.generate_state(episodes)]
        report = evaluate(policy, spec, mode=mode, seeds=seeds, env_params=env_params)
        row = {
            "task": spec.label,
            "episodes": report.n_episodes,
            "successes": report.successes,
            "success_rate": report.success_rate,
            "mean_blocks_at_goal": report.mean_blocks_at_goal,
        }
        row.update(report.failure_counts())
        rows.append(row)
        if callback is not None:
            callback(spec.label, report)
    return pd.DataFrame(rows)
