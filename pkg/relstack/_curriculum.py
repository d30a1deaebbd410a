"""Defines the Direct, Uniform and Sequential curricula and mastery-based stage advancement."""

from __future__ import annotations
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Deque, Dict, List, Optional, Union
import threading
import numpy as np
import pandas as pd

# ----
from relstack._checkpoint import table_save
from relstack._goals import TaskSpec
from relstack._logger import RelstackLogger

CURRICULUM_MODES = ("direct", "uniform", "sequential")


@dataclass(frozen=True)
class CurriculumStage:
    stage_id: int
    task: TaskSpec
    threshold: float = 0.85
    window: int = 100

    @property
    def label(self) -> str:
        return self.task.label

    @property
    def n_blocks(self) -> int:
        return self.task.n_blocks


def sequential_stages(
    threshold: float = 0.85, window: int = 100, max_tower: int = 6
) -> List[CurriculumStage]:
    """pick-and-place-1, pick-and-place-2, then towers of 2 up to max_tower"""
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"Mastery threshold must be in (0, 1], got {threshold}")
    tasks = [TaskSpec("pick-and-place", 1), TaskSpec("pick-and-place", 2)]
    tasks += [TaskSpec("tower", n) for n in range(2, max_tower + 1)]
    return [CurriculumStage(i, task, threshold, window) for i, task in enumerate(tasks)]


class MasteryTracker:
    """Ring of the last W episode outcomes"""

    def __init__(self, window: int = 100) -> None:
        self.window = window
        self.outcomes: Deque[bool] = deque(maxlen=window)

    def __len__(self) -> int:
        return len(self.outcomes)

    @property
    def full(self) -> bool:
        return len(self.outcomes) == self.window

    @property
    def success_rate(self) -> float:
        """successes / min(count, W), 0 when empty"""
        if not self.outcomes:
            return 0.0
        return sum(self.outcomes) / len(self.outcomes)

    def record(self, success: bool) -> None:
        self.outcomes.append(bool(success))

    def reset(self) -> None:
        self.outcomes.clear()


def should_advance(outcomes: List[bool], window: int, threshold: float) -> bool:
    """Advance iff the window is full and its success rate reaches the threshold"""
    return len(outcomes) >= window and sum(outcomes[-window:]) / window >= threshold


class Curriculum:
    """Task source for training rollouts.

    direct: always a 6-block tower; uniform: a tower of 1..6 blocks each episode;
    sequential: the current stage, advancing on mastery. Access is serialized
    so a stage change is atomic with respect to task requests.
    """

    def __init__(
        self,
        mode: str = "sequential",
        rng: Optional[np.random.Generator] = None,
        threshold: float = 0.85,
        window: int = 100,
        max_tower: int = 6,
    ) -> None:
        mode = mode.lower()
        if mode not in CURRICULUM_MODES:
            raise ValueError(f"Unknown curriculum mode '{mode}', expected one of {CURRICULUM_MODES}")
        self.mode = mode
        self.rng = rng if rng is not None else np.random.default_rng()
        self.max_tower = max_tower
        self.stages = sequential_stages(threshold, window, max_tower)
        self.stage_index = 0
        self.tracker = MasteryTracker(window)
        self.transitions: List[Dict[str, Any]] = []
        self.env_steps = 0
        self.logger = RelstackLogger()
        self._lock = threading.Lock()

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.mode} stage={self.stage.label} rate={self.tracker.success_rate:.2f}>"

    @property
    def stage(self) -> CurriculumStage:
        return self.stages[self.stage_index]

    @property
    def final(self) -> bool:
        return self.stage_index == len(self.stages) - 1

    def current_task(self) -> TaskSpec:
        with self._lock:
            if self.mode == "direct":
                return TaskSpec("tower", self.max_tower)
            if self.mode == "uniform":
                return TaskSpec("tower", int(self.rng.integers(1, self.max_tower + 1)))
            return self.stage.task

    def record_and_maybe_advance(self, success: bool, env_steps: Optional[int] = None) -> bool:
        """Records an outcome; advances one stage on mastery (sequential mode only)

        Returns:
            bool: True if the stage advanced
        """
        with self._lock:
            if env_steps is not None:
                self.env_steps = env_steps
            self.tracker.record(success)
            if self.mode != "sequential" or self.final:
                return False
            if not should_advance(list(self.tracker.outcomes), self.tracker.window, self.stage.threshold):
                return False
            self._advance(self.stage_index + 1, self.tracker.success_rate)
            return True

    def set_stage(self, stage_id: int) -> None:
        """Manual override"""
        if not 0 <= stage_id < len(self.stages):
            raise ValueError(f"Stage id must be in [0, {len(self.stages) - 1}], got {stage_id}")
        with self._lock:
            self._advance(stage_id, self.tracker.success_rate)

    def _advance(self, new_index: int, rate: float) -> None:
        old = self.stage
        self.stage_index = new_index
        self.tracker.reset()
        self.transitions.append(
            {
                "env_steps": self.env_steps,
                "old_stage": old.label,
                "new_stage": self.stage.label,
                "success_rate": rate,
            }
        )
        self.logger.info(
            f"Curriculum: {old.label} -> {self.stage.label} at step {self.env_steps} (rate {rate:.3f})"
        )

    def transition_log(self) -> pd.DataFrame:
        return pd.DataFrame(
            self.transitions, columns=["env_steps", "old_stage", "new_stage", "success_rate"]
        )

    def save_transition_log(self, path: Union[str, Path]):
        table_save(self.transition_log(), path)

    def state_dict(self) -> Dict[str, Any]:
        with self._lock:
            return {
                "mode": self.mode,
                "stage_index": self.stage_index,
                "outcomes": [bool(o) for o in self.tracker.outcomes],
                "transitions": list(self.transitions),
                "env_steps": self.env_steps,
                "rng": self.rng.bit_generator.state,
            }

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        with self._lock:
            self.mode = state["mode"]
            self.stage_index = int(state["stage_index"])
            self.tracker.reset()
            for o in state["outcomes"]:
                self.tracker.record(o)
            self.transitions = list(state["transitions"])
            self.env_steps = int(state["env_steps"])
            self.rng.bit_generator.state = state["rng"]
