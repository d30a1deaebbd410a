"""Defines trajectory trace export/import and the EpisodeTrace summary used for failure analysis."""

from __future__ import annotations
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Union
import json
import numpy as np
import pandas as pd

PathLike = Union[str, Path]


def trace_save(records: Iterable[Dict[str, Any]], path: PathLike):
    """Writes step records as JSON lines, one object per step"""
    with open(path, "w", encoding="utf-8") as fp:
        for record in records:
            fp.write(json.dumps(record) + "\n")


def trace_records(path: PathLike) -> List[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as fp:
        return [json.loads(line) for line in fp if line.strip()]


def trace_table(records: List[Dict[str, Any]]) -> pd.DataFrame:
    """Flattens step records into a per-step table for inspection"""
    rows = []
    for r in records:
        gx, gy, gz = r["gripper"]["position"]
        rows.append(
            {
                "step": r["step"],
                "gripper_x": gx,
                "gripper_y": gy,
                "gripper_z": gz,
                "gap": r["gripper"]["gap"],
                "held": next((i for i, b in enumerate(r["blocks"]) if b["grasped"]), -1),
                "reward": r["reward"],
                "at_goal": int(sum(r["at_goal"])),
                "full_stack": bool(r["full_stack"]),
                "off_table": int(sum(r["off_table"])),
            }
        )
    return pd.DataFrame(rows)


@dataclass
class EpisodeTrace:
    """Per-step flags of one episode.

    gripper: (T, 3) gripper positions after each step
    at_goal: (T, N) per-block at-goal flags
    full_stack: (T,) every block at goal
    off_table: (T, N) per-block off-table flags
    """

    gripper: np.ndarray
    at_goal: np.ndarray
    full_stack: np.ndarray
    off_table: np.ndarray

    @property
    def length(self) -> int:
        return int(self.full_stack.shape[0])

    @property
    def success(self) -> bool:
        return bool(self.length > 0 and self.full_stack[-1])

    @classmethod
    def from_records(cls, records: List[Dict[str, Any]]) -> EpisodeTrace:
        return cls(
            gripper=np.array([r["gripper"]["position"] for r in records], dtype=np.float64),
            at_goal=np.array([r["at_goal"] for r in records], dtype=bool),
            full_stack=np.array([r["full_stack"] for r in records], dtype=bool),
            off_table=np.array([r["off_table"] for r in records], dtype=bool),
        )

    @classmethod
    def load(cls, path: PathLike) -> EpisodeTrace:
        return cls.from_records(trace_records(path))
