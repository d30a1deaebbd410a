"""Defines the RunConfig object: every training, architecture and environment setting of a run."""

from __future__ import annotations
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Union
import hashlib

# ----
from relstack._agent import AgentConfig
from relstack._env import EnvParams
from relstack._renn import NetworkShape

# Keys that steer a run without changing what it computes
RUN_CONTROL_KEYS = ("output_dir", "total_steps", "checkpoint_interval")


@dataclass
class RunConfig:

    """RunConfig class
    Holds every setting of a training run. Defaults are the full-scale values of the `paper` preset.\n
    `workers` number of rollout workers (paper preset 35, desk preset 4).\n
    `replay_capacity` replay buffer size in transitions.\n
    `learning_rate`, `epsilon`, `gamma`, `batch_size`, `relabel_fraction`, `target_entropy` learner settings.\n
    `architecture` ( "renn" | "mlp" ), `rounds` message-passing rounds.\n
    `curriculum` ( "direct" | "uniform" | "sequential" ), `start_stage` manual initial stage.\n
    `eval_interval` training episodes between evaluation rounds of `eval_episodes` episodes.\n
    `serial` collapses collection and learning onto one thread for bit-exact reruns.
    """

    workers: int = 35
    replay_capacity: int = 100_000
    learning_rate: float = 3e-4
    epsilon: float = 0.1
    gamma: float = 0.98
    batch_size: int = 256
    relabel_fraction: float = 0.8
    target_entropy: float = 4.0
    tau: float = 0.005
    update_ratio: float = 1.0
    init_alpha: float = 1.0
    auto_entropy: bool = True
    bootstrap_on_timeout: bool = True
    warmup_transitions: int = 1_000
    architecture: str = "renn"
    embed_dim: int = 64
    rounds: int = 3
    readout_layers: int = 3
    readout_dim: int = 64
    mlp_width: int = 256
    mlp_depth: int = 4
    curriculum: str = "sequential"
    mastery_threshold: float = 0.85
    mastery_window: int = 100
    max_tower: int = 6
    start_stage: int = 0
    eval_interval: int = 50
    eval_episodes: int = 10
    penalty_when_far: bool = False
    total_steps: int = 40_000_000
    checkpoint_interval: int = 1_000_000
    serial: bool = False
    seed: int = 0
    output_dir: str = "runs/default"

    @classmethod
    def preset(cls, name: str) -> RunConfig:
        """`paper`: full-scale values. `desk`: 4 workers and budgets a desktop CPU finishes."""
        if name == "paper":
            return cls()
        if name == "desk":
            return cls(
                workers=4,
                update_ratio=0.25,
                warmup_transitions=2_000,
                total_steps=1_500_000,
                checkpoint_interval=100_000,
            )
        raise ValueError(f"Unknown preset '{name}', expected 'paper' or 'desk'")

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def copy(self) -> RunConfig:
        """Returns a new instance of RunConfig with the same values as this one"""
        return replace(self)

    def replace(self, **changes: Any) -> RunConfig:
        unknown = set(changes) - {f.name for f in fields(self)}
        if unknown:
            raise KeyError(f"Unknown config keys: {sorted(unknown)}")
        return replace(self, **changes)

    def validate(self) -> None:
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.architecture not in ("renn", "mlp"):
            raise ValueError(f"architecture must be 'renn' or 'mlp', got '{self.architecture}'")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not 0.0 <= self.relabel_fraction <= 1.0:
            raise ValueError("relabel_fraction must be in [0, 1]")
        self.agent_config().validate()

    def agent_config(self) -> AgentConfig:
        return AgentConfig(
            gamma=self.gamma,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            epsilon=self.epsilon,
            target_entropy=self.target_entropy,
            tau=self.tau,
            update_ratio=self.update_ratio,
            init_alpha=self.init_alpha,
            auto_entropy=self.auto_entropy,
            bootstrap_on_timeout=self.bootstrap_on_timeout,
        )

    def env_params(self) -> EnvParams:
        return EnvParams(penalty_when_far=self.penalty_when_far)

    def network_shape(self) -> NetworkShape:
        return NetworkShape(
            architecture=self.architecture,
            embed_dim=self.embed_dim,
            rounds=self.rounds,
            readout_layers=self.readout_layers,
            readout_dim=self.readout_dim,
            mlp_width=self.mlp_width,
            mlp_depth=self.mlp_depth,
        )

    def to_text(self) -> str:
        """`key = value` lines in field order"""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        """sha256 of the canonical text without run-control keys"""
        text = "".join(
            line + "\n"
            for line in self.to_text().splitlines()
            if line.split(" = ", 1)[0] not in RUN_CONTROL_KEYS
        )
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def save(self, path: Union[str, Path]):
        with open(path, "w", encoding="utf-8") as fp:
            fp.write(self.to_text())

    @classmethod
    def from_text(cls, text: str, base: Union[RunConfig, None] = None) -> RunConfig:
        """Parses `key = value` lines over `base` (defaults if None). `#` starts a comment.

        Raises:
            KeyError: Unknown key
            ValueError: Value does not parse as the field's type
        """
        base = base or cls()
        types = {f.name: type(getattr(base, f.name)) for f in fields(base)}
        changes: Dict[str, Any] = {}
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"Line {number}: expected 'key = value', got '{raw}'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in types:
                raise KeyError(f"Line {number}: unknown config key '{key}'")
            changes[key] = _parse_value(types[key], value, key)
        return base.replace(**changes)

    @classmethod
    def load(cls, path: Union[str, Path], base: Union[RunConfig, None] = None) -> RunConfig:
        with open(path, "r", encoding="utf-8") as fp:
            return cls.from_text(fp.read(), base)


def _parse_value(kind: type, value: str, key: str) -> Any:
    if kind is bool:
        lowered = value.lower()
        if lowered in ("true", "yes", "1", "on"):
            return True
        if lowered in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"'{key}' expects a boolean, got '{value}'")
    if kind is int:
        return int(float(value)) if "e" in value.lower() else int(value.replace("_", ""))
    if kind is float:
        return float(value)
    return value
