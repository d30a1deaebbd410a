"""This module contains the training orchestrator: rollout workers, the learner loop,
periodic evaluation, metrics rows and resumable checkpoints."""

from __future__ import annotations
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Protocol, Sequence, Union, runtime_checkable
import asyncio
import os
import time
import numpy as np
import pandas as pd

# ----
from relstack._agent import PolicySnapshot, SACAgent
from relstack._checkpoint import (
    json_load,
    json_save,
    resolve_checkpoint,
    table_load,
    write_checkpoint_dir,
)
from relstack._curriculum import Curriculum
from relstack._env import BlockWorld
from relstack._evaluate import Rollout, evaluate, rollout
from relstack._logger import RelstackLogger
from relstack._parameters import RunConfig
from relstack._renn import InputNormalizer, ObsBatch, build_actor, build_twin_critic
from relstack._replay import ReplayBuffer
from relstack.error import ArchitectureMismatchError, CheckpointFormatError, ConfigMismatchError

METRICS_COLUMNS = [
    "env_steps",
    "episodes",
    "updates",
    "stage",
    "task",
    "eval_success_rate",
    "eval_mean_blocks_at_goal",
    "trailing_success_rate",
    "critic_loss",
    "actor_loss",
    "alpha",
    "entropy",
    "policy_version",
    "wall_clock",
    "config_hash",
]


@runtime_checkable
class TrainingCallback(Protocol):
    def __call__(self, env_steps: int, total_steps: int, row: Optional[Dict[str, Any]]) -> None:
        ...


class MetricsLog:
    """Comma-separated metrics file written one complete row at a time"""

    def __init__(self, path: Union[str, Path]) -> None:
        self.path = Path(path)

    def append(self, row: Dict[str, Any]) -> None:
        write_header = not self.path.exists() or self.path.stat().st_size == 0
        frame = pd.DataFrame([row], columns=METRICS_COLUMNS)
        text = frame.to_csv(index=False, header=write_header)
        with open(self.path, "a", encoding="utf-8") as fp:
            fp.write(text)
            fp.flush()
            os.fsync(fp.fileno())

    def truncate(self, env_steps: int) -> int:
        """Drops rows logged after `env_steps`, returns how many were dropped"""
        if not self.path.exists():
            return 0
        lines = self.path.read_text(encoding="utf-8").splitlines(keepends=True)
        if not lines:
            return 0
        kept = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= env_steps]
        tmp = self.path.with_name(self.path.name + ".tmp")
        tmp.write_text("".join(kept), encoding="utf-8")
        os.replace(tmp, self.path)
        return len(lines) - len(kept)

    def read(self) -> pd.DataFrame:
        return table_load(self.path)


class WorkerState:
    """Counters shared by the rollout workers and the learner"""

    def __init__(self) -> None:
        self.in_progress: int = 0
        self.collected: int = 0
        self.failed: int = 0
        self.stop = asyncio.Event()

    def start_iteration(self) -> None:
        self.in_progress += 1

    def end_iteration(self) -> None:
        self.in_progress -= 1


class RolloutWorker:
    """Collects exploration episodes with the latest snapshot until told to stop.
    Finished episodes go to the bounded learner queue; a full queue blocks the worker."""

    def __init__(
        self,
        worker_id: int,
        trainer: Trainer,
        queue: asyncio.Queue,
        pool: ThreadPoolExecutor,
        state: WorkerState,
        rng: np.random.Generator,
    ) -> None:
        self.worker_id = worker_id
        self.trainer = trainer
        self.queue = queue
        self.pool = pool
        self.state = state
        self.rng = rng
        self.env = BlockWorld(trainer.env_params.copy())
        self.logger = RelstackLogger()

    async def run(self) -> None:
        loop = asyncio.get_running_loop()
        while not self.state.stop.is_set():
            snapshot = self.trainer.snapshot
            task = self.trainer.curriculum.current_task()
            goal_set = task.sample(self.rng, self.env.params)
            self.state.start_iteration()
            try:
                result: Rollout = await loop.run_in_executor(
                    self.pool, rollout, snapshot, goal_set, self.rng, "explore", self.env
                )
            except Exception as ex:
                self.state.failed += 1
                self.logger.error(f"RolloutWorker {self.worker_id}: episode failed | {ex!r}")
                raise
            finally:
                self.state.end_iteration()
            self.state.collected += 1
            await self.queue.put(result)
        self.logger.debug(f"RolloutWorker {self.worker_id}: stopped after {self.state.collected} episodes")


class Trainer:
    """Runs one training job described by a RunConfig.

    The learner is the only writer of parameters, normalizer statistics and
    curriculum progress. Rollouts see immutable PolicySnapshot copies.
    """

    def __init__(self, config: RunConfig, callback: Optional[TrainingCallback] = None) -> None:
        """Trainer constructor

        Args:
            config (RunConfig): Run settings
            callback (TrainingCallback, optional): Called after every ingested episode with
                (env_steps, total_steps, metrics row or None)
        """
        config.validate()
        self.config = config
        self.callback = callback
        self.logger = RelstackLogger()
        self.env_params = config.env_params()
        # ----
        root = np.random.SeedSequence(config.seed)
        init_seq, learner_seq, replay_seq, curriculum_seq, eval_seq, worker_seq = root.spawn(6)
        init_rng = np.random.default_rng(init_seq)
        shape = config.network_shape()
        self.agent = SACAgent(
            build_actor(shape, init_rng),
            build_twin_critic(shape, init_rng),
            config.agent_config(),
            np.random.default_rng(learner_seq),
            InputNormalizer(),
        )
        self.replay = ReplayBuffer(config.replay_capacity, self.env_params.delta, config.penalty_when_far)
        self.replay_rng = np.random.default_rng(replay_seq)
        self.curriculum = Curriculum(
            config.curriculum,
            np.random.default_rng(curriculum_seq),
            config.mastery_threshold,
            config.mastery_window,
            config.max_tower,
        )
        if config.start_stage:
            self.curriculum.set_stage(config.start_stage)
        self.eval_rng = np.random.default_rng(eval_seq)
        self.worker_rngs = [np.random.default_rng(s) for s in worker_seq.spawn(config.workers)]
        # ----
        self.env_steps = 0
        self.episodes = 0
        self.pending_updates = 0.0
        self.next_checkpoint = config.checkpoint_interval
        self.last_losses: Dict[str, float] = {}
        self.snapshot: PolicySnapshot = self.agent.snapshot()
        self.output_dir = Path(config.output_dir)
        self.checkpoint_root = self.output_dir / "checkpoints"
        self.metrics = MetricsLog(self.output_dir / "metrics.csv")
        self._started = time.monotonic()

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.env_steps}/{self.config.total_steps} steps, {self.curriculum!r}>"

    @property
    def finished(self) -> bool:
        return self.env_steps >= self.config.total_steps

    def train(self) -> Path:
        """Runs until total_steps environment steps, returns the final checkpoint directory"""
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.config.save(self.output_dir / "config.txt")
        self._started = time.monotonic()
        self.logger.info(
            f"Trainer: {'serial' if self.config.serial else f'{self.config.workers} workers'}, "
            f"{self.config.architecture} x{self.config.rounds}, curriculum {self.config.curriculum}, "
            f"from step {self.env_steps}"
        )
        if self.config.serial:
            self._run_serial()
        else:
            asyncio.run(self._run_parallel())
        return self.save_checkpoint()

    # ---- collection

    def _run_serial(self) -> None:
        env = BlockWorld(self.env_params.copy())
        rng = self.worker_rngs[0]
        while not self.finished:
            goal_set = self.curriculum.current_task().sample(rng, env.params)
            result = rollout(self.snapshot, goal_set, rng, "explore", env)
            self.ingest(result)

    async def _run_parallel(self) -> None:
        loop = asyncio.get_running_loop()
        queue: asyncio.Queue = asyncio.Queue(maxsize=self.config.workers)
        state = WorkerState()
        with ThreadPoolExecutor(max_workers=self.config.workers) as pool, ThreadPoolExecutor(
            max_workers=1
        ) as learner:
            tasks = [
                asyncio.ensure_future(RolloutWorker(i, self, queue, pool, state, rng).run())
                for i, rng in enumerate(self.worker_rngs)
            ]
            try:
                while not self.finished:
                    getter = asyncio.ensure_future(queue.get())
                    done, _ = await asyncio.wait(
                        [getter, *tasks], return_when=asyncio.FIRST_COMPLETED
                    )
                    if getter not in done:
                        getter.cancel()
                        for t in done:
                            t.result()
                        continue
                    await loop.run_in_executor(learner, self.ingest, getter.result())
            finally:
                state.stop.set()
                # queued and in-flight episodes are dropped; replay only grows through ingest
                for t in tasks:
                    t.cancel()
                results = await asyncio.gather(*tasks, return_exceptions=True)
        self.logger.debug(f"Trainer: dropped {queue.qsize()} queued episodes at shutdown")
        errors = [r for r in results if isinstance(r, Exception)]
        if errors and not self.finished:
            raise errors[0]
        self.logger.debug(f"Trainer: {state.collected} episodes collected, {state.failed} failed")

    # ---- learning

    def ingest(self, result: Rollout) -> None:
        """Learner side of one finished episode: replay, statistics, updates, snapshot,
        evaluation and checkpointing, in that order"""
        ep = result.episode
        self.replay.store_episode(ep)
        goals = np.broadcast_to(ep.goals, ep.achieved.shape)
        self.agent.normalizer.update(ObsBatch(ep.ee, ep.blocks, goals))
        self.env_steps += ep.length
        self.episodes += 1
        self.pending_updates += ep.length * self.config.update_ratio
        n_updates = int(self.pending_updates)
        self.pending_updates -= n_updates
        if len(self.replay) >= max(self.config.batch_size, self.config.warmup_transitions):
            for _ in range(n_updates):
                batch = self.replay.sample_batch(
                    self.config.batch_size, self.replay_rng, self.config.relabel_fraction
                )
                self.last_losses = self.agent.update(batch)
        self.snapshot = self.agent.snapshot()

        row = None
        if self.episodes % self.config.eval_interval == 0:
            row = self.evaluate_and_log()
        if self.env_steps >= self.next_checkpoint and not self.finished:
            self.save_checkpoint()
            while self.next_checkpoint <= self.env_steps:
                self.next_checkpoint += self.config.checkpoint_interval
        if self.callback is not None:
            self.callback(self.env_steps, self.config.total_steps, row)

    def evaluate_and_log(self) -> Dict[str, Any]:
        """Evaluates the current snapshot on the current task, feeds the outcomes
        to the curriculum and appends a metrics row"""
        task = self.curriculum.current_task()
        seeds = [int(s) for s in self.eval_rng.integers(0, 2**63 - 1, size=self.config.eval_episodes)]
        report = evaluate(self.snapshot, task, mode="stochastic", seeds=seeds, env_params=self.env_params)
        for success in report.episodes["success"]:
            self.curriculum.record_and_maybe_advance(bool(success), self.env_steps)
        row = {
            "env_steps": self.env_steps,
            "episodes": self.episodes,
            "updates": self.agent.updates,
            "stage": self.curriculum.stage_index,
            "task": task.label,
            "eval_success_rate": report.success_rate,
            "eval_mean_blocks_at_goal": report.mean_blocks_at_goal,
            "trailing_success_rate": self.curriculum.tracker.success_rate,
            "critic_loss": self.last_losses.get("critic_loss", float("nan")),
            "actor_loss": self.last_losses.get("actor_loss", float("nan")),
            "alpha": self.agent.alpha,
            "entropy": self.last_losses.get("entropy", float("nan")),
            "policy_version": self.snapshot.version,
            "wall_clock": 0.0 if self.config.serial else round(time.monotonic() - self._started, 3),
            "config_hash": self.config.config_hash(),
        }
        self.metrics.append(row)
        self.logger.debug(
            f"Trainer: step {self.env_steps} {task.label} eval {report.successes}/{report.n_episodes}"
        )
        return row

    # ---- checkpoints

    def save_checkpoint(self) -> Path:
        def writer(directory: Path) -> None:
            self.agent.save(directory)
            self.replay.save(directory)
            self.config.save(directory / "config.txt")
            json_save(self.curriculum.state_dict(), directory / "curriculum.json")
            json_save(
                {
                    "learner": self.agent.rng.bit_generator.state,
                    "replay": self.replay_rng.bit_generator.state,
                    "eval": self.eval_rng.bit_generator.state,
                    "workers": [rng.bit_generator.state for rng in self.worker_rngs],
                },
                directory / "rng.json",
            )
            json_save(
                {
                    "config_hash": self.config.config_hash(),
                    "env_steps": self.env_steps,
                    "episodes": self.episodes,
                    "updates": self.agent.updates,
                    "policy_version": self.snapshot.version,
                    "pending_updates": self.pending_updates,
                    "next_checkpoint": self.next_checkpoint,
                    "architecture": self.config.architecture,
                    "rounds": self.config.rounds,
                },
                directory / "manifest.json",
            )

        path = write_checkpoint_dir(self.checkpoint_root, self.env_steps, writer)
        self.curriculum.save_transition_log(self.output_dir / "curriculum.csv")
        self.logger.info(f"Trainer: checkpoint {path}")
        return path

    def resume(self, path: Optional[Union[str, Path]] = None) -> bool:
        """Restores the latest checkpoint under `path` (the run's output directory by default)

        Raises:
            ConfigMismatchError: The checkpoint was written by a different configuration

        Returns:
            bool: False if there was nothing to resume from
        """
        try:
            directory = resolve_checkpoint(path if path is not None else self.output_dir)
        except CheckpointFormatError:
            if path is not None:
                raise
            return False
        manifest = json_load(directory / "manifest.json")
        if manifest["config_hash"] != self.config.config_hash():
            raise ConfigMismatchError(
                f"Checkpoint {directory} was written with config {manifest['config_hash'][:12]}, "
                f"this run is {self.config.config_hash()[:12]}"
            )
        self.agent.load(directory)
        self.agent.updates = int(manifest["updates"])
        self.agent.version = int(manifest["policy_version"])
        self.replay.load(directory)
        self.curriculum.load_state_dict(json_load(directory / "curriculum.json"))
        states = json_load(directory / "rng.json")
        self.agent.rng.bit_generator.state = states["learner"]
        self.replay_rng.bit_generator.state = states["replay"]
        self.eval_rng.bit_generator.state = states["eval"]
        for rng, state in zip(self.worker_rngs, states["workers"]):
            rng.bit_generator.state = state
        self.env_steps = int(manifest["env_steps"])
        self.episodes = int(manifest["episodes"])
        self.pending_updates = float(manifest["pending_updates"])
        self.next_checkpoint = int(manifest["next_checkpoint"])
        self.snapshot = PolicySnapshot(
            self.agent.version, self.agent.actor.copy(), self.agent.normalizer.copy(), self.config.epsilon
        )
        dropped = self.metrics.truncate(self.env_steps)
        self.logger.info(
            f"Trainer: resumed from {directory} at step {self.env_steps} ({dropped} metrics rows dropped)"
        )
        return True


def load_policy(
    checkpoint: Union[str, Path],
    architecture: Optional[str] = None,
    rounds: Optional[int] = None,
) -> PolicySnapshot:
    """Rebuilds the actor and normalizer stored in a checkpoint

    Args:
        checkpoint (str | Path): Checkpoint, checkpoint root or run directory
        architecture (str, optional): Expected architecture, checked against the checkpoint
        rounds (int, optional): Expected message-passing rounds, checked against the checkpoint

    Raises:
        ArchitectureMismatchError: Expected architecture differs from the stored one

    Returns:
        PolicySnapshot: version taken from the checkpoint manifest
    """
    directory = resolve_checkpoint(checkpoint)
    config = RunConfig.load(directory / "config.txt")
    if architecture is not None and architecture != config.architecture:
        raise ArchitectureMismatchError(
            f"Checkpoint holds a '{config.architecture}' network, '{architecture}' was requested"
        )
    if rounds is not None and config.architecture == "renn" and rounds != config.rounds:
        raise ArchitectureMismatchError(
            f"Checkpoint network uses {config.rounds} message rounds, {rounds} were requested"
        )
    manifest = json_load(directory / "manifest.json") or {}
    agent = SACAgent(
        build_actor(config.network_shape(), np.random.default_rng(0)),
        build_twin_critic(config.network_shape(), np.random.default_rng(0)),
        config.agent_config(),
        normalizer=InputNormalizer(),
    )
    agent.load(directory, weights_only=True)
    return PolicySnapshot(
        int(manifest.get("policy_version", 0)), agent.actor, agent.normalizer, config.epsilon
    )


def run_ablation(
    config: RunConfig,
    rounds: Sequence[int] = (1, 3),
    callback: Optional[TrainingCallback] = None,
) -> pd.DataFrame:
    """Trains the same configuration once per message-round count into sibling
    directories `<output_dir>/rounds_<k>`; one summary row per run"""
    rows: List[Dict[str, Any]] = []
    base = Path(config.output_dir)
    for k in rounds:
        run = config.replace(rounds=int(k), output_dir=(base / f"rounds_{k}").as_posix())
        trainer = Trainer(run, callback)
        trainer.resume()
        checkpoint = trainer.train()
        metrics = trainer.metrics.read()
        last = metrics.iloc[-1] if len(metrics) else None
        rows.append(
            {
                "rounds": int(k),
                "env_steps": trainer.env_steps,
                "final_stage": trainer.curriculum.stage.label,
                "eval_success_rate": float(last["eval_success_rate"]) if last is not None else float("nan"),
                "checkpoint": checkpoint.as_posix(),
            }
        )
    return pd.DataFrame(rows)
