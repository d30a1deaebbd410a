"""Defines the attention graph network (ReNN) actor and critic, the MLP baseline,
input normalization, attention export and the model summary.

Networks take normalized NetInputs and a Tape. A forward pass on a disabled
tape only evaluates, so a parameter snapshot can serve many threads at once.
"""

from __future__ import annotations
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union
import copy
import json
import numpy as np
import pandas as pd

# ----
from relstack._env import Observation
from relstack._tensor import (
    Parameter,
    Tape,
    Tensor,
    add,
    affine,
    bmm,
    broadcast_vertices,
    check_finite,
    clamp,
    concat,
    layer_norm,
    leaky_relu,
    matvec,
    pairwise_add,
    reduce_mean,
    reduce_sum,
    softmax,
    tanh,
)
from relstack.consts import (
    ACTION_DIM,
    BLOCK_FEATURE_DIM,
    BLOCK_INPUT_DIM,
    EE_DIM,
    GOAL_DIM,
    LOG_STD_MAX,
    LOG_STD_MIN,
    MAX_BLOCKS,
    STD_FLOOR,
)
from relstack.error import NoAttentionError, ShapeMismatchError

INPUT_CLIP = 5.0


@dataclass
class ObsBatch:
    """Raw observations stacked along a batch axis; every sample has the same N.

    ee: (B, 8), blocks: (B, N, 15), goals: (B, N, 3)
    """

    ee: np.ndarray
    blocks: np.ndarray
    goals: np.ndarray

    @classmethod
    def from_observation(cls, obs: Observation) -> ObsBatch:
        return cls(obs.ee[None], obs.blocks[None], obs.goals[None])

    @classmethod
    def from_observations(cls, observations: Sequence[Observation]) -> ObsBatch:
        return cls(
            np.stack([o.ee for o in observations]),
            np.stack([o.blocks for o in observations]),
            np.stack([o.goals for o in observations]),
        )

    @property
    def batch_size(self) -> int:
        return int(self.ee.shape[0])

    @property
    def n_blocks(self) -> int:
        return int(self.blocks.shape[1])

    def block_inputs(self) -> np.ndarray:
        """(B, N, 21): block features, goal, goal minus block position"""
        return np.concatenate(
            [self.blocks, self.goals, self.goals - self.blocks[..., :GOAL_DIM]], axis=-1
        )

    def validate(self) -> None:
        b, n = self.ee.shape[0], self.blocks.shape[1] if self.blocks.ndim == 3 else 0
        if n == 0:
            raise ShapeMismatchError("Observation batch has no blocks")
        if (
            self.ee.shape != (b, EE_DIM)
            or self.blocks.shape != (b, n, BLOCK_FEATURE_DIM)
            or self.goals.shape != (b, n, GOAL_DIM)
        ):
            raise ShapeMismatchError(
                f"Observation batch shapes ee={self.ee.shape} blocks={self.blocks.shape} goals={self.goals.shape}"
            )


@dataclass
class NetInputs:
    """Normalized network inputs: ee (B, 8), blocks (B, N, 21)"""

    ee: np.ndarray
    blocks: np.ndarray

    @property
    def n_blocks(self) -> int:
        return int(self.blocks.shape[1])

    @property
    def batch_size(self) -> int:
        return int(self.ee.shape[0])


class RunningStats:
    """Running mean/std over the rows of a (M, dim) stream"""

    def __init__(self, dim: int) -> None:
        self.count = 0.0
        self.total = np.zeros(dim)
        self.total_sq = np.zeros(dim)

    def update(self, rows: np.ndarray) -> None:
        rows = np.asarray(rows, dtype=np.float64).reshape(-1, self.total.shape[0])
        self.count += rows.shape[0]
        self.total = self.total + rows.sum(axis=0)
        self.total_sq = self.total_sq + (rows * rows).sum(axis=0)

    @property
    def mean(self) -> np.ndarray:
        if self.count == 0:
            return np.zeros_like(self.total)
        return self.total / self.count

    @property
    def std(self) -> np.ndarray:
        if self.count == 0:
            return np.ones_like(self.total)
        var = np.maximum(self.total_sq / self.count - self.mean**2, 0.0)
        return np.maximum(np.sqrt(var), STD_FLOOR)


class InputNormalizer:
    """Gripper statistics plus one set of per-block statistics shared across block slots"""

    def __init__(self, clip: float = INPUT_CLIP) -> None:
        self.clip = clip
        self.ee = RunningStats(EE_DIM)
        self.block = RunningStats(BLOCK_INPUT_DIM)

    def update(self, batch: ObsBatch) -> None:
        self.ee.update(batch.ee)
        self.block.update(batch.block_inputs().reshape(-1, BLOCK_INPUT_DIM))

    def normalize(self, batch: ObsBatch) -> NetInputs:
        batch.validate()
        ee = np.clip((batch.ee - self.ee.mean) / self.ee.std, -self.clip, self.clip)
        blocks = np.clip(
            (batch.block_inputs() - self.block.mean) / self.block.std, -self.clip, self.clip
        )
        return NetInputs(ee, blocks)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state: Dict[str, np.ndarray] = {}
        for key, stats in (("ee", self.ee), ("block", self.block)):
            state[f"{key}.count"] = np.array([stats.count])
            state[f"{key}.total"] = stats.total
            state[f"{key}.total_sq"] = stats.total_sq
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for key, stats in (("ee", self.ee), ("block", self.block)):
            stats.count = float(state[f"{key}.count"][0])
            stats.total = np.array(state[f"{key}.total"], dtype=np.float64)
            stats.total_sq = np.array(state[f"{key}.total_sq"], dtype=np.float64)

    def copy(self) -> InputNormalizer:
        return copy.deepcopy(self)


class Module:
    """Parameter container. Parameters are collected in attribute order."""

    name: str = ""

    def parameters(self) -> List[Parameter]:
        out: List[Parameter] = []
        for value in self.__dict__.values():
            items = value if isinstance(value, list) else [value]
            for item in items:
                if isinstance(item, Parameter):
                    out.append(item)
                elif isinstance(item, Module):
                    out.extend(item.parameters())
        return out

    def named_parameters(self) -> Dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self):
        return copy.deepcopy(self)

    def load_values(self, other: Module) -> None:
        """Copies parameter values from a module of the same architecture"""
        for mine, theirs in zip(self.parameters(), other.parameters()):
            if mine.shape != theirs.shape:
                raise ShapeMismatchError(f"{mine.name}: {mine.shape} vs {theirs.shape}")
            mine.value = theirs.value.copy()

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.name} params={self.n_params}>"


class Linear(Module):
    def __init__(self, name: str, in_dim: int, out_dim: int, rng: np.random.Generator) -> None:
        self.name = name
        self.W = Parameter.uniform(f"{name}.W", (out_dim, in_dim), in_dim, rng)
        self.b = Parameter.uniform(f"{name}.b", (out_dim,), in_dim, rng)

    def __call__(self, tape: Tape, x: Union[Tensor, np.ndarray]) -> Tensor:
        return affine(x, tape.param(self.W), tape.param(self.b))


class MessageRound(Module):
    """One attention message-passing round with its own weights"""

    def __init__(self, name: str, dim: int, rng: np.random.Generator) -> None:
        self.name = name
        self.query = Linear(f"{name}.q", dim, dim, rng)
        self.key = Linear(f"{name}.k", dim, dim, rng)
        self.message = Linear(f"{name}.m", dim, dim, rng)
        self.score = Parameter.uniform(f"{name}.V", (dim,), dim, rng)
        self.gain = Parameter(f"{name}.ln.gain", np.ones(dim))
        self.bias = Parameter(f"{name}.ln.bias", np.zeros(dim))

    def __call__(self, tape: Tape, v: Tensor) -> Tuple[Tensor, np.ndarray]:
        """Returns the next vertex set and the (B, N, N) attention, rows = receivers"""
        if v.shape[-1] != self.score.shape[0]:
            raise ShapeMismatchError(f"{self.name}: vertex dim {v.shape[-1]} vs {self.score.shape[0]}")
        q = self.query(tape, v)
        k = self.key(tape, v)
        m = self.message(tape, v)
        scores = matvec(tanh(pairwise_add(q, k)), tape.param(self.score))
        w = softmax(scores, axis=-1)
        out = layer_norm(add(v, bmm(w, m)), tape.param(self.gain), tape.param(self.bias))
        check_finite(out, self.name)
        return out, w.data


class MLPStack(Module):
    """Leaky-ReLU hidden layers"""

    def __init__(self, name: str, in_dim: int, width: int, depth: int, rng: np.random.Generator) -> None:
        self.name = name
        dims = [in_dim] + [width] * depth
        self.layers = [Linear(f"{name}.{i}", dims[i], dims[i + 1], rng) for i in range(depth)]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].W.shape[0]

    def __call__(self, tape: Tape, x: Union[Tensor, np.ndarray]) -> Tensor:
        for layer in self.layers:
            x = leaky_relu(layer(tape, x))
            check_finite(x, layer.name)
        return x


class GraphEncoder(Module):
    """Embedding, T message rounds and a mean-pool readout MLP"""

    def __init__(
        self,
        name: str,
        in_dim: int,
        rng: np.random.Generator,
        embed_dim: int = 64,
        rounds: int = 3,
        readout_layers: int = 3,
        readout_dim: int = 64,
    ) -> None:
        self.name = name
        self.in_dim = in_dim
        self.embed = Linear(f"{name}.embed", in_dim, embed_dim, rng)
        self.rounds = [MessageRound(f"{name}.round{t}", embed_dim, rng) for t in range(rounds)]
        self.head = MLPStack(f"{name}.readout", embed_dim, readout_dim, readout_layers, rng)

    @property
    def out_dim(self) -> int:
        return self.head.out_dim

    def build_vertices(self, tape: Tape, x: Union[Tensor, np.ndarray]) -> Tensor:
        if x.shape[-2] == 0:
            raise ShapeMismatchError(f"{self.name}: empty vertex set")
        if x.shape[-1] != self.in_dim:
            raise ShapeMismatchError(f"{self.name}: vertex input dim {x.shape[-1]}, expected {self.in_dim}")
        v = leaky_relu(self.embed(tape, x))
        check_finite(v, self.embed.name)
        return v

    def message_passing(self, tape: Tape, v: Tensor) -> Tuple[Tensor, List[np.ndarray]]:
        attention: List[np.ndarray] = []
        for round_ in self.rounds:
            v, w = round_(tape, v)
            attention.append(w)
        return v, attention

    def readout(self, tape: Tape, v: Tensor) -> Tensor:
        return self.head(tape, reduce_mean(v, axis=-2))

    def __call__(self, tape: Tape, x: Union[Tensor, np.ndarray]) -> Tuple[Tensor, List[np.ndarray]]:
        v, attention = self.message_passing(tape, self.build_vertices(tape, x))
        return self.readout(tape, v), attention


def vertex_inputs(inputs: NetInputs, action: Optional[Union[Tensor, np.ndarray]] = None) -> Tensor:
    """Per-vertex input: normalized block inputs with the gripper features broadcast
    to every vertex, plus the raw action for critics. (B, N, 29 [+4])"""
    n = inputs.n_blocks
    ee = np.repeat(inputs.ee[:, None, :], n, axis=1)
    x = Tensor(np.concatenate([inputs.blocks, ee], axis=-1))
    if action is None:
        return x
    return concat(x, broadcast_vertices(action, n))


def flat_inputs(inputs: NetInputs, action: Optional[Union[Tensor, np.ndarray]] = None) -> Tensor:
    """Fixed-size MLP input: gripper features then 9 zero-padded block slots (B, 197 [+4])"""
    b, n = inputs.batch_size, inputs.n_blocks
    if n > MAX_BLOCKS:
        raise ShapeMismatchError(f"MLP input supports at most {MAX_BLOCKS} blocks, got {n}")
    slots = np.zeros((b, MAX_BLOCKS, BLOCK_INPUT_DIM))
    slots[:, :n] = inputs.blocks
    x = Tensor(np.concatenate([inputs.ee, slots.reshape(b, -1)], axis=-1))
    if action is None:
        return x
    return concat(x, action)


class ActorOutput(NamedTuple):
    mean: Tensor
    log_std: Tensor
    attention: List[np.ndarray]


class _ActorHeads(Module):
    def __init__(self, name: str, in_dim: int, rng: np.random.Generator) -> None:
        self.name = name
        self.mean = Linear(f"{name}.mean", in_dim, ACTION_DIM, rng)
        self.log_std = Linear(f"{name}.log_std", in_dim, ACTION_DIM, rng)

    def __call__(self, tape: Tape, h: Tensor, attention: List[np.ndarray]) -> ActorOutput:
        mean = self.mean(tape, h)
        log_std = clamp(self.log_std(tape, h), LOG_STD_MIN, LOG_STD_MAX)
        check_finite(mean, self.mean.name)
        check_finite(log_std, self.log_std.name)
        return ActorOutput(mean, log_std, attention)


class ReNNActor(Module):
    """Graph attention actor: (mean, log_std) of the pre-squash Gaussian"""

    architecture = "renn"

    def __init__(
        self,
        rng: np.random.Generator,
        embed_dim: int = 64,
        rounds: int = 3,
        readout_layers: int = 3,
        readout_dim: int = 64,
        name: str = "actor",
    ) -> None:
        self.name = name
        self.encoder = GraphEncoder(
            name, BLOCK_INPUT_DIM + EE_DIM, rng, embed_dim, rounds, readout_layers, readout_dim
        )
        self.heads = _ActorHeads(name, self.encoder.out_dim, rng)

    def forward(self, tape: Tape, inputs: NetInputs) -> ActorOutput:
        h, attention = self.encoder(tape, vertex_inputs(inputs))
        return self.heads(tape, h, attention)


class ReNNCritic(Module):
    """Graph attention Q-network with the action appended to every vertex"""

    architecture = "renn"

    def __init__(
        self,
        rng: np.random.Generator,
        embed_dim: int = 64,
        rounds: int = 3,
        readout_layers: int = 3,
        readout_dim: int = 64,
        name: str = "critic",
    ) -> None:
        self.name = name
        self.encoder = GraphEncoder(
            name,
            BLOCK_INPUT_DIM + EE_DIM + ACTION_DIM,
            rng,
            embed_dim,
            rounds,
            readout_layers,
            readout_dim,
        )
        self.q = Linear(f"{name}.q", self.encoder.out_dim, 1, rng)

    def forward(self, tape: Tape, inputs: NetInputs, action: Union[Tensor, np.ndarray]) -> Tensor:
        h, _ = self.encoder(tape, vertex_inputs(inputs, action))
        q = reduce_sum(self.q(tape, h), axis=-1)
        check_finite(q, self.q.name)
        return q


class MLPActor(Module):
    """Flattened-input baseline actor, 4 x 256 leaky-ReLU layers"""

    architecture = "mlp"

    def __init__(self, rng: np.random.Generator, width: int = 256, depth: int = 4, name: str = "actor") -> None:
        self.name = name
        self.body = MLPStack(f"{name}.mlp", EE_DIM + MAX_BLOCKS * BLOCK_INPUT_DIM, width, depth, rng)
        self.heads = _ActorHeads(name, width, rng)

    def forward(self, tape: Tape, inputs: NetInputs) -> ActorOutput:
        return self.heads(tape, self.body(tape, flat_inputs(inputs)), [])


class MLPCritic(Module):
    architecture = "mlp"

    def __init__(self, rng: np.random.Generator, width: int = 256, depth: int = 4, name: str = "critic") -> None:
        self.name = name
        self.body = MLPStack(
            f"{name}.mlp", EE_DIM + MAX_BLOCKS * BLOCK_INPUT_DIM + ACTION_DIM, width, depth, rng
        )
        self.q = Linear(f"{name}.q", width, 1, rng)

    def forward(self, tape: Tape, inputs: NetInputs, action: Union[Tensor, np.ndarray]) -> Tensor:
        q = reduce_sum(self.q(tape, self.body(tape, flat_inputs(inputs, action))), axis=-1)
        check_finite(q, self.q.name)
        return q


class TwinCritic(Module):
    """Two independently initialised critics"""

    def __init__(self, q1: Module, q2: Module) -> None:
        self.name = "twin"
        self.q1 = q1
        self.q2 = q2

    @property
    def architecture(self) -> str:
        return getattr(self.q1, "architecture", "custom")

    def forward(
        self, tape: Tape, inputs: NetInputs, action: Union[Tensor, np.ndarray]
    ) -> Tuple[Tensor, Tensor]:
        return self.q1.forward(tape, inputs, action), self.q2.forward(tape, inputs, action)


@dataclass
class NetworkShape:
    """Architecture settings shared by actor and critics"""

    architecture: str = "renn"
    embed_dim: int = 64
    rounds: int = 3
    readout_layers: int = 3
    readout_dim: int = 64
    mlp_width: int = 256
    mlp_depth: int = 4


def build_actor(shape: NetworkShape, rng: np.random.Generator) -> Module:
    if shape.architecture == "renn":
        return ReNNActor(rng, shape.embed_dim, shape.rounds, shape.readout_layers, shape.readout_dim)
    if shape.architecture == "mlp":
        return MLPActor(rng, shape.mlp_width, shape.mlp_depth)
    raise ValueError(f"Unknown architecture '{shape.architecture}'")


def build_twin_critic(shape: NetworkShape, rng: np.random.Generator) -> TwinCritic:
    if shape.architecture == "renn":
        make = lambda name: ReNNCritic(
            rng, shape.embed_dim, shape.rounds, shape.readout_layers, shape.readout_dim, name
        )
    elif shape.architecture == "mlp":
        make = lambda name: MLPCritic(rng, shape.mlp_width, shape.mlp_depth, name)
    else:
        raise ValueError(f"Unknown architecture '{shape.architecture}'")
    return TwinCritic(make("critic1"), make("critic2"))


def model_summary(network: Module) -> pd.DataFrame:
    """One row per parameter tensor: name, shape, count. `attrs["total"]` holds the parameter count."""
    rows = [{"name": p.name, "shape": str(p.shape), "count": p.size} for p in network.parameters()]
    summary = pd.DataFrame(rows, columns=["name", "shape", "count"])
    summary.attrs["total"] = int(summary["count"].sum())
    return summary


def attention_heatmap(actor: Module, normalizer: InputNormalizer, observation: Observation) -> np.ndarray:
    """Final-round (N, N) attention of the actor, rows = receivers

    Raises:
        NoAttentionError: The actor has no message passing
    """
    out = actor.forward(Tape(enabled=False), normalizer.normalize(ObsBatch.from_observation(observation)))
    if not out.attention:
        raise NoAttentionError(f"{type(actor).__name__} has no attention")
    return out.attention[-1][0]


def attention_record(episode: int, step: int, rounds: List[np.ndarray]) -> Dict[str, Any]:
    """Export record for one step; `rounds` holds one (N, N) matrix per round"""
    n = int(rounds[0].shape[0])
    return {
        "episode": episode,
        "step": step,
        "n": n,
        "rounds": [np.asarray(w).reshape(-1).tolist() for w in rounds],
    }


def attention_save(records: Iterable[Dict[str, Any]], path: Union[str, Path]):
    with open(path, "w", encoding="utf-8") as fp:
        for record in records:
            fp.write(json.dumps(record) + "\n")


def attention_load(path: Union[str, Path]) -> List[Dict[str, Any]]:
    """Reads an attention export, reshaping each round back to (N, N)"""
    out = []
    with open(path, "r", encoding="utf-8") as fp:
        for line in fp:
            if not line.strip():
                continue
            record = json.loads(line)
            n = record["n"]
            record["rounds"] = [np.array(w).reshape(n, n) for w in record["rounds"]]
            out.append(record)
    return out
