"""Finite-difference verification of the primitive catalog and of full networks."""

from __future__ import annotations
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple
import numpy as np
import pandas as pd

# ----
from relstack._logger import RelstackLogger
from relstack._renn import Module, NetInputs, NetworkShape, build_actor, build_twin_critic
from relstack._tensor import PRIMITIVES, Tape, Tensor, VjpFn, apply, register_primitive
from relstack.consts import ACTION_DIM, BLOCK_INPUT_DIM, EE_DIM
from relstack.error import UnsupportedPrimitiveError

STEP = 1e-6
TOLERANCE = 1e-4
# Five-point stencil step for elements whose central difference disagrees
REFINE_STEP = 1e-4


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    max_abs_error: float
    checked: int
    passed: bool


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """|a - b| / max(|a|, |b|, 1e-8) elementwise"""
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def _result(name: str, analytic: np.ndarray, numeric: np.ndarray, tolerance: float) -> GradCheckResult:
    analytic, numeric = np.ravel(analytic), np.ravel(numeric)
    if analytic.size == 0:
        return GradCheckResult(name, 0.0, 0.0, 0, True)
    abs_err = np.abs(analytic - numeric)
    rel_err = relative_error(analytic, numeric)
    return GradCheckResult(
        name, float(rel_err.max()), float(abs_err.max()), int(analytic.size), bool((rel_err < tolerance).all())
    )


def numeric_derivative(
    shifted: Callable[[float], float], analytic: float, step: float = STEP, tolerance: float = TOLERANCE
) -> float:
    """Central difference of `shifted(delta)` around delta = 0.

    When it disagrees with `analytic` the estimate is redone with a five-point
    stencil at REFINE_STEP, whose roundoff is two orders smaller. Either way
    the caller still applies the relative rule to the returned value.
    """
    numeric = (shifted(step) - shifted(-step)) / (2.0 * step)
    if relative_error(np.asarray(analytic), np.asarray(numeric)) < tolerance:
        return numeric
    h = REFINE_STEP
    near = shifted(h) - shifted(-h)
    far = shifted(2.0 * h) - shifted(-2.0 * h)
    return (8.0 * near - far) / (12.0 * h)


# ---- primitive cases: input arrays plus attributes, chosen away from kinks ----


def _away_from_zero(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    x = rng.uniform(0.1, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _distinct_pair(rng: np.random.Generator, shape: Tuple[int, ...]) -> Tuple[np.ndarray, np.ndarray]:
    a = rng.normal(size=shape)
    return a, a + _away_from_zero(rng, shape)


PrimitiveCase = Callable[[np.random.Generator], Tuple[List[np.ndarray], Dict[str, object]]]

PRIMITIVE_CASES: Dict[str, PrimitiveCase] = {
    "affine": lambda r: ([r.normal(size=(3, 4)), r.normal(size=(5, 4)), r.normal(size=5)], {}),
    "tanh": lambda r: ([r.normal(size=(3, 4))], {}),
    "leaky_relu": lambda r: ([_away_from_zero(r, (3, 4))], {}),
    "softmax": lambda r: ([r.normal(size=(2, 3, 4))], {"axis": -1}),
    "layer_norm": lambda r: ([r.normal(size=(2, 3, 6)), r.normal(size=6), r.normal(size=6)], {}),
    "add": lambda r: ([r.normal(size=(3, 4)), r.normal(size=4)], {}),
    "sub": lambda r: ([r.normal(size=(3, 4)), r.normal(size=(3, 4))], {}),
    "mul": lambda r: ([r.normal(size=(3, 4)), r.normal(size=(3, 4))], {}),
    "scale": lambda r: ([r.normal(size=(3, 4))], {"factor": -1.7}),
    "exp": lambda r: ([r.normal(size=(3, 4))], {}),
    "clamp": lambda r: ([r.uniform(-3.0, 3.0, size=(4, 5)).round(1) + 0.05], {"low": -1.0, "high": 1.0}),
    "minimum": lambda r: (list(_distinct_pair(r, (3, 4))), {}),
    "sum": lambda r: ([r.normal(size=(2, 3, 4))], {"axis": 1}),
    "mean": lambda r: ([r.normal(size=(2, 3, 4))], {"axis": -1}),
    "matvec": lambda r: ([r.normal(size=(2, 3, 3, 4)), r.normal(size=4)], {}),
    "bmm": lambda r: ([r.normal(size=(2, 3, 3)), r.normal(size=(2, 3, 4))], {}),
    "pairwise_add": lambda r: ([r.normal(size=(2, 3, 4)), r.normal(size=(2, 3, 4))], {}),
    "concat": lambda r: ([r.normal(size=(2, 3, 4)), r.normal(size=(2, 3, 2))], {}),
    "broadcast_vertices": lambda r: ([r.normal(size=(2, 4))], {"n": 3}),
    "squared_error": lambda r: ([r.normal(size=(5,)), r.normal(size=(5,))], {}),
    "gaussian_log_prob": lambda r: (
        [r.normal(size=(3, 4)), r.normal(size=(3, 4)), r.uniform(-1.0, 0.5, size=(3, 4))],
        {},
    ),
    "tanh_log_correction": lambda r: ([r.normal(scale=2.0, size=(3, 4))], {}),
}


def _projected(name: str, datas: Sequence[np.ndarray], attrs: Dict[str, object], weights: np.ndarray) -> float:
    out = apply(name, *datas, **attrs)
    return float(np.sum(out.data * weights))


def check_primitive(
    name: str,
    rng: Optional[np.random.Generator] = None,
    step: float = STEP,
    tolerance: float = TOLERANCE,
) -> GradCheckResult:
    """Compares the primitive's vjp against central differences of sum(W * f(x))
    for a fixed random projection W

    Raises:
        UnsupportedPrimitiveError: No primitive or no test case registered under `name`
    """
    if name not in PRIMITIVES or name not in PRIMITIVE_CASES:
        raise UnsupportedPrimitiveError(name)
    rng = rng if rng is not None else np.random.default_rng(0)
    datas, attrs = PRIMITIVE_CASES[name](rng)
    tape = Tape()
    leaves = [tape.variable(d) for d in datas]
    out = apply(name, *leaves, **attrs)
    weights = rng.normal(size=out.shape)
    loss = apply("sum", apply("mul", out, Tensor(weights)))
    analytic = tape.backward(loss, leaves)

    numeric = []
    for i, base in enumerate(datas):
        grad = np.zeros_like(base)
        for idx in np.ndindex(base.shape):

            def shifted(delta: float) -> float:
                moved = [d.copy() for d in datas]
                moved[i][idx] = base[idx] + delta
                return _projected(name, moved, attrs, weights)

            grad[idx] = numeric_derivative(shifted, analytic[i][idx], step, tolerance)
        numeric.append(grad)
    return _result(
        name,
        np.concatenate([np.ravel(a) for a in analytic]),
        np.concatenate([np.ravel(n) for n in numeric]),
        tolerance,
    )


@contextmanager
def swapped_vjp(name: str, vjp: VjpFn) -> Iterator[None]:
    """Temporarily replaces one primitive's vjp in the catalog"""
    original = PRIMITIVES[name]
    register_primitive(name, original.arity, original.forward, vjp)
    try:
        yield
    finally:
        PRIMITIVES[name] = original


# ---- networks ----


def random_inputs(rng: np.random.Generator, batch: int = 2, n_blocks: int = 3) -> NetInputs:
    return NetInputs(rng.normal(size=(batch, EE_DIM)), rng.normal(size=(batch, n_blocks, BLOCK_INPUT_DIM)))


def _sample_indices(
    shape: Tuple[int, ...], per_tensor: Optional[int], rng: np.random.Generator
) -> List[Tuple[int, ...]]:
    all_idx = list(np.ndindex(shape))
    if per_tensor is None or len(all_idx) <= per_tensor:
        return all_idx
    chosen = rng.choice(len(all_idx), size=per_tensor, replace=False)
    return [all_idx[i] for i in sorted(chosen)]


def check_network(
    name: str,
    network: Module,
    loss_fn: Callable[[Tape], Tensor],
    rng: np.random.Generator,
    per_tensor: Optional[int] = None,
    step: float = STEP,
    tolerance: float = TOLERANCE,
) -> GradCheckResult:
    """Parameter gradients of `loss_fn` against finite differences.

    Every element of every parameter tensor is checked unless `per_tensor`
    limits it to a random sample of that many elements per tensor.
    """
    params = network.parameters()
    for p in params:
        p.zero_grad()
    tape = Tape()
    tape.backward(loss_fn(tape))
    analytic, numeric = [], []
    for p in params:
        for idx in _sample_indices(p.shape, per_tensor, rng):
            base = p.value[idx]

            def shifted(delta: float) -> float:
                p.value[idx] = base + delta
                try:
                    return loss_fn(Tape(enabled=False)).item()
                finally:
                    p.value[idx] = base

            analytic.append(p.grad[idx])
            numeric.append(numeric_derivative(shifted, p.grad[idx], step, tolerance))
    for p in params:
        p.zero_grad()
    return _result(name, np.array(analytic), np.array(numeric), tolerance)


def _actor_loss(actor: Module, inputs: NetInputs, rng: np.random.Generator) -> Callable[[Tape], Tensor]:
    head = actor.forward(Tape(enabled=False), inputs)
    w_mean = rng.normal(size=head.mean.shape)
    w_std = rng.normal(size=head.log_std.shape)

    def loss(tape: Tape) -> Tensor:
        out = actor.forward(tape, inputs)
        a = apply("sum", apply("mul", out.mean, Tensor(w_mean)))
        b = apply("sum", apply("mul", out.log_std, Tensor(w_std)))
        return apply("add", a, b)

    return loss


def _critic_loss(critic: Module, inputs: NetInputs, action: np.ndarray, rng: np.random.Generator) -> Callable[[Tape], Tensor]:
    w = rng.normal(size=inputs.batch_size)

    def loss(tape: Tape) -> Tensor:
        q = critic.forward(tape, inputs, action)
        return apply("sum", apply("mul", q, Tensor(w)))

    return loss


def check_action_gradient(
    name: str, critic: Module, inputs: NetInputs, rng: np.random.Generator, step: float = STEP, tolerance: float = TOLERANCE
) -> GradCheckResult:
    """dQ/da against central differences"""
    action = rng.uniform(-0.9, 0.9, size=(inputs.batch_size, ACTION_DIM))
    tape = Tape()
    leaf = tape.variable(action)
    (analytic,) = tape.backward(apply("sum", critic.forward(tape, inputs, leaf)), [leaf])
    numeric = np.zeros_like(action)
    for idx in np.ndindex(action.shape):

        def shifted(delta: float) -> float:
            moved = action.copy()
            moved[idx] += delta
            return float(critic.forward(Tape(enabled=False), inputs, moved).data.sum())

        numeric[idx] = numeric_derivative(shifted, analytic[idx], step, tolerance)
    return _result(name, analytic, numeric, tolerance)


def network_checks(
    shapes: Optional[Sequence[NetworkShape]] = None,
    seed: int = 0,
    per_tensor: Optional[int] = None,
) -> List[GradCheckResult]:
    """Actor, both critics and critic action gradients for every network variant"""
    if shapes is None:
        shapes = [
            NetworkShape("renn", embed_dim=16, rounds=1, readout_layers=1, readout_dim=16),
            NetworkShape("renn", embed_dim=16, rounds=3, readout_layers=3, readout_dim=16),
            NetworkShape("mlp", mlp_width=16, mlp_depth=2),
        ]
    rng = np.random.default_rng(seed)
    results = []
    for shape in shapes:
        label = f"{shape.architecture}" + (f"-r{shape.rounds}" if shape.architecture == "renn" else "")
        actor = build_actor(shape, rng)
        twin = build_twin_critic(shape, rng)
        inputs = random_inputs(rng)
        action = rng.uniform(-0.9, 0.9, size=(inputs.batch_size, ACTION_DIM))
        results.append(check_network(f"{label}.actor", actor, _actor_loss(actor, inputs, rng), rng, per_tensor))
        for critic in (twin.q1, twin.q2):
            results.append(
                check_network(
                    f"{label}.{critic.name}", critic, _critic_loss(critic, inputs, action, rng), rng, per_tensor
                )
            )
        results.append(check_action_gradient(f"{label}.dq_da", twin.q1, inputs, rng))
    return results


def run_gradcheck(
    seed: int = 0,
    include_networks: bool = True,
    per_tensor: Optional[int] = None,
    callback: Optional[Callable[[GradCheckResult], None]] = None,
) -> pd.DataFrame:
    """Runs every primitive check and (optionally) the network checks

    Returns:
        pd.DataFrame: name, max_rel_error, max_abs_error, checked, passed
    """
    logger = RelstackLogger()
    rng = np.random.default_rng(seed)
    results = []
    for name in sorted(PRIMITIVES):
        if name not in PRIMITIVE_CASES:
            logger.warning(f"GradCheck: no test case for primitive '{name}', skipped")
            continue
        results.append(check_primitive(name, rng))
        if callback is not None:
            callback(results[-1])
    if include_networks:
        for result in network_checks(seed=seed, per_tensor=per_tensor):
            results.append(result)
            if callback is not None:
                callback(result)
    failed = [r.name for r in results if not r.passed]
    logger.debug(f"GradCheck: {len(results) - len(failed)}/{len(results)} passed {failed or ''}")
    return pd.DataFrame([r.__dict__ for r in results], columns=list(GradCheckResult.__dataclass_fields__))
