"""Defines the tape-based reverse-mode differentiation core.

Tensor: 64-bit array value, optionally recorded on a Tape

Tape: ordered record of executed primitives, runs the backward pass

Parameter: trainable value with gradient accumulator and optimizer state

PRIMITIVES: catalog of differentiable primitives (forward + vector-Jacobian product)
"""

from __future__ import annotations
from dataclasses import dataclass
import math
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union
import numpy as np

# ----
from relstack.consts import LAYER_NORM_EPS, LEAKY_SLOPE
from relstack.error import (
    NonFiniteValueError,
    NonScalarLossError,
    ShapeMismatchError,
    TapeConsumedError,
    UnsupportedPrimitiveError,
)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]
ForwardFn = Callable[..., Tuple[np.ndarray, Any]]
VjpFn = Callable[..., Tuple[Optional[np.ndarray], ...]]


@dataclass(frozen=True)
class Primitive:
    """A differentiable operation: forward returns (output, ctx), vjp maps the
    output cotangent to one cotangent per input."""

    name: str
    arity: int
    forward: ForwardFn
    vjp: VjpFn


PRIMITIVES: Dict[str, Primitive] = {}


def register_primitive(name: str, arity: int, forward: ForwardFn, vjp: VjpFn) -> Primitive:
    """Adds (or replaces) a primitive in the catalog"""
    prim = Primitive(name, arity, forward, vjp)
    PRIMITIVES[name] = prim
    return prim


def primitive_op_set() -> List[str]:
    """Returns the names of all supported primitives"""
    return sorted(PRIMITIVES)


class Parameter:
    """Trainable value with a same-shaped gradient accumulator and Adam state"""

    def __init__(self, name: str, value: ArrayLike) -> None:
        self.name = name
        self.value: np.ndarray = np.array(value, dtype=np.float64)
        self.grad: np.ndarray = np.zeros_like(self.value)
        self.m: np.ndarray = np.zeros_like(self.value)
        self.v: np.ndarray = np.zeros_like(self.value)
        self.step: int = 0

    @classmethod
    def uniform(
        cls, name: str, shape: Tuple[int, ...], fan_in: int, rng: np.random.Generator
    ) -> Parameter:
        """Uniform fan-in initialization in [-1/sqrt(fan_in), 1/sqrt(fan_in)]"""
        bound = 1.0 / math.sqrt(fan_in)
        return cls(name, rng.uniform(-bound, bound, size=shape))

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.name} {self.shape}>"


class Tensor:
    """Array value flowing through a forward pass. `tape` is None for constants."""

    __slots__ = ("data", "tape")

    def __init__(self, data: ArrayLike, tape: Optional[Tape] = None) -> None:
        self.data: np.ndarray = np.asarray(data, dtype=np.float64)
        self.tape = tape

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        kind = "tracked" if self.tape is not None else "const"
        return f"<{type(self).__name__} {self.shape} {kind}>"

    def __add__(self, other: Union[Tensor, ArrayLike]) -> Tensor:
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Union[Tensor, ArrayLike]) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Union[Tensor, ArrayLike]) -> Tensor:
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> Tensor:
        return self.__mul__(other)

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)


@dataclass
class _Record:
    primitive: Primitive
    inputs: Tuple[Tensor, ...]
    output: Tensor
    ctx: Any
    attrs: Dict[str, Any]


class Tape:
    """Computation tape. Records primitives in execution order and replays them
    in exact reverse order on backward()."""

    def __init__(self, enabled: bool = True, frozen: Iterable[Parameter] = ()) -> None:
        """Tape constructor

        Args:
            enabled (bool, optional): Record operations. Disabled tapes only evaluate. Defaults to True.
            frozen (Iterable[Parameter], optional): Parameters bound as constants on this tape.
        """
        self.enabled = enabled
        self._frozen = {id(p) for p in frozen}
        self._records: List[_Record] = []
        self._params: List[Tuple[Tensor, Parameter]] = []
        self._bound: Dict[int, Tensor] = {}
        self._consumed = False

    def __len__(self) -> int:
        return len(self._records)

    def __repr__(self) -> str:
        state = "consumed" if self._consumed else f"{len(self._records)} ops"
        return f"<{type(self).__name__} {state}>"

    @property
    def ops(self) -> List[str]:
        """Names of the recorded primitives in execution order"""
        return [r.primitive.name for r in self._records]

    def param(self, p: Parameter) -> Tensor:
        """Binds a Parameter to this tape. Every use shares one leaf so gradients accumulate."""
        if not self.enabled or id(p) in self._frozen:
            return Tensor(p.value)
        leaf = self._bound.get(id(p))
        if leaf is None:
            leaf = Tensor(p.value, self)
            self._bound[id(p)] = leaf
            self._params.append((leaf, p))
        return leaf

    def variable(self, value: ArrayLike) -> Tensor:
        """Differentiable leaf input"""
        return Tensor(value, self if self.enabled else None)

    @staticmethod
    def constant(value: ArrayLike) -> Tensor:
        return Tensor(value)

    def record(
        self,
        prim: Primitive,
        inputs: Tuple[Tensor, ...],
        out: np.ndarray,
        ctx: Any,
        attrs: Dict[str, Any],
    ) -> Tensor:
        if self._consumed:
            raise TapeConsumedError("Cannot record on a tape after backward()")
        output = Tensor(out, self)
        self._records.append(_Record(prim, inputs, output, ctx, attrs))
        return output

    def backward(self, loss: Tensor, wrt: Sequence[Tensor] = ()) -> List[np.ndarray]:
        """Runs the reverse pass from a scalar loss.

        Gradients are accumulated into every bound Parameter's `grad`.

        Args:
            loss (Tensor): Scalar produced by a forward pass recorded on this tape
            wrt (Sequence[Tensor], optional): Leaf tensors whose gradients are returned

        Raises:
            NonScalarLossError: loss has more than one element
            TapeConsumedError: backward already ran on this tape

        Returns:
            List[np.ndarray]: gradient for each tensor in `wrt`
        """
        if self._consumed:
            raise TapeConsumedError("backward() was already called on this tape")
        if loss.data.size != 1:
            raise NonScalarLossError(f"Loss must be a scalar, got shape {loss.shape}")
        if loss.tape is not self:
            raise ValueError("Loss was not recorded on this tape")
        self._consumed = True

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self._records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            in_grads = rec.primitive.vjp(
                g, rec.output.data, rec.ctx, *[t.data for t in rec.inputs], **rec.attrs
            )
            for t, ig in zip(rec.inputs, in_grads):
                if ig is None or t.tape is not self:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig

        for leaf, p in self._params:
            g = grads.get(id(leaf))
            if g is not None:
                p.grad += g
        return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


def _as_tensor(x: Union[Tensor, ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply(name: str, *inputs: Union[Tensor, ArrayLike], **attrs: Any) -> Tensor:
    """Evaluates a catalog primitive and records it on the inputs' tape

    Raises:
        UnsupportedPrimitiveError: `name` is not in the catalog
    """
    prim = PRIMITIVES.get(name)
    if prim is None:
        raise UnsupportedPrimitiveError(name)
    if len(inputs) != prim.arity:
        raise ShapeMismatchError(f"{name} expects {prim.arity} inputs, got {len(inputs)}")
    tensors = tuple(_as_tensor(x) for x in inputs)
    tape: Optional[Tape] = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError(f"{name}: inputs recorded on different tapes")
            tape = t.tape
    out, ctx = prim.forward(*[t.data for t in tensors], **attrs)
    if tape is None or not tape.enabled:
        return Tensor(out)
    return tape.record(prim, tensors, out, ctx, attrs)


def check_finite(t: Union[Tensor, np.ndarray], where: str) -> None:
    """Raises NonFiniteValueError naming `where` if the value has NaN/Inf"""
    data = t.data if isinstance(t, Tensor) else t
    if not np.all(np.isfinite(data)):
        raise NonFiniteValueError(f"{where} produced non-finite values")


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum-reduces `g` over the axes that were broadcast to reach g.shape"""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _flat2(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


# ---- primitive definitions ----


def _affine_fwd(x, W, b):
    if x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeMismatchError(f"affine: input {x.shape} vs weight {W.shape}, bias {b.shape}")
    return x @ W.T + b, None


def _affine_vjp(g, out, ctx, x, W, b):
    g2 = _flat2(g)
    return g @ W, g2.T @ _flat2(x), g2.sum(axis=0)


def _tanh_fwd(x):
    return np.tanh(x), None


def _tanh_vjp(g, out, ctx, x):
    return (g * (1.0 - out * out),)


def _leaky_fwd(x):
    return np.where(x > 0, x, LEAKY_SLOPE * x), None


def _leaky_vjp(g, out, ctx, x):
    return (g * np.where(x > 0, 1.0, LEAKY_SLOPE),)


def _softmax_fwd(x, axis=-1):
    shifted = np.exp(x - x.max(axis=axis, keepdims=True))
    return shifted / shifted.sum(axis=axis, keepdims=True), None


def _softmax_vjp(g, out, ctx, x, axis=-1):
    return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)


def _layer_norm_fwd(x, gain, bias):
    if x.shape[-1] != gain.shape[-1] or gain.shape != bias.shape:
        raise ShapeMismatchError(f"layer_norm: input {x.shape} vs gain {gain.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = (x - mu) * inv_std
    return xhat * gain + bias, (xhat, inv_std)


def _layer_norm_vjp(g, out, ctx, x, gain, bias):
    xhat, inv_std = ctx
    gxhat = g * gain
    gx = inv_std * (
        gxhat
        - gxhat.mean(axis=-1, keepdims=True)
        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return gx, _flat2(g * xhat).sum(axis=0), _flat2(g).sum(axis=0)


def _add_fwd(a, b):
    return a + b, None


def _add_vjp(g, out, ctx, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_fwd(a, b):
    return a - b, None


def _sub_vjp(g, out, ctx, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _mul_fwd(a, b):
    return a * b, None


def _mul_vjp(g, out, ctx, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _scale_fwd(x, factor=1.0):
    return x * factor, None


def _scale_vjp(g, out, ctx, x, factor=1.0):
    return (g * factor,)


def _exp_fwd(x):
    return np.exp(x), None


def _exp_vjp(g, out, ctx, x):
    return (g * out,)


def _clamp_fwd(x, low=-np.inf, high=np.inf):
    return np.clip(x, low, high), None


def _clamp_vjp(g, out, ctx, x, low=-np.inf, high=np.inf):
    return (g * ((x >= low) & (x <= high)),)


def _minimum_fwd(a, b):
    return np.minimum(a, b), None


def _minimum_vjp(g, out, ctx, a, b):
    take_a = a <= b
    return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)


def _sum_fwd(x, axis=None):
    return np.asarray(x.sum(axis=axis)), None


def _sum_vjp(g, out, ctx, x, axis=None):
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _mean_fwd(x, axis=None):
    return np.asarray(x.mean(axis=axis)), None


def _mean_vjp(g, out, ctx, x, axis=None):
    count = x.size if axis is None else x.shape[axis]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / count, x.shape).copy(),)


def _matvec_fwd(x, v):
    if v.ndim != 1 or x.shape[-1] != v.shape[0]:
        raise ShapeMismatchError(f"matvec: {x.shape} against vector {v.shape}")
    return x @ v, None


def _matvec_vjp(g, out, ctx, x, v):
    return g[..., None] * v, (g[..., None] * x).reshape(-1, v.shape[0]).sum(axis=0)


def _bmm_fwd(a, b):
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"bmm: {a.shape} @ {b.shape}")
    return a @ b, None


def _bmm_vjp(g, out, ctx, a, b):
    return g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g


def _pairwise_add_fwd(q, k):
    if q.shape != k.shape:
        raise ShapeMismatchError(f"pairwise_add: {q.shape} vs {k.shape}")
    return q[..., :, None, :] + k[..., None, :, :], None


def _pairwise_add_vjp(g, out, ctx, q, k):
    return g.sum(axis=-2), g.sum(axis=-3)


def _concat_fwd(a, b):
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeMismatchError(f"concat: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=-1), a.shape[-1]


def _concat_vjp(g, out, ctx, a, b):
    return g[..., :ctx], g[..., ctx:]


def _broadcast_vertices_fwd(x, n=1):
    return np.repeat(x[..., None, :], n, axis=-2), None


def _broadcast_vertices_vjp(g, out, ctx, x, n=1):
    return (g.sum(axis=-2),)


def _squared_error_fwd(pred, target):
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"squared_error: {pred.shape} vs {target.shape}")
    diff = pred - target
    return np.asarray((diff * diff).mean()), diff


def _squared_error_vjp(g, out, ctx, pred, target):
    gp = g * 2.0 * ctx / ctx.size
    return gp, -gp


_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _gaussian_log_prob_fwd(x, mean, log_std):
    z = (x - mean) * np.exp(-log_std)
    return -0.5 * z * z - log_std - _HALF_LOG_2PI, z


def _gaussian_log_prob_vjp(g, out, ctx, x, mean, log_std):
    z = ctx
    gx = -g * z * np.exp(-log_std)
    return (
        _unbroadcast(gx, x.shape),
        _unbroadcast(-gx, mean.shape),
        _unbroadcast(g * (z * z - 1.0), log_std.shape),
    )


_LOG2 = math.log(2.0)


def _tanh_correction_fwd(u):
    # log(1 - tanh(u)^2), stable for large |u|
    return 2.0 * (_LOG2 - u - np.logaddexp(0.0, -2.0 * u)), None


def _tanh_correction_vjp(g, out, ctx, u):
    return (-2.0 * g * np.tanh(u),)


register_primitive("affine", 3, _affine_fwd, _affine_vjp)
register_primitive("tanh", 1, _tanh_fwd, _tanh_vjp)
register_primitive("leaky_relu", 1, _leaky_fwd, _leaky_vjp)
register_primitive("softmax", 1, _softmax_fwd, _softmax_vjp)
register_primitive("layer_norm", 3, _layer_norm_fwd, _layer_norm_vjp)
register_primitive("add", 2, _add_fwd, _add_vjp)
register_primitive("sub", 2, _sub_fwd, _sub_vjp)
register_primitive("mul", 2, _mul_fwd, _mul_vjp)
register_primitive("scale", 1, _scale_fwd, _scale_vjp)
register_primitive("exp", 1, _exp_fwd, _exp_vjp)
register_primitive("clamp", 1, _clamp_fwd, _clamp_vjp)
register_primitive("minimum", 2, _minimum_fwd, _minimum_vjp)
register_primitive("sum", 1, _sum_fwd, _sum_vjp)
register_primitive("mean", 1, _mean_fwd, _mean_vjp)
register_primitive("matvec", 2, _matvec_fwd, _matvec_vjp)
register_primitive("bmm", 2, _bmm_fwd, _bmm_vjp)
register_primitive("pairwise_add", 2, _pairwise_add_fwd, _pairwise_add_vjp)
register_primitive("concat", 2, _concat_fwd, _concat_vjp)
register_primitive("broadcast_vertices", 1, _broadcast_vertices_fwd, _broadcast_vertices_vjp)
register_primitive("squared_error", 2, _squared_error_fwd, _squared_error_vjp)
register_primitive("gaussian_log_prob", 3, _gaussian_log_prob_fwd, _gaussian_log_prob_vjp)
register_primitive("tanh_log_correction", 1, _tanh_correction_fwd, _tanh_correction_vjp)


# ---- public op functions ----

TensorLike = Union[Tensor, ArrayLike]


def affine(x: TensorLike, W: TensorLike, b: TensorLike) -> Tensor:
    """W·x + b over the last axis of x"""
    return apply("affine", x, W, b)


def tanh(x: TensorLike) -> Tensor:
    return apply("tanh", x)


def leaky_relu(x: TensorLike) -> Tensor:
    return apply("leaky_relu", x)


def softmax(x: TensorLike, axis: int = -1) -> Tensor:
    return apply("softmax", x, axis=axis)


def layer_norm(x: TensorLike, gain: TensorLike, bias: TensorLike) -> Tensor:
    return apply("layer_norm", x, gain, bias)


def add(a: TensorLike, b: TensorLike) -> Tensor:
    return apply("add", a, b)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    return apply("sub", a, b)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    return apply("mul", a, b)


def scale(x: TensorLike, factor: float) -> Tensor:
    return apply("scale", x, factor=float(factor))


def exp(x: TensorLike) -> Tensor:
    return apply("exp", x)


def clamp(x: TensorLike, low: float, high: float) -> Tensor:
    return apply("clamp", x, low=float(low), high=float(high))


def minimum(a: TensorLike, b: TensorLike) -> Tensor:
    return apply("minimum", a, b)


def reduce_sum(x: TensorLike, axis: Optional[int] = None) -> Tensor:
    return apply("sum", x, axis=axis)


def reduce_mean(x: TensorLike, axis: Optional[int] = None) -> Tensor:
    return apply("mean", x, axis=axis)


def matvec(x: TensorLike, v: TensorLike) -> Tensor:
    """Contracts the last axis of x with vector v"""
    return apply("matvec", x, v)


def bmm(a: TensorLike, b: TensorLike) -> Tensor:
    return apply("bmm", a, b)


def pairwise_add(q: TensorLike, k: TensorLike) -> Tensor:
    """out[..., i, j, :] = q[..., i, :] + k[..., j, :]"""
    return apply("pairwise_add", q, k)


def concat(a: TensorLike, b: TensorLike) -> Tensor:
    return apply("concat", a, b)


def broadcast_vertices(x: TensorLike, n: int) -> Tensor:
    """Copies a (..., d) vector onto n vertices: (..., n, d)"""
    return apply("broadcast_vertices", x, n=int(n))


def squared_error(pred: TensorLike, target: TensorLike) -> Tensor:
    """Mean squared error, scalar"""
    return apply("squared_error", pred, target)


def gaussian_log_prob(x: TensorLike, mean: TensorLike, log_std: TensorLike) -> Tensor:
    """Elementwise log N(x; mean, exp(log_std)^2)"""
    return apply("gaussian_log_prob", x, mean, log_std)


def tanh_log_correction(u: TensorLike) -> Tensor:
    """Elementwise log(1 - tanh(u)^2), the log-det of the tanh squashing"""
    return apply("tanh_log_correction", u)
