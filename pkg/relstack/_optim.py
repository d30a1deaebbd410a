"""Defines the Adam optimizer operating on Parameter objects."""

from __future__ import annotations
from typing import Dict, Iterable, List
import numpy as np

# ----
from relstack._logger import RelstackLogger
from relstack._tensor import Parameter
from relstack.consts import ADAM_BETA1, ADAM_BETA2, ADAM_EPS
from relstack.error import NonFiniteGradientError


def adam_step(
    params: Iterable[Parameter],
    learning_rate: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> List[Parameter]:
    """Applies one bias-corrected Adam update and clears the gradients.

    All gradients are checked before any parameter moves, so a NaN leaves
    every parameter and moment untouched.

    Args:
        params (Iterable[Parameter]): Parameters with populated `grad`
        learning_rate (float): Step size

    Raises:
        NonFiniteGradientError: A gradient holds NaN/Inf; the message names the parameter

    Returns:
        List[Parameter]: The updated parameters
    """
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(f"Non-finite gradient in parameter '{p.name}'")

    for p in params:
        g = p.grad
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1**p.step)
        v_hat = p.v / (1.0 - beta2**p.step)
        p.value = p.value - learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        p.zero_grad()
    return params


class Adam:
    """Adam optimizer bound to a fixed list of parameters"""

    def __init__(
        self,
        params: Iterable[Parameter],
        learning_rate: float,
        beta1: float = ADAM_BETA1,
        beta2: float = ADAM_BETA2,
        eps: float = ADAM_EPS,
    ) -> None:
        self.params = list(params)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.logger = RelstackLogger()

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {len(self.params)} params lr={self.learning_rate}>"

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        try:
            adam_step(self.params, self.learning_rate, self.beta1, self.beta2, self.eps)
        except NonFiniteGradientError as ex:
            self.logger.error(f"Adam: update aborted, {ex}")
            self.zero_grad()
            raise

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Moments and step counters keyed by parameter name"""
        state: Dict[str, np.ndarray] = {}
        for p in self.params:
            state[f"{p.name}.m"] = p.m
            state[f"{p.name}.v"] = p.v
            state[f"{p.name}.step"] = np.array([p.step], dtype=np.float64)
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for p in self.params:
            p.m = np.array(state[f"{p.name}.m"], dtype=np.float64).reshape(p.shape)
            p.v = np.array(state[f"{p.name}.v"], dtype=np.float64).reshape(p.shape)
            p.step = int(state[f"{p.name}.step"][0])
