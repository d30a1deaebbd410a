"""Defines the goal-conditioned soft actor-critic learner and its policy snapshots."""

from __future__ import annotations
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union
import math
import numpy as np

# ----
from relstack._checkpoint import params_assign, params_load, params_save
from relstack._env import Observation
from relstack._logger import RelstackLogger
from relstack._optim import Adam
from relstack._renn import InputNormalizer, Module, ObsBatch, TwinCritic
from relstack._replay import TransitionBatch, TransitionGroup
from relstack._tensor import (
    Parameter,
    Tape,
    Tensor,
    add,
    exp,
    gaussian_log_prob,
    minimum,
    mul,
    reduce_mean,
    reduce_sum,
    scale,
    squared_error,
    sub,
    tanh,
    tanh_log_correction,
)
from relstack.consts import ACTION_DIM
from relstack.error import NonFiniteValueError, ShapeMismatchError

ACTION_MODES = ("explore", "stochastic", "deterministic")
ACTION_BOUND = 1.0 - 1e-12


@dataclass
class AgentConfig:
    """Learner hyperparameters"""

    gamma: float = 0.98
    batch_size: int = 256
    learning_rate: float = 3e-4
    epsilon: float = 0.1
    target_entropy: float = 4.0
    tau: float = 0.005
    update_ratio: float = 1.0
    init_alpha: float = 1.0
    auto_entropy: bool = True
    bootstrap_on_timeout: bool = True

    def validate(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0, 1], got {self.tau}")
        if self.auto_entropy and self.init_alpha <= 0:
            raise ValueError("auto_entropy needs init_alpha > 0")

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def copy(self) -> AgentConfig:
        return replace(self)


class SquashedGaussian:
    """tanh(u), u ~ N(mean, exp(log_std)^2), with the tanh log-det correction"""

    @staticmethod
    def rsample(mean: Tensor, log_std: Tensor, noise: np.ndarray) -> Tuple[Tensor, Tensor]:
        """Reparameterized sample and its log-density summed over action dims

        Returns:
            Tuple[Tensor, Tensor]: action (B, 4), log_prob (B,)
        """
        u = add(mean, mul(exp(log_std), noise))
        action = tanh(u)
        log_prob = reduce_sum(
            sub(gaussian_log_prob(u, mean, log_std), tanh_log_correction(u)), axis=-1
        )
        return action, log_prob

    @staticmethod
    def sample(mean: np.ndarray, log_std: np.ndarray, noise: np.ndarray) -> np.ndarray:
        return np.clip(np.tanh(mean + np.exp(log_std) * noise), -ACTION_BOUND, ACTION_BOUND)

    @staticmethod
    def log_prob(action: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
        """Elementwise log-density of squashed actions strictly inside (-1, 1)"""
        u = np.arctanh(action)
        z = (u - mean) * np.exp(-log_std)
        gauss = -0.5 * z * z - log_std - 0.5 * math.log(2.0 * math.pi)
        return gauss - np.log1p(-action * action)


def act(
    actor: Module,
    normalizer: InputNormalizer,
    observation: Observation,
    mode: str,
    rng: np.random.Generator,
    epsilon: float,
) -> np.ndarray:
    """Chooses an action: explore mixes in epsilon-uniform actions, stochastic
    samples the policy, deterministic returns tanh(mean)"""
    if mode not in ACTION_MODES:
        raise ValueError(f"Unknown action mode '{mode}', expected one of {ACTION_MODES}")
    if mode == "explore" and rng.random() < epsilon:
        return rng.uniform(-1.0, 1.0, size=ACTION_DIM)
    inputs = normalizer.normalize(ObsBatch.from_observation(observation))
    out = actor.forward(Tape(enabled=False), inputs)
    mean, log_std = out.mean.data[0], out.log_std.data[0]
    if mode == "deterministic":
        return np.clip(np.tanh(mean), -ACTION_BOUND, ACTION_BOUND)
    return SquashedGaussian.sample(mean, log_std, rng.standard_normal(ACTION_DIM))


@dataclass(frozen=True)
class PolicySnapshot:
    """Immutable, versioned copy of the actor and normalizer handed to rollout workers"""

    version: int
    actor: Module
    normalizer: InputNormalizer
    epsilon: float = 0.1

    def act(self, observation: Observation, mode: str, rng: np.random.Generator) -> np.ndarray:
        return act(self.actor, self.normalizer, observation, mode, rng, self.epsilon)

    def attention(self, observation: Observation) -> List[np.ndarray]:
        """(N, N) attention of every round for one observation, rows = receivers"""
        inputs = self.normalizer.normalize(ObsBatch.from_observation(observation))
        out = self.actor.forward(Tape(enabled=False), inputs)
        return [w[0] for w in out.attention]


class SACAgent:
    """Soft actor-critic over any actor/critic pair with the network forward signatures.

    The agent owns every Parameter; rollouts only see PolicySnapshot copies.
    """

    def __init__(
        self,
        actor: Module,
        critic: TwinCritic,
        config: Optional[AgentConfig] = None,
        rng: Optional[np.random.Generator] = None,
        normalizer: Optional[Any] = None,
    ) -> None:
        """SACAgent constructor

        Args:
            actor (Module): Network with forward(tape, inputs) -> ActorOutput
            critic (TwinCritic): Twin Q-networks, forward(tape, inputs, action) -> (q1, q2)
            config (AgentConfig, optional): Hyperparameters. Defaults to AgentConfig().
            rng (np.random.Generator, optional): Noise source for updates and exploration
            normalizer (InputNormalizer, optional): Observation normalizer. Defaults to a fresh one.
        """
        self.config = config or AgentConfig()
        self.config.validate()
        self.actor = actor
        self.critic = critic
        self.target = critic.copy()
        self.rng = rng if rng is not None else np.random.default_rng()
        self.normalizer = normalizer if normalizer is not None else InputNormalizer()
        init = self.config.init_alpha if self.config.init_alpha > 0 else 1.0
        self.log_alpha = Parameter("log_alpha", np.array([math.log(init)]))
        lr = self.config.learning_rate
        self.actor_opt = Adam(actor.parameters(), lr)
        self.critic_opt = Adam(critic.parameters(), lr)
        self.alpha_opt = Adam([self.log_alpha], lr)
        self.version = 0
        self.updates = 0
        self.logger = RelstackLogger()
        if self.config.target_entropy > 0:
            self.logger.warning(
                f"SACAgent: target entropy {self.config.target_entropy} is positive; "
                f"the conventional choice is -{ACTION_DIM}"
            )

    def __repr__(self) -> str:
        return f"<{type(self).__name__} v{self.version} updates={self.updates} alpha={self.alpha:.4g}>"

    @property
    def alpha(self) -> float:
        if not self.config.auto_entropy:
            return float(self.config.init_alpha)
        return float(np.exp(self.log_alpha.value[0]))

    def inputs(self, obs: ObsBatch):
        return self.normalizer.normalize(obs)

    def snapshot(self) -> PolicySnapshot:
        """Publishes a new immutable policy copy with the next version number"""
        self.version += 1
        return PolicySnapshot(self.version, self.actor.copy(), self.normalizer.copy(), self.config.epsilon)

    def select_action(self, observation: Observation, mode: str = "explore") -> np.ndarray:
        return act(self.actor, self.normalizer, observation, mode, self.rng, self.config.epsilon)

    def critic_targets(self, group: TransitionGroup, noise: np.ndarray) -> np.ndarray:
        """y = r + gamma * (1 - done_mask) * (min target Q(s', a') - alpha * log pi(a'|s'))

        Pure in (group, parameters, noise).
        """
        off = Tape(enabled=False)
        next_in = self.inputs(group.next_obs)
        out = self.actor.forward(off, next_in)
        next_action, next_logp = SquashedGaussian.rsample(out.mean, out.log_std, noise)
        q1, q2 = self.target.forward(off, next_in, next_action)
        soft = np.minimum(q1.data, q2.data) - self.alpha * next_logp.data
        mask = np.zeros_like(group.dones) if self.config.bootstrap_on_timeout else group.dones
        return group.rewards + self.config.gamma * (1.0 - mask) * soft

    def _noise(self, group: TransitionGroup) -> np.ndarray:
        return self.rng.standard_normal((group.size, ACTION_DIM))

    def critic_update(self, batch: TransitionBatch) -> float:
        """One gradient step of both critics toward the shared soft Bellman target"""
        total = batch.size
        tape = Tape()
        loss: Optional[Tensor] = None
        for n in sorted(batch.groups):
            group = batch.groups[n]
            group.validate()
            y = Tensor(self.critic_targets(group, self._noise(group)))
            q1, q2 = self.critic.forward(tape, self.inputs(group.obs), group.actions)
            term = scale(add(squared_error(q1, y), squared_error(q2, y)), group.size / total)
            loss = term if loss is None else add(loss, term)
        if loss is None:
            raise ShapeMismatchError("Empty transition batch")
        tape.backward(loss)
        self.critic_opt.step()
        return loss.item()

    def actor_update(self, batch: TransitionBatch) -> Tuple[float, float]:
        """Minimizes E[alpha * log pi(a|s) - min Q(s, a)] with reparameterized actions.

        Critic parameters are frozen on the tape; gradients reach them only as constants.

        Returns:
            Tuple[float, float]: actor loss, mean log pi of the sampled actions
        """
        total = batch.size
        tape = Tape(frozen=self.critic.parameters())
        loss: Optional[Tensor] = None
        logp_sum = 0.0
        for n in sorted(batch.groups):
            group = batch.groups[n]
            inputs = self.inputs(group.obs)
            out = self.actor.forward(tape, inputs)
            action, logp = SquashedGaussian.rsample(out.mean, out.log_std, self._noise(group))
            q1, q2 = self.critic.forward(tape, inputs, action)
            term = reduce_mean(sub(scale(logp, self.alpha), minimum(q1, q2)))
            term = scale(term, group.size / total)
            loss = term if loss is None else add(loss, term)
            logp_sum += float(logp.data.sum())
        if loss is None:
            raise ShapeMismatchError("Empty transition batch")
        tape.backward(loss)
        self.actor_opt.step()
        return loss.item(), logp_sum / total

    def temperature_update(self, mean_log_prob: float) -> float:
        """Gradient step on log alpha minimizing -alpha * (log pi + target entropy)"""
        if not self.config.auto_entropy:
            return self.alpha
        tape = Tape()
        alpha = exp(tape.param(self.log_alpha))
        loss = reduce_sum(scale(alpha, -(mean_log_prob + self.config.target_entropy)))
        tape.backward(loss)
        self.alpha_opt.step()
        return self.alpha

    def soft_update_targets(self, tau: Optional[float] = None) -> None:
        tau = self.config.tau if tau is None else tau
        for target, live in zip(self.target.parameters(), self.critic.parameters()):
            target.value = (1.0 - tau) * target.value + tau * live.value

    def update(self, batch: TransitionBatch) -> Dict[str, float]:
        """Critic, actor and temperature steps followed by the target soft update"""
        critic_loss = self.critic_update(batch)
        actor_loss, mean_logp = self.actor_update(batch)
        alpha = self.temperature_update(mean_logp)
        self.soft_update_targets()
        self.updates += 1
        for p in self.parameters():
            if not np.all(np.isfinite(p.value)):
                raise NonFiniteValueError(f"Parameter '{p.name}' became non-finite")
        return {
            "critic_loss": critic_loss,
            "actor_loss": actor_loss,
            "alpha": alpha,
            "entropy": -mean_logp,
        }

    def parameters(self) -> List[Parameter]:
        return self.actor.parameters() + self.critic.parameters() + [self.log_alpha]

    def save(self, directory: Union[str, Path]):
        """Writes actor, critics, targets, log alpha, optimizer and normalizer files"""
        d = Path(directory)
        params_save(self.actor.parameters(), d / "actor.params")
        params_save(self.critic.parameters(), d / "critic.params")
        params_save(self.target.parameters(), d / "target.params")
        params_save([self.log_alpha], d / "alpha.params")
        optim: Dict[str, np.ndarray] = {}
        for opt in (self.actor_opt, self.critic_opt, self.alpha_opt):
            optim.update(opt.state_dict())
        params_save(optim, d / "optimizer.params")
        if isinstance(self.normalizer, InputNormalizer):
            params_save(self.normalizer.state_dict(), d / "normalizer.params")

    def load(self, directory: Union[str, Path], weights_only: bool = False):
        d = Path(directory)
        params_assign(self.actor.parameters(), params_load(d / "actor.params"))
        if isinstance(self.normalizer, InputNormalizer):
            self.normalizer.load_state_dict(params_load(d / "normalizer.params"))
        if weights_only:
            return
        params_assign(self.critic.parameters(), params_load(d / "critic.params"))
        params_assign(self.target.parameters(), params_load(d / "target.params"))
        params_assign([self.log_alpha], params_load(d / "alpha.params"))
        optim = params_load(d / "optimizer.params")
        for opt in (self.actor_opt, self.critic_opt, self.alpha_opt):
            opt.load_state_dict(optim)
