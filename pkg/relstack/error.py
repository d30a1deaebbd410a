"""Definitions of all custom exception classes."""


class UnsupportedPrimitiveError(KeyError):
    """Requested a primitive that is not in the differentiation catalog"""


class NonScalarLossError(ValueError):
    """Backward was called on a tensor that is not a scalar"""


class TapeConsumedError(RuntimeError):
    """Backward was already run on this tape"""


class NonFiniteValueError(ArithmeticError):
    """A forward pass produced NaN or Inf"""


class NonFiniteGradientError(ArithmeticError):
    """A parameter gradient contains NaN or Inf, the update was aborted"""


class ShapeMismatchError(ValueError):
    """Tensor, batch or observation shapes do not agree"""


class SpawnRegionError(RuntimeError):
    """Blocks could not be placed without overlap, spawn region too small"""


class SettleError(RuntimeError):
    """Block settling did not reach a fixpoint"""


class InvalidActionError(ValueError):
    """Action has the wrong shape or contains NaN"""


class EpisodeFinishedError(RuntimeError):
    """step() called on an episode that already ended"""


class GoalSamplingError(RuntimeError):
    """Goal sampler could not satisfy its geometric constraints"""


class UnknownTaskError(ValueError):
    """Task label could not be parsed"""


class InconsistentEpisodeError(ValueError):
    """Episode arrays disagree with each other (achieved-goal chain, lengths)"""


class InsufficientReplayError(RuntimeError):
    """Replay buffer holds fewer transitions than requested"""


class CheckpointFormatError(ValueError):
    """Parameter file or checkpoint bundle is malformed"""


class ConfigMismatchError(RuntimeError):
    """Resumed run does not reproduce the checkpoint's config hash"""


class ArchitectureMismatchError(ValueError):
    """Checkpoint architecture differs from the requested one"""


class NoAttentionError(TypeError):
    """Attention was requested from a network without message passing"""


class SuccessfulEpisodeError(ValueError):
    """Failure classification requested for a successful episode"""
