"""

## High level interfaces

RunConfig: Every setting of a training run, with "paper" and "desk" presets

Trainer: Rollout workers, learner, evaluation, metrics and checkpoints of one run

load_policy: Deterministic policy from a run directory or checkpoint

BlockWorld: Kinematic tabletop with a parallel gripper and N blocks

SACAgent: Soft actor-critic learner over a graph-attention or MLP network

ReplayBuffer: Episodic replay with hindsight goal relabeling

Curriculum: Direct, uniform and sequential task schedules

evaluate / sweep: Success rates and failure classification of a policy

RelstackLogger: Custom logger you can connect to your own logging

## Internal interfaces

.internal.Tape, .internal.Tensor, .internal.Parameter: reverse-mode differentiation

.internal.ReNNActor, .internal.ReNNCritic, .internal.MLPActor, .internal.MLPCritic: networks

.internal.run_gradcheck: finite-difference verification

.internal.rollout, .internal.classify_failure, .internal.EvalReport: single episodes and their reports

"""
__version__ = "1.0.0"

from ._parameters import RunConfig
from ._trainer import Trainer, load_policy
from ._env import BlockWorld
from ._agent import SACAgent
from ._replay import ReplayBuffer
from ._curriculum import Curriculum
from ._evaluate import evaluate, sweep
from ._logger import RelstackLogger
