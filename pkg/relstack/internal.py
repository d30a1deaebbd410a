from ._tensor import (
    PRIMITIVES,
    Parameter,
    Primitive,
    Tape,
    Tensor,
    apply,
    primitive_op_set,
    register_primitive,
)
from ._optim import Adam, adam_step
from ._renn import (
    GraphEncoder,
    InputNormalizer,
    MessageRound,
    MLPActor,
    MLPCritic,
    Module,
    NetInputs,
    NetworkShape,
    ObsBatch,
    ReNNActor,
    ReNNCritic,
    TwinCritic,
    attention_heatmap,
    build_actor,
    build_twin_critic,
    model_summary,
)
from ._replay import EpisodeRecorder, StoredEpisode, TransitionBatch, TransitionGroup
from ._trace import EpisodeTrace, trace_records, trace_save, trace_table
from ._checkpoint import params_load, params_save, resolve_checkpoint, write_checkpoint_dir
from ._gradcheck import check_primitive, run_gradcheck, swapped_vjp
from ._env import EnvParams, Observation, compute_reward, is_success, settle
from ._goals import GoalSet, TaskSpec, parse_task, zero_shot_tasks
from ._agent import AgentConfig, PolicySnapshot
from ._trainer import TrainingCallback, run_ablation
from ._evaluate import EvalReport, EvaluationCallback, classify_failure, rollout
