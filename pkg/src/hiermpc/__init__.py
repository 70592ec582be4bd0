"""Hierarchical expert-fusion control: semantic weighting, state-aware fusion,
a learned latent world model, and sampling-based MPC on toy environments."""

from .core import (
    BackendUnavailable,
    InvalidInput,
    NumericalFailure,
    ParseFailure,
    RngStream,
    Simplex,
    clamp_action,
    softmax,
)
from .envs import DiscreteMdp, ToyEnv, Transition, bellman_operator, value_iteration
from .experts import ExpertDescriptor, ExpertLibrary, default_library, expert_action, expert_embedding, library_from_config
from .fusion import FusionConfig, StateEncoder, encode_state, fuse, reference_action, selection_probs
from .harness import ReplayBuffer, RunConfig, collect_episode, load_config, run_ablation, run_training
from .planner import Controller, PlannerConfig, PlanResult, evaluate_sequence, plan
from .semantic import SemanticPlannerConfig, TaskDescription, build_prompt, parse_response
from .worldmodel import (
    LossReport,
    Mlp,
    TrainBatch,
    WorldModel,
    WorldModelConfig,
    finite_diff_check,
    guidance_loss,
    load_checkpoint,
    save_checkpoint,
    td_target,
    train_step,
)

__version__ = "0.1.0"
