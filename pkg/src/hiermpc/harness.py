"""Training harness: replay buffer, two-stage training loop, evaluation,
ablation runner, and metrics.

Stage 1 (the first quarter of the step budget) acts with the fused expert
reference action only (planner iterations disabled) so the world model sees
on-distribution data; stage 2 enables full sampling-based planning.  Runs are
deterministic given (config, seed): metrics streams from two identical runs
are byte-for-byte equal.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .core import InvalidInput, NumericalFailure, RngStream, Simplex
from .envs import ToyEnv, ACTION_DIMS, ENV_KINDS, OBS_DIMS, Transition
from .experts import ExpertLibrary, default_library
from .fusion import FusionConfig, StateEncoder
from .planner import Controller, PlannerConfig
from .semantic import SemanticPlannerConfig, TaskDescription, plan as semantic_plan
from .worldmodel import TrainBatch, WorldModel, WorldModelConfig, train_step

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
ABLATION_VARIANTS = ("full", "uniform_weights", "alpha_one", "lambda_zero")

DEFAULT_TASKS = {
    "stand": "stand still and damp out all motion",
    "walk": "walk forward at a steady moderate speed",
    "run": "run fast at a high speed",
    "reach": "reach the goal position and stay there",
    "door": "open the door: reach the handle position, hold steady at it, then turn the handle",
}


class ReplayBuffer:
    """Ring buffer of transitions with their aligned reference actions."""

    def __init__(self, capacity: int, obs_dim: int, action_dim: int):
        if capacity < 1:
            raise InvalidInput("capacity must be >= 1")
        self.capacity = capacity
        self.o = np.zeros((capacity, obs_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.o_next = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self.a_ref = np.zeros((capacity, action_dim))
        self.size = 0
        self._head = 0

    def push(self, tr: Transition, a_ref) -> None:
        i = self._head
        self.o[i] = tr.o
        self.a[i] = tr.a
        self.r[i] = tr.r
        self.o_next[i] = tr.o_next
        self.done[i] = float(tr.done)
        self.a_ref[i] = a_ref
        self._head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, gen: np.random.Generator) -> TrainBatch:
        """Uniform sample without replacement within the batch."""
        if self.size < 1:
            raise InvalidInput("cannot sample from an empty buffer")
        n = min(batch_size, self.size)
        idx = gen.choice(self.size, size=n, replace=False)
        return TrainBatch(
            o=self.o[idx].copy(),
            a=self.a[idx].copy(),
            r=self.r[idx].copy(),
            o_next=self.o_next[idx].copy(),
            done=self.done[idx].copy(),
            a_ref=self.a_ref[idx].copy(),
        )


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 256
    buffer_capacity: int = 20000
    updates_per_step: int = 1

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.buffer_capacity < 1:
            raise InvalidInput("invalid training hyperparameters")


@dataclass(frozen=True)
class RunConfig:
    env: str
    task: TaskDescription
    total_env_steps: int = 2000
    eval_every: int = 500
    eval_episodes: int = 1
    episode_steps: int = 200
    stage1_fraction: float = 0.25
    seeds: tuple = (0,)
    ablation: str = "full"
    semantic: SemanticPlannerConfig = field(default_factory=SemanticPlannerConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    encoder_mode: str = "auto"
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    gamma: float = 0.99
    lambda_guidance: float = 0.05
    latent_dim: int = 16
    hidden: tuple = (32, 32)
    n_quantiles: int = 5
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.env not in ENV_KINDS:
            raise InvalidInput(f"env: unknown kind {self.env!r}")
        if self.ablation not in ABLATION_VARIANTS:
            raise InvalidInput(f"ablation: unknown variant {self.ablation!r}")
        if self.total_env_steps < 1 or self.eval_every < 1 or self.episode_steps < 1:
            raise InvalidInput("step budgets must be positive")
        if not 0.0 <= self.stage1_fraction <= 1.0:
            raise InvalidInput("stage1_fraction must lie in [0, 1]")
        object.__setattr__(self, "hidden", tuple(self.hidden))
        object.__setattr__(self, "seeds", tuple(self.seeds))


_TOP_KEYS = {
    "version", "env", "task", "total_env_steps", "eval_every", "eval_episodes",
    "episode_steps", "stage1_fraction", "seeds", "ablation", "semantic",
    "fusion", "encoder_mode", "planner", "gamma", "lambda_guidance",
    "latent_dim", "hidden", "n_quantiles", "train",
}


def _check_keys(d: dict, allowed, path: str) -> None:
    unknown = set(d) - set(allowed)
    if unknown:
        raise InvalidInput(f"{path}: unknown keys {sorted(unknown)}")


def config_from_dict(d: dict) -> RunConfig:
    """Strictly validated config load; errors name the offending field path."""
    if not isinstance(d, dict):
        raise InvalidInput("config root must be a JSON object")
    _check_keys(d, _TOP_KEYS, "config")
    if d.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise InvalidInput(f"version: unsupported config version {d.get('version')!r}")
    if "env" not in d:
        raise InvalidInput("env: required field missing")
    env = d["env"]
    task_d = d.get("task", {})
    _check_keys(task_d, {"text", "task_id"}, "task")
    task = TaskDescription(
        text=task_d.get("text", DEFAULT_TASKS.get(env, "")),
        task_id=task_d.get("task_id", env),
    )
    kwargs = {}
    for key in ("total_env_steps", "eval_every", "eval_episodes", "episode_steps",
                "stage1_fraction", "seeds", "ablation", "encoder_mode", "gamma",
                "lambda_guidance", "latent_dim", "hidden", "n_quantiles"):
        if key in d:
            kwargs[key] = d[key]
    try:
        if "semantic" in d:
            _check_keys(d["semantic"], {"backend", "temperature", "endpoint_url", "model_name", "max_retries"}, "semantic")
            kwargs["semantic"] = SemanticPlannerConfig(**d["semantic"])
        if "fusion" in d:
            _check_keys(d["fusion"], {"alpha"}, "fusion")
            kwargs["fusion"] = FusionConfig(**d["fusion"])
        if "planner" in d:
            _check_keys(
                d["planner"],
                {"horizon", "n_samples", "n_elites", "n_iters", "init_std", "min_std",
                 "ref_seed_fraction", "policy_seed_fraction", "prior_blend", "warm_start_reg"},
                "planner",
            )
            kwargs["planner"] = PlannerConfig(**d["planner"])
        if "train" in d:
            _check_keys(d["train"], {"lr", "batch_size", "buffer_capacity", "updates_per_step"}, "train")
            kwargs["train"] = TrainConfig(**d["train"])
        cfg = RunConfig(env=env, task=task, **kwargs)
    except TypeError as err:
        raise InvalidInput(f"config: {err}") from err
    return apply_ablation(cfg, cfg.ablation)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def apply_ablation(cfg: RunConfig, variant: str) -> RunConfig:
    """Force the cross-field constraints a variant implies."""
    if variant not in ABLATION_VARIANTS:
        raise InvalidInput(f"unknown ablation variant {variant!r}")
    cfg = replace(cfg, ablation=variant)
    if variant == "alpha_one":
        cfg = replace(cfg, fusion=FusionConfig(alpha=1.0))
    if variant == "lambda_zero":
        cfg = replace(cfg, lambda_guidance=0.0)
    return cfg


@dataclass(frozen=True)
class MetricsRecord:
    step: int
    kind: str  # "train" or "eval"
    episode_return: float | None = None
    eval_return: float | None = None
    losses: dict | None = None
    wall_clock: float = 0.0

    def to_json(self, include_wall_clock: bool = False) -> str:
        d = {"step": self.step, "kind": self.kind}
        if self.episode_return is not None:
            d["episode_return"] = self.episode_return
        if self.eval_return is not None:
            d["eval_return"] = self.eval_return
        if self.losses is not None:
            d["losses"] = self.losses
        if include_wall_clock:
            d["wall_clock"] = self.wall_clock
        return json.dumps(d)


def build_library(cfg: RunConfig) -> ExpertLibrary:
    return default_library(cfg.env)


def build_encoder(cfg: RunConfig, library: ExpertLibrary, seed: int) -> StateEncoder:
    obs_dim = OBS_DIMS[cfg.env]
    mode = cfg.encoder_mode
    if mode == "auto":
        mode = "identity" if obs_dim == library.embedding_dim else "random_projection"
    return StateEncoder(
        in_dim=obs_dim, out_dim=library.embedding_dim, mode=mode, seed=RngStream(seed)
    )


def plan_weights_for(cfg: RunConfig, library: ExpertLibrary) -> Simplex:
    if cfg.ablation == "uniform_weights":
        return Simplex.uniform(library.K)
    return semantic_plan(cfg.task, library, cfg.semantic)


def collect_episode(controller: Controller, env: ToyEnv, buffer: ReplayBuffer | None, seed: int):
    """Run one closed-loop episode; push transitions (with a_ref) into the buffer."""
    obs = env.reset(seed)
    controller.reset()
    transitions = []
    total = 0.0
    while True:
        a = controller.act(obs)
        tr = env.step(a)
        transitions.append(tr)
        if buffer is not None:
            buffer.push(tr, controller.last_a_ref)
        total += tr.r
        obs = tr.o_next
        if tr.done:
            break
    return total, transitions


def _make_controller(cfg, model, library, weights, encoder, planner_cfg, rng):
    return Controller(
        model=model,
        library=library,
        plan_weights=weights,
        encoder=encoder,
        fusion_cfg=cfg.fusion,
        planner_cfg=planner_cfg,
        rng=rng,
    )


def run_training(cfg: RunConfig, seed: int, out_dir=None) -> list:
    """Two-stage training run; returns the metrics records it wrote."""
    library = build_library(cfg)
    weights = plan_weights_for(cfg, library)
    encoder = build_encoder(cfg, library, seed)
    wm_cfg = WorldModelConfig(
        obs_dim=OBS_DIMS[cfg.env],
        action_dim=ACTION_DIMS[cfg.env],
        latent_dim=cfg.latent_dim,
        hidden=cfg.hidden,
        gamma=cfg.gamma,
        lambda_guidance=cfg.lambda_guidance,
        n_quantiles=cfg.n_quantiles,
        # Q/value heads regress returns normalized by the 1/(1-gamma) horizon
        # factor; without this the heads chase targets tens of units large and
        # the planner ends up optimizing their approximation noise.
        return_scale=1.0 / (1.0 - cfg.gamma),
    )
    model = WorldModel(wm_cfg, RngStream(seed).child("model-init"))
    buffer = ReplayBuffer(cfg.train.buffer_capacity, wm_cfg.obs_dim, wm_cfg.action_dim)
    env = ToyEnv(cfg.env, max_steps=cfg.episode_steps)
    root = RngStream(seed)
    stage1_steps = int(cfg.stage1_fraction * cfg.total_env_steps)
    stage1_planner = replace(cfg.planner, n_iters=0)

    records = []
    t0 = time.monotonic()
    steps = 0
    episode = 0
    consecutive_failures = 0
    next_eval = cfg.eval_every

    def run_eval(at_step):
        returns = []
        for k in range(cfg.eval_episodes):
            planner_cfg = stage1_planner if at_step <= stage1_steps else cfg.planner
            ctrl = _make_controller(
                cfg, model, library, weights, encoder, planner_cfg,
                root.child("eval-plan", k),
            )
            ev_env = ToyEnv(cfg.env, max_steps=cfg.episode_steps)
            ret, _ = collect_episode(ctrl, ev_env, None, seed=root.child("eval-env", k).seed % (2**31))
            returns.append(ret)
        records.append(
            MetricsRecord(
                step=at_step,
                kind="eval",
                eval_return=float(np.median(returns)),
                wall_clock=time.monotonic() - t0,
            )
        )

    # Baseline eval before any training: the trend of the eval curve is only
    # meaningful against the untrained controller.
    run_eval(0)

    while steps < cfg.total_env_steps:
        planner_cfg = stage1_planner if steps < stage1_steps else cfg.planner
        ctrl = _make_controller(
            cfg, model, library, weights, encoder, planner_cfg,
            root.child("collect-plan", episode),
        )
        ep_seed = root.child("collect-env", episode).seed % (2**31)
        ep_return, transitions = collect_episode(ctrl, env, buffer, seed=ep_seed)
        steps += len(transitions)

        loss_sums: dict[str, float] = {}
        n_updates = 0
        for u in range(len(transitions) * cfg.train.updates_per_step):
            gen = root.child("batch", episode * 100000 + u).generator()
            batch = buffer.sample(cfg.train.batch_size, gen)
            try:
                report = train_step(model, batch, cfg.train.lr)
            except NumericalFailure as err:
                consecutive_failures += 1
                log.warning("skipped update after numerical failure: %s", err)
                if consecutive_failures > 10:
                    raise RuntimeError("aborting run: more than 10 consecutive numerical failures") from err
                continue
            consecutive_failures = 0
            n_updates += 1
            for k, v in report.as_dict().items():
                loss_sums[k] = loss_sums.get(k, 0.0) + v
        losses = {k: v / max(n_updates, 1) for k, v in loss_sums.items()}
        records.append(
            MetricsRecord(
                step=steps,
                kind="train",
                episode_return=ep_return,
                losses=losses,
                wall_clock=time.monotonic() - t0,
            )
        )
        episode += 1
        while steps >= next_eval:
            run_eval(steps)
            next_eval += cfg.eval_every
    if not records or records[-1].kind != "eval":
        run_eval(steps)

    if out_dir is not None:
        import os

        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.jsonl"), "w") as fh:
            for rec in records:
                fh.write(rec.to_json() + "\n")
    return records, model


def final_eval_return(records) -> float:
    evals = [r for r in records if r.kind == "eval"]
    if not evals:
        raise InvalidInput("run produced no eval records")
    return float(evals[-1].eval_return)


def steps_to_threshold(records, threshold: float) -> float:
    """First eval step whose return reaches the threshold; inf if never."""
    for r in records:
        if r.kind == "eval" and r.eval_return is not None and r.eval_return >= threshold:
            return float(r.step)
    return float("inf")


def run_ablation(cfg: RunConfig, variants, seeds=None, out_dir=None) -> dict:
    """Run each variant over shared seeds with identical budgets; summarize.

    The summary reports mean/std final eval return and steps-to-threshold per
    variant, where the threshold is within 10% of the best variant's mean
    final return, plus the ordering of variants by mean final return.
    """
    seeds = tuple(seeds if seeds is not None else cfg.seeds)
    if len(variants) < 2:
        raise InvalidInput("ablation needs at least two variants")
    per_variant: dict[str, dict] = {}
    runs: dict[str, list] = {}
    for variant in variants:
        vcfg = apply_ablation(cfg, variant)
        variant_records = []
        for s in seeds:
            v_out = None
            if out_dir is not None:
                import os

                v_out = os.path.join(out_dir, f"{variant}_seed{s}")
            records, _ = run_training(vcfg, seed=s, out_dir=v_out)
            variant_records.append(records)
        runs[variant] = variant_records
        finals = [final_eval_return(r) for r in variant_records]
        per_variant[variant] = {
            "final_returns": finals,
            "mean_final": float(np.mean(finals)),
            "std_final": float(np.std(finals)),
            "env_steps": max(r.step for r in variant_records[0]),
        }
    best = max(per_variant.values(), key=lambda v: v["mean_final"])["mean_final"]
    threshold = best - 0.1 * abs(best)
    for variant in variants:
        stt = [steps_to_threshold(r, threshold) for r in runs[variant]]
        per_variant[variant]["steps_to_threshold"] = float(np.median(stt))
    ordering = sorted(variants, key=lambda v: -per_variant[v]["mean_final"])
    return {
        "seeds": list(seeds),
        "threshold": threshold,
        "variants": per_variant,
        "ordering": ordering,
    }


def format_ablation_table(summary: dict) -> str:
    lines = [f"{'variant':<16} {'mean_final':>12} {'std':>10} {'steps_to_thr':>14}"]
    for v, stats in summary["variants"].items():
        lines.append(
            f"{v:<16} {stats['mean_final']:>12.3f} {stats['std_final']:>10.3f} "
            f"{stats['steps_to_threshold']:>14.1f}"
        )
    lines.append("ordering: " + " > ".join(summary["ordering"]))
    return "\n".join(lines)
