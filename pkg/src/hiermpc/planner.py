"""Sampling-based MPC in latent space (cross-entropy method).

Candidates are Gaussian action sequences clamped into the box and scored by
the model's discounted reward rollout plus a terminal value.  The search is
warm-started from the fused reference action blended with the previous
solution shifted by one step and with the model's policy-prior rollout; a
fraction of candidates is seeded exactly at the current mean (plus the best
sequence seen so far, which makes the per-iteration best score monotone).
The returned plan is whichever of the final elite mean and the pure reference
sequence the model predicts to score higher.  Returning the elite mean rather
than the single best-scoring candidate matters with an imperfect model: the
argmax over hundreds of noisy evaluations systematically picks actions whose
scores are overestimated, while the elite mean averages that error out and
the two-way comparison keeps the plan from predicting worse than the
reference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import InvalidInput, RngStream, Simplex
from .fusion import FusionConfig, StateEncoder, encode_state, fuse, reference_action, selection_probs


@dataclass(frozen=True)
class PlannerConfig:
    horizon: int = 3
    n_samples: int = 256
    n_elites: int = 32
    n_iters: int = 6
    init_std: float = 0.5
    min_std: float = 0.05
    ref_seed_fraction: float = 0.05
    policy_seed_fraction: float = 0.1
    prior_blend: float = 0.3
    warm_start_reg: float = 0.0

    def __post_init__(self):
        if self.horizon < 1:
            raise InvalidInput("horizon must be >= 1")
        if not 1 <= self.n_elites <= self.n_samples:
            raise InvalidInput("need 1 <= n_elites <= n_samples")
        if self.n_iters < 0:
            raise InvalidInput("n_iters must be >= 0")
        if self.init_std <= 0 or self.min_std <= 0:
            raise InvalidInput("std parameters must be positive")
        if not 0.0 <= self.ref_seed_fraction <= 1.0:
            raise InvalidInput("ref_seed_fraction must lie in [0, 1]")
        if not 0.0 <= self.policy_seed_fraction <= 1.0:
            raise InvalidInput("policy_seed_fraction must lie in [0, 1]")
        if not 0.0 <= self.prior_blend <= 1.0:
            raise InvalidInput("prior_blend must lie in [0, 1]")
        if self.warm_start_reg < 0.0:
            raise InvalidInput("warm_start_reg must be >= 0")


@dataclass(frozen=True)
class PlanResult:
    actions: np.ndarray  # (H, action_dim)
    predicted_return: float
    iterations_used: int
    iteration_best: tuple = ()  # best candidate score after each iteration


def evaluate_sequence(model, z0, actions) -> float:
    """Discounted model rollout: sum gamma^k r_hat_k + gamma^H V(z_H)."""
    z = np.asarray(z0, dtype=np.float64)
    seq = np.asarray(actions, dtype=np.float64)
    total = 0.0
    g = 1.0
    for a in seq:
        z, r = model.predict(z, a)
        total += g * r
        g *= model.gamma
    return float(total + g * model.value(z))


def _evaluate_batch(model, z0, candidates) -> np.ndarray:
    """Vectorized evaluate_sequence over candidates (N, H, da)."""
    n = candidates.shape[0]
    z = np.broadcast_to(z0, (n, z0.size)).copy()
    total = np.zeros(n)
    g = 1.0
    for k in range(candidates.shape[1]):
        z, r = model.predict(z, candidates[:, k, :])
        total += g * r
        g *= model.gamma
    return total + g * model.value(z)


def plan(
    model,
    z0,
    a_ref,
    cfg: PlannerConfig,
    rng: RngStream,
    prev_solution=None,
) -> PlanResult:
    """CEM search for the best H-step action sequence from latent state z0."""
    a_ref = np.asarray(a_ref, dtype=np.float64)
    z0 = np.asarray(z0, dtype=np.float64)
    da = a_ref.size
    ref_seq = np.tile(a_ref, (cfg.horizon, 1))
    mean = ref_seq
    if prev_solution is not None:
        prev = np.asarray(prev_solution, dtype=np.float64)
        if prev.shape != mean.shape:
            raise InvalidInput(f"previous solution shape {prev.shape}, expected {mean.shape}")
        shifted = np.concatenate([prev[1:], prev[-1:]], axis=0)
        mean = 0.5 * (mean + shifted)
    mean = np.clip(mean, -1.0, 1.0)

    # A model carrying a learned policy prior contributes its own rollout,
    # blended into the warm start and optionally used as a second sampling
    # center.  A prior trained toward the fused reference proposes actions
    # close to it, so the blend is nearly free; an untrained prior biases
    # every warm start, so planning quality genuinely depends on the prior.
    prior_seq = None
    if hasattr(model, "policy") and (cfg.prior_blend > 0.0 or cfg.policy_seed_fraction > 0.0):
        z = z0
        steps = []
        for _ in range(cfg.horizon):
            a = np.clip(np.asarray(model.policy(z), dtype=np.float64), -1.0, 1.0)
            steps.append(a)
            z, _ = model.predict(z, a)
        prior_seq = np.stack(steps)
        if cfg.prior_blend > 0.0:
            mean = np.clip((1.0 - cfg.prior_blend) * mean + cfg.prior_blend * prior_seq, -1.0, 1.0)

    if cfg.n_iters == 0:
        score = float(_evaluate_batch(model, z0, mean[None])[0])
        return PlanResult(actions=mean, predicted_return=score, iterations_used=0)

    # Trust region around the warm start: with an imperfect learned model,
    # candidates far from the (reference + prior) warm start live where the
    # model extrapolates, and CEM will happily chase extrapolation error.
    # Penalizing squared deviation keeps the search honest; reg = 0 restores
    # the unpenalized objective.
    warm = mean.copy()

    def _select_scores(cands, raw):
        if cfg.warm_start_reg == 0.0:
            return raw
        dev = np.sum((cands - warm[None]) ** 2, axis=(1, 2))
        return raw - cfg.warm_start_reg * dev

    std = np.full_like(mean, cfg.init_std)
    gen = rng.child("cem-noise").generator()
    noise = gen.standard_normal((cfg.n_iters, cfg.n_samples, cfg.horizon, da))
    n_seed = max(1, int(round(cfg.ref_seed_fraction * cfg.n_samples)))
    n_prior = int(round(cfg.policy_seed_fraction * cfg.n_samples))

    best_seq = None
    best_score = -np.inf
    iteration_best = []
    for it in range(cfg.n_iters):
        cands = np.clip(mean[None] + std[None] * noise[it], -1.0, 1.0)
        if prior_seq is not None and n_prior > 0:
            cands[-n_prior:] = np.clip(prior_seq[None] + std[None] * noise[it, -n_prior:], -1.0, 1.0)
        cands[:n_seed] = mean
        if best_seq is not None and cfg.n_samples > n_seed:
            cands[n_seed] = best_seq
        scores = _select_scores(cands, _evaluate_batch(model, z0, cands))
        order = np.argsort(-scores, kind="stable")  # index tie-break
        top = int(order[0])
        if scores[top] > best_score:
            best_score = float(scores[top])
            best_seq = cands[top].copy()
        iteration_best.append(best_score)
        elites = cands[order[: cfg.n_elites]]
        mean = elites.mean(axis=0)
        std = np.maximum(elites.std(axis=0), cfg.min_std)

    mean_score = float(_evaluate_batch(model, z0, mean[None])[0])
    ref_score = float(_evaluate_batch(model, z0, ref_seq[None])[0])
    mean_sel = float(_select_scores(mean[None], np.array([mean_score]))[0])
    ref_sel = float(_select_scores(ref_seq[None], np.array([ref_score]))[0])
    if mean_sel >= ref_sel:
        return PlanResult(actions=mean, predicted_return=mean_score,
                          iterations_used=cfg.n_iters, iteration_best=tuple(iteration_best))
    return PlanResult(actions=ref_seq, predicted_return=ref_score,
                      iterations_used=cfg.n_iters, iteration_best=tuple(iteration_best))


class Controller:
    """Full per-step pipeline: fuse weights, form a_ref, encode, plan, act.

    Caches the shifted plan between steps as the next warm start.  Planning
    randomness is drawn from a per-step child stream, so the action stream is
    a pure function of (seed, observation stream).
    """

    def __init__(
        self,
        model,
        library,
        plan_weights: Simplex,
        encoder: StateEncoder,
        fusion_cfg: FusionConfig,
        planner_cfg: PlannerConfig,
        rng: RngStream,
    ):
        if len(plan_weights) != library.K:
            raise InvalidInput("plan weights length must equal library size")
        self.model = model
        self.library = library
        self.plan_weights = plan_weights
        self.encoder = encoder
        self.fusion_cfg = fusion_cfg
        self.planner_cfg = planner_cfg
        self.rng = rng
        self.reset()

    def reset(self):
        self._prev = None
        self._step = 0
        self.last_result = None
        self.last_a_ref = None

    def act(self, obs) -> np.ndarray:
        p = selection_probs(encode_state(self.encoder, obs), self.library)
        w_tilde = fuse(self.plan_weights, p, self.fusion_cfg)
        a_ref = reference_action(w_tilde, self.library, obs)
        z = self.model.encode(obs)
        result = plan(
            self.model,
            z,
            a_ref,
            self.planner_cfg,
            self.rng.child("plan-step", self._step),
            prev_solution=self._prev,
        )
        self._prev = result.actions
        self._step += 1
        self.last_result = result
        self.last_a_ref = a_ref
        return result.actions[0].copy()
