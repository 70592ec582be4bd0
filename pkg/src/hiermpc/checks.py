"""Self-contained verification suites: gradients, contraction, planner oracle,
simplex/fusion algebra, and convex-hull grounding.

Each suite returns (passed, details) and is shared between the `check` CLI
subcommand and the test suite, so a fresh clone can audit the numerics without
running any training.
"""

from __future__ import annotations

import numpy as np

from .core import RngStream, clamp_action, softmax
from .envs import DiscreteMdp, bellman_operator, random_mdp, value_iteration
from .experts import default_library, expert_actions
from .fusion import FusionConfig, fuse
from .planner import PlannerConfig, plan
from .semantic import SemanticPlannerConfig, TaskDescription, plan as semantic_plan
from .worldmodel import TrainBatch, WorldModel, WorldModelConfig, finite_diff_check

GRADIENT_TOL = 1e-4
SIMPLEX_TOL = 1e-9


def tiny_model_and_batch(seed: int = 0, n_quantiles: int = 5):
    """Small world model (< 2k parameters) plus a random batch for checks."""
    cfg = WorldModelConfig(
        obs_dim=3, action_dim=1, latent_dim=4, hidden=(8,), n_quantiles=n_quantiles
    )
    model = WorldModel(cfg, RngStream(seed))
    gen = RngStream(seed).child("check-batch").generator()
    b = 16
    batch = TrainBatch(
        o=gen.uniform(-1, 1, (b, 3)),
        a=gen.uniform(-1, 1, (b, 1)),
        r=gen.uniform(-1, 1, b),
        o_next=gen.uniform(-1, 1, (b, 3)),
        done=(gen.random(b) < 0.1).astype(np.float64),
        a_ref=gen.uniform(-1, 1, (b, 1)),
    )
    return model, batch


def run_gradient_check(seed: int = 0):
    model, batch = tiny_model_and_batch(seed)
    errs = {
        term: finite_diff_check(model, batch, term=term, rng=RngStream(seed))
        for term in ("td", "guidance", "dynamics", "reward")
    }
    return max(errs.values()) < GRADIENT_TOL, errs


def run_contraction_check(seed: int = 0, n_trials: int = 1000):
    """Random (MDP, Q1, Q2) triples must satisfy the gamma-contraction bound."""
    violations = 0
    worst_ratio = 0.0
    rng = RngStream(seed).child("contraction")
    for t in range(n_trials):
        gen = rng.child("trial", t).generator()
        mdp = random_mdp(rng.child("mdp", t), n_states=int(gen.integers(2, 6)),
                         n_actions=int(gen.integers(2, 4)), gamma=0.99)
        shape = (mdp.n_states, mdp.n_actions)
        q1 = gen.uniform(-10, 10, shape)
        q2 = gen.uniform(-10, 10, shape)
        lhs = np.max(np.abs(bellman_operator(mdp, q1) - bellman_operator(mdp, q2)))
        rhs = mdp.gamma * np.max(np.abs(q1 - q2))
        worst_ratio = max(worst_ratio, lhs / max(rhs, 1e-300))
        if lhs > rhs + 1e-12:
            violations += 1

    # Hand-solved fixed points: a self-loop with r=1 has Q* = 1/(1-gamma);
    # a deterministic 2-state chain with rewards (0, 1) has
    # Q*(s1) = gamma/(1-gamma), Q*(s0) = gamma * Q*(s1).
    single = DiscreteMdp(transition=np.ones((1, 1, 1)), reward=np.ones((1, 1)), gamma=0.99)
    q_single = value_iteration(single, tol=1e-10)
    ok_single = abs(q_single[0, 0] - 100.0) < 1e-6

    p = np.zeros((2, 1, 2))
    p[0, 0, 1] = 1.0
    p[1, 0, 1] = 1.0
    r = np.array([[0.0], [1.0]])
    chain = DiscreteMdp(transition=p, reward=r, gamma=0.99)
    q_chain = value_iteration(chain, tol=1e-10)
    g = 0.99
    expected = np.array([[g * 1.0 / (1 - g)], [1.0 / (1 - g)]])
    ok_chain = np.max(np.abs(q_chain - expected)) < 1e-6

    passed = violations == 0 and ok_single and ok_chain
    return passed, {
        "violations": violations,
        "worst_ratio": worst_ratio,
        "single_state_ok": ok_single,
        "two_state_ok": ok_chain,
    }


class KnownIntegratorModel:
    """Perfect 1-D model: latent = position, x' = x + a, reward -(x'-0.5)^2."""

    gamma = 0.99
    latent_dim = 1

    def encode(self, o):
        return np.asarray(o, dtype=np.float64)

    def predict(self, z, a):
        single = np.asarray(z).ndim == 1
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        z_next = z + a
        r = -((z_next[:, 0] - 0.5) ** 2)
        if single and z_next.shape[0] == 1:
            return z_next[0], float(r[0])
        return z_next, r

    def value(self, z):
        z = np.atleast_2d(z)
        v = np.zeros(z.shape[0])
        return v if z.shape[0] > 1 else float(v[0])


def grid_search_integrator(x0: float, horizon: int = 3, step: float = 0.01, gamma: float = 0.99):
    """Exhaustive search over action sequences on the known integrator."""
    if horizon != 3:
        raise NotImplementedError("grid oracle is written for horizon 3")
    a = np.arange(-1.0, 1.0 + step / 2, step)
    x1 = x0 + a[:, None, None]
    r1 = -((x1 - 0.5) ** 2)
    x2 = x1 + a[None, :, None]
    r2 = -((x2 - 0.5) ** 2)
    x3 = x2 + a[None, None, :]
    r3 = -((x3 - 0.5) ** 2)
    total = r1 + gamma * r2 + gamma * gamma * r3
    flat = np.argmax(total)
    i, j, k = np.unravel_index(flat, total.shape)
    return np.array([a[i], a[j], a[k]]), float(total[i, j, k])


def run_planner_oracle(seed: int = 0, tol: float = 0.05):
    model = KnownIntegratorModel()
    cfg = PlannerConfig(horizon=3, n_samples=256, n_elites=32, n_iters=6)
    worst = 0.0
    details = []
    for idx, x0 in enumerate((-0.8, -0.2, 0.0, 0.3, 0.9)):
        best_seq, best_score = grid_search_integrator(x0)
        result = plan(model, np.array([x0]), np.zeros(1), cfg, RngStream(seed).child("oracle", idx))
        gap = abs(float(result.actions[0, 0]) - best_seq[0])
        worst = max(worst, gap)
        details.append({"x0": x0, "grid_first": best_seq[0], "cem_first": float(result.actions[0, 0])})
    return worst <= tol, {"worst_first_action_gap": worst, "cases": details}


def run_simplex_suite(seed: int = 0, n_instances: int = 10000):
    """Normalization, convexity, and boundary-alpha exactness on random inputs."""
    gen = RngStream(seed).child("simplex-suite").generator()
    ok = True
    worst_norm = 0.0
    for _ in range(n_instances):
        k = int(gen.integers(2, 8))
        scale = 10.0 ** gen.uniform(-2, 6)
        s = softmax(gen.uniform(-1, 1, k) * scale)
        worst_norm = max(worst_norm, abs(float(s.weights.sum()) - 1.0))
        if np.any(s.weights < 0) or np.any(s.weights > 1):
            ok = False
        w = softmax(gen.standard_normal(k))
        p = softmax(gen.standard_normal(k))
        alpha = float(gen.random())
        f = fuse(w, p, FusionConfig(alpha=alpha))
        lo = np.minimum(w.weights, p.weights) - 1e-12
        hi = np.maximum(w.weights, p.weights) + 1e-12
        if np.any(f.weights < lo) or np.any(f.weights > hi):
            ok = False
        if not np.array_equal(fuse(w, p, FusionConfig(alpha=1.0)).weights, w.weights):
            ok = False
        if not np.array_equal(fuse(w, p, FusionConfig(alpha=0.0)).weights, p.weights):
            ok = False
    return ok and worst_norm <= SIMPLEX_TOL, {"worst_normalization_error": worst_norm}


def run_hull_check(seed: int = 0, n_states: int = 10000):
    """Semantic-plan actions stay inside the componentwise expert-action hull."""
    gen = RngStream(seed).child("hull-check").generator()
    worst = 0.0
    for env_kind in ("reach", "door"):
        library = default_library(env_kind)
        task = TaskDescription(text="reach the goal and hold it", task_id="hull")
        w = semantic_plan(task, library, SemanticPlannerConfig(backend="mock"))
        for _ in range(n_states // 2):
            obs = gen.uniform(-1.5, 1.5, library.obs_dim)
            acts = expert_actions(library, obs)
            mix = clamp_action(w.weights @ acts)
            lo = acts.min(axis=0) - 1e-12
            hi = acts.max(axis=0) + 1e-12
            worst = max(worst, float(np.max(np.maximum(lo - mix, mix - hi))))
    return worst <= 0.0 + 1e-12, {"worst_hull_violation": worst}


ALL_CHECKS = {
    "gradient": run_gradient_check,
    "contraction": run_contraction_check,
    "planner_oracle": run_planner_oracle,
    "simplex": run_simplex_suite,
    "convex_hull": run_hull_check,
}


def run_all_checks(seed: int = 0):
    results = {}
    all_ok = True
    for name, fn in ALL_CHECKS.items():
        ok, details = fn(seed)
        results[name] = (ok, details)
        all_ok = all_ok and ok
    return all_ok, results
