"""CEM planner: config validation, rollout scoring, search quality, and the
closed-loop controller on the door task with a perfect hand-coded model."""

import numpy as np
import pytest

from hiermpc.checks import (
    KnownIntegratorModel,
    grid_search_integrator,
    run_planner_oracle,
)
from hiermpc.core import InvalidInput, RngStream, Simplex
from hiermpc.envs import (
    DOOR_BONUS,
    DT,
    HANDLE_BAND,
    HOLD_STEPS,
    OPEN_THRESHOLD,
    REWARD_RANGE,
    THETA_OPEN,
    ToyEnv,
)
from hiermpc.experts import default_library, expert_action
from hiermpc.fusion import FusionConfig, StateEncoder
from hiermpc.planner import Controller, PlannerConfig, plan, evaluate_sequence


class TestPlannerConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"horizon": 0},
            {"n_elites": 0},
            {"n_elites": 300, "n_samples": 256},
            {"n_iters": -1},
            {"init_std": 0.0},
            {"min_std": -0.1},
            {"ref_seed_fraction": 1.5},
            {"policy_seed_fraction": -0.2},
            {"prior_blend": 1.2},
            {"warm_start_reg": -1.0},
        ],
    )
    def test_invalid_rejected(self, kwargs):
        with pytest.raises(InvalidInput):
            PlannerConfig(**kwargs)

    def test_defaults_valid(self):
        cfg = PlannerConfig()
        assert cfg.horizon == 3


class TestEvaluateSequence:
    def test_hand_value_on_integrator(self):
        # x0 = 0, actions [0.5, 0, 0]: x stays at 0.5 so every reward is 0
        # and the terminal value is 0.
        model = KnownIntegratorModel()
        score = evaluate_sequence(model, np.array([0.0]), np.full((3, 1), 0.0))
        # all three rewards are -(x-0.5)^2 = -0.25 at x=0
        assert score == pytest.approx(-0.25 * (1 + 0.99 + 0.99**2))

    def test_discount_weighting(self):
        # Only the third step earns a nonzero reward; it must be weighted by
        # gamma^2, and gamma^3 = 0.970299 weights the (zero) terminal value.
        model = KnownIntegratorModel()
        seq = np.array([[0.25], [0.25], [0.0]])  # x: 0.25, 0.5, 0.5
        expected = -(0.25**2) + 0.99 * 0.0 + 0.99**2 * 0.0
        assert evaluate_sequence(model, np.array([0.0]), seq) == pytest.approx(expected)
        assert 0.99**3 == pytest.approx(0.970299)


class TestPlan:
    CFG = PlannerConfig(horizon=3, n_samples=128, n_elites=16, n_iters=4)

    def test_zero_iters_returns_warm_start(self):
        model = KnownIntegratorModel()
        cfg = PlannerConfig(n_iters=0, prior_blend=0.0)
        a_ref = np.array([0.3])
        result = plan(model, np.array([0.0]), a_ref, cfg, RngStream(0))
        assert np.array_equal(result.actions, np.tile(a_ref, (3, 1)))
        assert result.iterations_used == 0
        assert result.predicted_return == pytest.approx(
            evaluate_sequence(model, np.array([0.0]), result.actions)
        )

    def test_iteration_best_is_monotone(self):
        model = KnownIntegratorModel()
        result = plan(model, np.array([-0.8]), np.zeros(1), self.CFG, RngStream(3))
        assert len(result.iteration_best) == self.CFG.n_iters
        assert list(result.iteration_best) == sorted(result.iteration_best)

    def test_never_predicts_worse_than_reference(self):
        model = KnownIntegratorModel()
        for seed in range(10):
            a_ref = np.array([0.1 * seed - 0.5])
            ref_seq = np.tile(a_ref, (3, 1))
            ref_score = evaluate_sequence(model, np.array([0.2]), ref_seq)
            result = plan(model, np.array([0.2]), a_ref, self.CFG, RngStream(seed))
            assert result.predicted_return >= ref_score - 1e-12

    def test_deterministic_per_stream(self):
        model = KnownIntegratorModel()
        a = plan(model, np.array([0.4]), np.zeros(1), self.CFG, RngStream(11))
        b = plan(model, np.array([0.4]), np.zeros(1), self.CFG, RngStream(11))
        assert np.array_equal(a.actions, b.actions)
        assert a.predicted_return == b.predicted_return

    def test_prev_solution_shape_checked(self):
        model = KnownIntegratorModel()
        with pytest.raises(InvalidInput):
            plan(model, np.array([0.0]), np.zeros(1), self.CFG, RngStream(0),
                 prev_solution=np.zeros((5, 1)))

    def test_actions_stay_in_box(self):
        model = KnownIntegratorModel()
        result = plan(model, np.array([-3.0]), np.array([0.9]), self.CFG, RngStream(1))
        assert np.all(np.abs(result.actions) <= 1.0)

    def test_huge_trust_region_penalty_pins_the_warm_start(self):
        # With an overwhelming deviation penalty the search cannot leave the
        # a_ref warm start, even when the model says moving would pay.
        model = KnownIntegratorModel()
        cfg = PlannerConfig(horizon=3, n_samples=64, n_elites=8, n_iters=3,
                            warm_start_reg=1e6)
        a_ref = np.array([-0.4])
        result = plan(model, np.array([0.0]), a_ref, cfg, RngStream(2))
        assert np.allclose(result.actions, np.tile(a_ref, (3, 1)), atol=1e-2)

    def test_zero_trust_region_matches_default(self):
        model = KnownIntegratorModel()
        base = PlannerConfig(horizon=3, n_samples=64, n_elites=8, n_iters=3)
        reg0 = PlannerConfig(horizon=3, n_samples=64, n_elites=8, n_iters=3,
                             warm_start_reg=0.0)
        a = plan(model, np.array([0.2]), np.zeros(1), base, RngStream(6))
        b = plan(model, np.array([0.2]), np.zeros(1), reg0, RngStream(6))
        assert np.array_equal(a.actions, b.actions)

    def test_matches_grid_search_oracle(self):
        ok, details = run_planner_oracle(seed=0, tol=0.05)
        assert ok, details

    def test_grid_oracle_sanity(self):
        # From x0 = -0.5 the best first move toward 0.5 is saturated: +1.
        seq, _ = grid_search_integrator(-1.5)
        assert seq[0] == pytest.approx(1.0)


class PerfectDoorModel:
    """Exact latent model of the door environment for closed-loop tests.

    Latent = observation [x, v, goal, phase, theta] plus a hold counter
    reconstructed as phase * HOLD_STEPS (pre-latch hold progress is invisible
    in the observation, so the model assumes the count restarts; this only
    makes it pessimistic about when the latch happens).
    """

    gamma = 0.99
    latent_dim = 6

    def encode(self, o):
        o = np.asarray(o, dtype=np.float64)
        return np.concatenate([o, [o[3] * HOLD_STEPS]])

    def predict(self, z, a):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64)).copy()
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        squeeze = np.asarray(z).shape[0] == 1 and np.asarray(a).ndim <= 2
        x, v, goal, phase, theta, hold = (z[:, k].copy() for k in range(6))
        a0 = np.clip(a[:, 0], -1, 1)
        a1 = np.clip(a[:, 1], -1, 1)
        v = v + a0 * DT
        x = x + v * DT
        pre = phase < 0.5
        in_band = np.abs(x - goal) < HANDLE_BAND
        hold = np.where(pre & in_band, hold + 1, np.where(pre, 0.0, hold))
        latch = pre & (hold >= HOLD_STEPS)
        phase = np.where(latch, 1.0, phase)
        post = phase >= 0.5
        theta = np.where(
            post & ~latch, np.clip(theta + a1 * DT, 0.0, THETA_OPEN), theta
        )
        opened = post & (theta >= OPEN_THRESHOLD)
        r = np.where(post, -np.abs(theta - THETA_OPEN) + opened * DOOR_BONUS,
                     -np.abs(x - goal))
        r = np.clip(r, *REWARD_RANGE)
        z_next = np.stack([x, v, goal, phase, theta, hold], axis=1)
        if squeeze and z_next.shape[0] == 1:
            return z_next[0], float(r[0])
        return z_next, r

    def value(self, z):
        # Crude but informative terminal value: remaining approach cost before
        # the latch, remaining turn cost plus the bonus afterwards.
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        pre = z[:, 3] < 0.5
        v = np.where(pre, -10.0 * np.abs(z[:, 0] - z[:, 2]),
                     -10.0 * np.abs(z[:, 4] - THETA_OPEN) + DOOR_BONUS)
        return v if z.shape[0] > 1 else float(v[0])


def _door_episode(policy, seed):
    env = ToyEnv("door")
    obs = env.reset(seed)
    total = 0.0
    while True:
        tr = env.step(policy(obs))
        total += tr.r
        obs = tr.o_next
        if tr.done:
            return total


class TestPerfectDoorModelFidelity:
    def test_matches_env_step(self):
        env = ToyEnv("door")
        obs = env.reset(5)
        model = PerfectDoorModel()
        z = model.encode(obs)
        gen = RngStream(5).child("fidelity").generator()
        for _ in range(80):
            a = gen.uniform(-1, 1, 2)
            tr = env.step(a)
            z, r = model.predict(z, a)
            assert np.allclose(z[:5], tr.o_next, atol=1e-12)
            assert r == pytest.approx(tr.r)
            if tr.done:
                break

    def test_latch_via_scripted_approach(self):
        env = ToyEnv("door")
        obs = env.reset(3)
        model = PerfectDoorModel()
        z = model.encode(obs)
        for _ in range(200):
            a = [np.clip(4.0 * (obs[2] - obs[0]) - 4.0 * obs[1], -1, 1), 1.0]
            tr = env.step(a)
            z, _ = model.predict(z, a)
            obs = tr.o_next
            if tr.done:
                break
        assert z[3] == float(obs[3]) == 1.0


class TestClosedLoopDoor:
    """With an exact model, the full pipeline must beat every solo expert."""

    def _controller_return(self, seed):
        library = default_library("door")
        controller = Controller(
            model=PerfectDoorModel(),
            library=library,
            plan_weights=Simplex(np.array([0.01, 0.32, 0.01, 0.33, 0.33])),
            encoder=StateEncoder(in_dim=5, out_dim=5, mode="identity"),
            fusion_cfg=FusionConfig(alpha=0.7),
            planner_cfg=PlannerConfig(
                horizon=3, n_samples=64, n_elites=8, n_iters=2, init_std=0.3
            ),
            rng=RngStream(seed).child("door-closed-loop"),
        )
        return _door_episode(controller.act, seed)

    def test_beats_every_solo_expert(self):
        library = default_library("door")
        seeds = range(20)
        ctrl_mean = np.mean([self._controller_return(s) for s in seeds])
        for i in range(library.K):
            solo = np.mean(
                [_door_episode(lambda o: expert_action(library, i, o), s) for s in seeds]
            )
            assert ctrl_mean > solo, (library.ids[i], ctrl_mean, solo)

    def test_plan_weights_length_checked(self):
        library = default_library("door")
        with pytest.raises(InvalidInput):
            Controller(
                model=PerfectDoorModel(),
                library=library,
                plan_weights=Simplex.uniform(3),
                encoder=StateEncoder(in_dim=5, out_dim=5, mode="identity"),
                fusion_cfg=FusionConfig(),
                planner_cfg=PlannerConfig(),
                rng=RngStream(0),
            )

    def test_act_is_deterministic_after_reset(self):
        library = default_library("door")
        def once():
            env = ToyEnv("door")
            obs = env.reset(9)
            ctrl = Controller(
                model=PerfectDoorModel(),
                library=library,
                plan_weights=Simplex.uniform(5),
                encoder=StateEncoder(in_dim=5, out_dim=5, mode="identity"),
                fusion_cfg=FusionConfig(),
                planner_cfg=PlannerConfig(n_samples=32, n_elites=4, n_iters=2),
                rng=RngStream(4),
            )
            return np.stack([ctrl.act(obs) for _ in range(3)])

        assert np.array_equal(once(), once())
