"""Shared fixtures.

The reach sweep (20 seeds, guidance on and off) is expensive, so it runs once
per session and is shared between the harness trend test and the acceptance
sample-efficiency test.
"""

import pytest

from hiermpc.harness import config_from_dict, run_training

REACH_SWEEP_SEEDS = tuple(range(20))


def reach_config(lambda_guidance: float = 0.05):
    return config_from_dict(
        {
            "env": "reach",
            "total_env_steps": 4000,
            "eval_every": 1000,
            "eval_episodes": 9,
            "stage1_fraction": 1.0,
            "lambda_guidance": lambda_guidance,
            "planner": {
                "horizon": 3,
                "n_samples": 64,
                "n_elites": 8,
                "n_iters": 1,
                "init_std": 0.15,
                "policy_seed_fraction": 0.1,
                "prior_blend": 0.15,
                "warm_start_reg": 200.0,
            },
            "train": {
                "lr": 0.001,
                "batch_size": 256,
                "buffer_capacity": 20000,
                "updates_per_step": 2,
            },
        }
    )


@pytest.fixture(scope="session")
def reach_sweep():
    """Metrics records for 20 reach seeds, keyed by guidance weight."""
    results = {}
    for lam in (0.05, 0.0):
        cfg = reach_config(lambda_guidance=lam)
        results[lam] = [run_training(cfg, seed=s)[0] for s in REACH_SWEEP_SEEDS]
    return results
