"""Replay buffer, config loading, ablation plumbing, training runs, metrics,
and the command-line interface."""

import json
import time

import numpy as np
import pytest
from scipy import stats

from hiermpc.cli import main
from hiermpc.core import InvalidInput, RngStream, Simplex
from hiermpc.envs import ToyEnv
from hiermpc.harness import (
    MetricsRecord,
    ReplayBuffer,
    apply_ablation,
    build_library,
    config_from_dict,
    final_eval_return,
    plan_weights_for,
    run_training,
    steps_to_threshold,
)

from conftest import reach_config


def _fill(buffer, n, obs_dim=2, action_dim=1):
    env = ToyEnv("stand", max_steps=10_000)
    env.reset(0)
    for k in range(n):
        tr = env.step([0.0])
        # overwrite the reward with the push index so entries are identifiable
        tr = type(tr)(o=tr.o, a=tr.a, r=float(k), o_next=tr.o_next, done=False)
        buffer.push(tr, np.zeros(action_dim))
    return buffer


class TestReplayBuffer:
    def test_capacity_validated(self):
        with pytest.raises(InvalidInput):
            ReplayBuffer(0, 2, 1)

    def test_ring_overwrites_oldest(self):
        buf = _fill(ReplayBuffer(3, 2, 1), 5)
        assert buf.size == 3
        assert sorted(buf.r.tolist()) == [2.0, 3.0, 4.0]

    def test_sample_from_empty_raises(self):
        with pytest.raises(InvalidInput):
            ReplayBuffer(3, 2, 1).sample(1, np.random.default_rng(0))

    def test_sample_without_replacement_within_batch(self):
        buf = _fill(ReplayBuffer(50, 2, 1), 50)
        batch = buf.sample(50, np.random.default_rng(0))
        assert len(set(batch.r.tolist())) == 50

    def test_sample_clipped_to_size(self):
        buf = _fill(ReplayBuffer(100, 2, 1), 7)
        batch = buf.sample(32, np.random.default_rng(0))
        assert batch.o.shape[0] == 7

    def test_sampling_is_uniform(self):
        """Chi-square goodness of fit over which of 1000 items get sampled."""
        n = 1000
        buf = _fill(ReplayBuffer(n, 2, 1), n)
        gen = np.random.default_rng(123)
        counts = np.zeros(n)
        draws = 500
        per = 100
        for _ in range(draws):
            batch = buf.sample(per, gen)
            counts[batch.r.astype(int)] += 1
        _, p = stats.chisquare(counts)
        assert p > 0.001

    def test_batch_is_a_copy(self):
        buf = _fill(ReplayBuffer(10, 2, 1), 10)
        batch = buf.sample(5, np.random.default_rng(0))
        batch.o[:] = 99.0
        assert not np.any(buf.o == 99.0)


class TestConfigFromDict:
    def test_minimal_config(self):
        cfg = config_from_dict({"env": "reach"})
        assert cfg.env == "reach"
        assert cfg.gamma == 0.99
        assert cfg.lambda_guidance == 0.05
        assert cfg.fusion.alpha == 0.7
        assert cfg.semantic.temperature == 0.3
        assert cfg.planner.horizon == 3
        assert cfg.train.lr == 0.001
        assert cfg.train.batch_size == 256

    def test_missing_env_names_field(self):
        with pytest.raises(InvalidInput, match="env"):
            config_from_dict({})

    def test_unknown_top_level_key(self):
        with pytest.raises(InvalidInput, match="config"):
            config_from_dict({"env": "reach", "optimiser": "sgd"})

    def test_unknown_nested_key_names_path(self):
        with pytest.raises(InvalidInput, match="planner"):
            config_from_dict({"env": "reach", "planner": {"horizonn": 3}})

    def test_unsupported_version(self):
        with pytest.raises(InvalidInput, match="version"):
            config_from_dict({"env": "reach", "version": 99})

    def test_non_dict_rejected(self):
        with pytest.raises(InvalidInput):
            config_from_dict(["env", "reach"])

    def test_default_task_text_per_env(self):
        cfg = config_from_dict({"env": "door"})
        assert "door" in cfg.task.text

    def test_ablation_constraints_forced_at_load(self):
        cfg = config_from_dict({"env": "door", "ablation": "alpha_one"})
        assert cfg.fusion.alpha == 1.0


class TestApplyAblation:
    def test_alpha_one_forces_alpha(self):
        cfg = apply_ablation(config_from_dict({"env": "door"}), "alpha_one")
        assert cfg.fusion.alpha == 1.0

    def test_lambda_zero_forces_guidance_off(self):
        cfg = apply_ablation(config_from_dict({"env": "door"}), "lambda_zero")
        assert cfg.lambda_guidance == 0.0

    def test_uniform_weights_plan(self):
        cfg = apply_ablation(config_from_dict({"env": "door"}), "uniform_weights")
        library = build_library(cfg)
        w = plan_weights_for(cfg, library)
        assert np.array_equal(w.weights, np.full(library.K, 1.0 / library.K))

    def test_full_keeps_semantic_weights(self):
        cfg = config_from_dict({"env": "door"})
        library = build_library(cfg)
        w = plan_weights_for(cfg, library)
        assert isinstance(w, Simplex)
        assert float(w.weights.max()) > 1.5 / library.K

    def test_unknown_variant(self):
        with pytest.raises(InvalidInput):
            apply_ablation(config_from_dict({"env": "door"}), "no_planner")


class TestMetricsRecord:
    def test_wall_clock_excluded_by_default(self):
        rec = MetricsRecord(step=5, kind="eval", eval_return=-1.0, wall_clock=9.9)
        d = json.loads(rec.to_json())
        assert "wall_clock" not in d
        assert json.loads(rec.to_json(include_wall_clock=True))["wall_clock"] == 9.9

    def test_steps_to_threshold(self):
        records = [
            MetricsRecord(step=100, kind="eval", eval_return=-50.0),
            MetricsRecord(step=200, kind="eval", eval_return=-10.0),
            MetricsRecord(step=300, kind="eval", eval_return=-5.0),
        ]
        assert steps_to_threshold(records, -20.0) == 200.0
        assert steps_to_threshold(records, 0.0) == float("inf")

    def test_final_eval_requires_evals(self):
        with pytest.raises(InvalidInput):
            final_eval_return([MetricsRecord(step=1, kind="train")])


def _tiny_cfg(**overrides):
    d = {
        "env": "reach",
        "total_env_steps": 120,
        "eval_every": 60,
        "episode_steps": 30,
        "eval_episodes": 1,
        "stage1_fraction": 0.5,
        "planner": {"n_samples": 16, "n_elites": 4, "n_iters": 1},
        "train": {"batch_size": 32, "updates_per_step": 1},
    }
    d.update(overrides)
    return config_from_dict(d)


class TestRunTraining:
    def test_metrics_jsonl_monotone_step(self, tmp_path):
        run_training(_tiny_cfg(), seed=0, out_dir=tmp_path)
        lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
        steps = [json.loads(line)["step"] for line in lines]
        assert steps == sorted(steps)
        assert any(json.loads(line)["kind"] == "eval" for line in lines)

    def test_byte_identical_metrics_across_runs(self, tmp_path):
        cfg = _tiny_cfg()
        run_training(cfg, seed=3, out_dir=tmp_path / "a")
        run_training(cfg, seed=3, out_dir=tmp_path / "b")
        a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
        b = (tmp_path / "b" / "metrics.jsonl").read_bytes()
        assert a == b

    def test_different_seeds_differ(self, tmp_path):
        cfg = _tiny_cfg()
        run_training(cfg, seed=0, out_dir=tmp_path / "a")
        run_training(cfg, seed=1, out_dir=tmp_path / "b")
        a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
        b = (tmp_path / "b" / "metrics.jsonl").read_bytes()
        assert a != b

    def test_lambda_zero_run_reports_zero_guidance_loss(self):
        records, _ = run_training(_tiny_cfg(ablation="lambda_zero"), seed=0)
        train_recs = [r for r in records if r.kind == "train" and r.losses]
        assert train_recs
        for r in train_recs:
            assert r.losses["guidance"] == 0.0

    def test_reach_smoke_under_60s(self):
        cfg = reach_config()
        t0 = time.monotonic()
        records, _ = run_training(cfg, seed=0)
        elapsed = time.monotonic() - t0
        assert records[-1].step >= 2000
        assert elapsed < 60.0

    def test_reach_eval_trend_final_at_least_initial(self, reach_sweep):
        """20-seed median: learning must not make evaluation worse."""
        firsts, finals = [], []
        for records in reach_sweep[0.05]:
            evals = [r.eval_return for r in records if r.kind == "eval"]
            firsts.append(evals[0])
            finals.append(evals[-1])
        assert float(np.median(finals)) >= float(np.median(firsts))


class TestCli:
    def _write_cfg(self, tmp_path, **overrides):
        d = {
            "env": "reach",
            "total_env_steps": 120,
            "eval_every": 60,
            "episode_steps": 30,
            "eval_episodes": 1,
            "planner": {"n_samples": 16, "n_elites": 4, "n_iters": 1},
            "train": {"batch_size": 32},
        }
        d.update(overrides)
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(d))
        return str(path)

    def test_missing_config_exits_1(self, capsys):
        with pytest.raises(SystemExit) as err:
            main(["train", "--config", "/no/such/file.json"])
        assert err.value.code == 1
        assert "not found" in capsys.readouterr().err

    def test_invalid_config_exits_1(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text('{"env": "reach", "bogus_key": 1}')
        with pytest.raises(SystemExit) as err:
            main(["train", "--config", str(path)])
        assert err.value.code == 1

    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as err:
            main(["train", "--confg", "x.json"])
        assert err.value.code == 2

    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as err:
            main(["dance"])
        assert err.value.code == 2

    def test_train_writes_metrics_and_checkpoint(self, tmp_path, capsys):
        cfg = self._write_cfg(tmp_path)
        out = tmp_path / "out"
        assert main(["train", "--config", cfg, "--seed", "0", "--out", str(out)]) == 0
        assert (out / "metrics.jsonl").exists()
        assert (out / "model.json").exists()
        assert "final eval return" in capsys.readouterr().out

    def test_eval_and_plan_roundtrip(self, tmp_path, capsys):
        cfg = self._write_cfg(tmp_path)
        out = tmp_path / "out"
        main(["train", "--config", cfg, "--seed", "0", "--out", str(out)])
        capsys.readouterr()
        ckpt = str(out / "model.json")
        assert main(["eval", "--checkpoint", ckpt, "--episodes", "2", "--config", cfg]) == 0
        assert "mean return" in capsys.readouterr().out
        assert main(["plan", "--checkpoint", ckpt, "--obs", "[0.1, 0.0, 0.5]"]) == 0
        dump = json.loads(capsys.readouterr().out)
        assert np.asarray(dump["actions"]).shape == (3, 1)
        assert isinstance(dump["predicted_return"], float)

    def test_plan_rejects_bad_obs(self, tmp_path, capsys):
        cfg = self._write_cfg(tmp_path)
        out = tmp_path / "out"
        main(["train", "--config", cfg, "--seed", "0", "--out", str(out)])
        capsys.readouterr()
        ckpt = str(out / "model.json")
        assert main(["plan", "--checkpoint", ckpt, "--obs", "[0.1]"]) == 1
        assert main(["plan", "--checkpoint", ckpt, "--obs", "not json"]) == 1

    def test_eval_checkpoint_env_mismatch(self, tmp_path, capsys):
        cfg = self._write_cfg(tmp_path)
        out = tmp_path / "out"
        main(["train", "--config", cfg, "--seed", "0", "--out", str(out)])
        stand_cfg = self._write_cfg(tmp_path, env="stand")
        capsys.readouterr()
        rc = main(["eval", "--checkpoint", str(out / "model.json"),
                   "--episodes", "1", "--config", stand_cfg])
        assert rc == 1

    def test_ablate_unknown_variant_exits_1(self, tmp_path, capsys):
        cfg = self._write_cfg(tmp_path)
        assert main(["ablate", "--config", cfg, "--variants", "full,bogus"]) == 1

    def test_check_passes(self, capsys):
        assert main(["check"]) == 0
        out = capsys.readouterr().out
        assert out.count("[PASS]") == 5

    def test_plot_writes_svg(self, tmp_path, capsys):
        pytest.importorskip("matplotlib")
        metrics = tmp_path / "metrics.jsonl"
        metrics.write_text(
            "\n".join(
                json.dumps({"step": s, "kind": "eval", "eval_return": -float(s)})
                for s in (100, 200)
            )
        )
        svg = tmp_path / "curve.svg"
        assert main(["plot", "--metrics", str(metrics), "--out", str(svg)]) == 0
        assert svg.read_text().lstrip().startswith("<?xml")
