import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from promplab import cli
from promplab.config import (ConfigError, ExperimentConfig, dumps, load, loads, preset, save)
from promplab.lab import (CheckResult, VarianceReport, export_curves, read_curves, run_train,
                          run_variance, run_verify)
from promplab.meta_opt import IterationRecord


# -- config ------------------------------------------------------------------


@pytest.mark.parametrize("name", ["desk", "paper-scale", "point1d", "point2d", "verify", "variance"])
def test_presets_round_trip(name):
    c = preset(name)
    assert loads(dumps(c)) == c


def test_large_preset_uses_forty_tasks():
    assert preset("paper-scale").optimizer.tasks_per_iter == 40
    assert preset("desk").optimizer.tasks_per_iter == 10


@settings(max_examples=50, deadline=None)
@given(alpha=st.floats(0, 10, allow_nan=False), beta=st.floats(1e-9, 1, allow_nan=False),
       horizon=st.integers(1, 500), gamma=st.floats(0.01, 1.0),
       seeds=st.lists(st.integers(0, 2**31), min_size=1, max_size=4),
       ref=st.lists(st.floats(-5, 5, allow_nan=False), max_size=3),
       tag=st.sampled_from(["I+DICE", "I+LVC", "MAML", "EMAML"]))
def test_round_trip_property(alpha, beta, horizon, gamma, seeds, ref, tag):
    c = ExperimentConfig()
    c.optimizer.alpha, c.optimizer.beta = alpha, beta
    c.env.horizon, c.env.gamma = horizon, gamma
    c.run.seeds, c.run.reference_theta = seeds, ref
    c.estimator.tag = tag
    assert loads(dumps(c)) == c


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        loads("[env]\nhorizn = 3\n")
    with pytest.raises(ConfigError):
        loads("[environment]\nhorizon = 3\n")
    with pytest.raises(ConfigError):
        loads("[optimizer]\nalgo = trpo\n")
    with pytest.raises(ConfigError):
        loads("[env]\nhorizon = many\n")


def test_partial_file_uses_defaults(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[optimizer]\nbeta = 0.5\n")
    c = load(p)
    assert c.optimizer.beta == 0.5 and c.env.horizon == ExperimentConfig().env.horizon
    save(c, tmp_path / "d.ini")
    assert load(tmp_path / "d.ini") == c


# -- verify ------------------------------------------------------------------


def test_verify_default_passes():
    rep = run_verify(preset("verify"))
    assert rep.passed
    dec = [c for c in rep.checks if c.name.startswith("decomposition")]
    assert dec and all(c.max_error < 1e-6 for c in dec)


def test_verify_discounted_passes():
    c = preset("verify")
    c.env.gamma = 0.9
    assert run_verify(c).passed


def test_verify_negative_alpha_is_named_failure():
    c = preset("verify")
    c.optimizer.alpha = -0.1
    rep = run_verify(c)
    assert not rep.passed
    failed = [ch for ch in rep.checks if not ch.passed]
    assert [ch.name for ch in failed] == ["meta_gradient_fd[task0]"]
    assert "non-negative" in failed[0].message


def test_verify_rejects_large_or_continuous():
    c = preset("verify")
    c.env.family = "point2d"
    with pytest.raises(ConfigError):
        run_verify(c)


# -- variance ----------------------------------------------------------------


def test_variance_minimal_k():
    reps = run_variance(preset("variance"), K=2)
    for r in reps:
        assert r.samples.shape[0] == 2
        assert np.all(np.isfinite(r.mean)) and np.all(np.isfinite(r.std))
        assert math.isfinite(r.aggregate_relative_std)


def test_variance_zero_reward_env():
    rep = VarianceReport.from_samples("I+DICE", np.zeros((5, 4)))
    assert rep.aggregate_relative_std == 0.0 and rep.norm_relative_std == 0.0
    with pytest.raises(ValueError):
        VarianceReport.from_samples("I+DICE", np.zeros((1, 4)))


def test_variance_stats_match_two_pass():
    samples = np.random.default_rng(0).normal(size=(50, 6)) * [1, 2, 3, 4, 5, 6] + 1.0
    rep = VarianceReport.from_samples("x", samples)
    K = len(samples)
    mean = [sum(samples[:, j]) / K for j in range(6)]
    std = [math.sqrt(sum((samples[i, j] - mean[j]) ** 2 for i in range(K)) / (K - 1)) for j in range(6)]
    np.testing.assert_allclose(rep.mean, mean, rtol=0, atol=1e-12)
    np.testing.assert_allclose(rep.std, std, rtol=0, atol=1e-12)
    np.testing.assert_allclose(rep.relative_std, np.array(std) / (np.abs(mean) + 1e-8), atol=1e-12)


def test_variance_uses_same_theta_and_streams():
    c = preset("variance")
    c.estimator.variance_tags = ["I+LVC", "I+LVC"]
    a, b = run_variance(c, K=5)
    np.testing.assert_array_equal(a.samples, b.samples)


# -- curves and train --------------------------------------------------------


def _records(n, dist=False):
    return [IterationRecord(i, 0.1 * i + 1 / 3, 2.0 / 3 - i, math.pi * i, 1e-7 * i,
                            (math.e * i) if dist else None) for i in range(n)]


def test_export_curves_shapes(tmp_path):
    p = export_curves([], tmp_path / "e.csv")
    assert p.read_text() == "iteration,pre_return,post_return,grad_norm,mean_kl\n"
    export_curves(_records(3), tmp_path / "t.csv")
    assert len((tmp_path / "t.csv").read_text().splitlines()) == 4


@pytest.mark.parametrize("dist", [False, True])
def test_curves_round_trip(tmp_path, dist):
    recs = _records(5, dist)
    export_curves(recs, tmp_path / "c.csv")
    back = read_curves(tmp_path / "c.csv")
    for a, b in zip(recs, back):
        assert (a.iteration, a.pre_return, a.post_return, a.grad_norm, a.mean_kl, a.distance_to_optimum) == \
            (b.iteration, b.pre_return, b.post_return, b.grad_norm, b.mean_kl, b.distance_to_optimum)
    with open(tmp_path / "c.csv") as fh:
        header = next(csv.reader(fh))
    assert header[:5] == ["iteration", "pre_return", "post_return", "grad_norm", "mean_kl"]


def test_export_curves_io_error(tmp_path):
    with pytest.raises(OSError, match="missing"):
        export_curves(_records(1), tmp_path / "missing" / "c.csv")


def _tiny(family="point2d"):
    c = preset("point1d" if family == "point1d" else "desk")
    c.env.horizon = 10
    c.optimizer.tasks_per_iter = 2
    c.optimizer.traj_per_task = 4
    c.run.iterations = 3
    c.run.seeds = [0, 1]
    return c


def test_run_train_files_and_refusal(tmp_path):
    out = tmp_path / "run"
    man = run_train(_tiny(), out)
    assert sorted(p.name for p in out.iterdir()) == ["curves_seed0.csv", "curves_seed1.csv", "manifest.json"]
    assert json.loads((out / "manifest.json").read_text())["seeds"] == [0, 1]
    assert man["files"] == ["curves_seed0.csv", "curves_seed1.csv"]
    with pytest.raises(FileExistsError):
        run_train(_tiny(), out)
    run_train(_tiny(), out, force=True)


def test_run_train_is_byte_identical(tmp_path):
    run_train(_tiny(), tmp_path / "a")
    run_train(_tiny(), tmp_path / "b")
    for name in ("curves_seed0.csv", "curves_seed1.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_point1d_preset_has_distance_column(tmp_path):
    run_train(_tiny("point1d"), tmp_path / "r", seeds=[0])
    with open(tmp_path / "r" / "curves_seed0.csv") as fh:
        header = next(csv.reader(fh))
    assert "post_return" in header and "distance_to_optimum" in header


# -- command line ------------------------------------------------------------


def test_cli_verify_and_train(tmp_path, capsys):
    assert cli.main(["verify"]) == 0
    assert "PASS" in capsys.readouterr().out
    cfg = tmp_path / "c.ini"
    save(_tiny(), cfg)
    out = tmp_path / "o"
    assert cli.main(["train", "--config", str(cfg), "--seed", "3", "--out", str(out)]) == 0
    assert (out / "curves_seed3.csv").exists()
    assert cli.main(["train", "--config", str(cfg), "--seed", "3", "--out", str(out)]) == 2
    assert cli.main(["train", "--config", str(cfg), "--seed", "3", "--out", str(out), "--force"]) == 0


def test_cli_variance_writes_json(tmp_path, capsys):
    cfg = tmp_path / "v.ini"
    c = preset("variance")
    c.run.variance_k = 3
    save(c, cfg)
    out = tmp_path / "v.json"
    assert cli.main(["variance", "--config", str(cfg), "--out", str(out)]) == 0
    data = json.loads(out.read_text())
    assert [d["tag"] for d in data] == ["I+DICE", "I+LVC"]


def test_cli_bad_config(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[run]\nbogus = 1\n")
    assert cli.main(["verify", "--config", str(cfg)]) == 2
    assert "bogus" in capsys.readouterr().err


@pytest.mark.slow
def test_point1d_reference_is_a_local_maximum():
    from promplab.lab import estimate_meta_objective
    c = preset("point1d")
    opt = np.array(c.run.reference_theta)
    at = estimate_meta_objective(c, opt, n_inner=100, n_eval=100, seed=9)
    for d in ([0.3, 0.0], [-0.3, 0.0], [0.0, 0.3], [0.0, -0.3]):
        assert estimate_meta_objective(c, opt + d, n_inner=100, n_eval=100, seed=9) < at
