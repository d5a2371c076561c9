import dataclasses

import numpy as np
import pytest
import sympy as sp

from hcpinn import diffcore as dc
from hcpinn.auxfields import ClosedFormField
from hcpinn.problems import build_example
from hcpinn.residuals import LossWeights
from hcpinn.train import (AdamConfig, ConfigError, HardConstraintError, LbfgsConfig, NetConfig, adam_run,
                          default_samples, geometric_schedule, lbfgs_run, run_algorithm1, run_algorithm2)


def vec_params(v):
    v = np.asarray(v, dtype=float)
    return dc.MlpParams([v[:-1][None, :]], [v[-1:]])


def as_vec(p):
    return p.flat()


def quadratic(A=None, b=None):
    def fg(plist):
        x = as_vec(plist[0])
        if A is None:
            return float(x @ x), [plist[0].with_flat(2 * x)]
        r = A @ x - b
        return float(0.5 * x @ A @ x - b @ x), [plist[0].with_flat(r)]
    return fg


def rosenbrock(plist):
    x, y = as_vec(plist[0])
    f = (1 - x) ** 2 + 100 * (y - x * x) ** 2
    g = np.array([-2 * (1 - x) - 400 * x * (y - x * x), 200 * (y - x * x)])
    return float(f), [plist[0].with_flat(g)]


# --- configs ----------------------------------------------------------------

def test_adam_config_validation():
    with pytest.raises(ConfigError):
        AdamConfig(10, schedule=[(5, 1e-3)])
    with pytest.raises(ConfigError):
        AdamConfig(10, schedule=[(0, 1e-3), (0, 1e-4)])
    with pytest.raises(ConfigError):
        AdamConfig(10, beta1=1.0)
    cfg = AdamConfig(100, schedule=[(0, 1e-2), (50, 1e-3)])
    assert cfg.lr(0) == 1e-2 and cfg.lr(49) == 1e-2 and cfg.lr(50) == 1e-3


def test_lbfgs_config_validation():
    with pytest.raises(ConfigError):
        LbfgsConfig(10, c1=0.5, c2=0.4)


def test_geometric_schedule():
    s = geometric_schedule(1e-3, 3e-5, 40000, 4)
    assert [a for a, _ in s] == [0, 10000, 20000, 30000]
    assert s[0][1] == pytest.approx(1e-3) and s[-1][1] == pytest.approx(3e-5)
    ratios = [s[k + 1][1] / s[k][1] for k in range(3)]
    assert np.allclose(ratios, ratios[0])


# --- ADAM -------------------------------------------------------------------

def test_adam_quadratic_converges():
    rep = adam_run(quadratic(), [vec_params(np.linspace(-1, 1, 11))], AdamConfig(500, [(0, 0.1)]))
    assert np.linalg.norm(as_vec(rep.params[0])) <= 1e-3
    assert len(rep.history) == rep.iterations == 500 and rep.ok


def test_adam_zero_gradient_leaves_params():
    p0 = vec_params([0.3, -0.2, 0.1])
    rep = adam_run(lambda pl: (1.0, [pl[0].with_flat(np.zeros(3))]), [p0], AdamConfig(20))
    np.testing.assert_array_equal(as_vec(rep.params[0]), as_vec(p0))


def test_adam_deterministic():
    run = lambda: adam_run(rosenbrock, [vec_params([-1.2, 1.0])], AdamConfig(200, [(0, 1e-2)], seed=3))
    a, b = run(), run()
    assert a.history == b.history
    np.testing.assert_array_equal(as_vec(a.params[0]), as_vec(b.params[0]))


def test_adam_divergence_returns_last_finite_iterate():
    def fg(plist):
        x = as_vec(plist[0])
        if x[0] > 0.5:
            raise dc.NonFiniteLossError("toy", 0, None)
        return float(-x[0]), [plist[0].with_flat(np.array([-1.0, 0.0]))]
    rep = adam_run(fg, [vec_params([0.0, 0.0])], AdamConfig(100, [(0, 0.1)]))
    assert rep.status == "diverged" and not rep.ok
    assert np.isfinite(rep.final_loss)
    assert as_vec(rep.params[0])[0] <= 0.5
    assert rep.iterations == len(rep.history) < 100


# --- L-BFGS -----------------------------------------------------------------

def test_lbfgs_convex_quadratic():
    rng = np.random.default_rng(0)
    Q = rng.normal(size=(10, 10))
    A = Q @ Q.T + np.eye(10)
    b = rng.normal(size=10)
    fg = quadratic(A, b)
    rep = lbfgs_run(fg, [vec_params(np.zeros(10))], LbfgsConfig(50, gtol=1e-8, debug=True))
    x = as_vec(rep.params[0])
    assert np.linalg.norm(A @ x - b) <= 1e-8
    assert rep.iterations <= 50


def test_lbfgs_stationary_start():
    rep = lbfgs_run(quadratic(), [vec_params(np.zeros(4))], LbfgsConfig(20))
    assert rep.status == "converged" and rep.iterations == 0
    assert np.all(as_vec(rep.params[0]) == 0)


def test_lbfgs_rosenbrock():
    rep = lbfgs_run(rosenbrock, [vec_params([-1.2, 1.0])], LbfgsConfig(200, debug=True))
    assert rep.final_loss < 1e-6
    losses = rep.losses()
    assert np.all(np.diff(losses) <= 0)


# --- algorithms -------------------------------------------------------------

def small_samples(problem, seed=0):
    return default_samples(problem, 64, 32, 32, seed, n_times=4)


def test_algorithm1_zero_iterations():
    p = build_example("1")
    res = run_algorithm1(p, NetConfig([6], 0), LossWeights(), small_samples(p), AdamConfig(0))
    assert res.report.history == [] and res.report.iterations == 0
    u = res.u(np.array([[0.1, 0.2], [0.9, 0.9]]))
    assert np.all((u >= -1) & (u <= 1))


def test_algorithm1_reproducible_and_decreasing():
    p = build_example("1")
    w = LossWeights(w_y_b=2.0, w_p_b=10.0)
    run = lambda: run_algorithm1(p, NetConfig([8], 4), w, small_samples(p), AdamConfig(60, [(0, 1e-2)]))
    a, b = run(), run()
    assert a.report.history == b.report.history
    assert a.report.losses()[-1] < a.report.losses()[0]


def test_algorithm1_rejects_other_variants():
    p = build_example("3")
    with pytest.raises(ConfigError):
        run_algorithm1(p, NetConfig([4]), LossWeights(), small_samples(p), AdamConfig(1))


@pytest.mark.parametrize("example", ["1", "3", "4"])
def test_algorithm2_untrained_satisfies_hard_constraints(example):
    p = build_example(example)
    res = run_algorithm2(p, p.option1_aux(), NetConfig([8], 1), LossWeights(), small_samples(p), AdamConfig(0))
    assert res.fields.boundary_residual(500, 0) <= 1e-12
    assert res.fields.jump_residual(500, 0) <= 1e-12


def test_algorithm2_short_run_with_lbfgs_stage():
    p = build_example("1")
    res = run_algorithm2(p, p.option1_aux(), NetConfig([10], 2), LossWeights(w_y_r=3.0), small_samples(p),
                         AdamConfig(40, [(0, 1e-2)]), LbfgsConfig(5), check_every=10)
    h = res.report.history
    assert len(h) == res.report.iterations
    assert h[-1].get("stage") == "lbfgs" and "stage" not in h[0]
    assert all(np.isfinite(r["loss"]) for r in h)
    assert h[-1]["loss"] < h[0]["loss"]
    # the p core is untouched by the L-BFGS stage
    assert res.fields.boundary_residual(300, 1) <= 1e-12


def test_algorithm2_detects_broken_hard_constraint():
    p = build_example("1")
    aux = dataclasses.replace(p.option1_aux(), g=ClosedFormField(sp.Integer(0), name="g"))
    with pytest.raises(HardConstraintError):
        run_algorithm2(p, aux, NetConfig([4], 0), LossWeights(), small_samples(p), AdamConfig(2), check_every=1)


def test_geometric_schedule_short_runs():
    assert geometric_schedule(1e-3, 1e-5, 0, 4) == [(0, 1e-3)]
    s = geometric_schedule(1e-3, 1e-5, 3, 4)
    starts = [a for a, _ in s]
    assert starts == sorted(set(starts)) and starts[0] == 0
    AdamConfig(3, s)
