import csv
import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hcpinn import diffcore as dc
from hcpinn import residuals as rs
from hcpinn.network import DcsnnField, HardConstraintField, hc_interface_jump, hc_jet_batch, init_core
from hcpinn.problems import build_example
from hcpinn.train import default_samples


def zero(x, side=None, t=None):
    return np.zeros(np.atleast_2d(x).shape[0])


def hard_pair(problem, seed=0, hidden=(8,)):
    aux = problem.option1_aux()
    n_in = 4 if problem.parabolic else 3
    ky, kp = ("state_parabolic", "adjoint_parabolic") if problem.parabolic else ("state", "adjoint")
    y = HardConstraintField(aux, init_core(n_in, list(hidden), seed), ky, problem.T, problem.geometry)
    p = HardConstraintField(aux, init_core(n_in, list(hidden), seed + 1), kp, problem.T, problem.geometry)
    return y, p


def exact_pair(problem):
    aux = problem.option1_aux()
    ky, kp = ("state_parabolic", "adjoint_parabolic") if problem.parabolic else ("state", "adjoint")
    y = HardConstraintField(aux, problem.exact_cores["y"], ky, problem.T, problem.geometry)
    p = HardConstraintField(aux, problem.exact_cores["p"], kp, problem.T, problem.geometry)
    return y, p


# --- projection -------------------------------------------------------------

def test_project_box_examples():
    assert rs.project_box(0.5, -1, 1) == 0.5
    assert rs.project_box(2.0, -1, 1) == 1.0
    assert rs.project_box(-3.0, -1, 1) == -1.0
    with pytest.raises(rs.PreconditionError):
        rs.project_box(0.0, 1.0, -1.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-1e6, 1e6), st.floats(-1e3, 1e3), st.floats(0, 1e3), st.floats(-1e6, 1e6))
def test_project_box_properties(v, lo, width, w):
    hi = lo + width
    out = rs.project_box(v, lo, hi)
    assert lo <= out <= hi
    assert rs.project_box(out, lo, hi) == out
    assert out == min(hi, max(lo, v))
    if w >= v:
        assert rs.project_box(w, lo, hi) >= out


def test_project_box_on_tape_matches_array_form():
    v = dc.Var(np.array([-2.0, 0.25, 3.0]))
    out = rs.project_box(v, -1.0, 1.0)
    np.testing.assert_allclose(out.data, rs.project_box(v.data, -1.0, 1.0))


def test_recover_control_example1():
    p = build_example("1")
    x = np.array([[0.0, 0.0], [0.8, 0.0]])
    pv = p.exact.p_value(x, np.array([-1, 1]))
    assert pv[0] == pytest.approx(1.25)
    assert pv[1] == pytest.approx(-0.0702, abs=1e-4)
    u = rs.recover_control(pv, -1.0, 1.0, 1.0)
    assert u[0] == -1.0
    assert u[1] == pytest.approx(0.0702, abs=1e-4)
    assert rs.recover_control(0.0, -1.0, 1.0, 1.0) == 0.0
    with pytest.raises(rs.PreconditionError):
        rs.recover_control(0.0, -1.0, 1.0, 0.0)


def test_control_bounds_check():
    b = rs.ControlBounds(lambda x, s, t: np.ones(len(x)), lambda x, s, t: np.zeros(len(x)))
    with pytest.raises(rs.PreconditionError):
        b.at(np.zeros((3, 2)))


# --- weights ----------------------------------------------------------------

def test_weights_validation():
    with pytest.raises(ValueError, match="w_p_r"):
        rs.LossWeights(w_p_r=-1.0)
    with pytest.raises(ValueError, match="w_y_b"):
        rs.LossWeights(w_y_b=float("nan"))
    with pytest.raises(ValueError):
        rs.LossWeights.from_dict({"w_q": 1.0})
    w = rs.LossWeights.from_dict({"w_p_Gn": 3})
    assert w.w_p_Gn == 3.0 and w.scaled(2).w_p_Gn == 6.0


# --- exact substitution -----------------------------------------------------

@pytest.mark.parametrize("example", ["1", "1b"])
def test_soft_loss_at_exact_extensions(example):
    p = build_example(example)
    for M in (64, 1024):
        s = default_samples(p, M, M // 4, M // 4, 1)
        y = DcsnnField(p.soft_extensions["y"], p.geometry)
        q = DcsnnField(p.soft_extensions["p"], p.geometry)
        total, terms = rs.SoftEllipticLoss(y, q, s, p, rs.LossWeights()).evaluate()
        assert float(total.data) <= 1e-20, terms


@pytest.mark.parametrize("example,tol", [("1", 1e-20), ("1b", 1e-20), ("3", 1e-20), ("4", 1e-18)])
def test_hard_loss_at_exact(example, tol):
    p = build_example(example)
    s = default_samples(p, 256, 1, 64, 2, n_times=8)
    y, q = exact_pair(p)
    total, terms = rs.hard_loss_for(p)(y, q, s, p, rs.LossWeights()).evaluate()
    assert float(total.data) <= tol, terms
    assert all(v <= tol for v in terms.values())


def test_soft_loss_zero_data_zero_networks():
    p = dataclasses.replace(build_example("1"), f=zero, yd=zero, g0=zero, g1=zero, h0=zero)
    s = default_samples(p, 64, 16, 16, 0)
    net = dc.init_mlp([3, 5, 1], 0)
    net = dc.MlpParams([w * 0 for w in net.weights], [b * 0 for b in net.biases])
    assert rs.loss_soft_elliptic(net, net, s, p, rs.LossWeights()) == 0.0


# --- structure --------------------------------------------------------------

def test_hard_elliptic_matches_independent_assembly():
    p = build_example("1")
    s = default_samples(p, 128, 1, 64, 3)
    y, q = hard_pair(p, seed=4)
    w = rs.LossWeights(w_y_r=1.5, w_y_Gn=0.5, w_p_r=2.0, w_p_Gn=3.0)
    total, terms = rs.HardEllipticLoss(y, q, s, p, w).evaluate()
    beta = p.geometry.beta(s.labels)
    yv, _, yh, _ = hc_jet_batch(y, s.x, s.labels)
    pv, _, ph, _ = hc_jet_batch(q, s.x, s.labels)
    u = np.clip(-pv / p.alpha, -1, 1)
    ry = -np.trace(yh, axis1=1, axis2=2) - (u + p.f(s.x, s.labels)) / beta
    rp = -np.trace(ph, axis1=1, axis2=2) - (yv - p.yd(s.x, s.labels)) / beta
    _, yf = hc_interface_jump(y, s.xg, s.normals)
    _, pf = hc_interface_jump(q, s.xg, s.normals)
    ref = {"w_y_r": 1.5 * np.mean(ry ** 2), "w_y_Gn": 0.5 * np.mean(yf ** 2),
           "w_p_r": 2.0 * np.mean(rp ** 2), "w_p_Gn": 3.0 * np.mean(pf ** 2)}
    for k, v in ref.items():
        assert terms[k] == pytest.approx(v, rel=1e-12)
    assert float(total.data) == pytest.approx(sum(ref.values()), rel=1e-12)


@pytest.mark.parametrize("example", ["1", "3", "4"])
def test_weight_linearity_and_nonnegativity(example):
    p = build_example(example)
    s = default_samples(p, 64, 1, 32, 5, n_times=4)
    y, q = hard_pair(p, seed=8)
    cls = rs.hard_loss_for(p)
    base = cls(y, q, s, p, rs.LossWeights()).value()
    assert base > 0
    assert cls(y, q, s, p, rs.LossWeights().scaled(2.0)).value() == pytest.approx(2 * base, rel=1e-14)


def test_soft_weight_linearity():
    p = build_example("1")
    s = default_samples(p, 64, 16, 16, 5)
    y = DcsnnField(dc.init_mlp([3, 6, 1], 0), p.geometry)
    q = DcsnnField(dc.init_mlp([3, 6, 1], 1), p.geometry)
    a = rs.SoftEllipticLoss(y, q, s, p, rs.LossWeights()).value()
    b = rs.SoftEllipticLoss(y, q, s, p, rs.LossWeights().scaled(2.0)).value()
    assert b == pytest.approx(2 * a, rel=1e-14) and a > 0


def test_zero_flux_weights_leave_residual_terms():
    p = build_example("1")
    s = default_samples(p, 64, 1, 32, 6)
    y, q = hard_pair(p, seed=2)
    w = rs.LossWeights(w_y_Gn=0.0, w_p_Gn=0.0)
    total, terms = rs.HardEllipticLoss(y, q, s, p, w).evaluate()
    assert terms["w_y_Gn"] == terms["w_p_Gn"] == 0.0
    assert float(total.data) == pytest.approx(terms["w_y_r"] + terms["w_p_r"], rel=1e-15)


def test_permutation_invariance():
    p = build_example("1")
    s = default_samples(p, 96, 1, 32, 7)
    y, q = hard_pair(p, seed=3)
    a = rs.HardEllipticLoss(y, q, s, p, rs.LossWeights()).value()
    b = rs.HardEllipticLoss(y, q, s.permuted(11), p, rs.LossWeights()).value()
    assert b == pytest.approx(a, rel=1e-12)


def test_interface_control_collapsed_bounds():
    p = dataclasses.replace(build_example("3"), ua=zero, ub=zero)
    s = default_samples(p, 64, 1, 48, 4)
    y, q = hard_pair(p, seed=6)
    _, terms = rs.HardInterfaceControlLoss(y, q, s, p, rs.LossWeights()).evaluate()
    _, yf = hc_interface_jump(y, s.xg, s.normals)
    assert terms["w_y_Gn"] == pytest.approx(np.mean((yf - p.g1(s.xg)) ** 2), rel=1e-12)


def test_interface_control_uses_bounds_on_interface():
    # at the exact solution p* = 0 on the interface, so the target is max(sin 2 pi x1, 0) - that is -g1
    p = build_example("3")
    xg = np.array([[0.5 * np.cos(0.3), 0.5 * np.sin(0.3)]])
    assert p.u_exact(xg)[0] == pytest.approx(max(np.sin(2 * np.pi * xg[0, 0]), 0.0))
    assert p.g1(xg)[0] == pytest.approx(-p.u_exact(xg)[0])


def test_losses_reject_wrong_variant():
    p1, p3 = build_example("1"), build_example("3")
    s = default_samples(p1, 16, 1, 8, 0)
    y, q = hard_pair(p1)
    with pytest.raises(rs.PreconditionError):
        rs.HardInterfaceControlLoss(y, q, s, p1, rs.LossWeights())
    with pytest.raises(rs.PreconditionError):
        rs.HardEllipticLoss(y, q, s, p3, rs.LossWeights())
    with pytest.raises(rs.PreconditionError):
        rs.HardParabolicLoss(y, q, s, build_example("4"), rs.LossWeights())


def test_nonfinite_term_names_the_term():
    def bad_f(x, side=None, t=None):
        out = np.zeros(np.atleast_2d(x).shape[0])
        out[3] = np.nan
        return out
    p = dataclasses.replace(build_example("1"), f=bad_f)
    s = default_samples(p, 16, 1, 8, 0)
    y, q = hard_pair(p)
    with pytest.raises(dc.NonFiniteLossError) as err:
        rs.HardEllipticLoss(y, q, s, p, rs.LossWeights()).value()
    assert "y_residual" in str(err.value) and err.value.index == 3


# --- parameter gradients ----------------------------------------------------

def _check_param_grad(loss, params, rng, n_coords=12):
    fg = loss.objective()
    val, grads, _ = fg(params)
    flats = [p.flat() for p in params]
    scale = max(np.max(np.abs(g.flat())) for g in grads)
    for k, (p, g) in enumerate(zip(params, grads)):
        for i in rng.choice(p.size, size=min(n_coords, p.size), replace=False):
            def at(delta):
                v = flats[k].copy()
                v[i] += delta
                trial = list(params)
                trial[k] = p.with_flat(v)
                return fg(trial)[0]
            fd = (at(1e-6) - at(-1e-6)) / 2e-6
            assert g.flat()[i] == pytest.approx(fd, rel=1e-5, abs=1e-7 * scale)


@pytest.mark.parametrize("example", ["1", "3", "4"])
def test_hard_loss_param_gradients(example, rng):
    p = build_example(example)
    s = default_samples(p, 24, 1, 12, 1, n_times=3)
    y, q = hard_pair(p, seed=9, hidden=(6,))
    loss = rs.hard_loss_for(p)(y, q, s, p, rs.LossWeights(w_p_Gn=3.0))
    _check_param_grad(loss, [y.core.params, q.core.params], rng)


def test_soft_loss_param_gradients(rng):
    p = build_example("1")
    s = default_samples(p, 24, 8, 8, 1)
    y = DcsnnField(dc.init_mlp([3, 6, 1], 2), p.geometry)
    q = DcsnnField(dc.init_mlp([3, 6, 1], 3), p.geometry)
    loss = rs.SoftEllipticLoss(y, q, s, p, rs.LossWeights())
    _check_param_grad(loss, [y.core.params, q.core.params], rng)


# --- output -----------------------------------------------------------------

def test_term_csv_long_format(tmp_path):
    hist = [{"iteration": 0, "loss": 2.0, "w_y_r": 1.5, "w_p_r": 0.5},
            {"iteration": 1, "loss": 1.0, "w_p_r": 0.25, "w_y_r": 0.75}]
    rs.write_term_csv(hist, tmp_path / "loss.csv")
    rows = list(csv.reader(open(tmp_path / "loss.csv")))
    assert rows[0] == ["iteration", "term", "value"]
    assert [r[1] for r in rows[1:4]] == ["loss", "w_y_r", "w_p_r"]
    assert rows[-1] == ["1", "w_p_r", "0.25"]
