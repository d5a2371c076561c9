import numpy as np
import pytest
import sympy as sp

from hcpinn import auxfields as af
from hcpinn import diffcore as dc
from hcpinn.geometry import (BoxInterface, Circle, InterfaceGeometry, PolarStar, sample_boundary,
                             sample_interface, sample_interior)
from hcpinn.problems import build_example
from hcpinn.train import LbfgsConfig
from conftest import central_grad, central_hess

SQUARE = ((-1.0, -1.0), (1.0, 1.0))


def star_phi():
    return af.phi_cubic_blend(af.star_cubic_blend_spec(), scale=-20.0, offset=1.0)


def test_phi_circle_values():
    phi = af.phi_circle(0.5)
    assert phi.value([[0.25, 0.0]], -1)[0] == pytest.approx(0.25)
    assert phi.value([[0.8, 0.1]], 1)[0] == 1.0
    x = np.array([[0.5, 0.0]])
    assert phi.value(x, 1)[0] - phi.value(x, -1)[0] == pytest.approx(0.0, abs=1e-15)


def test_phi_circle_rejects_bad_radius():
    with pytest.raises(ValueError):
        af.phi_circle(0.0)


def test_phi_box_values():
    phi = af.phi_box((0.0, 0.0), (1.0, 1.0))
    assert phi.value([[0.5, 0.5]], -1)[0] == pytest.approx(0.0625)
    assert phi.value([[1.5, 0.5]], 1)[0] == 0.0
    assert phi.value([[0.0, 0.5]], -1)[0] == 0.0


def test_phi_star_values():
    phi = star_phi()
    assert phi.jet(np.array([[0.0, 0.0]]), -1).value[0] == pytest.approx(0.84, abs=1e-14)
    assert phi.jet(np.array([[0.4, 0.0]]), -1).value[0] == pytest.approx(0.86, abs=1e-12)
    assert phi.jet(np.array([[0.5, 0.0]]), -1).value[0] == pytest.approx(1.0, abs=1e-12)
    assert phi.jet(np.array([[0.9, 0.0]]), 1).value[0] == 1.0


def test_cubic_blend_spec_validation():
    psi = [af.ClosedFormField(sp.Integer(1))]
    with pytest.raises(af.ValidationError):
        af.CubicBlendSpec(psi, [0.25], 0.3, af.never)
    with pytest.raises(af.ValidationError):
        af.CubicBlendSpec(psi, [0.25], 0.0, af.never)


def test_cubic_blend_continuity_across_clamp_level(rng):
    # psi = c is the curve r = 0.3 + 0.2 sin(5 theta); cross it along rays
    phi = star_phi()
    f = lambda x: phi.jet(np.atleast_2d(x), -1).value[0]
    for th in rng.uniform(0, 2 * np.pi, 100):
        d = np.array([np.cos(th), np.sin(th)])
        r = 0.3 + 0.2 * np.sin(5 * th)
        xin, xout = (r - 1e-9) * d, (r + 1e-9) * d
        assert abs(f(xin) - f(xout)) <= 1e-8
        gin = central_grad(f, (r - 1e-5) * d, 1e-7)
        gout = central_grad(f, (r + 1e-5) * d, 1e-7)
        assert np.max(np.abs(gin - gout)) <= 1e-4


def test_cubic_blend_jets_match_finite_differences(rng):
    phi = star_phi()
    f = lambda x: phi.jet(np.atleast_2d(x), -1).value[0]
    th = rng.uniform(0, 2 * np.pi, 40)
    r = (0.5 + 0.2 * np.sin(5 * th)) - rng.uniform(0.01, 0.19, 40)
    for x in np.stack([r * np.cos(th), r * np.sin(th)], 1):
        j = phi.jet(x[None], -1)
        np.testing.assert_allclose(j.grad[0], central_grad(f, x, 1e-6), rtol=1e-6, atol=1e-8)
        # fourth derivatives of the star level function are large, so difference the gradient
        fd_hess = np.stack([central_grad(lambda z: phi.jet(z[None], -1).grad[0, i], x, 1e-6) for i in range(2)])
        np.testing.assert_allclose(j.hess[0], fd_hess, rtol=1e-4, atol=1e-6)


def test_closed_form_jets_match_finite_differences(rng):
    g = build_example("1").option1_aux().g
    f = lambda x: g.value(np.atleast_2d(x), 1)[0]
    for x in rng.uniform(-1, 1, (50, 2)):
        j = g.jet(x[None], 1)
        np.testing.assert_allclose(j.grad[0], central_grad(f, x), rtol=1e-6, atol=1e-10)
        np.testing.assert_allclose(j.hess[0], central_hess(f, x), rtol=1e-4, atol=1e-6)


def test_mixed_side_evaluation():
    phi = af.phi_circle(0.5)
    x = np.array([[0.1, 0.0], [0.9, 0.0], [0.2, 0.2]])
    v = phi.value(x, np.array([-1, 1, -1]))
    np.testing.assert_allclose(v, [0.04, 1.0, 0.32])


def test_verify_aux_example1():
    p = build_example("1")
    rep = af.verify_aux(p.option1_aux(), p.geometry, 1000, seed=0)
    assert rep.passed, rep.checks
    assert rep.boundary_residual <= 1e-12 and rep.jump_residual <= 1e-12
    assert rep.phi_flux_min == pytest.approx(4.0, abs=1e-12)


def test_example1_g_matches_boundary_data():
    p = build_example("1")
    aux = p.option1_aux()
    xb = sample_boundary(p.geometry, 10_000, 3)
    assert np.max(np.abs(aux.g.value(xb, 1) - p.h0(xb))) <= 1e-12


def test_h_vanishes_on_boundary_exactly():
    h = af.ClosedFormField((af.X1 ** 2 - 1) * (af.X2 ** 2 - 1))
    xb = sample_boundary(build_example("1").geometry, 500, 1)
    assert np.max(np.abs(h.value(xb, 1))) == 0.0


@pytest.mark.parametrize("which", ["circle", "box", "star"])
def test_auxiliary_invariants_for_each_interface(which):
    if which == "circle":
        geom = InterfaceGeometry(*SQUARE, Circle((0, 0), 0.5), 1.0, 10.0)
        phi, null = af.phi_circle(0.5), af.never
    elif which == "box":
        geom = InterfaceGeometry(*SQUARE, BoxInterface((-0.5, -0.5), (0.5, 0.5)), 1.0, 10.0)
        phi, null = af.phi_box((-0.5, -0.5), (0.5, 0.5)), af.box_corner_null_set((-0.5, -0.5), (0.5, 0.5))
    else:
        geom = InterfaceGeometry(*SQUARE, PolarStar(0.5, 0.2, 5), 1.0, 10.0)
        phi, null = star_phi(), af.never
    zero = lambda x, t=None: np.zeros(np.atleast_2d(x).shape[0])
    aux = af.AuxiliaryField(af.ClosedFormField(sp.Integer(0)), af.ClosedFormField((af.X1 ** 2 - 1) * (af.X2 ** 2 - 1)),
                            phi, zero, zero, null_set=null)
    rep = af.verify_aux(aux, geom, 1000, seed=2)
    assert rep.passed, rep.checks


def test_verify_aux_reports_failure():
    p = build_example("1")
    aux = p.option1_aux()
    aux.phi = af.ClosedFormField(sp.Integer(1))
    rep = af.verify_aux(aux, p.geometry, 200, seed=0)
    assert not rep.passed and not rep.checks["phi_flux_nonzero"]


def test_parabolic_initial_residual():
    p = build_example("4")
    rep = af.verify_aux(p.option1_aux(), p.geometry, 300, seed=0, T=p.T)
    assert rep.initial_residual == 0.0 and rep.passed


# --- Option II pretraining --------------------------------------------------

def zero_output(sizes, seed):
    p = dc.init_mlp(sizes, seed)
    w = list(p.weights)
    b = list(p.biases)
    w[-1] = np.zeros_like(w[-1])
    b[-1] = np.zeros_like(b[-1])
    return dc.MlpParams(w, b)


def test_g_loss_zero_at_init_for_zero_data():
    xb = np.random.default_rng(0).uniform(-1, 1, (10, 2))
    loss, _ = dc.loss_param_grad(lambda tr: af.g_loss(tr[0], xb, np.zeros(10), np.zeros((0, 2)), np.zeros(0),
                                                      w2g=0.0), [zero_output([2, 8, 1], 0)])
    assert loss == 0.0


def test_h_loss_of_exact_hbar_is_zero():
    x = np.random.default_rng(1).uniform(-1, 1, (50, 2))
    xb = sample_boundary(build_example("1").geometry, 50, 1)
    assert np.max(np.abs(af.hbar_cosine(xb))) < 1e-15
    assert np.max(np.abs(af.hbar_cosine(x) - np.cos(np.pi * x[:, 0] / 2) * np.cos(np.pi * x[:, 1] / 2))) == 0


def test_train_g_example1_boundary_fit():
    p = build_example("1")
    xb = sample_boundary(p.geometry, 256, 0)
    params, rep = af.train_g(dc.init_mlp([2, 100, 1], 0), xb, p.h0(xb), cfg=LbfgsConfig(4000, history=100))
    losses = [row["loss"] for row in rep.history]
    assert np.all(np.diff(losses) <= 1e-15 * np.abs(losses[:-1]) + 1e-300)
    fresh = sample_boundary(p.geometry, 512, 1)
    mse = np.mean((dc.mlp_eval(params, fresh) - p.h0(fresh)) ** 2)
    assert mse <= 1e-8


def test_train_h_thresholds():
    geom = build_example("1").geometry
    xi, _ = sample_interior(geom, 1024, 0)
    xb = sample_boundary(geom, 256, 0)
    params, _ = af.train_h(dc.init_mlp([2, 100, 1], 1), xi, xb, cfg=LbfgsConfig(4000, history=100))
    fresh_b = sample_boundary(geom, 400, 5)
    fresh_i, _ = sample_interior(geom, 1000, 5)
    assert np.max(np.abs(dc.mlp_eval(params, fresh_b))) <= 1e-3
    h = dc.mlp_eval(params, fresh_i)
    assert np.all(np.abs(h) > 0)
    # the cosine target itself drops below 1e-3 within ~6e-4 of the boundary
    away = np.min(1 - np.abs(fresh_i), axis=1) >= 0.05
    assert np.min(np.abs(h[away])) > 1e-3


def test_train_phi_rejects_zero_target():
    geom = build_example("1").geometry
    xg, n = sample_interface(geom, 8, 0)
    with pytest.raises(af.PreconditionError):
        af.train_phi(dc.init_mlp([3, 5, 1], 0), xg, n, geom, out_target=0.0, in_target=0.0)


@pytest.mark.slow
def test_train_phi_full_recipe():
    geom = build_example("1").geometry
    xg, n = sample_interface(geom, 256, 0)
    params, _ = af.train_phi(dc.init_mlp([3, 200, 1], 0), xg, n, geom)
    field = af.NetworkField(params, dcsnn=True)
    fx, fn = sample_interface(geom, 1000, 9)
    assert np.max(np.abs(field.value(fx, 1) - field.value(fx, -1))) <= 1e-3
    assert np.min(np.abs(af.flux_jump(field, geom, fx, fn))) >= 1.0


def test_network_field_roundtrip_and_jet(tmp_path, rng):
    f = af.NetworkField(dc.init_mlp([3, 6, 1], 4), dcsnn=True, name="phi")
    f.save(tmp_path / "phi.json")
    g = af.NetworkField.load(tmp_path / "phi.json")
    x = rng.uniform(-1, 1, (5, 2))
    np.testing.assert_array_equal(f.value(x, -1), g.value(x, -1))
    assert g.dcsnn
    j = g.jet(x, 1)
    fn = lambda z: g.value(np.atleast_2d(z), 1)[0]
    for k in range(5):
        np.testing.assert_allclose(j.grad[k], central_grad(fn, x[k]), rtol=1e-6, atol=1e-10)
        np.testing.assert_allclose(j.hess[k], central_hess(fn, x[k]), rtol=1e-4, atol=1e-6)
