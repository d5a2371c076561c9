"""The auxiliary triple (g, h, phi) used by the hard-constraint composites.

g lifts the boundary values and the value jump across the interface, h
vanishes on the outer boundary, and phi is continuous across the interface
with a nonzero flux jump there.  Fields are evaluated one-sided: every call
carries a side label per point (-1 inner, +1 outer) which selects the
branch.  Fields may be closed forms (sympy expressions lambdified once),
piecewise constructions built from level functions, or pretrained networks.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import sympy as sp

from . import diffcore as dc
from .geometry import InterfaceGeometry, sample_boundary, sample_interface, sample_interior

X1, X2, T = sp.symbols("x1 x2 t", real=True)
SPACE = (X1, X2)

TOL_CLOSED = 1e-12
TOL_NETWORK = 1e-3
DELTA_PHI = 1e-3


class PreconditionError(ValueError):
    pass


class ValidationError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, msg, iteration=None):
        self.iteration = iteration
        super().__init__(msg if iteration is None else f"{msg} (iteration {iteration})")


@dataclass
class FieldJet:
    """One-sided value, spatial gradient/Hessian and time derivative at M points."""

    value: np.ndarray
    grad: np.ndarray
    hess: np.ndarray
    dt: np.ndarray | None = None

    def take(self, idx) -> "FieldJet":
        return FieldJet(self.value[idx], self.grad[idx], self.hess[idx],
                        None if self.dt is None else self.dt[idx])

    @staticmethod
    def zeros(m: int, d: int, with_dt=False) -> "FieldJet":
        return FieldJet(np.zeros(m), np.zeros((m, d)), np.zeros((m, d, d)), np.zeros(m) if with_dt else None)


def _side_array(side, m: int) -> np.ndarray:
    s = np.asarray(side)
    return np.full(m, int(s)) if s.ndim == 0 else s.astype(int)


class ScalarField:
    """Scalar field on the closed domain, evaluated one-sided."""

    time_dependent = False
    kind = "abstract"

    def jet(self, x: np.ndarray, side, t=None) -> FieldJet:
        raise NotImplementedError

    def value(self, x: np.ndarray, side, t=None) -> np.ndarray:
        return self.jet(x, side, t).value

    def describe(self) -> dict:
        return {"kind": self.kind}


class _Lambdified:
    """value, gradient, Hessian and time derivative of one sympy expression."""

    def __init__(self, expr, space=SPACE, time=None):
        expr = sp.sympify(expr)
        self.space = tuple(space)
        self.time = time
        args = self.space + ((time,) if time is not None else ())
        d = len(self.space)
        grad = [sp.diff(expr, v) for v in self.space]
        hess = [[sp.diff(grad[i], self.space[j]) for j in range(d)] for i in range(d)]
        dt = sp.diff(expr, time) if time is not None else sp.Integer(0)
        self.expr = expr
        self._f = sp.lambdify(args, expr, "numpy")
        self._g = [sp.lambdify(args, e, "numpy") for e in grad]
        self._h = [[sp.lambdify(args, hess[i][j], "numpy") for j in range(d)] for i in range(d)]
        self._t = sp.lambdify(args, dt, "numpy")

    def _args(self, x, t):
        args = [x[:, i] for i in range(x.shape[1])]
        if self.time is not None:
            args.append(np.broadcast_to(np.zeros(x.shape[0]) if t is None else np.asarray(t, float), (x.shape[0],)))
        return args

    @staticmethod
    def _full(v, m):
        return np.broadcast_to(np.asarray(v, dtype=float), (m,)).copy()

    def value(self, x, t=None):
        return self._full(self._f(*self._args(x, t)), x.shape[0])

    def jet(self, x, t=None) -> FieldJet:
        m, d = x.shape
        a = self._args(x, t)
        val = self._full(self._f(*a), m)
        grad = np.stack([self._full(g(*a), m) for g in self._g], axis=1)
        hess = np.empty((m, d, d))
        for i in range(d):
            for j in range(i, d):
                hess[:, i, j] = self._full(self._h[i][j](*a), m)
                hess[:, j, i] = hess[:, i, j]
        dt = self._full(self._t(*a), m) if self.time is not None else None
        return FieldJet(val, grad, hess, dt)


class ClosedFormField(ScalarField):
    """Piecewise closed form: one sympy expression per side."""

    kind = "closed_form"

    def __init__(self, minus, plus=None, time_dependent=False, name=""):
        plus = minus if plus is None else plus
        self.time_dependent = time_dependent
        tvar = T if time_dependent else None
        self.exprs = (sp.sympify(minus), sp.sympify(plus))
        self._minus = _Lambdified(minus, time=tvar)
        self._plus = self._minus if plus is minus else _Lambdified(plus, time=tvar)
        self.name = name

    def _split(self, x, side, t, fn):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        s = _side_array(side, x.shape[0])
        tt = None if t is None else np.broadcast_to(np.asarray(t, float), (x.shape[0],))
        neg = s < 0
        if neg.all():
            return fn(self._minus, x, tt)
        if not neg.any():
            return fn(self._plus, x, tt)
        sel = lambda a, m: None if a is None else a[m]
        lo = fn(self._minus, x[neg], sel(tt, neg))
        hi = fn(self._plus, x[~neg], sel(tt, ~neg))
        return lo, hi, neg

    def jet(self, x, side, t=None) -> FieldJet:
        out = self._split(x, side, t, lambda f, xx, tt: f.jet(xx, tt))
        if isinstance(out, FieldJet):
            return out
        lo, hi, neg = out
        m = neg.size
        res = FieldJet.zeros(m, lo.grad.shape[1], with_dt=lo.dt is not None)
        for part, mask in ((lo, neg), (hi, ~neg)):
            res.value[mask] = part.value
            res.grad[mask] = part.grad
            res.hess[mask] = part.hess
            if res.dt is not None:
                res.dt[mask] = part.dt
        return res

    def value(self, x, side, t=None):
        out = self._split(x, side, t, lambda f, xx, tt: f.value(xx, tt))
        if isinstance(out, np.ndarray):
            return out
        lo, hi, neg = out
        res = np.empty(neg.size)
        res[neg], res[~neg] = lo, hi
        return res

    def describe(self):
        return {"kind": self.kind, "minus": str(self.exprs[0]), "plus": str(self.exprs[1]),
                "time_dependent": self.time_dependent}


@dataclass
class CubicBlendSpec:
    """Ingredients of the cubic clamp construction.

    psi_list: level functions, each positive on the inner side near the
    interface and vanishing on its piece of it.  c_list: lower bounds of
    each psi_i on the edge of the neighborhood U (inner side).  c: clamp
    level, 0 < c < prod(c_list).  neighborhood: predicate for U.
    """

    psi_list: Sequence[ClosedFormField]
    c_list: Sequence[float]
    c: float
    neighborhood: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        if len(self.psi_list) != len(self.c_list) or not self.psi_list:
            raise ValidationError("need one positive constant per level function")
        if any(ci <= 0 for ci in self.c_list):
            raise ValidationError("constants c_i must be positive")
        if not 0 < self.c < float(np.prod(self.c_list)):
            raise ValidationError(f"clamp constant c={self.c} must lie in (0, prod c_i = {np.prod(self.c_list)})")


class CubicBlendField(ScalarField):
    """phi = offset + scale * phi0 where phi0 is the cubic clamp of psi = prod psi_i.

    phi0 = c^3 on the inner side away from the interface (outside U, or where
    psi >= c), c^3 - (c - psi)^3 on the rest of the inner side, 0 on the outer
    side.  Value, gradient and Hessian of the middle branch meet the constant
    branch at psi = c.
    """

    kind = "cubic_blend"

    def __init__(self, spec: CubicBlendSpec, scale: float = 1.0, offset: float = 0.0):
        self.spec, self.scale, self.offset = spec, float(scale), float(offset)

    def _psi_jet(self, x):
        fj = [p.jet(x, -1) for p in self.spec.psi_list]
        v = np.ones(x.shape[0])
        g = np.zeros_like(x)
        h = np.zeros((x.shape[0], x.shape[1], x.shape[1]))
        for j in fj:
            # product rule, accumulated one factor at a time
            h = h * j.value[:, None, None] + v[:, None, None] * j.hess \
                + g[:, :, None] * j.grad[:, None, :] + j.grad[:, :, None] * g[:, None, :]
            g = g * j.value[:, None] + v[:, None] * j.grad
            v = v * j.value
        return v, g, h

    def jet(self, x, side, t=None) -> FieldJet:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        m, d = x.shape
        s = _side_array(side, m)
        c = self.spec.c
        res = FieldJet.zeros(m, d)
        inner = s < 0
        res.value[inner] = c ** 3
        cand = inner & np.asarray(self.spec.neighborhood(x), dtype=bool)
        if cand.any():
            idx = np.flatnonzero(cand)
            pv = np.ones(idx.size)
            for p in self.spec.psi_list:
                pv = pv * p.value(x[idx], -1)
            mid = idx[pv < c]
            if mid.size:
                v, g, h = self._psi_jet(x[mid])
                w = c - v
                res.value[mid] = c ** 3 - w ** 3
                res.grad[mid] = 3 * (w ** 2)[:, None] * g
                res.hess[mid] = 3 * (w ** 2)[:, None, None] * h - 6 * w[:, None, None] * g[:, :, None] * g[:, None, :]
        res.value = self.offset + self.scale * res.value
        res.grad *= self.scale
        res.hess *= self.scale
        return res

    def describe(self):
        return {"kind": self.kind, "c": self.spec.c, "c_list": list(self.spec.c_list),
                "psi": [str(p.exprs[0]) for p in self.spec.psi_list], "scale": self.scale, "offset": self.offset}


class NetworkField(ScalarField):
    """Pretrained network; with ``dcsnn`` the side label is appended as input z."""

    kind = "network"

    def __init__(self, params: dc.MlpParams, dcsnn: bool = False, name: str = ""):
        self.params, self.dcsnn, self.name = params, dcsnn, name

    def _inputs(self, x, side):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if not self.dcsnn:
            return x
        return np.concatenate([x, _side_array(side, x.shape[0])[:, None].astype(float)], axis=1)

    def value(self, x, side, t=None):
        return np.asarray(dc.mlp_eval(self.params, self._inputs(x, side)))

    def jet(self, x, side, t=None) -> FieldJet:
        u = self._inputs(x, side)
        m, d = np.atleast_2d(x).shape
        pairs = dc.all_pairs(d)
        o0, o1, o2, _ = dc.jet_forward(self.params, u, dc.unit_seeds(m, u.shape[1], range(d)),
                                       np.zeros((len(pairs), m, u.shape[1])), pairs)
        hess = np.empty((m, d, d))
        for k, (i, j) in enumerate(pairs):
            hess[:, i, j] = o2[k]
            hess[:, j, i] = o2[k]
        return FieldJet(o0, o1.T.copy(), hess)

    def describe(self):
        return {"kind": self.kind, "dcsnn": self.dcsnn, "sizes": self.params.sizes, "name": self.name}

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        path = Path(path)
        dc.save_params(self.params, path, meta)
        side = dict(self.describe(), **(meta or {}))
        path.with_suffix(".meta.json").write_text(json.dumps(side, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "NetworkField":
        path = Path(path)
        params, _ = dc.load_params(path)
        side = json.loads(path.with_suffix(".meta.json").read_text())
        return cls(params, dcsnn=bool(side.get("dcsnn")), name=side.get("name", ""))


# ---------------------------------------------------------------------------
# the triple


def never(x):
    return np.zeros(np.atleast_2d(x).shape[0], dtype=bool)


@dataclass
class AuxiliaryField:
    g: ScalarField
    h: ScalarField
    phi: ScalarField
    g0: Callable[[np.ndarray], np.ndarray]
    h0: Callable[[np.ndarray], np.ndarray]
    y0: Callable[[np.ndarray], np.ndarray] | None = None
    null_set: Callable[[np.ndarray], np.ndarray] = never
    tol_hard: float = TOL_CLOSED
    meta: dict = field(default_factory=dict)

    @property
    def is_closed_form(self) -> bool:
        return all(not isinstance(f, NetworkField) for f in (self.g, self.h, self.phi))

    def describe(self) -> dict:
        return {"g": self.g.describe(), "h": self.h.describe(), "phi": self.phi.describe(),
                "tol_hard": self.tol_hard, **self.meta}


def phi_circle(r0: float, center=(0.0, 0.0), scale: float | None = None) -> ClosedFormField:
    """scale*|x-c|^2 inside, scale*r0^2 outside; the default scale makes phi = 1 on the circle.

    For r0 = 0.5 this is 4|x|^2 inside and 1 outside.
    """
    if r0 <= 0:
        raise ValueError("radius must be positive")
    k = 1.0 / r0 ** 2 if scale is None else scale
    inner = k * ((X1 - center[0]) ** 2 + (X2 - center[1]) ** 2)
    return ClosedFormField(inner, sp.Float(k * r0 ** 2) if scale is not None else sp.Integer(1), name="phi_circle")


def phi_box(lo, hi) -> ClosedFormField:
    """prod (x_i - a_i)(b_i - x_i) inside the box, 0 outside."""
    inner = sp.Integer(1)
    for v, a, b in zip(SPACE, lo, hi):
        inner = inner * (v - a) * (b - v)
    return ClosedFormField(inner, sp.Integer(0), name="phi_box")


def phi_cubic_blend(spec: CubicBlendSpec, geom: InterfaceGeometry | None = None,
                  scale: float = 1.0, offset: float = 0.0) -> CubicBlendField:
    return CubicBlendField(spec, scale, offset)


def star_cubic_blend_spec(a=0.5, b=0.2, k=5, c=0.2, c1=0.25, r_min=0.01) -> CubicBlendSpec:
    """Single level function psi = a + b sin(k theta) - r, neighborhood U = {r > r_min}."""
    psi = a + b * sp.sin(k * sp.atan2(X2, X1)) - sp.sqrt(X1 ** 2 + X2 ** 2)
    return CubicBlendSpec([ClosedFormField(psi, name="psi_star")], [c1], c,
                         lambda x: np.hypot(x[:, 0], x[:, 1]) > r_min)


def box_corner_null_set(lo, hi, radius=1e-2):
    corners = np.array([[a, b] for a in (lo[0], hi[0]) for b in (lo[1], hi[1])])

    def pred(x):
        x = np.atleast_2d(x)
        return np.min(np.linalg.norm(x[:, None, :] - corners[None], axis=-1), axis=1) < radius
    return pred


# ---------------------------------------------------------------------------
# verification


@dataclass
class AuxReport:
    boundary_residual: float
    jump_residual: float
    h_boundary: float
    h_interior_min: float
    phi_jump: float
    phi_flux_min: float
    initial_residual: float | None
    tol_hard: float
    delta_phi: float = DELTA_PHI

    @property
    def checks(self) -> dict:
        out = {
            "g_boundary": self.boundary_residual <= self.tol_hard,
            "g_jump": self.jump_residual <= self.tol_hard,
            "h_boundary": self.h_boundary <= self.tol_hard,
            "h_interior_nonzero": self.h_interior_min > 0,
            "phi_jump": self.phi_jump <= self.tol_hard,
            "phi_flux_nonzero": self.phi_flux_min > self.delta_phi,
        }
        if self.initial_residual is not None:
            out["g_initial"] = self.initial_residual <= self.tol_hard
        return out

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def as_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items()}
        d["checks"] = self.checks
        d["passed"] = self.passed
        return d


def flux_jump(field: ScalarField, geom: InterfaceGeometry, xg, normals, t=None) -> np.ndarray:
    jp = field.jet(xg, 1, t)
    jm = field.jet(xg, -1, t)
    return geom.beta_plus * np.einsum("md,md->m", jp.grad, normals) \
        - geom.beta_minus * np.einsum("md,md->m", jm.grad, normals)


def verify_aux(aux: AuxiliaryField, geom: InterfaceGeometry, n_samples: int, seed=None,
               T: float | None = None) -> AuxReport:
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    rng = np.random.default_rng(seed)
    xb = sample_boundary(geom, n_samples, rng)
    xg, nrm = sample_interface(geom, n_samples, rng)
    xi, lab = sample_interior(geom, n_samples, rng)
    tb = tg = None
    if T is not None:
        tb = rng.uniform(0, T, n_samples)
        tg = rng.uniform(0, T, n_samples)
    g_b = aux.g.value(xb, 1, tb)
    bnd = float(np.max(np.abs(g_b - aux.h0(xb) if T is None else g_b - aux.h0(xb, tb))))
    jump = aux.g.value(xg, 1, tg) - aux.g.value(xg, -1, tg)
    g0 = aux.g0(xg) if T is None else aux.g0(xg, tg)
    jump_res = float(np.max(np.abs(jump - g0)))
    hb = float(np.max(np.abs(aux.h.value(xb, 1))))
    hi = float(np.min(np.abs(aux.h.value(xi, lab))))
    pj = float(np.max(np.abs(aux.phi.value(xg, 1) - aux.phi.value(xg, -1))))
    fl = np.abs(flux_jump(aux.phi, geom, xg, nrm))
    keep = ~np.asarray(aux.null_set(xg), dtype=bool)
    fmin = float(np.min(fl[keep])) if keep.any() else float("inf")
    init = None
    if T is not None and aux.y0 is not None:
        xi0 = np.concatenate([xi, xb])
        side = np.concatenate([lab, np.ones(xb.shape[0], int)])
        init = float(np.max(np.abs(aux.g.value(xi0, side, np.zeros(xi0.shape[0])) - aux.y0(xi0))))
    return AuxReport(bnd, jump_res, hb, hi, pj, fmin, init, aux.tol_hard)


# ---------------------------------------------------------------------------
# Option II pretraining


def _mse(name, r: dc.Var, points=None) -> dc.Var:
    if not np.isfinite(r.data).all():
        bad = int(np.flatnonzero(~np.isfinite(r.data))[0])
        raise dc.NonFiniteLossError(name, bad, None if points is None else points[bad])
    return r.square().mean()


def g_loss(pv, xb, h0b, xg, g0g, w1g=1.0, w2g=1.0, dcsnn=False) -> dc.Var:
    """w1g mean|g(x_B) - h0|^2 + w2g mean|g(x_G,+1) - g(x_G,-1) - g0|^2."""
    def inp(x, z):
        return x if not dcsnn else np.concatenate([x, np.full((x.shape[0], 1), z)], 1)
    empty1 = lambda m, n: (np.zeros((0, m, n)), np.zeros((0, m, n)))
    vb = dc.net_jet(pv, inp(xb, 1.0), *empty1(xb.shape[0], xb.shape[1] + dcsnn), [])[0]
    loss = w1g * _mse("g_boundary", vb - h0b, xb)
    if dcsnn:
        vp = dc.net_jet(pv, inp(xg, 1.0), *empty1(xg.shape[0], xg.shape[1] + 1), [])[0]
        vm = dc.net_jet(pv, inp(xg, -1.0), *empty1(xg.shape[0], xg.shape[1] + 1), [])[0]
        loss = loss + w2g * _mse("g_jump", vp - vm - g0g, xg)
    return loss


def h_loss(pv, xi, hbar_i, xb, w_interior=0.01, w_boundary=1.0) -> dc.Var:
    """w_interior mean|h - hbar|^2 + w_boundary mean|h(x_B)|^2."""
    z = lambda x: (np.zeros((0,) + x.shape), np.zeros((0,) + x.shape))
    vi = dc.net_jet(pv, xi, *z(xi), [])[0]
    vb = dc.net_jet(pv, xb, *z(xb), [])[0]
    return w_interior * _mse("h_interior", vi - hbar_i, xi) + w_boundary * _mse("h_boundary", vb, xb)


def phi_loss(pv, xg, normals, out_target=5.0, in_target=0.0, weights=(1.0, 1.0, 1.0)) -> dc.Var:
    """|phi(x,1)-phi(x,-1)|^2 + |n.grad phi(x,1) - out|^2 + |n.grad phi(x,-1) - in|^2, each averaged."""
    m, d = xg.shape
    u0 = np.concatenate([np.concatenate([xg, np.ones((m, 1))], 1), np.concatenate([xg, -np.ones((m, 1))], 1)])
    u1 = np.concatenate([np.concatenate([normals, np.zeros((m, 1))], 1)] * 2)[None]
    j = dc.net_jet(pv, u0, u1, np.zeros((0, 2 * m, d + 1)), [])
    vp, vm, dp, dm = j[0, :m], j[0, m:], j[1, :m], j[1, m:]
    w1, w2, w3 = weights
    return w1 * _mse("phi_jump", vp - vm, xg) + w2 * _mse("phi_out_flux", dp - out_target, xg) \
        + w3 * _mse("phi_in_flux", dm - in_target, xg)


def hbar_cosine(x) -> np.ndarray:
    x = np.atleast_2d(x)
    return np.cos(0.5 * np.pi * x[:, 0]) * np.cos(0.5 * np.pi * x[:, 1])


def hbar_distance4(lo, hi):
    """min distance to the box boundary, to the fourth power."""
    lo, hi = np.asarray(lo), np.asarray(hi)

    def f(x):
        x = np.atleast_2d(x)
        return np.min(np.minimum(x - lo, hi - x), axis=1) ** 4
    return f


def _objective(loss_fn):
    def fg(plist):
        return dc.loss_param_grad(lambda tr: loss_fn(tr[0]), plist)
    return fg


def _check_final(report, name):
    if not np.isfinite(report.final_loss):
        raise TrainingError(f"{name} training diverged", report.iterations)


def train_g(params: dc.MlpParams, xb, h0b, xg=None, g0g=None, w1g=1.0, w2g=1.0, optimizer="lbfgs",
            cfg=None, dcsnn=False):
    """Fit the lift g; returns (params, TrainReport)."""
    from .train import LbfgsConfig, AdamConfig, lbfgs_run, adam_run
    if xb.shape[0] == 0:
        raise PreconditionError("boundary samples are required")
    if dcsnn and (xg is None or xg.shape[0] == 0):
        raise PreconditionError("interface samples are required for a jump lift")
    g0g = np.zeros(0 if xg is None else xg.shape[0]) if g0g is None else g0g
    fg = _objective(lambda pv: g_loss(pv, xb, h0b, xg, g0g, w1g, w2g, dcsnn))
    if optimizer == "lbfgs":
        rep = lbfgs_run(fg, [params], cfg or LbfgsConfig(iterations=200))
    else:
        rep = adam_run(fg, [params], cfg or AdamConfig(iterations=1000, schedule=[(0, 1e-3)]))
    _check_final(rep, "g")
    return rep.params[0], rep


def train_h(params: dc.MlpParams, xi, xb, hbar=hbar_cosine, w_interior=0.01, w_boundary=1.0,
            optimizer="lbfgs", cfg=None):
    from .train import LbfgsConfig, AdamConfig, lbfgs_run, adam_run
    if xi.shape[0] == 0 or xb.shape[0] == 0:
        raise PreconditionError("interior and boundary samples are required")
    hb = hbar(xi)
    fg = _objective(lambda pv: h_loss(pv, xi, hb, xb, w_interior, w_boundary))
    if optimizer == "lbfgs":
        rep = lbfgs_run(fg, [params], cfg or LbfgsConfig(iterations=200))
    else:
        rep = adam_run(fg, [params], cfg or AdamConfig(iterations=1000, schedule=[(0, 1e-3)]))
    _check_final(rep, "h")
    return rep.params[0], rep


def train_phi(params: dc.MlpParams, xg, normals, geom: InterfaceGeometry, out_target=5.0, in_target=0.0,
              weights=(1.0, 1.0, 1.0), cfg=None):
    """Fit a DCSNN phi with zero jump and prescribed one-sided normal derivatives."""
    from .train import AdamConfig, adam_run
    gamma = geom.beta_plus * out_target - geom.beta_minus * in_target
    if gamma == 0:
        raise PreconditionError("target flux jump of phi must be nonzero")
    if xg.shape[0] == 0:
        raise PreconditionError("interface samples are required")
    fg = _objective(lambda pv: phi_loss(pv, xg, normals, out_target, in_target, weights))
    cfg = cfg or AdamConfig(iterations=30000, schedule=[(0, 5e-4), (10000, 3e-4), (20000, 1e-4)])
    rep = adam_run(fg, [params], cfg)
    _check_final(rep, "phi")
    return rep.params[0], rep
