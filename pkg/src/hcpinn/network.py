"""Approximator architectures.

* ``DcsnnField``: plain MLP with the side label z appended to the input.
* ``HardConstraintField``: y = g + m(t) h N(x, [t,] phi(x)) and
  p = m(t) h N(x, [t,] phi(x)) with m = 1 (elliptic), t (parabolic state)
  or T - t (parabolic adjoint).

The inner network N is a "core".  A core takes input jets (values, first
and second directional derivatives of its inputs) and returns the jet of
its output as a tape node.  Besides network cores there is a closed-form
core, used to substitute exact solutions into the losses.

Derivatives of the composite are assembled from the core jet by the
product rule; phi enters through the input seeds (d phi / dx_i in the phi
slot of direction i, d^2 phi / dx_i dx_j in the phi slot of pair (i, j)).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .auxfields import AuxiliaryField, ClosedFormField, FieldJet
from .geometry import InterfaceGeometry, PreconditionError, Region

KINDS = ("state", "adjoint", "state_parabolic", "adjoint_parabolic")


# ---------------------------------------------------------------------------
# cores


class NetCore:
    def __init__(self, params: dc.MlpParams):
        self.params = params

    @property
    def n_in(self):
        return self.params.n_in

    def jet(self, u0, u1, u2, pairs, side, pv=None) -> dc.Var:
        pv = dc.track(self.params) if pv is None else pv
        return dc.net_jet(pv, u0, u1, u2, pairs)


class ClosedFormCore:
    """Core given by a per-side closed form in (x[, t]); extra input slots are ignored."""

    def __init__(self, field: ClosedFormField, n_space: int = 2, time: bool = False):
        self.field, self.n_space, self.time = field, n_space, time

    def jet(self, u0, u1, u2, pairs, side, pv=None) -> dc.Var:
        d = self.n_space
        x = u0[:, :d]
        t = u0[:, d] if self.time else None
        fj = self.field.jet(x, side, t)
        rows = [fj.value]
        for k in range(u1.shape[0]):
            v = u1[k, :, :d]
            r = np.einsum("md,md->m", fj.grad, v)
            if self.time:
                r = r + fj.dt * u1[k, :, d]
            rows.append(r)
        for p, (i, j) in enumerate(pairs):
            if self.time and (np.any(u1[i, :, d]) or np.any(u1[j, :, d]) or np.any(u2[p, :, d])):
                raise ValueError("second derivatives involving time are not supported by closed-form cores")
            vi, vj, w = u1[i, :, :d], u1[j, :, :d], u2[p, :, :d]
            rows.append(np.einsum("mi,mij,mj->m", vi, fj.hess, vj) + np.einsum("md,md->m", fj.grad, w))
        return dc.Var(np.stack(rows))


def make_core(obj, n_space=2, time=False):
    if isinstance(obj, (NetCore, ClosedFormCore)):
        return obj
    if isinstance(obj, dc.MlpParams):
        return NetCore(obj)
    if isinstance(obj, ClosedFormField):
        return ClosedFormCore(obj, n_space, time)
    raise TypeError(f"cannot build a core from {type(obj).__name__}")


def _side(side, m):
    s = np.asarray(side)
    return np.full(m, int(s)) if s.ndim == 0 else s.astype(int)


# ---------------------------------------------------------------------------
# precomputed auxiliary data


@dataclass
class InteriorBatch:
    x: np.ndarray
    side: np.ndarray
    t: np.ndarray | None
    g: FieldJet | None
    h: FieldJet
    phi: FieldJet


@dataclass
class InterfaceBatch:
    x: np.ndarray
    normals: np.ndarray
    t: np.ndarray | None
    g: tuple  # (plus, minus) FieldJets or None
    h: tuple
    phi: tuple


def interior_batch(aux: AuxiliaryField, x, side, t=None, with_g=True) -> InteriorBatch:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    side = _side(side, x.shape[0])
    t = None if t is None else np.broadcast_to(np.asarray(t, float), (x.shape[0],)).copy()
    g = aux.g.jet(x, side, t) if with_g else None
    return InteriorBatch(x, side, t, g, aux.h.jet(x, side), aux.phi.jet(x, side))


def interface_batch(aux: AuxiliaryField, x, normals, t=None, with_g=True) -> InterfaceBatch:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    t = None if t is None else np.broadcast_to(np.asarray(t, float), (x.shape[0],)).copy()
    both = lambda f, tt=None: (f.jet(x, 1, tt), f.jet(x, -1, tt))
    return InterfaceBatch(x, np.asarray(normals, float), t, both(aux.g, t) if with_g else None,
                          both(aux.h), both(aux.phi))


# ---------------------------------------------------------------------------
# hard-constraint composites


@dataclass
class CompositeJet:
    value: dc.Var
    grad: list           # d Vars (first derivatives), or []
    second: dict         # (i, j) -> Var
    dt: dc.Var | None = None

    def laplacian(self) -> dc.Var:
        d = len(self.grad)
        out = self.second[(0, 0)]
        for i in range(1, d):
            out = out + self.second[(i, i)]
        return out


class HardConstraintField:
    """Composite y = g + m(t) h N(x, [t,] phi) (state) or m(t) h N (adjoint)."""

    def __init__(self, aux: AuxiliaryField, core, kind: str = "state", T: float | None = None,
                 geom: InterfaceGeometry | None = None, n_space: int = 2):
        if kind not in KINDS:
            raise ValueError(f"unknown field kind {kind!r}")
        if kind.endswith("parabolic") and (T is None or T <= 0):
            raise ValueError("parabolic fields need a positive final time")
        self.aux, self.kind, self.T, self.geom = aux, kind, T, geom
        self.n_space = n_space
        self.core = make_core(core, n_space, self.parabolic)

    @property
    def parabolic(self) -> bool:
        return self.kind.endswith("parabolic")

    @property
    def has_g(self) -> bool:
        return self.kind.startswith("state")

    @property
    def n_in(self) -> int:
        return self.n_space + (1 if self.parabolic else 0) + 1

    def time_factor(self, t):
        """(m(t), m'(t)) as arrays, or scalars 1, 0 in the elliptic case."""
        if self.kind == "state_parabolic":
            return t, np.ones_like(t)
        if self.kind == "adjoint_parabolic":
            return self.T - t, -np.ones_like(t)
        return 1.0, 0.0

    def interior_batch(self, x, side, t=None) -> InteriorBatch:
        return interior_batch(self.aux, x, side, t, with_g=self.has_g)

    def interface_batch(self, x, normals, t=None) -> InterfaceBatch:
        return interface_batch(self.aux, x, normals, t, with_g=self.has_g)

    def _inputs(self, x, t, phi):
        cols = [x] + ([t[:, None]] if self.parabolic else []) + [phi[:, None]]
        return np.concatenate(cols, axis=1)

    def interior(self, b: InteriorBatch, pv=None, mode: str = "laplacian", need_dt: bool | None = None) -> CompositeJet:
        """Jet of the composite at interior points.

        mode: "value" (no derivatives), "laplacian" (gradient + diagonal second
        derivatives) or "full" (gradient + all second derivatives).
        """
        m, d = b.x.shape
        if self.parabolic and b.t is None:
            raise ValueError("parabolic field needs time coordinates")
        need_dt = self.parabolic if need_dt is None else need_dt
        n_in = self.n_in
        u0 = self._inputs(b.x, b.t, b.phi.value)
        dirs = 0 if mode == "value" else d
        n_dirs = dirs + (1 if need_dt else 0)
        u1 = np.zeros((n_dirs, m, n_in))
        for i in range(dirs):
            u1[i, :, i] = 1.0
            u1[i, :, -1] = b.phi.grad[:, i]
        if need_dt:
            u1[dirs, :, d] = 1.0
        if mode == "value":
            pairs = []
        elif mode == "laplacian":
            pairs = [(i, i) for i in range(d)]
        elif mode == "full":
            pairs = dc.all_pairs(d)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        u2 = np.zeros((len(pairs), m, n_in))
        for k, (i, j) in enumerate(pairs):
            u2[k, :, -1] = b.phi.hess[:, i, j]
        J = self.core.jet(u0, u1, u2, pairs, b.side, pv)
        N = J[0]
        mt, dmt = self.time_factor(b.t) if self.parabolic else (1.0, 0.0)
        H = mt * b.h.value
        Hg = [mt * b.h.grad[:, i] for i in range(d)]
        value = H * N
        if self.has_g:
            value = value + b.g.value
        grad, second = [], {}
        if dirs:
            Ni = [J[1 + i] for i in range(d)]
            for i in range(d):
                gi = Hg[i] * N + H * Ni[i]
                grad.append(gi + b.g.grad[:, i] if self.has_g else gi)
            for k, (i, j) in enumerate(pairs):
                Nij = J[1 + n_dirs + k]
                s = (mt * b.h.hess[:, i, j]) * N + Hg[i] * Ni[j] + Hg[j] * Ni[i] + H * Nij
                second[(i, j)] = s + b.g.hess[:, i, j] if self.has_g else s
        dt = None
        if need_dt:
            Nt = J[1 + dirs]
            dt = (dmt * b.h.value) * N + H * Nt
            if self.has_g:
                dt = dt + (b.g.dt if b.g.dt is not None else 0.0)
        return CompositeJet(value, grad, second, dt)

    def interface(self, b: InterfaceBatch, pv=None):
        """(value jump, flux jump, plus-side value) at interface points, one-sided by branch selection."""
        m, d = b.x.shape
        u0 = np.concatenate([self._inputs(b.x, b.t, b.phi[0].value), self._inputs(b.x, b.t, b.phi[1].value)])
        u1 = np.zeros((1, 2 * m, self.n_in))
        u1[0, :m, :d] = b.normals
        u1[0, m:, :d] = b.normals
        u1[0, :m, -1] = np.einsum("md,md->m", b.phi[0].grad, b.normals)
        u1[0, m:, -1] = np.einsum("md,md->m", b.phi[1].grad, b.normals)
        side = np.concatenate([np.ones(m, int), -np.ones(m, int)])
        J = self.core.jet(u0, u1, np.zeros((0, 2 * m, self.n_in)), [], side, pv)
        Np, Nm = J[0, :m], J[0, m:]
        dNp, dNm = J[1, :m], J[1, m:]
        mt = self.time_factor(b.t)[0] if self.parabolic else 1.0
        hp, hm = b.h
        dn = lambda fj: np.einsum("md,md->m", fj.grad, b.normals)
        vp = (mt * hp.value) * Np
        vm = (mt * hm.value) * Nm
        fp = (mt * dn(hp)) * Np + (mt * hp.value) * dNp
        fm = (mt * dn(hm)) * Nm + (mt * hm.value) * dNm
        jump = vp - vm
        if self.has_g:
            gp, gm = b.g
            jump = jump + (gp.value - gm.value)
            fp = fp + dn(gp)
            fm = fm + dn(gm)
            vp = vp + gp.value
        bp, bm = self._betas()
        flux = bp * fp - bm * fm
        return jump, flux, vp

    def _betas(self):
        if self.geom is None:
            raise ValueError("field needs a geometry for flux jumps")
        return self.geom.beta_plus, self.geom.beta_minus

    # numeric conveniences ------------------------------------------------
    def value(self, x, side, t=None) -> np.ndarray:
        b = self.interior_batch(x, side, t)
        return self.interior(b, mode="value", need_dt=False).value.data.copy()

    def boundary_value(self, xb, t=None) -> np.ndarray:
        return self.value(xb, np.ones(np.atleast_2d(xb).shape[0], int), t)


def hc_value(field: HardConstraintField, x, side=None, t=None) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if side is None:
        side = _labels_or_raise(field, x)
    return field.value(x, side, t)


def _labels_or_raise(field, x):
    if field.geom is None:
        raise ValueError("side labels are required when the field has no geometry")
    reg = field.geom.classify_many(x)
    if np.any(reg == Region.ON_INTERFACE):
        raise PreconditionError("jets are one-sided; points on the interface need hc_interface_jump")
    return np.where(reg == Region.MINUS, -1, 1)


def hc_jet(field: HardConstraintField, x, side=None, t=None) -> dc.Jet2 | tuple:
    """Spatial value/gradient/Hessian of the composite at one point (plus d/dt when parabolic)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("hc_jet takes a single point; use hc_jet_batch for batches")
    v, g, h, dt = hc_jet_batch(field, x[None, :], side, None if t is None else np.array([t], float))
    jet = dc.Jet2(float(v[0]), g[0], h[0])
    return (jet, float(dt[0])) if field.parabolic else jet


def hc_jet_batch(field: HardConstraintField, x, side=None, t=None):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if side is None:
        side = _labels_or_raise(field, x)
    b = field.interior_batch(x, side, t)
    cj = field.interior(b, mode="full")
    m, d = x.shape
    grad = np.stack([g.data for g in cj.grad], axis=1)
    hess = np.empty((m, d, d))
    for (i, j), v in cj.second.items():
        hess[:, i, j] = v.data
        hess[:, j, i] = v.data
    dt = None if cj.dt is None else cj.dt.data.copy()
    return cj.value.data.copy(), grad, hess, dt


def hc_interface_jump(field: HardConstraintField, xg, normals=None, t=None):
    """(value jump, flux jump) arrays at interface points."""
    xg = np.atleast_2d(np.asarray(xg, dtype=float))
    if field.geom is not None:
        reg = field.geom.classify_many(xg)
        if np.any(reg != Region.ON_INTERFACE):
            raise PreconditionError("hc_interface_jump needs points on the interface")
        if normals is None:
            normals = field.geom.unit_normals(xg)
    elif normals is None:
        raise ValueError("normals are required when the field has no geometry")
    b = field.interface_batch(xg, normals, t)
    jump, flux, _ = field.interface(b)
    return jump.data.copy(), flux.data.copy()


# ---------------------------------------------------------------------------
# DCSNN fields (soft constraints)


class DcsnnField:
    """y~(x, z): the label z = +1 / -1 picks the outer / inner extension."""

    def __init__(self, core, geom: InterfaceGeometry | None = None, n_space: int = 2):
        self.core = make_core(core, n_space, False)
        self.geom, self.n_space = geom, n_space

    @property
    def n_in(self):
        return self.n_space + 1

    def _u0(self, x, z):
        return np.concatenate([x, np.asarray(z, float).reshape(-1, 1) * np.ones((x.shape[0], 1))], axis=1)

    def interior(self, x, side, pv=None, mode="laplacian") -> CompositeJet:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        m, d = x.shape
        side = _side(side, m)
        n_in = self.n_in
        dirs = 0 if mode == "value" else d
        u1 = np.zeros((dirs, m, n_in))
        for i in range(dirs):
            u1[i, :, i] = 1.0
        pairs = [] if mode == "value" else ([(i, i) for i in range(d)] if mode == "laplacian" else dc.all_pairs(d))
        u2 = np.zeros((len(pairs), m, n_in))
        J = self.core.jet(self._u0(x, side), u1, u2, pairs, side, pv)
        grad = [J[1 + i] for i in range(dirs)]
        second = {p: J[1 + dirs + k] for k, p in enumerate(pairs)}
        return CompositeJet(J[0], grad, second)

    def boundary(self, xb, pv=None) -> dc.Var:
        xb = np.atleast_2d(np.asarray(xb, dtype=float))
        m = xb.shape[0]
        e = np.zeros((0, m, self.n_in))
        return self.core.jet(self._u0(xb, np.ones(m)), e, e, [], np.ones(m, int), pv)[0]

    def interface(self, xg, normals, pv=None):
        """(value jump, flux jump, plus-side value)."""
        xg = np.atleast_2d(np.asarray(xg, dtype=float))
        m, d = xg.shape
        u0 = np.concatenate([self._u0(xg, np.ones(m)), self._u0(xg, -np.ones(m))])
        u1 = np.zeros((1, 2 * m, self.n_in))
        u1[0, :m, :d] = normals
        u1[0, m:, :d] = normals
        side = np.concatenate([np.ones(m, int), -np.ones(m, int)])
        J = self.core.jet(u0, u1, np.zeros((0, 2 * m, self.n_in)), [], side, pv)
        if self.geom is None:
            raise ValueError("field needs a geometry for flux jumps")
        jump = J[0, :m] - J[0, m:]
        flux = self.geom.beta_plus * J[1, :m] - self.geom.beta_minus * J[1, m:]
        return jump, flux, J[0, :m]

    def value(self, x, side) -> np.ndarray:
        return self.interior(x, side, mode="value").value.data.copy()


def dcsnn_value(field: DcsnnField, x, z) -> float | np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u = field._u0(x, np.broadcast_to(np.asarray(z, float), (x.shape[0],)))
    if isinstance(field.core, NetCore):
        out = np.asarray(dc.mlp_eval(field.core.params, u))
    else:
        out = field.core.jet(u, np.zeros((0,) + u.shape), np.zeros((0,) + u.shape), [],
                             np.sign(u[:, -1]).astype(int)).data[0]
    return float(out[0]) if out.size == 1 else out


def dcsnn_jet(field: DcsnnField, x, z) -> dc.Jet2:
    """Jet with respect to x only (z is a label, not a coordinate)."""
    x = np.asarray(x, dtype=float)
    cj = field.interior(x[None, :], np.array([int(np.sign(z)) or 1]), mode="full") if np.isin(z, (-1, 1)) \
        else None
    if cj is None:
        # diagnostic: arbitrary real z, network core only
        u = np.concatenate([x, [float(z)]])
        v, g, h = dc.mlp_jet_batch(field.core.params, u[None, :])
        d = x.size
        return dc.Jet2(float(v[0]), g[0, :d], h[0, :d, :d].copy())
    d = x.size
    hess = np.empty((d, d))
    for (i, j), v in cj.second.items():
        hess[i, j] = hess[j, i] = v.data[0]
    return dc.Jet2(float(cj.value.data[0]), np.array([g.data[0] for g in cj.grad]), hess)


def init_core(n_in: int, hidden: Sequence[int], seed=None) -> dc.MlpParams:
    return dc.init_mlp([n_in, *hidden, 1], seed)
