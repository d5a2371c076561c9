"""Box projection, control recovery and the four training losses.

Each loss is a weighted sum of per-term mean squares.  A loss object is
built once per training set: data values and auxiliary jets are evaluated
up front, then ``evaluate(pv_y, pv_p)`` builds the tape for one iteration.
``pv_y``/``pv_p`` are the tracked parameter lists of the two networks (None
for closed-form cores).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from .geometry import SampleSet
from .network import DcsnnField, HardConstraintField
from .problems import ProblemSpec

WEIGHT_NAMES = ("w_y_r", "w_y_b", "w_y_G", "w_y_Gn", "w_p_r", "w_p_b", "w_p_G", "w_p_Gn")
SOFT_TERMS = WEIGHT_NAMES
HARD_TERMS = ("w_y_r", "w_y_Gn", "w_p_r", "w_p_Gn")


class PreconditionError(ValueError):
    pass


@dataclass
class LossWeights:
    w_y_r: float = 1.0
    w_y_b: float = 1.0
    w_y_G: float = 1.0
    w_y_Gn: float = 1.0
    w_p_r: float = 1.0
    w_p_b: float = 1.0
    w_p_G: float = 1.0
    w_p_Gn: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {f.name} must be a finite nonnegative number, got {v}")

    @classmethod
    def from_dict(cls, d: dict | None) -> "LossWeights":
        d = dict(d or {})
        unknown = set(d) - set(WEIGHT_NAMES)
        if unknown:
            raise ValueError(f"unknown loss weight(s): {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})

    def scaled(self, c: float) -> "LossWeights":
        return LossWeights(**{f.name: c * getattr(self, f.name) for f in fields(self)})

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class ControlBounds:
    ua: Callable
    ub: Callable

    def at(self, x, side=None, t=None):
        lo = np.asarray(self.ua(x, side, t), dtype=float)
        hi = np.asarray(self.ub(x, side, t), dtype=float)
        if np.any(lo > hi):
            i = int(np.argmax(lo > hi))
            raise PreconditionError(f"lower control bound exceeds upper bound at point #{i}")
        return lo, hi


def project_box(v, ua, ub):
    """L1(L2(v)) with L2(v) = -relu(ub - v) + ub and L1(w) = relu(w - ua) + ua, i.e. clamp(v, ua, ub).

    Values come from the exact clamp so the output never leaves [ua, ub] by rounding.
    """
    ua_a, ub_a = np.asarray(ua, dtype=float), np.asarray(ub, dtype=float)
    if np.any(ua_a > ub_a):
        raise PreconditionError("projection needs ua <= ub")
    if isinstance(v, dc.Var):
        return dc.clamp(v, ua_a, ub_a)
    out = np.minimum(ub_a, np.maximum(ua_a, np.asarray(v, dtype=float)))
    return float(out) if out.ndim == 0 else out


def recover_control(p_values, ua, ub, alpha: float):
    """u = P(-p / alpha); feasible by construction."""
    if alpha <= 0:
        raise PreconditionError("alpha must be positive")
    return project_box(-np.asarray(p_values, dtype=float) / alpha, ua, ub)


def _term(name: str, w: float, r: dc.Var, points: np.ndarray):
    bad = ~np.isfinite(r.data)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise dc.NonFiniteLossError(name, i, points[i])
    return w * r.square().mean()


class _LossBase:
    term_names: tuple = ()

    def __init__(self, weights: LossWeights):
        self.weights = weights

    def evaluate(self, pv_y=None, pv_p=None) -> tuple[dc.Var, dict]:
        raise NotImplementedError

    def value(self) -> float:
        return float(self.evaluate()[0].data)

    def objective(self, frozen: dict | None = None):
        """Callable for the optimizers: params list -> (loss, grads, terms)."""
        def fg(plist):
            terms = {}

            def ev(tr):
                total, t = self.evaluate(*tr)
                terms.update(t)
                return total
            loss, grads = dc.loss_param_grad(ev, plist)
            return loss, grads, terms
        return fg

    def _sum(self, parts: dict) -> tuple[dc.Var, dict]:
        total = None
        for v in parts.values():
            total = v if total is None else total + v
        return total, {k: float(v.data) for k, v in parts.items()}


class SoftEllipticLoss(_LossBase):
    """Eight-term loss for the DCSNN pair (y~, p~)."""

    term_names = SOFT_TERMS

    def __init__(self, y: DcsnnField, p: DcsnnField, samples: SampleSet, problem: ProblemSpec,
                 weights: LossWeights):
        super().__init__(weights)
        if problem.variant != "distributed_elliptic":
            raise PreconditionError("the soft-constraint loss covers distributed elliptic problems")
        self.y, self.p, self.s, self.problem = y, p, samples, problem
        s, lab = samples, samples.labels
        geom = problem.geometry
        self.beta = geom.beta(lab)
        self.f = problem.f(s.x, lab)
        self.yd = problem.yd(s.x, lab)
        self.ua, self.ub = ControlBounds(problem.ua, problem.ub).at(s.x, lab)
        self.h0 = problem.h0(s.xb, np.ones(s.xb.shape[0], int))
        self.g0 = problem.g0(s.xg)
        self.g1 = problem.g1(s.xg)

    def evaluate(self, pv_y=None, pv_p=None):
        s, w, a = self.s, self.weights, self.problem.alpha
        yi = self.y.interior(s.x, s.labels, pv_y)
        pi = self.p.interior(s.x, s.labels, pv_p)
        u = dc.clamp(pi.value * (-1.0 / a), self.ua, self.ub)
        r_y = -yi.laplacian() - (u + self.f) * (1.0 / self.beta)
        r_p = -pi.laplacian() - (yi.value - self.yd) * (1.0 / self.beta)
        yb = self.y.boundary(s.xb, pv_y)
        pb = self.p.boundary(s.xb, pv_p)
        yj, yf, _ = self.y.interface(s.xg, s.normals, pv_y)
        pj, pf, _ = self.p.interface(s.xg, s.normals, pv_p)
        return self._sum({
            "w_y_r": _term("y_residual", w.w_y_r, r_y, s.x),
            "w_y_b": _term("y_boundary", w.w_y_b, yb - self.h0, s.xb),
            "w_y_G": _term("y_jump", w.w_y_G, yj - self.g0, s.xg),
            "w_y_Gn": _term("y_flux", w.w_y_Gn, yf - self.g1, s.xg),
            "w_p_r": _term("p_residual", w.w_p_r, r_p, s.x),
            "w_p_b": _term("p_boundary", w.w_p_b, pb, s.xb),
            "w_p_G": _term("p_jump", w.w_p_G, pj, s.xg),
            "w_p_Gn": _term("p_flux", w.w_p_Gn, pf, s.xg),
        })


class _HardBase(_LossBase):
    term_names = HARD_TERMS

    def __init__(self, y: HardConstraintField, p: HardConstraintField, samples: SampleSet,
                 problem: ProblemSpec, weights: LossWeights):
        super().__init__(weights)
        self.y, self.p, self.s, self.problem = y, p, samples, problem
        s = samples
        self.beta = problem.geometry.beta(s.labels)
        self.by = y.interior_batch(s.x, s.labels, s.t)
        self.bp = p.interior_batch(s.x, s.labels, s.t)
        self.gy = y.interface_batch(s.xg, s.normals, s.tg)
        self.gp = p.interface_batch(s.xg, s.normals, s.tg)
        self.yd = problem.yd(s.x, s.labels, s.t)
        self.f = problem.f(s.x, s.labels, s.t)

    def replace_batches(self, other: "_HardBase"):
        """Share precomputed auxiliary data with another loss on the same samples."""
        self.by, self.bp, self.gy, self.gp = other.by, other.bp, other.gy, other.gp


class HardEllipticLoss(_HardBase):
    """Four terms: state and adjoint residuals, state and adjoint flux jumps."""

    def __init__(self, y, p, samples, problem, weights):
        if problem.variant != "distributed_elliptic":
            raise PreconditionError("expected a distributed elliptic problem")
        super().__init__(y, p, samples, problem, weights)
        s = samples
        self.ua, self.ub = ControlBounds(problem.ua, problem.ub).at(s.x, s.labels)
        self.g1 = problem.g1(s.xg)

    def evaluate(self, pv_y=None, pv_p=None):
        s, w, a = self.s, self.weights, self.problem.alpha
        yi = self.y.interior(self.by, pv_y)
        pi = self.p.interior(self.bp, pv_p)
        u = dc.clamp(pi.value * (-1.0 / a), self.ua, self.ub)
        inv_b = 1.0 / self.beta
        r_y = -yi.laplacian() - (u + self.f) * inv_b
        r_p = -pi.laplacian() - (yi.value - self.yd) * inv_b
        _, yf, _ = self.y.interface(self.gy, pv_y)
        _, pf, _ = self.p.interface(self.gp, pv_p)
        return self._sum({
            "w_y_r": _term("y_residual", w.w_y_r, r_y, s.x),
            "w_y_Gn": _term("y_flux", w.w_y_Gn, yf - self.g1, s.xg),
            "w_p_r": _term("p_residual", w.w_p_r, r_p, s.x),
            "w_p_Gn": _term("p_flux", w.w_p_Gn, pf, s.xg),
        })


class HardInterfaceControlLoss(_HardBase):
    """As the elliptic loss, but the control enters the state flux jump on the interface."""

    def __init__(self, y, p, samples, problem, weights):
        if problem.variant != "interface_control":
            raise PreconditionError("expected an interface-control problem")
        super().__init__(y, p, samples, problem, weights)
        s = samples
        one = np.ones(s.xg.shape[0], int)
        self.ua, self.ub = ControlBounds(problem.ua, problem.ub).at(s.xg, one)
        self.g1 = problem.g1(s.xg)

    def evaluate(self, pv_y=None, pv_p=None):
        s, w, a = self.s, self.weights, self.problem.alpha
        yi = self.y.interior(self.by, pv_y)
        pi = self.p.interior(self.bp, pv_p)
        inv_b = 1.0 / self.beta
        r_y = -yi.laplacian() - self.f * inv_b
        r_p = -pi.laplacian() - (yi.value - self.yd) * inv_b
        _, yf, _ = self.y.interface(self.gy, pv_y)
        _, pf, p_on_g = self.p.interface(self.gp, pv_p)
        u = dc.clamp(p_on_g * (-1.0 / a), self.ua, self.ub)
        return self._sum({
            "w_y_r": _term("y_residual", w.w_y_r, r_y, s.x),
            "w_y_Gn": _term("y_flux", w.w_y_Gn, yf - self.g1 - u, s.xg),
            "w_p_r": _term("p_residual", w.w_p_r, r_p, s.x),
            "w_p_Gn": _term("p_flux", w.w_p_Gn, pf, s.xg),
        })


class HardParabolicLoss(_HardBase):
    """Space-time residuals; the whole operator is divided by the local coefficient.

    state:   -lap y + (dy/dt - P(-p/alpha) - f) / beta
    adjoint: -lap p + (-dp/dt - (y - y_d)) / beta
    """

    def __init__(self, y, p, samples, problem, weights):
        if problem.variant != "distributed_parabolic":
            raise PreconditionError("expected a parabolic problem")
        if samples.t is None or samples.tg is None:
            raise PreconditionError("parabolic losses need space-time samples")
        super().__init__(y, p, samples, problem, weights)
        s = samples
        self.ua, self.ub = ControlBounds(problem.ua, problem.ub).at(s.x, s.labels, s.t)
        self.g1 = problem.g1(s.xg, None, s.tg)

    def evaluate(self, pv_y=None, pv_p=None):
        s, w, a = self.s, self.weights, self.problem.alpha
        yi = self.y.interior(self.by, pv_y)
        pi = self.p.interior(self.bp, pv_p)
        u = dc.clamp(pi.value * (-1.0 / a), self.ua, self.ub)
        inv_b = 1.0 / self.beta
        r_y = -yi.laplacian() + (yi.dt - u - self.f) * inv_b
        r_p = -pi.laplacian() + (-pi.dt - (yi.value - self.yd)) * inv_b
        _, yf, _ = self.y.interface(self.gy, pv_y)
        _, pf, _ = self.p.interface(self.gp, pv_p)
        pts = np.concatenate([s.x, s.t[:, None]], axis=1)
        ptsg = np.concatenate([s.xg, s.tg[:, None]], axis=1)
        return self._sum({
            "w_y_r": _term("y_residual", w.w_y_r, r_y, pts),
            "w_y_Gn": _term("y_flux", w.w_y_Gn, yf - self.g1, ptsg),
            "w_p_r": _term("p_residual", w.w_p_r, r_p, pts),
            "w_p_Gn": _term("p_flux", w.w_p_Gn, pf, ptsg),
        })


def hard_loss_for(problem: ProblemSpec):
    return {"distributed_elliptic": HardEllipticLoss, "interface_control": HardInterfaceControlLoss,
            "distributed_parabolic": HardParabolicLoss}[problem.variant]


# functional front ends -------------------------------------------------------


def loss_soft_elliptic(theta_y, theta_p, samples, problem, weights) -> float:
    g = problem.geometry
    return SoftEllipticLoss(DcsnnField(theta_y, g), DcsnnField(theta_p, g), samples, problem, weights).value()


def _hard(kind_y, kind_p, cls, theta_y, theta_p, samples, problem, weights, aux, T=None):
    g = problem.geometry
    y = HardConstraintField(aux, theta_y, kind_y, T, g)
    p = HardConstraintField(aux, theta_p, kind_p, T, g)
    return cls(y, p, samples, problem, weights).value()


def loss_hard_elliptic(theta_y, theta_p, samples, problem, weights, aux) -> float:
    return _hard("state", "adjoint", HardEllipticLoss, theta_y, theta_p, samples, problem, weights, aux)


def loss_hard_interface_control(theta_y, theta_p, samples, problem, weights, aux) -> float:
    return _hard("state", "adjoint", HardInterfaceControlLoss, theta_y, theta_p, samples, problem, weights, aux)


def loss_hard_parabolic(theta_y, theta_p, samples, problem, weights, aux, T=None) -> float:
    T = problem.T if T is None else T
    return _hard("state_parabolic", "adjoint_parabolic", HardParabolicLoss, theta_y, theta_p, samples,
                 problem, weights, aux, T)


def write_term_csv(history: list[dict], path: str | Path) -> None:
    """Long format, one row per (iteration, term): columns iteration, term, value.

    The total is written under the term name ``loss``; weighted terms follow in
    canonical order.
    """
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iteration", "term", "value"])
        for row in history:
            it = row["iteration"]
            wr.writerow([it, "loss", repr(float(row["loss"]))])
            for k in WEIGHT_NAMES:
                if k in row:
                    wr.writerow([it, k, repr(float(row[k]))])
