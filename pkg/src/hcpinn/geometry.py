"""Domain, interface and collocation sampling.

Sign convention for every interface: the level function psi is negative in
the inner subdomain (label -1), positive in the outer one (label +1), and the
unit normal grad(psi)/|grad(psi)| points from inside to outside.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import qmc

INTERFACE_TOL = 1e-10
BOUNDARY_TOL = 1e-14


class DomainError(ValueError):
    pass


class PreconditionError(ValueError):
    pass


class UnsupportedError(NotImplementedError):
    pass


class Region(IntEnum):
    MINUS = -1
    ON_INTERFACE = 0
    PLUS = 1
    ON_BOUNDARY = 2


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _pts(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


# ---------------------------------------------------------------------------
# interfaces


class Interface:
    """Closed curve/surface strictly inside the domain, given by a level function."""

    def psi(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad_psi(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        raise UnsupportedError(f"{type(self).__name__} has no parametrization to sample from")

    def describe(self) -> dict:
        return {"kind": type(self).__name__}

    def length(self) -> float:
        raise UnsupportedError(f"{type(self).__name__} has no closed-form length")


@dataclass
class Circle(Interface):
    center: tuple = (0.0, 0.0)
    radius: float = 0.5

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        self.center = tuple(float(c) for c in self.center)

    def psi(self, x):
        return np.linalg.norm(x - np.array(self.center), axis=-1) - self.radius

    def grad_psi(self, x):
        d = x - np.array(self.center)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def sample(self, count, rng):
        th = rng.uniform(0.0, 2 * np.pi, count)
        return np.array(self.center) + self.radius * np.stack([np.cos(th), np.sin(th)], axis=1)

    def length(self):
        return 2 * np.pi * self.radius

    def describe(self):
        return {"kind": "circle", "center": list(self.center), "radius": self.radius}


@dataclass
class BoxInterface(Interface):
    lo: tuple
    hi: tuple

    def __post_init__(self):
        self.lo = tuple(float(v) for v in self.lo)
        self.hi = tuple(float(v) for v in self.hi)
        if any(a >= b for a, b in zip(self.lo, self.hi)):
            raise ValueError("box interface needs lo < hi on every axis")

    def psi(self, x):
        lo, hi = np.array(self.lo), np.array(self.hi)
        return np.max(np.maximum(lo - x, x - hi), axis=-1)

    def grad_psi(self, x):
        lo, hi = np.array(self.lo), np.array(self.hi)
        gaps = np.concatenate([lo - x, x - hi], axis=-1)
        k = np.argmax(gaps, axis=-1)
        d = x.shape[-1]
        g = np.zeros_like(x)
        rows = np.arange(x.shape[0])
        g[rows, k % d] = np.where(k < d, -1.0, 1.0)
        return g

    def sample(self, count, rng):
        # 2-D only: four edges, equal share each, arclength-uniform on every edge
        if len(self.lo) != 2:
            raise UnsupportedError("box interface sampling is implemented for d = 2")
        (a1, a2), (b1, b2) = self.lo, self.hi
        share = [count // 4 + (1 if e < count % 4 else 0) for e in range(4)]
        out = []
        for e, n in enumerate(share):
            s = rng.uniform(0.0, 1.0, n)
            if e == 0:
                out.append(np.stack([a1 + s * (b1 - a1), np.full(n, a2)], 1))
            elif e == 1:
                out.append(np.stack([np.full(n, b1), a2 + s * (b2 - a2)], 1))
            elif e == 2:
                out.append(np.stack([a1 + s * (b1 - a1), np.full(n, b2)], 1))
            else:
                out.append(np.stack([np.full(n, a1), a2 + s * (b2 - a2)], 1))
        return np.concatenate(out, axis=0)

    def length(self):
        return 2 * sum(b - a for a, b in zip(self.lo, self.hi))

    def describe(self):
        return {"kind": "box", "lo": list(self.lo), "hi": list(self.hi)}


@dataclass
class PolarStar(Interface):
    """r = a + b sin(k theta) around the origin."""

    a: float = 0.5
    b: float = 0.2
    k: int = 5

    def __post_init__(self):
        if not 0 <= abs(self.b) < self.a:
            raise ValueError("need |b| < a for a star-shaped curve")

    def radius(self, theta):
        return self.a + self.b * np.sin(self.k * theta)

    def psi(self, x):
        r = np.hypot(x[..., 0], x[..., 1])
        th = np.arctan2(x[..., 1], x[..., 0])
        return r - self.radius(th)

    def grad_psi(self, x):
        r = np.hypot(x[..., 0], x[..., 1])
        th = np.arctan2(x[..., 1], x[..., 0])
        dpsi_dth = -self.b * self.k * np.cos(self.k * th)
        c, s = np.cos(th), np.sin(th)
        # grad = r_hat + (1/r) dpsi/dtheta theta_hat
        return np.stack([c - s * dpsi_dth / r, s + c * dpsi_dth / r], axis=-1)

    def sample(self, count, rng):
        th = rng.uniform(0.0, 2 * np.pi, count)
        r = self.radius(th)
        return np.stack([r * np.cos(th), r * np.sin(th)], axis=1)

    def length(self):
        from scipy.integrate import quad
        val, _ = quad(lambda t: np.hypot(self.radius(t), self.b * self.k * np.cos(self.k * t)),
                      0.0, 2 * np.pi, limit=200, epsabs=1e-12)
        return val

    def describe(self):
        return {"kind": "polar_star", "a": self.a, "b": self.b, "k": self.k}


@dataclass
class LevelSet(Interface):
    """User supplied level function (negative inside) and its gradient."""

    psi_fn: Callable[[np.ndarray], np.ndarray]
    grad_fn: Callable[[np.ndarray], np.ndarray]

    def psi(self, x):
        return np.asarray(self.psi_fn(x), dtype=float)

    def grad_psi(self, x):
        return np.asarray(self.grad_fn(x), dtype=float)

    def describe(self):
        return {"kind": "level_set"}


# ---------------------------------------------------------------------------
# geometry


@dataclass
class InterfaceGeometry:
    lo: tuple
    hi: tuple
    interface: Interface
    beta_minus: float = 1.0
    beta_plus: float = 1.0

    def __post_init__(self):
        self.lo = tuple(float(v) for v in self.lo)
        self.hi = tuple(float(v) for v in self.hi)
        if len(self.lo) != len(self.hi) or any(a >= b for a, b in zip(self.lo, self.hi)):
            raise ValueError("domain box needs lo < hi on every axis")
        if self.beta_minus <= 0 or self.beta_plus <= 0:
            raise ValueError("diffusion coefficients must be positive")
        try:
            probe = self.interface.sample(256, np.random.default_rng(0))
        except (NotImplementedError, UnsupportedError):
            return
        if np.any(probe <= np.array(self.lo)) or np.any(probe >= np.array(self.hi)):
            raise ValueError("interface must lie strictly inside the domain")

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def area(self) -> float:
        return float(np.prod(np.subtract(self.hi, self.lo)))

    def beta(self, labels) -> np.ndarray:
        labels = np.asarray(labels)
        return np.where(labels < 0, self.beta_minus, self.beta_plus)

    def on_boundary(self, x) -> np.ndarray:
        xb, _ = _pts(x)
        lo, hi = np.array(self.lo), np.array(self.hi)
        return np.any((np.abs(xb - lo) <= BOUNDARY_TOL) | (np.abs(xb - hi) <= BOUNDARY_TOL), axis=1)

    def classify_many(self, x) -> np.ndarray:
        xb, _ = _pts(x)
        lo, hi = np.array(self.lo), np.array(self.hi)
        outside = np.any((xb < lo - BOUNDARY_TOL) | (xb > hi + BOUNDARY_TOL), axis=1)
        if outside.any():
            i = int(np.argmax(outside))
            raise DomainError(f"point {xb[i].tolist()} lies outside the closed domain")
        out = np.empty(xb.shape[0], dtype=int)
        bnd = self.on_boundary(xb)
        psi = self.interface.psi(xb)
        out[:] = np.where(psi < 0, Region.MINUS, Region.PLUS)
        out[np.abs(psi) <= INTERFACE_TOL] = Region.ON_INTERFACE
        out[bnd] = Region.ON_BOUNDARY
        return out

    def classify(self, x) -> Region:
        return Region(int(self.classify_many(np.asarray(x, dtype=float)[None, :])[0]))

    def unit_normals(self, x) -> np.ndarray:
        xb, _ = _pts(x)
        g = self.interface.grad_psi(xb)
        return g / np.linalg.norm(g, axis=-1, keepdims=True)

    def unit_normal(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.classify(x) != Region.ON_INTERFACE:
            raise PreconditionError(f"point {x.tolist()} is not on the interface")
        return self.unit_normals(x[None, :])[0]

    def region_labels(self, x) -> np.ndarray:
        """+1/-1 side labels for interior points; points on the interface count as outside."""
        xb, _ = _pts(x)
        return np.where(self.interface.psi(xb) < -INTERFACE_TOL, -1, 1)

    def describe(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi), "interface": self.interface.describe(),
                "beta_minus": self.beta_minus, "beta_plus": self.beta_plus}


# ---------------------------------------------------------------------------
# samplers


def sample_lhs(lo, hi, count: int, seed=None) -> np.ndarray:
    """Latin hypercube sample: exactly one point per stratum on every axis."""
    if count < 1:
        raise ValueError("count must be at least 1")
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    eng = qmc.LatinHypercube(d=lo.size, seed=_rng(seed))
    return qmc.scale(eng.random(count), lo, hi)


def sample_interior(geom: InterfaceGeometry, count: int, seed=None) -> tuple[np.ndarray, np.ndarray]:
    """LHS interior points with side labels; points too close to the interface are redrawn."""
    rng = _rng(seed)
    x = sample_lhs(geom.lo, geom.hi, count, rng)
    for _ in range(100):
        bad = (np.abs(geom.interface.psi(x)) <= INTERFACE_TOL) | geom.on_boundary(x)
        if not bad.any():
            break
        x[bad] = rng.uniform(geom.lo, geom.hi, size=(int(bad.sum()), geom.dim))
    labels = np.where(geom.interface.psi(x) < 0, -1, 1)
    return x, labels


def sample_boundary(geom: InterfaceGeometry, count: int, seed=None) -> np.ndarray:
    """Uniform in arclength along the boundary of a 2-D box."""
    if geom.dim != 2:
        raise UnsupportedError("boundary sampling is implemented for d = 2")
    rng = _rng(seed)
    (a1, a2), (b1, b2) = geom.lo, geom.hi
    w, h = b1 - a1, b2 - a2
    s = rng.uniform(0.0, 2 * (w + h), count)
    x = np.empty((count, 2))
    for k, (start, seg) in enumerate([(0.0, w), (w, h), (w + h, w), (2 * w + h, h)]):
        m = (s >= start) & (s < start + seg)
        u = s[m] - start
        if k == 0:
            x[m] = np.stack([a1 + u, np.full(u.size, a2)], 1)
        elif k == 1:
            x[m] = np.stack([np.full(u.size, b1), a2 + u], 1)
        elif k == 2:
            x[m] = np.stack([b1 - u, np.full(u.size, b2)], 1)
        else:
            x[m] = np.stack([np.full(u.size, a1), b2 - u], 1)
    return x


def sample_interface(geom: InterfaceGeometry, count: int, seed=None) -> tuple[np.ndarray, np.ndarray]:
    if count < 1:
        raise ValueError("count must be at least 1")
    x = geom.interface.sample(count, _rng(seed))
    return x, geom.unit_normals(x)


def sample_chebyshev_time(T: float, count: int) -> np.ndarray:
    """Chebyshev-Gauss nodes mapped to (0, T), increasing."""
    if count < 1 or T <= 0:
        raise ValueError("need count >= 1 and T > 0")
    i = np.arange(1, count + 1)
    return 0.5 * T * (1.0 - np.cos((2 * i - 1) * np.pi / (2 * count)))


@dataclass
class SampleSet:
    x: np.ndarray
    labels: np.ndarray
    xb: np.ndarray
    xg: np.ndarray
    normals: np.ndarray
    t: np.ndarray | None = None
    tb: np.ndarray | None = None
    tg: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.x.shape[0] != self.labels.shape[0]:
            raise ValueError("one label per interior point")
        if self.xg.shape != self.normals.shape:
            raise ValueError("one normal per interface point")

    @property
    def counts(self) -> dict:
        return {"M": int(self.x.shape[0]), "M_B": int(self.xb.shape[0]), "M_G": int(self.xg.shape[0])}

    def permuted(self, seed=None) -> "SampleSet":
        rng = _rng(seed)
        pi, pb, pg = (rng.permutation(n) for n in (self.x.shape[0], self.xb.shape[0], self.xg.shape[0]))
        pick = lambda a, p: None if a is None else a[p]
        return SampleSet(self.x[pi], self.labels[pi], self.xb[pb], self.xg[pg], self.normals[pg],
                         pick(self.t, pi), pick(self.tb, pb), pick(self.tg, pg), dict(self.meta))

    def to_csv(self, path: str | Path) -> None:
        """Rows: kind, x1..xd, [t], label, [n1..nd]."""
        d = self.x.shape[1]
        has_t = self.t is not None
        head = ["kind"] + [f"x{i + 1}" for i in range(d)] + (["t"] if has_t else []) + ["label"] \
            + [f"n{i + 1}" for i in range(d)]
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(head)
            blank = [""] * d

            def rows(kind, x, t, lab, nrm):
                for i in range(x.shape[0]):
                    row = [kind] + [repr(float(v)) for v in x[i]]
                    if has_t:
                        row.append(repr(float(t[i])))
                    row.append(lab if isinstance(lab, str) else int(lab[i]))
                    row += [repr(float(v)) for v in nrm[i]] if nrm is not None else blank
                    wr.writerow(row)
            rows("interior", self.x, self.t, self.labels, None)
            rows("boundary", self.xb, self.tb, "B", None)
            rows("interface", self.xg, self.tg, "G", self.normals)


def make_samples(geom: InterfaceGeometry, M: int, MB: int, MG: int, seed=None,
                 times: np.ndarray | None = None) -> SampleSet:
    """Training set.  With ``times`` every spatial point is paired with every time."""
    rng = _rng(seed)
    x, lab = sample_interior(geom, M, rng)
    xb = sample_boundary(geom, MB, rng)
    xg, nrm = sample_interface(geom, MG, rng)
    meta = {"M": M, "M_B": MB, "M_G": MG}
    if times is None:
        return SampleSet(x, lab, xb, xg, nrm, meta=meta)
    times = np.asarray(times, dtype=float)
    nt = times.size
    rep = lambda a: np.repeat(a, nt, axis=0)
    tile = lambda a: np.tile(times, a.shape[0])
    meta["n_times"] = nt
    return SampleSet(rep(x), rep(lab), rep(xb), rep(xg), rep(nrm), tile(x), tile(xb), tile(xg), meta)
