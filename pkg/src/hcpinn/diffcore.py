"""Small dense differentiation engine for tanh MLPs.

Two pieces live here:

* ``jet_forward`` / ``jet_backward``: analytic layer-by-layer propagation of
  input jets (value, first directional derivatives, selected second
  directional derivatives) through a tanh MLP, plus the matching reverse
  sweep that maps cotangents of every jet channel back to the weights.  This
  is what makes parameter gradients of losses containing input Laplacians
  cheap: no third-order tape is ever built.
* ``Var``: a minimal array-valued reverse-mode tape used to compose network
  jets into residuals and losses.  A whole network jet is a single node on
  this tape.

Everything is float64.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

CHECKPOINT_FORMAT = "hcpinn-mlp"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    """Raised when a loss term is NaN/inf; carries the first offending point."""

    def __init__(self, term: str, index: int | None = None, point=None, iteration: int | None = None):
        self.term = term
        self.index = index
        self.point = None if point is None else np.asarray(point).tolist()
        self.iteration = iteration
        msg = f"non-finite value in loss term {term!r}"
        if index is not None:
            msg += f" at collocation point #{index} {self.point}"
        if iteration is not None:
            msg += f" (iteration {iteration})"
        super().__init__(msg)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class MlpParams:
    """Fully connected network: tanh on hidden layers, identity on the output."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight matrix and at least one layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {k}: weight {w.shape} / bias {b.shape} mismatch")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ShapeError(f"layer {k} expects {w.shape[1]} inputs, previous layer gives {self.weights[k - 1].shape[0]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {k}: non-finite parameter entries")

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.n_in] + [w.shape[0] for w in self.weights]

    def arrays(self) -> list[np.ndarray]:
        """Interleaved [W0, b0, W1, b1, ...]; the ordering used by ParamGrad."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "MlpParams":
        return cls(list(arrays[0::2]), list(arrays[1::2]))

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "MlpParams":
        out, k = [], 0
        for a in self.arrays():
            out.append(np.asarray(vec[k:k + a.size], dtype=float).reshape(a.shape).copy())
            k += a.size
        if k != vec.size:
            raise ShapeError(f"flat vector has {vec.size} entries, network needs {k}")
        return MlpParams.from_arrays(out)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())


# ParamGrad has exactly the layout of MlpParams.
ParamGrad = MlpParams


def init_mlp(sizes: Sequence[int], rng: np.random.Generator | int | None = None,
             zero_output: bool = False) -> MlpParams:
    """Fan-in uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for W and b.

    This is the distribution torch.nn.Linear uses by default.
    """
    rng = np.random.default_rng(rng)
    ws, bs = [], []
    for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-bound, bound, size=(n_out, n_in))
        b = rng.uniform(-bound, bound, size=n_out)
        if zero_output and k == len(sizes) - 2:
            w[:] = 0.0
            b[:] = 0.0
        ws.append(w)
        bs.append(b)
    return MlpParams(ws, bs)


def save_params(params: MlpParams, path: str | Path, meta: dict | None = None) -> None:
    """JSON checkpoint: layer shapes plus row-major data, versioned."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "sizes": params.sizes,
        "layers": [
            {"weight_shape": list(w.shape), "weight": w.ravel().tolist(), "bias": b.tolist()}
            for w, b in zip(params.weights, params.biases)
        ],
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(doc))


def load_params(path: str | Path) -> tuple[MlpParams, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    ws = [np.array(l["weight"], dtype=float).reshape(l["weight_shape"]) for l in doc["layers"]]
    bs = [np.array(l["bias"], dtype=float) for l in doc["layers"]]
    return MlpParams(ws, bs), doc.get("meta", {})


# ---------------------------------------------------------------------------
# plain evaluation and jets


def _as_batch(params: MlpParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != params.n_in:
        raise ShapeError(f"network takes {params.n_in} inputs, got array of shape {x.shape}")
    return xb, single


def _value_pass(params: MlpParams, x: np.ndarray) -> np.ndarray:
    h = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = h @ w.T + b
        h = a if k == last else np.tanh(a)
    return h[:, 0]


def mlp_eval(params: MlpParams, x) -> float | np.ndarray:
    """Network value at one point (1-D input) or a batch of points (2-D input)."""
    xb, single = _as_batch(params, x)
    out = _value_pass(params, xb)
    return float(out[0]) if single else out


@dataclass
class Jet2:
    """value, input gradient and input Hessian of a scalar field at one point."""

    value: float
    grad: np.ndarray
    hess: np.ndarray

    def __post_init__(self):
        self.grad = np.asarray(self.grad, dtype=float)
        self.hess = np.asarray(self.hess, dtype=float)
        n = self.grad.shape[0]
        if self.hess.shape != (n, n):
            raise ShapeError(f"hessian shape {self.hess.shape} does not match gradient length {n}")
        if not np.array_equal(self.hess, self.hess.T):
            raise ValueError("hessian must be exactly symmetric")


def all_pairs(n: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n) for j in range(i, n)]


def unit_seeds(m: int, n_in: int, dirs: Sequence[int] | None = None) -> np.ndarray:
    dirs = range(n_in) if dirs is None else dirs
    u1 = np.zeros((len(dirs), m, n_in))
    for k, i in enumerate(dirs):
        u1[k, :, i] = 1.0
    return u1


def mlp_jet_batch(params: MlpParams, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Values (M,), gradients (M, n) and Hessians (M, n, n) w.r.t. the raw inputs."""
    xb, _ = _as_batch(params, x)
    m, n = xb.shape
    pairs = all_pairs(n)
    out0, out1, out2, _ = jet_forward(params, xb, unit_seeds(m, n), np.zeros((len(pairs), m, n)), pairs)
    hess = np.empty((m, n, n))
    for p, (i, j) in enumerate(pairs):
        hess[:, i, j] = out2[p]
        hess[:, j, i] = out2[p]
    return out0, out1.T.copy(), hess


def mlp_jet(params: MlpParams, x) -> Jet2:
    xb, single = _as_batch(params, x)
    if not single:
        raise ShapeError("mlp_jet takes a single point; use mlp_jet_batch for batches")
    v, g, h = mlp_jet_batch(params, xb)
    return Jet2(float(v[0]), g[0], h[0])


@dataclass
class _LayerCache:
    z0: np.ndarray
    zt: np.ndarray | None
    at: np.ndarray | None = None
    t: np.ndarray | None = None


@dataclass
class JetCache:
    layers: list[_LayerCache] = field(default_factory=list)
    n_first: int = 0
    pairs: list[tuple[int, int]] = field(default_factory=list)


def tanh_jet_fwd(a0, at, pi, pj, n_first):
    """Hidden-layer jet rules; returns (t, zt).

    h = tanh(a), h_c = s1 a_c, and for second-order channels additionally
    + s2 a_i a_j, with s1 = 1 - t^2, s2 = -2 t s1.
    """
    t = np.tanh(a0)
    s1 = 1.0 - t * t
    s2 = -2.0 * t * s1
    zt = s1 * at
    if len(pi):
        zt[n_first:] += s2 * at[pi] * at[pj]
    return t, zt


def tanh_jet_bwd(t, at, c0, ct, pi, pj, n_first):
    """Cotangents (of the pre-activation jet) from cotangents of the layer output jet."""
    s1 = 1.0 - t * t
    s2 = -2.0 * t * s1
    ca_t = s1 * ct
    ca0 = s1 * c0 + s2 * np.einsum("cmn,cmn->mn", ct, at)
    if len(pi):
        ct2 = ct[n_first:]
        sbar2 = np.einsum("pmn,pmn->mn", ct2, at[pi] * at[pj])
        weighted = s2 * ct2
        for q, (i, j) in enumerate(zip(pi, pj)):
            ca_t[i] += weighted[q] * at[j]
            ca_t[j] += weighted[q] * at[i]
        ca0 += s1 * (6.0 * t * t - 2.0) * sbar2
    return ca0, ca_t


def jet_forward(params: MlpParams, u0: np.ndarray, u1: np.ndarray, u2: np.ndarray,
                pairs: Sequence[tuple[int, int]]):
    """Push an input jet through the network.

    u0: (M, n_in) input values.
    u1: (D, M, n_in) first derivatives of the inputs along D directions.
    u2: (P, M, n_in) second derivatives of the inputs for each (i, j) in
        ``pairs`` (indices into the D directions).

    Returns (out0 (M,), out1 (D, M), out2 (P, M), cache).  For a hidden layer
    with pre-activation a, the jet rules are
        h = tanh(a), h_i = s1 a_i, h_ij = s1 a_ij + s2 a_i a_j
    with s1 = 1 - t^2, s2 = -2 t s1.
    """
    pairs = list(pairs)
    m = u0.shape[0]
    if u0.ndim != 2 or u0.shape[1] != params.n_in:
        raise ShapeError(f"network takes {params.n_in} inputs, got {u0.shape}")
    n_first, n_second = u1.shape[0], u2.shape[0]
    if n_second != len(pairs):
        raise ShapeError("one second-order input slice is needed per pair")
    pi = np.array([p[0] for p in pairs], dtype=int)
    pj = np.array([p[1] for p in pairs], dtype=int)
    z0 = u0
    zt = np.concatenate([u1, u2], axis=0) if n_first + n_second else None
    cache = JetCache(n_first=n_first, pairs=pairs)
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        lc = _LayerCache(z0=z0, zt=zt)
        a0 = z0 @ w.T + b
        at = None
        if zt is not None:
            c = zt.shape[0]
            at = (zt.reshape(c * m, -1) @ w.T).reshape(c, m, -1)
        if k == last:
            cache.layers.append(lc)
            z0, zt = a0, at
            break
        if at is None:
            t = np.tanh(a0)
        else:
            t, zt = tanh_jet_fwd(a0, at, pi, pj, n_first)
        lc.at, lc.t = at, t
        cache.layers.append(lc)
        z0 = t
    out0 = z0[:, 0]
    if zt is None:
        return out0, np.zeros((0, m)), np.zeros((0, m)), cache
    return out0, zt[:n_first, :, 0], zt[n_first:, :, 0], cache


def jet_backward(params: MlpParams, cache: JetCache, g0: np.ndarray, gt: np.ndarray | None,
                 need_input: bool = False):
    """Reverse sweep for ``jet_forward``.

    g0: (M,) cotangent of the output value; gt: (D+P, M) cotangents of the
    derivative channels (or None).  Returns (list of arrays [dW0, db0, ...],
    input cotangents (cz0, czt) or None).
    """
    n_first = cache.n_first
    pairs = cache.pairs
    pi = np.array([p[0] for p in pairs], dtype=int)
    pj = np.array([p[1] for p in pairs], dtype=int)
    grads: list[np.ndarray] = [None] * (2 * len(params.weights))  # type: ignore[list-item]
    c0 = g0[:, None]
    ct = None if gt is None else gt[:, :, None]
    last = len(params.weights) - 1
    for k in range(last, -1, -1):
        w = params.weights[k]
        lc = cache.layers[k]
        if k != last:
            # (c0, ct) are cotangents of the layer output h; map them to a
            t, at = lc.t, lc.at
            if at is not None and ct is not None:
                ca0, ca_t = tanh_jet_bwd(t, at, c0, ct, pi, pj, n_first)
            else:
                ca0, ca_t = (1.0 - t * t) * c0, None
        else:
            ca0, ca_t = c0, ct
        gw = ca0.T @ lc.z0
        gb = ca0.sum(axis=0)
        if ca_t is not None and lc.zt is not None:
            c, m = ca_t.shape[:2]
            gw = gw + ca_t.reshape(c * m, -1).T @ lc.zt.reshape(c * m, -1)
        grads[2 * k], grads[2 * k + 1] = gw, gb
        if k == 0 and not need_input:
            return grads, None
        c0 = ca0 @ w
        if ca_t is not None:
            c, m = ca_t.shape[:2]
            ct = (ca_t.reshape(c * m, -1) @ w).reshape(c, m, -1)
        else:
            ct = None
    return grads, (c0, ct)


# ---------------------------------------------------------------------------
# reverse tape


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) for p in parts)


class Var:
    """Array node on a reverse-mode tape."""

    __slots__ = ("data", "grad", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, data, parents: tuple = (), backward: Callable | None = None):
        self.data = np.asarray(data, dtype=float)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward

    def __repr__(self):
        return f"Var(shape={self.data.shape})"

    @property
    def shape(self):
        return self.data.shape

    def _acc(self, g):
        g = _unbroadcast(np.asarray(g, dtype=float), self.data.shape)
        self.grad = g.copy() if self.grad is None else self.grad + g

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        if not isinstance(other, Var):
            other_data = np.asarray(other, dtype=float)
            out = Var(self.data + other_data, (self,))
            out._backward = lambda: self._acc(out.grad)
            return out
        out = Var(self.data + other.data, (self, other))

        def bw():
            self._acc(out.grad)
            other._acc(out.grad)
        out._backward = bw
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Var(-self.data, (self,))
        out._backward = lambda: self._acc(-out.grad)
        return out

    def __sub__(self, other):
        return self + (-other if isinstance(other, Var) else -np.asarray(other, dtype=float))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, Var):
            c = np.asarray(other, dtype=float)
            out = Var(self.data * c, (self,))
            out._backward = lambda: self._acc(out.grad * c)
            return out
        out = Var(self.data * other.data, (self, other))

        def bw():
            self._acc(out.grad * other.data)
            other._acc(out.grad * self.data)
        out._backward = bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Var):
            return self * (1.0 / np.asarray(other, dtype=float))
        inv = 1.0 / other.data
        out = Var(self.data * inv, (self, other))

        def bw():
            self._acc(out.grad * inv)
            other._acc(-out.grad * self.data * inv * inv)
        out._backward = bw
        return out

    def square(self):
        out = Var(self.data * self.data, (self,))
        out._backward = lambda: self._acc(2.0 * self.data * out.grad)
        return out

    def sum(self):
        out = Var(self.data.sum(), (self,))
        out._backward = lambda: self._acc(np.broadcast_to(out.grad, self.data.shape))
        return out

    def mean(self):
        n = self.data.size
        out = Var(self.data.mean(), (self,))
        out._backward = lambda: self._acc(np.broadcast_to(out.grad / n, self.data.shape))
        return out

    def __getitem__(self, idx):
        out = Var(self.data[idx], (self,))

        def bw():
            g = np.zeros_like(self.data)
            if _basic_index(idx):
                g[idx] = out.grad
            else:
                np.add.at(g, idx, out.grad)
            self._acc(g)
        out._backward = bw
        return out

    # traversal ------------------------------------------------------------
    def backward(self, retain_graph: bool = False):
        """Accumulate d(self)/d(leaf) into leaf ``.grad``.

        Unless ``retain_graph``, interior nodes drop their closures, parents and
        gradients as soon as they have been processed, which breaks the
        reference cycles of the tape and frees the jet caches early.
        """
        if self.data.size != 1:
            raise ShapeError("backward() needs a scalar output")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()
            if not retain_graph and node._parents:
                node._backward = None
                node._parents = ()
                node.grad = None


def value_of(v) -> np.ndarray:
    return v.data if isinstance(v, Var) else np.asarray(v, dtype=float)


def clamp(v: Var, lo, hi) -> Var:
    """min(hi, max(lo, v)); derivative 1 strictly inside, 0 at and beyond the kinks.

    This is the two-ReLU composition L1(L2(v)) with L2(v) = -relu(hi - v) + hi
    and L1(w) = relu(w - lo) + lo.  The value is taken from the exact clamp:
    the literal composition rounds in the last bits and can leave [lo, hi].
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    out_data = np.minimum(hi, np.maximum(lo, v.data))
    mask = ((v.data < hi) & (v.data > lo)).astype(float)
    out = Var(out_data, (v,))
    out._backward = lambda: v._acc(out.grad * mask)
    return out


def track(params: MlpParams) -> list[Var]:
    return [Var(a) for a in params.arrays()]


def net_jet(pvars: Sequence[Var], u0: np.ndarray, u1: np.ndarray, u2: np.ndarray,
            pairs: Sequence[tuple[int, int]]) -> Var:
    """Network jet as one tape node; output shape (1 + D + P, M)."""
    params = MlpParams.from_arrays([p.data for p in pvars])
    o0, o1, o2, cache = jet_forward(params, u0, u1, u2, pairs)
    out = Var(np.concatenate([o0[None], o1, o2], axis=0), tuple(pvars))

    def bw():
        g = out.grad
        gt = g[1:] if g.shape[0] > 1 else None
        grads, _ = jet_backward(params, cache, g[0], gt)
        for pv, ga in zip(pvars, grads):
            pv._acc(ga)
    out._backward = bw
    return out


def loss_param_grad(loss_evaluator: Callable[[list[list[Var]]], Var],
                    params_list: Sequence[MlpParams]) -> tuple[float, list[ParamGrad]]:
    """Evaluate a scalar loss of several networks and its parameter gradients.

    ``loss_evaluator`` receives one list of tracked arrays per network (the
    layout of ``MlpParams.arrays``) and returns a scalar ``Var``.
    """
    tracked = [track(p) for p in params_list]
    loss = loss_evaluator(tracked)
    if not isinstance(loss, Var):
        raise TypeError("loss evaluator must return a Var")
    if not np.isfinite(loss.data).all():
        raise NonFiniteLossError("total")
    loss.backward()
    grads = []
    for tv in tracked:
        grads.append(MlpParams.from_arrays([np.zeros_like(v.data) if v.grad is None else v.grad for v in tv]))
    return float(loss.data), grads
