"""Optimizers (ADAM, L-BFGS) and the two training algorithms.

An optimizer works on a list of ``MlpParams`` and an objective
``fg(params_list) -> (loss, grads[, terms])`` where ``grads`` is a list of
``MlpParams``-shaped gradients.  Training is full batch.
"""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.optimize import line_search

from . import diffcore as dc
from .auxfields import (TOL_NETWORK, AuxiliaryField, NetworkField, hbar_cosine, train_g, train_h,
                        train_phi, verify_aux)
from .geometry import SampleSet, make_samples, sample_boundary, sample_interface, sample_interior
from .network import DcsnnField, HardConstraintField, NetCore, init_core
from .problems import ProblemSpec
from .residuals import LossWeights, SoftEllipticLoss, hard_loss_for, project_box

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class HardConstraintError(RuntimeError):
    """A logged iterate violated an exactly imposed constraint."""


# ---------------------------------------------------------------------------
# configs and reports


@dataclass
class AdamConfig:
    iterations: int
    schedule: list = field(default_factory=lambda: [(0, 1e-3)])
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int | None = None

    def __post_init__(self):
        self.schedule = [(int(s), float(lr)) for s, lr in self.schedule]
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if not self.schedule or self.schedule[0][0] != 0:
            raise ConfigError("the first schedule stage must start at iteration 0")
        starts = [s for s, _ in self.schedule]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ConfigError("schedule stages must be strictly increasing")
        if any(lr <= 0 for _, lr in self.schedule):
            raise ConfigError("learning rates must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("ADAM betas must lie in (0, 1)")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")

    def lr(self, it: int) -> float:
        cur = self.schedule[0][1]
        for s, lr in self.schedule:
            if it >= s:
                cur = lr
        return cur


def geometric_schedule(lr0: float, lr1: float, iterations: int, stages: int = 4) -> list:
    """Piecewise-constant stages decaying geometrically from lr0 to lr1."""
    if stages == 1:
        return [(0, lr0)]
    out: list = []
    for k in range(stages):
        start = int(round(k * iterations / stages))
        # short runs: stages that would share a start are dropped
        if not out or start > out[-1][0]:
            out.append((start, float(lr0 * (lr1 / lr0) ** (k / (stages - 1)))))
    return out


@dataclass
class LbfgsConfig:
    iterations: int
    history: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    gtol: float = 1e-10
    max_ls: int = 20
    debug: bool = False

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if not 0 < self.c1 < self.c2 < 1:
            raise ConfigError("need 0 < c1 < c2 < 1")
        if self.history < 1:
            raise ConfigError("history size must be >= 1")


@dataclass
class TrainReport:
    params: list
    history: list            # one dict per iteration: iteration, loss, per-term values
    final_loss: float
    iterations: int
    wall_time: float
    seed: int | None
    config: dict
    status: str = "completed"
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.status in ("completed", "converged") and np.isfinite(self.final_loss)

    def losses(self) -> np.ndarray:
        return np.array([h["loss"] for h in self.history])

    def summary(self) -> dict:
        return {"final_loss": self.final_loss, "iterations": self.iterations, "wall_time": self.wall_time,
                "seed": self.seed, "status": self.status, "error": self.error, "config": self.config}


def _call(fg, plist):
    out = fg(plist)
    if len(out) == 3:
        return out
    loss, grads = out
    return loss, grads, {}


def _flat(plist) -> np.ndarray:
    return np.concatenate([p.flat() for p in plist]) if plist else np.zeros(0)


def _unflat(plist, v):
    out, k = [], 0
    for p in plist:
        n = p.size
        out.append(p.with_flat(v[k:k + n]))
        k += n
    return out


def _record(history, it, loss, terms):
    row = {"iteration": it, "loss": float(loss)}
    row.update({k: float(v) for k, v in terms.items()})
    history.append(row)


# ---------------------------------------------------------------------------
# ADAM


def adam_run(fg: Callable, params: Sequence[dc.MlpParams], cfg: AdamConfig,
             callback: Callable | None = None, log_every: int = 1000) -> TrainReport:
    """Full-batch ADAM with bias correction; all parameter blocks move together.

    ``callback(it, params_list, loss)`` runs after each update.  A non-finite
    loss or gradient stops the run; the report then holds the last finite iterate.
    """
    t0 = time.perf_counter()
    plist = list(params)
    theta = _flat(plist)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    history: list = []
    status, err, loss = "completed", None, float("nan")
    b1, b2 = cfg.beta1, cfg.beta2
    for it in range(cfg.iterations):
        cur = _unflat(plist, theta)
        try:
            loss, grads, terms = _call(fg, cur)
        except dc.NonFiniteLossError as e:
            status, err = "diverged", str(e)
            break
        g = _flat(grads)
        if not np.isfinite(g).all():
            status, err = "diverged", f"non-finite gradient at iteration {it}"
            break
        _record(history, it, loss, terms)
        last_ok = theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** (it + 1))
        vhat = v / (1 - b2 ** (it + 1))
        theta = theta - cfg.lr(it) * mhat / (np.sqrt(vhat) + cfg.eps)
        if log_every and it % log_every == 0:
            log.info("adam it=%d loss=%.6e lr=%.2e", it, loss, cfg.lr(it))
        if callback is not None:
            callback(it, _unflat(plist, theta), loss)
    if status == "diverged" and history:
        theta = last_ok
    final = _unflat(plist, theta)
    if status == "completed":
        # loss at the returned parameters
        try:
            loss = float(_call(fg, final)[0])
        except dc.NonFiniteLossError as e:
            status, err = "diverged", str(e)
    if status == "diverged":
        loss = history[-1]["loss"] if history else float("nan")
    return TrainReport(final, history, float(loss), len(history), time.perf_counter() - t0, cfg.seed,
                       asdict(cfg), status, err)


# ---------------------------------------------------------------------------
# L-BFGS


def _two_loop(g, S, Y):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(S), reversed(Y)):
        rho = 1.0 / y.dot(s)
        a = rho * s.dot(q)
        q -= a * y
        alphas.append((rho, a))
    s, y = S[-1], Y[-1]
    q *= s.dot(y) / y.dot(y)
    for (s, y), (rho, a) in zip(zip(S, Y), reversed(alphas)):
        b = rho * y.dot(q)
        q += (a - b) * s
    return -q


APPROX_WOLFE_EPS = 1e-14


def _approx_wolfe_step(evaluate, x, d, f, g, cfg):
    """Unit step under the approximate Wolfe conditions of Hager and Zhang.

    Near a minimizer the decrease c1*step*g.d drops below the rounding level
    of f and the exact test cannot be decided.  The step is then accepted if f
    does not rise beyond that level and the slope satisfies
    (2 c1 - 1) g.d >= g_new.d >= c2 g.d.
    """
    gd = g.dot(d)
    f1, g1, _ = evaluate(x + d)
    if abs(cfg.c1 * gd) > APPROX_WOLFE_EPS * max(abs(f), 1e-300):
        return None
    slope = g1.dot(d)
    if f1 <= f + APPROX_WOLFE_EPS * abs(f) and (2 * cfg.c1 - 1) * gd >= slope >= cfg.c2 * gd:
        return 1.0
    return None


def _wolfe_step(evaluate, x, d, f, g, f_old, cfg):
    with warnings.catch_warnings():
        # failures are handled below; scipy warns on each one
        warnings.filterwarnings("ignore", message="The line search algorithm did not converge")
        res = line_search(lambda z: evaluate(z)[0], lambda z: evaluate(z)[1], x, d, g, f, f_old,
                          c1=cfg.c1, c2=cfg.c2, maxiter=cfg.max_ls)
    return res[0] if res[0] is not None else _approx_wolfe_step(evaluate, x, d, f, g, cfg)


def lbfgs_run(fg: Callable, params: Sequence[dc.MlpParams], cfg: LbfgsConfig,
              callback: Callable | None = None) -> TrainReport:
    """L-BFGS with a strong-Wolfe line search starting from step 1.

    A rejected curvature pair (s.y <= 0) clears the memory, so the next
    direction is steepest descent.  When the strong-Wolfe search fails, the
    unit step is tried under approximate Wolfe conditions (this only applies
    once f is at its rounding floor); after that the search is retried once
    along steepest descent, and if that fails too the run stops with status
    ``line_search_failed``.
    """
    t0 = time.perf_counter()
    plist = list(params)
    cache: dict = {}

    def evaluate(x):
        key = x.tobytes()
        if key not in cache:
            cache.clear()
            loss, grads, terms = _call(fg, _unflat(plist, x))
            cache[key] = (float(loss), _flat(grads), terms)
        return cache[key]

    x = _flat(plist)
    history: list = []
    status, err = "completed", None
    try:
        f, g, terms = evaluate(x)
    except dc.NonFiniteLossError as e:
        return TrainReport(plist, [], float("nan"), 0, time.perf_counter() - t0, None, asdict(cfg),
                           "diverged", str(e))
    S: list = []
    Y: list = []
    f_old = None
    for it in range(cfg.iterations):
        if np.linalg.norm(g) <= cfg.gtol:
            status = "converged"
            break
        d = _two_loop(g, S, Y) if S else -g / max(1.0, np.linalg.norm(g))
        if g.dot(d) >= 0:
            S.clear(), Y.clear()
            d = -g / max(1.0, np.linalg.norm(g))
        try:
            step = _wolfe_step(evaluate, x, d, f, g, f_old, cfg)
            if step is None and S:
                S.clear(), Y.clear()
                d = -g / max(1.0, np.linalg.norm(g))
                step = _wolfe_step(evaluate, x, d, f, g, None, cfg)
        except dc.NonFiniteLossError as e:
            status, err = "diverged", str(e)
            break
        if step is None:
            status = "line_search_failed"
            break
        x_new = x + step * d
        f_new, g_new, terms = evaluate(x_new)
        if cfg.debug:
            assert f_new <= f + cfg.c1 * step * g.dot(d) + APPROX_WOLFE_EPS * abs(f), "sufficient decrease violated"
            assert abs(g_new.dot(d)) <= cfg.c2 * abs(g.dot(d)) + 1e-12, "curvature condition violated"
        s, y = x_new - x, g_new - g
        if s.dot(y) > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            S.append(s), Y.append(y)
            if len(S) > cfg.history:
                S.pop(0), Y.pop(0)
        else:
            S.clear(), Y.clear()
        f_old, f, g, x = f, f_new, g_new, x_new
        _record(history, it, f, terms)
        if callback is not None:
            callback(it, _unflat(plist, x), f)
    return TrainReport(_unflat(plist, x), history, float(f), len(history), time.perf_counter() - t0, None,
                       asdict(cfg), status, err)


# ---------------------------------------------------------------------------
# trained solutions


class RunResult(NamedTuple):
    u: Callable
    fields: "TrainedSolution"
    report: TrainReport


class TrainedSolution:
    """Evaluable (y, p, u) of a trained pair; callables take (x, side=None[, t])."""

    def __init__(self, problem: ProblemSpec, y, p, algorithm: str):
        self.problem, self.y_field, self.p_field, self.algorithm = problem, y, p, algorithm

    def _side(self, x, side):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return x, (self.problem.geometry.region_labels(x) if side is None else np.asarray(side))

    def y(self, x, side=None, t=None):
        x, side = self._side(x, side)
        if isinstance(self.y_field, DcsnnField):
            return self.y_field.value(x, side)
        return self.y_field.value(x, side, t)

    def p(self, x, side=None, t=None):
        x, side = self._side(x, side)
        if isinstance(self.p_field, DcsnnField):
            return self.p_field.value(x, side)
        return self.p_field.value(x, side, t)

    def u(self, x, side=None, t=None):
        """P(-p/alpha); for interface control, x are interface points (outer trace of p)."""
        x, side = self._side(x, side)
        pr = self.problem
        if pr.variant == "interface_control":
            side = np.ones(x.shape[0], int)
        pv = self.p(x, side, t)
        return project_box(-pv / pr.alpha, pr.ua(x, side, t), pr.ub(x, side, t))

    def params(self) -> dict:
        return {"y": self.y_field.core.params, "p": self.p_field.core.params}

    def set_params(self, py: dc.MlpParams, pp: dc.MlpParams) -> None:
        self.y_field.core.params = py
        self.p_field.core.params = pp

    def boundary_residual(self, n=1000, seed=0, t=None) -> float:
        """max |y - h0| on the outer boundary."""
        pr = self.problem
        xb = sample_boundary(pr.geometry, n, seed)
        one = np.ones(n, int)
        tt = None if not pr.parabolic else (np.random.default_rng(seed).uniform(0, pr.T, n) if t is None
                                            else np.full(n, float(t)))
        return float(np.max(np.abs(self.y(xb, one, tt) - pr.h0(xb, one, tt))))

    def jump_residual(self, n=1000, seed=0) -> float:
        """max |[y] - g0| on the interface."""
        pr = self.problem
        xg, _ = sample_interface(pr.geometry, n, seed)
        one = np.ones(n, int)
        tt = None if not pr.parabolic else np.random.default_rng(seed).uniform(0, pr.T, n)
        jump = self.y(xg, one, tt) - self.y(xg, -one, tt)
        return float(np.max(np.abs(jump - pr.g0(xg, None, tt))))


# ---------------------------------------------------------------------------
# algorithms


@dataclass
class NetConfig:
    hidden: list = field(default_factory=lambda: [100])
    seed: int = 0

    def __post_init__(self):
        self.hidden = [int(h) for h in self.hidden]
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigError("hidden layer sizes must be positive")


def _pair_objective(loss, freeze_p: dc.MlpParams | None = None):
    """fg over [theta_y, theta_p] (or [theta_y] with theta_p frozen)."""
    def fg(plist):
        terms: dict = {}

        def ev(tr):
            if freeze_p is None:
                total, t = loss.evaluate(tr[0], tr[1])
            else:
                total, t = loss.evaluate(tr[0], None)
            terms.update(t)
            return total
        val, grads = dc.loss_param_grad(ev, plist)
        return val, grads, terms
    return fg


def _check_variant(problem, variants, name):
    if problem.variant not in variants:
        raise ConfigError(f"{name} does not cover {problem.variant} problems")


def run_algorithm1(problem: ProblemSpec, net: NetConfig, weights: LossWeights, samples: SampleSet,
                   adam: AdamConfig, callback=None) -> RunResult:
    """Soft-constraint training of the DCSNN pair (y~, p~)."""
    _check_variant(problem, ("distributed_elliptic",), "Algorithm 1")
    d = problem.geometry.dim
    py = init_core(d + 1, net.hidden, net.seed)
    pp = init_core(d + 1, net.hidden, net.seed + 1)
    y = DcsnnField(NetCore(py), problem.geometry)
    p = DcsnnField(NetCore(pp), problem.geometry)
    loss = SoftEllipticLoss(y, p, samples, problem, weights)
    rep = adam_run(_pair_objective(loss), [py, pp], adam, callback)
    sol = TrainedSolution(problem, y, p, "alg1")
    sol.set_params(*rep.params)
    return RunResult(sol.u, sol, rep)


def hard_fields(problem: ProblemSpec, aux: AuxiliaryField, net: NetConfig):
    """Fresh (y, p) composites with random cores."""
    d = problem.geometry.dim
    n_in = d + 1 + (1 if problem.parabolic else 0)
    kinds = ("state_parabolic", "adjoint_parabolic") if problem.parabolic else ("state", "adjoint")
    py = init_core(n_in, net.hidden, net.seed)
    pp = init_core(n_in, net.hidden, net.seed + 1)
    y = HardConstraintField(aux, NetCore(py), kinds[0], problem.T, problem.geometry)
    p = HardConstraintField(aux, NetCore(pp), kinds[1], problem.T, problem.geometry)
    return y, p


def run_algorithm2(problem: ProblemSpec, aux: AuxiliaryField, net: NetConfig, weights: LossWeights,
                   samples: SampleSet, adam: AdamConfig, lbfgs: LbfgsConfig | None = None,
                   callback=None, check_every: int = 1000) -> RunResult:
    """Hard-constraint training; optional trailing L-BFGS on theta_y with theta_p frozen.

    For closed-form auxiliaries the hard constraints of every ``check_every``-th
    iterate are spot-checked; a violation stops training.
    """
    y, p = hard_fields(problem, aux, net)
    sol = TrainedSolution(problem, y, p, "alg2")
    loss = hard_loss_for(problem)(y, p, samples, problem, weights)
    py, pp = y.core.params, p.core.params

    def cb(it, plist, val):
        if check_every and aux.is_closed_form and it % check_every == 0:
            sol.set_params(*plist)
            res = max(sol.boundary_residual(200, it), sol.jump_residual(200, it))
            if res > aux.tol_hard:
                raise HardConstraintError(f"hard constraint residual {res:.3e} at iteration {it}")
        if callback is not None:
            callback(it, plist, val)

    rep = adam_run(_pair_objective(loss), [py, pp], adam, cb)
    py, pp = rep.params
    if lbfgs is not None and lbfgs.iterations > 0 and rep.ok:
        p.core.params = pp
        rep2 = lbfgs_run(_pair_objective(loss, freeze_p=pp), [py], lbfgs)
        py = rep2.params[0]
        off = rep.iterations
        for row in rep2.history:
            rep.history.append({**row, "iteration": row["iteration"] + off, "stage": "lbfgs"})
        rep.iterations = len(rep.history)
        rep.final_loss = rep2.final_loss
        rep.wall_time += rep2.wall_time
        rep.config = {"adam": rep.config, "lbfgs": rep2.config}
        if rep2.status not in ("completed", "converged", "line_search_failed"):
            rep.status, rep.error = rep2.status, rep2.error
        rep.params = [py, pp]
    sol.set_params(py, pp)
    return RunResult(sol.u, sol, rep)


# ---------------------------------------------------------------------------
# Option II pretraining


@dataclass
class PretrainConfig:
    g_hidden: int = 500
    h_hidden: int = 500
    phi_hidden: int = 200
    lbfgs_iterations: int = 4000   # 200 outer steps of 20 inner iterations each
    lbfgs_history: int = 100
    phi_adam: AdamConfig = field(default_factory=lambda: AdamConfig(
        iterations=30000, schedule=[(0, 5e-4), (10000, 3e-4), (20000, 1e-4)]))
    phi_out: float = 5.0
    phi_in: float = 0.0
    h_interior_weight: float = 0.01
    n_boundary: int = 256
    n_interface: int = 256
    n_interior: int = 1024
    seed: int = 0


def pretrain_aux(problem: ProblemSpec, cfg: PretrainConfig):
    """Fit g^, h^ (plain MLPs) and phi^ (DCSNN) for an elliptic problem with continuous y.

    Returns (AuxiliaryField, reports dict).
    """
    if problem.parabolic:
        raise ConfigError("network auxiliaries are provided for elliptic problems only")
    geom = problem.geometry
    rng = np.random.default_rng(cfg.seed)
    xb = sample_boundary(geom, cfg.n_boundary, rng)
    xg, nrm = sample_interface(geom, cfg.n_interface, rng)
    xi, _ = sample_interior(geom, cfg.n_interior, rng)
    one_b = np.ones(xb.shape[0], int)
    g0 = problem.g0(xg)
    if np.max(np.abs(g0)) > 0:
        raise ConfigError("a plain-network lift needs a zero value jump")
    d = geom.dim
    g_par, g_rep = train_g(init_core(d, [cfg.g_hidden], cfg.seed + 10), xb, problem.h0(xb, one_b),
                           cfg=LbfgsConfig(cfg.lbfgs_iterations, history=cfg.lbfgs_history))
    h_par, h_rep = train_h(init_core(d, [cfg.h_hidden], cfg.seed + 11), xi, xb, hbar_cosine,
                           w_interior=cfg.h_interior_weight, cfg=LbfgsConfig(cfg.lbfgs_iterations, history=cfg.lbfgs_history))
    phi_par, phi_rep = train_phi(init_core(d + 1, [cfg.phi_hidden], cfg.seed + 12), xg, nrm, geom,
                                 cfg.phi_out, cfg.phi_in, cfg=cfg.phi_adam)
    aux = AuxiliaryField(
        g=NetworkField(g_par, name="g"), h=NetworkField(h_par, name="h"),
        phi=NetworkField(phi_par, dcsnn=True, name="phi"),
        g0=lambda x, t=None: problem.g0(x, None, t), h0=lambda x, t=None: problem.h0(x, None, t),
        tol_hard=TOL_NETWORK, meta={"option": "II", "example": problem.name})
    return aux, {"g": g_rep, "h": h_rep, "phi": phi_rep}


def network_aux(problem: ProblemSpec, g: NetworkField, h: NetworkField, phi: NetworkField) -> AuxiliaryField:
    return AuxiliaryField(g=g, h=h, phi=phi, g0=lambda x, t=None: problem.g0(x, None, t),
                          h0=lambda x, t=None: problem.h0(x, None, t), tol_hard=TOL_NETWORK,
                          meta={"option": "II", "example": problem.name})


def default_samples(problem: ProblemSpec, M: int, MB: int, MG: int, seed, n_times: int = 16) -> SampleSet:
    from .geometry import sample_chebyshev_time
    times = sample_chebyshev_time(problem.T, n_times) if problem.parabolic else None
    return make_samples(problem.geometry, M, MB, MG, seed, times)


__all__ = ["AdamConfig", "LbfgsConfig", "TrainReport", "NetConfig", "PretrainConfig", "RunResult",
           "TrainedSolution", "adam_run", "lbfgs_run", "run_algorithm1", "run_algorithm2", "pretrain_aux",
           "network_aux", "hard_fields", "geometric_schedule", "default_samples", "verify_aux"]
