"""Command line entry point: ``hcpinn {pretrain-aux,train,evaluate,verify}``.

Exit codes: 0 success, 2 configuration error, 3 training diverged,
4 auxiliary verification failed, 5 invariant suite failed, 6 missing checkpoint.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import diffcore as dc
from .auxfields import NetworkField, verify_aux
from .geometry import make_samples, sample_boundary, sample_interface, sample_interior
from .network import HardConstraintField, NetCore, init_core, DcsnnField
from .problems import (EXAMPLE_IDS, REFERENCE_ERRORS_EX1, REFERENCE_MULTIRES_P, REFERENCE_MULTIRES_U, REFERENCE_MULTIRES_Y, EXAMPLE3_ERRORS, ProblemSpec,
                       build_example, grid_eval, l2_errors, multires_table, verify_optimality_system,
                       write_json, UnknownExampleError)
from .residuals import LossWeights, SoftEllipticLoss, hard_loss_for, write_term_csv
from .train import (AdamConfig, ConfigError, HardConstraintError, LbfgsConfig, NetConfig, PretrainConfig,
                    TrainedSolution, default_samples, geometric_schedule, network_aux, pretrain_aux,
                    run_algorithm1, run_algorithm2)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_AUX_VERIFY = 4
EXIT_VERIFY = 5
EXIT_MISSING = 6

log = logging.getLogger("hcpinn")


class MissingCheckpointError(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    problem: str
    algorithm: str
    option: str | None
    network: NetConfig
    weights: LossWeights
    samples: dict
    adam: AdamConfig
    lbfgs: LbfgsConfig | None = None
    pretrain: PretrainConfig | None = None
    aux_dir: str | None = None
    evaluation: dict = field(default_factory=dict)
    checkpoint_every: int = 0
    output: str = "runs/out"
    raw: dict = field(default_factory=dict)


def bundled_configs() -> list[str]:
    root = resources.files("hcpinn") / "configs"
    return sorted(p.name.rsplit(".", 1)[0] for p in root.iterdir() if p.name.endswith(".yaml"))


def read_config(name_or_path: str) -> dict:
    """A YAML file path, or the name of a bundled config (extension optional)."""
    p = Path(name_or_path)
    if p.is_file():
        text = p.read_text()
    else:
        stem = p.name.rsplit(".", 1)[0] if p.suffix in (".yaml", ".yml", ".cfg") else p.name
        res = resources.files("hcpinn") / "configs" / f"{stem}.yaml"
        if not res.is_file():
            raise ConfigError(f"no config file or bundled config named {name_or_path!r}; "
                              f"bundled: {', '.join(bundled_configs())}")
        text = res.read_text()
    doc = yaml.safe_load(text)
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    return doc


def _adam_from(d: dict, where: str) -> AdamConfig:
    d = dict(d)
    if "iterations" not in d:
        raise ConfigError(f"{where}.iterations is required")
    it = int(d.pop("iterations"))
    geo = d.pop("geometric", None)
    sched = d.pop("schedule", None)
    if (geo is None) == (sched is None):
        raise ConfigError(f"{where}: give exactly one of 'schedule' or 'geometric'")
    if geo is not None:
        sched = geometric_schedule(float(geo["lr_start"]), float(geo["lr_end"]), it, int(geo.get("stages", 4)))
    try:
        return AdamConfig(iterations=it, schedule=[(int(a), float(b)) for a, b in sched],
                          **{k: float(v) for k, v in d.items() if k != "seed"}, seed=d.get("seed"))
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from None


def _need(d, key, where):
    if key not in d:
        raise ConfigError(f"{where}.{key} is required")
    return d[key]


def parse_config(doc: dict, seed: int | None = None, out: str | None = None,
                 iterations: int | None = None) -> RunConfig:
    doc = copy.deepcopy(doc)
    if seed is not None:
        doc.setdefault("network", {})["seed"] = int(seed)
        doc.setdefault("samples", {})["seed"] = int(seed)
    if out is not None:
        doc["output"] = str(out)
    if iterations is not None:
        _need(doc, "adam", "config")["iterations"] = int(iterations)
    problem = str(_need(doc, "problem", "config"))
    if problem not in EXAMPLE_IDS:
        raise ConfigError(f"problem must be one of {EXAMPLE_IDS}, got {problem!r}")
    algorithm = str(_need(doc, "algorithm", "config"))
    if algorithm not in ("alg1", "alg2"):
        raise ConfigError("algorithm must be 'alg1' or 'alg2'")
    option = doc.get("option")
    if algorithm == "alg2" and str(option) not in ("I", "II"):
        raise ConfigError("option must be 'I' or 'II' for alg2")
    net = doc.get("network", {})
    try:
        network = NetConfig(hidden=list(net.get("hidden", [100])), seed=int(net.get("seed", 0)))
        weights = LossWeights.from_dict(doc.get("weights"))
    except ValueError as e:
        raise ConfigError(f"invalid config: {e}") from None
    samples = dict(doc.get("samples", {}))
    for k in ("M", "MB", "MG"):
        if int(_need(samples, k, "samples")) < 1:
            raise ConfigError(f"samples.{k} must be >= 1")
    samples.setdefault("seed", 0)
    samples.setdefault("n_times", 16)
    adam = _adam_from(_need(doc, "adam", "config"), "adam")
    lb = doc.get("lbfgs")
    lbfgs = None
    if lb:
        lbfgs = LbfgsConfig(**{k: (int(v) if k in ("iterations", "history", "max_ls") else v)
                               for k, v in lb.items()})
    pre = doc.get("pretrain")
    pretrain = None
    if pre:
        pre = dict(pre)
        phi_adam = _adam_from(pre.pop("phi_adam"), "pretrain.phi_adam") if "phi_adam" in pre else None
        try:
            pretrain = PretrainConfig(**pre, **({"phi_adam": phi_adam} if phi_adam else {}))
        except TypeError as e:
            raise ConfigError(f"pretrain: {e}") from None
    if algorithm == "alg2" and str(option) == "II" and not doc.get("aux_dir"):
        raise ConfigError("option II needs aux_dir")
    return RunConfig(problem=problem, algorithm=algorithm, option=None if option is None else str(option),
                     network=network, weights=weights, samples=samples, adam=adam, lbfgs=lbfgs,
                     pretrain=pretrain, aux_dir=doc.get("aux_dir"), evaluation=dict(doc.get("evaluation", {})),
                     checkpoint_every=int(doc.get("checkpoint_every", 0)), output=str(doc.get("output", "runs/out")),
                     raw=doc)


# ---------------------------------------------------------------------------
# building pieces


def load_aux(problem: ProblemSpec, aux_dir: str | Path):
    d = Path(aux_dir)
    paths = [d / f"{n}.json" for n in ("g", "h", "phi")]
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise MissingCheckpointError(f"missing auxiliary checkpoint(s): {', '.join(missing)}")
    return network_aux(problem, *(NetworkField.load(p) for p in paths))


def aux_for(cfg: RunConfig, problem: ProblemSpec):
    if cfg.option == "II":
        return load_aux(problem, cfg.aux_dir)
    return problem.option1_aux()


def samples_for(cfg: RunConfig, problem: ProblemSpec):
    s = cfg.samples
    return default_samples(problem, int(s["M"]), int(s["MB"]), int(s["MG"]), int(s["seed"]), int(s["n_times"]))


def solution_from_params(cfg: RunConfig, problem: ProblemSpec, py: dc.MlpParams, pp: dc.MlpParams) -> TrainedSolution:
    if cfg.algorithm == "alg1":
        y, p = DcsnnField(NetCore(py), problem.geometry), DcsnnField(NetCore(pp), problem.geometry)
        return TrainedSolution(problem, y, p, "alg1")
    aux = aux_for(cfg, problem)
    kinds = ("state_parabolic", "adjoint_parabolic") if problem.parabolic else ("state", "adjoint")
    y = HardConstraintField(aux, NetCore(py), kinds[0], problem.T, problem.geometry)
    p = HardConstraintField(aux, NetCore(pp), kinds[1], problem.T, problem.geometry)
    return TrainedSolution(problem, y, p, "alg2")


def load_run(run_dir: str | Path):
    """(RunConfig, problem, TrainedSolution) of a finished run directory."""
    run = Path(run_dir)
    cfg_path = run / "config.yaml"
    if not cfg_path.is_file():
        raise MissingCheckpointError(f"{cfg_path} not found")
    for n in ("y", "p"):
        if not (run / f"{n}.json").is_file():
            raise MissingCheckpointError(f"{run / (n + '.json')} not found")
    cfg = parse_config(yaml.safe_load(cfg_path.read_text()))
    problem = build_example(cfg.problem)
    py, _ = dc.load_params(run / "y.json")
    pp, _ = dc.load_params(run / "p.json")
    return cfg, problem, solution_from_params(cfg, problem, py, pp)


def eval_time(cfg: RunConfig, problem: ProblemSpec):
    if not problem.parabolic:
        return None
    return float(cfg.evaluation.get("t_fraction", 0.3)) * problem.T


def control_feasibility(sol: TrainedSolution, problem: ProblemSpec, N: int, t=None) -> dict:
    """min(u - ua), max(u - ub) over the N x N grid (interface samples for interface control)."""
    from .problems import grid_nodes
    if problem.variant == "interface_control":
        x, _ = sample_interface(problem.geometry, N * N, 0)
        side = np.ones(x.shape[0], int)
    else:
        x, side, _ = grid_nodes(problem.geometry, N)
    tt = None if t is None else np.full(x.shape[0], t)
    u = sol.u(x, side, tt)
    lo, hi = problem.ua(x, side, tt), problem.ub(x, side, tt)
    return {"min_u_minus_ua": float(np.min(u - lo)), "max_u_minus_ub": float(np.max(u - hi)),
            "feasible": bool(np.all(u >= lo) and np.all(u <= hi)), "points": int(x.shape[0])}


def evaluation_report(cfg: RunConfig, problem: ProblemSpec, sol: TrainedSolution) -> dict:
    ev = cfg.evaluation
    t = eval_time(cfg, problem)
    out: dict = {"t": t}
    out["hard_constraints"] = {"boundary_max": sol.boundary_residual(1000, 1, t),
                               "interface_jump_max": sol.jump_residual(1000, 1)}
    out["control_feasibility"] = control_feasibility(sol, problem, int(ev.get("grid", 200)), t)
    if problem.exact is not None:
        ea, er = l2_errors(sol.u, problem, int(ev.get("M_T", 256 * 256)), int(ev.get("seed", 0)), t)
        out["u_error"] = {"abs": ea, "rel": er}
        ref = None
        if problem.name == "1":
            ref = REFERENCE_ERRORS_EX1["alg1" if cfg.algorithm == "alg1" else ("option1" if cfg.option == "I" else "option2")]
        elif problem.name == "3":
            ref = EXAMPLE3_ERRORS
        if ref is not None:
            out["u_error"]["reference"] = {"abs": ref[0], "rel": ref[1]}
    return out


# ---------------------------------------------------------------------------
# commands


def _echo_config(cfg: RunConfig, run: Path):
    doc = copy.deepcopy(cfg.raw)
    (run / "config.yaml").write_text(yaml.safe_dump(doc, sort_keys=False))


def cmd_pretrain_aux(cfg: RunConfig, out: str | None = None) -> int:
    if cfg.pretrain is None:
        raise ConfigError("config has no 'pretrain' section")
    problem = build_example(cfg.problem)
    dest = Path(out or cfg.aux_dir or Path(cfg.output) / "aux")
    dest.mkdir(parents=True, exist_ok=True)
    aux, reps = pretrain_aux(problem, cfg.pretrain)
    for name in ("g", "h", "phi"):
        getattr(aux, name).save(dest / f"{name}.json", {"problem": problem.name, "seed": cfg.pretrain.seed})
    rep = verify_aux(aux, problem.geometry, 10000, cfg.pretrain.seed + 99)
    doc = {"verification": rep.as_dict(),
           "training": {k: {"final_loss": r.final_loss, "iterations": r.iterations, "status": r.status,
                            "wall_time": r.wall_time} for k, r in reps.items()}}
    write_json(doc, dest / "aux_report.json")
    print(json.dumps(doc["verification"]["checks"]))
    return EXIT_OK if rep.passed else EXIT_AUX_VERIFY


def cmd_train(cfg: RunConfig) -> int:
    problem = build_example(cfg.problem)
    run = Path(cfg.output)
    (run / "checkpoints").mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, run)
    samples = samples_for(cfg, problem)

    def ckpt(it, plist, loss):
        if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            for name, p in zip(("y", "p"), plist):
                dc.save_params(p, run / "checkpoints" / f"{name}_{it + 1:06d}.json", {"iteration": it + 1})

    if cfg.algorithm == "alg1":
        res = run_algorithm1(problem, cfg.network, cfg.weights, samples, cfg.adam, ckpt)
    else:
        aux = aux_for(cfg, problem)
        res = run_algorithm2(problem, aux, cfg.network, cfg.weights, samples, cfg.adam, cfg.lbfgs, ckpt)
    rep = res.report
    py, pp = rep.params
    meta = {"problem": problem.name, "algorithm": cfg.algorithm, "option": cfg.option}
    dc.save_params(py, run / "y.json", meta)
    dc.save_params(pp, run / "p.json", meta)
    write_term_csv(rep.history, run / "loss.csv")
    report = {"problem": problem.describe(), "training": rep.summary()}
    if rep.ok:
        report["evaluation"] = evaluation_report(cfg, problem, res.fields)
    write_json(report, run / "report.json")
    msg = {"final_loss": rep.final_loss, "status": rep.status}
    if "evaluation" in report and "u_error" in report["evaluation"]:
        msg["u_error"] = report["evaluation"]["u_error"]
    print(json.dumps(msg, default=float))
    return EXIT_OK if rep.ok else EXIT_DIVERGED


def cmd_evaluate(run_dir: str, grid_sizes=None, grid: int | None = None) -> int:
    cfg, problem, sol = load_run(run_dir)
    run = Path(run_dir)
    ev = cfg.evaluation
    N = int(grid or ev.get("grid", 200))
    sizes = list(grid_sizes if grid_sizes is not None else ev.get("grid_sizes", [16, 32, 64, 128, 256]))
    t = eval_time(cfg, problem)
    ex = problem.exact
    fields = {"y": sol.y, "p": sol.p}
    exact = {} if ex is None else {"y": ex.y_value, "p": ex.p_value}
    if problem.variant != "interface_control":
        fields["u"] = sol.u
        if ex is not None:
            exact["u"] = ex.u
    summary: dict = {"N": N, "t": t, "grids": {}}
    for name, fn in fields.items():
        tab = grid_eval(fn, problem.geometry, N, exact.get(name), t)
        tab.to_csv(run / f"grid_{name}.csv")
        if tab.exact is not None:
            summary["grids"][name] = {"rms_error": tab.rms_error(), "l2_error": tab.l2_error(),
                                      "max_error": float(np.max(tab.abs_error))}
    if problem.variant == "interface_control":
        xg, _ = sample_interface(problem.geometry, 4 * N, 0)
        one = np.ones(xg.shape[0], int)
        u = sol.u(xg, one)
        rows = ["x1,x2,value" + (",exact,abs_error" if ex is not None else "")]
        ue = ex.u(xg, one) if ex is not None else None
        for i in range(xg.shape[0]):
            r = f"{xg[i, 0]!r},{xg[i, 1]!r},{u[i]!r}"
            if ue is not None:
                r += f",{ue[i]!r},{abs(u[i] - ue[i])!r}"
            rows.append(r)
        (run / "interface_u.csv").write_text("\n".join(rows) + "\n")
    summary.update(evaluation_report(cfg, problem, sol))
    if ex is not None and sizes:
        ex_t = exact if t is None else {k: (lambda f: lambda x, s: f(x, s, np.full(len(x), t)))(f)
                                        for k, f in exact.items()}
        fl_t = fields if t is None else {k: (lambda f: lambda x, s: f(x, s, np.full(len(x), t)))(f)
                                         for k, f in fields.items()}
        table = multires_table(fl_t, problem.geometry, ex_t, sizes)
        if problem.name == "1b":
            refs = {"u": REFERENCE_MULTIRES_U, "y": REFERENCE_MULTIRES_Y, "p": REFERENCE_MULTIRES_P}
            for row in table:
                for k, ref in refs.items():
                    if row["N"] in ref and k in row:
                        row[f"{k}_reference_ifem"], row[f"{k}_reference_alg2"], row[f"{k}_reference_alg1"] = \
                            ref[row["N"]]
        summary["multires"] = table
        keys = list(table[0].keys())
        lines = [",".join(keys)] + [",".join(repr(float(r[k])) if k != "N" else str(r[k]) for k in keys)
                                    for r in table]
        (run / "multires.csv").write_text("\n".join(lines) + "\n")
        print(format_multires(table))
    write_json(summary, run / "evaluation.json")
    return EXIT_OK


def format_multires(table: list[dict]) -> str:
    names = [k for k in ("u", "y", "p") if k in table[0]]
    head = f"{'N':>5} " + " ".join(f"{'err(' + n + ')':>12}" for n in names)
    lines = [head]
    for r in table:
        lines.append(f"{r['N']:>5} " + " ".join(f"{r[n]:12.4e}" for n in names))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# invariant suites


def hard_constraint_residuals(problem: ProblemSpec, core_y: dc.MlpParams, core_p: dc.MlpParams,
                              n: int, seed) -> dict:
    """Max residuals of the exactly imposed conditions for one pair of cores."""
    aux = problem.option1_aux()
    geom = problem.geometry
    rng = np.random.default_rng(seed)
    kinds = ("state_parabolic", "adjoint_parabolic") if problem.parabolic else ("state", "adjoint")
    y = HardConstraintField(aux, NetCore(core_y), kinds[0], problem.T, geom)
    p = HardConstraintField(aux, NetCore(core_p), kinds[1], problem.T, geom)
    xb = sample_boundary(geom, n, rng)
    xg, _ = sample_interface(geom, n, rng)
    one = np.ones(n, int)
    tb = tg = None
    if problem.parabolic:
        tb, tg = rng.uniform(0, problem.T, n), rng.uniform(0, problem.T, n)
    out = {
        "y_boundary": float(np.max(np.abs(y.value(xb, one, tb) - problem.h0(xb, one, tb)))),
        "y_jump": float(np.max(np.abs(y.value(xg, one, tg) - y.value(xg, -one, tg) - problem.g0(xg, None, tg)))),
        "p_boundary": float(np.max(np.abs(p.value(xb, one, tb)))),
        "p_jump": float(np.max(np.abs(p.value(xg, one, tg) - p.value(xg, -one, tg)))),
    }
    if problem.parabolic:
        xi, lab = sample_interior(geom, n, rng)
        out["y_initial"] = float(np.max(np.abs(y.value(xi, lab, np.zeros(n)) - problem.y0(xi, lab))))
        out["p_terminal"] = float(np.max(np.abs(p.value(xi, lab, np.full(n, problem.T)))))
    return out


def loss_at_exact(problem: ProblemSpec, seed=0) -> dict:
    """Per-term values of each applicable loss with the exact solution substituted."""
    g = problem.geometry
    times = None
    M, MB, MG = (256, 64, 64) if problem.parabolic else (1024, 256, 256)
    s = default_samples(problem, M, MB, MG, seed)
    out = {}
    aux = problem.option1_aux()
    kinds = ("state_parabolic", "adjoint_parabolic") if problem.parabolic else ("state", "adjoint")
    y = HardConstraintField(aux, problem.exact_cores["y"], kinds[0], problem.T, g)
    p = HardConstraintField(aux, problem.exact_cores["p"], kinds[1], problem.T, g)
    total, terms = hard_loss_for(problem)(y, p, s, problem, LossWeights()).evaluate()
    out["hard"] = {"total": float(total.data), **terms}
    if problem.soft_extensions and problem.variant == "distributed_elliptic":
        ys = DcsnnField(problem.soft_extensions["y"], g)
        ps = DcsnnField(problem.soft_extensions["p"], g)
        total, terms = SoftEllipticLoss(ys, ps, s, problem, LossWeights()).evaluate()
        out["soft"] = {"total": float(total.data), **terms}
    return out


def cmd_verify(examples=None, n_nets: int = 10, n_samples: int = 10000, seed: int = 0) -> int:
    examples = list(examples or ["1", "1b", "3", "4"])
    result: dict = {}
    ok = True
    for ex in examples:
        problem = build_example(ex)
        r: dict = {}
        if problem.exact is not None:
            opt = verify_optimality_system(problem, 1000, seed)
            r["optimality_max"] = max(opt.values())
            ok &= r["optimality_max"] <= 1e-10
            lo = loss_at_exact(problem, seed)
            r["loss_at_exact_max"] = max(v["total"] for v in lo.values())
            ok &= r["loss_at_exact_max"] <= 1e-18
        n_in = problem.geometry.dim + 1 + (1 if problem.parabolic else 0)
        worst = 0.0
        for k in range(n_nets):
            res = hard_constraint_residuals(problem, init_core(n_in, [20, 20], seed + 2 * k),
                                            init_core(n_in, [20, 20], seed + 2 * k + 1), n_samples, seed + k)
            worst = max(worst, max(res.values()))
        r["hard_constraint_max"] = worst
        ok &= worst <= 1e-12
        result[ex] = r
        print(f"example {ex}: " + ", ".join(f"{k}={v:.3e}" for k, v in r.items()))
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_VERIFY


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hcpinn", description="Hard- and soft-constraint PINN solvers for "
                                 "interface optimal control problems.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="YAML file or bundled config name")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--iterations", type=int, help="override the ADAM iteration count")

    common(sub.add_parser("pretrain-aux", help="fit the auxiliary networks g, h, phi"))
    common(sub.add_parser("train", help="train the state/adjoint networks"))
    pe = sub.add_parser("evaluate", help="grid tables and error reports of a run directory")
    pe.add_argument("run_dir")
    pe.add_argument("--grid", type=int)
    pe.add_argument("--grid-sizes", type=int, nargs="*")
    pv = sub.add_parser("verify", help="run the invariant suites")
    pv.add_argument("--examples", nargs="*")
    pv.add_argument("--nets", type=int, default=10)
    pv.add_argument("--samples", type=int, default=10000)
    pv.add_argument("--seed", type=int, default=0)
    sub.add_parser("list-configs", help="names of the bundled configs")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "list-configs":
            print("\n".join(bundled_configs()))
            return EXIT_OK
        if args.command == "evaluate":
            return cmd_evaluate(args.run_dir, args.grid_sizes, args.grid)
        if args.command == "verify":
            return cmd_verify(args.examples, args.nets, args.samples, args.seed)
        cfg = parse_config(read_config(args.config), args.seed, args.out, args.iterations)
        if args.command == "pretrain-aux":
            return cmd_pretrain_aux(cfg, args.out)
        return cmd_train(cfg)
    except (ConfigError, UnknownExampleError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingCheckpointError as e:
        print(f"missing checkpoint: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (dc.NonFiniteLossError, HardConstraintError) as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
