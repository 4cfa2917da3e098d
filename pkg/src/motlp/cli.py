"""Command line front end.

    motlp wasserstein A.json B.json
    motlp discretize (--measure F | --density TAG) --n N --scheme S --out DIR
    motlp solve MU.json NU.json [...] --cost TAG --eps E --out DIR
    motlp export-lp MU.json NU.json [...] --cost TAG --eps E --out FILE
    motlp example --id K --n N --out DIR
    motlp sweep --id K --n 10 20 40 --out DIR

Exit status: 0 on success (an infeasible program is a result, not a failure),
1 on domain errors, 2 on usage errors.  Report JSON is deterministic for a
fixed command line; wall-clock data goes to a separate timing.json.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .errors import IOFailure, MotlpError

log = logging.getLogger("motlp")

SCHEMES = ("grid", "ds", "point", "exact", "cellmin", "empirical")


# ---------------------------------------------------------------- argument types


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _nonneg_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if not (v >= 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"expected a finite nonnegative number, got {text!r}")
    return v


def _seed(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer seed, got {text!r}")
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


def _keyval(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    try:
        v = json.loads(v)
    except json.JSONDecodeError:
        pass
    return k, v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="motlp", description="Relaxed martingale optimal transport by linear programming.")
    p.add_argument("--version", action="version", version=f"motlp {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON file whose keys give defaults for the flags")
        sp.add_argument("--out", required=out_required, help="output directory (a file for export-lp)")
        sp.add_argument("--seed", type=_seed, default=0)
        sp.add_argument("--cap-vars", type=_positive_int, default=None, dest="cap_vars")
        sp.add_argument("--tol-feas", type=_nonneg_float, default=None, dest="tol_feas")
        sp.add_argument("--tol-gap", type=_nonneg_float, default=None, dest="tol_gap")
        sp.add_argument("--jobs", type=_positive_int, default=os.cpu_count() or 1)

    w = sub.add_parser("wasserstein", help="exact W1 between two measure files")
    w.add_argument("a")
    w.add_argument("b")
    common(w, out_required=False)

    d = sub.add_parser("discretize", help="discretize a measure file or a built-in density")
    src = d.add_mutually_exclusive_group(required=True)
    src.add_argument("--measure", help="measure JSON file")
    src.add_argument("--density", help="built-in density tag")
    d.add_argument("--param", type=_keyval, action="append", default=[], help="density parameter key=value")
    d.add_argument("--n", type=_positive_int, required=True)
    d.add_argument("--m", type=_positive_int, default=2, help="truncation box for density schemes")
    d.add_argument("--scheme", choices=SCHEMES, default="grid")
    common(d)

    for name, helptext in (("solve", "solve the relaxed program"), ("export-lp", "write the program in LP format")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("marginals", nargs="+", help="measure JSON files, in time order")
        s.add_argument("--cost", required=True, help="built-in cost tag")
        s.add_argument("--cost-param", type=_keyval, action="append", default=[], dest="cost_param")
        s.add_argument("--eps", type=_nonneg_float, required=True)
        common(s)

    e = sub.add_parser("example", help="build, solve and report a built-in example")
    e.add_argument("--id", type=int, required=True, choices=(1, 2, 3, 4))
    e.add_argument("--n", type=_positive_int, required=True)
    e.add_argument("--eps", type=_nonneg_float, default=None, help="override the scheduled eps")
    e.add_argument("--scheme", choices=("grid", "empirical"), default=None)
    e.add_argument("--param", type=_keyval, action="append", default=[])
    common(e)

    sw = sub.add_parser("sweep", help="convergence sweep of a built-in example")
    sw.add_argument("--id", type=int, required=True, choices=(1, 2, 3, 4))
    sw.add_argument("--n", type=_positive_int, nargs="+", required=True)
    sw.add_argument("--scheme", choices=("grid", "empirical"), default=None)
    sw.add_argument("--param", type=_keyval, action="append", default=[])
    common(sw)
    return p


# ---------------------------------------------------------------- helpers


def _options(args):
    from .lp.solve import SolverOptions

    kw = {}
    if args.cap_vars is not None:
        kw["cap_vars"] = args.cap_vars
    if args.tol_feas is not None:
        kw["feas_tol"] = args.tol_feas
    if args.tol_gap is not None:
        kw["gap_tol"] = args.tol_gap
    return SolverOptions(**kw)


def _params(args) -> dict:
    out = {}
    for k, v in vars(args).items():
        if k in ("config", "jobs"):
            continue
        if isinstance(v, list) and v and isinstance(v[0], tuple):
            v = dict(v)
        out[k] = v
    return out


def _provenance(args) -> dict:
    from .discretization import RNG_ALGORITHM

    return {
        "package": "motlp",
        "version": __version__,
        "command": args.command,
        "seed": args.seed,
        "rng": RNG_ALGORITHM,
        "parameters": _params(args),
    }


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isfinite(v):
            return v
        return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return obj


def _write(path, text: str):
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def _write_json(path, obj):
    _write(path, json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def _write_timing(out_dir, started: float, extra: Optional[dict] = None):
    rec = {"wall_ms": (time.perf_counter() - started) * 1e3, "finished_unix": time.time()}
    if extra:
        rec.update(extra)
    _write_json(os.path.join(out_dir, "timing.json"), rec)


def _read_measure(path):
    from .measures import measure_from_json

    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    try:
        return measure_from_json(text)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise IOFailure(f"{path} is not a measure file: {exc}") from exc


def _cost(args):
    from .experiments import COST_TAGS, BuiltinCost

    if args.cost not in COST_TAGS:
        raise _Usage(f"--cost must be one of {', '.join(COST_TAGS)}")
    return BuiltinCost(args.cost, dict(args.cost_param))


class _Usage(Exception):
    pass


def _plan_csv(plan, header: dict) -> str:
    lines = [f"# {k}: {json.dumps(_clean(v), sort_keys=True)}" for k, v in sorted(header.items())]
    d = plan.dim
    cols = [f"x{k + 1}" if d == 1 else f"x{k + 1}_{c + 1}" for k in range(plan.n_marginals) for c in range(d)]
    lines.append(",".join(cols + ["mass"]))
    pts = [plan.points(k) for k in range(plan.n_marginals)]
    for r in range(len(plan.mass)):
        vals = [repr(float(v)) for k in range(plan.n_marginals) for v in pts[k][r]]
        lines.append(",".join(vals + [repr(float(plan.mass[r]))]))
    return "\n".join(lines) + "\n"


def _result_dict(res) -> dict:
    return {
        "status": res.status,
        "value": res.value,
        "defect": res.defect,
        "defect_steps": res.defect_steps,
        "eps": float(res.eps),
        "lp_sizes": res.lp_sizes,
        "residuals": res.residuals,
        "backend": res.backend,
    }


# ---------------------------------------------------------------- commands


def cmd_wasserstein(args) -> int:
    from .wasserstein import w1

    a, b = _read_measure(args.a), _read_measure(args.b)
    v = w1(a, b)
    print(repr(v))
    if args.out:
        _write_json(os.path.join(args.out, "report.json"), {"provenance": _provenance(args), "w1": v})
    return 0


def cmd_discretize(args) -> int:
    from .discretization import density_grid_estimate, dolinsky_soner_1d, grid_discretize
    from .discretization import RateConstants, empirical_discretize
    from .experiments import BuiltinDensity
    from .measures import Sampler, measure_to_json

    started = time.perf_counter()
    if args.measure:
        mu = _read_measure(args.measure)
        if args.scheme == "grid":
            res = grid_discretize(mu, args.n)
        elif args.scheme == "ds":
            res = dolinsky_soner_1d(mu, args.n)
        else:
            raise _Usage(f"--scheme {args.scheme} needs --density")
    else:
        try:
            spec = BuiltinDensity(args.density, dict(args.param)).spec()
        except MotlpError as exc:
            raise _Usage(f"--density: {exc}")
        if args.scheme in ("point", "exact", "cellmin"):
            mode = {"point": "point_estimate", "exact": "exact_cells", "cellmin": "cell_min"}[args.scheme]
            res = density_grid_estimate(spec, args.n, args.m, mode)
        elif args.scheme == "ds":
            res = dolinsky_soner_1d(spec, args.n)
        elif args.scheme == "empirical":
            from .experiments import grid_max

            if spec.support_box is None or not np.all(np.isfinite(spec.support_box[0])):
                raise _Usage("--scheme empirical needs a density on a bounded box")
            lo, hi = spec.support_box
            bound = grid_max(spec, lo, hi, 1000 if spec.dim == 1 else 100)
            theta = spec.theta or 2.0
            r = float(np.max(np.abs(np.concatenate([lo, hi]))))
            m_theta = spec.m_theta or (spec.dim * r) ** theta
            sampler = Sampler(_BoxDraw(spec, lo, hi, bound * 1.01), spec.dim, theta, m_theta, spec.name)
            res = empirical_discretize(sampler, args.n, args.seed, RateConstants(theta, spec.dim, m_theta))
        else:
            raise _Usage("--scheme grid applies to --measure; use point, exact or cellmin for densities")
    prov = _provenance(args)
    prov.update({"w1_bound": res.w1_bound, "bound_kind": res.bound_kind, "scheme_provenance": res.provenance})
    _write(os.path.join(args.out, "measure.json"), measure_to_json(res.measure, _clean(prov)))
    _write_json(
        os.path.join(args.out, "report.json"),
        {"provenance": prov, "atoms": res.measure.size, "w1_bound": res.w1_bound, "stochastic": res.stochastic},
    )
    _write_timing(args.out, started)
    return 0


class _BoxDraw:
    def __init__(self, spec, lo, hi, bound):
        self.spec, self.lo, self.hi, self.bound = spec, lo, hi, bound

    def __call__(self, rng):
        from .discretization import accept_reject

        return accept_reject(rng, self.spec, self.lo, self.hi, self.bound)


def _load_marginals(args):
    return [_read_measure(p) for p in args.marginals]


def cmd_solve(args) -> int:
    from .mot import solve_relaxed

    started = time.perf_counter()
    ms = _load_marginals(args)
    cost = _cost(args)
    res = solve_relaxed(None, ms, args.eps, _options(args), cost=cost)
    report = {"provenance": _provenance(args), "result": _result_dict(res)}
    _write_json(os.path.join(args.out, "report.json"), report)
    if res.plan is not None:
        _write(os.path.join(args.out, "plan.csv"), _plan_csv(res.plan, _provenance(args)))
    _write_timing(args.out, started, {"solver_wall_ms": res.wall_ms})
    print(json.dumps(_clean({"status": res.status, "value": res.value, "defect": res.defect})))
    return 0


def cmd_export_lp(args) -> int:
    from .lp.lptext import export_lp_text
    from .lp.model import build_relaxed_mot_lp

    ms = _load_marginals(args)
    model = build_relaxed_mot_lp(ms, _cost(args), args.eps)
    comment = json.dumps(_clean(_provenance(args)), sort_keys=True)
    _write(args.out, export_lp_text(model, comment))
    return 0


def _example_params(args) -> dict:
    params = dict(args.param)
    if args.scheme:
        params["scheme"] = args.scheme
    params.setdefault("seed", args.seed)
    return params


def cmd_example(args) -> int:
    from .experiments import count_multi_point_fibers, heatmap_csv, solve_example
    from .measures import measure_to_json

    started = time.perf_counter()
    params = _example_params(args)
    inst, entry, res = solve_example(args.id, params, args.n, _options(args), eps=args.eps)
    prov = _provenance(args)
    out = args.out
    instance = {
        "provenance": prov,
        "name": inst.name,
        "cost": {"tag": inst.cost.tag, "params": inst.cost.params, "lipschitz": inst.lipschitz_c},
        "eps": entry.eps,
        "marginals": [
            {"w1_bound": r.w1_bound, "bound_kind": r.bound_kind, "provenance": r.provenance, "atoms": r.measure.size}
            for r in entry.results
        ],
    }
    _write_json(os.path.join(out, "instance.json"), instance)
    for k, r in enumerate(entry.results):
        _write(os.path.join(out, f"marginal{k + 1}.json"), measure_to_json(r.measure, _clean(r.provenance)))
    report = {"provenance": prov, "result": _result_dict(res)}
    if res.plan is not None:
        _write(os.path.join(out, "solution.csv"), _plan_csv(res.plan, prov))
        d, N = inst.dim, inst.n_marginals
        if N == 2 and d == 1:
            axes = [[(0, 0), (1, 0)]]
        elif N == 2:
            axes = [[(0, 0), (0, 1), (1, 0)]]
        else:
            axes = [[(0, 0), (1, 0)], [(1, 0), (2, 0)]]
        names = []
        for ax in axes:
            name = "heatmap_" + "_".join(f"S{k + 1}" + ("" if d == 1 else f"{c + 1}") for k, c in ax) + ".csv"
            _write(os.path.join(out, name), heatmap_csv(res.plan, ax, {"seed": args.seed, "example": args.id}))
            names.append(name)
        report["heatmaps"] = names
        if N == 2:
            fib = count_multi_point_fibers(res.plan)
            _write_json(os.path.join(out, "fibers.json"), {"provenance": prov, **fib.to_dict()})
            report["flagged_mass"] = fib.flagged_mass
    _write_json(os.path.join(out, "report.json"), report)
    _write_timing(out, started, {"solver_wall_ms": res.wall_ms})
    print(json.dumps(_clean({"status": res.status, "value": res.value, "defect": res.defect})))
    return 0


def cmd_sweep(args) -> int:
    from .experiments import build_example
    from .mot import RelaxationSchedule, sweep

    started = time.perf_counter()
    params = _example_params(args)
    inst, entries = None, []
    for n in sorted(set(args.n)):
        inst, e = build_example(args.id, params, n)
        entries.append(e)
    rep = sweep(inst, RelaxationSchedule(entries), _options(args), jobs=args.jobs)
    prov = _provenance(args)
    _write_json(os.path.join(args.out, "report.json"), {"provenance": prov, **rep.to_dict()})
    lines = [f"# {k}: {json.dumps(_clean(v), sort_keys=True)}" for k, v in sorted(prov.items())]
    lines += [",".join(map(str, row)) for row in rep.csv_rows()]
    _write(os.path.join(args.out, "sweep.csv"), "\n".join(lines) + "\n")
    _write_timing(args.out, started, {"entries_wall_ms": [e.wall_ms for e in rep.entries]})
    for e in rep.entries:
        print(f"n={e.n} eps={e.eps:.6g} value={e.value!r} status={e.status}")
    return 0


COMMANDS = {
    "wasserstein": cmd_wasserstein,
    "discretize": cmd_discretize,
    "solve": cmd_solve,
    "export-lp": cmd_export_lp,
    "example": cmd_example,
    "sweep": cmd_sweep,
}


def _apply_config(parser, argv):
    """Re-parse with defaults taken from --config, so explicit flags still win."""
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    try:
        with open(args.config, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"--config: cannot read {args.config}: {exc}")
    if not isinstance(cfg, dict):
        parser.error("--config must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    bad = sorted(set(k.replace("-", "_") for k in cfg) - known)
    if bad:
        parser.error(f"--config: unknown keys {', '.join(bad)}")
    sub.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    level = os.environ.get("MOTLP_LOG", "error").lower()
    logging.basicConfig(
        level={"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(level, logging.ERROR),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except _Usage as exc:
        print(f"motlp {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except MotlpError as exc:
        print(f"motlp {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"motlp {args.command}: invalid input: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
