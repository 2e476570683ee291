"""Command-line experiment runner.

Exit codes: 0 success, 2 invalid input, 3 solver did not converge, 4 numeric
failure. Every CSV carries a header row and a trailing provenance comment.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, _parallel
from .assumptions import run_all
from .continuation import probe_delta, solve_continuation
from .decoupling import build_u_table, cloud, decoupling_function, verify_decoupling, verify_semigroup
from .errors import NumericError, ValidationError
from .mfg import SolverConfig, solve_individual, solve_mfg
from .model import (_COEF_NAMES, Coefficient, LinearStateSpec, ModelSpec, expression_costs, gradient_check,
                    lq_costs, validate_lq)
from .oracle import LQSpec, solve_riccati
from .simulate import InitialLaw, TimeGrid, initial_states

SEED_ENV = "MFGCN_SEED"
DEFAULT_SEED = 42
FD_TOL = 1e-6
EXIT_OK, EXIT_INVALID, EXIT_NOT_CONVERGED, EXIT_NUMERIC = 0, 2, 3, 4

_LQ_KEYS = ("q", "qbar", "s", "qT", "qbarT", "sT")
_LQ_DEFAULTS = dict(q=1.0, qbar=0.5, s=0.8, qT=1.0, qbarT=0.5, sT=0.8)
_TOP_KEYS = {"dynamics", "costs", "horizon", "lipschitz", "xi", *_LQ_KEYS}


class NotConverged(RuntimeError):
    pass


# --- model files ----------------------------------------------------------------

def _initial_law(obj) -> InitialLaw:
    if obj is None:
        return InitialLaw.gaussian(1.0, 0.25)
    if isinstance(obj, (int, float)):
        return InitialLaw.constant(obj)
    kind = obj.get("kind", "gaussian")
    if kind == "gaussian":
        return InitialLaw.gaussian(obj.get("mean", 0.0), obj.get("var", 0.0))
    if kind == "constant":
        return InitialLaw.constant(obj.get("value", obj.get("mean", 0.0)))
    if kind == "samples":
        return InitialLaw.from_samples(obj.get("samples", []))
    raise ValidationError(f"unknown initial law {kind!r}", ["xi.kind"])


def model_from_dict(d: dict) -> ModelSpec:
    """Validated model from the JSON schema; the initial law rides in ``meta['xi']``."""
    if not isinstance(d, dict):
        raise ValidationError("model file must hold a JSON object", ["<root>"])
    bad = sorted(k for k in d if k not in _TOP_KEYS)
    dyn = d.get("dynamics", {})
    bad += [f"dynamics.{k}" for k in dyn if k not in _COEF_NAMES]
    costs = d.get("costs", {"kind": "lq"})
    kind = costs.get("kind")
    if kind not in ("lq", "custom"):
        bad.append("costs.kind")
    if bad:
        raise ValidationError("unknown or invalid keys: " + ", ".join(bad), bad)
    T = float(d.get("horizon", {}).get("T", 1.0))
    coefs = {}
    for name in _COEF_NAMES:
        if name in dyn:
            coefs[name] = Coefficient.from_json(dyn[name])
    dynamics = LinearStateSpec(**coefs)
    meta = {"kind": kind}
    if kind == "lq":
        p = dict(_LQ_DEFAULTS)
        for k in _LQ_KEYS:
            if k in costs:
                p[k] = float(costs[k])
            elif k in d:
                p[k] = float(d[k])
        validate_lq(*(p[k] for k in _LQ_KEYS))
        cs = lq_costs(*(p[k] for k in _LQ_KEYS))
        meta.update(p)
    else:
        missing = [f"costs.{k}" for k in ("f0",) if k not in costs]
        if missing:
            raise ValidationError("custom costs need expressions: " + ", ".join(missing), missing)
        cs = expression_costs(costs["f0"], costs.get("f1", "0"), costs.get("g", "0"), costs.get("c_f"))
    K = d.get("lipschitz", {}).get("K")
    if K is None and kind == "lq":
        K = max(1.0, dynamics.bound(T), p["q"] + p["qbar"] * (1 + abs(p["s"])),
                p["qT"] + p["qbarT"] * (1 + abs(p["sT"])), 1.0 / cs.c_f)
    elif K is None:
        K = max(10.0, dynamics.bound(T), 1.0 / cs.c_f)
    meta["xi"] = _initial_law(d.get("xi"))
    model = ModelSpec(dynamics, cs, T=T, K=float(K), meta=meta)
    if kind == "custom":
        worst = gradient_check(model)
        off = [f"costs.{k}" for k, v in worst.items() if not v <= FD_TOL]
        if off:
            raise ValidationError("declared gradients fail the finite-difference check: " + ", ".join(off), off)
    return model


def load_model(path) -> ModelSpec:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"model file not found: {p}", ["--model"])
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{p} is not valid JSON: {exc}", ["--model"]) from exc
    return model_from_dict(d)


# --- output ---------------------------------------------------------------------

def _num(v) -> str:
    return repr(float(v))


def config_hash(args: argparse.Namespace) -> str:
    keep = {k: v for k, v in sorted(vars(args).items()) if k not in ("out", "func", "threads")}
    blob = json.dumps(keep, sort_keys=True, default=str)
    if getattr(args, "model", None) and Path(args.model).is_file():
        blob += Path(args.model).read_text()
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def write_csv(path, header, rows, args) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([x if isinstance(x, (int, np.integer, str)) else _num(x) for x in r])
    buf.write(f"# seed={args.seed} version={__version__} config_hash={config_hash(args)}\n")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(buf.getvalue())


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not serialisable: {type(o).__name__}")


# --- argument helpers -----------------------------------------------------------

def _pair(text: str, kind=float, n=2):
    try:
        parts = [kind(v) for v in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"cannot parse {text!r}") from exc
    if len(parts) != n:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated values, got {text!r}")
    return tuple(parts)


def _grid_arg(text: str):
    parts = text.split(",")
    if len(parts) not in (2, 3):
        raise argparse.ArgumentTypeError("grid is T,N or s,T,N")
    try:
        if len(parts) == 2:
            return 0.0, float(parts[0]), int(parts[1])
        return float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"cannot parse grid {text!r}") from exc


def _grid(args, model: ModelSpec) -> TimeGrid:
    s, T, N = args.grid if args.grid else (0.0, model.T, 50)
    if getattr(args, "s", None) is not None:
        s = args.s
    return TimeGrid(s, T, N)


def _config(args) -> SolverConfig:
    K, M = args.particles
    return SolverConfig(K=K, M=M, seed=args.seed, common_seed=args.common_seed, max_outer=args.max_outer,
                        degree=args.degree)


def _xi(model: ModelSpec):
    return model.meta.get("xi", InitialLaw.gaussian(1.0, 0.25))


def _summary(text: str) -> None:
    print(text)


# --- subcommands -----------------------------------------------------------------

def cmd_solve_mfg(args) -> int:
    model = load_model(args.model)
    grid, cfg = _grid(args, model), _config(args)
    res = solve_mfg(model, grid, _xi(model), cfg)
    out = Path(args.out)
    _write_policy(out / "policy.csv", res.policy, grid, args)
    flow = res.flow.sorted_values()  # (N + 1, K, M)
    rows = []
    for k in range(cfg.K):
        for j in range(grid.N + 1):
            v = flow[j, k]
            d = v - flow[0, k]
            rows.append((k, j, grid.t(j), v.mean(), np.mean(v * v), np.sqrt(np.mean(d * d))))
    write_csv(out / "flow.csv", ["kappa", "step", "t", "mean", "second_moment", "w2_to_initial"], rows, args)
    write_json(out / "report.json", res.report.to_dict())
    if args.dump:
        _dump(out / "trajectories.csv", res.states, grid, args)
    _summary(f"solve-mfg: {res.report.outer_iters} iterations, converged={res.report.converged}, "
             f"Y0 mean={res.report.y0_mean:.6g}")
    if not res.report.converged:
        raise NotConverged("Picard iteration did not converge")
    return EXIT_OK


def _write_policy(path, policy, grid, args) -> None:
    p = policy.degree + 1
    header = ["kappa", "step", "t", "center", "scale"]
    for name in ("y", "z", "zt"):
        header += [f"beta_{name}_{i}" for i in range(p)]
    rows = []
    for k in range(policy.center.shape[1]):
        for j in range(grid.N + 1):
            rows.append((k, j, grid.t(j), policy.center[j, k], policy.scale[j, k],
                         *policy.beta_y[j, k], *policy.beta_z[j, k], *policy.beta_zt[j, k]))
    write_csv(path, header, rows, args)


def _dump(path, states, grid, args) -> None:
    b = states.buffers
    rows = []
    for k in range(states.K):
        for i in range(states.M):
            for j in range(grid.N + 1):
                rows.append((k, i, j, grid.t(j), b["X"][j, k, i], b["Y"][j, k, i], b["Z"][j, k, i],
                             b["Zt"][j, k, i], b["alpha"][j, k, i]))
    write_csv(path, ["kappa", "particle", "step", "t", "X", "Y", "Z", "Zt", "alpha"], rows, args)


def cmd_solve_individual(args) -> int:
    model = load_model(args.model)
    grid, cfg = _grid(args, model), _config(args)
    eq = solve_mfg(model, grid, _xi(model), cfg)
    xi = _xi(model) if args.x0 is None else args.x0
    ind = solve_individual(model, eq.flow, grid, xi, cfg, eq.noise, eq.policy)
    out = Path(args.out)
    _write_policy(out / "policy.csv", ind.policy, grid, args)
    write_json(out / "report.json", {"equilibrium": eq.report.to_dict(), "individual": ind.report.to_dict()})
    _summary(f"solve-individual: Y0 mean={ind.report.y0_mean:.6g}, converged={ind.report.converged}")
    if not (eq.report.converged and ind.report.converged):
        raise NotConverged("individual problem did not converge")
    return EXIT_OK


def cmd_check_assumptions(args) -> int:
    model = load_model(args.model)
    reports = run_all(model, args.trials, args.seed, args.cloud_size)
    write_json(args.out, [r.to_dict() for r in reports])
    _summary("check-assumptions: " + " ".join(f"{r.condition_id}={'pass' if r.passed else 'fail'}"
                                                for r in reports))
    return EXIT_OK


def cmd_decoupling(args) -> int:
    model = load_model(args.model)
    grid, cfg = _grid(args, model), _config(args)
    m = initial_states(_xi(model), 1, cfg.M, cfg.seed)[0]
    ug = decoupling_function(model, grid, m, cfg)
    write_csv(args.out, ["s", "x", "U", "kappa_spread"], list(ug.rows()), args)
    _summary(f"decoupling: {ug.x.size} grid points at s={ug.s:g}, flagged={ug.flagged}")
    if not ug.converged:
        raise NotConverged("decoupling solve did not converge")
    return EXIT_OK


def cmd_verify(args) -> int:
    model = load_model(args.model)
    grid, cfg = _grid(args, model), _config(args)
    xi = cloud(initial_states(_xi(model), 1, cfg.M, cfg.seed)[0], cfg.M)
    if args.which == "semigroup":
        rep = verify_semigroup(model, grid, args.t, args.u, xi, cfg)
        verdict = rep.to_dict()
        ok = rep.passed
    else:
        eq = solve_mfg(model, grid, xi, cfg)
        rep = verify_decoupling(eq.policy, eq.states, eq.flow, build_u_table(model, eq, cfg))
        verdict = rep.to_dict()
        ok = rep.max_error <= args.tolerance
        verdict["tolerance"] = args.tolerance
        verdict["pass"] = ok
    write_json(args.out, verdict)
    _summary(f"verify {args.which}: pass={ok}")
    return EXIT_OK


def cmd_continuation(args) -> int:
    model = load_model(args.model)
    grid, cfg = _grid(args, model), _config(args)
    noise = cfg.noise(grid)
    res = solve_continuation(model, grid, noise, _xi(model), args.schedule, cfg)
    log = res.to_dict()
    if args.probe:
        log["probe"] = probe_delta(model, grid, noise, _xi(model), config=cfg).to_dict()
    write_json(args.out, log)
    _summary(f"continuation: {len(res.log)} levels, converged={res.converged}")
    if not res.converged:
        raise NotConverged("continuation stalled at the smallest step")
    return EXIT_OK


def cmd_riccati(args) -> int:
    model = load_model(args.model)
    lq = LQSpec.from_model(model)
    grid = _grid(args, model)
    sol = solve_riccati(lq, grid)
    write_csv(args.out, ["t", "P", "R"], zip(sol.t, sol.P, sol.R), args)
    _summary(f"riccati: P(0)={sol.P[0]:.6g}, R(0)={sol.R[0]:.6g}")
    return EXIT_OK


def _y0(kind, model, grid, cfg, noise, xi, args):
    if kind == "picard":
        r = solve_mfg(model, grid, xi, cfg, noise)
        return r.states.buffers["Y"][0], r.report.converged
    if kind == "continuation":
        r = solve_continuation(model, grid, noise, xi, args.schedule, cfg)
        return r.states.buffers["Y"][0], r.converged
    lq = LQSpec.from_model(model)
    sol = solve_riccati(lq, grid)
    x0 = initial_states(xi, noise.K, noise.M, noise.seed)
    return sol.P[0] * x0 + sol.R[0] * x0.mean(axis=1, keepdims=True), True


def cmd_compare(args) -> int:
    model = load_model(args.model)
    grid, cfg = _grid(args, model), _config(args)
    noise = cfg.noise(grid)
    xi = _xi(model)
    ya, ca = _y0(args.a, model, grid, cfg, noise, xi, args)
    yb, cb = _y0(args.b, model, grid, cfg, noise, xi, args)
    scale = float(np.sqrt(np.mean(ya * ya)))
    sup = float(np.max(np.abs(ya - yb)))
    out = {"a": args.a, "b": args.b, "sup_abs_dY0": sup, "rms_dY0": float(np.sqrt(np.mean((ya - yb) ** 2))),
           "scale": scale, "relative_sup": sup / scale if scale else sup, "converged": {"a": ca, "b": cb}}
    write_json(args.out, out)
    _summary(f"compare {args.a} vs {args.b}: sup|dY0|={sup:.3g} (scale {scale:.3g})")
    if not (ca and cb):
        raise NotConverged("a solver did not converge")
    return EXIT_OK


# --- parser -----------------------------------------------------------------------

def _default_seed() -> int:
    v = os.environ.get(SEED_ENV)
    if v is None:
        return DEFAULT_SEED
    try:
        return int(v)
    except ValueError:
        return DEFAULT_SEED


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfgcn", description="Mean-field games with common noise: solvers and checks.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, particles="64,512", out=None):
        sp.add_argument("--model", required=True, help="model JSON file")
        sp.add_argument("--grid", type=_grid_arg, help="T,N or s,T,N (default: model horizon, 50 steps)")
        sp.add_argument("--particles", type=lambda t: _pair(t, int), default=_pair(particles, int),
                        help="common paths and particles per path, K,M")
        sp.add_argument("--seed", type=int, default=_default_seed())
        sp.add_argument("--common-seed", type=int, default=None)
        sp.add_argument("--max-outer", type=int, default=50)
        sp.add_argument("--degree", type=int, default=2)
        sp.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
        sp.add_argument("--out", required=True, default=out)

    sp = sub.add_parser("solve-mfg", help="equilibrium by damped Picard iteration")
    common(sp)
    sp.add_argument("--dump", action="store_true", help="also write every particle trajectory")
    sp.set_defaults(func=cmd_solve_mfg)

    sp = sub.add_parser("solve-individual", help="best response to the equilibrium flow")
    common(sp)
    sp.add_argument("--x0", type=float, default=None, help="start every player at this state")
    sp.set_defaults(func=cmd_solve_individual)

    sp = sub.add_parser("check-assumptions", help="Monte Carlo audit of the model conditions")
    sp.add_argument("--model", required=True)
    sp.add_argument("--trials", type=int, default=200)
    sp.add_argument("--cloud-size", type=int, default=64)
    sp.add_argument("--seed", type=int, default=_default_seed())
    sp.add_argument("--threads", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_check_assumptions)

    sp = sub.add_parser("decoupling", help="U(s, x, m) on an x-grid")
    common(sp)
    sp.add_argument("--s", type=float, default=None, help="start time (overrides the grid start)")
    sp.set_defaults(func=cmd_decoupling)

    sp = sub.add_parser("verify", help="semigroup or decoupling verdicts")
    common(sp)
    sp.add_argument("--which", choices=("semigroup", "decoupling"), required=True)
    sp.add_argument("--t", type=float, default=0.5)
    sp.add_argument("--u", type=float, default=1.0)
    sp.add_argument("--tolerance", type=float, default=0.1, help="decoupling: allowed relative L2 error")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("continuation", help="homotopy solver")
    common(sp, particles="8,128")
    sp.add_argument("--schedule", type=int, default=8, help="initial number of homotopy levels")
    sp.add_argument("--probe", action="store_true", help="add the step-size contraction table")
    sp.set_defaults(func=cmd_continuation)

    sp = sub.add_parser("riccati", help="analytic LQ benchmark")
    sp.add_argument("--model", required=True)
    sp.add_argument("--grid", type=_grid_arg)
    sp.add_argument("--seed", type=int, default=_default_seed())
    sp.add_argument("--threads", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_riccati)

    sp = sub.add_parser("compare", help="Y0 of two solvers on identical noise")
    common(sp, particles="8,128")
    sp.add_argument("--a", choices=("picard", "continuation", "oracle"), default="picard")
    sp.add_argument("--b", choices=("picard", "continuation", "oracle"), default="continuation")
    sp.add_argument("--schedule", type=int, default=8)
    sp.set_defaults(func=cmd_compare)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code or 0)
    try:
        _parallel.set_threads(args.threads)
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NotConverged as exc:
        print(f"not converged: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except (NumericError, FloatingPointError, MemoryError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        _parallel.set_threads(None)


def main() -> None:
    sys.exit(run())
