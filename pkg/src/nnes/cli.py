"""Command-line batch runner.

Usage::

    python -m nnes <command> [--scenario PATH|default|minimal] [--out DIR] [--seed N]
                   [--observable SPEC ...] [--order N] [--epsilon EPS] [--horizon T]

Observable specs: ``site:<subsystem>:<site>:<X|Y|Z>``, ``current:<reservoir>``,
``coupling:<reservoir>`` or ``matrix:<path>`` (a ``.npy`` file or a JSON
matrix with ``[re, im]`` pairs).  Every command writes its payload files and
a ``manifest.json`` into ``--out``.  Invalid input exits with status 2 and an
error JSON on stdout.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import platform
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from .model import (ConfigError, Scenario, default_scenario, build_scenario, energy_current,
                    load_scenario, minimal_config, parse_matrix, reservoir_coupling, site_pauli)
from .opcore import LayoutError, Operator, op_norm

COMMANDS = ("simulate", "moller", "a5-scan", "kms-check", "strip-check", "response", "dyson", "oracle")
KMS_GRID = np.linspace(-5.0, 5.0, 64)


class UsageError(ValueError):
    pass


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


# inputs ------------------------------------------------------------------------

def resolve_scenario(spec: str) -> tuple[Scenario, dict]:
    if spec == "default":
        return default_scenario(), {"scenario": "builtin:default"}
    if spec == "minimal":
        return build_scenario(minimal_config()), {"scenario": "builtin:minimal"}
    path = Path(spec)
    if not path.is_file():
        raise ConfigError(f"scenario file {spec!r} not found")
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    return load_scenario(path), {"scenario": str(path), "sha256": digest}


def resolve_observable(scenario: Scenario, spec: str) -> Operator:
    """Turn an observable spec into an operator on the scenario layout."""
    kind, _, rest = spec.partition(":")
    parts = rest.split(":") if rest else []
    n_sub = len(scenario.layout.dims)
    try:
        if kind == "site" and len(parts) == 3:
            sub, site, which = int(parts[0]), int(parts[1]), parts[2].upper()
            if not 0 <= sub < n_sub or not 0 <= site < len(scenario.layout.site_map[sub]):
                raise UsageError(f"observable {spec!r}: no such site")
            if which not in ("X", "Y", "Z"):
                raise UsageError(f"observable {spec!r}: Pauli must be X, Y or Z")
            return site_pauli(scenario, sub, site, which).relabel(spec)
        if kind in ("current", "coupling") and len(parts) == 1:
            a = int(parts[0])
            if not 1 <= a < n_sub:
                raise UsageError(f"observable {spec!r}: no reservoir {a}")
            op = energy_current(scenario, a) if kind == "current" else reservoir_coupling(scenario, a)
            return op.relabel(spec)
        if kind == "matrix" and parts:
            path = Path(":".join(parts))
            if not path.is_file():
                raise UsageError(f"observable {spec!r}: file not found")
            m = np.load(path) if path.suffix == ".npy" else parse_matrix(json.loads(path.read_text()))
            m = np.asarray(m, dtype=complex)
            if m.shape != (scenario.layout.total_dim,) * 2:
                raise UsageError(f"observable {spec!r}: shape {m.shape} does not match the layout")
            return Operator(scenario.layout, m, spec)
    except ValueError as exc:
        if isinstance(exc, UsageError):
            raise
        raise UsageError(f"observable {spec!r}: {exc}") from None
    raise UsageError(f"cannot parse observable {spec!r}")


def default_observables(scenario: Scenario) -> list[str]:
    obs = ["site:0:0:Z"]
    if scenario.layout.sigma_dim == 2 and scenario.layout.n_reservoirs:
        obs.append("current:1")
    return obs


# output helpers ---------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return "nan" if math.isnan(x) else ("inf" if math.isinf(x) else f"{x:.12e}")
    return str(x)


def _write_csv(path: Path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue())


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (complex, np.complexfloating)):
        return {"re": _jsonable(float(x.real)), "im": _jsonable(float(x.imag))}
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _write_json(path: Path, obj):
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


# commands -----------------------------------------------------------------------------

def cmd_simulate(ctx):
    from .moller import nnes_expect, reference_state

    sc, rows = ctx.scenario, []
    sigma = reference_state(sc)
    for op in ctx.observables:
        for t in ctx.args.times:
            res = nnes_expect(sc, op, t, ctx.horizon, tail=ctx.args.tail)
            sv = sigma.expect(op)
            rows.append([op.label, t, res.value.real, res.value.imag, res.quad_error, res.tail_bound,
                         sv.real, sv.imag, ";".join(res.flags)])
            ctx.warn(res.flags, op.label)
    _write_csv(ctx.out / "nnes.csv", ["observable", "t", "nnes_re", "nnes_im", "quad_error",
                                      "tail_bound", "sigma_re", "sigma_im", "flags"], rows)
    return {"files": ["nnes.csv"]}


def cmd_moller(ctx):
    from .moller import moller_plus

    summary, files = [], []
    for i, op in enumerate(ctx.observables):
        res = moller_plus(ctx.scenario, op, 0.0, ctx.horizon)
        name = f"moller_{i}.csv"
        (ctx.out / name).write_text(res.report.to_csv())
        files.append(name)
        summary.append({"observable": op.label, "plateau": res.report.plateau_detected,
                        "plateau_s": res.report.plateau_s, "sigma_residual": res.sigma_residual,
                        "recurrence_onset": res.report.recurrence_onset,
                        "tolerance": res.report.tolerance})
        if res.flagged:
            ctx.warn(["no-plateau"], op.label)
    _write_json(ctx.out / "moller.json", summary)
    return {"files": files + ["moller.json"]}


def cmd_a5(ctx):
    from .moller import a5_diagnostic

    summary, files = [], []
    for i, op in enumerate(ctx.observables):
        rep = a5_diagnostic(ctx.scenario, op, ctx.args.picture, ctx.horizon)
        name = f"a5_{i}.csv"
        (ctx.out / name).write_text(rep.to_csv())
        files.append(name)
        summary.append({"observable": op.label, "exponent": rep.exponent, "plateau": rep.plateau_detected,
                        "recurrence_onset": rep.recurrence_onset, "tail_estimate": rep.tail_estimate})
    _write_json(ctx.out / "a5.json", summary)
    return {"files": files + ["a5.json"]}


def _random_matrix(rng, d):
    return rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))


def cmd_kms(ctx):
    from .kms import kms_residuals

    sc, rows, worst = ctx.scenario, [], 0.0
    for a, (spec, h) in enumerate(zip(sc.reservoirs, sc.reservoir_hamiltonians), start=1):
        d = h.shape[0]
        for trial in range(ctx.args.trials):
            A, B = _random_matrix(ctx.rng, d), _random_matrix(ctx.rng, d)
            A, B = A / op_norm(A), B / op_norm(B)
            r = kms_residuals(A, B, h, spec.beta, KMS_GRID)
            worst = max(worst, r["lower"], r["upper"])
            rows.append([a, spec.beta, trial, r["lower"], r["upper"], sc.numerics.tol_exact])
    _write_csv(ctx.out / "kms.csv", ["reservoir", "beta", "trial", "residual_real_axis",
                                     "residual_upper_edge", "tolerance"], rows)
    ctx.manifest["kms_max_residual"] = worst
    if worst >= sc.numerics.tol_exact:
        ctx.warn([f"KMS residual {worst:.3e} above {sc.numerics.tol_exact:g}"], "kms")
    return {"files": ["kms.csv"], "max_residual": worst}


def cmd_strip(ctx):
    from .kms import FactoredOperator, multi_strip_check

    sc = ctx.scenario
    if sc.layout.n_reservoirs < 2:
        raise UsageError("strip-check needs at least two reservoirs")
    hs = list(sc.reservoir_hamiltonians[:2])
    dims = [h.shape[0] for h in hs]

    def factored(n_terms):
        return FactoredOperator([[_random_matrix(ctx.rng, d) / (2 * math.sqrt(d)) for d in dims]
                                 for _ in range(n_terms)])

    A, B = factored(2), factored(2)
    rep = multi_strip_check(A, B, hs, list(sc.betas[:2]), swap_roles=ctx.args.swap_roles)
    (ctx.out / "strip.csv").write_text(rep.to_csv())
    summary = {"residuals": rep.residuals, "max_boundary_residual": rep.max_boundary_residual,
               "max_abs": rep.max_abs, "bound": rep.bound,
               "bound_ok": rep.bound_ok, "boundary_max": rep.boundary_max,
               "interior_max": rep.interior_max, "maximum_principle_ok": rep.maximum_principle_ok,
               "tolerance": sc.numerics.tol_exact}
    _write_json(ctx.out / "strip.json", summary)
    if not rep.bound_ok or rep.max_boundary_residual >= sc.numerics.tol_exact:
        ctx.warn(["strip check outside tolerance"], "strip")
    return {"files": ["strip.csv", "strip.json"]}


def _perturbation(ctx):
    from .response import bump_perturbation

    a = ctx.args
    return bump_perturbation(ctx.scenario, a.reservoir, a.amplitude, a.bump_start, a.bump_rise, a.bump_stop)


def cmd_response(ctx):
    from .response import FD_EPS_FIRST, linear_response

    k = _perturbation(ctx)
    eps = ctx.args.epsilon or FD_EPS_FIRST
    reports = []
    for op in ctx.observables:
        rep = linear_response(ctx.scenario, op, ctx.args.time, k, eps, ctx.horizon)
        d = rep.to_dict()
        d["observable"] = op.label
        reports.append(d)
        ctx.warn(rep.flags, op.label)
    _write_json(ctx.out / "response.json", reports)
    return {"files": ["response.json"]}


def cmd_dyson(ctx):
    from .response import dyson_report

    k = _perturbation(ctx)
    reports = []
    for op in ctx.observables:
        rep = dyson_report(ctx.scenario, op, ctx.args.time, ctx.args.order, k, ctx.args.epsilon, ctx.horizon)
        d = rep.to_dict()
        d["observable"] = op.label
        reports.append(d)
    _write_json(ctx.out / "dyson.json", reports)
    return {"files": ["dyson.json"]}


def cmd_oracle(ctx):
    from .moller import nnes_expect, oracle_expect

    rows = []
    horizon = ctx.horizon if ctx.horizon is not None else ctx.scenario.numerics.horizon
    for op in ctx.observables:
        for t in ctx.args.times:
            res = nnes_expect(ctx.scenario, op, t, horizon)
            ref = oracle_expect(ctx.scenario, op, t, -horizon)
            rows.append([op.label, t, -horizon, res.value.real, res.value.imag, ref.real, ref.imag,
                         abs(res.value - ref), res.quad_error])
    _write_csv(ctx.out / "oracle.csv", ["observable", "t", "s", "nnes_re", "nnes_im", "oracle_re",
                                        "oracle_im", "abs_difference", "quad_error"], rows)
    return {"files": ["oracle.csv"]}


HANDLERS = {"simulate": cmd_simulate, "moller": cmd_moller, "a5-scan": cmd_a5, "kms-check": cmd_kms,
            "strip-check": cmd_strip, "response": cmd_response, "dyson": cmd_dyson, "oracle": cmd_oracle}


class Context:
    def __init__(self, args, scenario, inputs, observables):
        self.args = args
        self.scenario = scenario
        self.observables = observables
        self.out = Path(args.out)
        self.rng = np.random.default_rng(args.seed)
        self.horizon = args.horizon
        self.manifest = {"command": args.command, "inputs": inputs, "seed": args.seed,
                         "observables": [o.label for o in observables], "warnings": []}

    def warn(self, flags, label):
        for f in flags:
            self.manifest["warnings"].append(f"{label}: {f}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nnes", description="Nonequilibrium steady states of a small "
                                "system coupled to finite reservoirs.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--scenario", default="default", help="JSON scenario file, or 'default' / 'minimal'")
    p.add_argument("--out", default="nnes-out", help="output directory")
    p.add_argument("--seed", type=int, default=0, help="seed for randomized test operators")
    p.add_argument("--observable", action="append", default=None,
                   help="site:a:i:P | current:a | coupling:a | matrix:path (repeatable)")
    p.add_argument("--order", type=int, default=2, help="Dyson order (1..3)")
    p.add_argument("--epsilon", type=float, default=None, help="finite-difference step")
    p.add_argument("--horizon", type=float, default=None, help="truncation horizon T")
    p.add_argument("--times", type=float, nargs="+", default=[0.0], help="evaluation times")
    p.add_argument("--time", type=float, default=0.0, help="evaluation time for response/dyson")
    p.add_argument("--tail", action="store_true", help="add plateau scans and tail bounds to simulate")
    p.add_argument("--picture", choices=("coupled", "free"), default="coupled")
    p.add_argument("--trials", type=int, default=2, help="random operator pairs per Gibbs factor")
    p.add_argument("--swap-roles", action="store_true", help="strip-check with the roles of A and B swapped")
    p.add_argument("--reservoir", type=int, default=1, help="reservoir whose coupling is perturbed")
    p.add_argument("--amplitude", type=float, default=1.0)
    p.add_argument("--bump-start", type=float, default=-6.0)
    p.add_argument("--bump-rise", type=float, default=1.0)
    p.add_argument("--bump-stop", type=float, default=-3.0)
    return p


def _numerics_dict(sc: Scenario) -> dict:
    import dataclasses

    return dataclasses.asdict(sc.numerics)


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.seed < 0:
            raise UsageError("seed must be non-negative")
        if args.horizon is not None and args.horizon <= 0:
            raise UsageError("horizon must be positive")
        if args.command == "dyson" and args.order not in (1, 2, 3):
            raise UsageError("Dyson order must be 1, 2 or 3")
        scenario, inputs = resolve_scenario(args.scenario)
        specs = args.observable or default_observables(scenario)
        # resolve everything before any computation starts
        observables = [resolve_observable(scenario, s) for s in specs]
        ctx = Context(args, scenario, inputs, observables)
        ctx.out.mkdir(parents=True, exist_ok=True)
        started = time.time()
        result = HANDLERS[args.command](ctx)
    except (ConfigError, LayoutError, UsageError, ValueError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err, sort_keys=True))
        return 2
    ctx.manifest.update(
        outputs=result.pop("files"),
        numerics=_numerics_dict(scenario),
        horizon=args.horizon if args.horizon is not None else scenario.numerics.horizon,
        dimension=scenario.layout.total_dim,
        code_version=_version(),
        python=platform.python_version(),
        numpy=np.__version__,
        started=time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        elapsed_s=round(time.time() - started, 3),
        **result,
    )
    _write_json(ctx.out / "manifest.json", ctx.manifest)
    for w in ctx.manifest["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    return 0


def main():
    sys.exit(run())
