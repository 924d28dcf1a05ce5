"""Command-line interface.

Every subcommand writes its artifacts plus ``manifest.json`` into
``--output``; without ``--output`` the main result is printed to standard
output.  Floats are written in the shortest decimal form that round-trips
to the same binary64 value (Python's ``repr``).  Exit status: 0 on success,
1 on numerical failure, 2 on argument errors.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import io
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._backend import NAME as KERNEL_BACKEND
from .criteria import CriterionKind
from .ildm import IldmError, IldmSpec, ildm_curve
from .integrator import IntegrationError, IntegratorOptions, StopCondition
from .landscape import STATUS_NAMES, LandscapeAxis, LandscapeGrid, scan_landscape
from .mechanism import BUILTINS, MechanismError, builtin, load_mechanism
from .simopt import (InfeasibleProblemError, OptimizationError, ProblemSpec, SweepSpec,
                     consistency_test, reconstruct_point, sweep_manifold)

__all__ = ["main", "run", "build_parser", "verify_run", "CliError"]

DETERMINISM_NOTE = ("no random numbers are used; results depend only on the inputs, the options "
                    "and the kernel backend")
TRAJECTORY_HEADER = "t,c_1..c_n"
SWEEP_HEADER = "progress_1[,progress_2],c_1..c_n,objective,converged"
LANDSCAPE_HEADER = "axis1,axis2,objective,status"
ARGMIN_HEADER = "axis1,axis2,objective,interior"
ILDM_HEADER = "progress_1,c_1..c_n,residual,relative_residual,spectral_gap"


class CliError(Exception):
    """Invalid arguments (exit status 2)."""


def _msg(exc) -> str:
    # KeyError wraps its message in quotes
    return str(exc.args[0]) if isinstance(exc, KeyError) and exc.args else str(exc)


class NumericalFailure(Exception):
    """A computation did not succeed (exit status 1); artifacts may still be written."""


# ---------------------------------------------------------------- formatting

def fmt(x) -> str:
    """Shortest round-trip decimal for floats; ``nan``/``inf`` spelled out."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, allow_nan=False) + "\n"


def csv_text(header: list, rows) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(v if isinstance(v, str) else fmt(v) for v in row) + "\n")
    return buf.getvalue()


def trajectory_csv(traj) -> str:
    n = traj.states.shape[1]
    header = ["t"] + [f"c_{i + 1}" for i in range(n)]
    return csv_text(header, ([t, *c] for t, c in zip(traj.times, traj.states)))


# ------------------------------------------------------------------ parsing

def _float(text: str, what: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise CliError(f"{what}: {text!r} is not a number") from None
    if not math.isfinite(v):
        raise CliError(f"{what}: {text!r} is not finite")
    return v


def parse_progress(token: str):
    """``name=value`` or ``name=min:max[:count[:log]]`` -> ``(name, value_or_range)``.

    A range is ``(min, max, count_or_None, scale)``.
    """
    if "=" not in token:
        raise CliError(f"--progress expects name=value or name=min:max:count, got {token!r}")
    name, rhs = token.split("=", 1)
    name = name.strip()
    if not name:
        raise CliError("--progress needs a species name")
    parts = rhs.split(":")
    if len(parts) == 1:
        return name, _float(parts[0], f"--progress {name}")
    if len(parts) > 4:
        raise CliError(f"--progress {name}: too many ':' fields")
    lo, hi = _float(parts[0], f"--progress {name}"), _float(parts[1], f"--progress {name}")
    count = None
    if len(parts) >= 3 and parts[2] != "":
        try:
            count = int(parts[2])
        except ValueError:
            raise CliError(f"--progress {name}: count {parts[2]!r} is not an integer") from None
        if count < 1:
            raise CliError(f"--progress {name}: count must be positive")
    scale = parts[3] if len(parts) == 4 else "linear"
    if scale not in ("linear", "log"):
        raise CliError(f"--progress {name}: scale must be 'linear' or 'log'")
    if count is not None and count > 1 and not lo < hi:
        raise CliError(f"--progress {name}: range must be increasing")
    return name, (lo, hi, count, scale)


def range_values(rng) -> np.ndarray:
    lo, hi, count, scale = rng
    count = count or 1
    if count == 1:
        return np.array([lo])
    if scale == "log":
        if lo <= 0:
            raise CliError("a log range needs positive bounds")
        return np.logspace(math.log10(lo), math.log10(hi), count)
    return np.linspace(lo, hi, count)


def parse_grid(text: str):
    try:
        a, b = text.lower().split("x")
        n1, n2 = int(a), int(b)
    except ValueError:
        raise CliError(f"--grid expects <n1>x<n2>, got {text!r}") from None
    if n1 < 2 or n2 < 2:
        raise CliError("--grid counts must be at least 2")
    return n1, n2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="simtraj", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"simtraj {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, criterion=True):
        sp.add_argument("--mechanism", required=True, help="built-in name or path to a JSON document")
        sp.add_argument("--gamma", type=float, help="Davis-Skodje spectral-gap parameter")
        sp.add_argument("--temperature", type=float, help="temperature in K")
        sp.add_argument("--constants", help="comma-separated conservation constants")
        if criterion:
            sp.add_argument("--criterion", default="B", help="A, B, C or metric:<file.json>")
        sp.add_argument("--progress", action="append", default=[], metavar="NAME=SPEC",
                        help="fixed value name=value or range name=min:max:count[:log]; repeatable")
        sp.add_argument("--tf", type=float, help="fixed integration horizon")
        sp.add_argument("--epsilon", type=float, help="speed threshold ending the trajectory")
        sp.add_argument("--rtol", type=float, default=IntegratorOptions.rtol)
        sp.add_argument("--atol", type=float, default=IntegratorOptions.atol)
        sp.add_argument("--epsilon-reference", choices=("initial", "slow"), default="initial")
        sp.add_argument("--format", choices=("csv", "json"), default="csv")
        sp.add_argument("--output", help="output directory (created if missing)")
        sp.add_argument("--jobs", type=int, default=os.cpu_count() or 1)

    sp = sub.add_parser("solve", help="reconstruct one point")
    common(sp)
    sp = sub.add_parser("sweep", help="reconstruct a 1-D or 2-D grid of points")
    common(sp)
    sp.add_argument("--no-warm-start", action="store_true")
    sp = sub.add_parser("landscape", help="objective values on a 2-D grid of initial values")
    common(sp)
    sp.add_argument("--grid", default=None, help="<n1>x<n2> node counts (default 101x101)")
    sp = sub.add_parser("consistency", help="re-solve from a later point of the solution")
    common(sp)
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--t1", type=float)
    g.add_argument("--fraction", type=float, default=0.5,
                   help="progress fraction of the first fixed species defining t1")
    sp = sub.add_parser("ildm", help="ILDM points along a progress range")
    common(sp)
    sp.add_argument("--init", choices=("optimize", "interior"), default="optimize",
                    help="Newton start: optimization solutions with --criterion, or interior points")
    sub.add_parser("list-mechanisms", help="list built-in mechanisms")
    return p


# ------------------------------------------------------------------ helpers

def _mechanism(args):
    constants = None
    if args.constants:
        constants = [_float(t, "--constants") for t in args.constants.split(",")]
    try:
        return load_mechanism(args.mechanism, gamma=args.gamma, temperature=args.temperature,
                              constants=constants)
    except (KeyError, MechanismError, ValueError, OSError) as exc:
        raise CliError(_msg(exc)) from None


def _criterion(args):
    try:
        return CriterionKind.parse(args.criterion)
    except (ValueError, OSError, KeyError) as exc:
        raise CliError(f"--criterion: {exc}") from None


def _stop(args):
    if args.tf is not None and args.epsilon is not None:
        raise CliError("give at most one of --tf and --epsilon")
    try:
        if args.tf is not None:
            return StopCondition.horizon(args.tf)
        if args.epsilon is not None:
            return StopCondition.velocity(args.epsilon)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    return None


def _options(args):
    try:
        return IntegratorOptions(rtol=args.rtol, atol=args.atol)
    except ValueError as exc:
        raise CliError(str(exc)) from None


def species_name(m, name: str) -> str:
    """Resolve a species name; ``cX`` is accepted for species ``X``."""
    if name not in m.species_names and name.startswith("c") and name[1:] in m.species_names:
        return name[1:]
    try:
        m.index(name)
    except KeyError as exc:
        raise CliError(_msg(exc)) from None
    return name


def _split_progress(args, m):
    fixed, ranges = {}, []
    for token in args.progress:
        name, val = parse_progress(token)
        name = species_name(m, name)
        if name in fixed or any(name == r[0] for r in ranges):
            raise CliError(f"--progress {name} given twice")
        if isinstance(val, tuple):
            ranges.append((name, val))
        else:
            fixed[name] = val
    return fixed, ranges


def _spec(args, m, fixed):
    try:
        return ProblemSpec(m, _criterion(args), fixed, stop=_stop(args), integrator=_options(args),
                           epsilon_reference=args.epsilon_reference)
    except (ValueError, KeyError) as exc:
        raise CliError(_msg(exc)) from None


class _Writer:
    """Collects artifacts; writes them with a manifest, or prints the main one."""

    def __init__(self, args, argv):
        self.args, self.argv = args, list(argv)
        self.files = {}
        self.main = None

    def add(self, name, text, main=False):
        self.files[name] = text
        if main:
            self.main = name

    def finish(self, manifest: dict, stdout):
        out = self.args.output
        if out is None:
            if self.main is not None:
                stdout.write(self.files[self.main])
            return
        d = Path(out)
        d.mkdir(parents=True, exist_ok=True)
        digests = {}
        for name, text in self.files.items():
            (d / name).write_text(text)
            digests[name] = hashlib.sha256(text.encode()).hexdigest()
        manifest["outputs"] = digests
        (d / "manifest.json").write_text(dumps(manifest))


def _manifest(args, argv, m, extra: dict, t0: float) -> dict:
    doc = {
        "tool": "simtraj",
        "version": __version__,
        "subcommand": args.command,
        "argv": list(argv),
        "mechanism": m.describe() if m is not None else None,
        "kernel_backend": KERNEL_BACKEND,
        "determinism": DETERMINISM_NOTE,
        "wall_time": time.perf_counter() - t0,
    }
    if m is not None:
        doc["mechanism_source"] = args.mechanism
        doc["constants"] = list(m.conservation_constants)
        doc["criterion"] = getattr(args, "criterion", None)
        doc["tolerances"] = {"rtol": args.rtol, "atol": args.atol}
    doc.update(extra)
    return doc


# -------------------------------------------------------------- subcommands

def _cmd_solve(args, m, writer):
    fixed, ranges = _split_progress(args, m)
    if ranges:
        raise CliError("solve takes fixed values only (name=value)")
    spec = _spec(args, m, fixed)
    res = reconstruct_point(spec)
    names = m.species_names
    doc = {"problem": spec.to_dict(), "result": res.to_dict(names)}
    if args.format == "json":
        doc["trajectory"] = res.trajectory.to_dict()
        writer.add("result.json", dumps(doc), main=True)
    else:
        writer.add("result.json", dumps(doc), main=True)
        writer.add("trajectory.csv", trajectory_csv(res.trajectory))
    if not res.converged:
        raise NumericalFailure(f"optimization did not converge: {res.message}")
    return {"problem": spec.to_dict(), "columns": {f"c_{i + 1}": s for i, s in enumerate(names)}}


def _cmd_sweep(args, m, writer):
    fixed, ranges = _split_progress(args, m)
    if not 1 <= len(ranges) <= 2:
        raise CliError("sweep needs one or two --progress ranges (name=min:max:count)")
    axes = tuple((name, tuple(range_values(r))) for name, r in ranges)
    base = dict(fixed)
    for name, vals in axes:
        base[name] = vals[0]
    spec = _spec(args, m, base)
    try:
        sweep = SweepSpec(axes, warm_start=not args.no_warm_start, jobs=max(1, args.jobs))
    except ValueError as exc:
        raise CliError(str(exc)) from None
    res = sweep_manifold(spec, sweep)
    names = m.species_names
    n = m.n_species
    prog = [f"progress_{k + 1}" for k in range(len(axes))]
    header = prog + [f"c_{i + 1}" for i in range(n)] + ["objective", "converged"]
    rows, records = [], []
    for key, r, err in zip(res.keys, res.results, res.errors):
        if r is None:
            rows.append([*key, *([math.nan] * n), math.nan, False])
            records.append({"progress": list(key), "error": err})
        else:
            rows.append([*key, *r.c0_opt, r.objective, r.converged])
            records.append({"progress": list(key), **r.to_dict(names)})
    if args.format == "csv":
        writer.add("sweep.csv", csv_text(header, rows), main=True)
    writer.add("sweep.json", dumps({"problem": spec.to_dict(), "axes": [a for a, _ in axes],
                                     "nodes": records}), main=args.format == "json")
    failed = [k for k, r in zip(res.keys, res.results) if r is None or not r.converged]
    meta = {"problem": spec.to_dict(), "warm_start": sweep.warm_start,
            "columns": {**{p: a for p, (a, _) in zip(prog, axes)},
                        **{f"c_{i + 1}": s for i, s in enumerate(names)}}}
    if failed:
        raise NumericalFailure(f"{len(failed)} of {len(res.keys)} nodes failed or did not converge",
                               meta)
    return meta


def _cmd_landscape(args, m, writer):
    fixed, ranges = _split_progress(args, m)
    if fixed or len(ranges) != 2:
        raise CliError("landscape needs exactly two --progress ranges (name=min:max[:count[:log]])")
    counts = parse_grid(args.grid) if args.grid else (None, None)
    axes = []
    for (name, (lo, hi, count, scale)), override in zip(ranges, counts):
        n = override or count or 101
        try:
            axes.append(LandscapeAxis(name, lo, hi, n, scale))
        except ValueError as exc:
            raise CliError(f"--progress {name}: {exc}") from None
    try:
        grid = LandscapeGrid(tuple(axes), _criterion(args), stop=_stop(args), integrator=_options(args),
                             epsilon_reference=args.epsilon_reference)
        res = scan_landscape(m, grid, jobs=max(1, args.jobs))
    except ValueError as exc:
        raise CliError(str(exc)) from None
    rows = []
    for i, a in enumerate(res.axis1):
        for j, b in enumerate(res.axis2):
            rows.append([a, b, res.values[i, j], STATUS_NAMES[int(res.status[i, j])]])
    arg_rows = []
    for i, a in enumerate(res.axis1):
        k = res.argmin[i]
        if k >= 0:
            arg_rows.append([a, res.axis2[k], res.values[i, k], bool(res.interior[i])])
        else:
            arg_rows.append([a, math.nan, math.nan, False])
    if args.format == "csv":
        writer.add("landscape.csv", csv_text(LANDSCAPE_HEADER.split(","), rows), main=True)
        writer.add("argmin.csv", csv_text(ARGMIN_HEADER.split(","), arg_rows))
    else:
        writer.add("landscape.json", dumps({
            "axes": [{"species": ax.species, "lower": ax.lower, "upper": ax.upper, "count": ax.count,
                      "scale": ax.scale} for ax in axes],
            "axis1": res.axis1, "axis2": res.axis2, "values": res.values,
            "status": [[STATUS_NAMES[int(s)] for s in row] for row in res.status],
            "argmin": res.argmin, "interior": res.interior}), main=True)
    return {"axes": [ax.species for ax in axes], "grid": [ax.count for ax in axes],
            "infeasible": res.infeasible_count,
            "stops": [None if s is None else s.to_dict() for s in res.stops]}


def _cmd_consistency(args, m, writer):
    fixed, ranges = _split_progress(args, m)
    if ranges:
        raise CliError("consistency takes fixed values only (name=value)")
    spec = _spec(args, m, fixed)
    if args.t1 is None and not 0.0 <= args.fraction <= 1.0:
        raise CliError("--fraction must lie in [0, 1]")
    try:
        rep = consistency_test(spec, t1=args.t1, fraction=None if args.t1 is not None else args.fraction)
    except ValueError as exc:
        if "outside the solution span" in str(exc):
            raise CliError(str(exc)) from None
        raise
    names = m.species_names
    doc = {"problem": spec.to_dict(), "report": rep.to_dict(names),
           "first": rep.first.to_dict(names),
           "second": None if rep.second is None else rep.second.to_dict(names)}
    writer.add("consistency.json", dumps(doc), main=True)
    if args.format == "csv":
        writer.add("first_trajectory.csv", trajectory_csv(rep.first.trajectory))
        if rep.second is not None:
            writer.add("second_trajectory.csv", trajectory_csv(rep.second.trajectory))
    bad = not rep.first.converged or (rep.second is not None and not rep.second.converged)
    meta = {"problem": spec.to_dict(), "t1": rep.t1}
    if bad:
        raise NumericalFailure("an optimization in the consistency test did not converge", meta)
    return meta


def _cmd_ildm(args, m, writer):
    fixed, ranges = _split_progress(args, m)
    if len(ranges) != 1:
        raise CliError("ildm needs exactly one --progress range (name=min:max:count)")
    name, rng = ranges[0]
    values = range_values(rng)
    base = dict(fixed)
    base[name] = values[0]
    try:
        ispec = IldmSpec(m, len(base), base)
    except (ValueError, KeyError) as exc:
        raise CliError(_msg(exc)) from None
    initials = None
    meta = {"dimension": ispec.dimension, "init": args.init}
    if args.init == "optimize":
        spec = _spec(args, m, base)
        sw = sweep_manifold(spec, SweepSpec(((name, tuple(values)),), warm_start=True))
        by_value = dict(zip((k[0] for k in sw.keys), sw.results))
        initials = [by_value[v].c0_opt if by_value.get(v) is not None else None for v in values]
        meta["problem"] = spec.to_dict()
    points, errors = ildm_curve(ispec, name, values, initials=initials)
    n = m.n_species
    header = ["progress_1"] + [f"c_{i + 1}" for i in range(n)] + ["residual", "relative_residual",
                                                                  "spectral_gap"]
    rows, records = [], []
    for v, p, err in zip(values, points, errors):
        if p is None:
            rows.append([v, *([math.nan] * n), math.nan, math.nan, math.nan])
            records.append({"progress": v, "error": err})
        else:
            rows.append([v, *p.composition, p.residual, p.relative_residual, p.spectral_gap])
            records.append({"progress": v, **p.to_dict(m.species_names)})
    if args.format == "csv":
        writer.add("ildm.csv", csv_text(header, rows), main=True)
    writer.add("ildm.json", dumps({"progress": name, "points": records}), main=args.format == "json")
    meta["columns"] = {"progress_1": name, **{f"c_{i + 1}": s for i, s in enumerate(m.species_names)}}
    if any(p is None for p in points):
        raise NumericalFailure(f"{sum(p is None for p in points)} ILDM points failed", meta)
    return meta


def _cmd_list(stdout):
    lines = []
    for name in BUILTINS:
        d = builtin(name).describe()
        params = []
        if "gamma" in d:
            params.append(f"gamma={d['gamma']!r} (--gamma)")
        if "temperature" in d:
            params.append(f"T={d['temperature']!r} K (--temperature)")
        if d.get("conservation"):
            params.append("constants=" + ",".join(repr(r["constant"]) for r in d["conservation"]))
        lines.append(f"{name}: species {','.join(d['species'])}; " + "; ".join(params))
    stdout.write("\n".join(lines) + "\n")


COMMANDS = {"solve": _cmd_solve, "sweep": _cmd_sweep, "landscape": _cmd_landscape,
            "consistency": _cmd_consistency, "ildm": _cmd_ildm}


def run(argv=None, stdout=None, stderr=None) -> int:
    """Run the CLI and return the exit status."""
    argv = list(sys.argv[1:] if argv is None else argv)
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        with contextlib.redirect_stdout(stdout), contextlib.redirect_stderr(stderr):
            args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    t0 = time.perf_counter()
    if args.command == "list-mechanisms":
        _cmd_list(stdout)
        return 0
    writer = _Writer(args, argv)
    m = None
    status, extra = 0, {}
    try:
        if args.jobs < 1:
            raise CliError("--jobs must be positive")
        m = _mechanism(args)
        extra = COMMANDS[args.command](args, m, writer) or {}
    except CliError as exc:
        stderr.write(f"simtraj {args.command}: error: {exc}\n")
        return 2
    except NumericalFailure as exc:
        stderr.write(f"simtraj {args.command}: numerical failure: {exc.args[0]}\n")
        status = 1
        extra = exc.args[1] if len(exc.args) > 1 else {}
    except (OptimizationError, InfeasibleProblemError, IntegrationError, IldmError,
            ArithmeticError, np.linalg.LinAlgError, ValueError) as exc:
        stderr.write(f"simtraj {args.command}: numerical failure: {type(exc).__name__}: {exc}\n")
        return 1
    extra["exit_status"] = status
    writer.finish(_manifest(args, argv, m, extra, t0), stdout)
    return status


def verify_run(directory) -> dict:
    """Reload a run directory and check it against its manifest.

    Checks that every listed output exists with the recorded SHA-256 digest,
    that JSON outputs parse, and that the mechanism rebuilt from the
    manifest matches the recorded description.  Returns the manifest;
    raises ``ValueError`` on any mismatch.
    """
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    for name, digest in manifest.get("outputs", {}).items():
        text = (d / name).read_text()
        if hashlib.sha256(text.encode()).hexdigest() != digest:
            raise ValueError(f"{name} does not match its manifest digest")
        if name.endswith(".json"):
            json.loads(text)
    mech = manifest.get("mechanism")
    if mech is not None:
        src = manifest["mechanism_source"]
        m = load_mechanism(src, gamma=mech.get("gamma"), temperature=mech.get("temperature"),
                           constants=manifest.get("constants") or None)
        if _jsonable(m.describe()) != mech:
            raise ValueError("mechanism in the manifest does not rebuild identically")
    return manifest


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
