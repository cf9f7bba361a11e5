"""``relyam`` command-line interface.

Exit codes: 0 for converged or affirmative results, 2 for theorem-backed
negative answers (``no-solution-per-theorem``), 1 for every error.
Reports are JSON with sorted keys and full float precision; infinities are
written as the strings ``"inf"`` / ``"-inf"``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .assembly import assemble, dump_coo
from .errors import RelyamError
from .mesh import flat_background, generate, load_mesh, save_mesh
from .prescribe import (
    LichnerowiczData,
    TargetCurvatures,
    _dual_norm_solver,
    _residual_norm,
    conformal_transform,
    lichnerowicz_functional,
    solvability_predicate,
    solve_lichnerowicz,
    solve_prescribed,
    verify_solution,
)
from .region import RegionPair, parse_index_set
from .variational import ConstraintSpec, relative_eigenvalue, yamabe_invariant, yamabe_sign, zero_band

log = logging.getLogger("relyam")

EXIT_OK, EXIT_ERROR, EXIT_NEGATIVE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- serialization -----------------------------------------------------------


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"


def _emit(args, report: dict) -> None:
    text = dumps(report)
    out = getattr(args, "out", None)
    if out:
        Path(out).write_text(text)
    if not args.quiet:
        sys.stdout.write(text)


# -- inputs ---------------------------------------------------------------


def _read_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise RelyamError(f"{what} file {path}: invalid JSON ({exc})") from exc


def load_field(spec: str, mesh, boundary: bool, what: str):
    """Literal number, JSON array, or JSON object ``{vertex: value}``."""
    try:
        return float(spec)
    except ValueError:
        pass
    data = _read_json(spec, what)
    if isinstance(data, dict):
        nodes = mesh.boundary_vertices if boundary else np.arange(mesh.n_vertices)
        try:
            table = {int(k): float(v) for k, v in data.items()}
            return np.array([table[int(v)] for v in nodes])
        except KeyError as exc:
            raise RelyamError(f"{what}: no value for vertex {exc.args[0]}") from exc
    if isinstance(data, list):
        return np.asarray(data, dtype=float)
    if isinstance(data, (int, float)):
        return float(data)
    raise RelyamError(f"{what}: expected a number, array or object")


def _region(args, mesh) -> RegionPair:
    sets = []
    for flag, value, size in (("--omega", args.omega, mesh.n_tets), ("--sigma", args.sigma, mesh.n_faces)):
        try:
            sets.append(parse_index_set(value, size))
        except (OSError, ValueError) as exc:
            raise UsageError(f"{flag} {value!r}: {exc}") from exc
    return RegionPair(sets[0], sets[1], mesh)


def _load(args):
    mesh, bg = load_mesh(args.mesh)
    mats = assemble(mesh, bg)
    if getattr(args, "dump_matrices", None):
        d = Path(args.dump_matrices)
        d.mkdir(parents=True, exist_ok=True)
        for name in ("K", "M", "S", "M_R", "S_H", "A"):
            dump_coo(getattr(mats, name), d / f"{name}.txt")
    return mesh, bg, mats


def _targets(args, mesh) -> TargetCurvatures:
    return TargetCurvatures.from_values(
        mesh, load_field(args.rprime, mesh, False, "R'"), load_field(args.hprime, mesh, True, "H'")
    )


def _write_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "q", "r", "F", "residual", "min_u"])
        for s in trace:
            w.writerow([s.stage, repr(float(s.q)), repr(float(s.r)), repr(float(s.F)), repr(float(s.residual)), repr(float(s.min_u))])


# -- commands --------------------------------------------------------------


def cmd_gen(args) -> int:
    mesh = generate(args.shape, args.level)
    rng = np.random.default_rng(args.seed)
    R = np.full(mesh.n_vertices, args.R0)
    H = np.full(mesh.boundary_vertices.size, args.H0)
    if args.random_R:
        R = R + args.random_R * rng.uniform(-1.0, 1.0, R.size)
    if args.random_H:
        H = H + args.random_H * rng.uniform(-1.0, 1.0, H.size)
    bg = flat_background(mesh, R, H)
    save_mesh(args.out, mesh, bg)
    _emit(
        argparse.Namespace(quiet=args.quiet, out=None),
        {
            "command": "gen",
            "shape": args.shape,
            "level": args.level,
            "vertices": mesh.n_vertices,
            "tets": mesh.n_tets,
            "boundary_faces": mesh.n_faces,
            "volume": float(bg.volume_weights.sum()),
            "path": str(args.out),
        },
    )
    return EXIT_OK


def cmd_eigen(args) -> int:
    mesh, _, mats = _load(args)
    eig = relative_eigenvalue(mats, _region(args, mesh))
    if args.field_out:
        Path(args.field_out).write_text(dumps(eig.eigenfield))
    _emit(
        args,
        {
            "command": "eigen",
            "eigenvalue": eig.eigenvalue,
            "residual": eig.residual,
            "iterations": eig.iterations,
            "n_dofs": eig.n_dofs,
            "status": eig.status,
        },
    )
    return EXIT_OK


def cmd_classify(args) -> int:
    mesh, _, mats = _load(args)
    sign, eig = yamabe_sign(mats, _region(args, mesh), args.tol)
    band = zero_band(mats) if args.tol is None else args.tol * mats.norm_inf()
    _emit(
        args,
        {"command": "classify", "sign": sign.value, "eigenvalue": eig.eigenvalue, "zero_band": band, "n_dofs": eig.n_dofs},
    )
    return EXIT_OK


def cmd_yamabe(args) -> int:
    mesh, _, mats = _load(args)
    spec = ConstraintSpec(args.q, args.r, args.b)
    res = yamabe_invariant(mats, _region(args, mesh), spec, tol=args.tol or 1e-8, max_iter=args.max_iter)
    if args.field_out:
        Path(args.field_out).write_text(dumps(res.minimizer))
    _emit(
        args,
        {
            "command": "yamabe",
            "q": args.q,
            "r": args.r,
            "b": args.b,
            "value": res.value,
            "lambda": res.multiplier,
            "iterations": res.iterations,
            "residual": res.residual,
            "identity_gap": res.identity_gap if math.isfinite(res.value) else math.nan,
            "status": res.status,
        },
    )
    return EXIT_OK if res.status in ("converged", "empty-constraint-set") else EXIT_ERROR


def cmd_transform(args) -> int:
    mesh, bg, mats = _load(args)
    u = load_field(args.factor, mesh, False, "factor")
    u = np.full(mesh.n_vertices, u) if np.ndim(u) == 0 else u
    new_bg, _ = conformal_transform(bg, mats, u)
    save_mesh(args.out, mesh, new_bg)
    _emit(
        argparse.Namespace(quiet=args.quiet, out=None),
        {
            "command": "transform",
            "path": str(args.out),
            "volume": float(new_bg.volume_weights.sum()),
            "area": float(new_bg.area_weights.sum()),
            "R_min": float(new_bg.R.min()),
            "R_max": float(new_bg.R.max()),
            "H_min": float(new_bg.H_boundary.min()),
            "H_max": float(new_bg.H_boundary.max()),
        },
    )
    return EXIT_OK


def _trace_path(args):
    if args.trace_csv:
        return args.trace_csv
    if args.out:
        return str(Path(args.out).with_suffix(".trace.csv"))
    return None


def cmd_prescribe(args) -> int:
    mesh, bg, mats = _load(args)
    targets = _targets(args, mesh)
    rep = solve_prescribed(mesh, bg, targets, stages=args.stages, tol=args.tol or 1e-7, matrices=mats)
    report = {"command": "prescribe", **rep.to_dict(include_fields=not args.no_fields)}
    path = _trace_path(args)
    if path and rep.trace:
        _write_trace(path, rep.trace)
    _emit(args, report)
    if rep.status == "no-solution-per-theorem":
        return EXIT_NEGATIVE
    return EXIT_OK if rep.status == "converged" else EXIT_ERROR


def cmd_lichnerowicz(args) -> int:
    mesh, _, mats = _load(args)
    targets = _targets(args, mesh)
    lich = LichnerowiczData.from_values(
        mesh, load_field(args.aw, mesh, False, "a_w"), load_field(args.bw, mesh, True, "b_w")
    )
    sol = solve_lichnerowicz(mats, targets, lich, tol=args.tol or 1e-9)
    _emit(
        args,
        {
            "command": "lichnerowicz",
            "status": "converged",
            "residual": sol.residual,
            "iterations": sol.iterations,
            "value": sol.value,
            "min_u": float(sol.u.min()),
            "max_u": float(sol.u.max()),
            "solution": sol.u,
        },
    )
    return EXIT_OK


def cmd_verify(args) -> int:
    mesh, _, mats = _load(args)
    report = _read_json(args.report, "report")
    kind = report.get("command")
    targets = _targets(args, mesh)
    tol = args.tol or 1e-7
    out = {"command": "verify", "report": str(args.report), "kind": kind}
    if kind == "prescribe" and report.get("status") == "no-solution-per-theorem":
        pred = solvability_predicate(mats, targets)
        out.update(consistent=not pred.value, predicate=pred.value, explanation=pred.explanation)
        _emit(args, out)
        return EXIT_NEGATIVE if not pred.value else EXIT_ERROR
    if "solution" not in report:
        raise RelyamError("report has no solution field to verify")
    u = np.asarray(report["solution"], dtype=float)
    if u.shape != (mesh.n_vertices,):
        raise RelyamError(f"report solution has {u.size} values, mesh has {mesh.n_vertices} vertices")
    if kind == "lichnerowicz":
        if args.aw is None or args.bw is None:
            raise UsageError("verify: lichnerowicz reports need --aw and --bw")
        lich = LichnerowiczData.from_values(
            mesh, load_field(args.aw, mesh, False, "a_w"), load_field(args.bw, mesh, True, "b_w")
        )
        _, g = lichnerowicz_functional(mats, targets, lich, u)
        residual = _residual_norm(_dual_norm_solver(mats), 0.5 * g)
        out.update(critical_residual=residual, min_u=float(u.min()))
    else:
        ver = verify_solution(mats, targets, u)
        residual = ver["critical_residual"]
        out.update({k: v for k, v in ver.items() if not isinstance(v, np.ndarray)})
    ok = bool(residual <= tol and u.min() > 0)
    out.update(consistent=ok, tolerance=tol)
    _emit(args, out)
    return EXIT_OK if ok else EXIT_ERROR


# -- parser ---------------------------------------------------------------


def _global_flags(p, suppress: bool):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--tol", type=float, default=d, help="solver / classification tolerance")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS if suppress else 0, help="seed for randomized data")
    p.add_argument("--threads", type=int, default=d, help="BLAS thread limit (env RELYAM_THREADS)")
    p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS if suppress else False)
    p.add_argument("--dump-matrices", metavar="DIR", default=d, help="write K, M, S, M_R, S_H, A as row col value text")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="relyam", description="Relative Yamabe invariants and prescribed curvature on 3-manifolds with boundary")
    parser.add_argument("--version", action="version", version=f"relyam {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)

    def add(name, func, help_text, mesh=True, region=False):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(func=func)
        if mesh:
            p.add_argument("--mesh", required=True, help="mesh JSON file")
        if region:
            p.add_argument("--omega", default="all", help="'all', 'none' or JSON index list of tetrahedra")
            p.add_argument("--sigma", default="all", help="'all', 'none' or JSON index list of boundary faces")
        return p

    p = add("gen", cmd_gen, "generate a canonical mesh with flat background", mesh=False)
    p.add_argument("--shape", choices=["cube", "ball"], required=True)
    p.add_argument("--level", type=int, default=2)
    p.add_argument("--R0", type=float, default=0.0)
    p.add_argument("--H0", type=float, default=0.0)
    p.add_argument("--random-R", type=float, default=0.0, metavar="AMP", help="add uniform noise in [-AMP, AMP] to R")
    p.add_argument("--random-H", type=float, default=0.0, metavar="AMP", help="add uniform noise in [-AMP, AMP] to H")
    p.add_argument("--out", required=True)

    p = add("yamabe", cmd_yamabe, "relative Yamabe invariant", region=True)
    p.add_argument("--q", type=float, default=4.0)
    p.add_argument("--r", type=float, default=3.0)
    p.add_argument("--b", type=float, default=0.0)
    p.add_argument("--max-iter", type=int, default=10_000)
    p.add_argument("--field-out", help="write the minimizer as a JSON array")
    p.add_argument("--out")

    p = add("eigen", cmd_eigen, "relative first eigenvalue", region=True)
    p.add_argument("--field-out", help="write the eigenfield as a JSON array")
    p.add_argument("--out")

    p = add("classify", cmd_classify, "Yamabe sign of a region", region=True)
    p.add_argument("--out")

    p = add("transform", cmd_transform, "write the conformally transformed mesh file")
    p.add_argument("--factor", required=True, help="positive nodal factor: number or JSON array")
    p.add_argument("--out", required=True)

    def targets(p):
        p.add_argument("--rprime", required=True, help="target scalar curvature: number, JSON array or object")
        p.add_argument("--hprime", required=True, help="target boundary mean curvature: number, JSON array or object")

    p = add("prescribe", cmd_prescribe, "prescribe scalar and boundary mean curvature")
    targets(p)
    p.add_argument("--stages", type=int, default=8)
    p.add_argument("--trace-csv", help="stage trace CSV (default: <out>.trace.csv)")
    p.add_argument("--no-fields", action="store_true", help="omit recovered curvature fields from the report")
    p.add_argument("--out")

    p = add("lichnerowicz", cmd_lichnerowicz, "solve the Lichnerowicz equation")
    targets(p)
    p.add_argument("--aw", required=True)
    p.add_argument("--bw", required=True)
    p.add_argument("--out")

    p = add("verify", cmd_verify, "re-check a prescribe or lichnerowicz report against its inputs")
    p.add_argument("--report", required=True)
    targets(p)
    p.add_argument("--aw")
    p.add_argument("--bw")
    p.add_argument("--out")
    return parser


def _thread_limit(args):
    n = args.threads
    if n is None and os.environ.get("RELYAM_THREADS"):
        try:
            n = int(os.environ["RELYAM_THREADS"])
        except ValueError as exc:
            raise UsageError(f"RELYAM_THREADS must be an integer, got {os.environ['RELYAM_THREADS']!r}") from exc
    if n is None:
        return nullcontext()
    if n < 1:
        raise UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run(argv=None) -> int:
    """Parse ``argv`` and execute; returns the exit code."""
    try:
        args = build_parser().parse_args(argv)
        if args.tol is not None and not args.tol > 0:
            raise UsageError("--tol must be > 0")
        logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING, format="relyam: %(message)s")
        with _thread_limit(args):
            return args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return EXIT_ERROR
    except (RelyamError, ValueError, OSError) as exc:
        sys.stderr.write(f"error: {type(exc).__name__}: {exc}\n")
        return EXIT_ERROR


def main() -> None:
    sys.exit(run())
