"""Command-line interface: classify / check / reduce / solve / verify-bound.

Every solve writes a manifest recording the resolved flags, the problem hash
and the base seed; `rerun` re-executes a manifest and reproduces the output
files byte for byte.  All randomness flows from the single --seed flag.

Exit codes: 0 success, 1 usage, 2 invalid problem, 3 method precondition
failed, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bounded import (
    BoundedMConfig,
    SolveMode,
    gain_threshold,
    resolve_config,
    run_bounded_ensemble,
)
from .errors import (
    MethodPreconditionError,
    SdaeError,
)
from .expr import parse as parse_expr
from .expr import to_text
from .index1 import build_index1_sde
from .index_reduction import compute_index, reduce_once
from .integrator import Ensemble, constraint_process, derive_seed, write_path_csv
from .picard import check_contraction, picard_solve
from .problem import (
    ProblemKind,
    SdaeProblem,
    builtin,
    builtin_names,
    classify,
    load_problem_file,
    print_problem,
)
from .stats import run_ensemble, violation_stats, write_report_csv
from .unit_prob import CharacteristicSpec, build_unit_prob_sde, consistent_init
from .wellposedness import is_ill_posed

EXIT_OK, EXIT_USAGE, EXIT_PROBLEM, EXIT_PRECONDITION, EXIT_RUNTIME = 0, 1, 2, 3, 4

# flags whose values may begin with '-' (boxes with negative bounds); they are
# rewritten to --flag=value before argparse sees them
_GLUED_FLAGS = ("--box", "--y-box")


def _parse_box(text: str) -> list[tuple[float, float]]:
    out = []
    for part in text.split(","):
        lo, sep, hi = part.partition(":")
        if not sep:
            raise ValueError(f"box component '{part}' is not lo:hi")
        out.append((float(lo), float(hi)))
    return out


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="sdae",
        description="Classify, reduce, and approximately solve stochastic "
        "differential-algebraic equations.",
    )
    ap.add_argument("--version", action="version", version=f"sdae {__version__}")
    sub = ap.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("classify", help="print the problem taxonomy")
    p.add_argument("file")

    p = sub.add_parser("check", help="ill-posedness (default) or contraction check")
    p.add_argument("file")
    p.add_argument("--box", required=True, help="lo:hi per dimension, comma separated")
    p.add_argument("--grid", type=int, default=21)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--contraction", action="store_true")
    p.add_argument("--pairs", type=int, default=10_000)
    p.add_argument("--norm", choices=["spectral", "rowsum"], default="spectral")

    p = sub.add_parser("reduce", help="print stacked constraints after k steps")
    p.add_argument("file")
    p.add_argument("--steps", type=int, default=1)

    p = sub.add_parser("solve", help="simulate one of the solution methods")
    p.add_argument("file")
    p.add_argument("--method", required=True,
                   choices=["index1", "picard", "unit-prob", "bounded"])
    p.add_argument("--dt", type=float, required=True)
    p.add_argument("--t-end", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--paths", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--save-paths", type=int, default=16,
                   help="number of per-path CSVs to write")
    p.add_argument("--threads", type=int, default=None,
                   help="ensemble parallelism hint; results are independent of it")
    # bounded / unit-prob shared
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--box", default=None)
    p.add_argument("--grid", type=int, default=101)
    p.add_argument("--b", type=float, default=None)
    p.add_argument("--mode", choices=[m.value for m in SolveMode],
                   default=SolveMode.NEWTON_PER_STEP.value)
    # unit-prob characteristic
    p.add_argument("--y-file", default=None,
                   help="file with n expressions in u-variables, one per line")
    p.add_argument("--y-box", default=None)
    p.add_argument("--y-grid", type=int, default=101)
    # picard
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-10)

    p = sub.add_parser("verify-bound", help="re-check a stored bounded run")
    p.add_argument("dir")
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--alpha", type=float, required=True)

    p = sub.add_parser("builtin", help="print or emit a registered problem")
    p.add_argument("name")
    p.add_argument("--emit", action="store_true")
    p.add_argument("--out", default=None)

    p = sub.add_parser("rerun", help="re-execute a solve from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    return ap


class _ProblemLoadError(SdaeError):
    """Wraps any failure while reading a problem file (exit code 2)."""


def _load(path: str) -> SdaeProblem:
    if not os.path.exists(path):
        raise _ProblemLoadError(f"problem file '{path}' not found")
    try:
        return load_problem_file(path)
    except SdaeError as exc:
        raise _ProblemLoadError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_classify(args) -> int:
    pr = _load(args.file)
    cls = classify(pr)
    print(cls.summary())
    for note in cls.notes:
        print(f"note: {note}", file=sys.stderr)
    return EXIT_OK


def _cmd_check(args) -> int:
    pr = _load(args.file)
    box = _parse_box(args.box)
    if args.contraction:
        report = check_contraction(pr, box, grid_per_dim=args.grid,
                                   sample_pairs=args.pairs, norm=args.norm)
        print(report)
        return EXIT_OK
    report = is_ill_posed(pr, box, grid_per_dim=args.grid, tol=args.tol)
    at = ", ".join(f"{c:g}" for c in report.argmax_point)
    print(
        f"{report.verdict.value} (max residual {report.max_residual_norm:.3e} "
        f"at ({at}), {report.probes.shape[0]} probes, tol {report.tol:g})"
    )
    return EXIT_OK


def _cmd_reduce(args) -> int:
    pr = _load(args.file)
    if pr.constraint_references_u():
        raise MethodPreconditionError(
            "constraint already references u (index-1 form); reduction applies "
            "to high-index problems"
        )
    current = pr
    for step_no in range(1, args.steps + 1):
        if current.constraint_references_u():
            print(f"step {step_no}: constraint now references u; stopping")
            break
        step = reduce_once(current)
        print(f"step {step_no}: p = {step.reduced.p} rows "
              f"(|h(x0,u0)| = {step.init_residual:.3e})")
        for row in step.constraint_rows:
            print(f"  {to_text(row)}")
        current = step.reduced
    report = None
    if not pr.constraint_references_u():
        report = compute_index(pr)
        if report.index is not None:
            law = "holds" if report.dimension_law_holds else "fails"
            print(f"index: {report.index} (dimension law m = p(1+d)^(J-1) {law})")
        else:
            print(f"index: not determined - {report.diagnosis}")
    return EXIT_OK


def _read_characteristic(args, pr: SdaeProblem) -> CharacteristicSpec:
    if args.epsilon is None:
        raise MethodPreconditionError("--epsilon is required for unit-prob")
    if args.y_file is None:
        raise MethodPreconditionError(
            "--y-file is required for unit-prob (n expressions in u-variables)"
        )
    lines = [
        ln.strip()
        for ln in Path(args.y_file).read_text(encoding="utf-8").splitlines()
        if ln.strip() and not ln.strip().startswith("#")
    ]
    return CharacteristicSpec(y=[parse_expr(ln) for ln in lines], epsilon=args.epsilon)


def _solve_ensemble(pr: SdaeProblem, args) -> tuple[Ensemble, dict]:
    info: dict = {}
    if args.method == "index1":
        sde = build_index1_sde(pr)
        ens = run_ensemble(sde, pr.init_point(), args.dt, args.t_end,
                           args.paths, args.seed, problem=pr)
    elif args.method == "picard":
        paths = []
        for k in range(args.paths):
            paths.append(
                picard_solve(pr, args.dt, args.t_end, iterations=args.iterations,
                             seed=derive_seed(args.seed, k), tol=args.tol)
            )
        ens = Ensemble(paths=paths, dt=args.dt, T=args.t_end,
                       base_seed=args.seed, problem=pr)
    elif args.method == "unit-prob":
        spec = _read_characteristic(args, pr)
        y_box = _parse_box(args.y_box) if args.y_box else None
        red = build_unit_prob_sde(pr, spec, box=y_box, grid_per_dim=args.y_grid)
        u0 = consistent_init(spec, pr)
        init = np.concatenate([pr.x0, u0])
        ens = run_ensemble(red.sde(), init, args.dt, args.t_end,
                           args.paths, args.seed, problem=pr)
        info["epsilon"] = spec.epsilon
    else:  # bounded
        if args.epsilon is None or args.alpha is None or args.box is None:
            raise MethodPreconditionError(
                "--epsilon, --alpha and --box are required for bounded"
            )
        cfg = BoundedMConfig(
            epsilon=args.epsilon, alpha=args.alpha, box=_parse_box(args.box),
            grid_per_dim=args.grid, b=args.b,
        )
        cfg = resolve_config(pr, cfg)
        ens = run_bounded_ensemble(pr, cfg, args.dt, args.t_end, args.paths,
                                   args.seed, SolveMode(args.mode))
        info.update(
            epsilon=cfg.epsilon,
            b=cfg.b,
            J_raw=cfg.J_raw,
            J_inflated=cfg.J_inflated,
            threshold=gain_threshold(cfg.J_raw, cfg.epsilon, cfg.alpha),
        )
    return ens, info


_MANIFEST_KEYS = (
    "method", "dt", "t_end", "seed", "paths", "save_paths", "threads",
    "epsilon", "alpha", "box", "grid", "b", "mode",
    "y_file", "y_box", "y_grid", "iterations", "tol",
)


def _cmd_solve(args) -> int:
    pr = _load(args.file)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ens, info = _solve_ensemble(pr, args)

    canonical = print_problem(pr)
    (out_dir / "problem.sdae").write_text(canonical, encoding="utf-8")
    outputs = ["problem.sdae"]

    epsilon = info.get("epsilon", args.epsilon if args.epsilon else float("inf"))
    report = violation_stats(pr, ens, epsilon,
                             b=info.get("b"), J=info.get("J_raw"))
    with open(out_dir / "report.csv", "w", encoding="utf-8") as fh:
        write_report_csv(report, fh)
    outputs.append("report.csv")

    (out_dir / "paths").mkdir(exist_ok=True)
    for k, path in enumerate(ens.paths[: args.save_paths]):
        lam = constraint_process(pr, path)
        rel = f"paths/path_{k:05d}.csv"
        with open(out_dir / rel, "w", encoding="utf-8") as fh:
            write_path_csv(path, lam, fh)
        outputs.append(rel)

    manifest = {
        "tool": "sdae",
        "version": __version__,
        "subcommand": "solve",
        "args": {key: getattr(args, key) for key in _MANIFEST_KEYS},
        "problem_sha256": hashlib.sha256(canonical.encode()).hexdigest(),
        "base_seed": args.seed,
        "outputs": outputs,
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")

    completed = sum(1 for p in ens.paths if p.status.completed)
    print(f"method {args.method}: {len(ens.paths)} path(s), {completed} completed")
    if "b" in info:
        print(
            f"gain b = {info['b']:g} (threshold J/(2 eps^2 alpha) = "
            f"{info['threshold']:g}, J raw = {info['J_raw']:g}, "
            f"inflated = {info['J_inflated']:g})"
        )
    if np.isfinite(epsilon):
        print(f"max empirical P(|lambda| > {epsilon:g}) = {np.nanmax(report.empirical_p):.4f}")
    print(f"outputs in {out_dir}")
    return EXIT_OK


def _cmd_verify_bound(args) -> int:
    run_dir = Path(args.dir)
    manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
    stored = manifest["args"]
    if stored.get("method") != "bounded":
        raise MethodPreconditionError(
            "verify-bound needs a run produced by solve --method bounded"
        )
    ns = argparse.Namespace(**stored)
    ns.file = str(run_dir / "problem.sdae")
    pr = _load(ns.file)
    cfg = BoundedMConfig(
        epsilon=args.epsilon, alpha=args.alpha, box=_parse_box(ns.box),
        grid_per_dim=ns.grid, b=ns.b,
    )
    cfg = resolve_config(pr, cfg)
    ens = run_bounded_ensemble(pr, cfg, ns.dt, ns.t_end, ns.paths,
                               manifest["base_seed"], SolveMode(ns.mode))
    report = violation_stats(pr, ens, args.epsilon, b=cfg.b, J=cfg.J_raw)
    with open(run_dir / "verify_report.csv", "w", encoding="utf-8") as fh:
        write_report_csv(report, fh)
    worst = float(np.nanmax(report.empirical_p))
    verdict = "satisfied" if worst <= args.alpha else "VIOLATED"
    print(
        f"P(|lambda(t)| > {args.epsilon:g}) <= {args.alpha:g}: {verdict} "
        f"(max empirical {worst:.4f} over {len(ens.paths)} paths)"
    )
    print(f"wrote {run_dir / 'verify_report.csv'}")
    return EXIT_OK


def _cmd_builtin(args) -> int:
    pr = builtin(args.name)
    text = print_problem(pr)
    if args.emit:
        out = Path(args.out) if args.out else Path(f"{args.name}.sdae")
        out.write_text(text, encoding="utf-8")
        print(f"wrote {out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _cmd_rerun(args) -> int:
    manifest_path = Path(args.manifest)
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("subcommand") != "solve":
        raise MethodPreconditionError("manifest does not describe a solve run")
    ns = argparse.Namespace(**manifest["args"])
    ns.file = str(manifest_path.parent / "problem.sdae")
    ns.out = args.out
    ns.seed = manifest["base_seed"]
    return _cmd_solve(ns)


# ---------------------------------------------------------------------------
# entry points
# ---------------------------------------------------------------------------

_DISPATCH = {
    "classify": _cmd_classify,
    "check": _cmd_check,
    "reduce": _cmd_reduce,
    "solve": _cmd_solve,
    "verify-bound": _cmd_verify_bound,
    "builtin": _cmd_builtin,
    "rerun": _cmd_rerun,
}


def _preprocess_argv(argv: list[str]) -> list[str]:
    """Glue values onto flags that may start with '-' (negative box bounds)."""
    out: list[str] = []
    skip = False
    for i, tok in enumerate(argv):
        if skip:
            skip = False
            continue
        if tok in _GLUED_FLAGS and i + 1 < len(argv):
            out.append(f"{tok}={argv[i + 1]}")
            skip = True
        else:
            out.append(tok)
    return out


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(_preprocess_argv(argv))
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    threads = getattr(args, "threads", None)
    if threads is None and os.environ.get("SDAE_THREADS"):
        try:
            threads = int(os.environ["SDAE_THREADS"])
        except ValueError:
            threads = None
    if hasattr(args, "threads"):
        args.threads = threads  # recorded in the manifest; results do not depend on it
    try:
        return _DISPATCH[args.subcommand](args)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROBLEM if isinstance(exc, FileNotFoundError) else EXIT_USAGE
    except _ProblemLoadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROBLEM
    except MethodPreconditionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except SdaeError as exc:
        from .errors import (
            DimensionMismatchError,
            ExpressionParseError,
            ProblemFormatError,
            UnknownBuiltinError,
        )

        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc, (ProblemFormatError, ExpressionParseError, UnknownBuiltinError)):
            return EXIT_PROBLEM
        if isinstance(exc, DimensionMismatchError):
            return EXIT_PRECONDITION  # solver-level m != p and similar
        return EXIT_RUNTIME


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
