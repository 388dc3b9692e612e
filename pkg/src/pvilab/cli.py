"""Command line front end.

Every subcommand writes its outputs and a ``manifest.txt`` (flags, library
versions, seed) into ``--out-dir``.  A ``--config`` file of ``key=value``
lines supplies defaults for the same flags; explicit flags win.

Exit status: 0 on success, 1 when a verification fails, 2 on usage errors.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

__all__ = ["main", "build_parser", "read_config"]

log = logging.getLogger("pvilab")

MODES = ("h-uniform", "h-adaptive", "p-uniform")


class UsageError(Exception):
    pass


def read_config(path) -> dict:
    """Flat ``key=value`` file; ``#`` starts a comment, dashes equal underscores."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            k, v = (s.strip() for s in line.split("=", 1))
            out[k.lstrip("-").replace("-", "_")] = v
    return out


def _int_list(text):
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file with defaults for these flags")
    common.add_argument("--out-dir", default="results", help="output directory (default: %(default)s)")
    common.add_argument("--seed", type=int, default=7)
    common.add_argument("--threads", type=int, default=1, help="worker cap for parallel parts")
    common.add_argument("--verbose", "-v", action="store_true")
    common.add_argument("--tol", type=float, default=1e-10, help="solver tolerance (relative)")
    common.add_argument("--max-iter", type=int, default=100)
    common.add_argument("--radius", type=float, default=1.5)

    parser = argparse.ArgumentParser(
        prog="pvilab",
        description="Obstacle problems with quadrature-perturbed higher-order finite elements.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    s = sub.add_parser("solve", parents=[common], help="one obstacle solve on a uniform disk mesh")
    s.add_argument("--p", type=int, default=2)
    s.add_argument("--q", type=int, help="Gauss points per direction (default p + q-offset)")
    s.add_argument("--q-offset", type=int, default=11)
    s.add_argument("--levels", type=int, default=2, help="uniform refinements of the initial mesh")
    s.add_argument("--export-matrix", action="store_true", help="also write the stiffness triplets")

    s = sub.add_parser("study", parents=[common], help="convergence campaign")
    s.add_argument("--mode", choices=MODES, default="h-uniform")
    s.add_argument("--p", type=int, default=1)
    s.add_argument("--q-offset", type=_int_list, default=[11],
                   help="one offset j (q = p + j) or a comma-separated list")
    s.add_argument("--levels", type=int, default=5)
    s.add_argument("--theta", type=float, default=0.5)
    s.add_argument("--max-dofs", type=int, help="stop before a level exceeds this many unknowns")
    s.add_argument("--no-plots", action="store_true")

    s = sub.add_parser("spectrum", parents=[common], help="extreme eigenvalues against q")
    s.add_argument("--p", type=int, default=2)
    s.add_argument("--q", type=_int_list, help="point counts (default 1..p+11)")
    s.add_argument("--levels", type=int, default=1)

    s = sub.add_parser("verify-abstract", parents=[common], help="randomized abstract bound checks")
    s.add_argument("--trials", type=int, default=1000)

    s = sub.add_parser("verify-constrained", parents=[common], help="randomized condensation checks")
    s.add_argument("--trials", type=int, default=100)

    s = sub.add_parser("quadrature", parents=[common], help="rule tables and diagnostics")
    s.add_argument("--q", type=int, default=3)
    s.add_argument("--p", type=int, help="also report admissibility and c_p, d_p for degree p")
    return parser


def _parse(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            cfg = read_config(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        # convert through the same argument types, then let explicit flags win
        defaults = {}
        for a in sub._actions:
            if a.dest in cfg:
                v = cfg[a.dest]
                if isinstance(a, argparse._StoreTrueAction):
                    defaults[a.dest] = v.lower() in ("1", "true", "yes", "on")
                else:
                    defaults[a.dest] = a.type(v) if a.type else v
                    if a.choices and defaults[a.dest] not in a.choices:
                        raise UsageError(f"config value {v!r} not allowed for {a.dest}")
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
        args.config_overrides = ",".join(sorted(defaults))
    return args


def _versions():
    import matplotlib
    import scipy
    from . import __version__
    return {"python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "matplotlib": matplotlib.__version__, "pvilab": __version__}


def write_manifest(args, out: Path, extra=None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "manifest.txt"
    with open(path, "w") as fh:
        fh.write(f"command={args.command}\n")
        for k, v in sorted(vars(args).items()):
            if k == "command":
                continue
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            fh.write(f"{k}={v}\n")
        for k, v in _versions().items():
            fh.write(f"version.{k}={v}\n")
        for k, v in (extra or {}).items():
            fh.write(f"{k}={v}\n")
    return path


# -- subcommands -----------------------------------------------------------


def cmd_solve(args, out: Path) -> int:
    from .fem import assemble, build_space, export_triplets
    from .mesh import build_initial_disk_mesh, refine_uniform
    from .pdas import pdas_solve
    from .study import ExactRadialSolution, h1_error

    exact = ExactRadialSolution(R=args.radius)
    mesh = build_initial_disk_mesh(args.radius)
    for _ in range(args.levels):
        mesh = refine_uniform(mesh)
    space = build_space(mesh, args.p)
    q = args.q if args.q is not None else args.p + args.q_offset
    prob = assemble(space, exact.a, exact.f, q, psi=exact.psi)
    st = pdas_solve(prob, tol=args.tol, max_iter=args.max_iter, verbose=args.verbose)
    err, _ = h1_error(space, st.u, exact)
    pts = space.constraint_points
    with open(out / "solution.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("x", "y", "u", "psi", "active"))
        for (x, y), u, ps, a in zip(pts, st.u, prob.obstacle, st.active):
            w.writerow((f"{x:.16e}", f"{y:.16e}", f"{u:.16e}", f"{ps:.16e}", int(a)))
    with open(out / "active_set.txt", "w") as fh:
        fh.write("\n".join(str(i) for i in st.active_indices) + "\n")
    if args.export_matrix:
        with open(out / "stiffness.txt", "w") as fh:
            export_triplets(prob.K_mat, fh)
    print(f"p={args.p} q={q} level={args.levels} N={space.n_dofs} iterations={st.iteration} "
          f"active={int(st.active.sum())} h1_error={err:.6e}")
    return 0


def cmd_study(args, out: Path) -> int:
    from .plotting import plot_campaign
    from .study import StudyConfig, run_campaign, write_loglog, write_records

    offsets = args.q_offset
    cfg = StudyConfig(mode=args.mode, p=args.p, q_offset=offsets[0], levels=args.levels,
                      theta=args.theta, radius=args.radius, max_dofs=args.max_dofs,
                      tol=args.tol, max_iter=args.max_iter)

    def progress(level, N, err, dt):
        log.info("level %d  N=%d  |u - u_hp|=%.4e  (%.1fs)", level, N, err, dt)

    runs = run_campaign(cfg, offsets, progress=progress)
    for j, recs in runs.items():
        path = write_records(recs, out / cfg.filename(j))
        write_loglog(recs, out / path.name.replace(".csv", "_loglog.csv"))
        last = recs[-1]
        print(f"{path.name}: levels={len(recs)} N={last.N} eoc_total={last.eoc_total:.3f} "
              f"eoc_quad={last.eoc_quad:.3f}")
    if not args.no_plots:
        plot_campaign(runs, out / f"{cfg.tag}.png", title=f"{args.mode}, p = {args.p}")
    return 0


def cmd_spectrum(args, out: Path) -> int:
    from .fem import assemble, build_space, spectrum_report
    from .mesh import build_initial_disk_mesh, refine_uniform
    from .plotting import plot_spectrum

    mesh = build_initial_disk_mesh(args.radius)
    for _ in range(args.levels):
        mesh = refine_uniform(mesh)
    space = build_space(mesh, args.p)
    qs = args.q or list(range(1, args.p + 12))
    rows = []
    for q in qs:
        lo, hi = spectrum_report(assemble(space, 1.0, -2.0, q))
        definite = lo > 1e-10 * hi
        rows.append((q, lo, hi, definite))
        flag = "positive definite" if definite else "NOT positive definite"
        print(f"p={args.p} q={q} min_eig={lo:.6e} max_eig={hi:.6e} {flag}")
    with open(out / f"spectrum_p{args.p}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("q", "min_eig", "max_eig", "positive_definite"))
        for q, lo, hi, d in rows:
            w.writerow((q, f"{lo:.16e}", f"{hi:.16e}", int(d)))
    if len(rows) > 1:
        plot_spectrum(rows, out / f"spectrum_p{args.p}.png", args.p)
    return 0


def cmd_verify_abstract(args, out: Path) -> int:
    from .abstract_vi import run_abstract_suite, write_reports

    res = run_abstract_suite(trials=args.trials, seed=args.seed)
    failed = 0
    for name, reports in res.items():
        write_reports(out / f"{name}.csv", reports)
        bad = sum(not r.holds for r in reports)
        failed += bad
        print(f"{name}: {len(reports)} checks, {bad} violations")
    return 1 if failed else 0


def cmd_verify_constrained(args, out: Path) -> int:
    from .abstract_vi import run_constrained_suite, write_reports

    res = run_constrained_suite(trials=args.trials, seed=args.seed)
    write_reports(out / "constrained_bound.csv", res["bound"])
    checks = {
        "saddle_vs_condensed": max(res["agreement"]) <= 1e-10,
        "condensed_ellipticity": min(res["ellipticity"]) >= -1e-10,
        "galerkin_inverse_psd": min(res["psd"]) >= -1e-12,
        "galerkin_inverse_norm": min(res["norm"]) >= -1e-10,
        "combined_bound": all(r.holds for r in res["bound"]),
    }
    for k, ok in checks.items():
        print(f"{k}: {'ok' if ok else 'FAILED'}")
    return 0 if all(checks.values()) else 1


def cmd_quadrature(args, out: Path) -> int:
    from .quadrature import estimate_equivalence_constants, gauss_legendre, tensor_rule

    rule = gauss_legendre(args.q)
    path = out / f"gauss_q{args.q}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("node", "weight"))
        for x, wt in zip(rule.nodes, rule.weights):
            w.writerow((f"{x:.17g}", f"{wt:.17g}"))
    sys.stdout.write(path.read_text())
    if args.p is not None:
        rep = estimate_equivalence_constants(args.p, tensor_rule(args.q))
        print(f"p={rep.p} q={rep.q} admissible={rep.admissible} c_p={rep.c_p:.12g} d_p={rep.d_p:.12g}")
    return 0


COMMANDS = {
    "solve": cmd_solve,
    "study": cmd_study,
    "spectrum": cmd_spectrum,
    "verify-abstract": cmd_verify_abstract,
    "verify-constrained": cmd_verify_constrained,
    "quadrature": cmd_quadrature,
}


def main(argv=None) -> int:
    try:
        args = _parse(sys.argv[1:] if argv is None else argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"pvilab: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("pvilab: error: --threads must be >= 1", file=sys.stderr)
        return 2
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(args.threads))
    out = Path(args.out_dir)
    write_manifest(args, out)
    try:
        return COMMANDS[args.command](args, out)
    except ValueError as exc:
        print(f"pvilab: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
