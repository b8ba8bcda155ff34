"""Command-line front end: ``wplab <subcommand> [options]``.

Global options come before the subcommand.  Tables are written to
``<out>/<subcommand>.<format>``; ``accept`` prints its report to stdout.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import harness as H
from .fields import ParameterError, make_rng

_COMMANDS = ("propagate", "wavepacket", "partition", "broad", "wolff", "pconf", "sweep", "accept")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wplab", description="Wave packet and local smoothing experiments.")
    ap.add_argument("--config", help="flat key = value file (ExperimentParams / SweepConfig names)")
    ap.add_argument("--seed", type=int, help="base seed (overrides the config file)")
    ap.add_argument("--out", default=".", help="output directory for tables")
    ap.add_argument("--threads", type=int, default=1, help="worker threads")
    ap.add_argument("--format", choices=("csv", "json"), default="csv")
    sub = ap.add_subparsers(dest="command", required=True, metavar="{" + ",".join(_COMMANDS) + "}")

    p = sub.add_parser("propagate", help="fractional Schrodinger evolution of sweep data")
    p.add_argument("--times", default="0,0.5,1", help="comma separated times in units of R")
    p.add_argument("--trial", type=int, default=0)

    p = sub.add_parser("wavepacket", help="wave packet decomposition of seeded data (n = 3)")
    p.add_argument("--r", type=float, default=64.0)
    p.add_argument("--top", type=int, default=20, help="packets listed, by norm")

    p = sub.add_parser("partition", help="polynomial partitioning of a Gaussian-mixture cloud")
    p.add_argument("--points", type=int, default=100_000)

    p = sub.add_parser("broad", help="broad-narrow and bilinear terms on seeded data")
    p.add_argument("--npts", type=int, default=256)

    p = sub.add_parser("wolff", help="slice Wolff area estimate")
    p.add_argument("--variety", help="variety text file; default uses --surface")
    p.add_argument("--surface", choices=("plane", "sphere", "saddle"), default="plane")
    p.add_argument("--r", type=float, default=16.0)
    p.add_argument("--samples", type=int, default=20000)

    sub.add_parser("pconf", help="pseudo-conformal chain check")
    sub.add_parser("sweep", help="dyadic-R local smoothing sweep")

    p = sub.add_parser("accept", help="run an acceptance suite")
    p.add_argument("suite", nargs="?", default="all", help="all, " + ", ".join(H.SUITE_ORDER))
    return ap


def _write(args, name, rows, seed, columns=None):
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"{name}.{args.format}")
    if args.format == "json":
        text = H.to_json(rows, seed, command=name)
    else:
        cols = columns or (tuple(rows[0].keys()) if rows else ("empty",))
        text = H.to_csv(rows, seed, cols)
    with open(path, "w") as fh:
        fh.write(text)
    print(path)


def _cmd_propagate(args, cfg, params, seed):
    from .extension import littlewood_paley_project, slice_transform
    from .fields import fractional
    sc = H.sweep_from(dict(cfg, seed=seed))
    R = params.R
    g = H.sweep_data(sc, R, args.trial)
    if sc.alpha < 1:
        g = littlewood_paley_project(g, 1.0)
    surf = fractional(sc.alpha, sc.n)
    M = int(round(4 * R / H.SWEEP_HX))
    dx = 1.0 / (M * g.h)
    rows = []
    for s in (float(v) for v in args.times.split(",")):
        F = slice_transform(g, surf, s * R, M)
        rows.append(dict(t=s * R, l2=float(np.sqrt(np.sum(np.abs(F) ** 2) * dx ** g.d)),
                         lp=float(np.sum(np.abs(F) ** sc.p) * dx ** g.d) ** (1 / sc.p),
                         sup=float(np.abs(F).max())))
    return "propagate", rows


def _cmd_wavepacket(args, cfg, params, seed):
    from .wavepackets import decompose, reconstruction_residual
    f = H._gauss_atoms(seed, args.r, 1.0 / (4 * args.r))
    w = decompose(f, args.r, params.delta)
    nr = w.packet_norms()
    res = reconstruction_residual(f, w)
    rows = []
    for k in sorted(nr, key=lambda k: (-nr[k], k))[: args.top]:
        c = w.caps[k[0]].cap.center
        v = w.v_of[k[1]]
        rows.append(dict(cap1=float(c[0]), cap2=float(c[1]), v1=float(v[0]), v2=float(v[1]),
                         norm=nr[k], packets=len(w), residual=res))
    return "wavepacket", rows


def _cmd_partition(args, cfg, params, seed):
    from .partition import partition
    R = params.R
    X = H._mixture(seed, R, args.points)
    P, cs = partition(X, params.D, R=R, delta=params.delta, seed=seed)
    rows = [dict(label=" ".join(map(str, c.label)), mass=c.mass, c1=float(c.center[0]),
                 c2=float(c.center[1]), c3=float(c.center[2]), radius=c.radius,
                 retained=int(i in cs.retained), degree=P.total_degree)
            for i, c in enumerate(cs.cells)]
    return "partition", rows


def _cmd_broad(args, cfg, params, seed):
    from .broad import bilinear_term, broad_function, broad_narrow_check, cap_extensions
    from .fields import paraboloid
    S = paraboloid(3)
    K = params.K
    a = K ** -params.eps
    R = params.R
    f = H._broad_field(seed, 1.0 / (8 * R))
    rng = make_rng(seed, 62)
    pts = np.column_stack([rng.uniform(-R, R, (args.npts, 2)), rng.uniform(0, R, args.npts)])
    Ef = cap_extensions(f, S, K, pts).sum(0)
    br = broad_function(f, S, a, K, pts)
    rows = [dict(K=K, alpha_broad=a, max_Ef=float(np.abs(Ef).max()), broad_fraction=float(np.mean(br != 0)),
                 broad_narrow_gap=broad_narrow_check(f, S, a, K, pts),
                 max_bilinear=float(bilinear_term(f, S, K, pts).max()) if K >= 4 else float("nan"))]
    return "broad", rows


def _cmd_wolff(args, cfg, params, seed):
    from . import tubes as T
    r = args.r
    if args.variety:
        with open(args.variety) as fh:
            S = T.Variety.from_text(fh.read())
    else:
        S = {"plane": lambda: T.plane([1, 0, 0]), "sphere": lambda: T.sphere([0, 0, 0], r / 2),
             "saddle": lambda: T.saddle(r, axis=0)}[args.surface]()
    area, se, ratio = T.slice_wolff_estimate(S, params.R, r, delta=params.delta, samples=args.samples, seed=seed)
    return "wolff", [dict(R=params.R, r=r, a=0.0, area_estimate=area, std_error=se, bound_ratio=ratio)]


def _cmd_pconf(args, cfg, params, seed):
    from .pseudoconformal import KernelSpec, pseudo_conformal_chain_check, random_data
    R = params.R
    spec = KernelSpec(params.alpha, params.n)
    f = random_data(seed, params.n - 1, [R / 2] * (params.n - 1), 1.0)
    rep = pseudo_conformal_chain_check(f, R, spec, p=params.p, seed=seed)
    return "pconf", [dict(name=c.name, value=c.value, contract=c.contract, passed=int(c.passed)) for c in rep]


def _cmd_sweep(args, cfg, params, seed):
    sc = H.sweep_from(dict(cfg, seed=seed))
    return "sweep", H.run_sweep(sc, args.threads)


def main(argv=None) -> int:
    ap = _parser()
    args = ap.parse_args(argv)
    if args.threads < 1:
        ap.error("--threads must be >= 1")
    try:
        cfg = H.load_config(args.config) if args.config else {}
    except (OSError, H.ConfigError) as exc:
        ap.error(str(exc))
    if args.seed is not None:
        cfg["seed"] = args.seed
    seed = int(cfg.get("seed", 0))
    if args.command == "accept":
        try:
            return H.run_acceptance(args.suite, seed=seed, threads=args.threads)
        except H.UsageError as exc:
            ap.error(str(exc))
    try:
        params = H.params_from(cfg)
        if args.command in ("propagate", "sweep"):
            H.sweep_from(cfg)
        fn = globals()["_cmd_" + args.command]
        name, rows = fn(args, cfg, params, seed)
    except (ParameterError, ValueError) as exc:
        print(f"wplab: error: {exc}", file=sys.stderr)
        return 1
    cols = H.COLUMNS if name == "sweep" else None
    _write(args, name, rows, seed, cols)
    return 0


if __name__ == "__main__":
    sys.exit(main())
