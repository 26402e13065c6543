"""Command line entry point: ``protorep run|sweep|summarize|heatmap``.

Exit codes: 0 ok, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .mdp import ConfigurationError, MapParseError, make_environment, parse_grid_map
from .report import emit_heatmap, read_csv, with_ext

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _cmd_run(args) -> int:
    from .experiments import default_output, load_config, run_experiment, with_seeds

    cfg = load_config(args.config)
    if args.seeds is not None:
        cfg = with_seeds(cfg, args.seeds)
    out = Path(args.out) if args.out else default_output(cfg)
    run_experiment(cfg, out)
    print(out)
    return EXIT_OK


def _cmd_sweep(args) -> int:
    from .experiments import default_output, load_config, run_sweep

    cfg = load_config(args.config)
    out = Path(args.out) if args.out else default_output(cfg)
    report = run_sweep(cfg, out, n1=args.n1, n2=args.n2)
    print(json.dumps({"winner": report["winner"], "params": report["winner_params"],
                      "phase2": report["phase2"]}, sort_keys=True))
    return EXIT_OK


def _cmd_summarize(args) -> int:
    from .experiments import summarize_dir

    out = Path(args.dir)
    if not (out / "cells.json").exists():
        raise ConfigurationError(f"{out} is not a run directory (cells.json missing)")
    summarize_dir(out)
    print(out / "summary.csv")
    return EXIT_OK


def _load_map(arg: str):
    path = Path(arg)
    if path.exists():
        mdp = parse_grid_map(path.read_text())
    else:
        mdp = make_environment(arg)
    if mdp.grid is None:
        raise ConfigurationError(f"{arg} is not a grid map")
    return mdp


def _vector_from_csv(path: Path, n_states: int, kind: str | None):
    """A representation CSV (matrix, optional JSON sidecar) or a per-state vector CSV."""
    from .representations import load_representation, top_log_eigenvector

    if with_ext(path, ".json").exists():
        rep = load_representation(path)
        return top_log_eigenvector(rep, kind=kind or rep.kind).top_eigenvector
    rows = read_csv(path)
    if rows and "value" in rows[0]:
        if "state" in rows[0]:
            vec = np.zeros(n_states)
            for r in rows:
                vec[int(r["state"])] = float(r["value"])
            return vec
        return None
    mat = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    return top_log_eigenvector(mat, kind=kind or "DR").top_eigenvector


def _cmd_heatmap(args) -> int:
    from .report import read_heatmap_csv

    mdp = _load_map(args.map)
    src = Path(args.repr)
    if not src.exists():
        raise ConfigurationError(f"no such file: {src}")
    vec = _vector_from_csv(src, mdp.n_states, args.kind)
    if vec is None:
        vec = read_heatmap_csv(src, mdp.grid)
    if len(vec) != mdp.n_states:
        raise ConfigurationError(f"{src} has {len(vec)} states but the map has {mdp.n_states}")
    out = Path(args.out) if args.out else src.with_name(src.stem + "_heatmap")
    csv_path, svg_path = emit_heatmap(vec, mdp.grid, out)
    print(svg_path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protorep", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run every grid cell of a config for its seed count")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (overrides the config's 'output')")
    p.add_argument("--seeds", type=int, help="override the seed count")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("sweep", help="two-phase grid search: n1 seeds per cell, winner rerun with n2")
    p.add_argument("config")
    p.add_argument("--out")
    p.add_argument("--n1", type=int)
    p.add_argument("--n2", type=int)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("summarize", help="recompute summary.csv from raw CSVs")
    p.add_argument("dir")
    p.set_defaults(func=_cmd_summarize)

    p = sub.add_parser("heatmap", help="SVG + CSV heatmap of a representation's top eigenvector")
    p.add_argument("repr", help="representation CSV, or a vector CSV with state,value columns")
    p.add_argument("map", help="shipped environment name or a map file")
    p.add_argument("--out", help="output path prefix")
    p.add_argument("--kind", choices=["SR", "DR", "DR_SA", "MER"], help="representation kind")
    p.set_defaults(func=_cmd_heatmap)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, MapParseError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArithmeticError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
