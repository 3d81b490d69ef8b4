"""Command-line interface: ``vlhmm simulate | estimate | experiment | verify``.

Every command writes its artefacts plus one ``manifest.json`` into ``--out``.
Exit codes: 0 success, 1 failed verification, 2 bad data or configuration,
64 usage error, 70 internal error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
import traceback
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .emissions import FAMILIES, sample
from .errors import ConfigError, DataError, VLHMMError
from .inference import FullParams, state_cap
from .io import dumps, file_sha256, read_observations, write_csv, write_json
from .ktbound import check_prop1, check_prop4
from .selection import (
    EXPERIMENT_COLUMNS,
    ExperimentConfig,
    Penalty,
    experiment_plan,
    prune_search,
    run_experiment,
)
from .vlmc import simulate_states

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_DATA = 2
EXIT_USAGE = 64
EXIT_INTERNAL = 70

log = logging.getLogger("vlhmm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


class Manifest:
    """Provenance record written next to the outputs of one command."""

    def __init__(self, command: str, argv: list[str], config_hash: str, seed):
        self.data = {
            "command": command,
            "argv": argv,
            "config_sha256": config_hash,
            "seed": seed,
            "version": __version__,
            "started_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "warnings": [],
            "outputs": {},
        }
        self._start = time.perf_counter()

    def warn(self, messages):
        for m in messages:
            if m not in self.data["warnings"]:
                self.data["warnings"].append(m)

    def output(self, path: Path):
        self.data["outputs"][Path(path).name] = file_sha256(path)

    def write(self, out: Path) -> Path:
        self.data["wall_clock_seconds"] = round(time.perf_counter() - self._start, 3)
        return write_json(out / "manifest.json", self.data)


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _load_json(path: Path) -> tuple[dict, str]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return data, hashlib.sha256(raw).hexdigest()


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# simulate


def load_simulation_config(data: dict) -> tuple[FullParams, int, int]:
    """Simulation config: the experiment's model fields plus ``n`` and ``seed``."""
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object")
    for name in ("n", "seed"):
        v = data.get(name)
        if not isinstance(v, int) or isinstance(v, bool) or v < (1 if name == "n" else 0):
            raise ConfigError(f"config.{name}: expected a {'positive' if name == 'n' else 'non-negative'} integer, got {v!r}")
    model = {key: data[key] for key in ("true_tree", "true_transitions", "emission_family", "emission_truth")
             if key in data}
    model.update(n_grid=[max(2, data["n"])], penalties=[{"kind": "bic"}], replications=1, seed=data["seed"])
    cfg = ExperimentConfig.from_json(model)
    return FullParams(cfg.true_transitions, cfg.emission_truth), data["n"], data["seed"]


def cmd_simulate(args) -> int:
    data, digest = _load_json(args.config)
    params, n, seed = load_simulation_config(data)
    out = _out_dir(args.out)
    manifest = Manifest("simulate", args.argv, digest, seed)
    rng = np.random.default_rng(seed)
    x = simulate_states(params.transitions, n, rng)
    y = np.atleast_1d(sample(params.emissions, x, rng))
    manifest.output(write_csv(out / "y.csv", ["y"], ([v] for v in y)))
    manifest.output(write_csv(out / "states.csv", ["x"], ([int(v)] for v in x)))
    manifest.write(out)
    print(f"wrote {n} observations to {out / 'y.csv'}")
    return EXIT_OK


# estimate


def cmd_estimate(args) -> int:
    y = read_observations(args.data)
    out = _out_dir(args.out)
    pen = Penalty(args.penalty, args.k, args.alpha if args.penalty == "alpha" else None)
    options = {
        "data_sha256": file_sha256(args.data),
        "k": args.k,
        "family": args.family,
        "penalty": pen.to_json(),
        "t_EM": args.t_em,
        "seed": args.seed,
        "max_em_iters": args.max_em_iters,
        "depth": args.depth,
        "refine_em": args.refine_em,
        "variance": args.variance,
    }
    manifest = Manifest("estimate", args.argv, _sha(dumps(options)), args.seed)
    result = prune_search(y, args.k, args.family, pen, args.t_em, args.seed, args.max_em_iters, args.depth,
                          args.refine_em, variance=args.variance)
    manifest.warn(result.meta.get("warnings", []))
    manifest.output(write_json(out / "tree.json", result.tree.to_json()))
    manifest.output(write_json(out / "params.json", result.params.to_json()))
    manifest.output(write_json(out / "score.json", {
        "loglik": result.loglik,
        "penalty": result.penalty,
        "penalty_kind": pen.label,
        "score": result.score,
        "tree_size": result.tree.size,
        "depth": result.meta["depth"],
        "n": int(y.size),
        "em_iterations": result.meta["em_iterations"],
        "em_converged": result.meta["em_converged"],
        "candidates_tested": result.meta["tested"],
        "prunes_accepted": result.meta["accepted"],
    }))
    if args.debug:
        trace = result.meta.get("loglik_trace", [])
        manifest.output(write_csv(out / "loglik_trace.csv", ["iteration", "loglik"], enumerate(trace)))
    manifest.write(out)
    print(f"selected tree {list(result.tree.leaves)} (score {result.score:.6g})")
    return EXIT_OK


# experiment


def cmd_experiment(args) -> int:
    data, digest = _load_json(args.config)
    if args.refine_em is not None:
        data = dict(data, refine_em=args.refine_em)
    config = ExperimentConfig.from_json(data)
    plan = experiment_plan(config)
    if args.dry_run:
        labels = ",".join(p.label for p in config.penalties)
        for cell in plan:
            print(f"n={cell.n} m1={cell.m1:g} replication={cell.replication} "
                  f"seed={cell.seed(config.seed)} penalties={labels}")
        print(f"{len(plan)} cells, {len(plan) * len(config.penalties)} result rows")
        return EXIT_OK
    out = _out_dir(args.out)
    manifest = Manifest("experiment", args.argv, digest, config.seed)
    cap = config.state_cap if config.state_cap is not None else state_cap()
    manifest.data["state_cap"] = cap
    report = run_experiment(config, jobs=args.jobs)
    manifest.warn(report.warnings())
    manifest.output(write_csv(out / "results.csv", EXPERIMENT_COLUMNS, report.csv_rows()))
    header, rows = report.table("tree_size")
    manifest.output(write_csv(out / "table_tree_size.csv", header, rows))
    header, rows = report.table("score_diff")
    manifest.output(write_csv(out / "table_score_diff.csv", header, rows))
    manifest.output(write_json(out / "summary.json", report.summary()))
    manifest.write(out)
    for cell in report.summary()["recovery_rate_by_cell"]:
        print(f"n={cell['n']} m1={cell['m1']:g} {cell['penalty']}: recovery {cell['recovery_rate']:.2f}, "
              f"median size {cell['median_tree_size']:g}")
    return EXIT_OK


# verify


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 2:
        raise argparse.ArgumentTypeError("expected integers >= 2")
    return values


def cmd_verify(args) -> int:
    out = _out_dir(args.out)
    options = {"which": args.which, "seed": args.seed, "trials": args.trials, "max_n": args.max_n,
               "n_grid": args.n_grid, "seeds": args.seeds}
    manifest = Manifest("verify", args.argv, _sha(dumps(options)), args.seed)
    if args.which == "prop1":
        report = check_prop1(args.trials, args.seed, max_n=args.max_n)
        status = EXIT_OK if report["negative_margins"] == 0 else EXIT_VERIFY_FAILED
        print(f"prop1: {report['instances']} instances, min margin {report['min_margin']:.6g}")
    else:
        report = check_prop4(args.n_grid, range(args.seed, args.seed + args.seeds))
        status = EXIT_OK
        for n, r in report["mean_ratio_by_n"].items():
            print(f"prop4: n={n} ratio {r:.4f}")
    manifest.output(write_json(out / f"{args.which}.json", report))
    manifest.write(out)
    return status


# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vlhmm", description="Context-tree estimation for variable length hidden Markov models.")
    parser.add_argument("--version", action="version", version=f"vlhmm {__version__}")
    parser.add_argument("--debug", action="store_true", help="verbose logging, tracebacks and EM traces")
    common = _Parser(add_help=False)
    common.add_argument("--debug", action="store_true", default=argparse.SUPPRESS,
                        help="verbose logging, tracebacks and EM traces")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="simulate a VLHMM sample from a JSON config")
    p.add_argument("config", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", parents=[common], help="select a context tree for observed data")
    p.add_argument("data", type=Path, help="CSV with a 'y' column, or one number per line")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--penalty", choices=["bic", "alpha"], default="bic")
    p.add_argument("--alpha", type=float, default=5.1)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--family", choices=FAMILIES, default="gaussian-shared-var")
    p.add_argument("--variance", type=float, default=None, help="known variance (gaussian-known-var)")
    p.add_argument("--t-em", type=float, default=1e-3)
    p.add_argument("--max-em-iters", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--depth", type=int, default=None, help="override M = floor(log n)")
    p.add_argument("--refine-em", type=int, default=0, metavar="ITERS",
                   help="EM iterations to refine every candidate tree before scoring")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("experiment", parents=[common], help="run a simulation study from a JSON config")
    p.add_argument("config", type=Path)
    p.add_argument("--out", type=Path, default=Path("experiment-out"))
    p.add_argument("--jobs", type=int, default=len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity")
                   else (os.cpu_count() or 1))
    p.add_argument("--dry-run", action="store_true", help="print the cell plan and exit")
    p.add_argument("--refine-em", type=int, default=None, metavar="ITERS")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("verify", parents=[common], help="numeric checks of the mixture bounds")
    p.add_argument("which", choices=["prop1", "prop4"])
    p.add_argument("--out", type=Path, default=Path("verify-out"))
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--max-n", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-grid", type=_int_list, default=[50, 100, 200, 400])
    p.add_argument("--seeds", type=int, default=8, help="samples per grid point (prop4)")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.DEBUG if args.debug else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except VLHMMError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - last-resort handler for the exit-code contract
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.debug:
            traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
