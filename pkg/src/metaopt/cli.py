"""Command line entry point: ``metaopt run-inner|run-meta|eval|bound|report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .bounds import BoundDomainError, BoundQuery, theorem1_bound
from .engine import EngineError
from .harness import ConfigError, ReportError, RunRecord, cli_run, load_config, report_render

log = logging.getLogger("metaopt")


def _bound(args: argparse.Namespace) -> int:
    params: dict = {}
    if args.config:
        params = yaml.safe_load(Path(args.config).read_text(encoding="utf-8")) or {}
        params = params.get("bound", params)
    for key in ("n", "m", "delta", "r_star"):
        value = getattr(args, key)
        if value is not None:
            params[key] = value
    missing = [k for k in ("n", "m", "delta") if k not in params]
    if missing:
        raise ConfigError(f"bound needs {missing} (flags or config)")
    q = BoundQuery(int(params["n"]), int(params["m"]), float(params["delta"]),
                   None if params.get("r_star") is None else float(params["r_star"]))
    r = theorem1_bound(q)
    print("quantity\tvalue")
    print(f"n\t{q.n}\nm\t{q.m}\ndelta\t{q.delta}")
    print(f"epsilon_n\t{r.epsilon_n:.12g}")
    print(f"epsilon_m\t{r.epsilon_m:.12g}")
    print(f"r_star\t{r.r_star:.12g}")
    print(f"bound_rhs\t{r.bound_rhs:.12g}")
    print(f"convention\t{r.convention}")
    return 0


def _report(args: argparse.Namespace) -> int:
    prices = {}
    out = Path(args.out) if args.out else None
    if args.config:
        cfg = load_config(args.config)
        prices = cfg.prices
        out = out or cfg.path(cfg.output_dir) / "report"
    if not args.runs:
        raise ReportError("report needs at least one run directory")
    records = [RunRecord.from_dir(p) for p in args.runs]
    out = out or Path("report")
    report = report_render(records, out, prices=prices or None)
    print((out / "report.txt").read_text(encoding="utf-8"), end="")
    for fig in report["figures"]:
        print(f"figure\t{fig}")
    return 0


def _run(args: argparse.Namespace) -> int:
    if not args.config:
        raise ConfigError(f"{args.command} needs --config")
    cfg = load_config(args.config)
    seeds = [args.seed] if args.seed is not None else None
    outcome = cli_run(args.command, cfg, live=args.live, seeds=seeds)
    print((outcome.run_dir / "summary.txt").read_text(encoding="utf-8"), end="")
    print(f"run_dir\t{outcome.run_dir}")
    if outcome.exit_code:
        print("run incomplete; see events.jsonl", file=sys.stderr)
    return outcome.exit_code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metaopt", description="Optimize text programs and their optimizers.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("run-inner", "run one optimizer on a program"),
                       ("run-meta", "optimize the optimizer"),
                       ("eval", "evaluate a program without optimizing")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, help="run only this seed")
        p.add_argument("--live", action="store_true", help="allow paid network engines")
    b = sub.add_parser("bound", help="evaluate the generalization bound")
    b.add_argument("--config")
    b.add_argument("--n", type=int)
    b.add_argument("--m", type=int)
    b.add_argument("--delta", type=float)
    b.add_argument("--r-star", dest="r_star", type=float)
    b.add_argument("--seed", type=int, help="ignored")
    b.add_argument("--live", action="store_true", help="ignored")
    r = sub.add_parser("report", help="render tables and figures from run directories")
    r.add_argument("runs", nargs="*")
    r.add_argument("--config")
    r.add_argument("--out")
    r.add_argument("--seed", type=int, help="ignored")
    r.add_argument("--live", action="store_true", help="ignored")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"bound": _bound, "report": _report}
    try:
        return handlers.get(args.command, _run)(args)
    except (ConfigError, ReportError, BoundDomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except EngineError as exc:
        print(f"engine error: {exc}", file=sys.stderr)
        return 3
    except json.JSONDecodeError as exc:
        print(f"error: bad JSON: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
