"""Experiment harness: configuration, per-seed runs, run records and reports."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import statistics
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from . import plotting
from .catalog import BUILTIN_PROGRAMS, single_call_program
from .engine import (
    API_KEY_ENV,
    LEVELS,
    CachedEngine,
    EchoEngine,
    Engine,
    EngineSet,
    HTTPEngine,
    ScriptedEngine,
    UsageLedger,
)
from .events import EventLog, read_events
from .meta import DEFAULT_INNER_ITERATIONS, DEFAULT_META_ITERATIONS, InnerRunner, run_metatextgrad, run_outer_loop
from .optimizers import OptimizerSpec, make_optimizer, run_inner_loop
from .program import Program, dump_program, load_program
from .tasks import GENERATORS, Metric, TaskDataset, evaluate_program, load_dataset

log = logging.getLogger(__name__)

CACHE_ENV = "METAOPT_CACHE_DIR"
COMMANDS = ("run-inner", "run-meta", "eval")
META_MODES = ("meta_prompt", "meta_structure", "metatextgrad")
OPTIMIZER_ALIASES = {
    "tgd": ("prompt_tgd", "TGD"),
    "prompt_tgd": ("prompt_tgd", "TGD"),
    "adas-tg": ("structure_search", "ADAS-TG"),
    "structure_search": ("structure_search", "ADAS-TG"),
}


class ConfigError(ValueError):
    pass


class ReportError(ValueError):
    pass


@dataclass
class RunConfig:
    task: dict[str, Any]
    metric: Metric
    program: Any
    optimizers: list[Any] = field(default_factory=lambda: ["TGD"])
    meta: str = "metatextgrad"
    iterations: int = DEFAULT_INNER_ITERATIONS
    meta_iterations: int = DEFAULT_META_ITERATIONS
    seeds: list[int] = field(default_factory=lambda: [0])
    parallelism: int = 1
    engines: dict[str, dict[str, Any]] = field(default_factory=lambda: {"default": {"kind": "echo"}})
    cache_dir: str | None = None
    output_dir: str = "runs"
    prices: dict[str, dict[str, float]] = field(default_factory=dict)
    method: str | None = None
    benchmark: str | None = None
    pseudocode_init: bool = False
    base_dir: Path = field(default_factory=Path.cwd, repr=False)

    def path(self, p: str | os.PathLike) -> Path:
        p = Path(os.path.expanduser(str(p)))
        return p if p.is_absolute() else self.base_dir / p

    def to_dict(self) -> dict[str, Any]:
        return {
            "task": self.task,
            "metric": self.metric.to_dict(),
            "program": self.program,
            "optimizers": self.optimizers,
            "meta": self.meta,
            "iterations": self.iterations,
            "meta_iterations": self.meta_iterations,
            "seeds": self.seeds,
            "parallelism": self.parallelism,
            "engines": self.engines,
            "method": self.method,
            "benchmark": self.benchmark,
            "pseudocode_init": self.pseudocode_init,
        }


def load_config(path: str | os.PathLike) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    return config_from_dict(data, base_dir=path.parent)


def config_from_dict(data: Mapping[str, Any], base_dir: str | os.PathLike | None = None) -> RunConfig:
    errors: list[str] = []
    known = set(RunConfig.__dataclass_fields__) - {"base_dir"}
    unknown = set(data) - known
    if unknown:
        errors.append(f"unknown config keys: {sorted(unknown)}")
    for key in ("task", "metric", "program"):
        if key not in data:
            errors.append(f"missing required key {key!r}")
    if errors:
        raise ConfigError("; ".join(errors))
    try:
        metric = Metric.from_dict(data["metric"] if isinstance(data["metric"], dict) else {"kind": data["metric"]})
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"metric: {exc}") from exc
    kwargs = {k: data[k] for k in known if k in data and k != "metric"}
    cfg = RunConfig(metric=metric, base_dir=Path(base_dir) if base_dir else Path.cwd(), **kwargs)
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    errors: list[str] = []
    if not cfg.seeds:
        errors.append("seeds must be non-empty")
    if not all(isinstance(s, int) for s in cfg.seeds):
        errors.append("seeds must be integers")
    if cfg.iterations < 1:
        errors.append("iterations must be >= 1")
    if cfg.meta_iterations < 1:
        errors.append("meta_iterations must be >= 1")
    if cfg.parallelism < 1:
        errors.append("parallelism must be >= 1")
    if cfg.meta not in META_MODES:
        errors.append(f"meta must be one of {META_MODES}")
    task = cfg.task
    if not isinstance(task, dict) or not (("dataset" in task) ^ ("generator" in task)):
        errors.append("task needs exactly one of 'dataset' or 'generator'")
    elif "dataset" in task and not cfg.path(task["dataset"]).exists():
        errors.append(f"dataset file {task['dataset']} does not exist")
    elif "generator" in task and task["generator"] not in GENERATORS:
        errors.append(f"unknown generator {task['generator']!r}")
    if isinstance(cfg.program, str) and cfg.program not in BUILTIN_PROGRAMS and not cfg.path(cfg.program).exists():
        errors.append(f"program {cfg.program!r} is neither a builtin nor an existing file")
    for o in cfg.optimizers:
        if isinstance(o, str) and o.lower() not in OPTIMIZER_ALIASES and not cfg.path(o).exists():
            errors.append(f"optimizer {o!r} is neither a known strategy nor an existing file")
    for level, ecfg in cfg.engines.items():
        if level not in LEVELS and level != "default":
            errors.append(f"engine binding for unknown level {level!r}")
            continue
        kind = ecfg.get("kind")
        if kind not in ("echo", "scripted", "http"):
            errors.append(f"engine {level}: unknown kind {kind!r}")
        if kind == "scripted" and not cfg.path(ecfg.get("transcript", "")).is_file():
            errors.append(f"engine {level}: transcript {ecfg.get('transcript')!r} does not exist")
        if kind == "http" and "model" not in ecfg:
            errors.append(f"engine {level}: http engine needs a model")
    if not any(k in cfg.engines for k in ("default", *LEVELS)):
        errors.append("no engines configured")
    missing = [lv for lv in LEVELS if lv not in cfg.engines and "default" not in cfg.engines]
    if missing:
        errors.append(f"no engine bound for level(s) {missing}")
    if errors:
        raise ConfigError("; ".join(errors))


# -- builders -----------------------------------------------------------------


def build_dataset(cfg: RunConfig) -> TaskDataset:
    task = cfg.task
    if "dataset" in task:
        return load_dataset(cfg.path(task["dataset"]))
    gen = GENERATORS[task["generator"]]
    return gen(int(task.get("n", 70)), int(task.get("seed", 0)), task.get("splits"))


def build_program(cfg: RunConfig) -> Program:
    p = cfg.program
    if isinstance(p, str):
        if p in BUILTIN_PROGRAMS:
            return BUILTIN_PROGRAMS[p]()
        return load_program(cfg.path(p).read_text(encoding="utf-8"))
    if isinstance(p, dict) and "prompt" in p:
        kwargs = {k: p[k] for k in ("task_description", "extract_pattern") if k in p}
        return single_call_program(p["prompt"], **kwargs)
    if isinstance(p, dict):
        return load_program(json.dumps(p))
    raise ConfigError(f"cannot build a program from {p!r}")


def build_optimizer(cfg: RunConfig, entry: Any) -> OptimizerSpec:
    if isinstance(entry, str):
        alias = OPTIMIZER_ALIASES.get(entry.lower())
        if alias is not None:
            return make_optimizer(alias[0], name=alias[1])
        return OptimizerSpec.loads(cfg.path(entry).read_text(encoding="utf-8"))
    return OptimizerSpec.from_dict(entry)


def _engine_from(cfg: RunConfig, ecfg: Mapping[str, Any], seed: int, live: bool) -> Engine:
    kind = ecfg["kind"]
    if kind == "echo":
        return EchoEngine()
    if kind == "scripted":
        return ScriptedEngine.from_file(cfg.path(ecfg["transcript"]), mode=ecfg.get("mode", "exact"))
    if not live:
        raise ConfigError("http engines make paid network calls; pass --live to enable them")
    key = os.environ.get(ecfg.get("api_key_env", API_KEY_ENV), "")
    if not key:
        raise ConfigError(f"--live needs an API key in ${ecfg.get('api_key_env', API_KEY_ENV)}")
    return HTTPEngine(ecfg["model"], endpoint=ecfg.get("endpoint", "https://api.openai.com/v1"), api_key=key)


@dataclass
class BuiltEngines:
    engines: EngineSet
    backends: list[Engine]

    def network_requests(self) -> int:
        return sum(b.ledger.total().requests for b in self.backends)


def build_engines(cfg: RunConfig, seed: int, live: bool = False) -> BuiltEngines:
    cache_dir = cfg.cache_dir or os.environ.get(CACHE_ENV)
    made: dict[str, Engine] = {}
    backends: list[Engine] = []

    def for_level(level: str) -> Engine:
        name = level if level in cfg.engines else "default"
        if name not in made:
            backend = _engine_from(cfg, cfg.engines[name], seed, live)
            backends.append(backend)
            made[name] = CachedEngine(backend, cfg.path(cache_dir)) if cache_dir else backend
        return made[name]

    return BuiltEngines(EngineSet(for_level("program"), for_level("optimizer"), for_level("meta")), backends)


# -- runs ---------------------------------------------------------------------


def next_run_dir(output_dir: str | os.PathLike) -> Path:
    """Create and return the next ``run-NNNN`` directory; existing runs are never reused."""
    root = Path(output_dir)
    root.mkdir(parents=True, exist_ok=True)
    taken = [int(p.name[4:]) for p in root.glob("run-*") if p.name[4:].isdigit()]
    n = max(taken, default=0) + 1
    while True:
        candidate = root / f"run-{n:04d}"
        try:
            candidate.mkdir()
            return candidate
        except FileExistsError:
            n += 1


def usage_levels(ledger: UsageLedger) -> dict[str, dict[str, int]]:
    """Token totals per level without cache statistics (those differ between cold and warm runs)."""
    out = {}
    for level, u in ledger.snapshot().items():
        out[level] = {"prompt_tokens": u.prompt_tokens, "completion_tokens": u.completion_tokens,
                      "total_tokens": u.total_tokens, "requests": u.requests}
    total = ledger.total()
    out["total"] = {"prompt_tokens": total.prompt_tokens, "completion_tokens": total.completion_tokens,
                    "total_tokens": total.total_tokens, "requests": total.requests}
    return out


def _mean_std(values: Sequence[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    mean = math.fsum(values) / len(values)
    std = statistics.pstdev(values) if len(values) > 1 else 0.0
    return mean, std


def default_method(command: str, cfg: RunConfig) -> str:
    if command == "eval":
        return "baseline"
    if cfg.method:
        return cfg.method
    if command == "run-inner":
        return build_optimizer(cfg, cfg.optimizers[0]).name
    return cfg.meta


def default_benchmark(cfg: RunConfig) -> str:
    if cfg.benchmark:
        return cfg.benchmark
    if "generator" in cfg.task:
        return cfg.task["generator"]
    return Path(cfg.task["dataset"]).stem


@dataclass
class RunOutcome:
    run_dir: Path
    summary: dict[str, Any]
    exit_code: int
    network_requests: int
    events: EventLog


def _run_seed(command: str, cfg: RunConfig, seed: int, dataset: TaskDataset, program: Program,
              engines: EngineSet, events: EventLog) -> tuple[Program, OptimizerSpec | None, float]:
    sealed = dataset.without("test")
    events.emit("test_sealed", seed=seed)
    if command == "eval":
        report = evaluate_program(program, sealed, "val", cfg.metric, engines.program, parallelism=cfg.parallelism)
        events.emit("evaluation", split="val", **report.summary())
        return program, None, report.mean_score
    if command == "run-inner":
        spec = build_optimizer(cfg, cfg.optimizers[0])
        result = run_inner_loop(spec, program, cfg.iterations, sealed, cfg.metric, engines, seed=seed,
                                events=events, parallelism=cfg.parallelism)
        return result.program, spec, result.score
    inputs = [build_optimizer(cfg, o) for o in cfg.optimizers]
    runner = InnerRunner(program, sealed, cfg.metric, engines, cfg.iterations, seed, events, cfg.parallelism)
    if cfg.meta == "metatextgrad":
        res = run_metatextgrad(inputs, cfg.meta_iterations, runner, pseudocode_init=cfg.pseudocode_init)
        best_spec, best_program, score = res.best_optimizer, res.best_program, res.best_score
    else:
        chosen = inputs[:1] if cfg.meta == "meta_prompt" else inputs
        out = run_outer_loop(cfg.meta, chosen, cfg.meta_iterations, runner, pseudocode_init=cfg.pseudocode_init)
        best_spec, best_program, score = out.best_optimizer, out.best_program, out.best_score
    if best_program is None:
        # pseudocode initialization never ran the winner; run it once to get its program
        result = runner(best_spec, "final")
        best_program, score = result.program, result.score
    return best_program, best_spec, score


def cli_run(command: str, cfg: RunConfig, *, live: bool = False, seeds: Sequence[int] | None = None) -> RunOutcome:
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    seeds = list(seeds) if seeds is not None else list(cfg.seeds)
    dataset = build_dataset(cfg)
    program = build_program(cfg)
    method, benchmark = default_method(command, cfg), default_benchmark(cfg)
    run_dir = next_run_dir(cfg.path(cfg.output_dir))
    events = EventLog(run_dir / "events.jsonl")
    events.emit("run_started", command=command, method=method, benchmark=benchmark, seeds=seeds,
                split_sizes=dataset.split_sizes(), config=cfg.to_dict())

    per_seed: list[dict[str, Any]] = []
    total_usage = UsageLedger()
    network = 0
    complete = True
    for seed in seeds:
        built = build_engines(cfg, seed, live)
        events.emit("seed_started", seed=seed)
        try:
            best_program, best_spec, val_score = _run_seed(command, cfg, seed, dataset, program, built.engines, events)
        except Exception as exc:
            log.exception("seed %s failed", seed)
            events.emit("run_incomplete", seed=seed, error=f"{type(exc).__name__}: {exc}")
            complete = False
            network += built.network_requests()
            break
        seed_dir = run_dir / f"seed-{seed}"
        seed_dir.mkdir()
        (seed_dir / "best_program.json").write_text(dump_program(best_program), encoding="utf-8")
        artifacts = {"program": f"seed-{seed}/best_program.json"}
        if best_spec is not None:
            (seed_dir / "best_optimizer.json").write_text(best_spec.dumps(), encoding="utf-8")
            artifacts["optimizer"] = f"seed-{seed}/best_optimizer.json"
        events.emit("final_artifact", seed=seed, val_score=val_score, **artifacts)

        test_score = None
        if dataset.split("test"):
            events.emit("test_unsealed", seed=seed)
            report = evaluate_program(best_program, dataset, "test", cfg.metric, built.engines.program,
                                      parallelism=cfg.parallelism)
            test_score = report.mean_score
            events.emit("test_evaluation", seed=seed, **report.summary())
        usage = built.engines.combined_usage()
        total_usage.merge(usage)
        network += built.network_requests()
        (seed_dir / "usage.json").write_text(json.dumps(usage_levels(usage), indent=2), encoding="utf-8")
        events.emit("usage", seed=seed, levels=usage_levels(usage))
        per_seed.append({"seed": seed, "val": val_score, "test": test_score, **artifacts})

    vals = [r["val"] for r in per_seed]
    tests = [r["test"] for r in per_seed if r["test"] is not None]
    val_mean, val_std = _mean_std(vals)
    test_mean, test_std = _mean_std(tests)
    summary = {
        "method": method,
        "benchmark": benchmark,
        "metric": cfg.metric.kind,
        "split_sizes": dataset.split_sizes(),
        "complete": complete,
        "per_seed": per_seed,
        "val_mean": val_mean,
        "val_std": val_std,
        "test_mean": test_mean,
        "test_std": test_std,
        "usage": usage_levels(total_usage),
        "prices": cfg.prices,
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    (run_dir / "summary.txt").write_text(format_summary(summary), encoding="utf-8")
    events.emit("run_completed", summary=summary)
    report_render([RunRecord.from_dir(run_dir)], run_dir / "report", prices=cfg.prices)
    return RunOutcome(run_dir, summary, 0 if complete else 2, network, events)


def format_summary(summary: Mapping[str, Any]) -> str:
    lines = [f"method: {summary['method']}    benchmark: {summary['benchmark']}    metric: {summary['metric']}", ""]
    lines.append(f"{'seed':>6}  {'val':>7}  {'test':>7}")
    for r in summary["per_seed"]:
        test = "-" if r["test"] is None else f"{r['test']:.4f}"
        lines.append(f"{r['seed']:>6}  {r['val']:>7.4f}  {test:>7}")
    lines.append(f"{'mean':>6}  {_fmt(summary['val_mean'])}  {_fmt(summary['test_mean'])}")
    lines.append(f"{'std':>6}  {_fmt(summary['val_std'])}  {_fmt(summary['test_std'])}")
    lines += ["", f"{'level':<10} {'tokens':>12} {'requests':>9}"]
    for level in (*LEVELS, "total"):
        u = summary["usage"][level]
        lines.append(f"{level:<10} {u['total_tokens']:>12} {u['requests']:>9}")
    if not summary.get("complete", True):
        lines += ["", "INCOMPLETE: see events.jsonl"]
    return "\n".join(lines) + "\n"


def _fmt(x: float | None) -> str:
    return f"{'-':>7}" if x is None else f"{x:>7.4f}"


# -- records and reports ------------------------------------------------------


@dataclass
class RunRecord:
    events: list[dict[str, Any]]
    path: Path | None = None

    @classmethod
    def from_dir(cls, run_dir: str | os.PathLike) -> RunRecord:
        run_dir = Path(run_dir)
        return cls(read_events(run_dir / "events.jsonl"), run_dir)

    @property
    def summary(self) -> dict[str, Any]:
        for e in reversed(self.events):
            if e["type"] == "run_completed":
                return e["summary"]
        raise ReportError(f"record {self.path} has no run_completed event")

    def trajectories(self) -> dict[str, list[tuple[int, float]]]:
        out: dict[str, list[tuple[int, float]]] = {}
        seed, label = None, None
        for e in self.events:
            if e["type"] == "seed_started":
                seed = e["seed"]
            elif e["type"] == "inner_start":
                label = f"seed {seed}: {e['optimizer']}"
                n = 2
                while label in out:
                    label = f"seed {seed}: {e['optimizer']} #{n}"
                    n += 1
                out[label] = []
            elif e["type"] == "inner_initialized" and label is not None:
                out[label].append((0, e["best_score"]))
            elif e["type"] == "update" and label is not None:
                out[label].append((e["iteration"], e["best_score"]))
        return out


def cost_of(usage: Mapping[str, Mapping[str, int]], prices: Mapping[str, Mapping[str, float]]) -> float:
    """Currency cost from per-million-token prices keyed by level."""
    total = 0.0
    for level in LEVELS:
        p = prices.get(level) or prices.get("default") or {}
        u = usage.get(level, {})
        total += u.get("prompt_tokens", 0) * p.get("prompt", 0.0) / 1e6
        total += u.get("completion_tokens", 0) * p.get("completion", 0.0) / 1e6
    return total


def report_render(records: Sequence[RunRecord], out_dir: str | os.PathLike,
                  prices: Mapping[str, Mapping[str, float]] | None = None) -> dict[str, Any]:
    """Write results/cost tables (txt, csv, json) and figures; return the machine-readable report."""
    if not records:
        raise ReportError("no run records to report")
    summaries = [r.summary for r in records]
    by_bench: dict[str, Mapping[str, Any]] = {}
    for s in summaries:
        ref = by_bench.setdefault(s["benchmark"], s)
        if ref["metric"] != s["metric"]:
            raise ReportError(f"benchmark {s['benchmark']!r}: metric mismatch {ref['metric']!r} vs {s['metric']!r}")
        if ref["split_sizes"] != s["split_sizes"]:
            raise ReportError(f"benchmark {s['benchmark']!r}: split size mismatch "
                              f"{ref['split_sizes']} vs {s['split_sizes']}")

    rows = []
    for s in summaries:
        rows.append({k: s[k] for k in ("method", "benchmark", "val_mean", "val_std", "test_mean", "test_std")}
                    | {"seeds": len(s["per_seed"])})
    levels = {lv: 0 for lv in LEVELS}
    for s in summaries:
        for lv in LEVELS:
            levels[lv] += s["usage"][lv]["total_tokens"]
    pairing = []
    for s in summaries:
        p = prices if prices else s.get("prices") or {}
        n = max(len(s["per_seed"]), 1)
        score = s["test_mean"] if s["test_mean"] is not None else s["val_mean"]
        pairing.append({"method": s["method"], "benchmark": s["benchmark"], "performance": score,
                        "cost": cost_of(s["usage"], p) / n})

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "results.csv", rows, ["method", "benchmark", "val_mean", "val_std", "test_mean", "test_std", "seeds"])
    _write_csv(out / "cost.csv", [{"level": lv, "tokens": levels[lv]} for lv in LEVELS], ["level", "tokens"])
    _write_csv(out / "cost_performance.csv", pairing, ["method", "benchmark", "performance", "cost"])
    text = format_report(rows, levels, pairing)
    (out / "report.txt").write_text(text, encoding="utf-8")
    figures = [
        str(plotting.plot_results(rows, out / "results.png")),
        str(plotting.plot_cost(levels, out / "cost.png")),
    ]
    trajectories: dict[str, list[tuple[int, float]]] = {}
    for r, s in zip(records, summaries):
        for label, pts in list(r.trajectories().items())[:12]:
            trajectories[f"{s['method']} / {label}"] = pts
    figures.append(str(plotting.plot_trajectories(trajectories, out / "trajectory.png")))
    report = {"results": rows, "cost": levels, "cost_performance": pairing, "figures": figures}
    (out / "report.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    return report


def _write_csv(path: Path, rows: Sequence[Mapping[str, Any]], columns: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def format_report(rows, levels, pairing) -> str:
    width = max([len(r["method"]) for r in rows] + [6])
    lines = [f"{'method':<{width}}  {'benchmark':<14} {'val':>15} {'test':>15}"]
    for r in rows:
        val = _pm(r["val_mean"], r["val_std"])
        test = _pm(r["test_mean"], r["test_std"])
        lines.append(f"{r['method']:<{width}}  {r['benchmark']:<14} {val:>15} {test:>15}")
    lines += ["", f"{'level':<12} {'tokens':>12}"]
    lines += [f"{lv:<12} {levels[lv]:>12}" for lv in LEVELS]
    lines += ["", "method, performance, cost"]
    for p in pairing:
        perf = "-" if p["performance"] is None else f"{p['performance']:.2f}"
        lines.append(f"{p['method']}, {perf}, {p['cost']:.2f}$")
    return "\n".join(lines) + "\n"


def _pm(mean: float | None, std: float | None) -> str:
    if mean is None:
        return "-"
    return f"{mean:.3f} ± {std or 0.0:.3f}"
