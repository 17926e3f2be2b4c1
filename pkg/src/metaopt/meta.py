"""Meta-optimization: searching over optimizers rather than programs.

Two meta-optimizers share one outer loop. The prompt meta-optimizer rewrites
an optimizer's task description using a sampled training example; the
structure meta-optimizer composes input optimizers into a phased schedule.
:func:`run_metatextgrad` chains them.
"""

from __future__ import annotations

import json
import logging
import re
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import prompts as P
from .engine import Engine, EngineError, EngineRequest, EngineSet
from .events import EventLog, seed_stream
from .optimizers import (
    DEFAULT_PROMPTS,
    MAX_ATTEMPTS,
    STRATEGIES,
    InnerResult,
    OptimizerSpec,
    ScheduleEntry,
    extract_json_object,
    run_inner_loop,
)
from .program import Program, TextVariable
from .tasks import Metric, TaskDataset

log = logging.getLogger(__name__)

META_KINDS = ("meta_prompt", "meta_structure")
MAX_PHASES = 4
DEFAULT_META_ITERATIONS = 3
DEFAULT_INNER_ITERATIONS = 6


class MetaError(RuntimeError):
    pass


@dataclass(frozen=True)
class MetaHistoryEntry:
    round: int
    summary: str
    score: float
    accepted: bool
    spec: OptimizerSpec = field(repr=False)


@dataclass
class MetaState:
    best_optimizer: OptimizerSpec
    best_score: float
    input_optimizers: list[OptimizerSpec]
    input_scores: list[float] = field(default_factory=list)
    history: list[MetaHistoryEntry] = field(default_factory=list)
    best_program: Program | None = None
    # every (spec, score) pair produced by an inner loop, in order
    evaluated: list[tuple[OptimizerSpec, float]] = field(default_factory=list)


@dataclass
class InnerRunner:
    """Bundles what every inner loop in a meta run needs."""

    program: Program
    dataset: TaskDataset
    metric: Metric
    engines: EngineSet
    iterations: int = DEFAULT_INNER_ITERATIONS
    seed: int = 0
    events: EventLog | None = None
    parallelism: int = 1

    def __call__(self, spec: OptimizerSpec, phase: str) -> InnerResult:
        if self.events is not None:
            self.events.emit("inner_run", phase=phase, optimizer=spec.name)
        return run_inner_loop(spec, self.program, self.iterations, self.dataset, self.metric, self.engines,
                              seed=self.seed, events=self.events, parallelism=self.parallelism)


def _emit(events: EventLog | None, type: str, **data: Any) -> None:
    if events is not None:
        events.emit(type, **data)


def _require_splits(dataset: TaskDataset) -> None:
    for name in ("train", "val"):
        if not dataset.split(name):
            raise MetaError(f"dataset {name} split is empty")


def meta_prompt_initialize(runner: InnerRunner, optimizer: OptimizerSpec, *,
                           pseudocode_init: bool = False) -> MetaState:
    """Score the input optimizer with one inner loop (or start from 0 with ``pseudocode_init``)."""
    _require_splits(runner.dataset)
    if pseudocode_init:
        return MetaState(optimizer, 0.0, [optimizer], [0.0])
    result = runner(optimizer, "init")
    _emit(runner.events, "meta_initialized", kind="meta_prompt", best=optimizer.name, best_score=result.score)
    return MetaState(optimizer, result.score, [optimizer], [result.score], best_program=result.program,
                     evaluated=[(optimizer, result.score)])


_FIELD = re.compile(r'"improved_task_description"\s*:\s*("(?:[^"\\]|\\.)*")', re.DOTALL)


def parse_improved_description(reply: str) -> str:
    try:
        data = extract_json_object(reply)
    except ValueError:
        data = None
    if isinstance(data, dict) and isinstance(data.get("improved_task_description"), str):
        text = data["improved_task_description"].strip()
    else:
        m = _FIELD.search(reply)
        if m is None:
            raise ValueError("no improved_task_description field")
        text = json.loads(m.group(1)).strip()
    if not text:
        raise ValueError("improved_task_description is empty")
    return text


def _optimized_name(name: str) -> str:
    return name if name.endswith(" (O)") else f"{name} (O)"


def compose_meta_prompt_request(state: MetaState, dataset: TaskDataset, question: str, answer: str) -> str:
    best = state.best_optimizer
    return P.META_PROMPT_TEMPLATE.format(
        optimizer_source_code=best.dumps(),
        question_type=dataset.question_type or "(not described)",
        example_question=question,
        example_answer=answer,
        optimizer_prompt=best.optimizer_prompt.value,
        optimizer_type=P.OPTIMIZER_TYPES[best.strategy],
    )


def meta_prompt_propose(state: MetaState, dataset: TaskDataset, engine: Engine, rng: np.random.Generator,
                        *, events: EventLog | None = None, round: int = 1) -> OptimizerSpec | None:
    """Rewrite the best optimizer's task description from one sampled training example."""
    train = dataset.split("train")
    _, example = train[int(rng.integers(len(train)))]
    base = compose_meta_prompt_request(state, dataset, example.question, example.answer)
    for attempt in range(MAX_ATTEMPTS):
        user = base + P.META_PROMPT_REASK * bool(attempt)
        try:
            reply = engine.complete(EngineRequest("", user, level="meta")).text
            text = parse_improved_description(reply)
        except (ValueError, EngineError) as exc:
            _emit(events, "meta_proposal_error", round=round, attempt=attempt + 1, error=str(exc))
            continue
        return state.best_optimizer.with_prompt(text, name=_optimized_name(state.best_optimizer.name))
    return None


def meta_structure_initialize(runner: InnerRunner, optimizers: Sequence[OptimizerSpec], *,
                              pseudocode_init: bool = False) -> MetaState:
    """Run one inner loop per input and keep the first highest scorer."""
    if not optimizers:
        raise MetaError("meta structure optimization needs at least one input optimizer")
    _require_splits(runner.dataset)
    optimizers = list(optimizers)
    if pseudocode_init:
        return MetaState(optimizers[0], 0.0, optimizers, [0.0] * len(optimizers))
    scores: list[float] = []
    results: list[InnerResult | None] = []
    failures: list[str] = []
    for spec in optimizers:
        try:
            result = runner(spec, "init")
        except Exception as exc:
            log.warning("inner loop for %s failed during initialization: %s", spec.name, exc)
            _emit(runner.events, "inner_failed", optimizer=spec.name, error=str(exc))
            failures.append(spec.name)
            scores.append(float("-inf"))
            results.append(None)
            continue
        scores.append(result.score)
        results.append(result)
    if len(failures) == len(optimizers):
        raise MetaError("every input optimizer failed during initialization")
    best = max(range(len(scores)), key=lambda i: (scores[i], -i))
    evaluated = [(spec, s) for spec, s, r in zip(optimizers, scores, results) if r is not None]
    state = MetaState(optimizers[best], scores[best], optimizers, [max(s, 0.0) for s in scores],
                      best_program=results[best].program, evaluated=evaluated)
    _emit(runner.events, "meta_initialized", kind="meta_structure", best=state.best_optimizer.name,
          best_score=state.best_score, input_scores=state.input_scores)
    return state


def _default_prompt_for(strategy: str, inputs: Sequence[OptimizerSpec]) -> str:
    for spec in inputs:
        if spec.strategy == strategy:
            return spec.optimizer_prompt.value
    for spec in inputs:
        for entry in spec.schedule:
            if entry.strategy == strategy and entry.prompt is not None:
                return entry.prompt
    return DEFAULT_PROMPTS[strategy]


def parse_schedule(reply: str, inputs: Sequence[OptimizerSpec], max_phases: int = MAX_PHASES) -> tuple[ScheduleEntry, ...]:
    data = extract_json_object(reply)
    raw = data.get("schedule") if isinstance(data, dict) else None
    if not isinstance(raw, list) or not raw:
        raise ValueError("reply has no non-empty 'schedule' list")
    if len(raw) > max_phases:
        raise ValueError(f"schedule has {len(raw)} phases; at most {max_phases} allowed")
    entries = []
    for n, item in enumerate(raw, start=1):
        if not isinstance(item, dict):
            raise ValueError(f"phase {n} is not an object")
        strategy = item.get("strategy")
        if strategy not in STRATEGIES:
            raise ValueError(f"phase {n} uses unknown strategy {strategy!r}")
        repeats = item.get("repeats", 1)
        if not isinstance(repeats, int) or isinstance(repeats, bool) or repeats < 1:
            raise ValueError(f"phase {n} ({strategy}) has invalid repeats {repeats!r}")
        prompt = item.get("prompt")
        if prompt is not None and (not isinstance(prompt, str) or not prompt.strip()):
            raise ValueError(f"phase {n} prompt override must be non-empty text")
        entries.append(ScheduleEntry(strategy, repeats, prompt if prompt else _default_prompt_for(strategy, inputs)))
    return tuple(entries)


def compose_meta_structure_request(state: MetaState, max_phases: int = MAX_PHASES) -> str:
    blocks = []
    for i, (spec, score) in enumerate(zip(state.input_optimizers, state.input_scores), start=1):
        blocks.append(f"## Optimizer {i}: {spec.name} (validation score {score:.3f})\n```json\n{spec.dumps()}\n```")
    return P.META_STRUCTURE_TEMPLATE.format(
        strategies="\n".join(f"- {s}: {P.STRATEGY_NOTES[s]}" for s in STRATEGIES),
        optimizers="\n\n".join(blocks),
        best_score=state.best_score,
        best=state.best_optimizer.dumps(),
        max_phases=max_phases,
    )


def meta_structure_propose(state: MetaState, engine: Engine, *, events: EventLog | None = None,
                           round: int = 1, max_phases: int = MAX_PHASES) -> OptimizerSpec | None:
    """Ask for a phased schedule over the known strategies; None when every attempt is invalid."""
    base = compose_meta_structure_request(state, max_phases)
    error = ""
    for attempt in range(MAX_ATTEMPTS):
        user = base + (P.META_STRUCTURE_REASK.format(error=error) if attempt else "")
        try:
            reply = engine.complete(EngineRequest("", user, level="meta")).text
            schedule = parse_schedule(reply, state.input_optimizers, max_phases)
        except (ValueError, EngineError) as exc:
            error = str(exc)
            _emit(events, "meta_proposal_error", round=round, attempt=attempt + 1, error=error)
            continue
        prompt = TextVariable(P.COMPOSITE_PROMPT, "optimizer task description")
        return OptimizerSpec("composite_schedule", prompt, schedule, name="Struct (O)")
    return None


def meta_update(state: MetaState, proposal: OptimizerSpec, score: float, round: int = 0,
                program: Program | None = None) -> bool:
    if not 0.0 <= score <= 1.0:
        raise ValueError(f"score {score} outside [0, 1]")
    accepted = score > state.best_score
    if accepted:
        state.best_optimizer = proposal
        state.best_score = score
        state.best_program = program
    state.history.append(MetaHistoryEntry(round, proposal.name, score, accepted, proposal))
    return accepted


@dataclass
class OuterResult:
    kind: str
    best_optimizer: OptimizerSpec
    best_score: float
    state: MetaState

    @property
    def best_program(self) -> Program | None:
        return self.state.best_program


def run_outer_loop(kind: str, inputs: Sequence[OptimizerSpec], meta_iterations: int, runner: InnerRunner,
                   *, pseudocode_init: bool = False, rng: np.random.Generator | None = None) -> OuterResult:
    """Initialize, then ``meta_iterations`` rounds of propose / inner loop / update."""
    if kind not in META_KINDS:
        raise ValueError(f"unknown meta kind {kind!r}")
    if meta_iterations < 1:
        raise ValueError("meta_iterations must be >= 1")
    events = runner.events
    rng = rng if rng is not None else seed_stream(runner.seed, "meta-sampling")
    _emit(events, "meta_start", kind=kind, inputs=[s.name for s in inputs], meta_iterations=meta_iterations,
          inner_iterations=runner.iterations)
    if kind == "meta_prompt":
        if len(inputs) != 1:
            raise ValueError("meta_prompt optimizes exactly one input optimizer")
        state = meta_prompt_initialize(runner, inputs[0], pseudocode_init=pseudocode_init)
    else:
        state = meta_structure_initialize(runner, inputs, pseudocode_init=pseudocode_init)

    skipped = 0
    for j in range(1, meta_iterations + 1):
        if kind == "meta_prompt":
            proposal = meta_prompt_propose(state, runner.dataset, runner.engines.meta, rng, events=events, round=j)
        else:
            proposal = meta_structure_propose(state, runner.engines.meta, events=events, round=j)
        if proposal is None:
            skipped += 1
            _emit(events, "meta_proposal_skipped", round=j)
            continue
        _emit(events, "meta_proposal", round=j, optimizer=proposal.name, spec=proposal.to_dict())
        result = runner(proposal, f"round-{j}")
        state.evaluated.append((proposal, result.score))
        accepted = meta_update(state, proposal, result.score, j, result.program)
        _emit(events, "meta_update", round=j, score=result.score, accepted=accepted, best_score=state.best_score)

    if skipped == meta_iterations:
        log.warning("%s: every meta proposal was skipped; returning the initialization best", kind)
        _emit(events, "meta_warning", message="all meta proposals skipped")
    _emit(events, "meta_end", kind=kind, best=state.best_optimizer.name, best_score=state.best_score)
    return OuterResult(kind, state.best_optimizer, state.best_score, state)


@dataclass
class MetaTextGradResult:
    best_optimizer: OptimizerSpec
    best_score: float
    best_program: Program | None
    stage1: list[OuterResult]
    stage2: OuterResult

    def evaluated(self) -> list[tuple[OptimizerSpec, float]]:
        out: list[tuple[OptimizerSpec, float]] = []
        for r in self.stage1:
            out.extend(r.state.evaluated)
        out.extend(self.stage2.state.evaluated)
        return out


def run_metatextgrad(inputs: Sequence[OptimizerSpec], meta_iterations: int, runner: InnerRunner, *,
                     pseudocode_init: bool = False) -> MetaTextGradResult:
    """Prompt-optimize every input on its own, then search schedules over the variants."""
    if not inputs:
        raise ValueError("run_metatextgrad needs at least one input optimizer")
    stage1 = []
    for spec in inputs:
        # same stream for every input so stage 1 is independent of input order
        rng = seed_stream(runner.seed, "meta-sampling")
        stage1.append(run_outer_loop("meta_prompt", [spec], meta_iterations, runner,
                                     pseudocode_init=pseudocode_init, rng=rng))
    variants = [r.best_optimizer for r in stage1]
    stage2 = run_outer_loop("meta_structure", variants, meta_iterations, runner, pseudocode_init=pseudocode_init)
    return MetaTextGradResult(stage2.best_optimizer, stage2.best_score, stage2.best_program, stage1, stage2)
