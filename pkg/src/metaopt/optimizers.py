"""Inner-loop optimizers and the propose/evaluate/update runner.

An optimizer exposes four operations: initialize, propose, update and
extract the best program. Two strategies are built in: ``prompt_tgd``
(critique-then-rewrite of one prompt per step) and ``structure_search``
(propose a new pipeline). ``composite_schedule`` runs them in phases.
"""

from __future__ import annotations

import json
import logging
import re
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from . import prompts as P
from .engine import Engine, EngineError, EngineRequest, EngineSet
from .events import EventLog, seed_stream
from .program import (
    DSLParseError,
    Program,
    TextVariable,
    clone_with_prompt,
    program_from_dict,
    program_to_dict,
    validate_spec,
)
from .tasks import EvaluationReport, Metric, TaskDataset, evaluate_program

log = logging.getLogger(__name__)

STRATEGIES = ("prompt_tgd", "structure_search")
SPEC_STRATEGIES = STRATEGIES + ("composite_schedule",)
DEFAULT_PROMPTS = {
    "prompt_tgd": P.TGD_PROMPT,
    "structure_search": P.STRUCTURE_PROMPT,
    "composite_schedule": P.COMPOSITE_PROMPT,
}
MAX_ATTEMPTS = 3
FAILURE_SAMPLES = 3
FEEDBACK_WINDOW = 3


class OptimizerError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScheduleEntry:
    strategy: str
    repeats: int = 1
    prompt: str | None = None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"strategy": self.strategy, "repeats": self.repeats}
        if self.prompt is not None:
            out["prompt"] = self.prompt
        return out


@dataclass(frozen=True)
class OptimizerSpec:
    strategy: str
    optimizer_prompt: TextVariable
    schedule: tuple[ScheduleEntry, ...] = ()
    name: str = ""

    def __post_init__(self):
        if self.strategy not in SPEC_STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if not self.optimizer_prompt.learnable:
            raise ValueError("optimizer_prompt must be learnable")
        object.__setattr__(self, "schedule", tuple(self.schedule))
        if self.strategy == "composite_schedule":
            if not self.schedule:
                raise ValueError("composite_schedule needs at least one schedule entry")
            for entry in self.schedule:
                if entry.strategy not in STRATEGIES:
                    raise ValueError(f"unknown strategy {entry.strategy!r} in schedule")
                if entry.repeats < 1:
                    raise ValueError(f"schedule entry {entry.strategy!r} has repeats {entry.repeats} < 1")
        if not self.name:
            object.__setattr__(self, "name", self.strategy)

    def with_prompt(self, value: str, name: str | None = None) -> OptimizerSpec:
        return replace(self, optimizer_prompt=self.optimizer_prompt.with_value(value), name=name or self.name)

    def phases(self) -> list[tuple[str, str]]:
        """Expanded (strategy, optimizer prompt) per step of one pass through the schedule."""
        if self.strategy != "composite_schedule":
            return [(self.strategy, self.optimizer_prompt.value)]
        out = []
        for entry in self.schedule:
            text = entry.prompt if entry.prompt is not None else DEFAULT_PROMPTS[entry.strategy]
            out.extend([(entry.strategy, text)] * entry.repeats)
        return out

    def strategy_at(self, step: int) -> tuple[str, str]:
        """Strategy for 1-based ``step``; the schedule cycles once exhausted."""
        phases = self.phases()
        return phases[(step - 1) % len(phases)]

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "name": self.name,
            "strategy": self.strategy,
            "optimizer_prompt": self.optimizer_prompt.to_dict(),
        }
        if self.schedule:
            out["schedule"] = [e.to_dict() for e in self.schedule]
        return out

    def dumps(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, ensure_ascii=False)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> OptimizerSpec:
        prompt = data.get("optimizer_prompt")
        strategy = data["strategy"]
        if prompt is None:
            prompt = {"value": DEFAULT_PROMPTS.get(strategy, ""), "role_description": "optimizer task description"}
        elif isinstance(prompt, str):
            prompt = {"value": prompt, "role_description": "optimizer task description"}
        schedule = tuple(
            ScheduleEntry(e["strategy"], int(e.get("repeats", 1)), e.get("prompt"))
            for e in data.get("schedule", ())
        )
        return cls(strategy, TextVariable.from_dict(prompt), schedule, data.get("name", ""))

    @classmethod
    def loads(cls, text: str) -> OptimizerSpec:
        return cls.from_dict(json.loads(text))


def make_optimizer(strategy: str, prompt: str | None = None, name: str = "") -> OptimizerSpec:
    return OptimizerSpec(
        strategy,
        TextVariable(prompt if prompt is not None else DEFAULT_PROMPTS.get(strategy, ""), "optimizer task description"),
        name=name,
    )


def tgd_optimizer(prompt: str | None = None, name: str = "TGD") -> OptimizerSpec:
    return make_optimizer("prompt_tgd", prompt, name)


def structure_optimizer(prompt: str | None = None, name: str = "ADAS-TG") -> OptimizerSpec:
    return make_optimizer("structure_search", prompt, name)


@dataclass(frozen=True)
class HistoryEntry:
    iteration: int
    strategy: str
    summary: str
    score: float
    accepted: bool


@dataclass
class OptimizerState:
    best_program: Program
    best_score: float
    dataset: TaskDataset
    lazy: bool = False
    baseline_score: float | None = None
    history: list[HistoryEntry] = field(default_factory=list)
    iteration: int = 0
    feedback: dict[str, list[str]] = field(default_factory=dict)
    round_robin: int = 0


def initialize(spec: OptimizerSpec, dataset: TaskDataset, program: Program,
               evaluate: Callable[[Program], float] | None = None) -> OptimizerState:
    """Store data and program; with ``evaluate`` the baseline is scored now, otherwise lazily (0)."""
    if not dataset.split("train"):
        raise OptimizerError("training split is empty")
    check = validate_spec(program.spec)
    if not check.ok:
        raise OptimizerError("program does not validate: " + "; ".join(v.message for v in check.violations))
    if evaluate is None:
        return OptimizerState(program, 0.0, dataset, lazy=True)
    score = evaluate(program)
    return OptimizerState(program, score, dataset, baseline_score=score)


def update(state: OptimizerState, proposal: Program, score: float, summary: str = "",
           strategy: str = "") -> bool:
    """Record a scored proposal; replace the incumbent only on strict improvement."""
    if not 0.0 <= score <= 1.0:
        raise ValueError(f"score {score} outside [0, 1]")
    accepted = score > state.best_score
    if accepted:
        state.best_program = proposal
        state.best_score = score
    state.history.append(HistoryEntry(state.iteration, strategy, summary, score, accepted))
    return accepted


def extract_optimized_program(state: OptimizerState) -> tuple[Program, float]:
    return state.best_program, state.best_score


def _emit(events: EventLog | None, type: str, **data: Any) -> None:
    if events is not None:
        events.emit(type, **data)


def _ask(engine: Engine, system: str, user: str, seed: int | None = None) -> str:
    return engine.complete(EngineRequest(system, user, level="optimizer", seed=seed)).text


_SLOT_LINE = re.compile(r"^\s*Slot\s*:\s*`?([A-Za-z0-9_.\-]+)`?\s*$", re.MULTILINE)
_IMPROVED = re.compile(r"<improved>(.*?)</improved>", re.DOTALL)


def _attributed_slot(critique: str, slots: list[str]) -> str | None:
    found = _SLOT_LINE.findall(critique)
    if found and found[-1] in slots:
        return found[-1]
    return None


def _format_examples(rows: list[tuple[str, str | None, str]]) -> str:
    parts = []
    for n, (question, output, answer) in enumerate(rows, start=1):
        shown = output if output is not None else "(the pipeline failed to produce an output)"
        parts.append(f"## Example {n}\nQuestion: {question}\nPipeline output: {shown}\nExpected answer: {answer}")
    return "\n\n".join(parts)


def _sample_behaviour(state: OptimizerState, metric: Metric, engine: Engine, rng: np.random.Generator,
                      batch_size: int) -> tuple[list[tuple[str, str | None, str]], bool]:
    """Run the incumbent on a random training batch; return up to k failures (or k successes)."""
    train = state.dataset.split("train")
    order = rng.permutation(len(train))[:batch_size]
    picked = [train[int(j)][0] for j in order]
    report = evaluate_program(state.best_program, state.dataset, "train", metric, engine, indices=picked)
    scores = dict(report.per_example)
    examples = dict(train)
    failures = [i for i in picked if scores[i] < 1.0][:FAILURE_SAMPLES]
    chosen, found_failures = (failures, True) if failures else (picked[:FAILURE_SAMPLES], False)
    rows = [(examples[i].question, report.predictions.get(i), examples[i].answer) for i in chosen]
    return rows, found_failures


def propose_tgd(state: OptimizerState, spec: OptimizerSpec, engine: Engine, *, metric: Metric,
                program_engine: Engine, rng: np.random.Generator, events: EventLog | None = None,
                step: int = 1, total: int = 1, optimizer_prompt: str | None = None,
                batch_size: int = 8) -> Program | None:
    """Critique sampled training behaviour, then rewrite one prompt. None when rejected."""
    program = state.best_program
    optimizer_prompt = spec.optimizer_prompt.value if optimizer_prompt is None else optimizer_prompt
    slots = [s for s, v in program.prompts.items() if v.learnable]
    if not slots:
        _emit(events, "proposal_rejected", iteration=step, reason="no learnable prompt")
        return None

    rows, found_failures = _sample_behaviour(state, metric, program_engine, rng, batch_size)
    feedback_user = P.FEEDBACK_TEMPLATE.format(
        prompts="\n".join(f"[{s}] ({program.prompts[s].role_description}): {program.prompts[s].value}" for s in slots),
        question_type=state.dataset.question_type or "(not described)",
        examples=_format_examples(rows),
        instruction=P.FEEDBACK_FAILURES if found_failures else P.FEEDBACK_GENERALIZE,
        slots=", ".join(slots),
    )
    try:
        critique = _ask(engine, P.FEEDBACK_SYSTEM, feedback_user)
    except EngineError as exc:
        _emit(events, "proposal_error", iteration=step, stage="feedback", error=str(exc))
        _emit(events, "proposal_rejected", iteration=step, reason="feedback call failed")
        return None

    slot = _attributed_slot(critique, slots)
    if slot is None:
        slot = slots[state.round_robin % len(slots)]
        state.round_robin += 1
    state.feedback.setdefault(slot, []).append(critique)
    variable = program.prompts[slot]

    edit_user = P.EDIT_TEMPLATE.format(
        optimizer_prompt=optimizer_prompt,
        slot=slot,
        role=variable.role_description,
        value=variable.value,
        feedback="\n\n".join(state.feedback[slot][-FEEDBACK_WINDOW:]),
        step=step,
        total=total,
    )
    for attempt in range(MAX_ATTEMPTS):
        user = edit_user + P.EDIT_REASK * bool(attempt)
        try:
            reply = _ask(engine, optimizer_prompt, user)
        except EngineError as exc:
            _emit(events, "proposal_error", iteration=step, stage="edit", attempt=attempt + 1, error=str(exc))
            continue
        m = _IMPROVED.search(reply)
        if m and m.group(1).strip():
            new_value = m.group(1).strip()
            proposal = clone_with_prompt(program, slot, new_value)
            prompts = dict(proposal.prompts)
            prompts[slot] = prompts[slot].with_feedback(critique)
            return proposal.with_prompts(prompts)
        _emit(events, "proposal_error", iteration=step, stage="edit", attempt=attempt + 1,
              error="missing <improved> markers")
    _emit(events, "proposal_rejected", iteration=step, reason="no usable edit after 3 attempts")
    return None


_FENCED = re.compile(r"```(?:json)?\s*(\{.*?\})\s*```", re.DOTALL)


def extract_json_object(text: str) -> Any:
    """Parse the first fenced JSON block, else the outermost brace span."""
    m = _FENCED.search(text)
    candidate = m.group(1) if m else None
    if candidate is None:
        start, end = text.find("{"), text.rfind("}")
        if start < 0 or end <= start:
            raise ValueError("no JSON object in reply")
        candidate = text[start:end + 1]
    try:
        return json.loads(candidate)
    except json.JSONDecodeError as exc:
        raise ValueError(f"invalid JSON: {exc.msg} at {exc.pos}") from exc


def _public_program(program: Program) -> dict[str, Any]:
    doc = program_to_dict(program)
    for entry in doc["prompts"].values():
        entry.pop("feedback", None)
    return doc


def _top_history(state: OptimizerState, n: int = 3) -> str:
    ranked = sorted(state.history, key=lambda h: -h.score)[:n]
    if not ranked:
        return "(none yet)"
    return "\n".join(f"{i}. score {h.score:.3f} ({h.strategy}): {h.summary}" for i, h in enumerate(ranked, 1))


def parse_structure_reply(reply: str, incumbent: Program) -> Program:
    data = extract_json_object(reply)
    if not isinstance(data, dict):
        raise ValueError("pipeline document must be a JSON object")
    task = data.get("task_description", incumbent.task_description)
    program = program_from_dict(data, fallback=incumbent.prompts, task_description=task)
    check = validate_spec(program.spec)
    if not check.ok:
        raise ValueError("invalid pipeline: " + "; ".join(v.message for v in check.violations))
    if program.spec.count_llm_calls() < 1:
        raise ValueError("pipeline has no llm_call node")
    return program


def propose_structure(state: OptimizerState, spec: OptimizerSpec, engine: Engine, *,
                      events: EventLog | None = None, step: int = 1, total: int = 1,
                      optimizer_prompt: str | None = None) -> Program | None:
    """Ask for a whole new pipeline; None when every attempt fails to parse or validate."""
    optimizer_prompt = spec.optimizer_prompt.value if optimizer_prompt is None else optimizer_prompt
    base_user = P.STRUCTURE_TEMPLATE.format(
        best_score=state.best_score,
        program=json.dumps(_public_program(state.best_program), indent=2, ensure_ascii=False),
        history=_top_history(state),
        question_type=state.dataset.question_type or "(not described)",
        dsl=P.DSL_REFERENCE,
        step=step,
        total=total,
    )
    error = ""
    for attempt in range(MAX_ATTEMPTS):
        user = base_user + (P.STRUCTURE_REASK.format(error=error) if attempt else "")
        try:
            reply = _ask(engine, optimizer_prompt, user)
            return parse_structure_reply(reply, state.best_program)
        except (ValueError, DSLParseError, EngineError) as exc:
            error = str(exc)
            _emit(events, "proposal_error", iteration=step, stage="structure", attempt=attempt + 1, error=error)
    _emit(events, "proposal_rejected", iteration=step, reason="no valid pipeline after 3 attempts")
    return None


def describe_proposal(strategy: str, before: Program, after: Program) -> str:
    if strategy == "prompt_tgd":
        changed = [s for s in after.prompts if before.prompts.get(s, None) is None
                   or before.prompts[s].value != after.prompts[s].value]
        if not changed:
            return "prompt_tgd: no change"
        slot = changed[0]
        value = " ".join(after.prompts[slot].value.split())
        return f"prompt_tgd [{slot}]: {value[:100]}"
    spec = after.spec
    return f"structure_search: {len(spec.nodes)} nodes, {spec.count_llm_calls()} llm calls"


@dataclass
class InnerResult:
    program: Program
    score: float
    state: OptimizerState

    @property
    def proposals(self) -> int:
        return len(self.state.history)


def run_inner_loop(spec: OptimizerSpec, program: Program, iterations: int, dataset: TaskDataset,
                   metric: Metric, engines: EngineSet | Engine, *, seed: int = 0,
                   events: EventLog | None = None, eager: bool = True, parallelism: int = 1,
                   batch_size: int = 8) -> InnerResult:
    """Initialize, then ``iterations`` rounds of propose / score on val / update."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if not isinstance(engines, EngineSet):
        engines = EngineSet.single(engines)
    rng = seed_stream(seed, "inner-loop")

    def score(candidate: Program) -> EvaluationReport:
        return evaluate_program(candidate, dataset, "val", metric, engines.program, parallelism=parallelism)

    _emit(events, "inner_start", optimizer=spec.name, strategy=spec.strategy, iterations=iterations,
          spec=spec.to_dict())
    baseline: dict[str, Any] = {}

    def eager_eval(candidate: Program) -> float:
        report = score(candidate)
        baseline.update(report.summary())
        return report.mean_score

    state = initialize(spec, dataset, program, eager_eval if eager else None)
    _emit(events, "inner_initialized", lazy=state.lazy, best_score=state.best_score, **baseline)

    rejected = 0
    for k in range(1, iterations + 1):
        state.iteration = k
        strategy, prompt_text = spec.strategy_at(k)
        before = state.best_program
        if strategy == "prompt_tgd":
            proposal = propose_tgd(state, spec, engines.optimizer, metric=metric, program_engine=engines.program,
                                   rng=rng, events=events, step=k, total=iterations,
                                   optimizer_prompt=prompt_text, batch_size=batch_size)
        else:
            proposal = propose_structure(state, spec, engines.optimizer, events=events, step=k,
                                         total=iterations, optimizer_prompt=prompt_text)
        if proposal is None:
            rejected += 1
            continue
        summary = describe_proposal(strategy, before, proposal)
        _emit(events, "proposal", iteration=k, strategy=strategy, summary=summary)
        report = score(proposal)
        _emit(events, "evaluation", iteration=k, **report.summary())
        accepted = update(state, proposal, report.mean_score, summary, strategy)
        _emit(events, "update", iteration=k, accepted=accepted, score=report.mean_score,
              best_score=state.best_score)

    if rejected == iterations:
        log.warning("optimizer %s: every proposal was rejected; returning the initial program", spec.name)
        _emit(events, "inner_warning", message="all proposals rejected")
    best, best_score = extract_optimized_program(state)
    _emit(events, "inner_end", optimizer=spec.name, best_score=best_score, proposals=len(state.history),
          rejected=rejected)
    return InnerResult(best, best_score, state)
