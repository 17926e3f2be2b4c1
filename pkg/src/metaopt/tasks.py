"""Datasets, synthetic tasks with exact oracles, metrics and program evaluation."""

from __future__ import annotations

import json
import logging
import math
import os
import re
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .engine import Engine, EngineError, EngineRequest
from .program import Program, forward

log = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")


class DatasetError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass(frozen=True)
class TaskExample:
    question: str
    answer: str

    def __post_init__(self):
        if not self.question or not self.answer:
            raise ValueError("question and answer must both be non-empty")


@dataclass(frozen=True)
class TaskDataset:
    examples: tuple[TaskExample, ...]
    question_type: str = ""
    splits: Mapping[str, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "examples", tuple(self.examples))
        splits = dict(self.splits) if self.splits else {"train": tuple(range(len(self.examples)))}
        splits = {k: tuple(v) for k, v in splits.items()}
        seen: set[int] = set()
        for name, idx in splits.items():
            for i in idx:
                if not 0 <= i < len(self.examples):
                    raise DatasetError(f"split {name!r} index {i} out of range")
                if i in seen:
                    raise DatasetError(f"index {i} appears in more than one split")
                seen.add(i)
        object.__setattr__(self, "splits", splits)

    def split(self, name: str) -> list[tuple[int, TaskExample]]:
        return [(i, self.examples[i]) for i in self.splits.get(name, ())]

    def split_sizes(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.splits.items()}

    def without(self, *names: str) -> TaskDataset:
        """Copy with the named splits removed (used to seal the test split)."""
        return TaskDataset(self.examples, self.question_type,
                           {k: v for k, v in self.splits.items() if k not in names})


def _resolve_splits(spec: Mapping[str, Any], n: int, line: int | None = None) -> dict[str, tuple[int, ...]]:
    """Sizes are laid out as consecutive blocks in train/val/test order; lists are explicit indices."""
    out: dict[str, tuple[int, ...]] = {}
    cursor = 0
    order = [k for k in SPLIT_NAMES if k in spec] + [k for k in spec if k not in SPLIT_NAMES]
    for name in order:
        v = spec[name]
        if isinstance(v, bool):
            raise DatasetError(f"split {name!r} must be a size or an index list", line)
        if isinstance(v, int):
            if v < 0 or cursor + v > n:
                raise DatasetError(f"split sizes exceed the {n} examples available", line)
            out[name] = tuple(range(cursor, cursor + v))
            cursor += v
        elif isinstance(v, list) and all(isinstance(i, int) for i in v):
            out[name] = tuple(v)
        else:
            raise DatasetError(f"split {name!r} must be a size or an index list", line)
    return out


def load_dataset(path: str | os.PathLike) -> TaskDataset:
    examples: list[TaskExample] = []
    header: dict[str, Any] = {}
    header_line = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"invalid JSON: {exc.msg}", lineno) from exc
            if not isinstance(record, dict):
                raise DatasetError("record must be an object", lineno)
            if not examples and not header and "question" not in record:
                if not ({"question_type", "splits"} & set(record)):
                    raise DatasetError("header record needs question_type or splits", lineno)
                header, header_line = record, lineno
                continue
            q, a = record.get("question"), record.get("answer")
            if not isinstance(q, str) or not isinstance(a, str) or not q or not a:
                raise DatasetError("record needs non-empty string 'question' and 'answer'", lineno)
            examples.append(TaskExample(q, a))
    splits = header.get("splits")
    if splits is not None:
        if not isinstance(splits, dict):
            raise DatasetError("splits must be an object", header_line)
        splits = _resolve_splits(splits, len(examples), header_line)
    return TaskDataset(tuple(examples), str(header.get("question_type", "")), splits or {})


def save_dataset(dataset: TaskDataset, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        header = {"question_type": dataset.question_type,
                  "splits": {k: list(v) for k, v in dataset.splits.items()}}
        fh.write(json.dumps(header) + "\n")
        for ex in dataset.examples:
            fh.write(json.dumps({"question": ex.question, "answer": ex.answer}) + "\n")


# -- synthetic generators ----------------------------------------------------

WORDS = (
    "acid", "anchor", "apple", "arrow", "autumn", "badge", "bakery", "banana", "barrel", "beacon",
    "beetle", "blanket", "border", "bottle", "breeze", "bridge", "bucket", "butter", "cabin", "candle",
    "canyon", "carbon", "cedar", "chalk", "cherry", "circle", "clover", "cobalt", "comet", "copper",
    "coral", "cotton", "crater", "cricket", "dagger", "daisy", "delta", "desert", "dolphin", "dragon",
    "eagle", "echo", "elbow", "ember", "engine", "falcon", "feather", "fiddle", "forest", "fossil",
    "galaxy", "garden", "garlic", "ginger", "glacier", "granite", "harbor", "hazel", "helmet", "hollow",
    "hunter", "island", "ivory", "jacket", "jasmine", "jungle", "kernel", "kettle", "kitten", "ladder",
    "lantern", "lemon", "lizard", "magnet", "maple", "marble", "meadow", "mirror", "monkey", "mosaic",
    "needle", "nickel", "nutmeg", "oasis", "olive", "onion", "orbit", "oyster", "paddle", "pepper",
    "pillow", "planet", "pocket", "quartz", "quiver", "rabbit", "raven", "ribbon", "river", "rocket",
    "saddle", "salmon", "shadow", "silver", "spider", "spruce", "summit", "tablet", "thistle", "thunder",
    "timber", "tulip", "turtle", "umbrella", "valley", "velvet", "violet", "walnut", "wander", "willow",
    "window", "winter", "yarrow", "yellow", "zenith", "zephyr",
)

WORD_SORTING_TYPE = "Sort a list of words alphabetically and output them separated by single spaces."
DYCK_TYPE = ("Given a prefix of a bracket sequence over ()[]{}<>, output the closing brackets "
             "needed to complete it, separated by spaces.")

PAIRS = {"(": ")", "[": "]", "{": "}", "<": ">"}
CLOSERS = {v: k for k, v in PAIRS.items()}


def _layout_splits(n: int, splits: Mapping[str, Any] | None) -> dict[str, tuple[int, ...]]:
    return _resolve_splits(splits, n) if splits else {}


def gen_word_sorting(n: int, rng_seed: int, splits: Mapping[str, Any] | None = None) -> TaskDataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng_seed)
    examples = []
    for _ in range(n):
        k = int(rng.integers(4, 11))
        words = [WORDS[i] for i in rng.choice(len(WORDS), size=k, replace=False)]
        examples.append(TaskExample("Sort the following words: " + " ".join(words), " ".join(sorted(words))))
    return TaskDataset(tuple(examples), WORD_SORTING_TYPE, _layout_splits(n, splits))


def dyck_completion(prefix: str) -> str:
    """Closing sequence for a bracket prefix, by stack simulation."""
    stack: list[str] = []
    for tok in prefix.split():
        if tok in PAIRS:
            stack.append(tok)
        elif tok in CLOSERS:
            if not stack or stack[-1] != CLOSERS[tok]:
                raise ValueError(f"prefix is not extendable to a balanced string at {tok!r}")
            stack.pop()
        else:
            raise ValueError(f"unknown token {tok!r}")
    return " ".join(PAIRS[t] for t in reversed(stack))


def is_balanced(sequence: str) -> bool:
    stack: list[str] = []
    for tok in sequence.split():
        if tok in PAIRS:
            stack.append(tok)
        elif tok in CLOSERS and stack and stack[-1] == CLOSERS[tok]:
            stack.pop()
        else:
            return False
    return not stack


def gen_dyck(n: int, rng_seed: int, splits: Mapping[str, Any] | None = None) -> TaskDataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng_seed)
    opens = list(PAIRS)
    examples = []
    for _ in range(n):
        pairs = int(rng.integers(2, 9))
        tokens: list[str] = []
        stack: list[str] = []
        remaining = pairs
        depth_after: list[int] = []
        while remaining or stack:
            if remaining and (not stack or rng.random() < 0.55):
                t = opens[int(rng.integers(4))]
                stack.append(t)
                tokens.append(t)
                remaining -= 1
            else:
                tokens.append(PAIRS[stack.pop()])
            depth_after.append(len(stack))
        cuts = [i + 1 for i, d in enumerate(depth_after) if d > 0]
        cut = cuts[int(rng.integers(len(cuts)))]
        question = " ".join(tokens[:cut])
        examples.append(TaskExample(question, dyck_completion(question)))
    return TaskDataset(tuple(examples), DYCK_TYPE, _layout_splits(n, splits))


GENERATORS = {"word_sorting": gen_word_sorting, "dyck": gen_dyck}


# -- metrics -----------------------------------------------------------------

ANSWER_MARK = re.compile(r"Answer\s*:")
CHOICE_AFTER_MARK = re.compile(r"[\s*]*\(?([A-D])(?![A-Za-z0-9])")

DEFAULT_JUDGE_TEMPLATE = (
    "Decide whether a model's answer is correct given the ground-truth answer.\n\n"
    "Model answer:\n{prediction}\n\nGround truth:\n{reference}\n\n"
    "Reply with a single word: yes if the model answer matches the ground truth, otherwise no."
)
JUDGE_REASK = "\n\nYour previous reply could not be read. Reply with exactly one word: yes or no."
_VERDICT = re.compile(r"\b(yes|no)\b", re.IGNORECASE)


@dataclass(frozen=True)
class Metric:
    kind: str
    pattern: str | None = None
    judge_template: str = DEFAULT_JUDGE_TEMPLATE

    def __post_init__(self):
        if self.kind not in ("exact_choice", "exact_text", "judge"):
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if self.pattern is not None:
            re.compile(self.pattern)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind}
        if self.pattern is not None:
            out["pattern"] = self.pattern
        if self.kind == "judge" and self.judge_template != DEFAULT_JUDGE_TEMPLATE:
            out["judge_template"] = self.judge_template
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Metric:
        return cls(data["kind"], data.get("pattern"), data.get("judge_template", DEFAULT_JUDGE_TEMPLATE))


def extract_choice(text: str) -> str | None:
    """Letter following the final ``Answer:``; None when that one carries no A-D letter."""
    marks = list(ANSWER_MARK.finditer(text))
    if not marks:
        return None
    m = CHOICE_AFTER_MARK.match(text, marks[-1].end())
    return m.group(1) if m else None


def normalize_text(text: str) -> str:
    return " ".join(text.split()).casefold()


def _reference_letter(reference: str) -> str | None:
    if ANSWER_MARK.search(reference):
        return extract_choice(reference)
    ref = reference.strip().strip("()").strip().upper()
    return ref if ref in ("A", "B", "C", "D") else None


def _last_match(pattern: str, text: str) -> str:
    matches = list(re.finditer(pattern, text))
    if not matches:
        return text
    m = matches[-1]
    return m.group(1) if m.re.groups else m.group(0)


def metric_evaluate(metric: Metric, prediction: str, reference: str, engine: Engine | None = None) -> float:
    if metric.kind == "exact_choice":
        expected = _reference_letter(reference)
        return float(expected is not None and extract_choice(prediction) == expected)
    if metric.kind == "exact_text":
        if metric.pattern is not None:
            prediction = _last_match(metric.pattern, prediction)
        return float(normalize_text(prediction) == normalize_text(reference))
    if engine is None:
        raise ValueError("judge metric needs an engine")
    user = metric.judge_template.format(prediction=prediction, reference=reference)
    for attempt in range(3):
        reply = engine.complete(EngineRequest("", user + JUDGE_REASK * bool(attempt), level="program")).text
        verdicts = {v.lower() for v in _VERDICT.findall(reply)}
        if len(verdicts) == 1:
            return 1.0 if verdicts == {"yes"} else 0.0
    log.warning("judge gave no parseable verdict after 3 attempts; scoring 0")
    return 0.0


@dataclass(frozen=True)
class EvaluationReport:
    per_example: tuple[tuple[int, float], ...]
    mean_score: float
    n_evaluated: int
    flagged: tuple[int, ...] = ()
    errors: Mapping[int, str] = field(default_factory=dict)
    predictions: Mapping[int, str] = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def from_scores(cls, scores: Sequence[tuple[int, float]], flagged=(), errors=None, predictions=None):
        scores = tuple(sorted(scores))
        n = len(scores)
        mean = math.fsum(s for _, s in scores) / n if n else 0.0
        return cls(scores, mean, n, tuple(sorted(flagged)), dict(errors or {}), dict(predictions or {}))

    def summary(self) -> dict[str, Any]:
        return {"mean_score": self.mean_score, "n_evaluated": self.n_evaluated, "flagged": list(self.flagged)}


def evaluate_program(program: Program, dataset: TaskDataset, split: str, metric: Metric, engine: Engine,
                     parallelism: int = 1, judge_engine: Engine | None = None,
                     indices: Sequence[int] | None = None) -> EvaluationReport:
    """Mean metric of ``program`` over a dataset split.

    Examples whose forward pass fails score 0 and are flagged; nothing here is fatal.
    """
    items = dataset.split(split)
    if indices is not None:
        wanted = set(indices)
        items = [(i, ex) for i, ex in items if i in wanted]
    if not items:
        raise ValueError(f"split {split!r} is empty")
    judge_engine = judge_engine or engine

    def run(item: tuple[int, TaskExample]):
        i, ex = item
        try:
            out = forward(program, ex.question, engine)
        except Exception as exc:
            return i, 0.0, None, f"{type(exc).__name__}: {exc}"
        try:
            return i, metric_evaluate(metric, out, ex.answer, judge_engine), out, None
        except EngineError as exc:
            return i, 0.0, out, f"judge: {exc}"

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(run, items))
    else:
        results = [run(item) for item in items]
    errors = {i: err for i, _, _, err in results if err is not None}
    if errors and len(errors) == len(results):
        log.error("every example failed on split %r; first error: %s", split, next(iter(errors.values())))
    return EvaluationReport.from_scores(
        [(i, s) for i, s, _, _ in results],
        flagged=errors.keys(),
        errors=errors,
        predictions={i: out for i, _, out, _ in results if out is not None},
    )
