"""Scripted scenarios shared by unit and acceptance tests.

Program responses are fixed per (prompt, example): prompt ``p`` answers example
``i`` correctly iff ``(7 * i + salt) % 20 < q[p]``. Over any 20 consecutive
indices ``7 * i % 20`` is a permutation, so a 20-item split scores exactly
``q[p] / 20``. The oracles below recount this directly without any engine.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from metaopt.catalog import single_call_program
from metaopt.engine import EchoEngine, EngineSet, ScriptedEngine, ScriptRecord, write_transcript
from metaopt.optimizers import OptimizerSpec, make_optimizer
from metaopt.program import Program, compose_user_text, dump_program
from metaopt.tasks import Metric, TaskDataset, gen_word_sorting

SPLITS = {"train": 30, "val": 20, "test": 20}
CRITIQUE = "The ordering is unreliable for long lists.\nSlot: executer"
METRIC = Metric("exact_text")


def sort_prompt(tag: str) -> str:
    return f"Sort the words alphabetically ({tag})."


def wrong_answer(answer: str) -> str:
    return " ".join(reversed(answer.split()))


def is_correct(q: int, index: int, salt: int) -> bool:
    return (7 * index + salt) % 20 < q


def program_records(dataset: TaskDataset, table: dict[str, int]) -> list[ScriptRecord]:
    records = []
    for salt, (prompt, q) in enumerate(table.items()):
        for i, ex in enumerate(dataset.examples):
            reply = ex.answer if is_correct(q, i, salt) else wrong_answer(ex.answer)
            records.append(ScriptRecord(compose_user_text(prompt, ex.question), reply, "exact"))
    return records


def oracle_accuracy(dataset: TaskDataset, split: str, table: dict[str, int], prompt: str) -> float:
    salt = list(table).index(prompt)
    rows = dataset.split(split)
    return sum(is_correct(table[prompt], i, salt) for i, _ in rows) / len(rows)


@dataclass
class InnerScenario:
    dataset: TaskDataset
    program: Program
    table: dict[str, int]
    proposals: list[str]
    program_records: list[ScriptRecord]
    optimizer_records: list[ScriptRecord]

    def engines(self) -> EngineSet:
        return EngineSet(ScriptedEngine(self.program_records, "exact"),
                         ScriptedEngine(self.optimizer_records, "substring"),
                         EchoEngine())

    def oracle_best(self) -> tuple[str, float]:
        """Strict-improvement scan over the proposal sequence, scored by direct counting."""
        best = self.program.prompts["executer"].value
        best_score = oracle_accuracy(self.dataset, "val", self.table, best)
        for p in self.proposals:
            s = oracle_accuracy(self.dataset, "val", self.table, p)
            if s > best_score:
                best, best_score = p, s
        return best, best_score


def word_sorting_inner(quality: tuple[int, ...] = (8, 6, 10, 20, 12, 19, 4), seed: int = 7) -> InnerScenario:
    """Baseline plus six proposals, one per optimization step; the third is known-good (q=20)."""
    dataset = gen_word_sorting(70, seed, SPLITS)
    prompts = [sort_prompt(f"variant {k}") for k in range(len(quality))]
    table = dict(zip(prompts, quality))
    program = single_call_program(prompts[0])
    total = len(prompts) - 1
    opt = [ScriptRecord(f"Optimization step: {k}/{total}", f"<improved>{prompts[k]}</improved>")
           for k in range(1, total + 1)]
    opt.append(ScriptRecord("# Observed behaviour", CRITIQUE))
    return InnerScenario(dataset, program, table, prompts[1:], program_records(dataset, table), opt)


@dataclass
class MetaScenario:
    dataset: TaskDataset
    program: Program
    table: dict[str, int]
    inputs: list[OptimizerSpec]
    guidance: dict[str, str]  # optimizer-prompt marker -> program prompt it proposes
    structure_prompt: str
    program_records: list[ScriptRecord]
    optimizer_records: list[ScriptRecord]
    meta_records: list[ScriptRecord]

    def engines(self) -> EngineSet:
        return EngineSet(ScriptedEngine(self.program_records, "exact"),
                         ScriptedEngine(self.optimizer_records, "substring"),
                         ScriptedEngine(self.meta_records, "substring"))

    def acc(self, prompt: str) -> float:
        return oracle_accuracy(self.dataset, "val", self.table, prompt)

    def oracle_inner_score(self, spec: OptimizerSpec) -> float:
        """Best val score the inner loop can reach: every step of a phase proposes the same prompt."""
        current = self.program.prompts["executer"].value
        best = self.acc(current)
        for strategy, text in spec.phases():
            if strategy == "structure_search":
                candidate = self.structure_prompt
            else:
                marker = next(m for m in self.guidance if m in text)
                candidate = self.guidance[marker]
            if self.acc(candidate) > best:
                best = self.acc(candidate)
        return best


def metatextgrad_scenario(schedule_reply: str | None = None) -> MetaScenario:
    dataset = gen_word_sorting(70, 11, SPLITS)
    names = ["base", "A", "A2", "A3", "S", "C"]
    quality = (8, 10, 12, 11, 9, 16)
    table = {sort_prompt(n): q for n, q in zip(names, quality)}
    program = single_call_program(sort_prompt("base"))
    guidance = {"[[A]]": sort_prompt("A"), "[[A2]]": sort_prompt("A2"), "[[A3]]": sort_prompt("A3"),
                "[[C]]": sort_prompt("C")}
    structure_doc = json.loads(dump_program(single_call_program(sort_prompt("S"))))
    opt = [ScriptRecord(m, f"<improved>{p}</improved>") for m, p in guidance.items()]
    opt.append(ScriptRecord("# Pipeline language", "```json\n" + json.dumps(structure_doc) + "\n```"))
    opt.append(ScriptRecord("# Observed behaviour", CRITIQUE))
    if schedule_reply is None:
        schedule_reply = json.dumps({"schedule": [
            {"strategy": "structure_search", "repeats": 1},
            {"strategy": "prompt_tgd", "repeats": 1, "prompt": "Guide [[C]]"},
        ]})
    meta = [
        ScriptRecord('"schedule"', schedule_reply),
        ScriptRecord("Guide [[A]]", json.dumps({"improved_task_description": "Guide [[A2]]"})),
        ScriptRecord("Guide [[A2]]", json.dumps({"improved_task_description": "Guide [[A3]]"})),
        ScriptRecord("Guide [[S]]", json.dumps({"improved_task_description": "Guide [[S2]]"})),
        ScriptRecord("Guide [[S2]]", json.dumps({"improved_task_description": "Guide [[S3]]"})),
    ]
    inputs = [make_optimizer("prompt_tgd", "Guide [[A]]", name="TGD"),
              make_optimizer("structure_search", "Guide [[S]]", name="ADAS-TG")]
    return MetaScenario(dataset, program, table, inputs, guidance, sort_prompt("S"),
                        program_records(dataset, table), opt, meta)


def write_inner_config(tmp: Path, scenario: InnerScenario, cache_dir: Path | None = None,
                       seeds: tuple[int, ...] = (0,)) -> Path:
    """Files and a YAML config that reproduce ``scenario`` through the harness."""
    from metaopt.tasks import save_dataset

    save_dataset(scenario.dataset, tmp / "data.jsonl")
    (tmp / "program.json").write_text(dump_program(scenario.program), encoding="utf-8")
    write_transcript(tmp / "program_transcript.json", scenario.program_records, "exact")
    write_transcript(tmp / "optimizer_transcript.json", scenario.optimizer_records, "substring")
    lines = [
        "task: {dataset: data.jsonl}",
        "metric: exact_text",
        "program: program.json",
        "optimizers: [TGD]",
        f"iterations: {len(scenario.proposals)}",
        f"seeds: {list(seeds)}",
        "method: TGD",
        "benchmark: word_sorting",
        "engines:",
        "  program: {kind: scripted, transcript: program_transcript.json, mode: exact}",
        "  optimizer: {kind: scripted, transcript: optimizer_transcript.json, mode: substring}",
        "  meta: {kind: echo}",
        "output_dir: runs",
        "prices:",
        "  program: {prompt: 0.15, completion: 0.6}",
        "  optimizer: {prompt: 2.5, completion: 10.0}",
        "  meta: {prompt: 2.5, completion: 10.0}",
    ]
    if cache_dir is not None:
        lines.append(f"cache_dir: {cache_dir}")
    path = tmp / "config.yaml"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# (model output, reference, hand-assigned score) for the exact_choice metric
CHOICE_CASES = [
    ("Answer: A", "A", 1.0),
    ("Answer: B", "A", 0.0),
    ("reasoning...\nAnswer: (C)", "C", 1.0),
    ("Answer: **D**", "D", 1.0),
    ("Answer:D", "D", 1.0),
    ("answer: A", "A", 0.0),
    ("The answer is B.", "B", 0.0),
    ("Answer: A\n...on reflection\nAnswer: C", "C", 1.0),
    ("Answer: A\n...on reflection\nAnswer: C", "A", 0.0),
    ("Answer: E", "E", 0.0),
    ("Answer: Apple", "A", 0.0),
    ("Answer: B)", "B", 1.0),
    ("Answer:   \n  C", "C", 1.0),
    ("Answer: C\nAnswer: none of them", "C", 0.0),
    ("", "A", 0.0),
    ("Answer: b", "B", 0.0),
    ("Answer: (A) because of the mechanism", "(A)", 1.0),
    ("Final Answer: D", "D", 1.0),
    ("Answer: B", "Answer: B", 1.0),
    ("Answer: A", "not a letter", 0.0),
]


def cancel_pairs(tokens: list[str]) -> list[str]:
    """Brute-force Dyck reduction: delete adjacent matched pairs until none remain."""
    pairs = {("(", ")"), ("[", "]"), ("{", "}"), ("<", ">")}
    changed = True
    while changed:
        changed = False
        for i in range(len(tokens) - 1):
            if (tokens[i], tokens[i + 1]) in pairs:
                del tokens[i:i + 2]
                changed = True
                break
    return tokens
