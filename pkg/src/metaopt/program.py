"""Executable LLM programs: pipeline graphs with learnable prompt slots.

A program is a :class:`PipelineSpec` (a DAG of model calls and string
operators) plus the prompt values bound to its ``llm_call`` nodes. Programs
are immutable; optimizers derive new ones with :func:`clone_with_prompt` or by
building a fresh spec.
"""

from __future__ import annotations

import json
import re
from collections.abc import Mapping
from dataclasses import dataclass, replace
from types import MappingProxyType
from typing import TYPE_CHECKING, Any, Union

if TYPE_CHECKING:
    from .engine import Engine

INPUT = "input"
NODE_KINDS = ("llm_call", "split", "aggregate", "extract", "foreach")
DEFAULT_SEPARATOR = "\n"

Value = Union[str, list]


class DSLParseError(ValueError):
    """Malformed pipeline document. ``position`` is a char offset or a JSON path."""

    def __init__(self, message: str, position: int | str):
        super().__init__(f"{message} (at {position})")
        self.position = position


class ExecutionError(RuntimeError):
    def __init__(self, node_id: str, cause: BaseException):
        super().__init__(f"node {node_id!r} failed: {cause}")
        self.node_id = node_id
        self.cause = cause


@dataclass(frozen=True)
class TextVariable:
    """A learnable text value; ``feedback`` only ever grows."""

    value: str
    role_description: str
    learnable: bool = True
    feedback: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.role_description.strip():
            raise ValueError("role_description must be non-empty")
        object.__setattr__(self, "feedback", tuple(self.feedback))

    def with_value(self, value: str) -> TextVariable:
        return replace(self, value=value)

    def with_feedback(self, critique: str) -> TextVariable:
        return replace(self, feedback=self.feedback + (critique,))

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"value": self.value, "role_description": self.role_description}
        if not self.learnable:
            out["learnable"] = False
        if self.feedback:
            out["feedback"] = list(self.feedback)
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> TextVariable:
        return cls(
            value=str(data["value"]),
            role_description=str(data["role_description"]),
            learnable=bool(data.get("learnable", True)),
            feedback=tuple(data.get("feedback", ())),
        )


@dataclass(frozen=True)
class PipelineNode:
    id: str
    kind: str
    prompt_slot: str | None = None
    pattern: str | None = None
    separator: str | None = None
    inner: PipelineNode | None = None

    @property
    def arity(self) -> int | None:
        """Fixed number of input slots, or None for variadic aggregate."""
        return None if self.kind == "aggregate" else 1

    def llm_calls(self) -> int:
        if self.kind == "llm_call":
            return 1
        if self.kind == "foreach" and self.inner is not None:
            return self.inner.llm_calls()
        return 0

    def prompt_slots(self) -> list[str]:
        if self.kind == "llm_call" and self.prompt_slot:
            return [self.prompt_slot]
        if self.kind == "foreach" and self.inner is not None:
            return self.inner.prompt_slots()
        return []


def llm_call(id: str, prompt_slot: str) -> PipelineNode:
    return PipelineNode(id, "llm_call", prompt_slot=prompt_slot)


def split(id: str, pattern: str) -> PipelineNode:
    return PipelineNode(id, "split", pattern=pattern)


def aggregate(id: str, separator: str = DEFAULT_SEPARATOR) -> PipelineNode:
    return PipelineNode(id, "aggregate", separator=separator)


def extract(id: str, pattern: str) -> PipelineNode:
    return PipelineNode(id, "extract", pattern=pattern)


def foreach(id: str, inner: PipelineNode) -> PipelineNode:
    return PipelineNode(id, "foreach", inner=inner)


@dataclass(frozen=True)
class Edge:
    source: str
    target: str
    slot: int = 0


@dataclass(frozen=True)
class PipelineSpec:
    nodes: tuple[PipelineNode, ...]
    edges: tuple[Edge, ...]
    output: str

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))

    def node(self, node_id: str) -> PipelineNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def prompt_slots(self) -> list[str]:
        seen: list[str] = []
        for n in self.nodes:
            for slot in n.prompt_slots():
                if slot not in seen:
                    seen.append(slot)
        return seen

    def count_llm_calls(self) -> int:
        return sum(n.llm_calls() for n in self.nodes)


@dataclass(frozen=True)
class Violation:
    kind: str
    node_ids: tuple[str, ...]
    message: str


@dataclass(frozen=True)
class ValidationResult:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def kinds(self) -> set[str]:
        return {v.kind for v in self.violations}


def _check_node(node: PipelineNode, out: list[Violation], *, inner: bool = False) -> None:
    if node.kind not in NODE_KINDS:
        out.append(Violation("unknown_kind", (node.id,), f"unknown node kind {node.kind!r}"))
        return
    if node.kind == "llm_call" and not node.prompt_slot:
        out.append(Violation("missing_param", (node.id,), "llm_call needs a prompt_slot"))
    if node.kind in ("split", "extract"):
        if node.pattern is None:
            out.append(Violation("missing_param", (node.id,), f"{node.kind} needs a pattern"))
        else:
            try:
                re.compile(node.pattern)
            except re.error as exc:
                out.append(Violation("bad_pattern", (node.id,), f"pattern {node.pattern!r}: {exc}"))
    if node.kind == "foreach":
        if node.inner is None:
            out.append(Violation("missing_param", (node.id,), "foreach wraps exactly one inner node"))
        elif node.inner.kind == "foreach" or inner:
            out.append(Violation("nested_foreach", (node.id,), "foreach cannot wrap a foreach"))
        else:
            _check_node(node.inner, out, inner=True)


def _cycles(ids: list[str], succ: dict[str, list[str]]) -> list[list[str]]:
    # Tarjan's SCC; any SCC with >1 node, or a self loop, is a cycle.
    index: dict[str, int] = {}
    low: dict[str, int] = {}
    stack: list[str] = []
    on_stack: set[str] = set()
    found: list[list[str]] = []
    counter = 0

    def visit(v: str) -> None:
        nonlocal counter
        index[v] = low[v] = counter
        counter += 1
        stack.append(v)
        on_stack.add(v)
        for w in succ.get(v, ()):
            if w not in index:
                visit(w)
                low[v] = min(low[v], low[w])
            elif w in on_stack:
                low[v] = min(low[v], index[w])
        if low[v] == index[v]:
            comp = []
            while True:
                w = stack.pop()
                on_stack.discard(w)
                comp.append(w)
                if w == v:
                    break
            if len(comp) > 1 or v in succ.get(v, ()):
                found.append(sorted(comp, key=ids.index))

    for v in ids:
        if v not in index:
            visit(v)
    return found


def validate_spec(spec: PipelineSpec) -> ValidationResult:
    """Check structure; violations are returned, never raised."""
    out: list[Violation] = []
    ids = [n.id for n in spec.nodes]
    seen: set[str] = set()
    for n in spec.nodes:
        if n.id == INPUT:
            out.append(Violation("reserved_id", (n.id,), f"{INPUT!r} is reserved for the pipeline input"))
        if n.id in seen:
            out.append(Violation("duplicate_id", (n.id,), f"duplicate node id {n.id!r}"))
        seen.add(n.id)
        _check_node(n, out)

    if spec.output not in seen:
        out.append(Violation("missing_output", (spec.output,), f"output node {spec.output!r} does not exist"))

    feeds: dict[str, dict[int, int]] = {i: {} for i in ids}
    succ: dict[str, list[str]] = {i: [] for i in ids}
    for e in spec.edges:
        bad = [x for x in (e.source,) if x != INPUT and x not in seen]
        bad += [x for x in (e.target,) if x not in seen]
        if bad:
            out.append(Violation("unknown_node", tuple(bad), f"edge {e.source}->{e.target} references unknown node"))
            continue
        feeds[e.target][e.slot] = feeds[e.target].get(e.slot, 0) + 1
        if e.source != INPUT:
            succ[e.source].append(e.target)

    for n in spec.nodes:
        slots = feeds.get(n.id, {})
        for slot, count in slots.items():
            if count > 1:
                out.append(Violation("multiple_feeds", (n.id,), f"slot {slot} fed by {count} edges"))
        if n.arity is None:
            if not slots:
                out.append(Violation("dangling_slot", (n.id,), "aggregate has no inputs"))
            elif sorted(slots) != list(range(len(slots))):
                out.append(Violation("dangling_slot", (n.id,), f"aggregate slots {sorted(slots)} are not contiguous from 0"))
        else:
            if 0 not in slots:
                out.append(Violation("dangling_slot", (n.id,), "input slot 0 is not fed"))
            extra = sorted(s for s in slots if s != 0)
            if extra:
                out.append(Violation("unknown_slot", (n.id,), f"{n.kind} has no input slot(s) {extra}"))

    for comp in _cycles(list(dict.fromkeys(ids)), succ):
        out.append(Violation("cycle", tuple(comp), "cycle through " + " -> ".join(comp)))
    return ValidationResult(tuple(out))


class Program:
    """A pipeline spec bound to prompt values. Immutable and safe to share across threads."""

    __slots__ = ("_spec", "_prompts", "_task_description")

    def __init__(self, spec: PipelineSpec, prompts: Mapping[str, TextVariable], task_description: str = ""):
        slots = set(spec.prompt_slots())
        if set(prompts) != slots:
            missing = sorted(slots - set(prompts))
            extra = sorted(set(prompts) - slots)
            raise ValueError(f"prompts must cover exactly the pipeline's slots (missing={missing}, extra={extra})")
        object.__setattr__(self, "_spec", spec)
        object.__setattr__(self, "_prompts", MappingProxyType(dict(prompts)))
        object.__setattr__(self, "_task_description", task_description)

    def __setattr__(self, name, value):
        raise AttributeError("Program is immutable")

    @property
    def spec(self) -> PipelineSpec:
        return self._spec

    @property
    def prompts(self) -> Mapping[str, TextVariable]:
        return self._prompts

    @property
    def task_description(self) -> str:
        return self._task_description

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Program):
            return NotImplemented
        return (
            self.spec == other.spec
            and dict(self.prompts) == dict(other.prompts)
            and self.task_description == other.task_description
        )

    def __hash__(self):
        return hash((self.spec, tuple(sorted(self.prompts.items())), self.task_description))

    def __repr__(self) -> str:
        return f"Program(nodes={len(self.spec.nodes)}, slots={sorted(self.prompts)})"

    def with_prompts(self, prompts: Mapping[str, TextVariable]) -> Program:
        return Program(self.spec, prompts, self.task_description)


def clone_with_prompt(program: Program, slot: str, new_value: str) -> Program:
    if slot not in program.prompts:
        raise KeyError(f"unknown prompt slot {slot!r}")
    prompts = dict(program.prompts)
    prompts[slot] = prompts[slot].with_value(new_value)
    return program.with_prompts(prompts)


def compose_user_text(prompt: str, upstream: str) -> str:
    """User content of an llm_call: the node's prompt, then the upstream text."""
    if not upstream:
        return prompt
    if not prompt:
        return upstream
    return f"{prompt}\n\n{upstream}"


def _as_text(value: Value, separator: str = DEFAULT_SEPARATOR) -> str:
    if isinstance(value, list):
        return separator.join(_as_text(v, separator) for v in value)
    return value


def _topological_order(spec: PipelineSpec) -> list[PipelineNode]:
    position = {n.id: i for i, n in enumerate(spec.nodes)}
    indegree = {n.id: 0 for n in spec.nodes}
    succ: dict[str, list[str]] = {n.id: [] for n in spec.nodes}
    for e in spec.edges:
        if e.source != INPUT:
            indegree[e.target] += 1
            succ[e.source].append(e.target)
    ready = sorted((i for i, d in indegree.items() if d == 0), key=position.get)
    order: list[PipelineNode] = []
    while ready:
        nid = ready.pop(0)
        order.append(spec.nodes[position[nid]])
        for t in succ[nid]:
            indegree[t] -= 1
            if indegree[t] == 0:
                ready.append(t)
                ready.sort(key=position.get)
    return order


def _apply(node: PipelineNode, inputs: list[Value], program: Program, engine: Engine) -> Value:
    from .engine import EngineRequest

    if node.kind == "llm_call":
        upstream = _as_text(inputs[0])
        prompt = program.prompts[node.prompt_slot].value
        request = EngineRequest(
            system_text=program.task_description,
            user_text=compose_user_text(prompt, upstream),
            level="program",
        )
        return engine.complete(request).text
    if node.kind == "split":
        pieces = re.split(node.pattern, _as_text(inputs[0]).strip())
        return [p.strip() for p in pieces if p and p.strip()]
    if node.kind == "aggregate":
        sep = DEFAULT_SEPARATOR if node.separator is None else node.separator
        flat: list[str] = []
        for v in inputs:
            if isinstance(v, list):
                flat.extend(_as_text(x) for x in v)
            else:
                flat.append(v)
        return sep.join(flat)
    if node.kind == "extract":
        text = _as_text(inputs[0])
        m = re.search(node.pattern, text)
        if m is None:
            return text
        return m.group(1) if m.re.groups else m.group(0)
    if node.kind == "foreach":
        items = inputs[0] if isinstance(inputs[0], list) else [inputs[0]]
        return [_apply(node.inner, [item], program, engine) for item in items]
    raise ValueError(f"unknown node kind {node.kind!r}")


def forward(program: Program, input: str, engine: Engine) -> str:
    """Run the program on one input and return the output node's text."""
    spec = program.spec
    result = validate_spec(spec)
    if not result.ok:
        raise ValueError("invalid pipeline: " + "; ".join(v.message for v in result.violations))
    incoming: dict[str, dict[int, str]] = {n.id: {} for n in spec.nodes}
    for e in spec.edges:
        incoming[e.target][e.slot] = e.source
    values: dict[str, Value] = {INPUT: input}
    for node in _topological_order(spec):
        args = [values[incoming[node.id][s]] for s in sorted(incoming[node.id])]
        try:
            values[node.id] = _apply(node, args, program, engine)
        except Exception as exc:
            raise ExecutionError(node.id, exc) from exc
    return _as_text(values[spec.output])


# -- serialization -----------------------------------------------------------


def _node_to_dict(node: PipelineNode) -> dict[str, Any]:
    out: dict[str, Any] = {"id": node.id, "kind": node.kind}
    if node.prompt_slot is not None:
        out["prompt_slot"] = node.prompt_slot
    if node.pattern is not None:
        out["pattern"] = node.pattern
    if node.separator is not None:
        out["separator"] = node.separator
    if node.inner is not None:
        out["inner"] = _node_to_dict(node.inner)
    return out


def spec_to_dict(spec: PipelineSpec) -> dict[str, Any]:
    return {
        "nodes": [_node_to_dict(n) for n in spec.nodes],
        "edges": [{"from": e.source, "to": e.target, "slot": e.slot} for e in spec.edges],
        "output": spec.output,
    }


def serialize_spec(spec: PipelineSpec, indent: int | None = 2) -> str:
    return json.dumps(spec_to_dict(spec), indent=indent, ensure_ascii=False)


_NODE_KEYS = {"id", "kind", "prompt_slot", "pattern", "separator", "inner"}
_TEXT_PARAMS = ("prompt_slot", "pattern", "separator")


def _node_from_dict(data: Any, path: str) -> PipelineNode:
    if not isinstance(data, dict):
        raise DSLParseError("node must be an object", path)
    kind = data.get("kind")
    if kind not in NODE_KINDS:
        raise DSLParseError(f"unknown node kind {kind!r}", f"{path}.kind")
    node_id = data.get("id")
    if not isinstance(node_id, str) or not node_id:
        raise DSLParseError("node id must be a non-empty string", f"{path}.id")
    unknown = set(data) - _NODE_KEYS
    if unknown:
        raise DSLParseError(f"unknown node field(s) {sorted(unknown)}", path)
    for key in _TEXT_PARAMS:
        if key in data and not isinstance(data[key], str):
            raise DSLParseError(f"{key} must be a string", f"{path}.{key}")
    inner = None
    if "inner" in data:
        inner = _node_from_dict(data["inner"], f"{path}.inner")
    return PipelineNode(
        id=node_id,
        kind=kind,
        prompt_slot=data.get("prompt_slot"),
        pattern=data.get("pattern"),
        separator=data.get("separator"),
        inner=inner,
    )


def spec_from_dict(data: Any) -> PipelineSpec:
    if not isinstance(data, dict):
        raise DSLParseError("pipeline document must be an object", "$")
    for key in ("nodes", "edges", "output"):
        if key not in data:
            raise DSLParseError(f"missing top-level key {key!r}", "$")
    if not isinstance(data["nodes"], list):
        raise DSLParseError("nodes must be a list", "$.nodes")
    if not isinstance(data["edges"], list):
        raise DSLParseError("edges must be a list", "$.edges")
    if not isinstance(data["output"], str):
        raise DSLParseError("output must be a node id", "$.output")
    nodes = [_node_from_dict(n, f"$.nodes[{i}]") for i, n in enumerate(data["nodes"])]
    edges = []
    for i, e in enumerate(data["edges"]):
        path = f"$.edges[{i}]"
        if not isinstance(e, dict) or not isinstance(e.get("from"), str) or not isinstance(e.get("to"), str):
            raise DSLParseError("edge needs string 'from' and 'to'", path)
        slot = e.get("slot", 0)
        if not isinstance(slot, int) or isinstance(slot, bool) or slot < 0:
            raise DSLParseError("slot must be a non-negative integer", f"{path}.slot")
        edges.append(Edge(e["from"], e["to"], slot))
    return PipelineSpec(tuple(nodes), tuple(edges), data["output"])


def _loads(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise DSLParseError(exc.msg, exc.pos) from exc


def deserialize_spec(text: str) -> PipelineSpec:
    return spec_from_dict(_loads(text))


def program_to_dict(program: Program) -> dict[str, Any]:
    doc = spec_to_dict(program.spec)
    doc["prompts"] = {slot: var.to_dict() for slot, var in program.prompts.items()}
    doc["task_description"] = program.task_description
    return doc


def dump_program(program: Program, indent: int | None = 2) -> str:
    return json.dumps(program_to_dict(program), indent=indent, ensure_ascii=False)


def program_from_dict(data: Any, fallback: Mapping[str, TextVariable] | None = None,
                      task_description: str | None = None) -> Program:
    """Build a program from a DSL document.

    Slots missing from ``prompts`` are filled from ``fallback`` when given;
    a prompt entry may be a bare string, which inherits the fallback's role.
    """
    spec = spec_from_dict(data)
    raw = data.get("prompts", {})
    if not isinstance(raw, dict):
        raise DSLParseError("prompts must be an object", "$.prompts")
    fallback = fallback or {}
    prompts: dict[str, TextVariable] = {}
    for slot in spec.prompt_slots():
        entry = raw.get(slot)
        path = f"$.prompts.{slot}"
        if entry is None:
            if slot not in fallback:
                raise DSLParseError(f"no prompt given for slot {slot!r}", path)
            prompts[slot] = fallback[slot]
        elif isinstance(entry, str):
            role = fallback[slot].role_description if slot in fallback else f"prompt for {slot}"
            prompts[slot] = TextVariable(entry, role)
        elif isinstance(entry, dict) and isinstance(entry.get("value"), str):
            entry = dict(entry)
            entry.setdefault("role_description", f"prompt for {slot}")
            try:
                prompts[slot] = TextVariable.from_dict(entry)
            except ValueError as exc:
                raise DSLParseError(str(exc), path) from exc
        else:
            raise DSLParseError("prompt must be a string or an object with 'value'", path)
    if task_description is None:
        task_description = data.get("task_description", "")
    if not isinstance(task_description, str):
        raise DSLParseError("task_description must be a string", "$.task_description")
    return Program(spec, prompts, task_description)


def load_program(text: str) -> Program:
    return program_from_dict(_loads(text))

