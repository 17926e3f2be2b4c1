"""Reference programs expressed in the pipeline DSL.

Includes the four learned programs (word sorting, Dyck languages, GPQA,
MMLU abstract algebra) and a builder for single-call baselines.
"""

from __future__ import annotations

from .program import (
    INPUT,
    Edge,
    PipelineSpec,
    Program,
    TextVariable,
    aggregate,
    extract,
    foreach,
    llm_call,
    split,
)

REASONING_TASK = (
    "You will answer a reasoning question. Think step by step. The last line of your response "
    "should be of the following format: 'Answer: $VALUE' where VALUE is the answer to the question."
)


def _var(value: str, role: str) -> TextVariable:
    return TextVariable(" ".join(value.split()), role)


def single_call_program(prompt: str, task_description: str = REASONING_TASK, *,
                        slot: str = "executer", extract_pattern: str | None = None,
                        role: str = "prompt for the executer, which aims to solve the task") -> Program:
    nodes = [llm_call(slot, slot)]
    edges = [Edge(INPUT, slot)]
    output = slot
    if extract_pattern is not None:
        nodes.append(extract("answer", extract_pattern))
        edges.append(Edge(slot, "answer"))
        output = "answer"
    return Program(PipelineSpec(tuple(nodes), tuple(edges), output), {slot: _var(prompt, role)}, task_description)


def word_sorting_program() -> Program:
    spec = PipelineSpec(
        nodes=(
            llm_call("planner", "planner_prompt"),
            split("steps", r"\n+"),
            foreach("sub_solutions", llm_call("subsolver", "subsolver_prompt")),
            aggregate("aggregated_reasoning"),
            aggregate("final_input"),
            llm_call("finalsolver", "final_prompt"),
        ),
        edges=(
            Edge(INPUT, "planner"),
            Edge("planner", "steps"),
            Edge("steps", "sub_solutions"),
            Edge("sub_solutions", "aggregated_reasoning"),
            Edge(INPUT, "final_input", 0),
            Edge("aggregated_reasoning", "final_input", 1),
            Edge("final_input", "finalsolver"),
        ),
        output="finalsolver",
    )
    prompts = {
        "planner_prompt": _var("Create a step by step plan for the question. Provide each step on a new line.",
                               "planner prompt"),
        "subsolver_prompt": _var("Solve this sub-step in detail, without giving the final answer.",
                                 "sub-step solver prompt"),
        "final_prompt": _var("Combine all reasoning into a coherent final response, ending with the format: "
                             "Answer: $VALUE", "final answer prompt"),
    }
    return Program(spec, prompts, REASONING_TASK)


_DYCK_AGENTS = (
    ("initial_planner", "Break down the Dyck sequence validation into detailed steps. Format as numbered "
     "steps: 1), 2), etc.", "creates detailed analysis plan"),
    ("type_analyzer", "Identify and categorize all bracket types. List each type and its corresponding closing "
     "bracket. Format: 'Types: [pairs]'", "analyzes bracket types and pairs"),
    ("stack_validator", "Simulate stack operations for bracket matching. Show stack state after each operation. "
     "End with 'Answer: Valid/Invalid'", "performs stack-based validation"),
    ("nesting_analyzer", "Analyze nesting hierarchy. Check if inner brackets close before outer brackets. "
     "End with 'Answer: Proper/Improper'", "validates nesting hierarchy"),
    ("depth_checker", "Calculate maximum nesting depth and verify balanced structure. End with "
     "'Answer: Depth=X,Balanced=Yes/No'", "checks nesting depth and balance"),
    ("sequence_validator", "Validate sequence completeness and correctness. End with "
     "'Answer: Complete/Incomplete'", "validates sequence completeness"),
    ("final_evaluator", "Synthesize all analysis results and determine if this is a valid Dyck sequence. "
     "End with 'Answer: Yes/No'", "makes final validity determination"),
)


def dyck_program() -> Program:
    calls = [llm_call(name, f"{name}_prompt") for name, _, _ in _DYCK_AGENTS]
    nodes = [
        calls[0],
        split("analysis_steps", r"\d\)"),
        calls[1],
        aggregate("stack_input"), calls[2],
        aggregate("nesting_input"), calls[3],
        aggregate("depth_input"), calls[4],
        aggregate("sequence_input"), calls[5],
        aggregate("final_input"), calls[6],
        extract("answer", r"Answer: (.+)"),
    ]
    edges = [
        Edge(INPUT, "initial_planner"),
        Edge("initial_planner", "analysis_steps"),
        Edge(INPUT, "type_analyzer"),
        Edge(INPUT, "stack_input", 0), Edge("type_analyzer", "stack_input", 1),
        Edge("stack_input", "stack_validator"),
        Edge(INPUT, "nesting_input", 0), Edge("stack_validator", "nesting_input", 1),
        Edge("nesting_input", "nesting_analyzer"),
        Edge(INPUT, "depth_input", 0), Edge("nesting_analyzer", "depth_input", 1),
        Edge("depth_input", "depth_checker"),
        Edge(INPUT, "sequence_input", 0), Edge("depth_checker", "sequence_input", 1),
        Edge("sequence_input", "sequence_validator"),
        Edge(INPUT, "final_input", 0),
        Edge("stack_validator", "final_input", 1),
        Edge("nesting_analyzer", "final_input", 2),
        Edge("depth_checker", "final_input", 3),
        Edge("sequence_validator", "final_input", 4),
        Edge("final_input", "final_evaluator"),
        Edge("final_evaluator", "answer"),
    ]
    prompts = {f"{name}_prompt": _var(text, role) for name, text, role in _DYCK_AGENTS}
    return Program(PipelineSpec(tuple(nodes), tuple(edges), "answer"), prompts, REASONING_TASK)


GPQA_PROMPT = (
    "You will answer a multiple choice question. Begin by identifying and listing all key details and "
    "constraints from the problem statement. Use explicit reasoning steps to outline the solution, "
    "incorporating relevant scientific principles such as reaction mechanisms or stereochemistry. Verify your "
    "initial conclusions by cross-checking each step against the problem's requirements. Consider alternative "
    "answers and evaluate why they might be correct or incorrect. Provide a clear justification for your answer "
    "choice, and rate your confidence in the final answer on a scale from 1 to 10, explaining your rationale. "
    "The last line of your response should be of the following format: 'Answer: $VALUE' where VALUE is one of ABCD."
)

MMLU_PROMPT = (
    "You will answer a multiple choice question. Analyze each statement separately and provide your reasoning. "
    "Use clear, logical steps, verifying each sub-component of the problem systematically. Present each statement "
    "distinctly using bullet points or numbers, ensuring the final conclusion is clearly separated from the "
    "statement evaluations. Include any assumptions or context necessary for each conclusion. After evaluating "
    "each statement, reexamine your conclusions to confirm their correctness. Introduce a summary verification "
    "step before concluding. The last line of your response should be of the following format: 'Answer: $VALUE' "
    "where VALUE is one of ABCD."
)


def gpqa_program() -> Program:
    return single_call_program(GPQA_PROMPT)


def mmlu_program() -> Program:
    return single_call_program(MMLU_PROMPT)


BUILTIN_PROGRAMS = {
    "word_sorting": word_sorting_program,
    "dyck": dyck_program,
    "gpqa": gpqa_program,
    "mmlu": mmlu_program,
}
