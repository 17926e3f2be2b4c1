"""Prompt templates for the optimizer and meta-optimizer calls.

Templates use ``str.format`` fields; literal braces are doubled.
"""

TGD_PROMPT = (
    "You are an optimizer inside a system that improves text variables such as prompts, "
    "solutions, or code. Read the critique of the current value and rewrite it so the "
    "downstream results get better. Be creative but stay faithful to the variable's role."
)

STRUCTURE_PROMPT = (
    "You design LLM pipelines. Given the current pipeline, its score history, and the "
    "pipeline language reference, propose a new pipeline layout (which model calls exist, "
    "how the text flows between them, and the prompt of every call) that should solve the "
    "task more reliably."
)

COMPOSITE_PROMPT = (
    "You run a sequence of optimization strategies over an LLM pipeline, one aspect per step."
)

FEEDBACK_SYSTEM = (
    "You are a critic reviewing an LLM pipeline. You point out concrete, actionable reasons "
    "for its mistakes and name the prompt most responsible."
)

FEEDBACK_TEMPLATE = """\
# Pipeline prompts
{prompts}

# Task
{question_type}

# Observed behaviour
{examples}

# Your task
{instruction}
Keep the critique short and specific. End with one line of the form "Slot: <name>" naming the \
prompt that should change, chosen from: {slots}.
"""

FEEDBACK_FAILURES = "The pipeline got the examples above wrong. Explain what went wrong and how the prompt should change."
FEEDBACK_GENERALIZE = (
    "The pipeline got the examples above right. Identify what makes these answers correct and how the "
    "prompt could be made more robust so it generalizes to harder inputs of the same kind."
)

EDIT_TEMPLATE = """\
# Optimizer guidance
{optimizer_prompt}

# Variable to improve
Name: {slot}
Role: {role}
Current value:
<current>
{value}
</current>

# Feedback
{feedback}

Optimization step: {step}/{total}

Write the improved value of the variable between <improved> and </improved>. \
Output nothing else inside the markers.
"""

EDIT_REASK = "\n\nYour previous reply was missing the <improved>...</improved> markers. Reply again using them."

DSL_REFERENCE = """\
A pipeline is a JSON object with keys "nodes", "edges", "output", "prompts" and optionally "task_description".
Node kinds:
  {"id": ID, "kind": "llm_call", "prompt_slot": SLOT}   model call; user content = prompt of SLOT + input text
  {"id": ID, "kind": "split", "pattern": REGEX}          split the input text into a list
  {"id": ID, "kind": "foreach", "inner": NODE}           apply the inner node to every list item
  {"id": ID, "kind": "aggregate", "separator": TEXT}     join its inputs (slots 0..k-1, lists flattened)
  {"id": ID, "kind": "extract", "pattern": REGEX}        first capture group, or the whole text if no match
Edges: {"from": ID or "input", "to": ID, "slot": N}. Every node except aggregate has exactly one input slot 0.
The graph must be acyclic and "output" names the node whose text is returned.
"prompts" maps each prompt SLOT to {"value": TEXT, "role_description": TEXT}.
"""

STRUCTURE_TEMPLATE = """\
# Current pipeline (score {best_score:.3f})
```json
{program}
```

# Best previous attempts
{history}

# Task
{question_type}

# Pipeline language
{dsl}

Optimization step: {step}/{total}

Reply with one complete pipeline document as JSON inside a ```json fenced block. Every llm_call \
slot must have a prompt in "prompts", and the pipeline must contain at least one llm_call.
"""

STRUCTURE_REASK = "\n\nYour previous reply could not be used: {error}. Reply again with a corrected pipeline."

META_PROMPT_TEMPLATE = """\
# Task Requirement

An optimizer improves an LLM pipeline so that the pipeline generates better outputs for its inputs.

An LLM pipeline consists of several model calls, each with a specific role defined by its prompt.

You will be given the general task description of an optimizer and the specific task the pipeline aims to solve.

Your task is to propose an improved optimizer task description so that the optimizer can better optimize the pipeline for the given task.

# Optimizer Code

Here is the definition of the optimizer: (just for reference)

{optimizer_source_code}

# The task of the optimizer

Specifically, the pipeline aims to solve this kind of question: {question_type}.

An example of the task is provided here:

Question: {example_question}

Answer: {example_answer}

The LLM optimizer wants to improve an LLM pipeline to solve such kind of problems.

# Current Task Description

Here is the current task description of the optimizer, which you can improve:
{optimizer_prompt}

# Your task

You should identify what the optimizer should pay attention to in order to improve the {optimizer_type} of the pipeline for solving the given task.

Conduct a detailed analysis of the given example, and respond in the following format:

```json
{{"improved_task_description": "..."}}
```
"""

META_PROMPT_REASK = (
    '\n\nYour previous reply did not contain a readable "improved_task_description" field. '
    "Reply again with the JSON object only."
)

OPTIMIZER_TYPES = {
    "prompt_tgd": "prompts",
    "structure_search": "structure",
    "composite_schedule": "structure and prompts",
}

STRATEGY_NOTES = {
    "prompt_tgd": "rewrites one prompt per step from a critique of the pipeline's mistakes",
    "structure_search": "proposes a whole new pipeline layout; this overwrites every prompt tuned before it",
}

META_STRUCTURE_TEMPLATE = """\
# Task Requirement

An optimizer improves an LLM pipeline so that the pipeline generates better outputs for its inputs.

The strategies and prompts of the current optimizers are fixed, and you will be given the definitions of some optimizers together with their validation scores.

Your task is to propose an improved optimizer by combining the given optimizers into a new one.

# Task Details

Each optimizer step optimizes a single aspect of the pipeline. Different strategies suit different purposes and may work best in a specific order. For example, a structure change overwrites the prompts of every previously optimized component, so it usually runs before prompt refinement.

Describe the new optimizer as a schedule: an ordered list of phases, each applying one strategy a number of times before moving to the next. A phase may override the strategy's optimizer prompt.

Available strategies:
{strategies}

# Input optimizers
{optimizers}

# Current best optimizer (score {best_score:.3f})
```json
{best}
```

# Response format

Reply with JSON only, using at most {max_phases} phases and repeats of at least 1:
```json
{{"schedule": [{{"strategy": "structure_search", "repeats": 1}}, {{"strategy": "prompt_tgd", "repeats": 5, "prompt": "optional override"}}]}}
```
"""

META_STRUCTURE_REASK = "\n\nYour previous schedule was rejected: {error}. Reply again with a valid schedule."
