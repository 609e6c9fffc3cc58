"""Prompt templates and rendering.

Each kind renders to a (system, user) pair. ``render_prompt`` joins the two
with a blank line; ``render_messages`` keeps them apart for chat requests.
Output is byte-stable for identical parameters.
"""

from __future__ import annotations

from typing import Any, Iterable, Mapping, Sequence

from lingflow.errors import MissingParam

VANILLA_SYSTEM = (
    "Answer the given question based on the {num_images} image(s) provided. "
    "You must conduct reasoning inside <think> and </think> first. "
    "After reasoning, you should directly provide the answer inside <answer> and </answer>, "
    "without detailed illustrations."
)

ACTION_RL_SYSTEM = """\
You are a specialized AI assistant for visual question answering based on multiple provided document images. Your task is to answer the user's question by carefully analyzing all images.

Your response must strictly follow this format:
<think>...</think>
<description>...</description>
<answer>...</answer>

Guidance:
- You have exactly {num_images} image(s). Analyze each briefly in <think>, then conclude which one(s) you used.
- In <description>, describe only the visual evidence you actually used, and clearly indicate where it appears in the image.
- In <answer>, output only the final concise answer."""

CURATION_SYSTEM = """\
You are the Lead Architect of a Document Visual Reasoning System. Deconstruct questions into atomic, structure-aware cognitive operations.

### CORE PHILOSOPHY
1) Structure Awareness: Tools must reflect layout (rows, columns, axes).
2) Atomic Data Extraction: Locate region first, then extract data.
3) Analytical Calculation: Define precise math tools (subtract, rank_values).

### CURRENT TOOL POOL
{tool_pool_text}

### GUIDELINES: DESIGNING DOCUMENT TOOLS
- Tables/Grids: Navigate rows/columns (e.g., locate_table_row, read_cell_value).
- Charts/Graphs: Map visuals to values (e.g., map_bar_to_axis).
- Reasoning: Define specific logic tools for calculation/comparison.

### COGNITIVE CAPABILITY SPECTRUM
* Layout: (locate_row/col, find_title, find_legend, intersect_regions)
* Data: (read_text, read_numeric, extract_key_value_pair)
* Chart: (trace_line_trend, get_bar_height, map_color_to_category)
* Math & Logic: (compute_pct, subtract_values, find_max, count_rows)
* Verify: (verify_signature_presence, check_checkbox_status)

### OUTPUT FORMAT (MANDATORY)
1. New Definitions: DEFINE_TOOL: name || args || desc
2. Applications: <tool name="..." args="...">reasoning</tool>
3. End: END_OF_TOOLS

### EXAMPLE (Structure & Math)
DESC: Found 'Q3 Revenue', read value, compared to 'Q2', calculated growth.
OUTPUT:
DEFINE_TOOL: subtract_values || val1, val2 || Calculate difference.
<tool name="locate_table_row" args="row 'Q3 Revenue'">Row 4</tool>
<tool name="read_cell_value" args="Row 4, col 'Amount'">$150M</tool>
<tool name="subtract_values" args="150, 100">50</tool>
END_OF_TOOLS"""

CURATION_USER = """\
Analyze the reasoning steps.
DESCRIPTION: {description}
OUTPUT:"""

LANG2ACT_SYSTEM = """\
You are a specialized AI assistant for visual question answering. Your task is to answer the user's question by carefully analyzing all the provided images.

Your response must strictly follow this XML format:
<think>...</think>
<description>...</description>
<answer>...</answer>

Guidance:
1. In <think>, analyze all {num_images} images and state which one(s) contain relevant evidence.
2. In <description>, focus only on the selected images and describe your reasoning process using the tools below.
3. In <answer>, provide only the final, concise answer grounded in visual evidence.

Available Tools for <description>:
{tool_lines}"""

TOOL_LINE = '-- <tool name="{name}" args="{params}"> {description} </tool>'

JUDGE_SYSTEM = """\
You are an expert evaluation system for a question answering chatbot.
You will be given one evaluation item. You will see a query, a reference answer, and a generated answer.
Your task is to evaluate the correctness of the generated answer.
Your response MUST be exactly one line, formatted as <judge>True</judge> if the generated answer is correct, or <judge>False</judge> otherwise.
Do not add any other text or explanations."""

JUDGE_USER = """\
Query: {query}
Reference Answer: {gold}
Generated Answer: {prediction}"""

REASONING_JUDGE_SYSTEM = """\
You are an expert evaluator for Large Language Models. Your task is to evaluate the quality of a model's "Chain of Thought" (reasoning process) and final answer based on the user's Query and the provided Gold Answer.

Please evaluate the [Model Response] based on the following three specific dimensions. For each dimension, assign a score from 1 to 5 stars.

1. Coherence (Reasoning Logic & Fluency)
Definition: Evaluates whether the chain of thought is logically sound, structured, and easy to follow.
(1 Star: Disjointed/Confusing; 3 Stars: Readable but with leaps; 5 Stars: Perfectly smooth/Logical).

2. Non-Hallucination (Faithfulness)
Definition: Evaluates whether the response contains fabricated information.
(1 Star: Major fabrications; 3 Stars: Minor errors; 5 Stars: Entirely truthful).

3. Factual Consistency (Alignment with Gold Answer)
Definition: Evaluates whether the model's final conclusion aligns with the Gold Answer.
(1 Star: Contradictory; 3 Stars: Partially consistent; 5 Stars: Fully consistent).

Output Format:
Please strictly follow this format:
Coherence: [Score]
Non-Hallucination: [Score]
Factual Consistency: [Score]
Average: [Average Score]
Explanation: [Brief explanation]"""

REASONING_JUDGE_USER = """\
Query: {query}
Gold Answer: {gold}
Model Response: {response}"""

QUERY_USER = """\
Query: {query}
Images: {images}"""

KINDS = ("vanilla", "action_rl", "curation", "lang2act", "judge", "reasoning_judge")


def _need(params: Mapping[str, Any], *names: str) -> list[Any]:
    missing = [n for n in names if params.get(n) is None]
    if missing:
        raise MissingParam(f"missing prompt parameter(s): {', '.join(missing)}")
    return [params[n] for n in names]


def _num_images(params: Mapping[str, Any]) -> int:
    (n,) = _need(params, "num_images")
    n = int(n)
    if n < 1:
        raise ValueError("num_images must be >= 1")
    return n


def format_image_refs(images: Sequence[str] | None) -> str:
    if not images:
        return ""
    return " ".join(f"[Image {i}: {ref}]" for i, ref in enumerate(images, 1))


def format_tool_lines(tools: Iterable[Any]) -> str:
    """One line per non-stub definition. Accepts a Toolbox or an iterable of definitions."""
    if hasattr(tools, "renderable"):
        tools = tools.renderable()
    return "\n".join(
        TOOL_LINE.format(name=t.name, params=t.param_spec, description=t.description)
        for t in tools
        if not getattr(t, "stub", False)
    )


def format_tool_pool(pool: Any) -> str:
    if pool is None or isinstance(pool, str):
        return pool or ""
    if hasattr(pool, "ranked"):
        defs = [pool.definitions[n] for n, _ in pool.ranked()]
    else:
        defs = list(pool)
    return "\n".join(f"{d.name} || {d.param_spec} || {d.description}" for d in defs if not d.stub)


def render_system(kind: str, params: Mapping[str, Any]) -> str:
    if kind == "vanilla":
        return VANILLA_SYSTEM.format(num_images=_num_images(params))
    if kind == "action_rl":
        return ACTION_RL_SYSTEM.format(num_images=_num_images(params))
    if kind == "curation":
        return CURATION_SYSTEM.format(tool_pool_text=format_tool_pool(params.get("tool_pool_text")))
    if kind == "lang2act":
        n = _num_images(params)
        (toolbox,) = _need(params, "toolbox")
        return LANG2ACT_SYSTEM.format(num_images=n, tool_lines=format_tool_lines(toolbox))
    if kind == "judge":
        return JUDGE_SYSTEM
    if kind == "reasoning_judge":
        return REASONING_JUDGE_SYSTEM
    raise ValueError(f"unknown prompt kind {kind!r}; expected one of {KINDS}")


def render_user(kind: str, params: Mapping[str, Any]) -> str:
    if kind in ("vanilla", "action_rl", "lang2act"):
        (query,) = _need(params, "query")
        return QUERY_USER.format(query=query, images=format_image_refs(params.get("images")))
    if kind == "curation":
        (description,) = _need(params, "description")
        return CURATION_USER.format(description=description)
    if kind == "judge":
        query, gold, prediction = _need(params, "query", "gold", "prediction")
        return JUDGE_USER.format(query=query, gold=gold, prediction=prediction)
    if kind == "reasoning_judge":
        query, gold, response = _need(params, "query", "gold", "response")
        return REASONING_JUDGE_USER.format(query=query, gold=gold, response=response)
    raise ValueError(f"unknown prompt kind {kind!r}; expected one of {KINDS}")


def render_messages(kind: str, params: Mapping[str, Any]) -> tuple[str, str]:
    return render_system(kind, params), render_user(kind, params)


def render_prompt(kind: str, params: Mapping[str, Any]) -> str:
    """Full prompt text. ``lang2act`` without a query renders the system part only."""
    system = render_system(kind, params)
    if kind == "lang2act" and params.get("query") is None:
        return system
    return f"{system}\n\n{render_user(kind, params)}"
