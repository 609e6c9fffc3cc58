"""Trace data model and the tag scanner for structured model outputs.

A trace is the raw text a model produces under the three-block format::

    <think>...</think>
    <description> <tool name="..." args="...">observation</tool> ... </description>
    <answer>...</answer>

Tags are matched literally and case-sensitively. Model output is not XML,
so there is no entity decoding and no general nesting.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

from lingflow.errors import ParseError, SchemaError

BLOCKS = ("think", "description", "answer")

_TOOL_OPEN = "<tool"
_TOOL_CLOSE = "</tool>"
# Second attribute value runs to the first `">`, so args may contain bare quotes.
_TOOL_HEAD = re.compile(
    r'<tool\s+(name|args)="([^>]*?)"\s+(name|args)="(.*?)"\s*>', re.DOTALL
)
_TOOL_TAG_ANY = re.compile(r"<tool[\s>]|</tool>")
_IMAGE_REF = re.compile(r"\bimage\s*(\d+)", re.IGNORECASE)


@dataclass(frozen=True)
class ToolInvocation:
    name: str
    args: str
    body: str


@dataclass(frozen=True)
class QueryInstance:
    id: str
    question: str
    page_ids: tuple[str, ...]
    golden_answer: str
    golden_pages: frozenset[str] | None = None
    golden_region: tuple[float, float, float, float] | None = None
    meta: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if not self.page_ids:
            raise SchemaError(f"{self.id}: pages must be non-empty")
        if len(set(self.page_ids)) != len(self.page_ids):
            raise SchemaError(f"{self.id}: duplicate page ids")
        if self.golden_pages is not None and not self.golden_pages <= set(self.page_ids):
            raise SchemaError(f"{self.id}: golden_pages not a subset of pages")
        if self.golden_region is not None:
            x1, y1, x2, y2 = self.golden_region
            if not (x2 > x1 and y2 > y1):
                raise SchemaError(f"{self.id}: golden_region must have positive area")


@dataclass(frozen=True)
class ParsedTrace:
    think: str
    routed_pages: tuple[int, ...]
    exec_steps: tuple[ToolInvocation, ...]
    answer: str
    raw: str
    tag_order_ok: bool
    extras_outside_tags: str = ""
    description: str = ""
    malformed_tools: int = 0
    tools_outside_description: int = 0

    def page_subset(self, query: QueryInstance) -> list[str]:
        """Map 1-based ``Image k`` mentions onto the query's page ids."""
        n = len(query.page_ids)
        return [query.page_ids[k - 1] for k in self.routed_pages if 1 <= k <= n]


@dataclass
class TagLayout:
    """Positions of the three blocks and of any tool tags in a raw trace."""

    opens: dict[str, int]
    closes: dict[str, int]
    # block -> (open_start, inner_start, inner_end, close_end) for the first well-formed block
    spans: dict[str, tuple[int, int, int, int] | None]
    unclosed: list[str]
    tool_tag_positions: list[tuple[int, int]]

    @property
    def order_ok(self) -> bool:
        if any(self.opens[b] != 1 or self.closes[b] != 1 for b in BLOCKS):
            return False
        spans = [self.spans[b] for b in BLOCKS]
        if any(s is None for s in spans):
            return False
        return spans[0][3] <= spans[1][0] and spans[1][3] <= spans[2][0]

    @property
    def tools_outside_description(self) -> int:
        span = self.spans["description"]
        if span is None:
            return len(self.tool_tag_positions)
        lo, hi = span[1], span[2]
        return sum(1 for s, e in self.tool_tag_positions if s < lo or e > hi)

    def violation(self) -> str | None:
        """Most specific tag-order violation code, or None when the order is fine."""
        if any(self.spans[b] is None for b in BLOCKS):
            return "MissingBlock"
        if any(self.opens[b] > 1 or self.closes[b] > 1 for b in BLOCKS):
            return "DuplicateBlock"
        if not self.order_ok:
            return "WrongOrder"
        return None


def analyze_tags(raw: str) -> TagLayout:
    opens, closes, spans, unclosed = {}, {}, {}, []
    for block in BLOCKS:
        open_tag, close_tag = f"<{block}>", f"</{block}>"
        opens[block] = raw.count(open_tag)
        closes[block] = raw.count(close_tag)
        start = raw.find(open_tag)
        if start < 0:
            spans[block] = None
            continue
        inner = start + len(open_tag)
        end = raw.find(close_tag, inner)
        if end < 0:
            spans[block] = None
            unclosed.append(block)
            continue
        spans[block] = (start, inner, end, end + len(close_tag))
    tools = [(m.start(), m.end()) for m in _TOOL_TAG_ANY.finditer(raw)]
    return TagLayout(opens, closes, spans, unclosed, tools)


def scan_tool_invocations(text: str) -> tuple[list[ToolInvocation], int]:
    """Return (invocations in order, number of malformed tool fragments skipped)."""
    found: list[ToolInvocation] = []
    malformed = 0
    pos = 0
    while True:
        i = text.find(_TOOL_OPEN, pos)
        if i < 0:
            break
        nxt = text[i + len(_TOOL_OPEN): i + len(_TOOL_OPEN) + 1]
        if nxt and not (nxt.isspace() or nxt == ">"):
            # e.g. "<toolbox", not a tool tag at all
            pos = i + len(_TOOL_OPEN)
            continue
        m = _TOOL_HEAD.match(text, i)
        if m is None or m.group(1) == m.group(3):
            malformed += 1
            pos = i + len(_TOOL_OPEN)
            continue
        attrs = {m.group(1): m.group(2), m.group(3): m.group(4)}
        close = text.find(_TOOL_CLOSE, m.end())
        if close < 0 or not attrs["name"].strip():
            malformed += 1
            pos = m.end()
            continue
        found.append(ToolInvocation(attrs["name"].strip(), attrs["args"], text[m.end():close]))
        pos = close + len(_TOOL_CLOSE)
    return found, malformed


def extract_tool_invocations(description: str) -> list[ToolInvocation]:
    return scan_tool_invocations(description)[0]


def check_tag_order(raw: str) -> bool:
    """True iff think, description, answer each appear once, in order, with all tool tags inside description."""
    layout = analyze_tags(raw)
    return layout.order_ok and layout.tools_outside_description == 0


def _outside_text(raw: str, spans: list[tuple[int, int, int, int]]) -> str:
    pieces, pos = [], 0
    for start, _, _, end in sorted(spans):
        if start > pos:
            pieces.append(raw[pos:start])
        pos = max(pos, end)
    pieces.append(raw[pos:])
    return "\n".join(p.strip() for p in pieces if p.strip())


def parse_trace(raw: str) -> ParsedTrace:
    layout = analyze_tags(raw)
    if layout.unclosed:
        raise ParseError("UnclosedTag", f"<{layout.unclosed[0]}> has no closing tag")
    answer_span = layout.spans["answer"]
    if answer_span is None:
        raise ParseError("MissingAnswer")

    def inner(block: str) -> str:
        span = layout.spans[block]
        return raw[span[1]:span[2]] if span else ""

    think = inner("think")
    description = inner("description")
    steps, malformed = scan_tool_invocations(description)
    routed: list[int] = []
    for m in _IMAGE_REF.finditer(think):
        k = int(m.group(1))
        if k not in routed:
            routed.append(k)
    present = [s for s in layout.spans.values() if s is not None]
    return ParsedTrace(
        think=think,
        routed_pages=tuple(routed),
        exec_steps=tuple(steps),
        answer=raw[answer_span[1]:answer_span[2]],
        raw=raw,
        tag_order_ok=layout.order_ok,
        extras_outside_tags=_outside_text(raw, present),
        description=description,
        malformed_tools=malformed,
        tools_outside_description=layout.tools_outside_description,
    )


def serialize_tool(step: ToolInvocation) -> str:
    return f'<tool name="{step.name}" args="{step.args}">{step.body}</tool>'


def serialize_trace(trace: ParsedTrace) -> str:
    """Canonical three-block text; ``parse_trace`` recovers think, steps and answer exactly."""
    steps = "\n".join(serialize_tool(s) for s in trace.exec_steps)
    return (
        f"<think>{trace.think}</think>\n"
        f"<description>{steps}</description>\n"
        f"<answer>{trace.answer}</answer>"
    )


@dataclass
class CorpusRecord:
    line_no: int
    query: QueryInstance
    trace: ParsedTrace | None = None
    error: str | None = None
    raw: dict[str, Any] = field(default_factory=dict, repr=False)

    @property
    def ok(self) -> bool:
        return self.trace is not None


@dataclass
class TraceCorpus:
    records: list[CorpusRecord]
    source_path: str = ""

    @property
    def n_ok(self) -> int:
        return sum(r.ok for r in self.records)

    @property
    def n_failed(self) -> int:
        return len(self.records) - self.n_ok

    def __iter__(self) -> Iterator[CorpusRecord]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)


_REQUIRED = ("id", "question", "pages", "golden_answer")
_KNOWN = set(_REQUIRED) | {"trace", "golden_pages", "golden_region"}


def query_from_json(obj: Any, line_no: int = 0) -> QueryInstance:
    if not isinstance(obj, dict):
        raise SchemaError(f"line {line_no}: record is not an object")
    missing = [k for k in _REQUIRED if k not in obj]
    if missing:
        raise SchemaError(f"line {line_no}: missing keys {missing}")
    pages = obj["pages"]
    if not isinstance(pages, list) or not all(isinstance(p, str) for p in pages):
        raise SchemaError(f"line {line_no}: pages must be an array of strings")
    golden_pages = obj.get("golden_pages")
    region = obj.get("golden_region")
    try:
        return QueryInstance(
            id=str(obj["id"]),
            question=str(obj["question"]),
            page_ids=tuple(pages),
            golden_answer=str(obj["golden_answer"]),
            golden_pages=frozenset(golden_pages) if golden_pages is not None else None,
            golden_region=tuple(float(v) for v in region) if region is not None else None,
            meta={k: v for k, v in obj.items() if k not in _KNOWN},
        )
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"line {line_no}: {exc}") from exc


def iter_jsonl(path: str | Path) -> Iterator[tuple[int, Any]]:
    """Yield (1-based line number, decoded object), skipping blank lines."""
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield line_no, json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{line_no}: invalid JSON ({exc.msg})") from exc


def load_trace_corpus(path: str | Path, require_trace: bool = True) -> TraceCorpus:
    records = []
    for line_no, obj in iter_jsonl(path):
        query = query_from_json(obj, line_no)
        rec = CorpusRecord(line_no=line_no, query=query, raw=obj)
        if "trace" not in obj:
            if require_trace:
                raise SchemaError(f"{path}:{line_no}: missing keys ['trace']")
        else:
            try:
                rec.trace = parse_trace(str(obj["trace"]))
            except ParseError as exc:
                rec.error = exc.code
        records.append(rec)
    return TraceCorpus(records, str(path))
