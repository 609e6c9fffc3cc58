"""Tool pool maintenance and Top-K toolbox selection.

Trajectories are processed in order. Each one contributes the *set* of tools
it used, and a tool's frequency is the number of trajectories whose set
contains it (presence, not call multiplicity).
"""

from __future__ import annotations

import json
import logging
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from lingflow.errors import EmptyAfterNormalization, EmptyPool, SchemaError
from lingflow.trace import ParsedTrace, ToolInvocation, scan_tool_invocations

logger = logging.getLogger(__name__)

END_SENTINEL = "END_OF_TOOLS"
DEFINE_PREFIX = "DEFINE_TOOL:"
DEFAULT_K = 7


def normalize_tool_name(raw: str) -> str:
    """Canonical tool identifier: lowercase ``[a-z][a-z0-9_]*``.

    >>> normalize_tool_name("Read Text-Element")
    'read_text_element'
    """
    s = raw.strip().lower()
    s = re.sub(r"[\s\-]", "_", s)
    s = re.sub(r"[^a-z0-9_]", "", s)
    s = re.sub(r"_+", "_", s)
    s = s.lstrip("_0123456789").rstrip("_")
    if not s:
        raise EmptyAfterNormalization(repr(raw))
    return s


@dataclass(frozen=True)
class ToolDefinition:
    name: str
    description: str
    param_spec: str
    stub: bool = False


# Deployed seven-tool box, in the order the inference prompt lists them.
DEPLOYED_TOOLS = (
    ToolDefinition("locate_visual_element", "Locate specific visual elements or regions based on structural hints.", "Image k: structural hint"),
    ToolDefinition("read_text_element", "Read and transcribe visible text from the located region.", "Image k: locator/region"),
    ToolDefinition("read_numeric_value", "Extract specific numeric values or counts from visual elements.", "Image k: data point"),
    ToolDefinition("identify_entity_attribute", "Identify specific attributes associated with entities.", "Image k: entity"),
    ToolDefinition("compare_values", "Compare quantitative values to determine ordering or equality.", "Image k: value A vs value B"),
    ToolDefinition("compute_percentage", "Compute the percentage based on given values.", "part_value, total_value"),
    ToolDefinition("infer_missing_information", "Infer missing information based on given data.", "Image k: data"),
)


@dataclass
class CurationOutput:
    new_definitions: list[ToolDefinition]
    applications: list[ToolInvocation]
    terminated: bool
    skipped_definitions: int = 0
    malformed_applications: int = 0

    def unknown_applications(self, pool: ToolPool | None = None) -> list[ToolInvocation]:
        known = {d.name for d in self.new_definitions}
        if pool is not None:
            known |= pool.definitions.keys()
        out = []
        for app in self.applications:
            try:
                name = normalize_tool_name(app.name)
            except EmptyAfterNormalization:
                name = ""
            if name not in known:
                out.append(app)
        return out


def parse_curation_output(text: str) -> CurationOutput:
    cut = text.find(END_SENTINEL)
    terminated = cut >= 0
    if terminated:
        text = text[:cut]
    defs, skipped = [], 0
    for line in text.splitlines():
        line = line.strip()
        if not line.startswith(DEFINE_PREFIX):
            continue
        parts = [p.strip() for p in line[len(DEFINE_PREFIX):].split("||")]
        if len(parts) < 3 or not all(parts[:3]):
            skipped += 1
            continue
        name, params, desc = parts[0], parts[1], "||".join(parts[2:]).strip()
        try:
            defs.append(ToolDefinition(normalize_tool_name(name), desc, params))
        except EmptyAfterNormalization:
            skipped += 1
    apps, malformed = scan_tool_invocations(text)
    return CurationOutput(defs, apps, terminated, skipped, malformed)


def trajectory_tool_set(
    trace: ParsedTrace | None, curation: CurationOutput | None = None, normalize: bool = True
) -> set[str]:
    """Deduplicated canonical names used by one trajectory.

    When a curation pass is supplied, its applications replace the trace's own steps.
    """
    if curation is not None:
        steps: Iterable[ToolInvocation] = curation.applications
    elif trace is not None:
        steps = trace.exec_steps
    else:
        return set()
    names = set()
    for step in steps:
        try:
            names.add(normalize_tool_name(step.name) if normalize else step.name.strip())
        except EmptyAfterNormalization:
            logger.debug("dropping tool with unusable name %r", step.name)
    return names


def _rank_key(name: str, count: int, first_seen: int) -> tuple[int, int, str]:
    return (-count, first_seen, name)


@dataclass
class ToolPool:
    """Growing tool pool. Single writer: ``update`` calls are serialized by a lock."""

    definitions: dict[str, ToolDefinition] = field(default_factory=dict)
    presence_count: dict[str, int] = field(default_factory=dict)
    first_seen: dict[str, int] = field(default_factory=dict)
    trajectories_processed: int = 0
    undefined: list[tuple[int, str]] = field(default_factory=list)
    conflicts: list[tuple[str, ToolDefinition]] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def add_definitions(self, defs: Iterable[ToolDefinition]) -> None:
        for d in defs:
            cur = self.definitions.get(d.name)
            if cur is None or (cur.stub and not d.stub):
                self.definitions[d.name] = d
            elif (cur.description, cur.param_spec) != (d.description, d.param_spec):
                self.conflicts.append((d.name, d))
                logger.info("keeping first definition of %s; ignoring %r", d.name, d.description)

    def update(self, names: Iterable[str], defs: Iterable[ToolDefinition] = ()) -> ToolPool:
        with self._lock:
            self.add_definitions(defs)
            idx = self.trajectories_processed
            for name in sorted(set(names)):
                if name not in self.definitions:
                    self.undefined.append((idx, name))
                    self.definitions[name] = ToolDefinition(name, "", "", stub=True)
                self.presence_count[name] = self.presence_count.get(name, 0) + 1
                self.first_seen.setdefault(name, idx)
            self.trajectories_processed += 1
        return self

    def ranked(self) -> list[tuple[str, int]]:
        counted = [(n, c) for n, c in self.presence_count.items() if c > 0]
        counted.sort(key=lambda nc: _rank_key(nc[0], nc[1], self.first_seen[nc[0]]))
        return counted

    def frequency(self, name: str) -> float:
        if not self.trajectories_processed:
            return 0.0
        return self.presence_count.get(name, 0) / self.trajectories_processed


def update_pool(pool: ToolPool, s: Iterable[str], defs: Iterable[ToolDefinition] = ()) -> ToolPool:
    return pool.update(s, defs)


@dataclass
class Toolbox:
    tools: list[ToolDefinition]
    k: int
    coverage: float
    source_pool_stats: tuple[tuple[str, int], ...] = ()
    trajectories_processed: int = 0

    @property
    def names(self) -> set[str]:
        return {t.name for t in self.tools}

    def count(self, name: str) -> int:
        return dict(self.source_pool_stats).get(name, 0)

    def frequency(self, name: str) -> float:
        if not self.trajectories_processed:
            return 0.0
        return self.count(name) / self.trajectories_processed

    def renderable(self) -> list[ToolDefinition]:
        return [t for t in self.tools if not t.stub]


def select_topk(pool: ToolPool, k: int = DEFAULT_K) -> Toolbox:
    if k < 1:
        raise ValueError("k must be >= 1")
    ranked = pool.ranked()
    if not ranked:
        raise EmptyPool("no tool has a positive presence count")
    total = sum(c for _, c in ranked)
    top = ranked[:k]
    return Toolbox(
        tools=[pool.definitions[n] for n, _ in top],
        k=k,
        coverage=sum(c for _, c in top) / total,
        source_pool_stats=tuple(ranked),
        trajectories_processed=pool.trajectories_processed,
    )


def render_toolbox_prompt(toolbox: Toolbox, num_images: int) -> str:
    from lingflow.prompts import render_prompt

    return render_prompt("lang2act", {"toolbox": toolbox, "num_images": num_images})


def _tool_entry(d: ToolDefinition, count: int) -> dict:
    entry = {"name": d.name, "params": d.param_spec, "description": d.description, "count": count}
    if d.stub:
        entry["stub"] = True
    return entry


def toolbox_to_json(toolbox: Toolbox) -> dict:
    counts = dict(toolbox.source_pool_stats)
    return {
        "k": toolbox.k,
        "coverage": toolbox.coverage,
        "tools": [_tool_entry(t, counts.get(t.name, 0)) for t in toolbox.tools],
    }


def pool_to_json(pool: ToolPool, k: int = DEFAULT_K) -> dict:
    ranked = pool.ranked()
    total = sum(c for _, c in ranked)
    top = sum(c for _, c in ranked[:k])
    return {
        "k": k,
        "coverage": top / total if total else 0.0,
        "tools": [_tool_entry(pool.definitions[n], c) for n, c in ranked],
        "trajectories_processed": pool.trajectories_processed,
        "counts": {n: c for n, c in ranked},
        "first_seen": {n: pool.first_seen[n] for n, _ in ranked},
    }


def _def_from_entry(entry: dict) -> ToolDefinition:
    try:
        return ToolDefinition(
            entry["name"], entry.get("description", ""), entry.get("params", ""), bool(entry.get("stub", False))
        )
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"bad tool entry {entry!r}") from exc


def toolbox_from_json(obj: dict) -> Toolbox:
    try:
        entries = obj["tools"]
        tools = [_def_from_entry(e) for e in entries]
        return Toolbox(
            tools=tools,
            k=int(obj.get("k", len(tools))),
            coverage=float(obj.get("coverage", 1.0)),
            source_pool_stats=tuple((e["name"], int(e.get("count", 0))) for e in entries),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"bad toolbox file: {exc}") from exc


def pool_from_json(obj: dict) -> ToolPool:
    pool = ToolPool()
    try:
        for e in obj["tools"]:
            pool.definitions[e["name"]] = _def_from_entry(e)
        pool.presence_count = {n: int(c) for n, c in obj["counts"].items()}
        pool.first_seen = {n: int(i) for n, i in obj.get("first_seen", {}).items()}
        for n in pool.presence_count:
            pool.first_seen.setdefault(n, 0)
        pool.trajectories_processed = int(obj["trajectories_processed"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"bad pool snapshot: {exc}") from exc
    return pool


def save_json(obj: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def load_toolbox(path: str | Path) -> Toolbox:
    try:
        return toolbox_from_json(json.loads(Path(path).read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON") from exc


def deployed_toolbox() -> Toolbox:
    return Toolbox(list(DEPLOYED_TOOLS), k=len(DEPLOYED_TOOLS), coverage=1.0)
