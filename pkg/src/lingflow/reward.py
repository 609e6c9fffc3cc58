"""Composite rewards, group-relative advantages and rollout filtering."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

from lingflow.curation import Toolbox, normalize_tool_name
from lingflow.errors import EmptyAfterNormalization, JudgeUnavailable, LengthMismatch
from lingflow.trace import ParsedTrace, analyze_tags

ANSWER_MODES = ("exact_normalized", "judge")

# reason codes emitted by tool_reward
MISSING_BLOCK = "MissingBlock"
WRONG_ORDER = "WrongOrder"
DUPLICATE_BLOCK = "DuplicateBlock"
TOOL_OUTSIDE = "ToolOutsideDescription"
UNKNOWN_TOOL = "UnknownTool"
EMPTY_CHAIN = "EmptyChain"
EXTRA_TEXT = "ExtraText"


@dataclass
class RewardConfig:
    alpha: float = 0.8
    beta: float = 0.2
    answer_mode: str = "exact_normalized"
    group_size: int = 8
    advantage_epsilon: float = 1e-6
    require_tool_call: bool = True
    strict_extras: bool = False
    # exported for external trainers, not applied here
    clip_epsilon: float = 0.2
    clip_epsilon_high: float = 0.28

    def __post_init__(self) -> None:
        if not (0 <= self.alpha <= 1 and 0 <= self.beta <= 1) or self.alpha + self.beta <= 0:
            raise ValueError("alpha, beta must lie in [0, 1] with a positive sum")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.answer_mode not in ANSWER_MODES:
            raise ValueError(f"answer_mode must be one of {ANSWER_MODES}")


@dataclass
class RewardRecord:
    query_id: str
    r_ans: int
    r_tool: int
    combined: float
    validity_reasons: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "query_id": self.query_id,
            "r_ans": self.r_ans,
            "r_tool": self.r_tool,
            "combined": self.combined,
            "reasons": list(self.validity_reasons),
        }


@dataclass
class GroupRollout:
    query_id: str
    rewards: list[float]
    advantages: list[float] | None = None
    dropped: bool = False

    def to_json(self) -> dict:
        return {
            "query_id": self.query_id,
            "rewards": list(self.rewards),
            "advantages": list(self.advantages) if self.advantages is not None else None,
            "dropped": self.dropped,
        }


@dataclass
class FilterReport:
    total: int
    removed_all_correct: int
    retained: int
    pass_rate_histogram: list[int]

    def to_json(self) -> dict:
        return {
            "total": self.total,
            "removed_all_correct": self.removed_all_correct,
            "retained": self.retained,
            "pass_rate_histogram": list(self.pass_rate_histogram),
        }


_WS = re.compile(r"\s+")
_NUMBER = re.compile(r"[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?")


def normalize_answer(text: str) -> str:
    s = _WS.sub(" ", text.strip().lower())
    return s.rstrip(".,!?").rstrip()


def _as_number(s: str) -> float | None:
    s = s.replace("%", "").replace(",", "").strip()
    if _NUMBER.fullmatch(s):
        return float(s)
    return None


def answers_match(prediction: str, gold: str) -> bool:
    p, g = normalize_answer(prediction), normalize_answer(gold)
    if p == g:
        return True
    pn, gn = _as_number(p), _as_number(g)
    return pn is not None and gn is not None and pn == gn


# A verdict provider takes (prediction, gold) and says whether they agree.
VerdictProvider = Callable[[str, str], bool]


def answer_reward(
    prediction: str,
    gold: str,
    mode: str = "exact_normalized",
    judge: VerdictProvider | None = None,
) -> int:
    if mode == "exact_normalized":
        return int(answers_match(prediction, gold))
    if mode == "judge":
        if judge is None:
            raise JudgeUnavailable("answer_mode=judge but no verdict provider is wired")
        return int(bool(judge(prediction, gold)))
    raise ValueError(f"unknown answer mode {mode!r}")


def tool_reward(
    trace: ParsedTrace,
    toolbox: Toolbox | set[str],
    require_tool_call: bool = True,
    strict_extras: bool = False,
) -> tuple[int, list[str]]:
    """Structural validity bit with one reason code per violated clause."""
    names = toolbox.names if isinstance(toolbox, Toolbox) else set(toolbox)
    layout = analyze_tags(trace.raw)
    reasons = []
    violation = layout.violation()
    if violation:
        reasons.append(violation)
    if layout.tools_outside_description:
        reasons.append(TOOL_OUTSIDE)
    for step in trace.exec_steps:
        try:
            name = normalize_tool_name(step.name)
        except EmptyAfterNormalization:
            name = ""
        if name not in names:
            reasons.append(UNKNOWN_TOOL)
            break
    if require_tool_call and not trace.exec_steps:
        reasons.append(EMPTY_CHAIN)
    if strict_extras and trace.extras_outside_tags:
        reasons.append(EXTRA_TEXT)
    return (0 if reasons else 1), reasons


def combined_reward(r_ans: int, r_tool: int, cfg: RewardConfig | None = None) -> float:
    cfg = cfg or RewardConfig()
    return cfg.alpha * r_ans + cfg.beta * r_tool


def score_trace(
    query_id: str,
    trace: ParsedTrace,
    gold: str,
    toolbox: Toolbox,
    cfg: RewardConfig | None = None,
    judge: VerdictProvider | None = None,
) -> RewardRecord:
    cfg = cfg or RewardConfig()
    r_ans = answer_reward(trace.answer, gold, cfg.answer_mode, judge)
    r_tool, reasons = tool_reward(trace, toolbox, cfg.require_tool_call, cfg.strict_extras)
    return RewardRecord(query_id, r_ans, r_tool, combined_reward(r_ans, r_tool, cfg), reasons)


def group_advantages(rewards: Sequence[float], epsilon: float = 1e-6) -> list[float]:
    """(r - mean) / (population std + epsilon); constant groups map to zeros."""
    n = len(rewards)
    if n < 2:
        raise ValueError("a group needs at least two rewards")
    if all(r == rewards[0] for r in rewards):
        return [0.0] * n
    mean = math.fsum(rewards) / n
    centered = [r - mean for r in rewards]
    std = math.sqrt(math.fsum(c * c for c in centered) / n)
    if std + epsilon == 0:
        # spread below float resolution
        return [0.0] * n
    adv = [c / (std + epsilon) for c in centered]
    # remove the rounding residue so the group mean is zero to working precision
    drift = math.fsum(adv) / n
    return [a - drift for a in adv]


def dynamic_sampling_filter(
    groups: Sequence[GroupRollout],
) -> tuple[list[GroupRollout], list[GroupRollout]]:
    kept, dropped = [], []
    for g in groups:
        if all(r == g.rewards[0] for r in g.rewards):
            dropped.append(replace(g, dropped=True))
        else:
            kept.append(replace(g, dropped=False))
    return kept, dropped


def difficulty_filter(
    records: Mapping[str, Sequence[int]], group_size: int = 8
) -> tuple[FilterReport, list[str]]:
    """Drop queries whose every rollout was correct; keep the rest, including 0/G."""
    hist = [0] * (group_size + 1)
    retained = []
    removed = 0
    for qid, outcomes in records.items():
        if len(outcomes) != group_size:
            raise LengthMismatch(f"{qid}: {len(outcomes)} rollouts, expected {group_size}")
        n_correct = sum(1 for o in outcomes if o)
        hist[n_correct] += 1
        if n_correct == group_size:
            removed += 1
        else:
            retained.append(qid)
    report = FilterReport(len(records), removed, len(records) - removed, hist)
    return report, retained
