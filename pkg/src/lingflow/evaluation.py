"""Accuracy, perception analytics and latency reporting over evaluation records."""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Sequence

from lingflow.errors import (
    JudgeParseError,
    JudgeTransportError,
    NoCorrect,
    NoHits,
    NoPerceptionData,
    PageMismatch,
    SchemaError,
    TransportError,
)
from lingflow.prompts import render_messages

Rect = tuple[float, float, float, float]
HOPS = ("single", "multi", "unknown")

_JUDGE_TAG = re.compile(r"<judge>\s*(True|False)\s*</judge>")


def parse_judge_reply(text: str) -> bool | None:
    """True/False from the first ``<judge>`` verdict, None when the reply is malformed."""
    m = _JUDGE_TAG.search(text or "")
    if m is None:
        return None
    return m.group(1) == "True"


def judge_verdict(question: str, gold: str, prediction: str, client, *, model: str = "",
                  max_attempts: int = 3, query_id: str | None = None, temperature: float = 0.0) -> bool:
    from lingflow.client import ChatRequest, build_messages

    system, user = render_messages("judge", {"query": question, "gold": gold, "prediction": prediction})
    request = ChatRequest(model=model, messages=build_messages(system, user), temperature=temperature,
                          query_id=query_id)
    last = ""
    for _ in range(max(1, max_attempts)):
        try:
            reply = client.generate(request)
        except TransportError as exc:
            raise JudgeTransportError(str(exc)) from exc
        verdict = parse_judge_reply(reply.content)
        if verdict is not None:
            return verdict
        last = reply.content
    raise JudgeParseError(f"no <judge> verdict after {max_attempts} attempts: {last[:120]!r}")


@dataclass(frozen=True)
class HitPolicy:
    kind: str = "intersect"
    threshold: float = 0.5

    @classmethod
    def parse(cls, spec: str | HitPolicy) -> HitPolicy:
        if isinstance(spec, HitPolicy):
            return spec
        spec = spec.strip()
        if spec in ("intersect", "peak_in_box"):
            return cls(spec)
        m = re.fullmatch(r"iou(?:[:(]\s*([0-9.]+)\s*\)?)?", spec)
        if m:
            return cls("iou", float(m.group(1)) if m.group(1) else 0.5)
        raise ValueError(f"unknown hit policy {spec!r}")

    def __str__(self) -> str:
        return f"iou({self.threshold:g})" if self.kind == "iou" else self.kind


@dataclass
class AttentionRecord:
    query_id: str
    page_id: str | None
    attended_regions: list[Rect]
    weights: list[float] | None = None

    def __post_init__(self) -> None:
        for r in self.attended_regions:
            if not (r[2] > r[0] and r[3] > r[1]):
                raise SchemaError(f"{self.query_id}: attended region {r} has no area")
        if self.weights is not None:
            if len(self.weights) != len(self.attended_regions):
                raise SchemaError(f"{self.query_id}: one weight per region required")
            if any(w < 0 for w in self.weights):
                raise SchemaError(f"{self.query_id}: negative attention weight")


def _area(r: Rect) -> float:
    return max(0.0, r[2] - r[0]) * max(0.0, r[3] - r[1])


def _overlap(a: Rect, b: Rect) -> float:
    return _area((max(a[0], b[0]), max(a[1], b[1]), min(a[2], b[2]), min(a[3], b[3])))


def iou(a: Rect, b: Rect) -> float:
    inter = _overlap(a, b)
    union = _area(a) + _area(b) - inter
    return inter / union if union > 0 else 0.0


def perception_hit(attn: AttentionRecord, golden: Rect, policy: str | HitPolicy = "intersect",
                   golden_page: str | None = None) -> bool:
    policy = HitPolicy.parse(policy)
    if golden_page is not None and attn.page_id is not None and attn.page_id != golden_page:
        raise PageMismatch(f"{attn.query_id}: attention on {attn.page_id}, golden region on {golden_page}")
    regions = attn.attended_regions
    if not regions:
        return False
    if policy.kind == "intersect":
        return any(_overlap(r, golden) > 0 for r in regions)
    if policy.kind == "iou":
        return max(iou(r, golden) for r in regions) >= policy.threshold
    weights = attn.weights or [1.0] * len(regions)
    peak = regions[max(range(len(regions)), key=lambda i: (weights[i], -i))]
    cx, cy = (peak[0] + peak[2]) / 2, (peak[1] + peak[3]) / 2
    return golden[0] <= cx <= golden[2] and golden[1] <= cy <= golden[3]


@dataclass
class EvalRecord:
    query_id: str
    prediction: str
    gold: str
    correct: bool | None
    hit: bool | None = None
    latency_seconds: float | None = None
    benchmark: str = ""
    hop: str = "unknown"
    tool_valid: bool | None = None
    error: str | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.latency_seconds is not None and self.latency_seconds < 0:
            raise SchemaError(f"{self.query_id}: negative latency")
        if self.hop not in HOPS:
            self.hop = "unknown"

    def to_json(self) -> dict:
        out = asdict(self)
        extra = out.pop("extra")
        out.update(extra)
        return out


_RECORD_FIELDS = {"query_id", "prediction", "gold", "correct", "hit", "latency_seconds",
                  "benchmark", "hop", "tool_valid", "error"}


def record_from_json(obj: dict, hit_policy: str | HitPolicy = "intersect", line_no: int = 0) -> EvalRecord:
    """Build a record from an eval input line, deriving correctness and hit when absent."""
    from lingflow.reward import answers_match

    for key in ("query_id", "prediction", "gold"):
        if key not in obj:
            raise SchemaError(f"line {line_no}: missing key {key!r}")
    prediction, gold = str(obj["prediction"]), str(obj["gold"])
    correct = obj.get("correct", None) if "correct" in obj else answers_match(prediction, gold)
    hit = obj.get("hit")
    if hit is None:
        hit = hit_from_json(obj, hit_policy)
    return EvalRecord(
        query_id=str(obj["query_id"]),
        prediction=prediction,
        gold=gold,
        correct=None if correct is None else bool(correct),
        hit=hit,
        latency_seconds=obj.get("latency_seconds"),
        benchmark=str(obj.get("benchmark", "")),
        hop=str(obj.get("hop", "unknown")),
        tool_valid=obj.get("tool_valid"),
        error=obj.get("error"),
        extra={k: v for k, v in obj.items() if k not in _RECORD_FIELDS},
    )


def hit_from_json(obj: dict, policy: str | HitPolicy = "intersect") -> bool | None:
    regions, golden = obj.get("attended_regions"), obj.get("golden_region")
    if regions is None or golden is None:
        return None
    rects, weights = [], []
    for r in regions:
        if isinstance(r, dict):
            rects.append(tuple(float(v) for v in r["box"]))
            weights.append(float(r.get("weight", 1.0)))
        else:
            rects.append(tuple(float(v) for v in r))
            weights.append(1.0)
    attn = AttentionRecord(str(obj.get("query_id", "")), obj.get("attended_page_id", obj.get("page_id")),
                           rects, weights)
    return perception_hit(attn, tuple(float(v) for v in golden), policy, obj.get("page_id"))


def _perception_subset(records: Iterable[EvalRecord]) -> list[EvalRecord]:
    return [r for r in records if r.hit is not None and r.correct is not None]


def accuracy(records: Iterable[EvalRecord]) -> float:
    judged = [r for r in records if r.correct is not None]
    if not judged:
        raise ValueError("no judged records")
    return sum(r.correct for r in judged) / len(judged)


def perception_rate(records: Iterable[EvalRecord]) -> float:
    sub = _perception_subset(records)
    if not sub:
        raise NoPerceptionData("no record carries perception data")
    return sum(r.hit for r in sub) / len(sub)


def v_precision(records: Iterable[EvalRecord]) -> float:
    hits = [r for r in _perception_subset(records) if r.hit]
    if not hits:
        raise NoHits("no record hit the golden region")
    return sum(r.correct for r in hits) / len(hits)


def v_recall(records: Iterable[EvalRecord]) -> float:
    correct = [r for r in _perception_subset(records) if r.correct]
    if not correct:
        raise NoCorrect("no correctly answered record with perception data")
    return sum(r.hit for r in correct) / len(correct)


def _percentile(sorted_vals: Sequence[float], q: float) -> float:
    if len(sorted_vals) == 1:
        return sorted_vals[0]
    pos = (len(sorted_vals) - 1) * q
    lo = math.floor(pos)
    hi = min(lo + 1, len(sorted_vals) - 1)
    return sorted_vals[lo] + (sorted_vals[hi] - sorted_vals[lo]) * (pos - lo)


def _tally(records: Sequence[EvalRecord]) -> dict:
    n = len(records)
    c = sum(1 for r in records if r.correct)
    return {"n": n, "correct": c, "accuracy": c / n if n else None}


@dataclass
class Report:
    accuracy: float | None
    counts: dict[str, int]
    per_benchmark: dict[str, dict]
    per_hop: dict[str, dict]
    per_group: dict[str, dict]
    perception: dict[str, Any] | None
    latency: dict[str, Any] | None
    tool_validity_rate: float | None
    config: dict[str, Any] = field(default_factory=dict)

    @property
    def perception_rate(self) -> float | None:
        return self.perception and self.perception["perception_rate"]

    @property
    def v_precision(self) -> float | None:
        return self.perception and self.perception["v_precision"]

    @property
    def v_recall(self) -> float | None:
        return self.perception and self.perception["v_recall"]

    @property
    def mean_latency(self) -> float | None:
        return self.latency and self.latency["mean"]

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "counts": self.counts,
            "per_benchmark": self.per_benchmark,
            "per_hop": self.per_hop,
            "per_group": self.per_group,
            "perception": self.perception,
            "latency": self.latency,
            "tool_validity_rate": self.tool_validity_rate,
            "config": self.config,
        }


def aggregate_report(records: Sequence[EvalRecord], group_keys: Sequence[str] = ("benchmark", "hop"),
                     config: dict | None = None) -> Report:
    if not records:
        raise ValueError("cannot aggregate an empty record set")
    records = sorted(records, key=lambda r: r.query_id)
    judged = [r for r in records if r.correct is not None]
    failures = [r for r in records if r.correct is None]

    def breakdown(keys: Sequence[str]) -> dict[str, dict]:
        groups: dict[str, list[EvalRecord]] = {}
        for r in judged:
            label = "/".join(str(getattr(r, k)) or "-" for k in keys)
            groups.setdefault(label, []).append(r)
        return {label: _tally(groups[label]) for label in sorted(groups)}

    sub = _perception_subset(records)
    perception = None
    if sub:
        n = len(sub)
        n_hit = sum(1 for r in sub if r.hit)
        n_cor = sum(1 for r in sub if r.correct)
        joint = sum(1 for r in sub if r.hit and r.correct)
        perception = {
            "n": n,
            "hits": n_hit,
            "correct": n_cor,
            "correct_and_hit": joint,
            "perception_rate": n_hit / n,
            "accuracy": n_cor / n,
            "v_precision": joint / n_hit if n_hit else None,
            "v_recall": joint / n_cor if n_cor else None,
            "joint_fraction": joint / n,
        }

    lat = sorted(r.latency_seconds for r in records if r.latency_seconds is not None)
    latency = None
    if lat:
        latency = {
            "n": len(lat),
            "mean": math.fsum(lat) / len(lat),
            "p50": _percentile(lat, 0.50),
            "p90": _percentile(lat, 0.90),
            "p95": _percentile(lat, 0.95),
            "max": lat[-1],
        }
    validity = [r.tool_valid for r in records if r.tool_valid is not None]

    return Report(
        accuracy=sum(r.correct for r in judged) / len(judged) if judged else None,
        counts={
            "total": len(records),
            "judged": len(judged),
            "correct": sum(1 for r in judged if r.correct),
            "judge_failures": sum(1 for r in failures if r.error == "judge_failure"),
            "other_failures": sum(1 for r in failures if r.error != "judge_failure"),
        },
        per_benchmark=breakdown(group_keys[:1]) if group_keys else {},
        per_hop=breakdown(group_keys[1:2]) if len(group_keys) > 1 else {},
        per_group=breakdown(group_keys),
        perception=perception,
        latency=latency,
        tool_validity_rate=sum(validity) / len(validity) if validity else None,
        config=dict(config or {}),
    )
