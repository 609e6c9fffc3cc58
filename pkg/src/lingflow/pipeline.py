"""Orchestration: curation, reward/advantage export and end-to-end evaluation runs."""

from __future__ import annotations

import json
import logging
import os
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from lingflow.client import ChatRequest, build_messages, bounded_map
from lingflow.config import PipelineConfig
from lingflow.curation import (
    ToolDefinition,
    ToolPool,
    Toolbox,
    parse_curation_output,
    pool_to_json,
    save_json,
    select_topk,
    toolbox_to_json,
    trajectory_tool_set,
)
from lingflow.errors import (
    DataError,
    JudgeParseError,
    JudgeTransportError,
    LengthMismatch,
    ParseError,
    TransportError,
)
from lingflow.evaluation import (
    EvalRecord,
    HitPolicy,
    Report,
    aggregate_report,
    judge_verdict,
    hit_from_json,
    record_from_json,
)
from lingflow.prompts import render_messages
from lingflow.retrieval import PageIndex, QueryEmbedding, retrieve_topk
from lingflow.reward import (
    FilterReport,
    GroupRollout,
    RewardRecord,
    answers_match,
    difficulty_filter,
    dynamic_sampling_filter,
    group_advantages,
    score_trace,
    tool_reward,
)
from lingflow.trace import CorpusRecord, QueryInstance, TraceCorpus, parse_trace

logger = logging.getLogger(__name__)


def write_jsonl_atomic(rows: Iterable[dict], path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    os.replace(tmp, path)


def write_json_atomic(obj: Any, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    os.replace(tmp, path)


# --- curation -------------------------------------------------------------


def run_curation(
    config: PipelineConfig,
    corpus: TraceCorpus,
    *,
    definitions: Iterable[ToolDefinition] = (),
    toolbox_path: str | Path | None = None,
    pool_path: str | Path | None = None,
) -> tuple[Toolbox, ToolPool]:
    """Sequential pool update in corpus order, then Top-K selection.

    A corpus line may carry a ``curation`` string holding the curator model's
    output for that trajectory; its definitions and applications are used in
    place of the trace's own tool steps.
    """
    pool = ToolPool()
    pool.add_definitions(definitions)
    for rec in corpus:
        curated = rec.raw.get("curation")
        out = parse_curation_output(str(curated)) if curated is not None else None
        names = trajectory_tool_set(rec.trace, out, normalize=config.curation.normalize)
        pool.update(names, out.new_definitions if out else ())
    toolbox = select_topk(pool, config.curation.k)
    if toolbox_path:
        save_json(toolbox_to_json(toolbox), toolbox_path)
    if pool_path:
        save_json(pool_to_json(pool, config.curation.k), pool_path)
    logger.info("toolbox of %d tools covers %.4f of tool usage", len(toolbox.tools), toolbox.coverage)
    return toolbox, pool


# --- rewards --------------------------------------------------------------


@dataclass
class RewardRun:
    records: list[RewardRecord]
    groups: list[GroupRollout] = field(default_factory=list)
    filter_report: FilterReport | None = None
    retained_ids: list[str] = field(default_factory=list)

    @property
    def kept(self) -> list[GroupRollout]:
        return [g for g in self.groups if not g.dropped]

    @property
    def dropped(self) -> list[GroupRollout]:
        return [g for g in self.groups if g.dropped]


def _score_record(rec: CorpusRecord, toolbox: Toolbox, config: PipelineConfig, judge) -> RewardRecord:
    qid = rec.query.id
    if rec.trace is None:
        return RewardRecord(qid, 0, 0, 0.0, [rec.error or "Unparseable"])
    return score_trace(qid, rec.trace, rec.query.golden_answer, toolbox, config.reward, judge)


def group_by_query(records: Sequence[Any], key: Callable[[Any], str]) -> OrderedDict[str, list]:
    groups: OrderedDict[str, list] = OrderedDict()
    for r in records:
        groups.setdefault(key(r), []).append(r)
    return groups


def advantage_groups(rewards: Sequence[RewardRecord], cfg) -> list[GroupRollout]:
    groups = []
    for qid, recs in group_by_query(rewards, lambda r: r.query_id).items():
        values = [r.combined for r in recs]
        groups.append(GroupRollout(qid, values, group_advantages(values, cfg.advantage_epsilon)))
    kept, dropped = dynamic_sampling_filter(groups)
    flagged = {g.query_id: g for g in kept + dropped}
    return [flagged[g.query_id] for g in groups]


def run_reward(
    config: PipelineConfig,
    corpus: TraceCorpus,
    toolbox: Toolbox,
    *,
    judge=None,
    report_path: str | Path | None = None,
    advantages_path: str | Path | None = None,
    filter_path: str | Path | None = None,
) -> RewardRun:
    """Score every trace; when traces come in groups of G per query, also export advantages."""
    cfg = config.reward
    records = list(
        bounded_map(lambda r: _score_record(r, toolbox, config, judge), corpus.records,
                    config.clients.max_in_flight if judge is not None else 1)
    )
    run = RewardRun(records)
    sizes = {len(v) for v in group_by_query(records, lambda r: r.query_id).values()}
    if sizes - {1}:
        if sizes != {cfg.group_size}:
            raise LengthMismatch(f"group sizes {sorted(sizes)} in corpus, expected {cfg.group_size}")
        run.groups = advantage_groups(records, cfg)
        correctness = {g: [r.r_ans for r in recs]
                       for g, recs in group_by_query(records, lambda r: r.query_id).items()}
        run.filter_report, run.retained_ids = difficulty_filter(correctness, cfg.group_size)
    if report_path:
        write_jsonl_atomic((r.to_json() for r in records), report_path)
    if advantages_path and run.groups:
        write_jsonl_atomic((g.to_json() for g in run.groups), advantages_path)
    if filter_path and run.filter_report:
        write_json_atomic({**run.filter_report.to_json(), "retained_ids": run.retained_ids}, filter_path)
    return run


# --- evaluation -----------------------------------------------------------


@dataclass
class EvalContext:
    config: PipelineConfig
    toolbox: Toolbox
    generator: Any = None
    judge: Any = None
    clock: Callable[[], float] = time.perf_counter
    retrieved: dict[str, list[str]] = field(default_factory=dict)
    image_root: str | None = None


def _hit_for(query: QueryInstance, policy: HitPolicy) -> bool | None:
    if query.golden_region is None:
        return None
    obj = {**query.meta, "query_id": query.id, "golden_region": list(query.golden_region)}
    return hit_from_json(obj, policy)


def evaluate_one(ctx: EvalContext, rec: CorpusRecord) -> EvalRecord:
    cfg = ctx.config
    q = rec.query
    pages = ctx.retrieved.get(q.id) or list(q.page_ids)
    error = None
    tool_valid = None

    t0 = ctx.clock()
    try:
        if "trace" in rec.raw:
            raw_text = str(rec.raw["trace"])
        elif "prediction" in rec.raw:
            raw_text = None
            prediction = str(rec.raw["prediction"])
        else:
            if ctx.generator is None:
                raise DataError(f"{q.id}: no recorded trace and no generation client")
            system, user = render_messages(
                "lang2act", {"toolbox": ctx.toolbox, "num_images": len(pages), "query": q.question,
                             "images": pages})
            images = [os.path.join(ctx.image_root, p) for p in pages] if ctx.image_root else pages
            request = ChatRequest(
                model=cfg.clients.generation_model,
                messages=build_messages(system, user, images, cfg.clients.inline_images),
                temperature=cfg.clients.temperature,
                query_id=q.id,
            )
            raw_text = ctx.generator.generate(request).content
        if raw_text is not None:
            trace = parse_trace(raw_text)
            prediction = trace.answer.strip()
            bit, _ = tool_reward(trace, ctx.toolbox, cfg.reward.require_tool_call, cfg.reward.strict_extras)
            tool_valid = bool(bit)
    except ParseError as exc:
        prediction, tool_valid, error = "", False, exc.code
    except TransportError as exc:
        logger.warning("generation failed for %s: %s", q.id, exc)
        prediction, error = "", "generation_failure"
    latency = ctx.clock() - t0

    correct: bool | None
    if error == "generation_failure":
        correct = None
    elif cfg.evaluation.answer_mode == "judge":
        try:
            correct = judge_verdict(
                q.question, q.golden_answer, prediction, ctx.judge,
                model=cfg.clients.judge_model, max_attempts=cfg.clients.judge_max_attempts,
                query_id=q.id, temperature=cfg.clients.judge_temperature,
            )
        except (JudgeParseError, JudgeTransportError) as exc:
            logger.warning("judge failed for %s: %s", q.id, exc)
            correct, error = None, "judge_failure"
    else:
        correct = answers_match(prediction, q.golden_answer)

    extra: dict[str, Any] = {}
    for key in ("attended_regions", "page_id"):
        if key in q.meta:
            extra[key] = q.meta[key]
    if q.golden_region is not None:
        extra["golden_region"] = list(q.golden_region)
    return EvalRecord(
        query_id=q.id,
        prediction=prediction,
        gold=q.golden_answer,
        correct=correct,
        hit=_hit_for(q, HitPolicy.parse(cfg.evaluation.hit_policy)),
        latency_seconds=round(latency, 6),
        benchmark=str(q.meta.get("benchmark", "")),
        hop=str(q.meta.get("hop", "unknown")),
        tool_valid=tool_valid,
        error=error,
        extra=extra,
    )


def _read_partial(path: Path) -> list[dict]:
    """Completed records from a previous run; a torn final line is discarded."""
    if not path.exists():
        return []
    rows, good_bytes = [], 0
    with open(path, "rb") as fh:
        for line in fh:
            try:
                rows.append(json.loads(line))
            except (json.JSONDecodeError, UnicodeDecodeError):
                break
            if not line.endswith(b"\n"):
                rows.pop()
                break
            good_bytes += len(line)
    if good_bytes != path.stat().st_size:
        with open(path, "r+b") as fh:
            fh.truncate(good_bytes)
    return rows


def report_config(config: PipelineConfig) -> dict:
    return {
        "hit_policy": str(HitPolicy.parse(config.evaluation.hit_policy)),
        "answer_mode": config.evaluation.answer_mode,
        "judge_model": config.clients.judge_model if config.evaluation.answer_mode == "judge" else None,
        "judge_stub": config.clients.stub_judge,
        "generation_model": config.clients.generation_model,
        "alpha": config.reward.alpha,
        "beta": config.reward.beta,
        "retrieval_k": config.retrieval.k,
        "toolbox_k": config.curation.k,
        "seed": config.seed,
    }


def run_evaluate(
    config: PipelineConfig,
    dataset: TraceCorpus,
    *,
    toolbox: Toolbox,
    generator=None,
    judge=None,
    records_path: str | Path | None = None,
    report_path: str | Path | None = None,
    resume: bool = False,
    clock: Callable[[], float] = time.perf_counter,
    index: PageIndex | None = None,
    query_embeddings: Sequence[QueryEmbedding] = (),
    image_root: str | None = None,
) -> Report:
    """retrieve (optional) -> render -> generate -> parse -> judge, per query; then aggregate."""
    retrieved = {}
    if index is not None:
        for qe in query_embeddings:
            retrieved[qe.query_id] = retrieve_topk(
                index, qe.matrix, config.retrieval.k, qe.query_id, config.retrieval.similarity
            ).page_ids
    ctx = EvalContext(config, toolbox, generator, judge, clock, retrieved, image_root)

    done: dict[str, dict] = {}
    out_fh = None
    if records_path is not None:
        records_path = Path(records_path)
        if resume:
            for row in _read_partial(records_path):
                done[str(row["query_id"])] = row
        elif records_path.exists():
            records_path.unlink()
        out_fh = open(records_path, "a", encoding="utf-8")

    pending = [r for r in dataset.records if r.query.id not in done]
    if done:
        logger.info("resuming: %d done, %d pending", len(done), len(pending))
    fresh: dict[str, EvalRecord] = {}
    try:
        for result in bounded_map(lambda r: evaluate_one(ctx, r), pending, config.clients.max_in_flight):
            fresh[result.query_id] = result
            if out_fh is not None:
                out_fh.write(json.dumps(result.to_json(), ensure_ascii=False) + "\n")
                out_fh.flush()
    finally:
        if out_fh is not None:
            out_fh.close()

    records = [
        fresh[r.query.id] if r.query.id in fresh else record_from_json(done[r.query.id])
        for r in dataset.records
    ]
    if records and all(r.error == "generation_failure" for r in records):
        raise TransportError("every generation request failed")
    report = aggregate_report(records, config.evaluation.group_keys, report_config(config))
    if report_path is not None:
        write_json_atomic(report.to_json(), report_path)
    return report
