"""Command-line entry point: ``lingflow <subcommand>``.

Exit codes: 0 success, 1 config error, 2 data error, 3 transport exhaustion.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from lingflow import curation, evaluation, retrieval
from lingflow.client import HTTPChatClient, SimulatedClock, StubClient, exact_match_judge
from lingflow.config import GEN_KEY_ENV, JUDGE_KEY_ENV, PipelineConfig, load_config
from lingflow.errors import ConfigError, DataError, LingflowError
from lingflow.pipeline import run_curation, run_evaluate, run_reward, write_json_atomic, write_jsonl_atomic
from lingflow.reward import difficulty_filter, dynamic_sampling_filter, group_advantages, GroupRollout
from lingflow.trace import iter_jsonl, load_trace_corpus, parse_trace

log = logging.getLogger("lingflow")


def _emit(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2, ensure_ascii=False)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _toolbox(path: str | None) -> curation.Toolbox:
    return curation.load_toolbox(path) if path else curation.deployed_toolbox()


def _trace_json(trace) -> dict:
    return {
        "think": trace.think,
        "routed_pages": list(trace.routed_pages),
        "exec_steps": [{"name": s.name, "args": s.args, "body": s.body} for s in trace.exec_steps],
        "answer": trace.answer,
        "tag_order_ok": trace.tag_order_ok,
        "extras_outside_tags": trace.extras_outside_tags,
        "malformed_tools": trace.malformed_tools,
        "tools_outside_description": trace.tools_outside_description,
    }


def cmd_parse(args, cfg: PipelineConfig) -> int:
    corpus = load_trace_corpus(args.input)
    rows = []
    for rec in corpus:
        row = {"id": rec.query.id, "line": rec.line_no}
        if rec.ok:
            row["trace"] = _trace_json(rec.trace)
        else:
            row["error"] = rec.error
        rows.append(row)
    if args.out:
        write_jsonl_atomic(rows, args.out)
    else:
        for row in rows:
            print(json.dumps(row, ensure_ascii=False))
    print(f"parsed {corpus.n_ok} ok, {corpus.n_failed} failed", file=sys.stderr)
    return 0


def cmd_curate(args, cfg: PipelineConfig) -> int:
    corpus = load_trace_corpus(args.input)
    defs = _toolbox(args.definitions).tools if args.definitions else ()
    toolbox, pool = run_curation(cfg, corpus, definitions=defs, toolbox_path=args.toolbox_out,
                                 pool_path=args.pool_out)
    for t in toolbox.tools:
        print(f"{t.name}\t{toolbox.count(t.name)}\t{100 * toolbox.frequency(t.name):.2f}%")
    print(f"coverage {toolbox.coverage:.5f} over {pool.trajectories_processed} trajectories")
    if pool.undefined:
        print(f"{len(pool.undefined)} tool uses without a definition (stubbed)", file=sys.stderr)
    return 0


def cmd_toolbox_render(args, cfg: PipelineConfig) -> int:
    text = curation.render_toolbox_prompt(_toolbox(args.toolbox), args.num_images)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text)
    return 0


def _judge_client(cfg: PipelineConfig):
    c = cfg.clients
    if c.stub_judge == "exact":
        return StubClient(fallback=exact_match_judge, latency=0.0)
    if c.stub_judge:
        return StubClient.from_file(c.stub_judge, latency=0.0)
    if c.judge_endpoint:
        return HTTPChatClient(c.judge_endpoint, os.environ.get(JUDGE_KEY_ENV), timeout=c.timeout_seconds,
                              max_retries=c.max_retries)
    return None


def _verdict_provider(cfg: PipelineConfig):
    client = _judge_client(cfg)
    if client is None:
        return None

    def provider(prediction: str, gold: str) -> bool:
        return evaluation.judge_verdict("", gold, prediction, client, model=cfg.clients.judge_model,
                                        max_attempts=cfg.clients.judge_max_attempts)

    return provider


def cmd_reward(args, cfg: PipelineConfig) -> int:
    corpus = load_trace_corpus(args.input)
    judge = _verdict_provider(cfg) if cfg.reward.answer_mode == "judge" else None
    run = run_reward(cfg, corpus, _toolbox(args.toolbox), judge=judge, report_path=args.out,
                     advantages_path=args.advantages_out, filter_path=args.filter_out)
    valid = sum(r.r_tool for r in run.records)
    correct = sum(r.r_ans for r in run.records)
    print(f"{len(run.records)} traces: {correct} correct, {valid} structurally valid")
    if run.groups:
        print(f"{len(run.groups)} groups: {len(run.kept)} kept, {len(run.dropped)} dropped (zero variance)")
    if run.filter_report:
        fr = run.filter_report
        print(f"difficulty filter: {fr.retained}/{fr.total} retained, histogram {fr.pass_rate_histogram}")
    return 0


def cmd_filter(args, cfg: PipelineConfig) -> int:
    records = {}
    for line_no, obj in iter_jsonl(args.input):
        try:
            records[str(obj["query_id"])] = [int(bool(v)) for v in obj["correct"]]
        except (KeyError, TypeError) as exc:
            raise DataError(f"line {line_no}: need query_id and correct[]") from exc
    report, retained = difficulty_filter(records, args.group_size or cfg.reward.group_size)
    out = {**report.to_json(), "retained_ids": retained}
    if args.out:
        write_json_atomic(out, args.out)
    print(f"{report.retained}/{report.total} retained, histogram {report.pass_rate_histogram}")
    return 0


def cmd_advantages(args, cfg: PipelineConfig) -> int:
    """Group a reward report by query_id and export advantages."""
    grouped: dict[str, list[float]] = {}
    for line_no, obj in iter_jsonl(args.input):
        try:
            grouped.setdefault(str(obj["query_id"]), []).append(float(obj["combined"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"line {line_no}: need query_id and combined") from exc
    groups = [GroupRollout(q, r, group_advantages(r, cfg.reward.advantage_epsilon)) for q, r in grouped.items()]
    kept, dropped = dynamic_sampling_filter(groups)
    flagged = {g.query_id: g for g in kept + dropped}
    rows = [flagged[g.query_id].to_json() for g in groups]
    if args.out:
        write_jsonl_atomic(rows, args.out)
    else:
        for row in rows:
            print(json.dumps(row))
    print(f"{len(kept)} kept, {len(dropped)} dropped", file=sys.stderr)
    return 0


def cmd_index_build(args, cfg: PipelineConfig) -> int:
    index = retrieval.build_index(args.input)
    retrieval.save_index(index, args.out)
    print(f"indexed {len(index)} pages, dim {index.dim}")
    return 0


def cmd_retrieve(args, cfg: PipelineConfig) -> int:
    index = retrieval.load_index(args.index)
    queries = retrieval.load_query_embeddings(args.queries)
    k = args.k or cfg.retrieval.k
    results = retrieval.retrieve_many(index, queries, k, cfg.retrieval.similarity)
    golds = {q.query_id: q.golden_pages for q in queries}
    out = {
        "k": k,
        "similarity": cfg.retrieval.similarity,
        "backend": retrieval.BACKEND,
        "results": [{"query_id": r.query_id, "ranked": [[p, s] for p, s in r.ranked]} for r in results],
    }
    judged, excluded = retrieval.split_judged(results, golds)
    if judged:
        metrics = {f"recall@{n}": retrieval.recall_at_k(results, golds, n) for n in sorted({1, 3, 5, k}) if n <= k}
        metrics["mrr@5"] = retrieval.mrr_at_k(results, golds, 5)
        out["metrics"] = {**metrics, "judged": len(judged), "excluded_without_gold": excluded}
    _emit(out, args.report)
    return 0


def cmd_evaluate(args, cfg: PipelineConfig) -> int:
    dataset = load_trace_corpus(args.input, require_trace=False)
    c = cfg.clients
    clock = None
    generator = None
    if c.stub_generation:
        clock = SimulatedClock()
        generator = StubClient.from_file(c.stub_generation, latency=c.stub_latency_seconds, clock=clock)
    elif c.generation_endpoint:
        generator = HTTPChatClient(c.generation_endpoint, os.environ.get(GEN_KEY_ENV),
                                   timeout=c.timeout_seconds, max_retries=c.max_retries)
    judge = None
    if cfg.evaluation.answer_mode == "judge":
        judge = _judge_client(cfg)
        if judge is None:
            raise ConfigError("answer_mode=judge needs clients.judge_endpoint or clients.stub_judge")
    index, query_embs = None, ()
    if args.index:
        if not args.query_embeddings:
            raise ConfigError("--index requires --query-embeddings")
        index = retrieval.load_index(args.index)
        query_embs = retrieval.load_query_embeddings(args.query_embeddings)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    kwargs = {"clock": clock} if clock is not None else {}
    report = run_evaluate(
        cfg, dataset, toolbox=_toolbox(args.toolbox), generator=generator, judge=judge,
        records_path=out_dir / "records.jsonl", report_path=out_dir / "report.json",
        resume=args.resume, index=index, query_embeddings=query_embs, image_root=args.image_root, **kwargs,
    )
    acc = "n/a" if report.accuracy is None else f"{report.accuracy:.4f}"
    print(f"accuracy {acc} over {report.counts['judged']} judged of {report.counts['total']}")
    return 0


def cmd_report(args, cfg: PipelineConfig) -> int:
    policy = cfg.evaluation.hit_policy
    records = [evaluation.record_from_json(obj, policy, n) for n, obj in iter_jsonl(args.input)]
    from lingflow.pipeline import report_config

    report = evaluation.aggregate_report(records, cfg.evaluation.group_keys, report_config(cfg))
    _emit(report.to_json(), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lingflow", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value by dotted path, e.g. reward.alpha=0.7")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("parse", help="parse a trace corpus")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_parse)

    s = sub.add_parser("curate", help="build the tool pool and Top-K toolbox")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--k", type=int)
    s.add_argument("--definitions", help="toolbox-format file of seed tool definitions")
    s.add_argument("--toolbox-out")
    s.add_argument("--pool-out")
    s.set_defaults(func=cmd_curate)

    s = sub.add_parser("toolbox", help="toolbox utilities")
    tsub = s.add_subparsers(dest="toolbox_command", required=True)
    r = tsub.add_parser("render", help="render the inference system prompt")
    r.add_argument("--toolbox", help="toolbox file (default: the deployed seven tools)")
    r.add_argument("--num-images", type=int, default=3)
    r.add_argument("--out")
    r.set_defaults(func=cmd_toolbox_render)

    s = sub.add_parser("reward", help="score traces and export advantages")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--toolbox")
    s.add_argument("--out", help="reward report (JSONL)")
    s.add_argument("--advantages-out")
    s.add_argument("--filter-out")
    s.set_defaults(func=cmd_reward)

    s = sub.add_parser("filter", help="difficulty filter over per-query rollout correctness")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--group-size", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_filter)

    s = sub.add_parser("advantages", help="group advantages from a reward report")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_advantages)

    s = sub.add_parser("index", help="page index utilities")
    isub = s.add_subparsers(dest="index_command", required=True)
    b = isub.add_parser("build", help="compile an ingestion file to a binary index")
    b.add_argument("--in", dest="input", required=True)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_index_build)

    s = sub.add_parser("retrieve", help="top-k retrieval with Recall@k / MRR@5")
    s.add_argument("--index", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--k", type=int)
    s.add_argument("--report")
    s.set_defaults(func=cmd_retrieve)

    s = sub.add_parser("evaluate", help="end-to-end evaluation run")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--toolbox")
    s.add_argument("--resume", action="store_true")
    s.add_argument("--index")
    s.add_argument("--query-embeddings")
    s.add_argument("--image-root")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="aggregate an eval record file")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.set)
        if getattr(args, "k", None) and args.command == "curate":
            overrides.append(f"curation.k={args.k}")
        cfg = load_config(args.config, overrides)
        return args.func(args, cfg)
    except LingflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
