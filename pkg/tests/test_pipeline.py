import json
import random
from pathlib import Path

import pytest

from builders import write_jsonl
from lingflow.client import SimulatedClock, StubClient, exact_match_judge
from lingflow.config import PipelineConfig, config_from_dict
from lingflow.curation import deployed_toolbox
from lingflow.errors import LengthMismatch, TransportError
from lingflow.pipeline import run_curation, run_evaluate, run_reward
from lingflow.retrieval import PageIndex, QueryEmbedding
from lingflow.trace import load_trace_corpus

FIXTURES = Path(__file__).parent / "fixtures"
BOX = deployed_toolbox()

VALID = ('<think>Image 1</think><description><tool name="read_text_element" args="Image 1: x">{a}</tool>'
         "</description><answer>{a}</answer>")


def base(qid, **kw):
    return {"id": qid, "question": "?", "pages": ["p1", "p2"], "golden_answer": "7", **kw}


def test_curation_single_trajectory(tmp_path):
    path = tmp_path / "c.jsonl"
    write_jsonl(path, [base("a", trace=VALID.format(a="7"))])
    box, _ = run_curation(PipelineConfig(), load_trace_corpus(path))
    assert box.names == {"read_text_element"}


def test_curation_permutation_with_fixed_indices():
    from lingflow.curation import ToolPool, select_topk
    from builders import tool_sets

    sets = tool_sets()
    order = list(range(len(sets)))
    random.Random(1).shuffle(order)
    a, b = ToolPool(), ToolPool()
    for s in sets:
        a.update(s)
    # shuffled processing, but first_seen restored from the original indices
    for i in order:
        b.update(sets[i])
    for name in b.first_seen:
        b.first_seen[name] = a.first_seen[name]
    assert a.presence_count == b.presence_count
    assert select_topk(a).tools == select_topk(b).tools


def planted_groups(tmp_path, hist, seed=0):
    rng = random.Random(seed)
    rows, qi = [], 0
    for n_correct, n_queries in enumerate(hist):
        for _ in range(n_queries):
            outcomes = [True] * n_correct + [False] * (8 - n_correct)
            rng.shuffle(outcomes)
            for ok in outcomes:
                rows.append(base(f"q{qi:03d}", trace=VALID.format(a="7" if ok else "8")))
            qi += 1
    path = tmp_path / "groups.jsonl"
    write_jsonl(path, rows)
    return path


def test_run_reward_grouped(tmp_path):
    hist = [10, 5, 10, 15, 20, 10, 10, 5, 15]
    path = planted_groups(tmp_path, hist)
    run = run_reward(PipelineConfig(), load_trace_corpus(path), BOX, report_path=tmp_path / "r.jsonl",
                     advantages_path=tmp_path / "a.jsonl", filter_path=tmp_path / "f.json")
    assert run.filter_report.pass_rate_histogram == hist
    assert run.filter_report.retained == 100 - 15
    # all-wrong and all-right groups have constant rewards and are dropped
    assert len(run.dropped) == 10 + 15
    for g in run.kept:
        assert abs(sum(g.advantages) / 8) <= 1e-9
    lines = (tmp_path / "r.jsonl").read_text().splitlines()
    assert len(lines) == 800 and set(json.loads(lines[0])) == {"query_id", "r_ans", "r_tool", "combined", "reasons"}
    assert json.loads((tmp_path / "f.json").read_text())["retained"] == 85


def test_run_reward_identical_wrong_group_dropped(tmp_path):
    path = tmp_path / "g.jsonl"
    write_jsonl(path, [base("q", trace=VALID.format(a="0"))] * 8)
    run = run_reward(PipelineConfig(), load_trace_corpus(path), BOX)
    assert [g.dropped for g in run.groups] == [True]
    assert run.groups[0].advantages == [0.0] * 8


def test_run_reward_scoring_mode_and_bad_groups(tmp_path):
    path = tmp_path / "s.jsonl"
    write_jsonl(path, [base("a", trace=VALID.format(a="7")), base("b", trace="<think>x</think>")])
    run = run_reward(PipelineConfig(), load_trace_corpus(path), BOX)
    assert [r.combined for r in run.records] == [1.0, 0.0]
    assert run.records[1].validity_reasons == ["MissingAnswer"]
    assert run.groups == []
    write_jsonl(path, [base("a", trace=VALID.format(a="7"))] * 3)
    with pytest.raises(LengthMismatch):
        run_reward(PipelineConfig(), load_trace_corpus(path), BOX)


def stub_config(**overrides):
    data = {"evaluation": {"answer_mode": "judge"},
            "clients": {"stub_generation": str(FIXTURES / "eval_stub_replies.jsonl"), "stub_judge": "exact",
                        "judge_model": "exact-stub"}}
    for k, v in overrides.items():
        data.setdefault(k, {}).update(v)
    return config_from_dict(data)


def run_fixture(tmp_path, cfg=None, resume=False, name="out"):
    cfg = cfg or stub_config()
    clock = SimulatedClock()
    gen = StubClient.from_file(cfg.clients.stub_generation, latency=cfg.clients.stub_latency_seconds, clock=clock)
    judge = StubClient(fallback=exact_match_judge, latency=0.0)
    dataset = load_trace_corpus(FIXTURES / "eval_queries.jsonl", require_trace=False)
    out = tmp_path / name
    out.mkdir(exist_ok=True)
    report = run_evaluate(cfg, dataset, toolbox=BOX, generator=gen, judge=judge,
                          records_path=out / "records.jsonl", report_path=out / "report.json",
                          resume=resume, clock=clock)
    return report, out


def test_evaluate_fixture_planted_truth(tmp_path):
    report, out = run_fixture(tmp_path)
    qs = [json.loads(x) for x in (FIXTURES / "eval_queries.jsonl").read_text().splitlines()]
    # planted construction: q01, q06, q11, q16 answer gold+1; q17 is unparseable
    wrong = {"q01", "q06", "q11", "q16", "q17"}
    assert report.counts["judged"] == 20 and report.counts["correct"] == 15
    assert report.accuracy == 0.75
    hit = {q["id"]: int(q["id"][1:]) % 3 != 0 for q in qs}
    n_hit = sum(hit.values())
    joint = sum(1 for q, h in hit.items() if h and q not in wrong)
    assert report.perception["perception_rate"] == n_hit / 20
    assert report.perception["v_precision"] == joint / n_hit
    assert report.perception["v_recall"] == joint / 15
    assert report.tool_validity_rate == 19 / 20
    rows = [json.loads(x) for x in (out / "records.jsonl").read_text().splitlines()]
    assert [r["query_id"] for r in rows] == [q["id"] for q in qs]
    assert rows[17]["error"] == "UnclosedTag" and rows[17]["tool_valid"] is False
    assert report.config["judge_model"] == "exact-stub" and report.config["hit_policy"] == "intersect"


def test_evaluate_deterministic_and_resumable(tmp_path):
    _, a = run_fixture(tmp_path, name="a")
    _, b = run_fixture(tmp_path, name="b")
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    assert (a / "records.jsonl").read_bytes() == (b / "records.jsonl").read_bytes()
    c = tmp_path / "c"
    c.mkdir()
    lines = (a / "records.jsonl").read_bytes().splitlines(keepends=True)
    (c / "records.jsonl").write_bytes(b"".join(lines[:10]) + lines[10][:25])
    run_fixture(tmp_path, resume=True, name="c")
    assert (c / "report.json").read_bytes() == (a / "report.json").read_bytes()
    assert (c / "records.jsonl").read_bytes() == (a / "records.jsonl").read_bytes()


def test_evaluate_exact_mode_without_description(tmp_path):
    replies = tmp_path / "r.jsonl"
    write_jsonl(replies, [{"query_id": f"q{i}", "reply": f"<think>Image 1</think><answer>{i}</answer>"}
                          for i in range(4)])
    data = tmp_path / "d.jsonl"
    write_jsonl(data, [{"id": f"q{i}", "question": "?", "pages": ["p"], "golden_answer": str(i)} for i in range(4)])
    cfg = config_from_dict({"evaluation": {"answer_mode": "exact"}})
    gen = StubClient.from_file(replies, latency=0.1, clock=SimulatedClock())
    report = run_evaluate(cfg, load_trace_corpus(data, require_trace=False), toolbox=BOX, generator=gen)
    assert report.accuracy == 1.0 and report.tool_validity_rate == 0.0


class Down:
    def generate(self, request):
        raise TransportError("connection refused")


def test_evaluate_generation_failures(tmp_path):
    data = tmp_path / "d.jsonl"
    write_jsonl(data, [{"id": "q", "question": "?", "pages": ["p"], "golden_answer": "1"}])
    cfg = config_from_dict({"evaluation": {"answer_mode": "exact"}})
    with pytest.raises(TransportError):
        run_evaluate(cfg, load_trace_corpus(data, require_trace=False), toolbox=BOX, generator=Down())


def test_evaluate_judge_failure_excluded(tmp_path):
    data = tmp_path / "d.jsonl"
    write_jsonl(data, [{"id": "q1", "question": "?", "pages": ["p"], "golden_answer": "1", "prediction": "1"},
                       {"id": "q2", "question": "?", "pages": ["p"], "golden_answer": "1", "prediction": "1"}])
    judge = StubClient({"q1": "<judge>True</judge>", "q2": "unsure"}, latency=0)
    cfg = config_from_dict({"evaluation": {"answer_mode": "judge"}, "clients": {"max_in_flight": 1}})
    report = run_evaluate(cfg, load_trace_corpus(data, require_trace=False), toolbox=BOX, judge=judge)
    assert report.counts["judge_failures"] == 1 and report.accuracy == 1.0


def test_evaluate_with_retrieval(tmp_path):
    data = tmp_path / "d.jsonl"
    write_jsonl(data, [{"id": "q", "question": "?", "pages": ["a", "b", "c"], "golden_answer": "1"}])
    seen = []

    class Echo:
        def generate(self, request):
            seen.append(request.messages[-1]["content"])
            from lingflow.client import ChatReply
            return ChatReply('<think></think><description><tool name="read_text_element" args="">1</tool>'
                             "</description><answer>1</answer>", 0.0)

    idx = PageIndex()
    idx.add("a", [[1.0, 0.0]])
    idx.add("b", [[0.0, 1.0]])
    cfg = config_from_dict({"evaluation": {"answer_mode": "exact"}, "retrieval": {"k": 1}})
    report = run_evaluate(cfg, load_trace_corpus(data, require_trace=False), toolbox=BOX, generator=Echo(),
                          index=idx, query_embeddings=[QueryEmbedding("q", [[0.0, 1.0]])])
    assert report.accuracy == 1.0
    assert seen[0][0]["text"].endswith("[Image 1: b]")
