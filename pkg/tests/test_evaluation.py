import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lingflow.client import ChatReply, StubClient
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
from lingflow.evaluation import (
    AttentionRecord,
    EvalRecord,
    HitPolicy,
    accuracy,
    aggregate_report,
    iou,
    judge_verdict,
    parse_judge_reply,
    perception_hit,
    perception_rate,
    record_from_json,
    v_precision,
    v_recall,
)


@pytest.mark.parametrize("reply, verdict", [
    ("<judge>True</judge>", True),
    ("<judge>False</judge>", False),
    ("<judge> True </judge>\n<judge>False</judge>", True),
    ("The answer is correct.", None),
    ("<judge>true</judge>", None),
    ("", None),
])
def test_parse_judge_reply(reply, verdict):
    assert parse_judge_reply(reply) is verdict


class Scripted:
    def __init__(self, *replies):
        self.replies = list(replies)
        self.requests = []

    def generate(self, request):
        self.requests.append(request)
        r = self.replies.pop(0)
        if isinstance(r, Exception):
            raise r
        return ChatReply(r, 0.01)


def test_judge_verdict_renders_prompt_and_retries():
    client = Scripted("The answer is correct.", "<judge>True</judge>")
    assert judge_verdict("Q", "G", "P", client, model="judge-m") is True
    assert len(client.requests) == 2
    req = client.requests[0]
    assert req.model == "judge-m" and req.temperature == 0.0
    assert req.messages[0]["role"] == "system"
    assert "Reference Answer: G" in req.messages[1]["content"]


def test_judge_verdict_failures():
    with pytest.raises(JudgeParseError):
        judge_verdict("Q", "G", "P", Scripted("nope", "nope", "nope"), max_attempts=3)
    with pytest.raises(JudgeTransportError):
        judge_verdict("Q", "G", "P", Scripted(TransportError("down")))


def test_hit_policy_parse():
    assert HitPolicy.parse("iou:0.3") == HitPolicy("iou", 0.3)
    assert HitPolicy.parse("iou(0.7)") == HitPolicy("iou", 0.7)
    assert str(HitPolicy.parse("iou")) == "iou(0.5)"
    with pytest.raises(ValueError):
        HitPolicy.parse("nearest")


POLICIES = ["intersect", "iou(0.5)", "peak_in_box"]


def test_perception_hit_examples():
    g = (5.0, 5.0, 15.0, 15.0)
    same = AttentionRecord("q", None, [g])
    far = AttentionRecord("q", None, [(20, 20, 30, 30)])
    for p in POLICIES:
        assert perception_hit(same, g, p)
        assert not perception_hit(far, g, p)
    corner = AttentionRecord("q", None, [(0, 0, 10, 10)])
    assert iou((0, 0, 10, 10), g) == 25 / 175
    assert not perception_hit(corner, g, "iou(0.5)")
    assert perception_hit(corner, g, "intersect")
    touching = AttentionRecord("q", None, [(15, 5, 20, 15)])
    assert not perception_hit(touching, g, "intersect")


def test_peak_in_box_uses_weights():
    g = (0, 0, 10, 10)
    attn = AttentionRecord("q", None, [(20, 20, 30, 30), (2, 2, 4, 4)], [0.2, 0.9])
    assert perception_hit(attn, g, "peak_in_box")
    attn = AttentionRecord("q", None, [(20, 20, 30, 30), (2, 2, 4, 4)], [0.9, 0.2])
    assert not perception_hit(attn, g, "peak_in_box")


def test_attention_validation_and_page_mismatch():
    with pytest.raises(SchemaError):
        AttentionRecord("q", None, [(0, 0, 0, 5)])
    with pytest.raises(SchemaError):
        AttentionRecord("q", None, [(0, 0, 1, 1)], [-1.0])
    with pytest.raises(PageMismatch):
        perception_hit(AttentionRecord("q", "p1", [(0, 0, 1, 1)]), (0, 0, 1, 1), golden_page="p2")


rect = st.tuples(st.floats(0, 50), st.floats(0, 50), st.floats(1, 30), st.floats(1, 30)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


@given(rect, rect, st.floats(0, 20))
def test_intersect_monotone(a, g, grow):
    before = perception_hit(AttentionRecord("q", None, [a]), g)
    bigger = (a[0] - grow, a[1] - grow, a[2] + grow, a[3] + grow)
    after = perception_hit(AttentionRecord("q", None, [bigger]), g)
    assert after or not before


def rec(correct, hit=None, **kw):
    return EvalRecord(query_id=kw.pop("qid", "q"), prediction="", gold="", correct=correct, hit=hit, **kw)


def test_metric_examples():
    assert perception_rate([rec(True, True)] * 3) == 1.0
    assert perception_rate([rec(True, True)] * 3 + [rec(False, False)]) == 0.75
    assert v_precision([rec(True, True), rec(False, True), rec(True, False)]) == 0.5
    assert v_recall([rec(True, True), rec(True, False), rec(True, False), rec(True, True)]) == 0.5
    with pytest.raises(NoPerceptionData):
        perception_rate([rec(True)])
    with pytest.raises(NoHits):
        v_precision([rec(True, False)])
    with pytest.raises(NoCorrect):
        v_recall([rec(False, True)])


def test_accuracy_excludes_failures():
    rs = [rec(True), rec(False), rec(None, error="judge_failure")]
    assert accuracy(rs) == 0.5
    rep = aggregate_report(rs)
    assert rep.counts == {"total": 3, "judged": 2, "correct": 1, "judge_failures": 1, "other_failures": 0}


def planted(seed, n=50):
    rng = random.Random(seed)
    out = []
    for i in range(n):
        has_hit = rng.random() < 0.8
        out.append(EvalRecord(
            query_id=f"q{i:03d}", prediction="", gold="", correct=rng.random() < 0.6,
            hit=(rng.random() < 0.55) if has_hit else None, latency_seconds=rng.uniform(0.1, 3),
            benchmark=rng.choice(["a", "b"]), hop=rng.choice(["single", "multi"]),
        ))
    return out


def tally(records):
    sub = [r for r in records if r.hit is not None]
    n = len(sub)
    hits = sum(1 for r in sub if r.hit)
    cor = sum(1 for r in sub if r.correct)
    joint = sum(1 for r in sub if r.hit and r.correct)
    return n, hits, cor, joint


@pytest.mark.parametrize("seed", range(5))
def test_metrics_match_hand_tally(seed):
    rs = planted(seed)
    n, hits, cor, joint = tally(rs)
    assert perception_rate(rs) == hits / n
    assert v_precision(rs) == joint / hits
    assert v_recall(rs) == joint / cor
    assert accuracy(rs) == sum(r.correct for r in rs) / len(rs)


@settings(max_examples=200)
@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=60))
def test_identity(pairs):
    rs = [rec(c, h) for c, h in pairs]
    n, hits, cor, joint = tally(rs)
    rep = aggregate_report(rs)
    p = rep.perception
    lhs = p["v_precision"] * p["perception_rate"] if hits else 0.0
    rhs = p["v_recall"] * p["accuracy"] if cor else 0.0
    assert lhs == pytest.approx(joint / n, abs=1e-12)
    assert rhs == pytest.approx(joint / n, abs=1e-12)
    assert p["joint_fraction"] == joint / n


def test_report_breakdowns():
    rs = [rec(True, benchmark="a", qid="1"), rec(False, benchmark="a", qid="2"),
          rec(True, benchmark="b", qid="3"), rec(True, benchmark="b", qid="4")]
    rep = aggregate_report(rs)
    assert rep.accuracy == 0.75
    assert rep.per_benchmark["a"]["accuracy"] == 0.5 and rep.per_benchmark["b"]["accuracy"] == 1.0
    assert sum(v["n"] for v in rep.per_benchmark.values()) == rep.counts["judged"]
    assert rep.perception is None
    assert aggregate_report([rec(True, qid=str(i)) for i in range(5)]).accuracy == 1.0


def test_latency_stats():
    rs = [rec(True, qid=str(i), latency_seconds=float(i)) for i in range(1, 11)]
    lat = aggregate_report(rs).latency
    assert lat["mean"] == 5.5 and lat["max"] == 10.0
    assert lat["p50"] == 5.5 and lat["p90"] == pytest.approx(9.1)


@settings(max_examples=30, deadline=None)
@given(st.randoms())
def test_report_permutation_invariant(r):
    rs = planted(1)
    shuffled = list(rs)
    r.shuffle(shuffled)
    assert aggregate_report(shuffled).to_json() == aggregate_report(rs).to_json()


def test_record_from_json_derives_fields():
    r = record_from_json({"query_id": "a", "prediction": "43 %", "gold": "43%", "hop": "sideways",
                          "attended_regions": [{"box": [0, 0, 2, 2], "weight": 1}], "golden_region": [1, 1, 3, 3]})
    assert r.correct is True and r.hit is True and r.hop == "unknown"
    assert r.extra["golden_region"] == [1, 1, 3, 3]
    r = record_from_json({"query_id": "a", "prediction": "x", "gold": "y", "correct": None})
    assert r.correct is None and r.hit is None
    with pytest.raises(SchemaError):
        record_from_json({"query_id": "a"})
    with pytest.raises(SchemaError):
        EvalRecord("a", "", "", True, latency_seconds=-1)


def test_judge_with_stub_client():
    stub = StubClient({"q1": "<judge>False</judge>"}, latency=0)
    assert judge_verdict("Q", "G", "P", stub, query_id="q1") is False
