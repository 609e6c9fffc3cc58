import json
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from builders import TOOL_TABLE, curation_lines, tool_sets, write_jsonl
from lingflow.config import PipelineConfig
from lingflow.curation import (
    DEPLOYED_TOOLS,
    ToolDefinition,
    ToolPool,
    load_toolbox,
    normalize_tool_name,
    parse_curation_output,
    pool_from_json,
    pool_to_json,
    select_topk,
    toolbox_from_json,
    toolbox_to_json,
    trajectory_tool_set,
)
from lingflow.errors import EmptyAfterNormalization, EmptyPool
from lingflow.pipeline import run_curation
from lingflow.trace import load_trace_corpus, parse_trace


@pytest.mark.parametrize("raw, expected", [
    ("read_text_element", "read_text_element"),
    ("  Read Text-Element ", "read_text_element"),
    ("compute%percentage!", "computepercentage"),
    ("__3d_plot__", "d_plot"),
    ("a  -  b", "a_b"),
])
def test_normalize(raw, expected):
    assert normalize_tool_name(raw) == expected


@pytest.mark.parametrize("raw", ["", "   ", "123", "__", "%%"])
def test_normalize_empty(raw):
    with pytest.raises(EmptyAfterNormalization):
        normalize_tool_name(raw)


@given(st.text(max_size=40))
def test_normalize_idempotent_and_well_formed(raw):
    try:
        name = normalize_tool_name(raw)
    except EmptyAfterNormalization:
        return
    assert normalize_tool_name(name) == name
    assert name[0].isalpha() and all(c.isascii() and (c.isalnum() or c == "_") for c in name)


def test_parse_curation_output():
    out = parse_curation_output(
        "DEFINE_TOOL: subtract_values || val1, val2 || Calculate difference.\n"
        "DEFINE_TOOL: broken || only two\n"
        '<tool name="locate_table_row" args="row Q3">Row 4</tool>\n'
        '<tool name="subtract_values" args="150, 100">50</tool>\n'
        "END_OF_TOOLS\n"
        '<tool name="after_end" args="x">ignored</tool>'
    )
    assert out.terminated
    assert out.new_definitions == [ToolDefinition("subtract_values", "Calculate difference.", "val1, val2")]
    assert out.skipped_definitions == 1
    assert [a.name for a in out.applications] == ["locate_table_row", "subtract_values"]
    assert [a.name for a in out.unknown_applications()] == ["locate_table_row"]


def test_trajectory_tool_set_is_presence():
    t = parse_trace(
        '<think></think><description><tool name="Read Text" args="a">1</tool>'
        '<tool name="read_text" args="b">2</tool></description><answer>x</answer>'
    )
    assert trajectory_tool_set(t) == {"read_text"}
    assert trajectory_tool_set(t, normalize=False) == {"Read Text", "read_text"}


def test_pool_counts_and_ranking():
    pool = ToolPool()
    for s in [{"b", "a"}, {"a"}, {"c"}, {"c"}, set()]:
        pool.update(s)
    assert pool.trajectories_processed == 5
    assert pool.ranked() == [("a", 2), ("c", 2), ("b", 1)]
    assert pool.frequency("a") == pytest.approx(0.4)
    assert {name for _, name in pool.undefined} == {"a", "b", "c"}
    assert pool.definitions["a"].stub


def test_first_writer_wins():
    pool = ToolPool()
    pool.update({"x"}, [ToolDefinition("x", "first", "p")])
    pool.update({"x"}, [ToolDefinition("x", "second", "p")])
    assert pool.definitions["x"].description == "first"
    assert len(pool.conflicts) == 1


def test_real_definition_replaces_stub():
    pool = ToolPool()
    pool.update({"x"})
    pool.update(set(), [ToolDefinition("x", "real", "p")])
    assert not pool.definitions["x"].stub


def test_select_topk_errors():
    with pytest.raises(EmptyPool):
        select_topk(ToolPool())
    pool = ToolPool().update({"a"})
    with pytest.raises(ValueError):
        select_topk(pool, 0)
    assert select_topk(pool, 5).coverage == 1.0


def test_table_fixture_top7():
    pool = ToolPool()
    for s in tool_sets():
        pool.update(s)
    box = select_topk(pool, 7)
    assert [t.name for t in box.tools] == [n for n, _ in TOOL_TABLE[:7]]
    assert box.coverage == 2583 / 2611
    assert box.frequency("read_text_element") == 964 / 1500


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sets(st.sampled_from("abcdefgh"), max_size=5), max_size=40), st.integers(1, 8))
def test_topk_properties(sets, k):
    pool = ToolPool()
    for s in sets:
        pool.update(s)
    ranked = pool.ranked()
    if not ranked:
        return
    box = select_topk(pool, k)
    assert len(box.tools) == min(k, len(ranked))
    counts = [c for _, c in ranked]
    assert counts == sorted(counts, reverse=True)
    brute = {n: sum(n in s for s in sets) for s in sets for n in s}
    assert dict(ranked) == brute
    assert 0 < box.coverage <= 1
    bigger = select_topk(pool, k + 1)
    assert bigger.coverage >= box.coverage


def test_pool_update_thread_safety():
    pool = ToolPool()

    def work():
        for _ in range(200):
            pool.update({"a", "b"})

    threads = [threading.Thread(target=work) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert pool.presence_count == {"a": 800, "b": 800}
    assert pool.trajectories_processed == 800


def test_toolbox_and_pool_json_round_trip(tmp_path):
    pool = ToolPool()
    pool.update({"a", "b"}, [ToolDefinition("a", "d", "p")])
    pool.update({"a"})
    box = select_topk(pool, 1)
    back = toolbox_from_json(json.loads(json.dumps(toolbox_to_json(box))))
    assert back.tools == box.tools and back.count("a") == 2
    pool2 = pool_from_json(json.loads(json.dumps(pool_to_json(pool))))
    assert pool2.ranked() == pool.ranked()
    assert pool2.definitions == pool.definitions


def test_run_curation_from_corpus(tmp_path):
    path = tmp_path / "corpus.jsonl"
    write_jsonl(path, curation_lines())
    box, pool = run_curation(
        PipelineConfig(), load_trace_corpus(path),
        toolbox_path=tmp_path / "box.json", pool_path=tmp_path / "pool.json",
    )
    assert set(box.tools) == set(DEPLOYED_TOOLS)
    assert not pool.undefined
    assert load_toolbox(tmp_path / "box.json").names == box.names
