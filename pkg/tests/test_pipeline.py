import json

import httpx
import pytest
from hypothesis import given, strategies as st

from evoltree.llm import MockGenerator, RemoteGenerator
from evoltree.pipeline import (
    Candidate, ExportRecord, Lineage, PipelineError, SeedFormatError, companion_path, complete_responses,
    compute_stats, harvest, load_seeds, parse_record, read_companion, read_training_file, render_record,
    render_training_file, sample_dataset,
)
from evoltree.reward import ScoreTriple
from evoltree.tree import EvolutionTree


# --- seeds -------------------------------------------------------------------

def test_alpaca_seeds(tmp_path):
    p = tmp_path / "a.json"
    p.write_text(json.dumps([{"instruction": "1+1=", "input": "", "output": "2"},
                             {"instruction": "Translate.", "input": "hola", "output": "hello"}]))
    a, b = load_seeds(p)
    assert (a.instruction, a.index, a.input, a.reference_output, a.source) == ("1+1=", 0, None, "2", "alpaca")
    assert b.input == "hola" and b.index == 1


def test_dolly_seeds_keep_category(tmp_path):
    p = tmp_path / "d.jsonl"
    rows = [{"instruction": "Who wrote Hamlet?", "context": "", "response": "Shakespeare",
             "category": "open_qa"},
            {"instruction": "Summarize.", "context": "Long text.", "response": "Short.",
             "category": "summarization"}]
    p.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    a, b = load_seeds(p)
    assert a.source == "dolly:open_qa" and a.reference_output == "Shakespeare"
    assert b.input == "Long text."


def test_plain_lines(tmp_path):
    p = tmp_path / "s.txt"
    p.write_text("Plan a trip.\n\n  Name five writers.  \n")
    seeds = load_seeds(p)
    assert [s.instruction for s in seeds] == ["Plan a trip.", "Name five writers."]
    assert [s.index for s in seeds] == [0, 1]


def test_thousand_records(tmp_path):
    p = tmp_path / "a.json"
    p.write_text(json.dumps([{"instruction": f"task {i}", "input": "", "output": ""} for i in range(1000)]))
    seeds = load_seeds(p)
    assert len(seeds) == 1000 and [s.index for s in seeds] == list(range(1000))


@pytest.mark.parametrize("content, needle", [
    ([{"instruction": "ok"}, {"input": "x"}], "record 1"),
    ([{"instruction": "ok"}, {"instruction": "  "}], "record 1"),
    ({"instruction": "x"}, "JSON list"),
    ([{"instruction": 3}], "record 0"),
])
def test_malformed_alpaca(tmp_path, content, needle):
    p = tmp_path / "a.json"
    p.write_text(json.dumps(content))
    with pytest.raises(SeedFormatError, match=needle):
        load_seeds(p)


def test_malformed_dolly_line(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text('{"instruction": "a"}\n{broken\n')
    with pytest.raises(SeedFormatError, match="record 1"):
        load_seeds(p)


def test_unknown_format(tmp_path):
    p = tmp_path / "s.txt"
    p.write_text("x\n")
    with pytest.raises(SeedFormatError):
        load_seeds(p, "csv")


# --- harvest -----------------------------------------------------------------

def chain_tree(depth, terminal=True):
    tree = EvolutionTree.from_seed("root text", seed_source="t", seed_index=7)
    tree[0].scores = ScoreTriple(1, 0, 1)
    nid = 0
    for d in range(depth):
        nid = tree.add_child(nid, f"level {d + 1}", "Add Life Topics")
        tree[nid].scores = ScoreTriple(2 + d, 1, 2)
    tree[nid].terminal = terminal
    return tree, nid


def test_harvest_single_terminal_path():
    tree, leaf = chain_tree(3)
    cands = harvest(tree)
    assert len(cands) == 4
    assert cands[0].instruction == "root text"
    assert not any(c.fallback for c in cands)
    assert cands[-1].lineage == Lineage(7, leaf, ("Add Life Topics",) * 3, "t")


def test_harvest_shared_prefix_once():
    tree, _ = chain_tree(1, terminal=False)
    a = tree.add_child(1, "left", "Add Key Constraints")
    b = tree.add_child(1, "right", "Add Key Constraints")
    for i in (a, b):
        tree[i].scores = ScoreTriple(5, 3, 5)
        tree[i].terminal = True
    ids = [c.lineage.node_id for c in harvest(tree)]
    assert ids == [0, 1, a, b]


def test_harvest_dedup_keeps_best():
    tree, _ = chain_tree(0, terminal=False)
    a = tree.add_child(0, "same", "A")
    b = tree.add_child(0, "same", "B")
    tree[a].scores, tree[b].scores = ScoreTriple(1, 0, 1), ScoreTriple(4, 2, 4)
    tree[a].terminal = tree[b].terminal = True
    cands = harvest(tree)
    assert [c.lineage.node_id for c in cands if c.instruction == "same"] == [b]


def test_harvest_excludes_dead_branches():
    tree, leaf = chain_tree(2)
    dead = tree.add_child(0, "dead end", "A")
    tree[dead].scores = ScoreTriple(5, 5, 5)
    assert dead not in [c.lineage.node_id for c in harvest(tree)]


def test_harvest_fallback():
    tree, leaf = chain_tree(2, terminal=False)
    cands = harvest(tree)
    assert cands and all(c.fallback for c in cands)
    assert cands[-1].lineage.node_id == leaf


def test_lineage_resolves_to_node():
    tree, _ = chain_tree(3)
    for c in harvest(tree):
        node = tree[c.lineage.node_id]
        assert node.instruction == c.instruction
        assert tree.actions_on_path(node.id) == list(c.lineage.actions)


# --- sampling ----------------------------------------------------------------

def test_sample_dataset():
    pool = list(range(4000))
    got = sample_dataset(pool, 1000, 3)
    assert len(got) == 1000 and len(set(got)) == 1000
    assert got == sample_dataset(pool, 1000, 3)
    small = sample_dataset(pool[:10], 50, 1)
    assert sorted(small) == pool[:10]
    with pytest.raises(ValueError):
        sample_dataset(pool, 0, 1)


# --- responses ---------------------------------------------------------------

def cands(n):
    return [Candidate(f"Question {i}?", ScoreTriple(3, 1, 2), Lineage(i, 0, ()), None) for i in range(n)]


def test_complete_responses_echo():
    gen = MockGenerator(exact={"Question 0?": "canned"})
    (rec,) = complete_responses(cands(1), gen)
    assert rec.output == "canned" and rec.instruction == "Question 0?"


def test_complete_responses_partial_failure():
    gen = MockGenerator(fail_on=lambda r: r.prompt == "Question 1?")
    diag = []
    out = complete_responses(cands(3), gen, diagnostics=diag)
    assert [r.instruction for r in out] == ["Question 0?", "Question 2?"]
    assert len(diag) == 1 and "seed 1" in diag[0]


def test_complete_responses_all_fail():
    with pytest.raises(PipelineError):
        complete_responses(cands(2), MockGenerator(fail_on=lambda r: True))


def test_response_prompt_includes_input():
    c = Candidate("Translate.", ScoreTriple(3, 1, 2), Lineage(0, 0, ()), "hola")
    gen = MockGenerator(exact={"Translate.\n\nhola": "hello"})
    assert complete_responses([c], gen)[0].output == "hello"


def test_cached_rerun_makes_no_calls(tmp_path):
    hits = []

    def handler(request):
        hits.append(request)
        return httpx.Response(200, json={"choices": [{"message": {"content": "answer"}}]})

    def gen():
        return RemoteGenerator(endpoint_url="http://llm.local/v1", api_key="k", cache_dir=tmp_path,
                               transport=httpx.MockTransport(handler), sleep=lambda s: None)

    first = gen()
    complete_responses(cands(3), first)
    assert first.calls == 3
    second = gen()
    out = complete_responses(cands(3), second)
    assert second.calls == 0 and len(hits) == 3
    assert all(r.output == "answer" for r in out)


# --- training file -----------------------------------------------------------

def test_render_without_input():
    text = render_record("Plan a trip.", "Go to Rome.")
    assert "### Input:" not in text
    assert text.startswith("Below is an instruction")
    assert parse_record(text) == ("Plan a trip.", None, "Go to Rome.")


def test_render_with_input():
    text = render_record("Translate.", "hello", "hola")
    assert "### Input:\nhola" in text
    assert parse_record(text) == ("Translate.", "hola", "hello")


def test_training_file_round_trip(tmp_path):
    recs = [ExportRecord("Plan a trip.", "Go.", Lineage(0, 3, ("A", "B")), ScoreTriple(4, 2, 3)),
            ExportRecord("Translate.", "hello", Lineage(1, 0, ()), ScoreTriple(2, 1, 1.5), "hola")]
    path, meta = render_training_file(recs, tmp_path / "train.json")
    assert meta == companion_path(path) == tmp_path / "train.meta.jsonl"
    assert read_training_file(path) == [("Plan a trip.", None, "Go."), ("Translate.", "hola", "hello")]
    assert read_companion(meta) == recs


def test_empty_training_file(tmp_path):
    path, meta = render_training_file([], tmp_path / "t.json")
    assert json.loads(path.read_text()) == []
    assert read_companion(meta) == []


@given(st.text(min_size=1).filter(lambda s: "###" not in s and "\n\n" not in s),
       st.text().filter(lambda s: "###" not in s))
def test_record_round_trip_property(instruction, output):
    assert parse_record(render_record(instruction, output)) == (instruction, None, output)


# --- stats -------------------------------------------------------------------

@pytest.mark.parametrize("triple, average", [((3.58, 1.60, 1.40), 2.19), ((4.56, 3.24, 3.62), 3.81)])
def test_reference_averages(triple, average):
    stats = compute_stats([ScoreTriple(*triple)])
    assert abs(stats.mean_of_means - average) <= 0.005


def test_stats_means():
    stats = compute_stats([ScoreTriple(3, 1, 2), ScoreTriple(5, 3, 4)])
    assert (stats.mean_quality, stats.mean_diversity, stats.mean_complexity, stats.count) == (4, 2, 3, 2)
    assert stats.mean_of_means == 3


def test_stats_empty():
    with pytest.raises(ValueError):
        compute_stats([])


@given(st.lists(st.tuples(st.floats(0, 5), st.integers(0, 9), st.floats(0, 5)), min_size=1, max_size=30),
       st.randoms())
def test_stats_permutation_invariant(rows, rnd):
    triples = [ScoreTriple(*r) for r in rows]
    shuffled = triples[:]
    rnd.shuffle(shuffled)
    a, b = compute_stats(triples), compute_stats(shuffled)
    assert a.mean_of_means == pytest.approx(b.mean_of_means, abs=1e-12)
