import json
import subprocess
import sys

import pytest

from evoltree.actions import load_catalog
from evoltree.cli import main
from evoltree.pipeline import read_companion, read_training_file
from evoltree.tree import load_tree

SEEDS = ["Plan a trip to Rome.", "Name five French writers.", "1+1="]
MOCK = ["--backend", "mock", "--scorer", "heuristic", "--jobs", "2"]


@pytest.fixture
def seeds_file(tmp_path):
    p = tmp_path / "seeds.txt"
    p.write_text("\n".join(SEEDS) + "\n")
    return p


def evolve(seeds, out, *extra):
    return main(["evolve", "--seeds", str(seeds), "--out", str(out), *MOCK, *extra])


def test_evolve_writes_trees_and_manifest(tmp_path, seeds_file):
    out = tmp_path / "run"
    assert evolve(seeds_file, out, "--rng-seed", "4") == 0
    files = sorted((out / "trees").iterdir())
    assert [f.name for f in files] == ["tree_00000.json", "tree_00001.json", "tree_00002.json"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["rng_seed"] == 4 and manifest["search"]["episodes"] == 3
    assert manifest["aggregate"]["succeeded"] == 3
    for entry, seed in zip(manifest["results"], SEEDS):
        tree = load_tree(out / entry["tree_file"])
        assert tree[0].instruction == seed
        assert entry["node_count"] == len(tree) <= 16


def test_evolve_missing_seeds(tmp_path, capsys):
    missing = tmp_path / "nope.txt"
    assert evolve(missing, tmp_path / "run") != 0
    assert str(missing) in capsys.readouterr().err


def test_evolve_deterministic(tmp_path, seeds_file):
    evolve(seeds_file, tmp_path / "a", "--rng-seed", "9")
    evolve(seeds_file, tmp_path / "b", "--rng-seed", "9")
    for name in ("tree_00000.json", "tree_00001.json", "tree_00002.json"):
        assert (tmp_path / "a/trees" / name).read_bytes() == (tmp_path / "b/trees" / name).read_bytes()


def test_config_file_and_flag_precedence(tmp_path, seeds_file):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"search": {"episodes": 1, "expansion_width": 2}, "rng_seed": 3}))
    out = tmp_path / "run"
    assert evolve(seeds_file, out, "--config", str(cfg), "--width", "3") == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["search"]["episodes"] == 1
    assert manifest["search"]["expansion_width"] == 3
    assert manifest["rng_seed"] == 3
    assert all(e["node_count"] <= 4 for e in manifest["results"])


def test_bad_search_config(tmp_path, seeds_file, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"search": {"episodez": 1}}))
    assert evolve(seeds_file, tmp_path / "run", "--config", str(cfg)) == 1
    assert "episodez" in capsys.readouterr().err


def fixture_file(tmp_path, reply):
    p = tmp_path / "fx.json"
    p.write_text(json.dumps({"rules": [{"pattern": "such as", "output": reply}]}))
    return p


def test_extract_actions_merges(tmp_path, seeds_file):
    reply = ("- Add Legal Jurisdiction: Name jurisdictions such as EU law.\n"
             "- Add Data Sources: Cite sources such as census tables.\n")
    out = tmp_path / "catalog.json"
    code = main(["extract-actions", "--samples", str(seeds_file), "--out", str(out), "--backend", "mock",
                 "--mock-fixtures", str(fixture_file(tmp_path, reply))])
    assert code == 0
    catalog = load_catalog(out)
    assert len(catalog) == 14
    assert catalog.names[-2:] == ["Add Legal Jurisdiction", "Add Data Sources"]
    run = tmp_path / "run"
    assert evolve(seeds_file, run, "--catalog", str(out), "--episodes", "1") == 0
    assert json.loads((run / "manifest.json").read_text())["catalog"] == str(out)


def test_extract_actions_nothing_usable(tmp_path, seeds_file, capsys):
    out = tmp_path / "catalog.json"
    code = main(["extract-actions", "--samples", str(seeds_file), "--out", str(out), "--backend", "mock",
                 "--mock-fixtures", str(fixture_file(tmp_path, "- Add X: do more things"))])
    assert code == 0
    assert len(load_catalog(out)) == 12
    assert "warning" in capsys.readouterr().err


def test_stats_prints_average(tmp_path, capsys):
    p = tmp_path / "scored.jsonl"
    p.write_text(json.dumps({"quality": 3.58, "diversity": 1.6, "complexity": 1.4}) + "\n")
    assert main(["stats", "--input", str(p)]) == 0
    assert "average:    2.19" in capsys.readouterr().out


def test_stats_json_and_bad_rows(tmp_path, capsys):
    p = tmp_path / "scored.json"
    p.write_text(json.dumps([{"scores": {"quality": 4, "diversity": 2, "complexity": 3}}]))
    assert main(["stats", "--input", str(p), "--json"]) == 0
    assert json.loads(capsys.readouterr().out)["mean_of_means"] == 3
    p.write_text(json.dumps([{"quality": 4}]))
    assert main(["stats", "--input", str(p)]) == 1


def test_score_is_offline(tmp_path, seeds_file, monkeypatch, capsys):
    import httpx

    def no_network(*a, **k):
        raise AssertionError("network used")

    monkeypatch.setattr(httpx.Client, "send", no_network)
    out = tmp_path / "scores.jsonl"
    assert main(["score", "--input", str(seeds_file), "--out", str(out), "--scorer", "heuristic"]) == 0
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert [r["instruction"] for r in rows] == SEEDS
    assert "average:" in capsys.readouterr().out
    assert main(["stats", "--input", str(out)]) == 0


def test_export_caps_records(tmp_path, seeds_file):
    run = tmp_path / "run"
    evolve(seeds_file, run)
    out = tmp_path / "export" / "train.json"
    assert main(["export", "--trees", str(run), "--out", str(out), "--n", "4", "--backend", "mock"]) == 0
    records = read_training_file(out)
    assert len(records) == 4
    meta = read_companion(out.with_name("train.meta.jsonl"))
    for rec, (instruction, _, output) in zip(meta, records):
        assert rec.instruction == instruction and rec.output == output
        tree = load_tree(run / "trees" / f"tree_{rec.lineage.seed_index:05d}.json")
        assert tree[rec.lineage.node_id].instruction == instruction
    out2 = tmp_path / "all.json"
    assert main(["export", "--trees", str(run), "--out", str(out2), "--backend", "mock"]) == 0
    assert 4 <= len(read_training_file(out2)) <= 1000


def test_export_missing_trees(tmp_path, capsys):
    assert main(["export", "--trees", str(tmp_path / "none"), "--out", str(tmp_path / "x.json")]) == 1


@pytest.mark.parametrize("sub", ["evolve", "extract-actions", "score", "export", "stats"])
def test_help_and_unknown_flags(sub):
    with pytest.raises(SystemExit) as info:
        main([sub, "--help"])
    assert info.value.code == 0
    with pytest.raises(SystemExit) as info:
        main([sub, "--definitely-not-a-flag"])
    assert info.value.code != 0


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "evoltree", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("evoltree")
