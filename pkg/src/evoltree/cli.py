"""Command-line entry point: ``evoltree {evolve,extract-actions,score,export,stats}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from . import __version__
from .actions import ActionError, builtin_catalog, load_catalog, parse_extracted_actions, \
    render_meta_prompt, save_catalog
from .llm import GenerationError, GenerationRequest, MockGenerator, RemoteGenerator
from .pipeline import PipelineError, SeedFormatError, compute_stats, complete_responses, harvest, \
    load_seeds, render_training_file, sample_dataset
from .reward import HeuristicScorer, JudgeScorer, ScoreTriple, ScoringError, composite_value
from .search import MCTS, SearchConfig
from .tree import TreeFormatError, SchemaVersionError, load_tree, save_tree

log = logging.getLogger("evoltree")

GATEWAY_KEYS = ("endpoint_url", "model_name", "timeout_seconds", "max_retries", "cache_dir")

# flag dest -> config key; None flag values fall through to the config file.
SEARCH_FLAGS = {
    "episodes": "episodes",
    "width": "expansion_width",
    "max_depth": "max_depth",
    "reward_threshold": "reward_threshold",
    "exploration_c": "exploration_c",
    "rollout_max_steps": "rollout_max_steps",
    "temperature": "temperature",
    "max_tokens": "max_tokens",
}


class CliError(Exception):
    pass


def derive_seed(rng_seed: int, index: int) -> int:
    return random.Random(f"{rng_seed}:{index}").getrandbits(63)


def load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError(f"{p}: invalid JSON at line {exc.lineno} column {exc.colno}") from exc
    if not isinstance(cfg, dict):
        raise CliError(f"{p}: config must be a JSON object")
    return cfg


def _pick(args, cfg: dict, flag: str, key: Optional[str] = None, default=None):
    v = getattr(args, flag, None)
    if v is not None:
        return v
    return cfg.get(key or flag, default)


def build_generator(args, cfg: dict, rng_seed: int = 0):
    backend = _pick(args, cfg, "backend", default="remote")
    if backend == "mock":
        fixtures = _pick(args, cfg, "mock_fixtures")
        seed = _pick(args, cfg, "mock_seed", default=rng_seed)
        if fixtures:
            if not Path(fixtures).exists():
                raise CliError(f"fixture file not found: {fixtures}")
            return MockGenerator.from_fixture_file(fixtures, seed=seed)
        return MockGenerator(seed=seed)
    if backend != "remote":
        raise CliError(f"unknown backend {backend!r}")
    kwargs = {k: _pick(args, cfg, k) for k in GATEWAY_KEYS}
    kwargs = {k: v for k, v in kwargs.items() if v is not None}
    if getattr(args, "no_cache", False) or cfg.get("cache") is False:
        kwargs["cache"] = False
    return RemoteGenerator(**kwargs)


def build_scorer(args, cfg: dict, generator):
    kind = _pick(args, cfg, "scorer", default="heuristic")
    cap = _pick(args, cfg, "diversity_cap")
    if kind == "heuristic":
        return HeuristicScorer(diversity_cap=cap)
    if kind == "judge":
        return JudgeScorer(generator, diversity_cap=cap)
    raise CliError(f"unknown scorer {kind!r}")


def build_search_config(args, cfg: dict, rng_seed: int) -> SearchConfig:
    raw = dict(cfg.get("search", {}))
    for flag, key in SEARCH_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            raw[key] = v
    raw["rng_seed"] = rng_seed
    try:
        return SearchConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid search configuration: {exc}") from exc


def _rng_seed(args, cfg) -> int:
    return int(_pick(args, cfg, "rng_seed", default=0))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


# --- subcommands ------------------------------------------------------------

def cmd_evolve(args) -> int:
    cfg = load_config(args.config)
    seeds_path = Path(args.seeds)
    if not seeds_path.exists():
        raise CliError(f"seeds file not found: {seeds_path}")
    seeds = load_seeds(seeds_path, args.format)
    if not seeds:
        raise CliError(f"no seeds in {seeds_path}")
    catalog_path = _pick(args, cfg, "catalog")
    catalog = load_catalog(catalog_path) if catalog_path else builtin_catalog()
    rng_seed = _rng_seed(args, cfg)
    base_config = build_search_config(args, cfg, rng_seed)
    generator = build_generator(args, cfg, rng_seed)
    scorer = build_scorer(args, cfg, generator)
    out = Path(args.out)
    (out / "trees").mkdir(parents=True, exist_ok=True)
    jobs = args.jobs or int(cfg.get("jobs", 0)) or os.cpu_count() or 1

    def run_one(seed):
        config = SearchConfig.from_dict({**base_config.to_dict(), "rng_seed": derive_seed(rng_seed, seed.index)})
        entry = {"index": seed.index, "source": seed.source, "status": "ok"}
        t0 = time.perf_counter()
        try:
            result = MCTS(catalog, generator, scorer, config).run(
                seed.instruction, seed_source=seed.source, seed_index=seed.index, seed_input=seed.input)
        except Exception as exc:  # one bad seed must not sink the run
            log.error("seed %d failed: %s", seed.index, exc)
            entry.update(status="failed", error=str(exc), seconds=round(time.perf_counter() - t0, 3))
            return entry, None
        name = f"tree_{seed.index:05d}.json"
        save_tree(result.tree, out / "trees" / name)
        tree = result.tree
        entry.update(
            tree_file=f"trees/{name}",
            node_count=len(tree),
            terminal_count=sum(1 for n in tree if n.terminal),
            episodes=[r.status for r in result.reports],
            failures=result.failures,
            seconds=round(time.perf_counter() - t0, 3),
        )
        return entry, tree

    started = _now()
    t0 = time.perf_counter()
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        outcomes = list(pool.map(run_one, seeds))
    trees = [t for _, t in outcomes if t is not None]
    aggregate = {"seeds": len(seeds), "succeeded": len(trees)}
    if trees:
        aggregate["root_stats"] = compute_stats(t[t.root].scores for t in trees).as_dict()
        node_scores = [n.scores for t in trees for n in t if n.parent is not None and n.scores]
        if node_scores:
            aggregate["node_stats"] = compute_stats(node_scores).as_dict()
    manifest = {
        "command": "evolve",
        "version": __version__,
        "seeds_file": str(seeds_path),
        "catalog": catalog_path or "builtin",
        "backend": _pick(args, cfg, "backend", default="remote"),
        "scorer": _pick(args, cfg, "scorer", default="heuristic"),
        "rng_seed": rng_seed,
        "search": base_config.to_dict(),
        "started_at": started,
        "finished_at": _now(),
        "elapsed_seconds": round(time.perf_counter() - t0, 3),
        "results": [e for e, _ in outcomes],
        "aggregate": aggregate,
    }
    _write_json(out / "manifest.json", manifest)
    print(f"evolved {len(trees)}/{len(seeds)} seeds -> {out}")
    return 0 if trees else 1


def cmd_extract_actions(args) -> int:
    cfg = load_config(args.config)
    samples_path = Path(args.samples)
    if not samples_path.exists():
        raise CliError(f"samples file not found: {samples_path}")
    samples = [s.instruction for s in load_seeds(samples_path, args.format)]
    base = load_catalog(args.catalog) if args.catalog else builtin_catalog()
    generator = build_generator(args, cfg, _rng_seed(args, cfg))
    prompt = render_meta_prompt(samples)
    temperature = args.temperature if args.temperature is not None else 0.7
    max_tokens = args.max_tokens if args.max_tokens is not None else 2048
    text = generator.generate(GenerationRequest(prompt, temperature, max_tokens)).text
    extracted = parse_extracted_actions(text, base)
    merged = base.extended(extracted)
    save_catalog(merged, args.out)
    if not extracted:
        print(f"warning: no actions extracted; wrote base catalog ({len(merged)} actions) to {args.out}",
              file=sys.stderr)
    else:
        print(f"extracted {len(extracted)} actions; catalog has {len(merged)} -> {args.out}")
    return 0


def cmd_score(args) -> int:
    cfg = load_config(args.config)
    path = Path(args.input)
    if not path.exists():
        raise CliError(f"input file not found: {path}")
    seeds = load_seeds(path, args.format)
    if not seeds:
        raise CliError(f"no records in {path}")
    generator = None
    if _pick(args, cfg, "scorer", default="heuristic") == "judge":
        generator = build_generator(args, cfg, _rng_seed(args, cfg))
    scorer = build_scorer(args, cfg, generator)
    rows = []
    for s in seeds:
        t = scorer.score(s.instruction)
        rows.append({"index": s.index, "instruction": s.instruction, **t.as_dict(),
                     "reward": composite_value(t)})
    stats = compute_stats(ScoreTriple.from_dict(r) for r in rows)
    out = Path(args.out)
    with out.open("w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, ensure_ascii=False) + "\n")
    _print_stats(stats, as_json=args.json)
    return 0


def _tree_files(location: Path) -> list[Path]:
    if location.is_file():
        return [location]
    if (location / "trees").is_dir():
        location = location / "trees"
    if not location.is_dir():
        raise CliError(f"tree location not found: {location}")
    return sorted(location.glob("*.json"))


def cmd_export(args) -> int:
    cfg = load_config(args.config)
    files = _tree_files(Path(args.trees))
    if not files:
        raise CliError(f"no tree files under {args.trees}")
    candidates = []
    fallbacks = 0
    for f in files:
        got = harvest(load_tree(f))
        fallbacks += any(c.fallback for c in got)
        candidates.extend(got)
    if not candidates:
        raise CliError("no scored candidates in the given trees")
    rng_seed = _rng_seed(args, cfg)
    chosen = sample_dataset(candidates, args.n, rng_seed)
    generator = build_generator(args, cfg, rng_seed)
    diagnostics: list[str] = []
    records = complete_responses(
        chosen, generator,
        temperature=args.temperature if args.temperature is not None else 0.7,
        max_tokens=args.max_tokens if args.max_tokens is not None else 2048,
        max_workers=args.jobs or 1,
        diagnostics=diagnostics,
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    path, meta = render_training_file(records, args.out)
    print(f"exported {len(records)} records from {len(candidates)} candidates "
          f"({len(files)} trees, {fallbacks} without terminal nodes, {len(diagnostics)} skipped) -> {path}")
    return 0


def _read_scored(path: Path) -> list[ScoreTriple]:
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
        rows = doc if isinstance(doc, list) else [doc]
    except json.JSONDecodeError:
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
    out = []
    for i, row in enumerate(rows):
        src = row.get("scores", row) if isinstance(row, dict) else None
        try:
            out.append(ScoreTriple.from_dict(src))
        except (KeyError, TypeError, ValueError) as exc:
            raise CliError(f"{path}: record {i} has no usable scores ({exc})") from exc
    return out


def _print_stats(stats, as_json: bool = False) -> None:
    if as_json:
        print(json.dumps(stats.as_dict(), indent=2))
        return
    print(f"count:      {stats.count}")
    print(f"quality:    {stats.mean_quality:.2f}")
    print(f"diversity:  {stats.mean_diversity:.2f}")
    print(f"complexity: {stats.mean_complexity:.2f}")
    print(f"average:    {stats.mean_of_means:.2f}")


def cmd_stats(args) -> int:
    path = Path(args.input)
    if not path.exists():
        raise CliError(f"input file not found: {path}")
    _print_stats(compute_stats(_read_scored(path)), as_json=args.json)
    return 0


# --- parser -----------------------------------------------------------------

def _add_backend_opts(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("generator backend")
    g.add_argument("--backend", choices=["remote", "mock"])
    g.add_argument("--endpoint-url", dest="endpoint_url")
    g.add_argument("--model-name", dest="model_name")
    g.add_argument("--timeout-seconds", dest="timeout_seconds", type=float)
    g.add_argument("--max-retries", dest="max_retries", type=int)
    g.add_argument("--cache-dir", dest="cache_dir")
    g.add_argument("--no-cache", dest="no_cache", action="store_true")
    g.add_argument("--mock-fixtures", dest="mock_fixtures", help="fixture JSON for the mock backend")
    g.add_argument("--mock-seed", dest="mock_seed", type=int)
    g.add_argument("--temperature", type=float)
    g.add_argument("--max-tokens", dest="max_tokens", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evoltree", description="Evolve instruction data with tree search over LLM rewrites.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("evolve", help="run tree search for every seed instruction")
    p.add_argument("--seeds", required=True)
    p.add_argument("--format", default="auto", choices=["auto", "alpaca", "dolly", "plain-lines"])
    p.add_argument("--catalog")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--episodes", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--max-depth", dest="max_depth", type=int)
    p.add_argument("--reward-threshold", dest="reward_threshold", type=float)
    p.add_argument("--exploration-c", dest="exploration_c", type=float)
    p.add_argument("--rollout-max-steps", dest="rollout_max_steps", type=int)
    p.add_argument("--scorer", choices=["judge", "heuristic"])
    p.add_argument("--diversity-cap", dest="diversity_cap", type=int)
    p.add_argument("--rng-seed", dest="rng_seed", type=int)
    p.add_argument("--jobs", type=int)
    _add_backend_opts(p)
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("extract-actions", help="mine task-specific actions into a catalog file")
    p.add_argument("--samples", required=True)
    p.add_argument("--format", default="plain-lines", choices=["auto", "alpaca", "dolly", "plain-lines"])
    p.add_argument("--catalog", help="base catalog (default: builtin)")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--rng-seed", dest="rng_seed", type=int)
    _add_backend_opts(p)
    p.set_defaults(func=cmd_extract_actions)

    p = sub.add_parser("score", help="score every record of a dataset file")
    p.add_argument("--input", required=True)
    p.add_argument("--format", default="auto", choices=["auto", "alpaca", "dolly", "plain-lines"])
    p.add_argument("--out", required=True)
    p.add_argument("--scorer", choices=["judge", "heuristic"])
    p.add_argument("--diversity-cap", dest="diversity_cap", type=int)
    p.add_argument("--config")
    p.add_argument("--rng-seed", dest="rng_seed", type=int)
    p.add_argument("--json", action="store_true")
    _add_backend_opts(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("export", help="harvest trees, answer instructions, write training file")
    p.add_argument("--trees", required=True, help="evolve output dir, trees dir, or one tree file")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--rng-seed", dest="rng_seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--config")
    _add_backend_opts(p)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("stats", help="mean quality/diversity/complexity of a scored file")
    p.add_argument("--input", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, SeedFormatError, ActionError, TreeFormatError, SchemaVersionError,
            PipelineError, GenerationError, ScoringError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
