"""Seed loading, harvesting searched trees, response completion and export."""

from __future__ import annotations

import json
import logging
import os
import random
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .llm import GenerationError, GenerationRequest, Generator, generate_many
from .reward import ScoreTriple, composite_value
from .tree import EvolutionTree, best_node

logger = logging.getLogger(__name__)

SEED_FORMATS = ("alpaca", "dolly", "plain-lines")


class SeedFormatError(ValueError):
    pass


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class SeedRecord:
    instruction: str
    index: int
    input: Optional[str] = None
    reference_output: Optional[str] = None
    source: str = ""


def _infer_format(path: Path) -> str:
    if path.suffix == ".json":
        return "alpaca"
    if path.suffix == ".jsonl":
        return "dolly"
    return "plain-lines"


def _text_field(rec: dict, key: str, index: int, required: bool) -> Optional[str]:
    if key not in rec or rec[key] is None:
        if required:
            raise SeedFormatError(f"record {index}: missing field {key!r}")
        return None
    if not isinstance(rec[key], str):
        raise SeedFormatError(f"record {index}: field {key!r} must be text")
    return rec[key] or None


def load_seeds(path: str | os.PathLike, format: str = "auto") -> list[SeedRecord]:
    """Read seed instructions.

    ``alpaca``: JSON list of ``{instruction, input, output}``.
    ``dolly``: one JSON object per line with ``instruction, context, response,
    category``; the category is kept in the source tag as ``dolly:<category>``.
    ``plain-lines``: one instruction per nonblank line.
    ``auto`` picks by extension (.json, .jsonl, anything else).
    """
    path = Path(path)
    fmt = _infer_format(path) if format == "auto" else format
    if fmt not in SEED_FORMATS:
        raise SeedFormatError(f"unknown seed format {format!r}")
    text = path.read_text(encoding="utf-8")
    seeds: list[SeedRecord] = []

    if fmt == "plain-lines":
        for line in text.splitlines():
            if line.strip():
                seeds.append(SeedRecord(line.strip(), len(seeds), source="plain-lines"))
        return seeds

    if fmt == "alpaca":
        try:
            records = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SeedFormatError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from exc
        if not isinstance(records, list):
            raise SeedFormatError(f"{path}: alpaca file must hold a JSON list")
    else:
        records = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise SeedFormatError(f"{path}: record {len(records)} (line {lineno}) is not valid JSON") from exc

    for i, rec in enumerate(records):
        if not isinstance(rec, dict):
            raise SeedFormatError(f"record {i}: must be an object")
        instruction = _text_field(rec, "instruction", i, required=True)
        if not instruction or not instruction.strip():
            raise SeedFormatError(f"record {i}: field 'instruction' is empty")
        if fmt == "alpaca":
            seeds.append(SeedRecord(
                instruction, i,
                input=_text_field(rec, "input", i, required=False),
                reference_output=_text_field(rec, "output", i, required=False),
                source="alpaca",
            ))
        else:
            category = _text_field(rec, "category", i, required=False)
            seeds.append(SeedRecord(
                instruction, i,
                input=_text_field(rec, "context", i, required=False),
                reference_output=_text_field(rec, "response", i, required=False),
                source=f"dolly:{category}" if category else "dolly",
            ))
    return seeds


@dataclass(frozen=True)
class Lineage:
    seed_index: Optional[int]
    node_id: int
    actions: tuple[str, ...]
    seed_source: str = ""

    def as_dict(self) -> dict:
        return {"seed_index": self.seed_index, "node_id": self.node_id,
                "actions": list(self.actions), "seed_source": self.seed_source}

    @classmethod
    def from_dict(cls, d: dict) -> "Lineage":
        return cls(d.get("seed_index"), int(d["node_id"]), tuple(d.get("actions", ())),
                   d.get("seed_source", ""))


@dataclass(frozen=True)
class Candidate:
    instruction: str
    scores: ScoreTriple
    lineage: Lineage
    input: Optional[str] = None
    fallback: bool = False  # tree had no terminal node

    @property
    def reward(self) -> float:
        return composite_value(self.scores)


def harvest(tree: EvolutionTree) -> list[Candidate]:
    """Every scored node on a root-to-terminal path, one per distinct text.

    Identical texts keep their highest-reward occurrence (lowest id on ties).
    Without terminal nodes, the path to the best-scoring leaf is used and the
    candidates are flagged with ``fallback=True``.
    """
    paths = tree.terminal_paths()
    fallback = False
    if not paths:
        leaf = best_node(tree, tree.leaves())
        if leaf is None:
            return []
        paths = [tree.path_to_root(leaf)]
        fallback = True
    on_path = sorted({i for p in paths for i in p})
    kept: dict[str, int] = {}
    for i in on_path:
        node = tree.nodes[i]
        if node.scores is None:
            continue
        prev = kept.get(node.instruction)
        if prev is None or composite_value(node.scores) > composite_value(tree.nodes[prev].scores):
            kept[node.instruction] = i
    out = []
    for i in sorted(kept.values()):
        node = tree.nodes[i]
        lineage = Lineage(tree.seed_index, i, tuple(tree.actions_on_path(i)), tree.seed_source)
        out.append(Candidate(node.instruction, node.scores, lineage, tree.seed_input, fallback))
    return out


def sample_dataset(candidates: Sequence, n: int, rng_seed: int) -> list:
    """Uniform sample of min(n, len) items without replacement."""
    if n < 1:
        raise ValueError("n must be positive")
    return random.Random(rng_seed).sample(list(candidates), min(n, len(candidates)))


@dataclass(frozen=True)
class ExportRecord:
    instruction: str
    output: str
    lineage: Lineage
    scores: ScoreTriple
    input: Optional[str] = None

    def as_dict(self) -> dict:
        return {
            "instruction": self.instruction,
            "input": self.input or "",
            "output": self.output,
            "lineage": self.lineage.as_dict(),
            "scores": self.scores.as_dict(),
        }


def response_prompt(instruction: str, input: Optional[str] = None) -> str:
    return f"{instruction}\n\n{input}" if input else instruction


def complete_responses(
    candidates: Sequence[Candidate],
    generator: Generator,
    temperature: float = 0.7,
    max_tokens: int = 2048,
    max_workers: int = 1,
    diagnostics: Optional[list[str]] = None,
) -> list[ExportRecord]:
    """Ask the generator to answer each candidate; failed or blank answers are skipped."""
    if not candidates:
        return []
    requests = [GenerationRequest(response_prompt(c.instruction, c.input), temperature, max_tokens)
                for c in candidates]
    results = generate_many(generator, requests, max_workers)
    diag = diagnostics if diagnostics is not None else []
    out = []
    for cand, res in zip(candidates, results):
        where = f"seed {cand.lineage.seed_index} node {cand.lineage.node_id}"
        if isinstance(res, GenerationError):
            diag.append(f"{where}: {res}")
            continue
        if not res.text.strip():
            diag.append(f"{where}: empty response")
            continue
        out.append(ExportRecord(cand.instruction, res.text.strip(), cand.lineage, cand.scores, cand.input))
    for msg in diag:
        logger.warning("response skipped: %s", msg)
    if not out:
        raise PipelineError(f"all {len(candidates)} response generations failed")
    return out


# Standard Alpaca prompt wording.
PROMPT_HEADER = ("Below is an instruction that describes a task. "
                 "Write a response that appropriately completes the request.")
PROMPT_HEADER_INPUT = ("Below is an instruction that describes a task, paired with an input "
                       "that provides further context. Write a response that appropriately "
                       "completes the request.")


def render_record(instruction: str, output: str, input: Optional[str] = None) -> str:
    if input:
        return (f"{PROMPT_HEADER_INPUT}\n\n### Instruction:\n{instruction}\n\n"
                f"### Input:\n{input}\n\n### Response:\n{output}")
    return f"{PROMPT_HEADER}\n\n### Instruction:\n{instruction}\n\n### Response:\n{output}"


def parse_record(text: str) -> tuple[str, Optional[str], str]:
    """Inverse of :func:`render_record`: returns (instruction, input, output)."""
    _, sep, rest = text.partition("### Instruction:\n")
    if not sep:
        raise ValueError("missing '### Instruction:' block")
    body, sep, output = rest.partition("\n\n### Response:\n")
    if not sep:
        raise ValueError("missing '### Response:' block")
    instruction, sep, input = body.partition("\n\n### Input:\n")
    return instruction, (input if sep else None), output


def companion_path(path: str | os.PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.jsonl")


def render_training_file(records: Iterable[ExportRecord], path: str | os.PathLike) -> tuple[Path, Path]:
    """Write ``[{"text": ...}, ...]`` plus a JSONL companion with lineage and scores."""
    records = list(records)
    path = Path(path)
    entries = [{"text": render_record(r.instruction, r.output, r.input)} for r in records]
    path.write_text(json.dumps(entries, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    meta = companion_path(path)
    with meta.open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.as_dict(), ensure_ascii=False) + "\n")
    return path, meta


def read_training_file(path: str | os.PathLike) -> list[tuple[str, Optional[str], str]]:
    entries = json.loads(Path(path).read_text(encoding="utf-8"))
    return [parse_record(e["text"]) for e in entries]


def read_companion(path: str | os.PathLike) -> list[ExportRecord]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        out.append(ExportRecord(d["instruction"], d["output"], Lineage.from_dict(d["lineage"]),
                                ScoreTriple.from_dict(d["scores"]), d.get("input") or None))
    return out


@dataclass(frozen=True)
class DatasetStats:
    mean_quality: float
    mean_diversity: float
    mean_complexity: float
    count: int

    @property
    def mean_of_means(self) -> float:
        return (self.mean_quality + self.mean_diversity + self.mean_complexity) / 3.0

    def as_dict(self) -> dict:
        return {"count": self.count, "mean_quality": self.mean_quality,
                "mean_diversity": self.mean_diversity, "mean_complexity": self.mean_complexity,
                "mean_of_means": self.mean_of_means}


def compute_stats(scores: Iterable[ScoreTriple]) -> DatasetStats:
    """Per-metric means and their average (not the mean of per-record sums)."""
    scores = list(scores)
    if not scores:
        raise ValueError("compute_stats needs at least one scored record")
    return DatasetStats(
        statistics.fmean(s.quality for s in scores),
        statistics.fmean(s.diversity for s in scores),
        statistics.fmean(s.complexity for s in scores),
        len(scores),
    )
