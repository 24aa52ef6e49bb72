"""Instruction scoring and the composite node reward.

A :class:`ScoreTriple` holds quality, diversity (distinct intent count) and
complexity.  The reward of an instruction is their sum, optionally weighted.

Two scorers are provided:

``HeuristicScorer``
    Pure function of the text, used for offline runs and tests.  Formulas
    (frozen; changing them changes every recorded tree)::

        words      = whitespace-separated tokens
        separators = count of , ; : ( and -- in the text
        connectives= tokens in CONNECTIVES (lowercased, punctuation stripped)
        signal     = 0.05*max(0, words-5) + 0.4*separators + 0.4*connectives
        complexity = 1 + 4*(1 - exp(-signal/2))

        length     = min(1, (words-1)/24), damped past 150 words
        lexical    = distinct tokens / tokens
        quality    = 1 + 4*(length*(0.5 + 0.3*lexical)
                            + 0.1*[starts upper] + 0.1*[ends . ? !])

        diversity  = number of distinct intents, where each clause that opens
                     with an imperative verb counts under that verb and each
                     question counts under its wh-word

    Both ratings are rounded to 4 decimals.

``JudgeScorer``
    Asks a :class:`~evoltree.llm.Generator` to rate the instruction and
    parses ``quality``/``complexity`` (clamped to [1, 5]) and the intent
    count.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence, runtime_checkable

from .llm import GenerationError, GenerationRequest, Generator


class ScoringError(RuntimeError):
    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


@dataclass(frozen=True)
class ScoreTriple:
    """Quality and complexity ratings plus the intent count.

    Scorers here always emit an integral intent count; fractional values are
    accepted so that dataset averages and external scorers fit the same type.
    """

    quality: float
    diversity: float
    complexity: float

    def __post_init__(self):
        for name in ("quality", "complexity"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        d = self.diversity
        if isinstance(d, bool) or not isinstance(d, (int, float)):
            raise ValueError(f"diversity must be a number, got {d!r}")
        if not math.isfinite(d) or d < 0:
            raise ValueError(f"diversity must be finite and >= 0, got {d}")
        if isinstance(d, float) and d.is_integer():
            object.__setattr__(self, "diversity", int(d))

    def as_dict(self) -> dict:
        return {"quality": self.quality, "diversity": self.diversity, "complexity": self.complexity}

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreTriple":
        return cls(float(d["quality"]), d["diversity"], float(d["complexity"]))

    def capped(self, diversity_cap: Optional[int]) -> "ScoreTriple":
        if diversity_cap is None or self.diversity <= diversity_cap:
            return self
        return ScoreTriple(self.quality, diversity_cap, self.complexity)


DEFAULT_WEIGHTS = (1.0, 1.0, 1.0)


def composite_value(scores: ScoreTriple, weights: Sequence[float] = DEFAULT_WEIGHTS) -> float:
    """Weighted sum quality + diversity + complexity (unit weights by default)."""
    wq, wd, wc = weights
    if wq < 0 or wd < 0 or wc < 0:
        raise ValueError("weights must be nonnegative")
    return wq * scores.quality + wd * scores.diversity + wc * scores.complexity


@runtime_checkable
class Scorer(Protocol):
    def score(self, instruction: str) -> ScoreTriple: ...


# --- heuristic scorer -------------------------------------------------------

CONNECTIVES = frozenset({
    "and", "or", "but", "while", "because", "although", "though", "if", "unless",
    "when", "whereas", "since", "then", "so", "including", "considering",
    "especially", "which", "that", "whether", "after", "before",
})
IMPERATIVES = frozenset({
    "add", "analyze", "answer", "arrange", "build", "calculate", "categorize",
    "cite", "classify", "compare", "compile", "compose", "convert", "create",
    "define", "describe", "design", "develop", "discuss", "draft", "edit",
    "emphasize", "estimate", "evaluate", "explain", "express", "extract", "find",
    "generate", "give", "highlight", "identify", "illustrate", "imagine",
    "implement", "include", "list", "make", "name", "outline", "plan", "predict",
    "prepare", "propose", "provide", "rank", "recommend", "rewrite", "share",
    "show", "solve", "sort", "suggest", "summarize", "tell", "translate",
    "use", "write",
})
_POLITE = frozenset({"please", "kindly", "also", "then", "and", "now", "finally", "first"})
_SEPARATORS = re.compile(r"[,;:(]|--")
_SENTENCE = re.compile(r"[^.?!]+[.?!]?")
_CLAUSE_SPLIT = re.compile(r"[,;:]|\band\b|\bthen\b", re.IGNORECASE)
_WORD_STRIP = re.compile(r"^[^\w]+|[^\w]+$")


def _tokens(text: str) -> list[str]:
    return text.split()


def _norm(tok: str) -> str:
    return _WORD_STRIP.sub("", tok.lower())


def _complexity(text: str) -> float:
    toks = _tokens(text)
    words = len(toks)
    seps = len(_SEPARATORS.findall(text))
    conn = sum(1 for t in toks if _norm(t) in CONNECTIVES)
    signal = 0.05 * max(0, words - 5) + 0.4 * seps + 0.4 * conn
    return round(1.0 + 4.0 * (1.0 - math.exp(-signal / 2.0)), 4)


def _quality(text: str) -> float:
    toks = _tokens(text)
    words = len(toks)
    if words == 0:
        return 1.0
    length = min(1.0, (words - 1) / 24.0)
    if words > 150:
        length *= max(0.5, 1.0 - (words - 150) / 300.0)
    normed = [_norm(t) for t in toks]
    lexical = len(set(normed)) / words
    stripped = text.strip()
    starts_upper = 1.0 if stripped[:1].isupper() else 0.0
    ends_terminal = 1.0 if stripped[-1:] in ".?!" else 0.0
    raw = length * (0.5 + 0.3 * lexical) + 0.1 * starts_upper + 0.1 * ends_terminal
    return round(1.0 + 4.0 * raw, 4)


def count_intents(text: str) -> int:
    intents = set()
    for sentence in _SENTENCE.findall(text):
        sentence = sentence.strip()
        if not sentence:
            continue
        if sentence.endswith("?"):
            first = next((_norm(t) for t in _tokens(sentence) if _norm(t) not in _POLITE), "")
            intents.add("?" + first)
        for clause in _CLAUSE_SPLIT.split(sentence):
            lead = next((_norm(t) for t in _tokens(clause) if _norm(t) not in _POLITE), "")
            if lead in IMPERATIVES:
                intents.add(lead)
    return len(intents)


def heuristic_score(instruction: str) -> ScoreTriple:
    """Deterministic text-statistics scorer; see the module docstring."""
    return ScoreTriple(_quality(instruction), count_intents(instruction), _complexity(instruction))


@dataclass(frozen=True)
class HeuristicScorer:
    diversity_cap: Optional[int] = None

    def score(self, instruction: str) -> ScoreTriple:
        return heuristic_score(instruction).capped(self.diversity_cap)


# --- LLM judge --------------------------------------------------------------

JUDGE_TEMPLATE = """You are a careful reviewer of instructions written for AI assistants.
Assess the instruction below on three aspects.

1. Quality: how clear, well-formed, answerable and useful the instruction is.
   Rate from 1 (very poor) to 5 (excellent).
2. Complexity: how much knowledge, reasoning and constraint handling a good
   response requires. Rate from 1 (trivial) to 5 (very demanding).
3. Intents: list every distinct user intent (a separate thing the user wants
   done or answered) that the instruction expresses.

#Instruction#:
{instruction}

Reply in exactly this format:
quality: <1-5>
complexity: <1-5>
intents: <number of distinct intents>
intent list:
- <intent 1>
- <intent 2>
"""

JUDGE_RETRY_SUFFIX = """
Your previous reply could not be read. Reply with only these three lines:
quality: <1-5>
complexity: <1-5>
intents: <integer>
Previous reply:
{raw}
"""

_KV = re.compile(
    r"[\"']?\b(quality|complexity|diversity|intents?|intent_count)\b[\"']?\s*[:=]\s*(-?\d+(?:\.\d+)?)",
    re.IGNORECASE,
)


def render_judge_prompt(instruction: str) -> str:
    return JUDGE_TEMPLATE.replace("{instruction}", instruction, 1)


def _clamp_rating(x: float) -> float:
    return min(5.0, max(1.0, float(x)))


def parse_judgement(text: str) -> Optional[ScoreTriple]:
    """Parse judge output; returns None when any of the three values is missing.

    Accepts ``key: value`` lines or a JSON object (``intents`` may be a list,
    in which case its length is used).
    """
    found: dict[str, float] = {}
    start, end = text.find("{"), text.rfind("}")
    if 0 <= start < end:
        try:
            obj = json.loads(text[start:end + 1])
        except json.JSONDecodeError:
            obj = None
        if isinstance(obj, dict):
            lower = {str(k).lower(): v for k, v in obj.items()}
            for key in ("quality", "complexity"):
                if isinstance(lower.get(key), (int, float)):
                    found[key] = float(lower[key])
            for key in ("intents", "intent", "intent_count", "diversity"):
                v = lower.get(key)
                if isinstance(v, list):
                    found["diversity"] = float(len(v))
                    break
                if isinstance(v, (int, float)) and not isinstance(v, bool):
                    found["diversity"] = float(v)
                    break
    for key, value in _KV.findall(text):
        key = key.lower()
        if key.startswith("intent") or key == "diversity":
            key = "diversity"
        found.setdefault(key, float(value))
    if not {"quality", "complexity", "diversity"} <= found.keys():
        return None
    return ScoreTriple(
        quality=_clamp_rating(found["quality"]),
        diversity=max(0, int(round(found["diversity"]))),
        complexity=_clamp_rating(found["complexity"]),
    )


def judge_score(
    instruction: str,
    generator: Generator,
    temperature: float = 0.0,
    max_tokens: int = 512,
) -> ScoreTriple:
    """Score with an LLM judge: one call, plus one re-ask if parsing fails."""
    prompt = render_judge_prompt(instruction)
    raw = generator.generate(GenerationRequest(prompt, temperature, max_tokens)).text
    triple = parse_judgement(raw)
    if triple is not None:
        return triple
    retry = prompt + JUDGE_RETRY_SUFFIX.replace("{raw}", raw[:2000], 1)
    raw2 = generator.generate(GenerationRequest(retry, temperature, max_tokens)).text
    triple = parse_judgement(raw2)
    if triple is None:
        raise ScoringError("judge output unparseable after retry", raw=raw2)
    return triple


class JudgeScorer:
    def __init__(self, generator: Generator, temperature: float = 0.0,
                 max_tokens: int = 512, diversity_cap: Optional[int] = None):
        self.generator = generator
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.diversity_cap = diversity_cap

    def score(self, instruction: str) -> ScoreTriple:
        try:
            triple = judge_score(instruction, self.generator, self.temperature, self.max_tokens)
        except GenerationError as exc:
            raise ScoringError(f"judge call failed: {exc}") from exc
        return triple.capped(self.diversity_cap)
