"""Evolution actions: rewriting directives applied to an instruction.

The builtin catalog holds twelve general-purpose directives.  Task-specific
directives can be mined from sample tasks with :func:`render_meta_prompt`
and :func:`parse_extracted_actions`; only proposals that give concrete
examples (the phrase "such as") are kept.
"""

from __future__ import annotations

import json
import logging
import os
import random
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

from .llm import INSTRUCTION_CLOSE, INSTRUCTION_OPEN

logger = logging.getLogger(__name__)

PLACEHOLDER = "{instruction}"
GROWTH_RULE = "10-20 words"
EXAMPLE_CUE = "such as"
BUILTIN = "builtin"
EXTRACTED = "extracted"

_REWRITE_TEMPLATE = (
    "I want you to act as an Instruction Rewriter.\n"
    "Rewrite the given instruction into a more valuable version that a capable AI "
    "assistant can still understand and answer.\n"
    "Evolution action: {name}\n"
    "Method: {description}\n"
    "The rewritten instruction must add " + GROWTH_RULE + " to the given instruction, "
    "stay reasonable, and keep any input it refers to.\n"
    "Output only the rewritten instruction, with no explanation.\n"
    "\n" + INSTRUCTION_OPEN + PLACEHOLDER + INSTRUCTION_CLOSE
)

_CREATE_TEMPLATE = (
    "I want you to act as an Instruction Creator.\n"
    "Draw inspiration from the given instruction and create a brand new instruction "
    "in the same domain. Do not rewrite the given instruction itself.\n"
    "Evolution action: {name}\n"
    "Method: {description}\n"
    "The new instruction should be " + GROWTH_RULE + " longer than the given one "
    "and be reasonable for an AI assistant to answer.\n"
    "Output only the new instruction, with no explanation.\n"
    "\n" + INSTRUCTION_OPEN + PLACEHOLDER + INSTRUCTION_CLOSE
)


class ActionError(ValueError):
    pass


@dataclass(frozen=True)
class EvolutionAction:
    name: str
    description: str
    template: str
    origin: str = BUILTIN

    def __post_init__(self):
        if not self.name.strip():
            raise ActionError("action name must be nonempty")
        if self.template.count(PLACEHOLDER) != 1:
            raise ActionError(f"template of {self.name!r} must contain {PLACEHOLDER} exactly once")
        if self.origin not in (BUILTIN, EXTRACTED):
            raise ActionError(f"unknown origin {self.origin!r}")

    @classmethod
    def compose(cls, name: str, description: str, origin: str = BUILTIN,
                create: bool = False) -> "EvolutionAction":
        """Build an action whose template wraps ``description`` in the standard prompt."""
        base = _CREATE_TEMPLATE if create else _REWRITE_TEMPLATE
        # Placeholder-free substitution so braces in descriptions stay literal.
        template = base.replace("{name}", name, 1).replace("{description}", description, 1)
        return cls(name, description, template, origin)

    def render(self, instruction: str) -> str:
        return render_prompt(self, instruction)


def render_prompt(action: EvolutionAction, instruction: str) -> str:
    if not instruction or not instruction.strip():
        raise ActionError("instruction must be nonempty")
    return action.template.replace(PLACEHOLDER, instruction, 1)


def normalize_name(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", " ", name.lower()).strip()


class ActionCatalog:
    """Ordered, immutable collection of actions with unique names."""

    def __init__(self, actions: Iterable[EvolutionAction]):
        self._actions = tuple(actions)
        seen = set()
        for a in self._actions:
            key = normalize_name(a.name)
            if key in seen:
                raise ActionError(f"duplicate action name {a.name!r}")
            seen.add(key)

    @property
    def actions(self) -> tuple[EvolutionAction, ...]:
        return self._actions

    def __len__(self) -> int:
        return len(self._actions)

    def __iter__(self) -> Iterator[EvolutionAction]:
        return iter(self._actions)

    def __getitem__(self, i: int) -> EvolutionAction:
        return self._actions[i]

    def __eq__(self, other) -> bool:
        return isinstance(other, ActionCatalog) and self._actions == other._actions

    def __hash__(self) -> int:
        return hash(self._actions)

    @property
    def names(self) -> list[str]:
        return [a.name for a in self._actions]

    def get(self, name: str) -> EvolutionAction:
        key = normalize_name(name)
        for a in self._actions:
            if normalize_name(a.name) == key:
                return a
        raise KeyError(name)

    def has(self, name: str) -> bool:
        key = normalize_name(name)
        return any(normalize_name(a.name) == key for a in self._actions)

    def extended(self, extra: Iterable[EvolutionAction]) -> "ActionCatalog":
        return ActionCatalog(self._actions + tuple(a for a in extra if not self.has(a.name)))

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "actions": [
                {"name": a.name, "description": a.description, "template": a.template, "origin": a.origin}
                for a in self._actions
            ],
        }

    @classmethod
    def from_dict(cls, doc) -> "ActionCatalog":
        items = doc.get("actions") if isinstance(doc, dict) else doc
        if not isinstance(items, list):
            raise ActionError("catalog document must be a list or have an 'actions' list")
        actions = []
        for k, item in enumerate(items):
            try:
                name, desc = item["name"], item["description"]
            except (KeyError, TypeError) as exc:
                raise ActionError(f"actions[{k}]: missing field {exc}") from None
            origin = item.get("origin", BUILTIN)
            template = item.get("template")
            if template is None:
                action = EvolutionAction.compose(name, desc, origin)
            else:
                action = EvolutionAction(name, desc, template, origin)
            actions.append(action)
        return cls(actions)


def save_catalog(catalog: ActionCatalog, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(catalog.to_dict(), indent=2, ensure_ascii=False) + "\n",
                          encoding="utf-8")


def load_catalog(path: str | os.PathLike) -> ActionCatalog:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ActionError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from exc
    return ActionCatalog.from_dict(doc)


BUILTIN_ACTIONS: tuple[tuple[str, str], ...] = (
    ("Add Global and Local Goals",
     "Add one or more global and local goals into the instruction to enhance its direction and purpose."),
    ("Add Key Constraints",
     "Add one or more constraints where necessary to define its limitations and boundaries."),
    ("Add Task Requirements",
     "Specify one or more detailed requirements to clarify the tasks within the instruction."),
    ("Add Problem-Solving Skills",
     "Add one or more problem-solving task skills."),
    ("Add Reasoning Complexity",
     "Increase complexity by adding one or more reasoning elements."),
    ("Add Domain Knowledge",
     "Add one or more areas of domain-specific knowledge, such as medicine, law, finance, IT technology."),
    ("Add Life Topics",
     "Add one or more life topics. Topics can range from health and nutrition, cooking, "
     "photography, music, and travel, to parenting."),
    ("Add Real-World Applications",
     "Add one or more real-world applications to provide practical context and applicability, "
     "such as education, customer service, and Business."),
    ("Add Emotional Expression",
     "Add one or more emotional content elements such as excitement or concern."),
    ("Format the Input Style",
     "Define one or more input formatting styles, such as a doctor, teacher, or customer."),
    ("Format the Output Style",
     "Specify one or more output formats, such as report format or summarized in paragraphs."),
    ("Create a New One",
     "Create one instruction within the same domain to introduce fresh perspectives."),
)

OPTIONAL_ACTIONS: tuple[tuple[str, str], ...] = (
    ("Refine the Factuality",
     "Make the instruction factually precise by naming the specific objects, steps or facts "
     "it concerns, such as materials, stages, or quantities."),
)


def builtin_catalog(include_optional: bool = False) -> ActionCatalog:
    """The twelve builtin actions; ``include_optional`` appends the factuality action."""
    rows = BUILTIN_ACTIONS + (OPTIONAL_ACTIONS if include_optional else ())
    return ActionCatalog(
        EvolutionAction.compose(name, desc, BUILTIN, create=(name == "Create a New One"))
        for name, desc in rows
    )


# --- task-specific extraction ----------------------------------------------

META_TEMPLATE = """You design evolution actions for rewriting instructions given to AI assistants.
Each evolution action is a short directive that makes an instruction more useful for a
particular kind of task, for example by adding constraints, context, or output requirements
that people working on such tasks actually need.

Here are sample tasks from the target domain:
{samples}

Propose new evolution actions tailored to these tasks. Write one action per line in the form
- <Action Name>: <one-sentence description>
Every description must name concrete illustrative examples introduced by the words "such as"
(for example: "Add one or more legal jurisdictions, such as EU or US federal law.").
Do not repeat generic actions like adding constraints or changing the output format.
"""

_BULLET = re.compile(r"^\s*(?:[-*•–]|\d+[.)]|\(\d+\))\s*")
_MAX_NAME_WORDS = 6


def render_meta_prompt(task_samples: Sequence[str]) -> str:
    samples = [s.strip() for s in task_samples if s and s.strip()]
    if not samples:
        raise ActionError("at least one task sample is required")
    block = "\n".join(f"{i}. {s}" for i, s in enumerate(samples, 1))
    return META_TEMPLATE.replace("{samples}", block, 1)


def _split_proposal(line: str) -> tuple[str, str]:
    body = _BULLET.sub("", line).strip().strip("*").strip()
    head, sep, tail = body.partition(":")
    head = head.strip().strip("*").strip()
    if sep and head and len(head.split()) <= _MAX_NAME_WORDS and tail.strip():
        return head, tail.strip()
    name = " ".join(body.split()[:_MAX_NAME_WORDS]).rstrip(",.;:")
    return name, body


def parse_extracted_actions(
    generator_output: str,
    catalog: Optional[ActionCatalog] = None,
) -> list[EvolutionAction]:
    """Parse one proposal per line, keep those with "such as", drop duplicates.

    Duplicates are judged by normalized name against ``catalog`` and against
    earlier proposals in the same output.
    """
    taken = {normalize_name(a.name) for a in catalog} if catalog is not None else set()
    out: list[EvolutionAction] = []
    candidates = 0
    for line in generator_output.splitlines():
        if not line.strip():
            continue
        name, description = _split_proposal(line)
        if not name:
            continue
        candidates += 1
        if EXAMPLE_CUE not in description.lower():
            continue
        key = normalize_name(name)
        if not key or key in taken:
            logger.info("dropping duplicate extracted action %r", name)
            continue
        taken.add(key)
        out.append(EvolutionAction.compose(name, description, EXTRACTED))
    if not out:
        logger.warning("no usable actions extracted (%d candidate lines)", candidates)
    return out


def sample_actions(
    catalog: ActionCatalog,
    n: int,
    rng_seed: int | random.Random,
) -> list[EvolutionAction]:
    """``n`` actions uniformly without replacement (with replacement if ``n`` > size)."""
    if len(catalog) == 0:
        raise ActionError("cannot sample from an empty catalog")
    if n < 1:
        raise ActionError(f"n must be >= 1, got {n}")
    rng = rng_seed if isinstance(rng_seed, random.Random) else random.Random(rng_seed)
    pool = list(catalog)
    if n <= len(pool):
        return rng.sample(pool, n)
    return rng.choices(pool, k=n)
