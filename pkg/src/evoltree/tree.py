"""Search tree of evolved instructions and its on-disk format."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

from .reward import ScoreTriple, composite_value

SCHEMA_VERSION = 1
ROOT_ID = 0


class TreeStructureError(LookupError):
    pass


class TreeFormatError(ValueError):
    """Malformed tree document.  ``line``/``column`` are 1-based when known."""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + where)
        self.line = line
        self.column = column


class SchemaVersionError(ValueError):
    pass


@dataclass
class InstructionNode:
    id: int
    parent: Optional[int]
    instruction: str
    action: Optional[str]
    depth: int
    scores: Optional[ScoreTriple] = None
    value: Optional[float] = None  # running mean of returns; None until first visit
    visits: int = 0
    terminal: bool = False


@dataclass
class EvolutionTree:
    """Rooted tree keyed by monotonically assigned integer ids.

    ``seed_index`` and ``seed_input`` carry the seed record's position and
    optional input field so exported records can point back to it.
    """

    nodes: dict[int, InstructionNode] = field(default_factory=dict)
    children: dict[int, list[int]] = field(default_factory=dict)
    seed_source: str = ""
    seed_index: Optional[int] = None
    seed_input: Optional[str] = None
    root: int = ROOT_ID

    @classmethod
    def from_seed(cls, instruction: str, seed_source: str = "", seed_index: Optional[int] = None,
                  seed_input: Optional[str] = None) -> "EvolutionTree":
        if not instruction:
            raise ValueError("seed instruction must be nonempty")
        tree = cls(seed_source=seed_source, seed_index=seed_index, seed_input=seed_input)
        tree.nodes[ROOT_ID] = InstructionNode(ROOT_ID, None, instruction, None, depth=0)
        tree.children[ROOT_ID] = []
        return tree

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self) -> Iterator[InstructionNode]:
        return iter(self.nodes.values())

    def __getitem__(self, node_id: int) -> InstructionNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise TreeStructureError(f"unknown node id {node_id}") from None

    def __contains__(self, node_id: object) -> bool:
        return node_id in self.nodes

    def add_child(self, parent: int, instruction: str, action_name: str) -> int:
        p = self[parent]
        if not action_name:
            raise ValueError("action name must be nonempty")
        node_id = max(self.nodes) + 1
        self.nodes[node_id] = InstructionNode(node_id, parent, instruction, action_name, p.depth + 1)
        self.children[parent].append(node_id)
        self.children[node_id] = []
        return node_id

    def is_leaf(self, node_id: int) -> bool:
        return not self.children[node_id]

    def path_to_root(self, node_id: int) -> list[int]:
        """Root-first list of ids ending at ``node_id``."""
        path = []
        cur: Optional[int] = self[node_id].id
        while cur is not None:
            path.append(cur)
            cur = self.nodes[cur].parent
        path.reverse()
        return path

    def terminal_paths(self) -> list[list[int]]:
        return [self.path_to_root(n.id) for n in self.nodes.values() if n.terminal]

    def leaves(self) -> list[int]:
        return [i for i in self.nodes if not self.children[i]]

    def actions_on_path(self, node_id: int) -> list[str]:
        return [self.nodes[i].action for i in self.path_to_root(node_id)[1:]]

    def check(self) -> None:
        """Raise TreeStructureError if parent/child links are inconsistent."""
        root = self[self.root]
        if root.parent is not None or root.action is not None or root.depth != 0:
            raise TreeStructureError("root must have no parent, no action and depth 0")
        seen = {self.root}
        stack = [self.root]
        while stack:
            pid = stack.pop()
            for cid in self.children[pid]:
                child = self[cid]
                if cid in seen:
                    raise TreeStructureError(f"node {cid} reachable twice")
                if child.parent != pid or child.depth != self.nodes[pid].depth + 1 or not child.action:
                    raise TreeStructureError(f"node {cid} inconsistent with parent {pid}")
                seen.add(cid)
                stack.append(cid)
        if seen != set(self.nodes):
            raise TreeStructureError(f"unreachable nodes: {sorted(set(self.nodes) - seen)}")


# Module-level aliases for the operation-style API.
def add_child(tree: EvolutionTree, parent: int, instruction: str, action_name: str) -> int:
    return tree.add_child(parent, instruction, action_name)


def path_to_root(tree: EvolutionTree, node_id: int) -> list[int]:
    return tree.path_to_root(node_id)


def terminal_paths(tree: EvolutionTree) -> list[list[int]]:
    return tree.terminal_paths()


# --- persistence ------------------------------------------------------------

def _node_to_dict(n: InstructionNode) -> dict:
    return {
        "id": n.id,
        "parent": n.parent,
        "action": n.action,
        "instruction": n.instruction,
        "scores": n.scores.as_dict() if n.scores is not None else None,
        "value": n.value,
        "visits": n.visits,
        "depth": n.depth,
        "terminal": n.terminal,
    }


def tree_to_dict(tree: EvolutionTree) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "seed_source": tree.seed_source,
        "seed_index": tree.seed_index,
        "seed_input": tree.seed_input,
        "root": tree.root,
        "nodes": [_node_to_dict(tree.nodes[i]) for i in sorted(tree.nodes)],
    }


def dumps(tree: EvolutionTree) -> str:
    return json.dumps(tree_to_dict(tree), indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise TreeFormatError(f"{where}: missing field {key!r}")
    return d[key]


def tree_from_dict(doc: dict) -> EvolutionTree:
    if not isinstance(doc, dict):
        raise TreeFormatError("tree document must be an object")
    version = _require(doc, "schema_version", "document")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(f"unsupported schema_version {version!r}; expected {SCHEMA_VERSION}")
    root = _require(doc, "root", "document")
    raw_nodes = _require(doc, "nodes", "document")
    if not isinstance(raw_nodes, list):
        raise TreeFormatError("'nodes' must be a list")
    tree = EvolutionTree(seed_source=doc.get("seed_source", ""), seed_index=doc.get("seed_index"),
                         seed_input=doc.get("seed_input"), root=root)
    for k, nd in enumerate(raw_nodes):
        where = f"nodes[{k}]"
        if not isinstance(nd, dict):
            raise TreeFormatError(f"{where}: must be an object")
        try:
            scores = nd.get("scores")
            value = nd.get("value")
            node = InstructionNode(
                id=int(_require(nd, "id", where)),
                parent=_require(nd, "parent", where),
                instruction=str(_require(nd, "instruction", where)),
                action=_require(nd, "action", where),
                depth=int(_require(nd, "depth", where)),
                scores=ScoreTriple.from_dict(scores) if scores is not None else None,
                value=float(value) if value is not None else None,
                visits=int(_require(nd, "visits", where)),
                terminal=bool(_require(nd, "terminal", where)),
            )
        except (TypeError, ValueError, KeyError) as exc:
            if isinstance(exc, TreeFormatError):
                raise
            raise TreeFormatError(f"{where}: {exc}") from exc
        if node.id in tree.nodes:
            raise TreeFormatError(f"{where}: duplicate id {node.id}")
        tree.nodes[node.id] = node
        tree.children[node.id] = []
    if root not in tree.nodes:
        raise TreeFormatError(f"root id {root} not among nodes")
    for nid in sorted(tree.nodes):
        parent = tree.nodes[nid].parent
        if parent is None:
            continue
        if parent not in tree.nodes:
            raise TreeFormatError(f"node {nid}: unknown parent {parent}")
        tree.children[parent].append(nid)
    try:
        tree.check()
    except TreeStructureError as exc:
        raise TreeFormatError(str(exc)) from exc
    return tree


def loads(text: str) -> EvolutionTree:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TreeFormatError(f"invalid JSON: {exc.msg}", exc.lineno, exc.colno) from exc
    return tree_from_dict(doc)


def save_tree(tree: EvolutionTree, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.write_text(dumps(tree), encoding="utf-8")
    return path


def load_tree(path: str | os.PathLike) -> EvolutionTree:
    return loads(Path(path).read_text(encoding="utf-8"))


def trees_equal(a: EvolutionTree, b: EvolutionTree) -> bool:
    """Structural equality: same nodes (all fields), ordering and metadata."""
    if tree_to_dict(a) != tree_to_dict(b):
        return False
    return all(a.children[i] == b.children[i] for i in a.nodes)


def best_node(tree: EvolutionTree, ids=None, key=None) -> Optional[int]:
    """Id with the highest reward among ``ids`` (default: all scored nodes).

    Ties go to the lowest id.
    """
    key = key or (lambda n: composite_value(n.scores))
    best, best_v = None, -math.inf
    for i in sorted(ids if ids is not None else tree.nodes):
        n = tree.nodes[i]
        if n.scores is None:
            continue
        v = key(n)
        if v > best_v:
            best, best_v = i, v
    return best
