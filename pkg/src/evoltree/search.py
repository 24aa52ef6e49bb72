"""Monte Carlo tree search over instruction rewrites.

One episode runs select -> expand -> evaluate -> simulate -> backpropagate.
Rollout states produced during simulation are scored but never added to
the tree.
"""

from __future__ import annotations

import logging
import math
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

from .actions import ActionCatalog, render_prompt, sample_actions
from .llm import GenerationError, GenerationRequest, Generator, generate_many
from .reward import ScoreTriple, Scorer, ScoringError, composite_value
from .tree import EvolutionTree

logger = logging.getLogger(__name__)


class SearchExhausted(RuntimeError):
    """Every leaf reachable from the root is terminal."""


class ExpansionError(RuntimeError):
    def __init__(self, message: str, failures: Sequence[str] = ()):
        super().__init__(message)
        self.failures = list(failures)


class NodeScoringError(RuntimeError):
    def __init__(self, node_id: int, cause: Exception):
        super().__init__(f"scoring node {node_id} failed: {cause}")
        self.node_id = node_id
        self.cause = cause


@dataclass
class SearchConfig:
    exploration_c: float = 1.0
    max_depth: int = 4
    reward_threshold: float = 10.0
    expansion_width: int = 5
    episodes: int = 3
    rollout_max_steps: Optional[int] = None  # None -> max_depth
    rng_seed: int = 0
    temperature: float = 0.7
    max_tokens: int = 2048
    score_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    max_workers: int = 5  # concurrent generator/scorer calls within one expansion

    def __post_init__(self):
        self.score_weights = tuple(float(w) for w in self.score_weights)
        if len(self.score_weights) != 3:
            raise ValueError("score_weights needs three entries")
        for name in ("max_depth", "expansion_width", "episodes", "max_workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.rollout_max_steps is not None and self.rollout_max_steps < 1:
            raise ValueError("rollout_max_steps must be positive")
        if self.exploration_c < 0:
            raise ValueError("exploration_c must be >= 0")
        GenerationRequest("x", self.temperature, self.max_tokens)  # validates ranges

    @property
    def rollout_steps(self) -> int:
        return self.rollout_max_steps if self.rollout_max_steps is not None else self.max_depth

    def request(self, prompt: str) -> GenerationRequest:
        return GenerationRequest(prompt, self.temperature, self.max_tokens)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["score_weights"] = list(self.score_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown search config keys: {sorted(unknown)}")
        return cls(**d)


def uct(value: float, visits: int, parent_visits: int, c: float) -> float:
    """Mean value plus exploration bonus; unvisited nodes score +inf."""
    if parent_visits < 1:
        raise ValueError("parent_visits must be >= 1")
    if visits == 0:
        return math.inf
    return value + c * math.sqrt(math.log(parent_visits) / visits)


def is_terminal(depth: int, reward: float, config: SearchConfig) -> bool:
    return depth > config.max_depth or reward > config.reward_threshold


def backpropagate(tree: EvolutionTree, path: Sequence[int], v: float) -> None:
    """Fold return ``v`` into the running mean of every node on ``path``."""
    for node_id in path:
        node = tree[node_id]
        node.visits += 1
        n = node.visits
        old = node.value if node.value is not None else 0.0
        node.value = old * ((n - 1) / n) + v / n


@dataclass
class EpisodeReport:
    episode: int
    selected_path: list[int]
    expanded: list[int] = field(default_factory=list)
    simulated_from: Optional[int] = None
    rollout_reward: Optional[float] = None
    rollout_steps: int = 0
    backpropagated_nodes: int = 0
    failures: list[str] = field(default_factory=list)
    status: str = "ok"


@dataclass
class SearchResult:
    tree: EvolutionTree
    reports: list[EpisodeReport]

    @property
    def failures(self) -> list[str]:
        return [f for r in self.reports for f in r.failures]


class MCTS:
    """Search driver bound to one generator, scorer and action catalog."""

    def __init__(self, catalog: ActionCatalog, generator: Generator, scorer: Scorer,
                 config: Optional[SearchConfig] = None):
        if len(catalog) == 0:
            raise ValueError("action catalog is empty")
        self.catalog = catalog
        self.generator = generator
        self.scorer = scorer
        self.config = config or SearchConfig()
        self.rng = random.Random(self.config.rng_seed)
        self.failures: list[str] = []

    def reward(self, scores: ScoreTriple) -> float:
        return composite_value(scores, self.config.score_weights)

    def node_reward(self, tree: EvolutionTree, node_id: int) -> float:
        scores = tree[node_id].scores
        if scores is None:
            raise ValueError(f"node {node_id} has not been evaluated")
        return self.reward(scores)

    # -- selection -------------------------------------------------------

    def _open(self, tree: EvolutionTree, node_id: int, memo: dict) -> bool:
        """True if the subtree holds a leaf that can still be expanded."""
        if node_id in memo:
            return memo[node_id]
        node = tree.nodes[node_id]
        kids = tree.children[node_id]
        if node.terminal:
            result = False
        elif not kids:
            result = True
        else:
            result = any(self._open(tree, k, memo) for k in kids)
        memo[node_id] = result
        return result

    def select(self, tree: EvolutionTree) -> int:
        root = tree[tree.root]
        if root.terminal:
            return root.id
        memo: dict[int, bool] = {}
        if not self._open(tree, root.id, memo):
            raise SearchExhausted("all leaves are terminal")
        cur = root
        c = self.config.exploration_c
        while tree.children[cur.id]:
            parent_n = max(cur.visits, 1)
            best, best_u = None, -math.inf
            for cid in tree.children[cur.id]:  # ascending ids: first max wins ties
                if not self._open(tree, cid, memo):
                    continue
                child = tree.nodes[cid]
                u = uct(child.value or 0.0, child.visits, parent_n, c)
                if u > best_u:
                    best, best_u = child, u
            cur = best
        return cur.id

    # -- expansion / evaluation -----------------------------------------

    def expand(self, tree: EvolutionTree, leaf: int) -> tuple[list[int], list[str]]:
        """Add one child per sampled action; returns (new ids, failure messages)."""
        node = tree[leaf]
        if node.terminal or tree.children[leaf]:
            raise ValueError(f"node {leaf} is not an expandable leaf")
        actions = sample_actions(self.catalog, self.config.expansion_width, self.rng)
        requests = [self.config.request(render_prompt(a, node.instruction)) for a in actions]
        results = generate_many(self.generator, requests, self.config.max_workers)
        new_ids, failures = [], []
        for action, res in zip(actions, results):
            if isinstance(res, GenerationError):
                failures.append(f"node {leaf} / {action.name}: {res}")
                continue
            text = res.text.strip()
            if not text:
                failures.append(f"node {leaf} / {action.name}: empty generation")
                continue
            new_ids.append(tree.add_child(leaf, text, action.name))
        if not new_ids:
            raise ExpansionError(f"every generation failed when expanding node {leaf}", failures)
        return new_ids, failures

    def evaluate(self, tree: EvolutionTree, node_id: int) -> float:
        node = tree[node_id]
        try:
            node.scores = self.scorer.score(node.instruction)
        except (ScoringError, GenerationError) as exc:
            raise NodeScoringError(node_id, exc) from exc
        reward = self.reward(node.scores)
        node.terminal = is_terminal(node.depth, reward, self.config)
        return reward

    def _evaluate_many(self, tree: EvolutionTree, ids: list[int]) -> dict[int, float]:
        if self.config.max_workers <= 1 or len(ids) <= 1:
            results = [self._try_evaluate(tree, i) for i in ids]
        else:
            with ThreadPoolExecutor(max_workers=min(self.config.max_workers, len(ids))) as pool:
                results = list(pool.map(lambda i: self._try_evaluate(tree, i), ids))
        out = {}
        for i, r in zip(ids, results):
            if isinstance(r, NodeScoringError):
                self.failures.append(str(r))
            else:
                out[i] = r
        return out

    def _try_evaluate(self, tree, node_id):
        try:
            return self.evaluate(tree, node_id)
        except NodeScoringError as exc:
            return exc

    # -- simulation ----------------------------------------------------

    def simulate(self, tree: EvolutionTree, node_id: int) -> tuple[float, int]:
        """Random rollout from ``node_id``; returns (final reward, steps taken).

        The rollout stops at a terminal state, after ``rollout_steps`` steps,
        or at the last good state when a generation or scoring call fails.
        """
        node = tree[node_id]
        reward = self.node_reward(tree, node_id)
        if node.terminal:
            return reward, 0
        state, depth, steps = node.instruction, node.depth, 0
        while steps < self.config.rollout_steps:
            action = self.rng.choice(self.catalog.actions)
            try:
                text = self.generator.generate(self.config.request(render_prompt(action, state))).text.strip()
                if not text:
                    raise GenerationError("empty generation")
                scores = self.scorer.score(text)
            except (GenerationError, ScoringError) as exc:
                self.failures.append(f"rollout from node {node_id} / {action.name}: {exc}")
                break
            state, depth, steps = text, depth + 1, steps + 1
            reward = self.reward(scores)
            if is_terminal(depth, reward, self.config):
                break
        return reward, steps

    # -- driver --------------------------------------------------------

    def episode(self, tree: EvolutionTree, index: int) -> EpisodeReport:
        self.failures = []
        leaf = self.select(tree)
        report = EpisodeReport(index, tree.path_to_root(leaf))
        sim_from = leaf
        if tree[leaf].scores is None:  # an earlier scoring call failed
            try:
                self.evaluate(tree, leaf)
            except NodeScoringError as exc:
                report.failures = [str(exc)]
                report.status = "evaluation_failed"
                return report
        if not tree[leaf].terminal:
            try:
                new_ids, failed = self.expand(tree, leaf)
            except ExpansionError as exc:
                report.failures = exc.failures + [str(exc)]
                report.status = "expansion_failed"
                return report
            report.expanded = new_ids
            self.failures.extend(failed)
            rewards = self._evaluate_many(tree, new_ids)
            if rewards:
                sim_from = max(rewards, key=lambda i: (rewards[i], -i))
        report.simulated_from = sim_from
        try:
            v, steps = self.simulate(tree, sim_from)
        except ValueError as exc:  # leaf was never scored
            report.failures = self.failures + [str(exc)]
            report.status = "simulation_failed"
            return report
        path = tree.path_to_root(sim_from)
        backpropagate(tree, path, v)
        report.rollout_reward = v
        report.rollout_steps = steps
        report.backpropagated_nodes = len(path)
        report.failures = list(self.failures)
        return report

    def run(self, seed_instruction: str, seed_source: str = "", seed_index: Optional[int] = None,
            seed_input: Optional[str] = None) -> SearchResult:
        tree = EvolutionTree.from_seed(seed_instruction, seed_source, seed_index, seed_input)
        self.evaluate(tree, tree.root)
        reports = []
        for k in range(self.config.episodes):
            try:
                reports.append(self.episode(tree, k))
            except SearchExhausted:
                reports.append(EpisodeReport(k, [], status="exhausted"))
                logger.info("search exhausted after %d episodes", k)
                break
        return SearchResult(tree, reports)


def run_search(seed_instruction: str, catalog: ActionCatalog, generator: Generator, scorer: Scorer,
               config: Optional[SearchConfig] = None, **seed_meta) -> SearchResult:
    return MCTS(catalog, generator, scorer, config).run(seed_instruction, **seed_meta)
