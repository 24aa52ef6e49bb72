"""Test helpers: random trees, synthetic environments and the exhaustive oracle."""

from __future__ import annotations

import random
from dataclasses import dataclass

from evoltree.actions import ActionCatalog, builtin_catalog, render_prompt
from evoltree.llm import MockGenerator
from evoltree.reward import ScoreTriple, composite_value, heuristic_score
from evoltree.search import SearchConfig
from evoltree.tree import EvolutionTree

WORDS = (
    "explain", "and", "list", "why", "compare", "budget", "travel", "students,",
    "because", "describe", "risks;", "including", "examples", "while", "summarize",
    "clearly", "for", "beginners", "what", "costs?", "then", "write", "report",
    "rules:", "history", "mobile", "if", "needed", "design", "steps,",
)


def random_tree(rng: random.Random, n_nodes: int) -> EvolutionTree:
    tree = EvolutionTree.from_seed(f"seed {rng.random()}", seed_source="test", seed_index=rng.randrange(100))
    for _ in range(n_nodes - 1):
        parent = rng.choice(list(tree.nodes))
        tree.add_child(parent, " ".join(rng.choices(WORDS, k=rng.randint(1, 12))),
                       rng.choice(["Add Key Constraints", "Add Life Topics", "Create a New One"]))
    for node in tree:
        if rng.random() < 0.8:
            node.scores = ScoreTriple(rng.uniform(1, 5), rng.randrange(6), rng.uniform(1, 5))
        if rng.random() < 0.7:
            node.visits = rng.randint(1, 9)
            node.value = rng.uniform(-3, 15)
        node.terminal = tree.is_leaf(node.id) and rng.random() < 0.5
    return tree


@dataclass
class SyntheticEnv:
    seed_instruction: str
    catalog: ActionCatalog
    generator: MockGenerator
    config: SearchConfig
    depth: int
    branching: int
    transitions: dict  # (state, action name) -> next state


def make_env(env_seed: int, episodes: int = 50) -> SyntheticEnv:
    """Fully tabulated action tree with branching 2-3 and depth 2-3."""
    rng = random.Random(env_seed)
    branching = rng.choice([2, 3])
    depth = rng.choice([2, 3])
    catalog = ActionCatalog(rng.sample(list(builtin_catalog()), branching))
    seed = rng.choice(["Plan a trip.", "Name five French writers.", "Explain blockchain.", "1+1="])
    transitions = {}
    exact = {}
    frontier = [seed]
    for _ in range(depth):
        nxt = []
        for state in frontier:
            for action in catalog:
                out = state + " " + " ".join(rng.choices(WORDS, k=rng.randint(2, 9)))
                transitions[(state, action.name)] = out
                exact[render_prompt(action, state)] = out
                nxt.append(out)
        frontier = nxt
    config = SearchConfig(exploration_c=1.0, max_depth=depth - 1, reward_threshold=10.0,
                          expansion_width=branching, episodes=episodes, rng_seed=env_seed,
                          max_workers=1)
    return SyntheticEnv(seed, catalog, MockGenerator(exact=exact), config, depth, branching, transitions)


def exhaustive_best(env: SyntheticEnv) -> tuple[float, list[str]]:
    """Max reward over terminal states reachable in the tabulated tree."""
    best = (-float("inf"), [])

    def visit(state, depth, actions):
        nonlocal best
        reward = composite_value(heuristic_score(state))
        if depth > env.config.max_depth or reward > env.config.reward_threshold:
            if reward > best[0]:
                best = (reward, list(actions))
            return
        for action in env.catalog:
            visit(env.transitions[(state, action.name)], depth + 1, actions + [action.name])

    visit(env.seed_instruction, 0, [])
    return best


def best_terminal(tree: EvolutionTree) -> float:
    vals = [composite_value(n.scores) for n in tree if n.terminal and n.scores is not None]
    return max(vals) if vals else -float("inf")
