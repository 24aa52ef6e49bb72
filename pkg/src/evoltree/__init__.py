"""Evolve seed instructions into richer instruction-tuning data with tree search."""

__version__ = "0.1.0"

from .actions import ActionCatalog, EvolutionAction, builtin_catalog, render_prompt, sample_actions
from .llm import GenerationRequest, GenerationResponse, Generator, MockGenerator, RemoteGenerator
from .pipeline import DatasetStats, ExportRecord, SeedRecord, compute_stats, harvest, load_seeds
from .reward import HeuristicScorer, JudgeScorer, ScoreTriple, composite_value, heuristic_score
from .search import MCTS, SearchConfig, backpropagate, run_search, uct
from .tree import EvolutionTree, InstructionNode, load_tree, save_tree

__all__ = [
    "ActionCatalog", "EvolutionAction", "builtin_catalog", "render_prompt", "sample_actions",
    "GenerationRequest", "GenerationResponse", "Generator", "MockGenerator", "RemoteGenerator",
    "DatasetStats", "ExportRecord", "SeedRecord", "compute_stats", "harvest", "load_seeds",
    "HeuristicScorer", "JudgeScorer", "ScoreTriple", "composite_value", "heuristic_score",
    "MCTS", "SearchConfig", "backpropagate", "run_search", "uct",
    "EvolutionTree", "InstructionNode", "load_tree", "save_tree",
]
