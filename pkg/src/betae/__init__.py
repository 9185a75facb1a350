"""Beta-distribution embeddings for multi-hop logical queries over knowledge graphs."""

from .kg import KnowledgeGraph, build_graph, build_splits, load_graph_dir
from .model import BetaModel, BetaVector, ModelConfig
from .query import (STRUCTURES, TEMPLATES, evaluate, parse_query, print_query, simplify,
                    structure_of, to_dm, to_dnf)
from .sampler import QueryDataset, QueryInstance, generate_dataset
from .train import TrainConfig, Trainer

__version__ = "0.1.0"

__all__ = [
    "KnowledgeGraph", "build_graph", "build_splits", "load_graph_dir", "BetaModel", "BetaVector",
    "ModelConfig", "STRUCTURES", "TEMPLATES", "evaluate", "parse_query", "print_query",
    "simplify", "structure_of", "to_dm", "to_dnf", "QueryDataset", "QueryInstance", "generate_dataset",
    "TrainConfig", "Trainer",
]
