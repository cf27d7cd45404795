"""Explainable student performance prediction over a student/course knowledge graph."""

from .kg import EntityKind, KnowledgeGraph, Relation, load_graph
from .model import ESPA, ModelConfig
from .sampler import PairSample, Path, Vocabulary, build_dataset
from .synth import SynthConfig, generate
from .train import TrainConfig

__all__ = [
    "ESPA",
    "EntityKind",
    "KnowledgeGraph",
    "ModelConfig",
    "PairSample",
    "Path",
    "Relation",
    "SynthConfig",
    "TrainConfig",
    "Vocabulary",
    "build_dataset",
    "generate",
    "load_graph",
]
