"""Explainable recommendations from jointly learned factorization trees."""

from .factorization import DivergenceError, Hyperparams
from .ingest import DataError, Dataset, FeatureProfile, Review, SentimentMention, parse_dataset
from .recommend import Explanation, RecommendError, ScoredItem, explain, recommend_topk
from .train import (
    FacTModel,
    ModelChecksumError,
    ModelIOError,
    ModelSchemaError,
    ModelVersionError,
    TrainConfig,
    alternate,
    load_model,
    save_model,
)
from .tree import FactorTree, NoValidSplit, Predicate, TreeNode

__version__ = "0.1.0"

__all__ = [
    "DataError",
    "Dataset",
    "DivergenceError",
    "Explanation",
    "FacTModel",
    "FactorTree",
    "FeatureProfile",
    "Hyperparams",
    "ModelChecksumError",
    "ModelIOError",
    "ModelSchemaError",
    "ModelVersionError",
    "NoValidSplit",
    "Predicate",
    "RecommendError",
    "Review",
    "ScoredItem",
    "SentimentMention",
    "TrainConfig",
    "TreeNode",
    "alternate",
    "explain",
    "load_model",
    "parse_dataset",
    "recommend_topk",
    "save_model",
    "__version__",
]
