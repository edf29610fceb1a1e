"""Important-person detection with importance-relation networks."""

from .data import GeneratorSpec, SceneRecord, affinity_oracle, generate_relational_corpus, load_corpus, save_corpus
from .estimator import ImportanceRanker
from .exceptions import (
    ConfigError,
    CorpusParseError,
    DataError,
    DimensionError,
    DivergenceError,
    NonFiniteError,
    PointError,
    UsageError,
)
from .model import (
    ModelConfig,
    ModelParams,
    forward_baseline,
    forward_point,
    load_checkpoint,
    loss,
    save_checkpoint,
    select_most_important,
)
from .relation import AttentionFn, Fusion, Normalization, RelationConfig, RelationSubmoduleParams, SceneFeatures
from .train import EvalReport, TrainConfig, ablation_sweep, average_precision, evaluate_map, gradcheck, train

__version__ = "0.1.0"
