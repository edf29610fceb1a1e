"""Full importance pipeline: relation modules followed by a two-layer classifier."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ConfigError, DataError, DimensionError
from .relation import (
    AttentionFn,
    Fusion,
    Normalization,
    RelationConfig,
    RelationSubmoduleParams,
    stacked_forward,
)

CHECKPOINT_FORMAT = "point-checkpoint"
CHECKPOINT_VERSION = 1

IMPORTANT = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. ``hidden=None`` means ``d_f // 2``."""

    d_f: int
    r: int = 4
    n_modules: int = 1
    fusion: Fusion = Fusion.PRIOR_IMPORTANCE
    attention: AttentionFn = AttentionFn.ADDITIVE
    normalization: Normalization = Normalization.OUTGOING
    include_self: bool = True
    hidden: int | None = None

    def __post_init__(self):
        # RelationConfig does the enum coercion and divisibility checks
        rel = self.relation
        object.__setattr__(self, "fusion", rel.fusion)
        object.__setattr__(self, "attention", rel.attention)
        object.__setattr__(self, "normalization", rel.normalization)
        if self.hidden is None:
            object.__setattr__(self, "hidden", max(1, self.d_f // 2))
        if self.hidden < 1:
            raise ConfigError(f"hidden width must be positive, got {self.hidden}")

    @property
    def relation(self) -> RelationConfig:
        return RelationConfig(
            d_f=self.d_f,
            r=self.r,
            n_modules=self.n_modules,
            fusion=self.fusion,
            attention=self.attention,
            normalization=self.normalization,
            include_self=self.include_self,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("fusion", "attention", "normalization"):
            d[k] = getattr(self, k).value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelParams:
    relation: list = field(default_factory=list)  # n_modules lists of r submodules
    W1: Tensor = None
    b1: Tensor = None
    W2: Tensor = None
    b2: Tensor = None

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for t, module in enumerate(self.relation):
            for l, sub in enumerate(module):
                out += [(f"relation.{t}.{l}.{name}", x) for name, x in sub.named_tensors()]
        out += [("classifier.W1", self.W1), ("classifier.b1", self.b1), ("classifier.W2", self.W2), ("classifier.b2", self.b2)]
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, t in self.named_tensors():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype=np.float64).tobytes())
        return h.hexdigest()

    @classmethod
    def initialize(cls, config: ModelConfig, seed=0, dtype=np.float64) -> "ModelParams":
        rng = np.random.default_rng(seed)
        rel = config.relation
        relation = [
            [RelationSubmoduleParams.initialize(rel, rng, dtype) for _ in range(config.r)]
            for _ in range(config.n_modules)
        ]

        def uniform(shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)

        h = config.hidden
        return cls(
            relation=relation,
            W1=uniform((h, config.d_f), config.d_f),
            b1=uniform((h,), config.d_f),
            W2=uniform((2, h), h),
            b2=uniform((2,), h),
        )


# ------------------------------------------------------------------ forward


def _scene_arrays(scene, config):
    F = np.asarray(scene.features)
    g = np.asarray(scene.global_feature)
    if F.ndim != 2 or F.shape[1] != config.d_f or g.shape != (config.d_f,):
        raise ConfigError(f"scene has d_f={F.shape[-1]} but the model expects d_f={config.d_f}")
    if F.shape[0] < 1:
        raise DataError("scene has no persons")
    return F, g


def classifier_logits(X, params: ModelParams) -> Tensor:
    H = ad.relu(ad.add_row(ad.matmul(X, ad.transpose(params.W1)), params.b1))
    return ad.add_row(ad.matmul(H, ad.transpose(params.W2)), params.b2)


def importance_features(scene, params: ModelParams, config: ModelConfig) -> Tensor:
    F, g = _scene_arrays(scene, config)
    return stacked_forward(F, g, params.relation, config.relation)


def point_logits(scene, params: ModelParams, config: ModelConfig, baseline: bool = False) -> Tensor:
    """Two logits per person; column ``IMPORTANT`` is the important class."""
    if baseline:
        F, _ = _scene_arrays(scene, config)
        return classifier_logits(ad.as_tensor(F), params)
    return classifier_logits(importance_features(scene, params, config), params)


def _probabilities(logits: Tensor) -> np.ndarray:
    z = logits.data
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward_point(scene, params: ModelParams, config: ModelConfig) -> np.ndarray:
    """Importance point (probability of the important class) for each person."""
    return _probabilities(point_logits(scene, params, config))[:, IMPORTANT]


def forward_baseline(scene, params: ModelParams, config: ModelConfig) -> np.ndarray:
    """Classifier on raw person features, skipping all relation modelling."""
    return _probabilities(point_logits(scene, params, config, baseline=True))[:, IMPORTANT]


def loss(scene, labels, params: ModelParams, config: ModelConfig, baseline: bool = False) -> Tensor:
    """Mean cross-entropy over the scene's persons."""
    labels = np.asarray(labels, dtype=int)
    n = np.asarray(scene.features).shape[0]
    if labels.shape != (n,):
        raise DataError(f"{labels.size} labels for a scene with {n} persons")
    if np.any((labels != 0) & (labels != 1)):
        raise DataError("labels must be 0 (non-important) or 1 (important)")
    return ad.cross_entropy(point_logits(scene, params, config, baseline), labels)


def select_most_important(points) -> int:
    """Index of the highest importance point; ties go to the lowest index."""
    points = np.asarray(points, dtype=float).reshape(-1)
    if points.size == 0:
        raise DataError("cannot select from an empty scene")
    return int(np.argmax(points))


# --------------------------------------------------------------- checkpoint


def save_checkpoint(path, params: ModelParams, config: ModelConfig, extra: dict | None = None) -> None:
    """Write a versioned JSON checkpoint; floats are stored with round-trip precision."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "meta": extra or {},
        "tensors": [
            {"name": name, "shape": list(t.shape), "data": [float(v) for v in t.data.reshape(-1)]}
            for name, t in params.named_tensors()
        ],
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig, dict]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not a checkpoint ({exc})") from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    config = ModelConfig.from_dict(doc["config"])
    params = ModelParams.initialize(config, seed=0)
    slots = dict(params.named_tensors())
    stored = {t["name"]: t for t in doc["tensors"]}
    if set(stored) != set(slots):
        raise DataError(f"{path}: tensor names do not match the stored config")
    for name, t in slots.items():
        shape = tuple(stored[name]["shape"])
        if shape != t.shape:
            raise DimensionError(f"{path}: tensor {name} has shape {shape}, config implies {t.shape}")
        t.data = np.array(stored[name]["data"], dtype=np.float64).reshape(shape)
    return params, config, doc.get("meta", {})
