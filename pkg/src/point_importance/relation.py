"""Relation module: interaction graphs, importance relation and relation features.

Orientation convention used throughout: matrices indexed ``[j, i]`` hold the
quantity flowing FROM person ``j`` (the source) TO person ``i`` (the
destination). The importance relation normalises each source's outgoing row,
so every row sums to one; the standard-attention variant normalises each
destination's incoming column instead.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, fields
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .exceptions import ConfigError, DataError, DimensionError


class Fusion(str, enum.Enum):
    """How the event-person graph is merged into the person-person graph."""

    PERSON_ONLY = "person_only"
    PRIOR_IMPORTANCE = "prior_importance"
    EXTRA_LINK = "extra_link"


class AttentionFn(str, enum.Enum):
    ADDITIVE = "additive"
    SCALED_DOT = "scaled_dot"


class Normalization(str, enum.Enum):
    """``OUTGOING`` is the importance relation; ``INCOMING`` is standard attention."""

    OUTGOING = "outgoing"
    INCOMING = "incoming"


def _coerce(enum_cls, value):
    try:
        return enum_cls(value)
    except ValueError:
        choices = ", ".join(m.value for m in enum_cls)
        raise ConfigError(f"unknown {enum_cls.__name__} {value!r}; expected one of {choices}") from None


@dataclass(frozen=True)
class RelationConfig:
    d_f: int
    r: int = 4
    n_modules: int = 1
    fusion: Fusion = Fusion.PRIOR_IMPORTANCE
    attention: AttentionFn = AttentionFn.ADDITIVE
    normalization: Normalization = Normalization.OUTGOING
    include_self: bool = True

    def __post_init__(self):
        object.__setattr__(self, "fusion", _coerce(Fusion, self.fusion))
        object.__setattr__(self, "attention", _coerce(AttentionFn, self.attention))
        object.__setattr__(self, "normalization", _coerce(Normalization, self.normalization))
        if self.d_f < 1:
            raise ConfigError(f"d_f must be positive, got {self.d_f}")
        if self.r < 1:
            raise ConfigError(f"r must be at least 1, got {self.r}")
        if self.n_modules < 1:
            raise ConfigError(f"n_modules must be at least 1, got {self.n_modules}")
        if self.d_f % self.r:
            raise ConfigError(f"r={self.r} does not divide d_f={self.d_f}; choose r among the divisors of d_f")

    @property
    def d_k(self) -> int:
        return self.d_f // self.r


@dataclass
class SceneFeatures:
    """Person features ``(N, d_f)`` and the scene's global feature ``(d_f,)``."""

    features: np.ndarray
    global_feature: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.global_feature = np.asarray(self.global_feature, dtype=float)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DataError(f"a scene needs an (N, d_f) feature matrix with N >= 1, got {self.features.shape}")
        if self.global_feature.shape != (self.features.shape[1],):
            raise DataError(
                f"global feature has shape {self.global_feature.shape}, persons have d_f={self.features.shape[1]}"
            )

    @property
    def n_persons(self) -> int:
        return self.features.shape[0]

    @property
    def d_f(self) -> int:
        return self.features.shape[1]


@dataclass
class RelationSubmoduleParams:
    """Projections of one relation submodule.

    ``W_V`` is used by the person-only and prior-importance fusions;
    ``W_V1``/``W_V2`` replace it for the extra-link fusion.
    """

    W_Q: Tensor
    W_K: Tensor
    w_P: Tensor
    w_G: Tensor
    W_V: Tensor | None = None
    W_V1: Tensor | None = None
    W_V2: Tensor | None = None

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self) if getattr(self, f.name) is not None]

    @classmethod
    def initialize(cls, config: RelationConfig, rng: np.random.Generator, dtype=np.float64):
        d_f, d_k = config.d_f, config.d_k

        def uniform(*shape):
            bound = 1.0 / math.sqrt(shape[-1])
            return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)

        params = dict(W_Q=uniform(d_k, d_f), W_K=uniform(d_k, d_f), w_P=uniform(d_k), w_G=uniform(d_f))
        if config.fusion is Fusion.EXTRA_LINK:
            params.update(W_V1=uniform(d_k, d_f), W_V2=uniform(d_k, d_f))
        else:
            params.update(W_V=uniform(d_k, d_f))
        return cls(**params)


class InteractionGraphs(NamedTuple):
    person_person: Tensor
    event_person: Tensor
    importance_interaction: Tensor
    importance_relation: Tensor


# ---------------------------------------------------------------- pairwise


def _check_vec(x, d, what):
    if x.shape != (d,):
        raise DimensionError(f"{what} has shape {x.shape}, expected ({d},)")


def person_person_interaction(fi, fj, params: RelationSubmoduleParams, attention=AttentionFn.ADDITIVE) -> Tensor:
    """Interaction from person ``j`` to person ``i``; ``W_Q`` sees the destination ``fi``."""
    fi, fj = as_tensor(fi), as_tensor(fj)
    d_f = params.W_Q.shape[1]
    _check_vec(fi, d_f, "fi")
    _check_vec(fj, d_f, "fj")
    q = ad.matvec(params.W_Q, fi)
    k = ad.matvec(params.W_K, fj)
    if _coerce(AttentionFn, attention) is AttentionFn.ADDITIVE:
        pre = ad.dot(params.w_P, ad.add(q, k))
    else:
        pre = ad.scale(ad.dot(q, k), 1.0 / math.sqrt(q.shape[0]))
    return ad.relu(pre)


def event_person_interaction(fi, fglobal, params: RelationSubmoduleParams) -> Tensor:
    fi, fglobal = as_tensor(fi), as_tensor(fglobal)
    d_f = params.w_G.shape[0]
    _check_vec(fi, d_f, "fi")
    _check_vec(fglobal, d_f, "global feature")
    return ad.relu(ad.dot(params.w_G, ad.add(fi, fglobal)))


# -------------------------------------------------------------- vectorised


def _check_features(F, g, d_f):
    if F.ndim != 2 or F.shape[1] != d_f:
        raise DimensionError(f"person features have shape {F.shape}, expected (N, {d_f})")
    if F.shape[0] < 1:
        raise DimensionError("a scene needs at least one person")
    _check_vec(g, d_f, "global feature")


def person_person_matrix(F, params: RelationSubmoduleParams, attention=AttentionFn.ADDITIVE) -> Tensor:
    """All pairwise interactions, ``[j, i]`` = from ``j`` to ``i``."""
    F = as_tensor(F)
    Q = ad.matmul(F, ad.transpose(params.W_Q))
    K = ad.matmul(F, ad.transpose(params.W_K))
    if _coerce(AttentionFn, attention) is AttentionFn.ADDITIVE:
        # w_P . (W_Q f_i + W_K f_j) splits into a destination and a source term
        pre = ad.outer_add(ad.matvec(K, params.w_P), ad.matvec(Q, params.w_P))
    else:
        pre = ad.scale(ad.matmul(K, ad.transpose(Q)), 1.0 / math.sqrt(Q.shape[1]))
    return ad.relu(pre)


def event_person_vector(F, g, params: RelationSubmoduleParams) -> Tensor:
    F, g = as_tensor(F), as_tensor(g)
    # w_G . (f_i + f_global) = w_G . f_i + w_G . f_global
    return ad.relu(ad.add_scalar(ad.matvec(F, params.w_G), ad.dot(params.w_G, g)))


def _self_mask(n, include_self):
    return None if include_self else ~np.eye(n, dtype=bool)


def importance_relation(importance_interaction, include_self: bool = True) -> Tensor:
    """Softmax over each source's outgoing interactions (rows sum to one)."""
    M = as_tensor(importance_interaction)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"importance interaction must be square, got {M.shape}")
    return ad.softmax_rows(M, _self_mask(M.shape[0], include_self))


def standard_attention_relation(importance_interaction, include_self: bool = True) -> Tensor:
    """Softmax over each destination's incoming interactions (columns sum to one)."""
    M = as_tensor(importance_interaction)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"importance interaction must be square, got {M.shape}")
    return ad.softmax_cols(M, _self_mask(M.shape[0], include_self))


def fuse_prior_importance(person_person, event_person) -> Tensor:
    """Scale each source's outgoing interactions by its event involvement."""
    Ep, Eg = as_tensor(person_person), as_tensor(event_person)
    if Ep.ndim != 2 or Eg.shape != (Ep.shape[0],):
        raise DimensionError(f"cannot fuse {Ep.shape} interactions with {Eg.shape} event involvement")
    return ad.scale_rows(Ep, Eg)


def interaction_graphs(F, g, params: RelationSubmoduleParams, config: RelationConfig) -> InteractionGraphs:
    F, g = as_tensor(F), as_tensor(g)
    _check_features(F, g, config.d_f)
    Ep = person_person_matrix(F, params, config.attention)
    Eg = event_person_vector(F, g, params)
    Ehat = fuse_prior_importance(Ep, Eg) if config.fusion is Fusion.PRIOR_IMPORTANCE else Ep
    if config.normalization is Normalization.OUTGOING:
        E = importance_relation(Ehat, config.include_self)
    else:
        E = standard_attention_relation(Ehat, config.include_self)
    return InteractionGraphs(Ep, Eg, Ehat, E)


def aggregate_relation_feature(E, F, g, params: RelationSubmoduleParams, fusion=Fusion.PERSON_ONLY, Eg=None) -> Tensor:
    """Relation features ``(N, d_v)``: row ``i`` is ``sum_j E[j, i] * W_V f_j``.

    With the extra-link fusion, ``W_V1`` replaces ``W_V`` and the term
    ``Eg[i] * W_V2 f_global`` is added.
    """
    E, F = as_tensor(E), as_tensor(F)
    n = F.shape[0]
    if E.shape != (n, n):
        raise DimensionError(f"relation matrix has shape {E.shape}, expected ({n}, {n})")
    fusion = _coerce(Fusion, fusion)
    if fusion is Fusion.EXTRA_LINK:
        if Eg is None:
            raise DimensionError("extra-link aggregation needs the event-person vector")
        values = ad.matmul(F, ad.transpose(params.W_V1))
        peer = ad.matmul(ad.transpose(E), values)
        return ad.add(peer, ad.outer(as_tensor(Eg), ad.matvec(params.W_V2, as_tensor(g))))
    values = ad.matmul(F, ad.transpose(params.W_V))
    return ad.matmul(ad.transpose(E), values)


def submodule_forward(F, g, params: RelationSubmoduleParams, config: RelationConfig):
    """Return the relation features of one submodule and the graphs behind them."""
    graphs = interaction_graphs(F, g, params, config)
    R = aggregate_relation_feature(graphs.importance_relation, F, g, params, config.fusion, graphs.event_person)
    return R, graphs


def relation_module_forward(F, g, module_params: Sequence[RelationSubmoduleParams], config: RelationConfig) -> Tensor:
    """Importance features: person features plus the concatenated submodule outputs."""
    F, g = as_tensor(F), as_tensor(g)
    if len(module_params) != config.r:
        raise ConfigError(f"expected {config.r} submodules, got {len(module_params)}")
    heads = [submodule_forward(F, g, p, config)[0] for p in module_params]
    return ad.add(F, ad.concat(heads, axis=1))


def stacked_forward(F, g, all_params: Sequence[Sequence[RelationSubmoduleParams]], config: RelationConfig) -> Tensor:
    """Chain ``n_modules`` relation modules; the global feature is shared by all of them."""
    F, g = as_tensor(F), as_tensor(g)
    if len(all_params) != config.n_modules:
        raise ConfigError(f"expected {config.n_modules} relation modules, got {len(all_params)}")
    for module_params in all_params:
        F = relation_module_forward(F, g, module_params, config)
    return F
