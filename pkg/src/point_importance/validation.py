"""Input checking for ragged scene collections.

A scene may be given as a :class:`~point_importance.data.SceneRecord`, a
:class:`~point_importance.relation.SceneFeatures`, or a ``(features,
global_feature)`` pair. Everything is normalised to ``SceneFeatures``.
"""

from __future__ import annotations

import numpy as np
from sklearn.utils import check_array

from .exceptions import DataError
from .relation import SceneFeatures


def check_scene(scene, d_f: int | None = None) -> SceneFeatures:
    if isinstance(scene, SceneFeatures):
        F, g = scene.features, scene.global_feature
    elif hasattr(scene, "features") and hasattr(scene, "global_feature"):
        F, g = scene.features, scene.global_feature
    elif isinstance(scene, (tuple, list)) and len(scene) == 2:
        F, g = scene
    else:
        raise DataError(f"cannot interpret {type(scene).__name__} as a scene")
    try:
        F = check_array(F, dtype=np.float64, ensure_min_samples=1)
        g = check_array(np.asarray(g, dtype=np.float64).reshape(1, -1), dtype=np.float64)[0]
    except ValueError as exc:
        raise DataError(str(exc)) from None
    if d_f is not None and F.shape[1] != d_f:
        raise DataError(f"scene has d_f={F.shape[1]}, expected {d_f}")
    return SceneFeatures(F, g)


def check_scenes(X, y=None, require_labels=False):
    """Validate a list of scenes and optional per-scene label vectors.

    Labels default to the scenes' own ``labels`` attribute when ``y`` is None.
    Returns ``(scenes, labels)`` where ``labels`` is a list or None.
    """
    if isinstance(X, np.ndarray) or not hasattr(X, "__len__"):
        X = list(X)
    if len(X) == 0:
        raise DataError("expected at least one scene")
    scenes = [check_scene(s) for s in X]
    d_f = scenes[0].d_f
    for k, s in enumerate(scenes):
        if s.d_f != d_f:
            raise DataError(f"scene {k} has d_f={s.d_f}, the first scene has d_f={d_f}")
    if y is None:
        raw = [getattr(s, "labels", None) for s in X]
        y = None if any(r is None for r in raw) else raw
    if y is None:
        if require_labels:
            raise DataError("labels are required")
        return scenes, None
    if len(y) != len(scenes):
        raise DataError(f"{len(y)} label vectors for {len(scenes)} scenes")
    labels = []
    for k, (s, lab) in enumerate(zip(scenes, y)):
        lab = np.asarray(lab, dtype=int).reshape(-1)
        if lab.shape != (s.n_persons,):
            raise DataError(f"scene {k}: {lab.size} labels for {s.n_persons} persons")
        if np.any((lab != 0) & (lab != 1)):
            raise DataError(f"scene {k}: labels must be 0 or 1")
        labels.append(lab)
    return scenes, labels
