"""Scene corpora: line-delimited JSON files and a synthetic relational generator.

Corpus file grammar (UTF-8, one JSON object per line)::

    line 1   {"format": "point-corpus", "version": 1, "d_f": <int>}
    line k   {"scene_id": <str>, "global": [<float> * d_f],
              "persons": [{"id": <str>, "label": 0 | 1 | null,
                           "feature": [<float> * d_f]}, ...]}

A ``null`` label marks an unlabelled person; a scene is either fully labelled
or fully unlabelled. Files written by :func:`save_corpus` use compact
separators and shortest round-trip float formatting, so loading and saving
again reproduces the bytes exactly.

Synthetic relational scenes
---------------------------
Feature layout for ``n_codes = K`` (``d_f >= 4K + 2``)::

    [ id_A (K) | gaze_A (K) | id_B (K) | gaze_B (K) | event slots | ... ]

Every person carries an identity code and a gaze code in each of two blocks
A and B; codes are one-hot. Identities inside a block are distinct within the
scene, and the two blocks use independent identity assignments. In each block
one focal person is drawn; every other person gazes at that block's focal
person with probability ``focus`` and otherwise at a uniformly chosen other
person, and the focal person gazes at a uniformly chosen other person. The
scene's event type ``e`` (stored in the global feature) says which block is
real. The important person is the one receiving the most gazes in the real
block; scenes where that maximum is shared are redrawn.

A person's own features are a uniformly random pair of distinct codes per
block whatever their role, so no per-person classifier can beat chance. The
decoy block makes the global feature necessary for a perfect decision.
Gaussian noise with standard deviation ``sigma`` is added to every person and
global coordinate.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .exceptions import ConfigError, CorpusParseError, DataError

logger = logging.getLogger(__name__)

CORPUS_FORMAT = "point-corpus"
CORPUS_VERSION = 1


@dataclass
class SceneRecord:
    scene_id: str
    person_ids: list
    features: np.ndarray
    global_feature: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.global_feature = np.asarray(self.global_feature, dtype=np.float64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=int)

    @property
    def n_persons(self) -> int:
        return self.features.shape[0]

    @property
    def d_f(self) -> int:
        return self.global_feature.shape[0]

    def validate(self, d_f: int | None = None, require_labels: bool = False) -> "SceneRecord":
        sid = self.scene_id
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DataError(f"scene {sid!r}: needs at least one person")
        if d_f is not None and (self.features.shape[1] != d_f or self.global_feature.shape != (d_f,)):
            found = self.features.shape[1] if self.features.shape[1] != d_f else self.global_feature.shape[0]
            raise DataError(f"scene {sid!r}: feature dimension {found} does not match corpus d_f={d_f}")
        if self.global_feature.shape != (self.features.shape[1],):
            raise DataError(f"scene {sid!r}: global feature dimension differs from person features")
        if len(self.person_ids) != self.n_persons:
            raise DataError(f"scene {sid!r}: {len(self.person_ids)} person ids for {self.n_persons} persons")
        if not (np.all(np.isfinite(self.features)) and np.all(np.isfinite(self.global_feature))):
            raise DataError(f"scene {sid!r}: non-finite feature values")
        if self.labels is None:
            if require_labels:
                raise DataError(f"scene {sid!r}: labels required")
            return self
        if self.labels.shape != (self.n_persons,):
            raise DataError(f"scene {sid!r}: {self.labels.size} labels for {self.n_persons} persons")
        if np.any((self.labels != 0) & (self.labels != 1)):
            raise DataError(f"scene {sid!r}: labels must be 0 or 1")
        if not self.labels.any():
            raise DataError(f"scene {sid!r}: no person is labelled important")
        return self


# ---------------------------------------------------------------- file I/O


def _scene_to_json(rec: SceneRecord) -> str:
    persons = []
    for k, pid in enumerate(rec.person_ids):
        label = None if rec.labels is None else int(rec.labels[k])
        persons.append({"id": str(pid), "label": label, "feature": [float(v) for v in rec.features[k]]})
    doc = {"scene_id": rec.scene_id, "global": [float(v) for v in rec.global_feature], "persons": persons}
    return json.dumps(doc, separators=(",", ":"), allow_nan=False)


def dumps_corpus(scenes: Iterable[SceneRecord], d_f: int) -> str:
    header = json.dumps({"format": CORPUS_FORMAT, "version": CORPUS_VERSION, "d_f": int(d_f)}, separators=(",", ":"))
    lines = [header]
    for rec in scenes:
        rec.validate(d_f)
        lines.append(_scene_to_json(rec))
    return "\n".join(lines) + "\n"


def save_corpus(path, scenes, d_f: int | None = None) -> None:
    scenes = list(scenes)
    if d_f is None:
        if not scenes:
            raise ConfigError("d_f is required to save an empty corpus")
        d_f = scenes[0].d_f
    Path(path).write_text(dumps_corpus(scenes, d_f), encoding="utf-8")


def _parse_scene(obj, lineno, d_f) -> SceneRecord:
    if not isinstance(obj, dict):
        raise CorpusParseError("scene must be a JSON object", lineno)
    try:
        sid = str(obj["scene_id"])
        g = obj["global"]
        persons = obj["persons"]
        ids = [str(p["id"]) for p in persons]
        feats = [p["feature"] for p in persons]
        raw_labels = [p.get("label") for p in persons]
    except (KeyError, TypeError) as exc:
        raise CorpusParseError(f"missing or malformed field {exc}", lineno) from None
    if not persons:
        raise DataError(f"scene {sid!r}: needs at least one person")
    if any(len(f) != d_f for f in feats) or len(g) != d_f:
        bad = next((len(f) for f in feats if len(f) != d_f), len(g))
        raise DataError(f"scene {sid!r} (line {lineno}): feature dimension {bad} does not match corpus d_f={d_f}")
    if all(lab is None for lab in raw_labels):
        labels = None
    elif any(lab is None for lab in raw_labels):
        raise DataError(f"scene {sid!r} (line {lineno}): partially labelled scene")
    else:
        labels = raw_labels
    try:
        rec = SceneRecord(sid, ids, np.array(feats, dtype=np.float64).reshape(len(ids), d_f), np.array(g, dtype=np.float64), labels)
    except (TypeError, ValueError) as exc:
        raise CorpusParseError(f"non-numeric feature values ({exc})", lineno) from None
    return rec.validate(d_f)


def loads_corpus(text: str, source: str = "<string>") -> tuple[list[SceneRecord], int | None]:
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        logger.warning("%s: empty corpus", source)
        return [], None
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorpusParseError(f"invalid header ({exc.msg})", 1) from None
    if not isinstance(header, dict) or header.get("format") != CORPUS_FORMAT:
        raise CorpusParseError("missing point-corpus header", 1)
    if header.get("version") != CORPUS_VERSION:
        raise CorpusParseError(f"unsupported corpus version {header.get('version')}", 1)
    d_f = header.get("d_f")
    if not isinstance(d_f, int) or d_f < 1:
        raise CorpusParseError("header d_f must be a positive integer", 1)
    scenes = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusParseError(f"invalid JSON ({exc.msg})", lineno) from None
        scenes.append(_parse_scene(obj, lineno, d_f))
    if not scenes:
        logger.warning("%s: corpus has no scenes", source)
    return scenes, d_f


def load_corpus(path) -> list[SceneRecord]:
    """Read and validate a corpus file."""
    scenes, _ = load_corpus_with_dim(path)
    return scenes


def load_corpus_with_dim(path) -> tuple[list[SceneRecord], int | None]:
    return loads_corpus(Path(path).read_text(encoding="utf-8"), source=str(path))


# --------------------------------------------------------------- generator


@dataclass(frozen=True)
class GeneratorSpec:
    n_min: int = 3
    n_max: int = 8
    d_f: int = 40
    n_codes: int = 8
    focus: float = 0.8
    sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_min <= self.n_max:
            raise ConfigError(f"invalid person range [{self.n_min}, {self.n_max}]")
        if self.n_max < 2:
            raise ConfigError("relational scenes need n_max >= 2")
        if self.n_codes < self.n_max:
            raise ConfigError(f"n_codes={self.n_codes} must be at least n_max={self.n_max}")
        if self.d_f < 4 * self.n_codes + 2:
            raise ConfigError(f"d_f={self.d_f} too small for {self.n_codes} codes; need at least {4 * self.n_codes + 2}")
        if not 0.0 <= self.focus <= 1.0:
            raise ConfigError(f"focus must lie in [0, 1], got {self.focus}")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be non-negative, got {self.sigma}")

    @property
    def event_slots(self) -> tuple[slice, slice]:
        """Global-feature coordinates that light up for event A and event B."""
        base = 4 * self.n_codes
        half = (self.d_f - base) // 2
        return slice(base, base + half), slice(base + half, base + 2 * half)

    def block(self, name: str) -> tuple[slice, slice]:
        """(identity, gaze) coordinate slices of block ``"A"`` or ``"B"``."""
        K = self.n_codes
        off = {"A": 0, "B": 2 * K}[name]
        return slice(off, off + K), slice(off + K, off + 2 * K)


def _gaze_targets(n, focal, focus, rng):
    targets = np.empty(n, dtype=int)
    for j in range(n):
        others = [k for k in range(n) if k != j]
        if j != focal and rng.random() < focus:
            targets[j] = focal
        else:
            targets[j] = others[rng.integers(len(others))]
    return targets


def _draw_scene(spec: GeneratorSpec, rng: np.random.Generator):
    n = int(rng.integers(spec.n_min, spec.n_max + 1))
    K = spec.n_codes
    event = int(rng.integers(2))
    while True:
        blocks = {}
        for name in ("A", "B"):
            ids = rng.permutation(K)[:n]
            focal = int(rng.integers(n)) if n > 1 else 0
            targets = _gaze_targets(n, focal, spec.focus, rng) if n > 1 else np.zeros(1, dtype=int)
            blocks[name] = (ids, targets)
        counts = np.bincount(blocks["AB"[event]][1], minlength=n)
        if n == 1 or np.sum(counts == counts.max()) == 1:
            break
    important = int(np.argmax(counts))
    F = np.zeros((n, spec.d_f))
    for name, (ids, targets) in blocks.items():
        id_sl, gaze_sl = spec.block(name)
        F[np.arange(n), id_sl.start + ids] = 1.0
        F[np.arange(n), gaze_sl.start + ids[targets]] = 1.0
    g = np.zeros(spec.d_f)
    g[spec.event_slots[event]] = 1.0
    if spec.sigma > 0:
        F += rng.normal(0.0, spec.sigma, size=F.shape)
        g += rng.normal(0.0, spec.sigma, size=g.shape)
    labels = np.zeros(n, dtype=int)
    labels[important] = 1
    return F, g, labels


def generate_relational_corpus(spec: GeneratorSpec, count: int) -> list[SceneRecord]:
    """Draw ``count`` scenes; the output depends only on ``spec`` (including its seed)."""
    if count < 0:
        raise ConfigError(f"count must be non-negative, got {count}")
    if count == 0:
        logger.warning("generating an empty corpus")
    rng = np.random.default_rng(spec.seed)
    scenes = []
    width = max(1, len(str(max(count - 1, 0))))
    for s in range(count):
        F, g, labels = _draw_scene(spec, rng)
        ids = [f"p{k}" for k in range(F.shape[0])]
        scenes.append(SceneRecord(f"scene-{s:0{width}d}", ids, F, g, labels))
    return scenes


def affinity_oracle(scene, spec: GeneratorSpec) -> int:
    """Recover the important person from stored features by explicit decoding.

    Reads the event type from the global feature, decodes identity and gaze
    codes of the real block by argmax, counts incoming gazes and returns the
    person with the most.
    """
    ev_a, ev_b = spec.event_slots
    g = np.asarray(scene.global_feature)
    event = 0 if g[ev_a].mean() >= g[ev_b].mean() else 1
    id_sl, gaze_sl = spec.block("AB"[event])
    F = np.asarray(scene.features)
    ids = F[:, id_sl].argmax(axis=1)
    gazes = F[:, gaze_sl].argmax(axis=1)
    incoming = np.array([np.sum(gazes == code) for code in ids])
    return int(np.argmax(incoming))
