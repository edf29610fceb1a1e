"""Training loop, ranking metrics, gradient checking and ablation sweeps."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .exceptions import ConfigError, DataError, DivergenceError, NonFiniteError
from .model import (
    ModelConfig,
    ModelParams,
    forward_baseline,
    forward_point,
    loss,
    save_checkpoint,
    select_most_important,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 8
    seed: int = 0
    checkpoint_every: int = 0
    baseline: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be positive, got {self.batch_size}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")


@dataclass
class TrainResult:
    params: ModelParams
    loss_curve: list = field(default_factory=list)


def _run_epoch(scenes, order, params, model_config, train_config, opt, epoch) -> float:
    total = 0.0
    bs = train_config.batch_size
    for start in range(0, len(order), bs):
        batch = order[start : start + bs]
        opt.zero_grad()
        for k in batch:
            scene = scenes[k]
            try:
                L = loss(scene, scene.labels, params, model_config, baseline=train_config.baseline)
                ad.backward(ad.scale(L, 1.0 / len(batch)))
            except NonFiniteError as exc:
                raise DivergenceError(f"epoch {epoch}: non-finite value in scene {k} ({exc})") from None
            total += L.item()
        try:
            opt.step()
        except NonFiniteError as exc:
            raise DivergenceError(f"epoch {epoch}: {exc}") from None
    return total / len(scenes)


def train(
    corpus: Sequence,
    params: ModelParams,
    model_config: ModelConfig,
    train_config: TrainConfig,
    checkpoint_path=None,
) -> TrainResult:
    """Minibatch momentum SGD on the mean per-scene cross-entropy.

    ``params`` is updated in place. The scene order of every epoch comes from
    ``train_config.seed``, so two runs with equal inputs give identical
    parameters. The loss curve holds the mean training loss of each epoch.
    """
    scenes = [s for s in corpus]
    if not scenes:
        raise DataError("cannot train on an empty corpus")
    for s in scenes:
        if s.labels is None:
            raise DataError(f"scene {getattr(s, 'scene_id', '?')!r} has no labels")
    rng = np.random.default_rng(train_config.seed)
    tensors = params.tensors()
    if train_config.baseline:
        skip = {id(t) for module in params.relation for sub in module for _, t in sub.named_tensors()}
        tensors = [t for t in tensors if id(t) not in skip]
    opt = ad.SGD(tensors, lr=train_config.lr, momentum=train_config.momentum)
    curve = []
    for epoch in range(train_config.epochs):
        # overflow is reported as DivergenceError; numpy's warning adds nothing
        with np.errstate(over="ignore", invalid="ignore"):
            epoch_loss = _run_epoch(scenes, rng.permutation(len(scenes)), params, model_config, train_config, opt, epoch)
        if not math.isfinite(epoch_loss):
            raise DivergenceError(f"epoch {epoch}: loss is {epoch_loss}")
        curve.append(epoch_loss)
        logger.info("epoch %d loss %.6f", epoch + 1, epoch_loss)
        if checkpoint_path and train_config.checkpoint_every and (epoch + 1) % train_config.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, params, model_config, {"epoch": epoch + 1})
    if checkpoint_path:
        save_checkpoint(checkpoint_path, params, model_config, {"epoch": train_config.epochs})
    return TrainResult(params, curve)


# ------------------------------------------------------------------ metrics


def ranking(scores) -> np.ndarray:
    """Person indices by descending score; equal scores keep index order."""
    scores = np.asarray(scores, dtype=float)
    return np.lexsort((np.arange(scores.size), -scores))


def average_precision(scores, labels) -> float:
    """AP of one scene with the labelled important persons as positives."""
    labels = np.asarray(labels, dtype=int)
    if not labels.any():
        raise DataError("average precision needs at least one positive")
    rel = labels[ranking(scores)]
    hits = np.cumsum(rel)
    ranks = np.arange(1, rel.size + 1)
    return float(np.sum(rel * hits / ranks) / rel.sum())


@dataclass
class EvalReport:
    mAP: float
    top1_accuracy: float
    n_scenes: int
    excluded: int = 0
    scenes: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def summary(self) -> str:
        return (
            f"{'scenes':<10}{self.n_scenes:>10d}\n"
            f"{'mAP (%)':<10}{self.mAP:>10.2f}\n"
            f"{'top-1 (%)':<10}{self.top1_accuracy:>10.2f}\n"
        )


def evaluate_scores(corpus, all_scores) -> EvalReport:
    aps, hits, records, excluded = [], [], [], 0
    for scene, scores in zip(corpus, all_scores):
        labels = np.asarray(scene.labels, dtype=int)
        sid = getattr(scene, "scene_id", str(len(records)))
        if not labels.any():
            logger.warning("scene %s has no important person; excluded", sid)
            excluded += 1
            continue
        ap = average_precision(scores, labels)
        top = select_most_important(scores)
        aps.append(ap)
        hits.append(bool(labels[top]))
        records.append(
            {"scene_id": sid, "ap": ap, "top1": top, "hit": bool(labels[top]), "ranking": ranking(scores).tolist()}
        )
    if not aps:
        raise DataError("no scene with a labelled important person to evaluate")
    return EvalReport(100.0 * float(np.mean(aps)), 100.0 * float(np.mean(hits)), len(aps), excluded, records)


def predict_scores(corpus, params: ModelParams, config: ModelConfig, baseline: bool = False) -> list:
    fwd = forward_baseline if baseline else forward_point
    return [fwd(scene, params, config) for scene in corpus]


def evaluate_map(corpus, params: ModelParams, config: ModelConfig, baseline: bool = False) -> EvalReport:
    """Per-scene AP averaged over scenes, plus top-1 accuracy (both in percent)."""
    return evaluate_scores(corpus, predict_scores(corpus, params, config, baseline))


# ----------------------------------------------------------------- gradcheck


@dataclass
class GradcheckTrial:
    config: dict
    n_persons: int
    max_rel_error: float
    checked: int
    skipped: int

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error <= GRADCHECK_TOL


@dataclass
class GradcheckReport:
    trials: list = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((t.max_rel_error for t in self.trials), default=0.0)

    @property
    def passed(self) -> bool:
        return bool(self.trials) and all(t.passed for t in self.trials)


GRADCHECK_TOL = 1e-4
GRADCHECK_STEP = 1e-5
# Gradient components smaller than this are compared in absolute terms.
GRADCHECK_FLOOR = 1e-7


def _relu_signature(fn):
    ad._relu_trace = []
    try:
        value = fn()
    finally:
        trace, ad._relu_trace = ad._relu_trace, None
    return value, [t > 0 for t in trace]


def _random_scene(rng, n, d_f):
    from .relation import SceneFeatures

    scene = SceneFeatures(rng.normal(size=(n, d_f)), rng.normal(size=d_f))
    labels = np.zeros(n, dtype=int)
    labels[rng.integers(n)] = 1
    return scene, labels


def gradcheck_trial(config: ModelConfig, n_persons: int, rng, coords: int | None = None, baseline=False) -> GradcheckTrial:
    """Compare backprop gradients of the loss with central differences.

    Coordinates whose +/- step flips the sign of any ReLU input sit on a kink
    where the loss is not differentiable; they are counted as skipped.
    """
    params = ModelParams.initialize(config, seed=int(rng.integers(2**31)))
    scene, labels = _random_scene(rng, n_persons, config.d_f)

    def objective():
        return loss(scene, labels, params, config, baseline=baseline)

    L, base_sig = _relu_signature(objective)
    ad.backward(L)
    named = params.named_tensors()
    slots = [(t, idx) for _, t in named for idx in np.ndindex(t.shape)]
    if coords is not None and coords < len(slots):
        slots = [slots[k] for k in rng.choice(len(slots), size=coords, replace=False)]
    worst, checked, skipped = 0.0, 0, 0
    h = GRADCHECK_STEP
    for t, idx in slots:
        analytic = 0.0 if t.grad is None else float(t.grad[idx])
        orig = t.data[idx]
        t.data[idx] = orig + h
        up, sig_up = _relu_signature(objective)
        t.data[idx] = orig - h
        down, sig_down = _relu_signature(objective)
        t.data[idx] = orig
        if any(np.any(a != b) for a, b in zip(sig_up, base_sig)) or any(
            np.any(a != b) for a, b in zip(sig_down, base_sig)
        ):
            skipped += 1
            continue
        numeric = (up.item() - down.item()) / (2 * h)
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), GRADCHECK_FLOOR)
        worst = max(worst, err)
        checked += 1
    for t in params.tensors():
        t.grad = None
    return GradcheckTrial(config.to_dict(), n_persons, worst, checked, skipped)


def gradcheck(config: ModelConfig, trials: int = 1, n_persons: int = 2, seed: int = 0, coords: int | None = None) -> GradcheckReport:
    """Run ``trials`` random-parameter gradient checks of the full loss (64-bit)."""
    rng = np.random.default_rng(seed)
    return GradcheckReport([gradcheck_trial(config, n_persons, rng, coords) for _ in range(trials)])


GRADCHECK_GRID = {
    "r": (1, 2, 4),
    "n_modules": (1, 2),
    "fusion": ("person_only", "prior_importance", "extra_link"),
    "attention": ("additive", "scaled_dot"),
    "n_persons": (1, 2, 5),
}


def gradcheck_suite(n_configs: int = 100, d_f: int = 8, seed: int = 0, coords: int | None = 60) -> GradcheckReport:
    """Gradient checks over configurations cycling through the full grid."""
    import itertools

    grid = list(itertools.product(*GRADCHECK_GRID.values()))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(grid))
    report = GradcheckReport()
    for k in range(n_configs):
        r, n_modules, fusion, attention, n = grid[order[k % len(grid)]]
        normalization = "incoming" if k % 7 == 6 else "outgoing"
        cfg = ModelConfig(d_f=d_f, r=r, n_modules=n_modules, fusion=fusion, attention=attention, normalization=normalization)
        report.trials.append(gradcheck_trial(cfg, n, rng, coords))
    return report


# -------------------------------------------------------------------- sweep

SWEEP_AXES = ("model", "r", "n_modules", "fusion", "attention", "normalization", "include_self")

_TITLES = {
    "model": "Effect of the relation module",
    "r": "Effect of r (parallel relation submodules)",
    "n_modules": "Effect of N_r (stacked relation modules)",
    "fusion": "Integrating global information",
    "attention": "Attention functions",
    "normalization": "Estimating the importance relation",
    "include_self": "Self-interaction",
}

_LABELS = {
    "person_only": "POINT (person-person graph only)",
    "prior_importance": "POINT (prior importance)",
    "extra_link": "POINT (extra link)",
    "additive": "POINT (additive)",
    "scaled_dot": "POINT (scaled dot product)",
    "outgoing": "POINT (importance relation)",
    "incoming": "POINT (standard attention)",
    "baseline": "Baseline (no relation module)",
    "point": "POINT",
}


def _coerce_axis_value(axis, value):
    if axis in ("r", "n_modules"):
        return int(value)
    if axis == "include_self":
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes")
        return bool(value)
    return value.value if hasattr(value, "value") else str(value)


@dataclass
class SweepRow:
    method: str
    value: object
    mAP: float
    top1_accuracy: float
    final_loss: float


@dataclass
class SweepTable:
    axis: str
    rows: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"axis": self.axis, "rows": [asdict(r) for r in self.rows]}, sort_keys=True, separators=(",", ":"))

    def format(self) -> str:
        width = max([len("Method")] + [len(r.method) for r in self.rows])
        rule = "-" * (width + 26)
        lines = [f"The mAP (%) for {_TITLES[self.axis]}", rule, f"{'Method':<{width}} | {'mAP':>8} | {'top-1':>8}", rule]
        lines += [f"{r.method:<{width}} | {r.mAP:>8.2f} | {r.top1_accuracy:>8.2f}" for r in self.rows]
        lines.append(rule)
        return "\n".join(lines) + "\n"


def ablation_sweep(
    train_corpus,
    test_corpus,
    axis: str,
    values: Sequence,
    model_config: ModelConfig,
    train_config: TrainConfig,
    init_seed: int = 0,
    cache: dict | None = None,
) -> SweepTable:
    """Train one model per axis value (shared seeds) and tabulate test mAP/top-1.

    ``cache`` maps ``(ModelConfig, baseline)`` to ``(EvalReport, final_loss)``
    for models already trained on the same corpora with the same training
    config and seed; hits skip training and new results are added to it.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {', '.join(SWEEP_AXES)}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    table = SweepTable(axis)
    for raw in values:
        value = _coerce_axis_value(axis, raw)
        baseline = False
        cfg = model_config
        if axis == "model":
            if value not in ("baseline", "point"):
                raise ConfigError(f"model axis values are 'baseline' and 'point', got {value!r}")
            baseline = value == "baseline"
        else:
            cfg = replace(model_config, **{axis: value})
        key = (cfg, baseline)
        if cache is not None and key in cache:
            report, final = cache[key]
        else:
            params = ModelParams.initialize(cfg, seed=init_seed)
            result = train(train_corpus, params, cfg, replace(train_config, baseline=baseline))
            report = evaluate_map(test_corpus, params, cfg, baseline=baseline)
            final = result.loss_curve[-1] if result.loss_curve else float("nan")
            if cache is not None:
                cache[key] = (report, final)
        label = _LABELS.get(value) if isinstance(value, str) else None
        if label is None:
            label = f"POINT ({'N_r' if axis == 'n_modules' else axis}={value})"
        table.rows.append(SweepRow(label, value, report.mAP, report.top1_accuracy, final))
        logger.info("sweep %s=%s: mAP %.2f top-1 %.2f", axis, value, report.mAP, report.top1_accuracy)
    return table
