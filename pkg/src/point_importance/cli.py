"""Command line entry point: ``point-importance <command> [options]``.

Commands: generate, train, eval, infer, gradcheck, sweep.

Every option can also be set in a config file passed with ``--config``. The
file holds one ``key = value`` pair per line, keys spelled like the long
option without leading dashes (``-`` or ``_`` both accepted), ``#`` starts a
comment. Precedence: built-in defaults < config file < command-line flags.

Exit codes: 0 success, 1 runtime failure (divergence, failed gradient check),
2 usage or configuration error, 3 malformed or inconsistent data.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .data import GeneratorSpec, dumps_corpus, generate_relational_corpus, load_corpus_with_dim
from .exceptions import ConfigError, DataError, DimensionError, DivergenceError, UsageError
from .model import ModelConfig, ModelParams, forward_baseline, forward_point, load_checkpoint, save_checkpoint
from .train import (
    SWEEP_AXES,
    TrainConfig,
    ablation_sweep,
    evaluate_map,
    gradcheck_suite,
    ranking,
    train,
)

logger = logging.getLogger("point_importance")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3


def _bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# ------------------------------------------------------------ option groups


def _add_generator_options(p):
    g = p.add_argument_group("generator")
    g.add_argument("--count", type=int, default=100, help="number of scenes (default 100)")
    g.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    g.add_argument("--n-min", type=int, default=3, help="fewest persons per scene (default 3)")
    g.add_argument("--n-max", type=int, default=8, help="most persons per scene (default 8)")
    g.add_argument("--d-f", type=int, default=40, help="feature dimension (default 40)")
    g.add_argument("--n-codes", type=int, default=8, help="identity codes per block (default 8)")
    g.add_argument("--focus", type=float, default=0.8, help="probability of gazing at the focal person (default 0.8)")
    g.add_argument("--sigma", type=float, default=0.1, help="feature noise standard deviation (default 0.1)")


def _add_model_options(p):
    g = p.add_argument_group("model")
    g.add_argument("--r", type=int, default=4, help="relation submodules per module (default 4)")
    g.add_argument("--n-modules", type=int, default=1, help="stacked relation modules N_r (default 1)")
    g.add_argument("--fusion", default="prior_importance", choices=["person_only", "prior_importance", "extra_link"])
    g.add_argument("--attention", default="additive", choices=["additive", "scaled_dot"])
    g.add_argument("--normalization", default="outgoing", choices=["outgoing", "incoming"],
                   help="outgoing = importance relation, incoming = standard attention")
    g.add_argument("--include-self", type=_bool, default=True, help="keep the j=i term (default true)")
    g.add_argument("--hidden", type=int, default=None, help="classifier hidden width (default d_f/2)")
    g.add_argument("--baseline", type=_bool, default=False, help="train/score without the relation module")


def _add_train_options(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=50, help="(default 50)")
    g.add_argument("--lr", type=float, default=0.01, help="learning rate (default 0.01)")
    g.add_argument("--momentum", type=float, default=0.9, help="(default 0.9)")
    g.add_argument("--batch-size", type=int, default=8, help="scenes per SGD step (default 8)")
    g.add_argument("--train-seed", type=int, default=0, help="shuffle seed (default 0)")
    g.add_argument("--init-seed", type=int, default=0, help="parameter initialisation seed (default 0)")
    g.add_argument("--checkpoint-every", type=int, default=0, help="also checkpoint every k epochs (0 = only at the end)")


def _add_common(p):
    p.add_argument("--config", metavar="FILE", help="key = value config file")
    p.add_argument("--threads", type=int, default=1, help="cap on BLAS threads (default 1)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="point-importance", description="Importance-relation networks for important-person detection.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("generate", help="write a synthetic relational corpus")
    p.add_argument("--output", required=True, metavar="PATH", help="corpus file to write")
    _add_generator_options(p)
    _add_common(p)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--corpus", required=True, metavar="PATH", help="labelled training corpus")
    p.add_argument("--checkpoint", required=True, metavar="PATH", help="checkpoint file to write")
    p.add_argument("--loss-curve", metavar="PATH", help="write 'epoch,loss' lines here")
    p.add_argument("--d-f", type=int, default=None, help="expected feature dimension (checked against the corpus)")
    _add_model_options(p)
    _add_train_options(p)
    _add_common(p)

    p = sub.add_parser("eval", help="score a labelled corpus (mAP, top-1)")
    p.add_argument("--corpus", required=True, metavar="PATH")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--baseline", type=_bool, default=None, help="override the checkpoint's baseline flag")
    p.add_argument("--report", metavar="PATH", help="also write the JSON report here")
    p.add_argument("--json", action="store_true", help="print JSON instead of the table")
    _add_common(p)

    p = sub.add_parser("infer", help="rank the persons of every scene")
    p.add_argument("--corpus", required=True, metavar="PATH", help="corpus; labels optional")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--baseline", type=_bool, default=None, help="override the checkpoint's baseline flag")
    p.add_argument("--output", metavar="PATH", help="write JSON lines here instead of stdout")
    _add_common(p)

    p = sub.add_parser("gradcheck", help="compare backprop with central differences")
    p.add_argument("--configs", type=int, default=100, help="random configurations (default 100)")
    p.add_argument("--d-f", type=int, default=8, help="feature dimension (default 8)")
    p.add_argument("--coords", type=int, default=60, help="coordinates sampled per configuration (0 = all)")
    p.add_argument("--seed", type=int, default=0)
    _add_common(p)

    p = sub.add_parser("sweep", help="ablation table over one hyperparameter")
    p.add_argument("--corpus", required=True, metavar="PATH", help="training corpus")
    p.add_argument("--test-corpus", required=True, metavar="PATH", help="evaluation corpus")
    p.add_argument("--axis", required=True, choices=list(SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--output", metavar="PATH", help="write the aligned table here")
    p.add_argument("--json-output", metavar="PATH", help="write the JSON table here")
    _add_model_options(p)
    _add_train_options(p)
    _add_common(p)
    return parser


# --------------------------------------------------------------- config file


def read_config_file(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    try:
        cp.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return {k.replace("-", "_"): v for k, v in cp["run"].items()}


def _apply_config(parser, sub_parser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    values = read_config_file(known.config)
    actions = {a.dest: a for a in sub_parser._actions}
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None or key in ("config", "help"):
            raise ConfigError(f"{known.config}: unknown key {key!r} for this command")
        conv = action.type or str
        try:
            val = conv(raw)
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise ConfigError(f"{known.config}: bad value for {key}: {exc}") from None
        if action.choices is not None and val not in action.choices:
            raise ConfigError(f"{known.config}: {key} must be one of {', '.join(map(str, action.choices))}")
        defaults[key] = val
        action.required = False
    sub_parser.set_defaults(**defaults)


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices.get(name)
    return None


# ------------------------------------------------------------------ helpers


def _model_config(args, d_f) -> ModelConfig:
    return ModelConfig(
        d_f=d_f,
        r=args.r,
        n_modules=args.n_modules,
        fusion=args.fusion,
        attention=args.attention,
        normalization=args.normalization,
        include_self=args.include_self,
        hidden=args.hidden,
    )


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        lr=args.lr,
        momentum=args.momentum,
        batch_size=args.batch_size,
        seed=args.train_seed,
        checkpoint_every=args.checkpoint_every,
        baseline=args.baseline,
    )


def _load(path):
    if not Path(path).exists():
        raise UsageError(f"{path}: no such file")
    return load_corpus_with_dim(path)


def _load_checkpoint(path):
    if not Path(path).exists():
        raise UsageError(f"{path}: no such file")
    return load_checkpoint(path)


def _check_dims(corpus_d_f, model_d_f, corpus_path, what="checkpoint"):
    if corpus_d_f is not None and corpus_d_f != model_d_f:
        raise ConfigError(f"d_f mismatch: corpus {corpus_path} has d_f={corpus_d_f}, {what} has d_f={model_d_f}")


# ----------------------------------------------------------------- commands


def cmd_generate(args, out):
    spec = GeneratorSpec(
        n_min=args.n_min, n_max=args.n_max, d_f=args.d_f, n_codes=args.n_codes,
        focus=args.focus, sigma=args.sigma, seed=args.seed,
    )
    scenes = generate_relational_corpus(spec, args.count)
    Path(args.output).write_text(dumps_corpus(scenes, spec.d_f), encoding="utf-8")
    persons = sum(s.n_persons for s in scenes)
    print(f"scenes={len(scenes)} persons={persons} d_f={spec.d_f} output={args.output}", file=out)
    return EXIT_OK


def cmd_train(args, out):
    scenes, d_f = _load(args.corpus)
    if not scenes:
        raise DataError(f"{args.corpus}: corpus is empty")
    if args.d_f is not None:
        _check_dims(d_f, args.d_f, args.corpus, what="configuration")
    config = _model_config(args, d_f)
    params = ModelParams.initialize(config, seed=args.init_seed)
    tc = _train_config(args)
    result = train(scenes, params, config, tc)
    save_checkpoint(args.checkpoint, params, config, {"baseline": tc.baseline, "epochs": tc.epochs})
    if args.loss_curve:
        lines = ["epoch,loss"] + [f"{k + 1},{v!r}" for k, v in enumerate(result.loss_curve)]
        Path(args.loss_curve).write_text("\n".join(lines) + "\n", encoding="utf-8")
    final = result.loss_curve[-1] if result.loss_curve else float("nan")
    print(f"epochs={tc.epochs} final_loss={final:.6f} checkpoint={args.checkpoint}", file=out)
    return EXIT_OK


def _baseline_flag(args, meta):
    return bool(meta.get("baseline", False)) if args.baseline is None else args.baseline


def cmd_eval(args, out):
    params, config, meta = _load_checkpoint(args.checkpoint)
    scenes, d_f = _load(args.corpus)
    _check_dims(d_f, config.d_f, args.corpus)
    if not scenes:
        raise DataError(f"{args.corpus}: corpus is empty")
    if any(s.labels is None for s in scenes):
        raise DataError(f"{args.corpus}: eval needs a fully labelled corpus")
    report = evaluate_map(scenes, params, config, baseline=_baseline_flag(args, meta))
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.to_json() if args.json else report.summary(), file=out, end="" if not args.json else "\n")
    return EXIT_OK


def cmd_infer(args, out):
    params, config, meta = _load_checkpoint(args.checkpoint)
    scenes, d_f = _load(args.corpus)
    _check_dims(d_f, config.d_f, args.corpus)
    fwd = forward_baseline if _baseline_flag(args, meta) else forward_point
    lines = []
    for s in scenes:
        points = fwd(s, params, config)
        order = ranking(points)
        ranked = [{"person_id": s.person_ids[k], "point": float(points[k])} for k in order]
        lines.append(json.dumps({"scene_id": s.scene_id, "most_important": s.person_ids[order[0]], "ranking": ranked}, separators=(",", ":")))
    text = "".join(line + "\n" for line in lines)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        out.write(text)
    return EXIT_OK


def cmd_gradcheck(args, out):
    if args.configs < 1:
        raise ConfigError("--configs must be positive")
    report = gradcheck_suite(args.configs, d_f=args.d_f, seed=args.seed, coords=args.coords or None)
    failed = [t for t in report.trials if not t.passed]
    for t in failed:
        print(f"FAIL {json.dumps(t.config, sort_keys=True)} N={t.n_persons} rel_err={t.max_rel_error:.3e}", file=out)
    checked = sum(t.checked for t in report.trials)
    skipped = sum(t.skipped for t in report.trials)
    status = "PASS" if report.passed else "FAIL"
    print(f"{status} configs={len(report.trials)} coords={checked} kinks_skipped={skipped} max_rel_error={report.max_rel_error:.3e}", file=out)
    return EXIT_OK if report.passed else EXIT_RUNTIME


def cmd_sweep(args, out):
    train_scenes, d_f = _load(args.corpus)
    test_scenes, d_test = _load(args.test_corpus)
    _check_dims(d_test, d_f, args.test_corpus, what="training corpus")
    if not train_scenes or not test_scenes:
        raise DataError("sweep needs non-empty training and test corpora")
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    table = ablation_sweep(train_scenes, test_scenes, args.axis, values, _model_config(args, d_f), _train_config(args), args.init_seed)
    text = table.format()
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    if args.json_output:
        Path(args.json_output).write_text(table.to_json() + "\n", encoding="utf-8")
    out.write(text)
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "gradcheck": cmd_gradcheck,
    "sweep": cmd_sweep,
}


def main(argv=None, out=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    out = out or sys.stdout
    parser = build_parser()
    try:
        if argv and argv[0] in COMMANDS:
            _apply_config(parser, _subparser(parser, argv[0]), argv[1:])
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        with threadpool_limits(limits=max(1, args.threads)):
            return COMMANDS[args.command](args, out)
    except (ConfigError, UsageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DimensionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
