"""Command-line front end.

Commands: train, eval-entropy, eval-adversarial, eval-rotation,
eval-regression, eval-memorization, gen-data.  Each run reads a JSON
experiment config, writes its artifacts (checkpoint, JSON-lines training
log, CSV metrics, PNG figures, JSON summary) under the output directory,
and exits 0 on success or nonzero with a machine-readable error JSON on
stderr.  CSV and log artifacts are byte-identical across runs with the
same config and seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import plots
from .autodiff import Rng
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config, save_config, validate_config
from .data import glyph_dataset, load_idx, make_toy_regression, write_idx_images, \
    write_idx_labels
from .errors import ConfigError, ContractError, FormatError, NumericFault
from .evaluation import adversarial_sweep, entropy_cdf, memorization_protocol, \
    predict, regression_bands, rotated_digit_sweep
from .model import WEIGHT_KINDS
from .training import train

_DEFAULT_EPSILONS = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]
_DEFAULT_ANGLES = list(range(0, 361, 30))
_DEFAULT_SAMPLES = 20


# ---------------------------------------------------------------------------
# artifact helpers

def _write_csv(path, fieldnames, rows):
    """CSV with a header row; floats are converted to plain Python floats so
    the text form is the shortest round-trip representation."""

    def cell(v):
        if isinstance(v, (float, np.floating)):
            return float(v)
        if isinstance(v, (int, np.integer)):
            return int(v)
        return v

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fieldnames)
        for row in rows:
            writer.writerow([cell(row[k]) for k in fieldnames])
    return path


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _report(command, out_dir, artifacts, **extra):
    line = {"command": command, "out_dir": out_dir,
            "artifacts": sorted(artifacts)}
    line.update(extra)
    print(json.dumps(line, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# config plumbing

def _resolved_config(args) -> ExperimentConfig:
    config = load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.out_dir = args.out
    return config


def _check(config, need_model=False, need_dataset=False):
    problems = validate_config(config, need_model=need_model,
                               need_dataset=need_dataset)
    if problems:
        raise ConfigError(problems)
    os.makedirs(config.out_dir, exist_ok=True)


def _build_dataset(dcfg, default_seed):
    kind = dcfg["kind"]
    if kind == "idx":
        return load_idx(dcfg["images"], dcfg["labels"])
    seed = dcfg.get("data_seed", default_seed)
    if kind == "toy":
        return make_toy_regression(seed, n=dcfg.get("n", 20))
    n = dcfg.get("n", 1000)
    if kind == "synthetic-digits":
        return glyph_dataset("digits", n, seed)
    return glyph_dataset("letters", n, seed)


def _shape_for_spec(handle, spec):
    """(inputs, labels) with images flattened for dense stacks."""
    first = next(l for l in spec.layers if l.kind in WEIGHT_KINDS)
    if first.kind.endswith("conv"):
        X = handle.X if handle.X.ndim == 4 else handle.X[..., None]
        return X, handle.y
    return handle.flat(), handle.y


def _load_model(config):
    path = config.eval.get("checkpoint") or os.path.join(config.out_dir,
                                                         "checkpoint.mnf")
    if not os.path.exists(path):
        raise ConfigError([f"eval.checkpoint: no such file {path!r} "
                           "(run the train command first or set the path)"])
    return load_checkpoint(path)


def _model_inputs(config, model):
    handle = _build_dataset(config.dataset, config.seed)
    X, y = handle.for_model(model)
    return handle, X, y


# ---------------------------------------------------------------------------
# commands

def _cmd_train(args):
    config = _resolved_config(args)
    _check(config, need_model=True, need_dataset=True)
    out = config.out_dir

    spec = config.model_spec()
    handle = _build_dataset(config.dataset, config.seed)
    X, y = _shape_for_spec(handle, spec)
    tc = config.train_config()
    tc.log_path = os.path.join(out, "training_log.jsonl")
    eval_set = (X, y) if tc.eval_cadence else None

    model, records = train(spec, (X, y), tc, eval_set=eval_set)

    checkpoint_path = os.path.join(out, "checkpoint.mnf")
    save_checkpoint(model, checkpoint_path)
    config_path = os.path.join(out, "config.json")
    save_config(config, config_path)
    artifacts = [checkpoint_path, tc.log_path, config_path]
    if not args.no_figures and records:
        artifacts.append(plots.training_curve(
            records, os.path.join(out, "training_curve.png")))
    final = records[-1] if records else None
    return _report("train", out, artifacts, steps=len(records),
                   final_elbo=None if final is None else final["elbo"])


def _cmd_eval_entropy(args):
    config = _resolved_config(args)
    _check(config, need_dataset=True)
    out = config.out_dir
    model = _load_model(config)
    _, X, _ = _model_inputs(config, model)

    n_samples = config.eval.get("n_samples", _DEFAULT_SAMPLES)
    summary = predict(model, X, n_samples, Rng(config.seed))
    curve = entropy_cdf(summary.entropy,
                        grid_max=float(np.log(summary.n_classes)))

    rows = [{"entropy": g, "cdf": c} for g, c in zip(curve.grid, curve.cdf)]
    artifacts = [_write_csv(os.path.join(out, "entropy_cdf.csv"),
                            ["entropy", "cdf"], rows),
                 _write_json(os.path.join(out, "entropy_summary.json"),
                             {"count": int(X.shape[0]),
                              "n_samples": n_samples,
                              "median_entropy": curve.median(),
                              "mean_entropy": float(summary.entropy.mean()),
                              "max_entropy": float(summary.entropy.max())})]
    if not args.no_figures:
        artifacts.append(plots.entropy_cdf_plot(
            {"model": curve}, os.path.join(out, "entropy_cdf.png")))
    return _report("eval-entropy", out, artifacts,
                   median_entropy=curve.median())


def _cmd_eval_adversarial(args):
    config = _resolved_config(args)
    _check(config, need_dataset=True)
    out = config.out_dir
    model = _load_model(config)
    _, X, y = _model_inputs(config, model)

    epsilons = config.eval.get("epsilons", _DEFAULT_EPSILONS)
    n_samples = config.eval.get("n_samples", _DEFAULT_SAMPLES)
    rows = adversarial_sweep(model, (X, y), epsilons, S=n_samples,
                             rng=Rng(config.seed))

    fields = ["epsilon", "accuracy", "mean_entropy"]
    artifacts = [_write_csv(os.path.join(out, "adversarial.csv"), fields, rows),
                 _write_json(os.path.join(out, "adversarial_summary.json"),
                             {"count": int(X.shape[0]), "n_samples": n_samples,
                              "rows": rows})]
    if not args.no_figures:
        artifacts.append(plots.adversarial_plot(
            rows, os.path.join(out, "adversarial.png")))
    return _report("eval-adversarial", out, artifacts)


def _cmd_eval_rotation(args):
    config = _resolved_config(args)
    _check(config, need_dataset=True)
    out = config.out_dir
    model = _load_model(config)
    handle = _build_dataset(config.dataset, config.seed)

    index = config.eval.get("image_index", 0)
    if not 0 <= index < len(handle):
        raise ConfigError([f"eval.image_index: {index} outside dataset of "
                           f"size {len(handle)}"])
    angles = config.eval.get("angles", _DEFAULT_ANGLES)
    n_samples = config.eval.get("n_samples", _DEFAULT_SAMPLES)
    image = handle.X[index]
    rows = rotated_digit_sweep(model, image, angles, n_samples,
                               rng=Rng(config.seed))

    n_classes = len(rows[0]["probs"])
    fields = ["angle", "entropy", "max_prob"] + \
        [f"prob_{c}" for c in range(n_classes)]
    flat = []
    for r in rows:
        row = {"angle": r["angle"], "entropy": r["entropy"],
               "max_prob": r["max_prob"]}
        row.update({f"prob_{c}": p for c, p in enumerate(r["probs"])})
        flat.append(row)
    artifacts = [_write_csv(os.path.join(out, "rotation.csv"), fields, flat),
                 _write_json(os.path.join(out, "rotation_summary.json"),
                             {"image_index": index,
                              "label": int(handle.y[index]),
                              "n_samples": n_samples})]
    if not args.no_figures:
        artifacts.append(plots.rotation_plot(
            rows, os.path.join(out, "rotation.png")))
    return _report("eval-rotation", out, artifacts)


def _cmd_eval_regression(args):
    config = _resolved_config(args)
    _check(config)
    out = config.out_dir
    model = _load_model(config)

    low = config.eval.get("grid_low", -6.0)
    high = config.eval.get("grid_high", 6.0)
    points = config.eval.get("grid_points", 200)
    n_samples = config.eval.get("n_samples", _DEFAULT_SAMPLES)
    x_grid = np.linspace(low, high, points)
    rows = regression_bands(model, x_grid, max(n_samples, 2),
                            rng=Rng(config.seed))

    train_xy = None
    if config.dataset.get("kind") == "toy":
        handle = _build_dataset(config.dataset, config.seed)
        train_xy = (handle.X, handle.y)

    artifacts = [_write_csv(os.path.join(out, "regression_bands.csv"),
                            ["x", "mean", "std"], rows),
                 _write_json(os.path.join(out, "regression_summary.json"),
                             {"grid": [low, high, points],
                              "n_samples": n_samples,
                              "mean_std": float(np.mean([r["std"] for r in rows]))})]
    if not args.no_figures:
        artifacts.append(plots.regression_plot(
            rows, train_xy, os.path.join(out, "regression_bands.png")))
    return _report("eval-regression", out, artifacts, rows=len(rows))


def _cmd_eval_memorization(args):
    config = _resolved_config(args)
    _check(config, need_model=True, need_dataset=True)
    out = config.out_dir

    spec = config.model_spec()
    handle = _build_dataset(config.dataset, config.seed)
    train_xy = _shape_for_spec(handle, spec)
    test_xy = None
    if "test_dataset" in config.eval:
        test_handle = _build_dataset(config.eval["test_dataset"], config.seed)
        test_xy = _shape_for_spec(test_handle, spec)

    result = memorization_protocol(spec, train_xy, config.seed,
                                   test_set=test_xy,
                                   config=config.train_config())
    row = {"train_accuracy": result["train_acc"],
           "test_accuracy": "" if result["test_acc"] is None else result["test_acc"],
           "chance": result["chance"]}
    artifacts = [_write_csv(os.path.join(out, "memorization.csv"),
                            ["train_accuracy", "test_accuracy", "chance"], [row]),
                 _write_json(os.path.join(out, "memorization_summary.json"), result)]
    if not args.no_figures:
        artifacts.append(plots.memorization_plot(
            result, os.path.join(out, "memorization.png")))
    return _report("eval-memorization", out, artifacts, **result)


def _cmd_gen_data(args):
    os.makedirs(args.out, exist_ok=True)

    def emit(handle, stem):
        u8 = np.round(np.asarray(handle.X) * 255.0).astype(np.uint8)
        u8 = u8.reshape(u8.shape[0], u8.shape[1], u8.shape[2])
        images = os.path.join(args.out, f"{stem}-images.idx")
        labels = os.path.join(args.out, f"{stem}-labels.idx")
        write_idx_images(images, u8)
        write_idx_labels(labels, handle.y.astype(np.uint8))
        return [images, labels]

    artifacts = []
    artifacts += emit(glyph_dataset("digits", args.n_train, args.seed), "train")
    artifacts += emit(glyph_dataset("digits", args.n_test, args.seed + 1), "test")
    artifacts += emit(glyph_dataset("letters", args.n_ood, args.seed + 2), "ood")
    return _report("gen-data", args.out, artifacts,
                   n_train=args.n_train, n_test=args.n_test, n_ood=args.n_ood)


# ---------------------------------------------------------------------------
# argument parsing and dispatch

_EVAL_COMMANDS = {
    "train": (_cmd_train, "optimize the variational bound and save a checkpoint"),
    "eval-entropy": (_cmd_eval_entropy,
                     "predictive-entropy CDF of a trained model on a dataset"),
    "eval-adversarial": (_cmd_eval_adversarial,
                         "accuracy and entropy under a gradient-sign attack sweep"),
    "eval-rotation": (_cmd_eval_rotation,
                      "predictions for one image under continuous rotation"),
    "eval-regression": (_cmd_eval_regression,
                        "predictive mean and uncertainty bands on a 1-d grid"),
    "eval-memorization": (_cmd_eval_memorization,
                          "train on shuffled labels and report accuracy vs chance"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mnf",
        description="Train and evaluate neural networks with "
                    "flow-enriched weight posteriors.")
    sub = parser.add_subparsers(dest="command", metavar="command",
                                required=True)
    for name, (func, help_text) in _EVAL_COMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=True,
                        help="path to the JSON experiment config")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config's seed")
        sp.add_argument("--out", default=None,
                        help="override the config's output directory")
        sp.add_argument("--no-figures", action="store_true",
                        help="skip PNG rendering; write only data artifacts")
        sp.set_defaults(func=func)

    gen = sub.add_parser("gen-data",
                         help="write the built-in glyph corpora as IDX files")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--n-train", type=int, default=1000)
    gen.add_argument("--n-test", type=int, default=200)
    gen.add_argument("--n-ood", type=int, default=200)
    gen.add_argument("--seed", type=int, default=0)
    gen.set_defaults(func=_cmd_gen_data)
    return parser


def _fail(kind, message, fields=None):
    payload = {"error": kind, "message": message}
    if fields:
        payload["fields"] = fields
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return 1


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail("config", str(exc), fields=exc.fields)
    except FormatError as exc:
        return _fail("format", str(exc))
    except ContractError as exc:
        return _fail("contract", str(exc))
    except NumericFault as exc:
        return _fail("numeric", str(exc))
    except OSError as exc:
        return _fail("io", str(exc))


if __name__ == "__main__":
    sys.exit(main())
