"""Stage-wise command line: gen, pretrain, adapt, filter-change, features, train-gbm, detect, eval, analyze.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

import numpy as np

from . import config as config_mod
from . import convnet, gbm, pipeline, synthdata
from .filters import compare_responses, write_correlations, write_panel
from .imaging import CANONICAL_SIZE, Roi, crop, load_pgm, resample

log = logging.getLogger("kidneyxfer")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
SPLIT_STRIDE = 1_000_000  # seed block per run seed; validation seeds start half way


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- file formats ---------------------------------------------------------


def write_features(path: str, features: np.ndarray, labels: np.ndarray) -> None:
    """Feature-matrix CSV: header ``label,f0..f{d-1}``, one row per patch."""
    features = np.asarray(features, dtype=np.float64)
    if not np.all(np.isfinite(features)):
        raise ValueError("features contain non-finite values")
    d = features.shape[1]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(["label"] + [f"f{j}" for j in range(d)]) + "\n")
        for y, row in zip(labels, features):
            fh.write(f"{int(y)}," + ",".join(format(v, ".17g") for v in row) + "\n")


def read_features(path: str) -> tuple[np.ndarray, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        d = len(header) - 1
        if header[0] != "label" or header[1:] != [f"f{j}" for j in range(d)]:
            raise ValueError(f"{path}: bad feature header")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.size == 0:
        raise ValueError(f"{path}: no feature rows")
    if data.shape[1] != d + 1:
        raise ValueError(f"{path}: expected {d + 1} columns, got {data.shape[1]}")
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{path}: non-finite values")
    return data[:, 1:], data[:, 0].astype(np.int64)


def write_filter_change(path: str, report: convnet.FilterChangeReport) -> None:
    """CSV ``layer,filter,change``; an undefined change leaves the field empty."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("layer,filter,change\n")
        for layer, vals in report.changes.items():
            for j, c in enumerate(vals):
                fh.write(f"{layer},{j + 1},{'' if c is None else repr(c)}\n")


def write_change_counts(path: str, report: convnet.FilterChangeReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("layer,filters,over_threshold,undefined,threshold\n")
        for layer, vals in report.changes.items():
            fh.write(f"{layer},{len(vals)},{report.count(layer)},{report.undefined(layer)},{report.threshold!r}\n")


# -- helpers --------------------------------------------------------------


def _config(args) -> config_mod.RunConfig:
    cfg = config_mod.load(args.config) if getattr(args, "config", None) else config_mod.RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = with_seed(cfg, args.seed)
    return cfg


def with_seed(cfg: config_mod.RunConfig, seed: int) -> config_mod.RunConfig:
    """Route one seed to every seeded stage."""
    return dataclasses.replace(
        cfg,
        run=dataclasses.replace(cfg.run, seed=seed),
        pretrain=dataclasses.replace(cfg.pretrain, seed=seed),
        adapt=dataclasses.replace(cfg.adapt, seed=seed),
        gbm=dataclasses.replace(cfg.gbm, seed=seed),
    )


def _featurizer(net_path: str | None):
    if net_path is None:
        return pipeline.HaarFeaturizer()
    return pipeline.CnnFeaturizer(convnet.load(net_path))


def _emit(text: str) -> None:
    print(text, flush=True)


# -- commands -------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = _config(args)
    n_train = args.train if args.train is not None else cfg.run.train
    n_val = args.val if args.val is not None else cfg.run.val
    if n_train < 1 or n_val < 1:
        raise UsageError("--train and --val must be at least 1")
    if max(n_train, n_val) > SPLIT_STRIDE // 2:
        raise UsageError(f"at most {SPLIT_STRIDE // 2} images per split")
    base = cfg.run.seed * SPLIT_STRIDE
    tr = synthdata.generate_dataset(n_train, base, cfg.phantom, "train", args.out)
    va = synthdata.generate_dataset(n_val, base + SPLIT_STRIDE // 2, cfg.phantom, "val", args.out)
    _emit(f"wrote {len(tr)} train and {len(va)} val images to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    p = cfg.pretrain
    x, y = synthdata.generate_source_task(p.patches, p.seed, p.classes)
    net = convnet.init_convnet(p.seed, p.classes)
    _, history = convnet.train(net, x, y, p.train_config())
    convnet.save(args.out, net)
    final = history[-1] if history else float("nan")
    _emit(f"pretrained on {p.patches} source patches: loss={final!r},accuracy={convnet.accuracy(net, x, y)!r}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg = _config(args)
    source = convnet.load(args.model)
    regime = args.regime.upper()
    if regime == "NA":
        x = y = None
    else:
        x, y = pipeline.training_set(synthdata.read_manifest(args.train), cfg.experiment())
    net = convnet.adapt(source, regime, x, y, cfg.adapt)
    convnet.save(args.out, net)
    report = convnet.filter_change(source, net, args.threshold)
    if args.changes:
        write_filter_change(args.changes, report)
    _emit(",".join(f"{k}={v}" for k, v in report.counts.items()))
    return EXIT_OK


def cmd_filter_change(args) -> int:
    report = convnet.filter_change(convnet.load(args.before), convnet.load(args.after), args.threshold)
    write_filter_change(args.out, report)
    if args.counts:
        write_change_counts(args.counts, report)
    _emit(",".join(f"{k}={v}" for k, v in report.counts.items()))
    return EXIT_OK


def cmd_features(args) -> int:
    cfg = _config(args)
    x, y = pipeline.training_set(synthdata.read_manifest(args.manifest), cfg.experiment())
    feats = _featurizer(args.net)(x)
    write_features(args.out, feats, y)
    _emit(f"wrote {len(y)} rows x {feats.shape[1]} features ({int(y.sum())} positive)")
    return EXIT_OK


def cmd_train_gbm(args) -> int:
    cfg = _config(args)
    x, y = read_features(args.features)
    model = gbm.fit(x, y, cfg.gbm)
    gbm.save(args.out, model)
    f = model.decision_function(x)
    _emit(f"trained {len(model.trees)} trees: train_log_loss={gbm.log_loss(y, f)!r}")
    return EXIT_OK


def cmd_detect(args) -> int:
    cfg = _config(args)
    if args.method == "hybrid" and args.gbm2 is None:
        raise UsageError("--method hybrid needs a second model (--gbm2)")
    if args.method != "hybrid" and (args.gbm2 is not None or args.net2 is not None):
        raise UsageError("--gbm2/--net2 only apply to --method hybrid")
    if args.method == "cnn" and args.net is None:
        raise UsageError("--method cnn needs --net")
    val = synthdata.read_manifest(args.manifest)
    route_a = (_featurizer(args.net), gbm.load(args.gbm))
    route_b = (_featurizer(args.net2), gbm.load(args.gbm2)) if args.method == "hybrid" else None
    dets = []
    for img, _ in val.samples():
        if route_b is None:
            dets.append(pipeline.detect(img, cfg.sweep, *route_a))
        else:
            dets.append(pipeline.hybrid_detect(img, cfg.sweep, route_a, route_b))
    report = pipeline.evaluate(dets, [e.roi for e in val.entries], args.tag or args.method, [e.path for e in val.entries])
    pipeline.write_report(args.out, report)
    if args.overlays:
        pipeline.write_overlays(args.overlays, val, report)
    _emit(report.summary())
    return EXIT_OK


def cmd_eval(args) -> int:
    report = pipeline.read_report(args.report)
    summary = report.summary()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(f"method={report.method},images={len(report.results)},{summary}\n")
    _emit(summary)
    return EXIT_OK


def _analysis_patch(args):
    img = load_pgm(args.image)
    if args.roi:
        try:
            roi = Roi(*(int(v) for v in args.roi.split(",")))
        except (TypeError, ValueError) as exc:
            raise UsageError(f"--roi expects x,y,w,h: {exc}") from exc
        img = crop(img, roi)
    if img.shape != (CANONICAL_SIZE, CANONICAL_SIZE):
        img = resample(img, CANONICAL_SIZE, CANONICAL_SIZE)
    return img


def cmd_analyze(args) -> int:
    cfg = _config(args)
    after = convnet.load(args.after)
    os.makedirs(args.out, exist_ok=True)
    patch = _analysis_patch(args)
    comparison = compare_responses(after, patch, args.layer - 1, cfg.frangi, cfg.phase_congruency)
    write_panel(os.path.join(args.out, "panels"), comparison)
    write_correlations(os.path.join(args.out, "correlations.csv"), comparison)
    if args.before:
        report = convnet.filter_change(convnet.load(args.before), after, args.threshold)
        write_filter_change(os.path.join(args.out, "filter_change.csv"), report)
        write_change_counts(os.path.join(args.out, "filter_change_counts.csv"), report)
        _emit(",".join(f"{k}={v}" for k, v in report.counts.items()))
    _emit(f"wrote {len(comparison.maps)} panels to {args.out}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    """In-process chain over every requested method on a generated dataset."""
    cfg = _config(args)
    train = synthdata.read_manifest(os.path.join(args.data, "train.csv"))
    val = synthdata.read_manifest(os.path.join(args.data, "val.csv"))
    source = convnet.load(args.net) if args.net else None
    exp = pipeline.Experiment(train, val, cfg.experiment(), source)
    os.makedirs(args.out, exist_ok=True)
    for method in args.methods:
        report = exp.report(method)
        pipeline.write_report(os.path.join(args.out, f"{method}.csv"), report)
        _emit(f"{method}: {report.summary()}")
    return EXIT_OK


def config_dump(args) -> int:
    text = config_mod.dumps(_config(args))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kidneyxfer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="run configuration file")
        p.add_argument("--seed", type=int, help="overrides every seed in the configuration")
        p.set_defaults(func=func)
        return p

    p = command("gen", cmd_gen, "generate train and validation phantoms")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int)
    p.add_argument("--val", type=int)

    p = command("pretrain", cmd_pretrain, "train the source network")
    p.add_argument("--out", required=True)

    p = command("adapt", cmd_adapt, "transfer a source network (FA, PA or NA)")
    p.add_argument("--model", required=True)
    p.add_argument("--train", help="training manifest (not needed for NA)")
    p.add_argument("--regime", required=True, type=str.upper, choices=convnet.REGIMES)
    p.add_argument("--out", required=True)
    p.add_argument("--changes", help="per-filter change CSV against the source network")
    p.add_argument("--threshold", type=float, default=0.40)

    p = command("filter-change", cmd_filter_change, "per-filter relative l2 change between two networks")
    p.add_argument("--before", required=True)
    p.add_argument("--after", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--counts", help="per-layer count CSV")
    p.add_argument("--threshold", type=float, default=0.40)

    p = command("features", cmd_features, "labeled training features for one manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--net", help="network for CNN features; Haar features when omitted")
    p.add_argument("--out", required=True)

    p = command("train-gbm", cmd_train_gbm, "fit a GBM on a feature CSV")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)

    p = command("detect", cmd_detect, "detect kidneys on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--method", choices=("haar", "cnn", "hybrid"), default="haar")
    p.add_argument("--gbm", required=True)
    p.add_argument("--net", help="network for the first route (Haar when omitted)")
    p.add_argument("--gbm2", help="second model for --method hybrid")
    p.add_argument("--net2", help="network for the second route")
    p.add_argument("--tag", help="method tag written into the report")
    p.add_argument("--out", required=True)
    p.add_argument("--overlays", help="directory for overlay PGMs")

    p = command("eval", cmd_eval, "summarize a detection report")
    p.add_argument("--report", required=True)
    p.add_argument("--out")

    p = command("analyze", cmd_analyze, "response panels, filter correlations and change counts")
    p.add_argument("--after", required=True)
    p.add_argument("--before")
    p.add_argument("--image", required=True)
    p.add_argument("--roi", help="x,y,w,h crop before resampling")
    p.add_argument("--layer", type=int, default=1, help="1-based conv layer")
    p.add_argument("--threshold", type=float, default=0.40)
    p.add_argument("--out", required=True)

    p = command("experiment", cmd_experiment, "run several methods in one process")
    p.add_argument("--data", required=True)
    p.add_argument("--net")
    p.add_argument("--methods", nargs="+", choices=pipeline.METHODS, default=list(pipeline.METHODS))
    p.add_argument("--out", required=True)

    p = command("config", config_dump, "print the effective configuration")
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, config_mod.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError, IndexError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # invariant violations and bugs
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
