"""Command-line entry point: train, quantize, prune, segment, eval, xval, report.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import os
import sys

import numpy as np

from . import compress, modelio
from .config import RunConfig
from .errors import ConfigError
from .eval import (VARIANTS, cross_validate, evaluate_scores, fmt, probability_to_pgm,
                   score_pixels, segment_image)
from .netcore import TrainingDiverged, reference_architecture
from .pipeline import enhance_all, make_datasets, train_baseline
from .preprocess import FundusImage, enhance, read_pnm, vessel_map, write_pgm
from .synthetic import synthetic_fundus

log = logging.getLogger("vesselnet")


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _writer(fh=None):
    return csv.writer(fh or sys.stdout, lineterminator="\n")


def _csv_file(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(header)
        w.writerows([[fmt(x) for x in r] for r in rows])
    return path


def _config(args):
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        changes = {}
        if args.seed is not None:
            changes["seed"] = args.seed
        if args.threads is not None:
            changes["threads"] = args.threads
        if getattr(args, "out_dir", None):
            changes["out_dir"] = args.out_dir
        if changes:
            cfg = cfg.replace(**changes)
    except OSError as exc:
        raise CliError(2, f"cannot read config {args.config}: {exc.strerror}") from None
    except ConfigError as exc:
        raise CliError(2, str(exc)) from None
    for line in cfg.to_text().splitlines():
        print(f"# {line}")
    return cfg


def _data(args, cfg, held_out=False):
    """(planes, label_maps, fov_masks, ids) from --synthetic or a STARE directory."""
    if args.synthetic:
        images, labels = synthetic_fundus(cfg.synthetic_images, cfg.synthetic_size,
                                          seed=cfg.seed + (1000 if held_out else 0))
        ids = [f"syn{i:03d}" for i in range(len(images))]
        fovs = [None] * len(images)
    else:
        directory = getattr(args, "data_dir", None) or cfg.data_dir
        if not directory:
            raise CliError(2, "no data directory given (positional DATA_DIR, data_dir=, or --synthetic)")
        if not os.path.isdir(directory):
            raise CliError(2, f"data directory not found: {directory}")
        pairs = modelio.load_stare(directory, args.fov or cfg.fov_dir or None)
        if not pairs:
            raise CliError(1, f"no usable image/label pairs in {directory}")
        images = [p[0] for p in pairs]
        labels = [p[1] for p in pairs]
        ids = [im.image_id for im in images]
        fovs = [im.fov_mask for im in images]
    return enhance_all(images, cfg.eq_window), labels, fovs, ids


def _datasets(args, cfg):
    planes, labels, fovs, ids = _data(args, cfg)
    train, val = make_datasets(planes, labels, cfg, fovs, ids)
    for msg in train.warnings:
        print(f"# warning: {msg}")
    return train, val


def _load(path):
    try:
        return modelio.load_model(path)
    except FileNotFoundError:
        raise CliError(2, f"model file not found: {path}") from None
    except modelio.CorruptModelError as exc:
        raise CliError(1, f"{path}: {exc}") from None


def _out(cfg, name):
    os.makedirs(cfg.out_dir, exist_ok=True)
    return os.path.join(cfg.out_dir, name)


def _figures(args):
    if args.no_figures:
        return None
    from . import plots
    return plots


# ------------------------------------------------------------------ commands


def cmd_train(args):
    cfg = _config(args)
    train, val = _datasets(args, cfg)
    print(f"# train patches={len(train)} val patches={len(val)}")
    w = _writer()
    w.writerow(["epoch", "loss", "val_accuracy"])

    def log_epoch(epoch, loss, acc):
        w.writerow([epoch, f"{loss:.6f}", f"{acc:.4f}"])
        sys.stdout.flush()

    try:
        net, history = train_baseline(train, val, cfg, log_epoch)
    except TrainingDiverged as exc:
        raise CliError(1, f"{exc}; try a smaller learning_rate") from None
    modelio.save_model(net, args.out)
    _csv_file(_out(cfg, "train_log.csv"), ["epoch", "loss", "val_accuracy"], history)
    plots = _figures(args)
    if plots:
        plots.training_figure(history, _out(cfg, "training.png"))
    print(f"# saved {args.out}; val_accuracy={history[-1][2]:.4f}")
    return 0


def cmd_quantize(args):
    cfg = _config(args)
    net = _load(args.model)
    train, val = _datasets(args, cfg)
    try:
        result = compress.quantize_retrain(net, train.xy, val.xy, cfg.schedule())
    except TrainingDiverged as exc:
        raise CliError(1, str(exc)) from None
    modelio.save_model(result.network, args.out)
    w = _writer()
    w.writerow(["round", "val_accuracy"])
    w.writerows([[r, f"{a:.4f}"] for r, a in result.history])
    _csv_file(_out(cfg, "quantize_history.csv"), ["round", "val_accuracy"], result.history)
    print(f"# baseline_val_accuracy={result.baseline_accuracy:.4f}")
    if not result.tolerance_met:
        print("# warning: tolerance not met; best network saved")
    print(f"# saved {args.out}")
    return 0


def _print_sparsity(net):
    w = _writer()
    w.writerow(["layer", "kind", "original_count", "active_count", "removal_fraction",
                "quantized", "ternary_minus1", "ternary_zero", "ternary_plus1"])
    for row in compress.sparsity_report(net):
        hist = row.get("ternary_histogram", {})
        w.writerow([row["layer"], row["kind"], row["original_count"], row["active_count"],
                    f"{row['removal_fraction']:.4f}", int(row["quantized"]),
                    hist.get(-1, ""), hist.get(0, ""), hist.get(1, "")])
    print(f"# conv_removal_fraction={compress.conv_removal_fraction(net):.4f}")


def cmd_prune(args):
    cfg = _config(args)
    net = _load(args.model)
    if not compress.is_dense_quantized(net):
        raise CliError(2, "prune needs a model whose dense layers are quantized; "
                          "run 'quantize' first (stage order: train, quantize, prune)")
    train, val = _datasets(args, cfg)
    try:
        result = compress.prune_retrain(net, train.xy, val.xy, cfg.schedule())
    except TrainingDiverged as exc:
        raise CliError(1, str(exc)) from None
    header = ["round", "layer", "threshold", "active_count", "val_accuracy", "status"]
    w = _writer()
    w.writerow(header)
    w.writerows([[fmt(x) for x in r] for r in result.history])
    _csv_file(_out(cfg, "prune_history.csv"), header, result.history)
    for flag in result.flags:
        print(f"# warning: {flag}")
    modelio.save_model(result.network, args.out)
    _print_sparsity(result.network)
    plots = _figures(args)
    if plots and result.history:
        start = {r["layer"]: r["active_count"] for r in compress.sparsity_report(net)}
        plots.sparsity_figure(result.history, _out(cfg, "sparsity.png"), start)
    print(f"# saved {args.out}")
    if any("fully pruned" in f for f in result.flags):
        raise CliError(1, "pruning stopped: a conv layer would lose every weight")
    return 0


def _read_image(path):
    try:
        arr = read_pnm(path)
    except FileNotFoundError:
        raise CliError(2, f"image not found: {path}") from None
    except (OSError, ValueError) as exc:
        raise CliError(2, f"cannot read {path}: {exc}") from None
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    return arr


def cmd_segment(args):
    cfg = _config(args)
    net = _load(args.model)
    rgb = _read_image(args.image)
    fov = None
    if args.fov:
        fov = _read_image(args.fov)[..., 0] != 0
    plane = enhance(FundusImage(rgb, fov), cfg.eq_window)
    prob, mask = segment_image(net, plane, fov, cfg.mask_threshold)
    parent = os.path.dirname(args.out_prefix)
    if parent:
        os.makedirs(parent, exist_ok=True)
    write_pgm(f"{args.out_prefix}.prob.pgm", probability_to_pgm(prob))
    write_pgm(f"{args.out_prefix}.mask.pgm", np.where(mask, 255, 0))
    plots = _figures(args)
    if plots:
        plots.segmentation_figure(plane, prob, mask, f"{args.out_prefix}.png")
    print(f"# wrote {args.out_prefix}.prob.pgm {args.out_prefix}.mask.pgm; "
          f"vessel_pixels={int(mask.sum())}")
    return 0


METRIC_HEADER = ["image", "sen", "spe", "acc", "dice", "auc", "tp", "fp", "tn", "fn"]


def _metric_row(name, report):
    d = report.as_dict()
    return [name] + [fmt(d[k]) for k in METRIC_HEADER[1:]]


def _eval_pixels(plane, fov, max_pixels, rng):
    inside = np.ones(plane.shape, bool) if fov is None else np.asarray(fov) != 0
    ys, xs = np.nonzero(inside)
    if max_pixels and len(ys) > max_pixels:
        pick = np.sort(rng.choice(len(ys), max_pixels, replace=False))
        ys, xs = ys[pick], xs[pick]
    return xs, ys


def cmd_eval(args):
    cfg = _config(args)
    net = _load(args.model)
    planes, labels, fovs, ids = _data(args, cfg, held_out=True)
    rng = np.random.default_rng([cfg.seed, 4])
    rows, all_s, all_t, full_s, full_t = [], [], [], [], []
    for plane, lab, fov, iid in zip(planes, labels, fovs, ids):
        xs, ys = _eval_pixels(plane, fov, cfg.eval_max_pixels, rng)
        s = score_pixels(net, plane, xs, ys)
        t = vessel_map(lab)[ys, xs]
        all_s.append(s)
        all_t.append(t)
        rows.append(_metric_row(iid, evaluate_scores(s, t, cfg.mask_threshold)))
        if fov is not None:
            # same image without the field-of-view restriction
            xs, ys = _eval_pixels(plane, None, cfg.eval_max_pixels, rng)
            full_s.append(score_pixels(net, plane, xs, ys))
            full_t.append(vessel_map(lab)[ys, xs])
    pooled = evaluate_scores(np.concatenate(all_s), np.concatenate(all_t), cfg.mask_threshold)
    rows.append(_metric_row("pooled", pooled))
    if full_s:
        full = evaluate_scores(np.concatenate(full_s), np.concatenate(full_t), cfg.mask_threshold)
        rows.append(_metric_row("pooled_without_fov", full))
    w = _writer()
    w.writerow(METRIC_HEADER)
    w.writerows(rows)
    _csv_file(_out(cfg, "eval_metrics.csv"), METRIC_HEADER, rows)
    _csv_file(_out(cfg, "roc.csv"), ["fpr", "tpr"], pooled.roc)
    plots = _figures(args)
    if plots:
        plots.roc_figure({os.path.basename(args.model): (pooled.roc, pooled.auc)},
                         _out(cfg, "roc.png"))
    return 0


def cmd_xval(args):
    cfg = _config(args)
    planes, labels, fovs, ids = _data(args, cfg)
    if len(planes) < cfg.folds:
        raise CliError(2, f"{cfg.folds} folds need at least {cfg.folds} images, got {len(planes)}")

    def progress(fold):
        print(f"# fold {fold.fold} done: test={','.join(fold.test_ids)} "
              f"conv_removal={fmt(fold.conv_removal)}")
        sys.stdout.flush()

    report = cross_validate(planes, labels, cfg, fovs, ids, progress)
    header = ["fold", "variant", "sen", "spe", "acc", "dice", "auc", "note"]
    rows = report.table_rows()
    w = _writer()
    w.writerow(header)
    w.writerows([[fmt(x) for x in r] for r in rows])
    _csv_file(_out(cfg, "xval_folds.csv"), header, rows)
    roc_rows = [(v, fpr, tpr) for v in VARIANTS if v in report.pooled
                for fpr, tpr in report.pooled[v].roc]
    _csv_file(_out(cfg, "xval_roc.csv"), ["variant", "fpr", "tpr"], roc_rows)
    plots = _figures(args)
    if plots and report.pooled:
        plots.roc_figure({v: (r.roc, r.auc) for v, r in report.pooled.items()},
                         _out(cfg, "xval_roc.png"), title="cross-validated ROC")
    if all(f.failed for f in report.folds):
        raise CliError(1, "every fold failed")
    return 0


def cmd_report(args):
    _config(args)
    net = _load(args.model) if args.model else reference_architecture()
    table = modelio.architecture_table(net)
    w = _writer()
    w.writerow(["layer", "type", "maps_and_neurons", "filter_size", "original_weights",
                "simplified_weights"])
    w.writerows(table)
    rep = modelio.complexity_report(net)
    cheader = ["layer", "kind", "param_count", "active_count", "macs", "storage_bytes",
               "original_macs", "original_storage_bytes", "encoding"]
    rows = [[getattr(l, k) for k in cheader] for l in rep.layers]
    t = rep.totals
    rows.append(["total", "original", t["original"]["params"], t["original"]["params"],
                 t["original"]["macs"], t["original"]["storage_bytes"], "", "", ""])
    rows.append(["total", "simplified", t["original"]["params"], t["simplified"]["params"],
                 t["simplified"]["macs"], t["simplified"]["storage_bytes"], "", "", ""])
    print()
    w.writerow(cheader)
    w.writerows(rows)
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        _csv_file(os.path.join(args.out_dir, "complexity.csv"), cheader, rows)
        plots = _figures(args)
        if plots:
            plots.weights_figure(table, os.path.join(args.out_dir, "weights.png"))
    return 0


# ---------------------------------------------------------------------- main


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--threads", type=int, help="BLAS thread limit (0 = library default)")
    common.add_argument("--out-dir", help="directory for CSV tables and figures")
    common.add_argument("--no-figures", action="store_true", help="skip PNG figures")
    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--synthetic", action="store_true", help="use generated line images")
    data.add_argument("--fov", help="field-of-view mask directory (<stem>.fov.pgm)")

    p = argparse.ArgumentParser(prog="vesselnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", parents=[common, data], help="train the baseline network")
    s.add_argument("data_dir", nargs="?")
    s.add_argument("-o", "--out", required=True, help="output model file")
    s.set_defaults(func=cmd_train)

    for name, func, text in (("quantize", cmd_quantize, "ternarize dense layers and retrain"),
                             ("prune", cmd_prune, "prune conv layers and retrain")):
        s = sub.add_parser(name, parents=[common, data], help=text)
        s.add_argument("model")
        s.add_argument("data_dir", nargs="?")
        s.add_argument("-o", "--out", required=True, help="output model file")
        s.set_defaults(func=func)

    s = sub.add_parser("segment", parents=[common], help="segment one PPM/PGM image")
    s.add_argument("model")
    s.add_argument("image")
    s.add_argument("out_prefix")
    s.add_argument("--fov", help="field-of-view mask PGM")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("eval", parents=[common, data], help="pixel metrics and ROC on a dataset")
    s.add_argument("model")
    s.add_argument("data_dir", nargs="?")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("xval", parents=[common, data], help="k-fold cross-validation, 3 variants")
    s.add_argument("data_dir", nargs="?")
    s.set_defaults(func=cmd_xval)

    s = sub.add_parser("report", parents=[common], help="architecture and complexity report")
    s.add_argument("model", nargs="?", help="model file (default: fresh reference network)")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    limit = contextlib.nullcontext()
    if args.threads:
        from threadpoolctl import threadpool_limits
        limit = threadpool_limits(args.threads)
    try:
        with limit:
            return args.func(args)
    except CliError as exc:
        print(f"vesselnet {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"vesselnet {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
