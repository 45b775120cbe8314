"""``dsxformer`` command line: pca, train, eval, predict, synth, convert."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import HSICube, load_cube, load_split, pca_reduce, save_cube
from .errors import DataError, DSXError
from .train import (TrainConfig, evaluate, load_config, load_for_inference, parse_config,
                    predict_map, train, write_ppm)


def _cmd_pca(args):
    cube = load_cube(args.inp)
    save_cube(args.out, pca_reduce(cube, args.k))
    print(f"wrote {args.out} ({cube.rows}x{cube.cols}x{args.k})")


def _train_config(args):
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = []
    for flag, key in (("epochs", "epochs"), ("seed", "seed"), ("train_ratio", "train_ratio"),
                      ("split_scene", "split_scene"), ("clip_norm", "clip_norm"), ("threads", "threads")):
        v = getattr(args, flag)
        if v is not None:
            overrides.append(f"{key} = {v}")
    overrides += args.set or []
    return parse_config("\n".join(overrides), base=cfg) if overrides else cfg


def _cmd_train(args):
    cfg = _train_config(args)
    art = train(cfg, args.cube, args.out)
    summary = {k: art.report[k] for k in ("OA", "AA", "Kappa") if k in art.report}
    print(json.dumps({"checkpoint": str(art.checkpoint), "metrics_log": str(art.metrics_log),
                      "report": str(art.report_path), "map": str(art.map_path), **summary}, indent=2))


def _cmd_eval(args):
    params, cube, meta = load_for_inference(args.checkpoint, args.cube)
    ds = load_split(args.split, cube, meta["patch_size"])
    report, _ = evaluate(params, ds, args.batch)
    out = report.to_dict()
    text = json.dumps(out, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)


def _cmd_predict(args):
    params, cube, meta = load_for_inference(args.checkpoint, args.cube)
    grid = predict_map(params, cube, meta["patch_size"], all_pixels=args.all_pixels, batch=args.batch)
    write_ppm(args.out, grid)
    print(f"wrote {args.out} ({grid.shape[0]}x{grid.shape[1]})")


def _cmd_synth(args):
    from .synthetic import make_separated_cube

    cube = make_separated_cube(rows=args.rows, cols=args.cols, bands=args.bands,
                               n_classes=args.classes, seed=args.seed)
    save_cube(args.out, cube)
    print(f"wrote {args.out} ({cube.rows}x{cube.cols}x{cube.bands}, K={cube.n_classes})")


def _cmd_convert(args):
    from scipy.io import loadmat

    def pick(path, key):
        mat = {k: v for k, v in loadmat(path).items() if not k.startswith("__")}
        if key:
            if key not in mat:
                raise DataError(f"{path}: no variable {key!r} (have {sorted(mat)})")
            return mat[key]
        if len(mat) != 1:
            raise DataError(f"{path}: several variables {sorted(mat)}; pass the key explicitly")
        return next(iter(mat.values()))

    values = np.asarray(pick(args.data, args.data_key), dtype=np.float32)
    labels = np.asarray(pick(args.labels, args.labels_key))
    if values.ndim != 3 or labels.shape != values.shape[:2]:
        raise DataError(f"expected (rows, cols, bands) data and (rows, cols) labels, got "
                        f"{values.shape} and {labels.shape}")
    cube = HSICube(values, labels.astype(np.uint16), int(labels.max()))
    save_cube(args.out, cube)
    print(f"wrote {args.out} ({cube.rows}x{cube.cols}x{cube.bands}, K={cube.n_classes})")


def build_parser():
    ap = argparse.ArgumentParser(prog="dsxformer", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pca", help="standardize and project a cube onto its top-k components")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--k", type=int, default=30)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_pca)

    p = sub.add_parser("train", help="train a model and write a run directory")
    p.add_argument("--cube", required=True)
    p.add_argument("--config", help="flat key=value file with TrainConfig fields")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--train-ratio", type=float)
    p.add_argument("--split-scene", help="use a benchmark scene's per-class training counts (SA, PU, IP, KSC)")
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--threads", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="metrics of a checkpoint on a split file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cube", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("predict", help="classification map as a binary PPM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cube", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--all-pixels", action="store_true", help="also classify unlabeled pixels")
    p.add_argument("--batch", type=int, default=256)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("synth", help="write a synthetic separated-classes cube")
    p.add_argument("--out", required=True)
    p.add_argument("--rows", type=int, default=40)
    p.add_argument("--cols", type=int, default=40)
    p.add_argument("--bands", type=int, default=20)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("convert", help="build a .hsc cube from MATLAB data/label files")
    p.add_argument("--data", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--data-key")
    p.add_argument("--labels-key")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_convert)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except DSXError as exc:
        print(f"dsxformer: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"dsxformer: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
