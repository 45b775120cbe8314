"""Training, evaluation and prediction-map emission."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .data import (PatchCropper, SplitSpec, extract_pixel_patches, load_cube,
                   pca_reduce, save_split, split_train_test)
from .encoder import ModelConfig, ModelParams, forward_logits, load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, DimensionError, DivergenceError, NumericError
from .metrics import metrics

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch: int = 128
    epochs: int = 100
    weight_decay: float = 1e-4
    label_smoothing: float = 0.1
    dropout: float = 0.03
    drop_path: float = 0.1
    seed: int = 0
    patch_size: int = 25
    pca_k: int = 30
    window: int = 4
    heads: int = 8
    dim: int = 64
    mlp_hidden: int = 256
    depths: tuple = (2, 2)
    val_fraction: float = 0.1
    embed_patch: int = 2
    dsx_ratio: int = 2
    train_ratio: float = 0.1
    split_scene: str = ""
    context: str = "key"
    abs_context: bool = False
    gelu_approx: bool = False
    clip_norm: float = 0.0
    lr_schedule: str = "none"
    precision: str = "float32"
    threads: int = 1
    eval_batch: int = 256

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        for name in ("weight_decay", "label_smoothing", "dropout", "drop_path", "val_fraction", "train_ratio"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} must lie in [0, 1]")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch < 1 or self.eval_batch < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr_schedule not in ("none", "cosine"):
            raise ConfigError(f"lr_schedule must be 'none' or 'cosine', got {self.lr_schedule!r}")
        if self.patch_size < 1:
            raise ConfigError("patch_size must be >= 1")

    def model_config(self, in_bands, n_classes):
        return ModelConfig(
            in_bands=in_bands, n_classes=n_classes, patch=self.embed_patch, dim=self.dim,
            depths=self.depths, heads=self.heads, window=self.window, mlp_hidden=self.mlp_hidden,
            dsx_ratio=self.dsx_ratio, dropout=self.dropout, drop_path=self.drop_path,
            gelu_approx=self.gelu_approx, context=self.context, abs_context=self.abs_context,
            dtype=self.precision,
        )

    def split_spec(self):
        if self.split_scene:
            return SplitSpec.from_scene(self.split_scene, seed=self.seed)
        return SplitSpec(ratio=self.train_ratio, seed=self.seed)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["depths"] = list(self.depths)
        return d


def _convert(name, typ, raw):
    raw = raw.strip()
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        if typ == "tuple":
            return tuple(int(x) for x in raw.replace("[", "").replace("]", "").split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r} (expected {typ})") from None


def parse_config(text, base=None):
    """Flat ``key = value`` lines (``#`` comments) over :class:`TrainConfig` defaults."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = (base or TrainConfig()).to_dict()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _convert(key, types[key], raw)
    return TrainConfig(**values)


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())


# ---------------------------------------------------------------------------
# loss and optimizer
# ---------------------------------------------------------------------------

def smoothed_targets(targets, n_classes, eps):
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.size and (targets.min() < 1 or targets.max() > n_classes):
        raise DataError(f"targets must lie in 1..{n_classes}")
    q = np.full((targets.size, n_classes), eps / n_classes)
    q[np.arange(targets.size), targets - 1] += 1.0 - eps
    return q


def cross_entropy_smoothed(logits, targets, eps=0.1):
    """Mean of ``-sum_k q_k log p_k`` with ``q = (1-eps) onehot + eps/K``.

    ``logits`` is ``(batch, K)`` or ``(K,)``; ``targets`` are class ids 1..K.
    """
    if logits.ndim == 1:
        logits = T.reshape(logits, (1, -1))
    q = smoothed_targets(targets, logits.shape[-1], eps).astype(logits.dtype)
    if len(q) != logits.shape[0]:
        raise DataError(f"{len(q)} targets for {logits.shape[0]} logit rows")
    logp = T.log_softmax(logits, axis=-1)
    return -(logp * q).sum(axis=-1).mean()


def decays(name, t):
    """Weight decay applies to matrices only, never to bias tables."""
    return t.ndim >= 2 and not name.endswith("bias_table")


def adamw_step(param, grad, m, v, t, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
    """One decoupled-decay Adam update on numpy arrays; returns ``(param, m, v)``."""
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise DimensionError(f"AdamW shape mismatch: param {param.shape}, grad {grad.shape}, "
                          f"m {m.shape}, v {v.shape}")
    b1, b2 = betas
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    new = param - lr * (m_hat / (np.sqrt(v_hat) + eps)) - lr * weight_decay * param
    return new, m, v


class AdamW:
    def __init__(self, named_params, lr=1e-3, weight_decay=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    def zero_grad(self):
        for _, p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        for i, (name, p) in enumerate(self.params):
            wd = self.weight_decay if decays(name, p) else 0.0
            new, self.m[i], self.v[i] = adamw_step(p.data, p.grad, self.m[i], self.v[i], self.t,
                                                   lr, wd, self.betas, self.eps)
            p.data = new.astype(p.data.dtype, copy=False)


def clip_grad_norm(params, max_norm):
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * scale
    return total


# ---------------------------------------------------------------------------
# inference helpers
# ---------------------------------------------------------------------------

def predict_patches(params, patches_fn, n, batch=256):
    """Argmax class ids (1..K) for ``n`` patches produced by ``patches_fn(idx)``."""
    out = np.zeros(n, dtype=np.int64)
    with T.no_grad():
        for start in range(0, n, batch):
            idx = np.arange(start, min(start + batch, n))
            logits = forward_logits(patches_fn(idx), params, train=False)
            out[idx] = np.argmax(logits.data, axis=-1) + 1
    return out


def evaluate(params, ds, batch=256):
    if len(ds) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    pred = predict_patches(params, ds.patches, len(ds), batch)
    return metrics(pred, ds.labels, params.config.n_classes), pred


def prepare_cube(cube, meta):
    """Repeat the training-time standardize + PCA step on a raw cube."""
    raw, k = meta["raw_bands"], meta["pca_k"]
    if cube.bands != raw:
        raise ConfigError(f"cube has {cube.bands} bands, checkpoint was trained on {raw}-band cubes")
    return pca_reduce(cube, k)


# fixed per-class colours; class 0 (unlabeled / not predicted) is black
PALETTE = np.array([
    (0, 0, 0),
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
    (0, 128, 128), (220, 190, 255), (170, 110, 40), (255, 250, 200), (128, 0, 0),
    (170, 255, 195), (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128),
    (255, 255, 255),
], dtype=np.uint8)


def colorize(label_grid):
    ids = np.asarray(label_grid, dtype=np.int64)
    idx = np.where(ids == 0, 0, (ids - 1) % (len(PALETTE) - 1) + 1)
    return PALETTE[idx]


def write_ppm(path, label_grid):
    """Binary PPM (P6) of a class-id grid using :data:`PALETTE`."""
    rgb = colorize(label_grid)
    rows, cols = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def predict_map(params, cube, patch_size, all_pixels=False, batch=256):
    """Per-pixel argmax map, same spatial size as ``cube``.

    In labeled-only mode unlabeled pixels are left as 0 (black in the image).
    """
    if cube.bands != params.config.in_bands:
        raise ConfigError(f"cube has {cube.bands} bands, model expects {params.config.in_bands}")
    cropper = PatchCropper(cube.values, patch_size)
    mask = np.ones_like(cube.labels, dtype=bool) if all_pixels else cube.labels > 0
    rows, cols = np.nonzero(mask)
    pred = predict_patches(params, lambda idx: cropper(rows[idx], cols[idx]), len(rows), batch)
    grid = np.zeros(cube.labels.shape, dtype=np.uint16)
    grid[rows, cols] = pred
    return grid


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class RunArtifacts:
    checkpoint: Path
    metrics_log: Path
    report_path: Path
    map_path: Path
    report: dict


def _lr_at(cfg, step, total):
    if cfg.lr_schedule == "cosine" and total > 0:
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / total))
    return cfg.lr


def _run_epoch(cfg, params, named, opt, fit_ds, batch, step, total_steps, rng_shuffle, rng_drop):
    """One shuffled pass; returns (mean training loss, global step)."""
    order = rng_shuffle.permutation(len(fit_ds))
    total = 0.0
    for start in range(0, len(order), batch):
        idx = order[start:start + batch]
        opt.zero_grad()
        logits = forward_logits(fit_ds.patches(idx), params, train=True, rng=rng_drop)
        loss = cross_entropy_smoothed(logits, fit_ds.labels[idx], cfg.label_smoothing)
        loss.backward()
        if cfg.clip_norm > 0:
            clip_grad_norm([p for _, p in named], cfg.clip_norm)
        opt.step(lr=_lr_at(cfg, step, total_steps))
        if not all(np.isfinite(p.data).all() for _, p in named):
            raise NumericError(f"parameters became non-finite at step {step + 1}")
        step += 1
        total += float(loss.data) * len(idx)
    return total / len(fit_ds), step


def _validate(params, val_ds, batch):
    if not len(val_ds):
        return float("nan")
    with warnings.catch_warnings():
        # a small hold-out routinely misses a class
        warnings.simplefilter("ignore", UserWarning)
        return evaluate(params, val_ds, batch)[0].oa


def train(cfg, cube, out_dir, split=None):
    """Seeded training run; writes checkpoint, metrics CSV, report, splits and map."""
    if isinstance(cube, (str, os.PathLike)):
        cube = load_cube(cube)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(limits=cfg.threads if cfg.threads > 0 else None):
        return _train(cfg, cube, out, split or cfg.split_spec())


def _train(cfg, cube, out, split):
    # bands are always z-scored and decorrelated, even when no reduction is needed
    raw_bands = cube.bands
    cube = pca_reduce(cube, min(cfg.pca_k, raw_bands))
    ds = extract_pixel_patches(cube, cfg.patch_size)
    if len(ds) == 0:
        raise DataError("cube has no labeled pixels")
    train_ds, test_ds = split_train_test(ds, split)
    save_split(out / "split_train.txt", train_ds, split, "train")
    save_split(out / "split_test.txt", test_ds, split, "test")

    rng_val = np.random.default_rng([cfg.seed, 3])
    n_val = int(math.floor(cfg.val_fraction * len(train_ds)))
    perm = rng_val.permutation(len(train_ds))
    val_ds = train_ds.subset(np.sort(perm[:n_val]))
    fit_ds = train_ds.subset(np.sort(perm[n_val:]))
    if len(fit_ds) == 0 and cfg.epochs > 0:
        raise DataError("no training samples left after the validation hold-out")

    mcfg = cfg.model_config(cube.bands, cube.n_classes)
    params = ModelParams.init(mcfg, seed=cfg.seed)
    params.requires_grad_(True)
    named = params.named_parameters()
    opt = AdamW(named, lr=cfg.lr, weight_decay=cfg.weight_decay)
    meta = {"patch_size": cfg.patch_size, "pca_k": cube.bands, "raw_bands": raw_bands,
            "train_config": cfg.to_dict()}

    ckpt = out / "checkpoint.dsxc"
    log_path = out / "metrics.csv"
    save_checkpoint(ckpt, params, meta)
    with open(log_path, "w", newline="") as fh:
        csv.writer(fh).writerow(["epoch", "train_loss", "val_oa"])

    rng_shuffle = np.random.default_rng([cfg.seed, 1])
    rng_drop = np.random.default_rng([cfg.seed, 2])
    batch = min(cfg.batch, max(len(fit_ds), 1))
    steps_per_epoch = math.ceil(len(fit_ds) / batch) if len(fit_ds) else 0
    total_steps = steps_per_epoch * cfg.epochs
    best_val = -1.0
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        try:
            with np.errstate(over="ignore", invalid="ignore"):  # non-finite values raise below
                train_loss, step = _run_epoch(cfg, params, named, opt, fit_ds, batch, step, total_steps,
                                              rng_shuffle, rng_drop)
                val_oa = _validate(params, val_ds, cfg.eval_batch)
        except NumericError as exc:
            raise DivergenceError(f"epoch {epoch}: {exc}; last good checkpoint kept at {ckpt}") from exc
        with open(log_path, "a", newline="") as fh:
            csv.writer(fh).writerow([epoch, f"{train_loss:.8f}", f"{val_oa:.8f}"])
        log.info("epoch %d loss %.5f val_oa %.4f", epoch, train_loss, val_oa)
        if not len(val_ds) or val_oa >= best_val:  # ties go to the later epoch
            best_val = val_oa if len(val_ds) else best_val
            save_checkpoint(ckpt, params, meta)

    best, _ = load_checkpoint(ckpt)
    report = {"n_train": len(fit_ds), "n_val": len(val_ds), "n_test": len(test_ds)}
    if len(test_ds):
        rep, _ = evaluate(best, test_ds, cfg.eval_batch)
        report.update(rep.to_dict())
    report_path = out / "report.json"
    with open(report_path, "w") as fh:
        json.dump(report, fh, indent=2)
    map_path = out / "map.ppm"
    write_ppm(map_path, predict_map(best, cube, cfg.patch_size, batch=cfg.eval_batch))
    return RunArtifacts(ckpt, log_path, report_path, map_path, report)


def load_for_inference(checkpoint, cube):
    """Checkpoint + cube brought to the model's band count; returns (params, cube, meta)."""
    params, meta = load_checkpoint(checkpoint)
    if isinstance(cube, (str, os.PathLike)):
        cube = load_cube(cube)
    cube = prepare_cube(cube, meta)
    if cube.n_classes != params.config.n_classes:
        raise ConfigError(f"cube declares K={cube.n_classes}, checkpoint has {params.config.n_classes} classes")
    return params, cube, meta


__all__ = [
    "AdamW", "RunArtifacts", "TrainConfig", "adamw_step", "cross_entropy_smoothed",
    "evaluate", "load_config", "parse_config", "predict_map", "train", "write_ppm",
]
