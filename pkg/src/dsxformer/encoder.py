"""DSXFormer network: patch embedding, hierarchical DSX/DCA encoder, head.

Tensors flow as token grids ``(batch, rows, cols, d)``.  Each encoder block
is pre-norm::

    x0 = dsx(x)                       # replaces x, no residual
    x1 = x0 + drop_path(dca(ln1(x0)))
    x2 = x1 + drop_path(mlp(ln2(x1)))

Stages are separated by 2x2 patch merging (channels double).  The head
averages all tokens of the final stage and applies a linear layer + softmax.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .dca import DCAOptions, DCAParams, dca_forward
from .dsx import DSXParams, dsx_forward
from .errors import ConfigError, DimensionError, FormatError
from .initializers import trunc_normal
from .tensor import Tensor

DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class StageConfig:
    depth: int
    d: int
    w: int
    h: int
    mlp_hidden: int
    merge_after: bool

    def __post_init__(self):
        if self.d % self.h:
            raise ConfigError(f"stage dim d={self.d} is not divisible by heads h={self.h}")
        if self.mlp_hidden < self.d:
            raise ConfigError(f"mlp_hidden={self.mlp_hidden} must be >= d={self.d}")


@dataclass
class ModelConfig:
    in_bands: int
    n_classes: int
    patch: int = 2
    dim: int = 64
    depths: tuple = (2, 2)
    heads: int = 8
    window: int = 4
    mlp_hidden: int = 256
    dsx_ratio: int = 2
    dropout: float = 0.03
    drop_path: float = 0.1
    gelu_approx: bool = False
    context: str = "key"
    abs_context: bool = False
    ln_eps: float = 1e-5
    dtype: str = "float32"

    def __post_init__(self):
        self.depths = tuple(int(x) for x in self.depths)
        if self.patch <= 0:
            raise ConfigError(f"patch size must be positive, got {self.patch}")
        if self.window <= 0:
            raise ConfigError(f"window size must be positive, got {self.window}")
        if self.in_bands <= 0 or self.n_classes <= 0:
            raise ConfigError("in_bands and n_classes must be positive")
        if not self.depths or any(dp < 1 for dp in self.depths):
            raise ConfigError(f"stage depths must be positive, got {self.depths}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")
        for rate in (self.dropout, self.drop_path):
            if not 0.0 <= rate <= 1.0:
                raise ConfigError(f"rates must lie in [0, 1], got {rate}")
        DCAOptions(self.context, self.abs_context)
        self.stages()

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    def stages(self):
        n = len(self.depths)
        return [
            StageConfig(
                depth=depth,
                d=self.dim * 2**i,
                w=self.window,
                h=self.heads,
                mlp_hidden=self.mlp_hidden * 2**i,
                merge_after=i < n - 1,
            )
            for i, depth in enumerate(self.depths)
        ]

    def drop_path_rates(self):
        return [float(r) for r in np.linspace(0.0, self.drop_path, sum(self.depths))]

    def to_json(self):
        d = asdict(self)
        d["depths"] = list(self.depths)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def digest(self):
        return hashlib.sha256(self.to_json().encode()).digest()


@dataclass
class LNParams:
    gamma: Tensor
    beta: Tensor

    @classmethod
    def init(cls, d, dtype):
        return cls(Tensor(np.ones(d), dtype=dtype), Tensor(np.zeros(d), dtype=dtype))

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}


@dataclass
class MLPParams:
    W1: Tensor  # (hidden, d)
    b1: Tensor
    W2: Tensor  # (d, hidden)
    b2: Tensor

    @classmethod
    def init(cls, d, hidden, rng, dtype, std=0.02):
        return cls(
            Tensor(trunc_normal(rng, (hidden, d), std), dtype=dtype),
            Tensor(np.zeros(hidden), dtype=dtype),
            Tensor(trunc_normal(rng, (d, hidden), std), dtype=dtype),
            Tensor(np.zeros(d), dtype=dtype),
        )

    def parameters(self):
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}


@dataclass
class BlockParams:
    dsx: DSXParams
    ln1: LNParams
    dca: DCAParams
    ln2: LNParams
    mlp: MLPParams

    def parameters(self):
        out = {}
        for part in ("dsx", "ln1", "dca", "ln2", "mlp"):
            for name, t in getattr(self, part).parameters().items():
                out[f"{part}.{name}"] = t
        return out


@dataclass
class StageParams:
    blocks: list
    merge: Tensor | None = None  # (2d, 4d)


@dataclass
class ModelParams:
    config: ModelConfig
    embed_W: Tensor  # (p*p*bands, d)
    embed_b: Tensor
    stages: list = field(default_factory=list)
    head_W: Tensor | None = None  # (d_final, K)
    head_b: Tensor | None = None

    @classmethod
    def init(cls, config, seed=0):
        rng = np.random.default_rng(seed)
        dt = config.np_dtype
        p = config.patch
        stages = []
        for sc in config.stages():
            blocks = [
                BlockParams(
                    dsx=DSXParams.init(sc.d, config.dsx_ratio, rng, dt),
                    ln1=LNParams.init(sc.d, dt),
                    dca=DCAParams.init(sc.d, sc.h, sc.w, rng, drop=config.dropout, dtype=dt),
                    ln2=LNParams.init(sc.d, dt),
                    mlp=MLPParams.init(sc.d, sc.mlp_hidden, rng, dt),
                )
                for _ in range(sc.depth)
            ]
            merge = Tensor(trunc_normal(rng, (2 * sc.d, 4 * sc.d)), dtype=dt) if sc.merge_after else None
            stages.append(StageParams(blocks, merge))
        d_final = config.stages()[-1].d
        return cls(
            config=config,
            embed_W=Tensor(trunc_normal(rng, (p * p * config.in_bands, config.dim)), dtype=dt),
            embed_b=Tensor(np.zeros(config.dim), dtype=dt),
            stages=stages,
            head_W=Tensor(trunc_normal(rng, (d_final, config.n_classes)), dtype=dt),
            head_b=Tensor(np.zeros(config.n_classes), dtype=dt),
        )

    def named_parameters(self):
        out = [("embed.W", self.embed_W), ("embed.b", self.embed_b)]
        for si, stage in enumerate(self.stages):
            for bi, block in enumerate(stage.blocks):
                for name, t in block.parameters().items():
                    out.append((f"stages.{si}.blocks.{bi}.{name}", t))
            if stage.merge is not None:
                out.append((f"stages.{si}.merge.W", stage.merge))
        out += [("head.W", self.head_W), ("head.b", self.head_b)]
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def n_parameters(self):
        return sum(t.size for t in self.parameters())

    def requires_grad_(self, flag=True):
        for t in self.parameters():
            t.requires_grad = flag
            t.grad = np.zeros_like(t.data) if flag else None
        return self


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def patch_embed(cube_patch, p, W, b):
    """Split ``(S, S, B)`` (or batched) input into ``p x p`` blocks and project.

    ``S`` is edge-replicated up to a multiple of ``p``.  Each block is
    flattened in (row, col, band) order before the ``(p*p*B, d)`` projection.
    """
    if p <= 0:
        raise ConfigError(f"patch size must be positive, got {p}")
    x = cube_patch.data if isinstance(cube_patch, Tensor) else np.asarray(cube_patch)
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    B, S1, S2, bands = x.shape
    if W.shape[0] != p * p * bands:
        raise DimensionError(f"embedding matrix {W.shape} does not fit {p}x{p}x{bands} blocks")
    r1, r2 = -S1 % p, -S2 % p
    if r1 or r2:
        x = np.pad(x, ((0, 0), (0, r1), (0, r2), (0, 0)), mode="edge")
    gh, gw = (S1 + r1) // p, (S2 + r2) // p
    x = x.reshape(B, gh, p, gw, p, bands).transpose(0, 1, 3, 2, 4, 5).reshape(B, gh, gw, p * p * bands)
    tokens = Tensor(x.astype(W.dtype, copy=False)) @ W + b
    return tokens if batched else T.reshape(tokens, tokens.shape[1:])


def mlp_forward(f, mp, drop=0.0, train=False, rng=None, approximate=False):
    """``W2 gelu(W1 f + b1) + b2`` per token; dropout between layers when training."""
    if f.shape[-1] != mp.W1.shape[1]:
        raise DimensionError(f"token width {f.shape[-1]} does not match MLP input {mp.W1.shape[1]}")
    h = T.gelu(f @ mp.W1.T + mp.b1, approximate=approximate)
    if train and drop > 0:
        h = T.dropout(h, drop, rng)
    return h @ mp.W2.T + mp.b2


def patch_merge(grid, W):
    """Concatenate each 2x2 neighbourhood to 4d channels and project to 2d.

    Neighbour order is (i, j), (i+1, j), (i, j+1), (i+1, j+1).  Odd grids
    get a zero row/column appended first.
    """
    batched = grid.ndim == 4
    if not batched:
        grid = T.reshape(grid, (1,) + grid.shape)
    _, r, c, d = grid.shape
    if W.shape != (2 * d, 4 * d):
        raise DimensionError(f"merge matrix {W.shape} does not fit d={d} (expected {(2 * d, 4 * d)})")
    grid = T.pad(grid, ((0, 0), (0, r % 2), (0, c % 2), (0, 0)))
    parts = [
        grid[:, 0::2, 0::2, :],
        grid[:, 1::2, 0::2, :],
        grid[:, 0::2, 1::2, :],
        grid[:, 1::2, 1::2, :],
    ]
    out = T.concat(parts, axis=-1) @ W.T
    return out if batched else T.reshape(out, out.shape[1:])


def drop_path(x, rate, train, rng):
    """Stochastic depth: zero a whole residual branch per sample, rescale survivors."""
    if not train or rate <= 0:
        return x
    shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    if rate >= 1:
        return x * np.zeros(shape, dtype=x.dtype)
    keep = (rng.random(shape) >= rate).astype(x.dtype) / np.asarray(1.0 - rate, dtype=x.dtype)
    return x * keep


def encoder_block_forward(grid, bp, shift=0, train=False, rng=None, drop_path_rate=0.0,
                          config=None):
    """One pre-norm DSXFormer block on a ``(batch, rows, cols, d)`` grid."""
    cfg = config
    opts = DCAOptions(cfg.context, cfg.abs_context) if cfg else DCAOptions()
    eps = cfg.ln_eps if cfg else 1e-5
    approx = cfg.gelu_approx if cfg else False
    drop = cfg.dropout if cfg else 0.0

    B, r, c, d = grid.shape
    x0 = T.reshape(dsx_forward(T.reshape(grid, (B, r * c, d)), bp.dsx), (B, r, c, d))
    a = dca_forward(T.layer_norm(x0, bp.ln1.gamma, bp.ln1.beta, eps), bp.dca, shift,
                    train=train, rng=rng, opts=opts)
    x1 = x0 + drop_path(a, drop_path_rate, train, rng)
    m = mlp_forward(T.layer_norm(x1, bp.ln2.gamma, bp.ln2.beta, eps), bp.mlp, drop,
                    train=train, rng=rng, approximate=approx)
    return x1 + drop_path(m, drop_path_rate, train, rng)


def head_logits(grid, W_out, b_out):
    """Global average over tokens then ``f @ W_out + b_out``."""
    f = grid.mean(axis=(-3, -2))
    if f.shape[-1] != W_out.shape[0]:
        raise DimensionError(f"feature width {f.shape[-1]} does not match head {W_out.shape}")
    return f @ W_out + b_out if f.ndim == 2 else T.reshape(T.reshape(f, (1, -1)) @ W_out + b_out, (-1,))


def classify_head(grid, W_out, b_out):
    return T.softmax(head_logits(grid, W_out, b_out), axis=-1)


def forward_logits(x, params, train=False, rng=None):
    """Logits ``(batch, K)`` for input patches ``(batch, S, S, bands)``."""
    cfg = params.config
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    if x.shape[-1] != cfg.in_bands:
        raise ConfigError(f"input has {x.shape[-1]} bands, model expects {cfg.in_bands}")
    if train and rng is None:
        raise ConfigError("training mode needs an rng for dropout / drop-path")
    grid = patch_embed(x, cfg.patch, params.embed_W, params.embed_b)
    rates = iter(cfg.drop_path_rates())
    for sc, sp in zip(cfg.stages(), params.stages):
        for j, bp in enumerate(sp.blocks):
            shift = 0 if j % 2 == 0 else sc.w // 2
            grid = encoder_block_forward(grid, bp, shift, train, rng, next(rates), cfg)
        if sp.merge is not None:
            grid = patch_merge(grid, sp.merge)
    logits = head_logits(grid, params.head_W, params.head_b)
    return logits if batched else T.reshape(logits, (-1,))


def model_forward(x, params, train=False, rng=None):
    """Class probabilities ``(batch, K)`` (or ``(K,)`` for one patch)."""
    return T.softmax(forward_logits(x, params, train, rng), axis=-1)


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"DSXC"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params, meta=None):
    """Write header (magic, version, config digest, config, meta) + parameter blobs."""
    cfg_json = params.config.to_json().encode()
    meta_json = json.dumps(meta or {}, sort_keys=True).encode()
    named = params.named_parameters()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(params.config.digest())
        fh.write(struct.pack("<I", len(cfg_json)))
        fh.write(cfg_json)
        fh.write(struct.pack("<I", len(meta_json)))
        fh.write(meta_json)
        fh.write(struct.pack("<I", len(named)))
        for name, t in named:
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"truncated checkpoint while reading {what}: need {n} bytes, "
                f"{len(self.buf) - self.pos} left",
                self.pos,
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path):
    """Returns ``(params, meta)``; every blob's name and shape is validated."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    (version,) = r.unpack("<I", "version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    digest = r.take(32, "config digest")
    (n,) = r.unpack("<I", "config length")
    cfg_text = r.take(n, "config").decode()
    if hashlib.sha256(cfg_text.encode()).digest() != digest:
        raise FormatError("config digest mismatch", 8)
    config = ModelConfig.from_json(cfg_text)
    (n,) = r.unpack("<I", "meta length")
    meta = json.loads(r.take(n, "meta").decode())
    params = ModelParams.init(config, seed=0)
    expected = params.named_parameters()
    (count,) = r.unpack("<I", "parameter count")
    if count != len(expected):
        raise FormatError(f"checkpoint has {count} tensors, config implies {len(expected)}", r.pos)
    for name, t in expected:
        (ln,) = r.unpack("<H", "name length")
        got = r.take(ln, "name").decode()
        if got != name:
            raise FormatError(f"expected parameter {name!r}, found {got!r}", r.pos)
        (ndim,) = r.unpack("<B", "rank")
        shape = r.unpack(f"<{ndim}I", "shape")
        if tuple(shape) != t.shape:
            raise FormatError(f"parameter {name} has shape {shape}, config implies {t.shape}", r.pos)
        raw = r.take(4 * t.size, f"values of {name}")
        t.data = np.frombuffer(raw, dtype="<f4").reshape(t.shape).astype(config.np_dtype)
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes after parameters", r.pos)
    return params, meta
