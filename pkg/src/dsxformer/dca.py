"""Window-based dynamic context attention (DCA).

The token grid is tiled into non-overlapping ``w x w`` windows.  Inside each
window, multi-head scaled dot-product scores get a learned relative-position
bias, are modulated by a per-window context vector (the mean of the score
rows), masked (shifted windows only), normalized with softmax and used to
mix the values.  Heads are concatenated and passed through an output
projection.  Alternate blocks cyclically shift the grid by ``w // 2`` before
partitioning so information crosses window borders.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .initializers import trunc_normal
from .tensor import Tensor

MASK_VALUE = -1e9
CONTEXT_MODES = ("key", "query", "off")


@dataclass
class WindowBatch:
    windows: Tensor  # (batch * nW, w*w, d)
    grid: tuple  # token rows, token cols before padding
    w: int
    pad: tuple  # rows added, cols added
    batch: int | None = None  # None when the source grid had no batch axis

    @property
    def n_windows(self):
        """Windows per grid (nW)."""
        rows, cols = self.grid
        return ((rows + self.pad[0]) // self.w) * ((cols + self.pad[1]) // self.w)


def _padding(n, w):
    return -n % w


def window_partition(F, w):
    """Zero-pad the grid bottom/right to multiples of ``w`` and tile it.

    ``F`` is ``(rows, cols, d)`` or ``(batch, rows, cols, d)``.  Tokens inside
    a window are ordered row-major; windows are ordered row-major too.
    """
    if not isinstance(w, (int, np.integer)) or w <= 0:
        raise ConfigError(f"window size must be a positive integer, got {w!r}")
    batched = F.ndim == 4
    if not batched:
        if F.ndim != 3:
            raise DimensionError(f"expected a (rows, cols, d) grid, got shape {F.shape}")
        F = T.reshape(F, (1,) + F.shape)
    B, rows, cols, d = F.shape
    pr, pc = _padding(rows, w), _padding(cols, w)
    F = T.pad(F, ((0, 0), (0, pr), (0, pc), (0, 0)))
    nh, nw = (rows + pr) // w, (cols + pc) // w
    x = T.reshape(F, (B, nh, w, nw, w, d))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (B * nh * nw, w * w, d))
    return WindowBatch(x, (rows, cols), int(w), (pr, pc), B if batched else None)


def window_reverse(wb):
    """Inverse of :func:`window_partition`; padding is cropped away."""
    rows, cols = wb.grid
    w = wb.w
    pr, pc = wb.pad
    if (rows + pr) % w or (cols + pc) % w:
        raise DimensionError(f"padded grid {(rows + pr, cols + pc)} is not a multiple of w={w}")
    nh, nw = (rows + pr) // w, (cols + pc) // w
    B = wb.batch if wb.batch is not None else 1
    n, tokens, d = wb.windows.shape
    if n != B * nh * nw or tokens != w * w:
        raise DimensionError(
            f"window batch {wb.windows.shape} inconsistent with grid {wb.grid}, w={w}, batch={B}"
        )
    x = T.reshape(wb.windows, (B, nh, nw, w, w, d))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (B, nh * w, nw * w, d))
    if pr or pc:
        x = x[:, :rows, :cols, :]
    if wb.batch is None:
        x = T.reshape(x, (rows, cols, d))
    return x


@lru_cache(maxsize=None)
def relative_position_index(w):
    """``(w*w, w*w)`` lookup into a ``(2w-1)^2`` table by (drow, dcol) offset."""
    rows, cols = np.divmod(np.arange(w * w), w)
    dr = rows[:, None] - rows[None, :] + (w - 1)
    dc = cols[:, None] - cols[None, :] + (w - 1)
    idx = dr * (2 * w - 1) + dc
    idx.setflags(write=False)
    return idx


@dataclass
class DCAParams:
    Wq: Tensor
    Wk: Tensor
    Wv: Tensor
    Wo: Tensor
    bias_table: Tensor  # ((2w-1)^2, h)
    h: int
    drop: float = 0.03

    def __post_init__(self):
        d = self.Wq.shape[0]
        if d % self.h:
            raise ConfigError(f"embedding dim d={d} is not divisible by head count h={self.h}")
        for name in ("Wq", "Wk", "Wv", "Wo"):
            if getattr(self, name).shape != (d, d):
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {(d, d)}")
        n_off, heads = self.bias_table.shape
        side = int(round(np.sqrt(n_off)))
        if heads != self.h or side * side != n_off or side % 2 == 0:
            raise DimensionError(f"bias table shape {self.bias_table.shape} invalid for h={self.h}")

    @property
    def d(self):
        return self.Wq.shape[0]

    @property
    def w(self):
        return (int(round(np.sqrt(self.bias_table.shape[0]))) + 1) // 2

    @property
    def d_head(self):
        return self.d // self.h

    @classmethod
    def init(cls, d, h, w, rng=None, std=0.02, drop=0.03, dtype=np.float32):
        if d % h:
            raise ConfigError(f"embedding dim d={d} is not divisible by head count h={h}")
        rng = rng if rng is not None else np.random.default_rng()
        mats = [Tensor(trunc_normal(rng, (d, d), std), dtype=dtype) for _ in range(4)]
        table = Tensor(np.zeros(((2 * w - 1) ** 2, h)), dtype=dtype)
        return cls(*mats, bias_table=table, h=h, drop=drop)

    def parameters(self):
        return {"Wq": self.Wq, "Wk": self.Wk, "Wv": self.Wv, "Wo": self.Wo, "bias_table": self.bias_table}


def relative_bias(p):
    """Per-head bias ``(h, w*w, w*w)`` gathered from the learned table."""
    idx = relative_position_index(p.w)
    b = T.take(p.bias_table, idx)  # (w*w, w*w, h)
    return T.transpose(b, (2, 0, 1))


@dataclass
class ShiftMask:
    shift: int
    mask: np.ndarray  # (nW, w*w, w*w), 0 or MASK_VALUE


def _segments(n, n_padded, shift):
    lab = np.zeros(n_padded, dtype=np.int64)
    s = shift % n if n else 0
    if s:
        lab[n - s:n] = 1
    lab[n:] = 2
    return lab


@lru_cache(maxsize=None)
def _mask_array(rows, cols, w, shift):
    rows_p, cols_p = rows + _padding(rows, w), cols + _padding(cols, w)
    n_windows = (rows_p // w) * (cols_p // w)
    if shift == 0:
        mask = np.zeros((n_windows, w * w, w * w))
    else:
        region = _segments(rows, rows_p, shift)[:, None] * 3 + _segments(cols, cols_p, shift)[None, :]
        region = region.reshape(rows_p // w, w, cols_p // w, w).transpose(0, 2, 1, 3)
        region = region.reshape(n_windows, w * w)
        mask = np.where(region[:, :, None] != region[:, None, :], MASK_VALUE, 0.0)
    mask.setflags(write=False)
    return mask


def build_shift_mask(rows, cols, w, shift):
    """Additive mask for a grid cyclically shifted by ``(-shift, -shift)``.

    After the roll, tokens that wrapped around the bottom/right edge and
    tokens added as padding form their own regions; pairs from different
    regions that share a window get ``MASK_VALUE``.  ``shift == 0`` gives an
    all-zero mask.
    """
    if shift < 0:
        raise ConfigError(f"shift must be non-negative, got {shift}")
    return ShiftMask(int(shift), _mask_array(int(rows), int(cols), int(w), int(shift)))


def qkv_project(tokens, p):
    """Project tokens ``(..., n, d)`` and split channels into heads ``(..., h, n, d_head)``."""
    d = tokens.shape[-1]
    if d != p.d:
        raise DimensionError(f"token width {d} does not match projection width {p.d}")
    if d % p.h:
        raise ConfigError(f"embedding dim d={d} is not divisible by head count h={p.h}")
    lead, n = tokens.shape[:-2], tokens.shape[-2]
    out = []
    for W in (p.Wq, p.Wk, p.Wv):
        x = T.reshape(tokens @ W, lead + (n, p.h, p.d_head))
        out.append(T.swapaxes(x, -2, -3))
    return tuple(out)


def attention_scores(Q, K, bias=None):
    """``Q K^T / sqrt(d_head) + bias`` per head."""
    d_head = Q.shape[-1]
    A = (Q @ K.T) * (1.0 / np.sqrt(d_head))
    if bias is not None:
        if bias.shape != A.shape[-3:]:
            raise DimensionError(f"bias shape {bias.shape} does not match scores {A.shape[-3:]}")
        A = A + bias
    return A


def context_vector(A):
    """Mean of the score rows: one salience value per key token, per head."""
    return A.mean(axis=-2)


def dynamic_scale(A, g, mode="key", use_abs=False):
    """Modulate scores by the context vector.

    ``mode="key"`` multiplies column ``j`` by ``g[j]`` (same factor on every
    row); ``"query"`` multiplies row ``i`` by ``g[i]``; ``"off"`` returns
    ``A`` unchanged.
    """
    if mode == "off":
        return A
    n = A.shape[-1]
    if g.shape[-1] != n:
        raise DimensionError(f"context vector length {g.shape[-1]} does not match score size {n}")
    if use_abs:
        g = T.absolute(g)
    lead = g.shape[:-1]
    if mode == "key":
        return A * T.reshape(g, lead + (1, n))
    if mode == "query":
        return A * T.reshape(g, lead + (n, 1))
    raise ConfigError(f"unknown context scaling mode {mode!r}; expected one of {CONTEXT_MODES}")


def attend(A_scaled, V, mask, p, train=False, rng=None):
    """Softmax-normalize (after masking), mix values, merge heads, project.

    ``A_scaled`` is ``(batch*nW, h, n, n)`` and ``V`` is ``(batch*nW, h, n, d_head)``.
    ``mask`` is a :class:`ShiftMask`, a raw ``(nW, n, n)`` array or None.
    """
    if mask is not None:
        m = mask.mask if isinstance(mask, ShiftMask) else np.asarray(mask)
        if np.any(m):
            nW = m.shape[0]
            BW, h, n, _ = A_scaled.shape
            if BW % nW:
                raise DimensionError(f"{BW} windows cannot be grouped by a {nW}-window mask")
            A5 = T.reshape(A_scaled, (BW // nW, nW, h, n, n))
            A5 = A5 + m.astype(A_scaled.dtype)[None, :, None]
            A_scaled = T.reshape(A5, (BW, h, n, n))
    P = T.softmax(A_scaled, axis=-1)
    O = P @ V  # (BW, h, n, d_head)
    O = T.swapaxes(O, -2, -3)
    O = T.reshape(O, O.shape[:-2] + (p.d,))
    O = O @ p.Wo
    if train and p.drop > 0:
        O = T.dropout(O, p.drop, rng)
    return O


@dataclass
class DCAOptions:
    context: str = "key"
    abs_context: bool = False
    use_bias: bool = field(default=True)

    def __post_init__(self):
        if self.context not in CONTEXT_MODES:
            raise ConfigError(f"unknown context scaling mode {self.context!r}; expected one of {CONTEXT_MODES}")


def window_attention(wb, p, mask=None, train=False, rng=None, opts=None):
    """Attention inside every window of ``wb``; returns a new :class:`WindowBatch`."""
    opts = opts or DCAOptions()
    if wb.w != p.w:
        raise DimensionError(f"window size {wb.w} does not match bias table for w={p.w}")
    Q, K, V = qkv_project(wb.windows, p)
    A = attention_scores(Q, K, relative_bias(p) if opts.use_bias else None)
    if opts.context != "off":
        A = dynamic_scale(A, context_vector(A), opts.context, opts.abs_context)
    O = attend(A, V, mask, p, train=train, rng=rng)
    return WindowBatch(O, wb.grid, wb.w, wb.pad, wb.batch)


def dca_forward(grid, p, shift=0, train=False, rng=None, opts=None):
    """Full DCA on a token grid ``(rows, cols, d)`` or ``(batch, rows, cols, d)``."""
    batched = grid.ndim == 4
    ax = (1, 2) if batched else (0, 1)
    rows, cols = grid.shape[ax[0]], grid.shape[ax[1]]
    w = p.w
    if shift:
        grid = T.roll(grid, (-shift, -shift), ax)
    wb = window_partition(grid, w)
    mask = build_shift_mask(rows, cols, w, shift)
    out = window_reverse(window_attention(wb, p, mask, train=train, rng=rng, opts=opts))
    if shift:
        out = T.roll(out, (shift, shift), ax)
    return out
