"""Scaled dot-product attention: naive reference, tiled online softmax, sliding window.

All functions take ``q, k, v`` of shape ``[..., L, d]`` (leading axes are
batch/head axes). The tiled kernels never hold more than one
``tile_rows x tile_cols`` block of scores; they accumulate in float64 and
return arrays in the input dtype.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class TileSpec:
    tile_rows: int = 128
    tile_cols: int = 128

    def __post_init__(self):
        if self.tile_rows < 1 or self.tile_cols < 1:
            raise ValueError("tile sizes must be at least 1")

    def clipped(self, length: int) -> "TileSpec":
        return TileSpec(max(1, min(self.tile_rows, length)), max(1, min(self.tile_cols, length)))


class SlidingWindowMask:
    """Position ``i`` may attend to ``j`` iff ``|i - j| <= (W - 1) // 2``.

    ``W=None`` means unrestricted attention.
    """

    def __init__(self, length: int, window: Optional[int]):
        if window is not None and window < 1:
            raise ValueError(f"window must be >= 1, got {window}")
        self.length = length
        self.window = window
        self.half = None if window is None else (window - 1) // 2

    def allowed(self, i: int, j: int) -> bool:
        return self.half is None or abs(i - j) <= self.half

    def block(self, r0: int, r1: int, c0: int, c1: int) -> Optional[np.ndarray]:
        """Boolean block of allowed pairs, or None when the whole block is allowed."""
        if self.half is None or (r1 - 1 - c0 <= self.half and c1 - 1 - r0 <= self.half):
            return None
        rows = np.arange(r0, r1)[:, None]
        cols = np.arange(c0, c1)[None, :]
        return np.abs(rows - cols) <= self.half

    def dense(self) -> np.ndarray:
        blk = self.block(0, self.length, 0, self.length)
        return np.ones((self.length, self.length), bool) if blk is None else blk

    def col_span(self, r0: int, r1: int) -> tuple[int, int]:
        """Columns that any row in ``[r0, r1)`` may attend to."""
        if self.half is None:
            return 0, self.length
        return max(0, r0 - self.half), min(self.length, r1 + self.half)

    def row_span(self, c0: int, c1: int) -> tuple[int, int]:
        return self.col_span(c0, c1)

    def is_full(self) -> bool:
        return self.half is None or self.half >= self.length - 1


def sliding_window_mask(length: int, window: Optional[int]) -> SlidingWindowMask:
    return SlidingWindowMask(length, window)


def _check(q, k, v):
    q, k, v = (np.asarray(a) for a in (q, k, v))
    if q.shape != k.shape or k.shape[:-1] != v.shape[:-1]:
        raise ValueError(f"shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    if q.ndim < 2:
        raise ValueError("q, k, v need at least 2 dimensions [L, d]")
    for name, a in (("q", q), ("k", k), ("v", v)):
        if not np.isfinite(a).all():
            raise ValueError(f"non-finite values in {name}")
    return q, k, v


def _flat(a: np.ndarray) -> np.ndarray:
    return a.reshape((-1,) + a.shape[-2:])


def _dtype(*arrays):
    dt = np.result_type(*arrays)
    return dt if np.issubdtype(dt, np.floating) else np.float64


def attend_naive(q, k, v, window: Optional[int] = None, scale: Optional[float] = None):
    """Materialise the full score matrix. Returns ``(output, weights)``."""
    q, k, v = _check(q, k, v)
    dt = _dtype(q, k, v)
    length, d = q.shape[-2], q.shape[-1]
    scale = 1.0 / np.sqrt(d) if scale is None else scale
    scores = np.matmul(q.astype(dt, copy=False), np.swapaxes(k.astype(dt, copy=False), -1, -2))
    scores *= dt.type(scale)
    if window is not None:
        mask = sliding_window_mask(length, window).dense()
        scores[..., ~mask] = -np.inf
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    out = np.matmul(scores, v.astype(dt, copy=False))
    return out, scores


def attend_tiled(
    q,
    k,
    v,
    window: Optional[int] = None,
    tiles: TileSpec = TileSpec(),
    scale: Optional[float] = None,
    return_lse: bool = False,
):
    """Online-softmax attention over ``tiles``-sized blocks; tiles outside the window are skipped.

    With ``return_lse`` also returns the per-row log-sum-exp of the scaled scores.
    """
    q, k, v = _check(q, k, v)
    dt = _dtype(q, k, v)
    shape = q.shape
    length, d = shape[-2], shape[-1]
    scale = 1.0 / np.sqrt(d) if scale is None else float(scale)
    tiles = tiles.clipped(length)
    mask = sliding_window_mask(length, window)
    qf, kf, vf = _flat(q), _flat(k), _flat(v)
    out = np.empty(qf.shape[:-1] + (vf.shape[-1],), dtype=dt)
    lse = np.empty(qf.shape[:-1], dtype=np.float64)
    for r0 in range(0, length, tiles.tile_rows):
        r1 = min(length, r0 + tiles.tile_rows)
        qt = qf[:, r0:r1].astype(np.float64) * scale
        m = np.full(qt.shape[:-1], -np.inf)
        l = np.zeros(qt.shape[:-1])
        acc = np.zeros(qt.shape[:-1] + (vf.shape[-1],))
        lo, hi = mask.col_span(r0, r1)
        for c0 in range((lo // tiles.tile_cols) * tiles.tile_cols, hi, tiles.tile_cols):
            c1 = min(length, c0 + tiles.tile_cols)
            s = np.matmul(qt, np.swapaxes(kf[:, c0:c1], -1, -2).astype(np.float64))
            blk = mask.block(r0, r1, c0, c1)
            if blk is not None:
                if not blk.any():
                    continue
                s[:, ~blk] = -np.inf
            m_new = np.maximum(m, s.max(axis=-1))
            # rows with nothing allowed yet keep m = -inf; shift by 0 instead
            m_safe = np.where(np.isneginf(m_new), 0.0, m_new)
            p = np.exp(s - m_safe[..., None])
            corr = np.exp(m - m_safe)
            l = l * corr + p.sum(axis=-1)
            acc = acc * corr[..., None] + np.matmul(p, vf[:, c0:c1].astype(np.float64))
            m = m_new
        out[:, r0:r1] = acc / l[..., None]
        lse[:, r0:r1] = m + np.log(l)
    out = out.reshape(shape[:-1] + (v.shape[-1],))
    if return_lse:
        return out, lse.reshape(shape[:-1])
    return out


def attend_backward(
    q,
    k,
    v,
    dout,
    window: Optional[int] = None,
    tiles: TileSpec = TileSpec(),
    scale: Optional[float] = None,
    out=None,
    lse=None,
):
    """Gradients ``(dq, dk, dv)`` of ``sum(dout * attend(q, k, v))``.

    Tiles are recomputed from ``q, k`` and the row log-sum-exp, so the weight
    matrix is never stored. ``out``/``lse`` are recomputed when not supplied.
    """
    q, k, v = _check(q, k, v)
    dout = np.asarray(dout)
    if dout.shape != q.shape[:-1] + (v.shape[-1],):
        raise ValueError(f"upstream gradient shape {dout.shape} does not match output shape")
    dt = _dtype(q, k, v)
    shape = q.shape
    length, d = shape[-2], shape[-1]
    scale = 1.0 / np.sqrt(d) if scale is None else float(scale)
    tiles = tiles.clipped(length)
    if out is None or lse is None:
        out, lse = attend_tiled(q, k, v, window, tiles, scale, return_lse=True)
    mask = sliding_window_mask(length, window)
    qf, kf, vf, of, dof = _flat(q), _flat(k), _flat(v), _flat(np.asarray(out)), _flat(dout)
    lsef = np.asarray(lse, dtype=np.float64).reshape(qf.shape[:-1])
    dq = np.zeros(qf.shape, dtype=np.float64)
    dk = np.zeros(kf.shape, dtype=np.float64)
    dv = np.zeros(vf.shape, dtype=np.float64)
    for r0 in range(0, length, tiles.tile_rows):
        r1 = min(length, r0 + tiles.tile_rows)
        qt = qf[:, r0:r1].astype(np.float64)
        dot = dof[:, r0:r1].astype(np.float64)
        delta = np.sum(dot * of[:, r0:r1].astype(np.float64), axis=-1)
        lo, hi = mask.col_span(r0, r1)
        for c0 in range((lo // tiles.tile_cols) * tiles.tile_cols, hi, tiles.tile_cols):
            c1 = min(length, c0 + tiles.tile_cols)
            kt = kf[:, c0:c1].astype(np.float64)
            vt = vf[:, c0:c1].astype(np.float64)
            s = np.matmul(qt, np.swapaxes(kt, -1, -2)) * scale
            blk = mask.block(r0, r1, c0, c1)
            if blk is not None:
                if not blk.any():
                    continue
                s[:, ~blk] = -np.inf
            p = np.exp(s - lsef[:, r0:r1, None])
            dv[:, c0:c1] += np.matmul(np.swapaxes(p, -1, -2), dot)
            dp = np.matmul(dot, np.swapaxes(vt, -1, -2))
            ds = p * (dp - delta[..., None]) * scale
            dq[:, r0:r1] += np.matmul(ds, kt)
            dk[:, c0:c1] += np.matmul(np.swapaxes(ds, -1, -2), qt)
    return (
        dq.reshape(shape).astype(dt, copy=False),
        dk.reshape(shape).astype(dt, copy=False),
        dv.reshape(v.shape).astype(dt, copy=False),
    )
