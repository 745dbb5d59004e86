"""Long-form decoding without fragmentation: moving-average windows, buffered windows, sliding-window attention.

All geometry is expressed in encoder output frames. A model is anything with
``infer(features, window_frames=..., attn_impl=...)``, ``subsampling``,
``hop_seconds``, ``blank_id`` and ``context_frames`` (see :class:`lcasr.encoder.Encoder`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .ctc import PosteriorLattice, ctc_greedy_decode, hypothesis_words
from .encoder import FROM_CONFIG, out_length

SCHEMES = ("moving_avg", "buffered", "swa")


class MemoryBudgetExceeded(MemoryError):
    pass


@dataclass
class WindowPlan:
    scheme: str
    window_seconds: float
    stride_ratio: float = 0.125
    central_ratio: float = 0.75
    duration_seconds: Optional[float] = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown decoding scheme {self.scheme!r}; choose from {SCHEMES}")
        if not 0 < self.stride_ratio <= 1:
            raise ValueError("stride_ratio must lie in (0, 1]")
        if not 0 < self.central_ratio <= 1:
            raise ValueError("central_ratio must lie in (0, 1]")
        if not self.window_seconds > 0:
            raise ValueError("window_seconds must be positive")

    def window_frames(self, hop_seconds: float) -> int:
        return max(1, int(round(self.window_seconds / hop_seconds)))


# ------------------------------------------------------------------ planners


def moving_avg_starts(total: int, window: int, stride: int) -> list[int]:
    """Window starts ``k * stride``; the last window is clamped to end at ``total``."""
    if total <= window:
        return [0]
    count = math.ceil((total - window) / stride) + 1
    return [min(k * stride, total - window) for k in range(count)]


@dataclass(frozen=True)
class Buffer:
    start: int
    stop: int
    keep_start: int
    keep_stop: int


def buffered_windows(total: int, buffer: int, central: int) -> list[Buffer]:
    """Buffers of width ``buffer`` whose central ``central`` frames tile ``[0, total)`` exactly once."""
    if total <= buffer:
        return [Buffer(0, total, 0, total)]
    margin = (buffer - central) // 2
    out = []
    for k in range(math.ceil(total / central)):
        keep0, keep1 = k * central, min(total, (k + 1) * central)
        start = min(max(0, keep0 - margin), total - buffer)
        out.append(Buffer(start, start + buffer, keep0, keep1))
    return out


# ------------------------------------------------------------------- helpers


def _renormalise(log_probs: np.ndarray) -> np.ndarray:
    lp = np.asarray(log_probs, dtype=np.float64)
    lp = lp - np.logaddexp.reduce(lp, axis=1, keepdims=True)
    return lp.astype(np.float32)


def _segment(features: np.ndarray, model, a: int, b: int, window=FROM_CONFIG) -> np.ndarray:
    sub = model.subsampling
    seg = features[a * sub : b * sub]
    lp = model.infer(seg, window_frames=window)
    return lp[: b - a]


def _checked(features, model) -> tuple[np.ndarray, int]:
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 2 or features.shape[0] < model.subsampling:
        raise ValueError(f"features must be [T >= {model.subsampling}, mel_bins], got {features.shape}")
    return features, out_length(features.shape[0], model.subsampling)


# ------------------------------------------------------------------- schemes


def moving_avg_decode(features, model, plan: WindowPlan) -> PosteriorLattice:
    """Average post-softmax rows over all overlapping windows at stride ``stride_ratio * window``."""
    features, total = _checked(features, model)
    w = plan.window_frames(model.hop_seconds)
    stride = max(1, int(round(plan.stride_ratio * w)))
    acc = None
    counts = np.zeros(total)
    for s in moving_avg_starts(total, w, stride):
        e = min(total, s + w)
        p = np.exp(_segment(features, model, s, e).astype(np.float64))
        if acc is None:
            acc = np.zeros((total, p.shape[1]))
        acc[s:e] += p
        counts[s:e] += 1
    lp = np.log(acc / counts[:, None])
    return PosteriorLattice(_renormalise(lp), model.blank_id, model.hop_seconds)


def buffered_decode(features, model, plan: WindowPlan) -> PosteriorLattice:
    """Keep only each buffer's central ``central_ratio`` share of frames."""
    features, total = _checked(features, model)
    wb = plan.window_frames(model.hop_seconds)
    ww = max(1, int(round(plan.central_ratio * wb)))
    out = None
    for buf in buffered_windows(total, wb, ww):
        lp = _segment(features, model, buf.start, buf.stop)
        if out is None:
            out = np.empty((total, lp.shape[1]), dtype=np.float32)
        out[buf.keep_start : buf.keep_stop] = lp[buf.keep_start - buf.start : buf.keep_stop - buf.start]
    return PosteriorLattice(_renormalise(out), model.blank_id, model.hop_seconds)


def attention_bytes(length: int, heads: int, impl: str, tile: int = 128, dtype_bytes: int = 4) -> int:
    """Rough working-set estimate of one attention call at sequence ``length``."""
    if impl == "naive":
        return 3 * heads * length * length * dtype_bytes
    return heads * (8 * length * 64 + 3 * tile * tile) * 8


def receptive_margin(model, window: Optional[int]) -> Optional[int]:
    """Output frames on either side of a region that can influence it under a window of ``window``."""
    if window is None:
        return None
    cfg = model.cfg
    return cfg.layers * ((window - 1) // 2 + cfg.conv_kernel // 2 + 1) + 4


def swa_decode(
    features,
    model,
    window_frames=FROM_CONFIG,
    attn_impl: str = "tiled",
    memory_budget: Optional[int] = None,
    region: Optional[tuple[int, int]] = None,
) -> PosteriorLattice:
    """One encoder pass over the whole recording with a sliding window of ``window_frames``.

    ``region=(lo, hi)`` returns only output frames ``[lo, hi)``, computed on the
    smallest crop that contains their receptive field (exact under a finite window).
    """
    features, total = _checked(features, model)
    window = model.context_frames if window_frames == FROM_CONFIG else window_frames
    lo, hi = region if region is not None else (0, total)
    if not 0 <= lo < hi <= total:
        raise ValueError(f"region {region} outside [0, {total})")
    margin = receptive_margin(model, window)
    a, b = (0, total) if margin is None else (max(0, lo - margin), min(total, hi + margin))
    if memory_budget is not None:
        need = attention_bytes(b - a, model.cfg.heads, attn_impl)
        if need > memory_budget:
            raise MemoryBudgetExceeded(
                f"sliding-window pass over {b - a} frames needs ~{need} bytes (budget {memory_budget}); "
                "pair it with buffered decoding (scheme 'buffered') to bound memory"
            )
    sub = model.subsampling
    lp = model.infer(features[a * sub : b * sub], window_frames=window, attn_impl=attn_impl, position_offset=a)
    return PosteriorLattice(_renormalise(lp[lo - a : hi - a]), model.blank_id, model.hop_seconds)


def decode(features, model, plan: WindowPlan, **kwargs) -> PosteriorLattice:
    if plan.scheme == "moving_avg":
        return moving_avg_decode(features, model, plan)
    if plan.scheme == "buffered":
        return buffered_decode(features, model, plan)
    return swa_decode(features, model, **kwargs)


# --------------------------------------------------------------- transcripts


def lattice_words(lattice: PosteriorLattice, vocab, offset_seconds: float = 0.0):
    """Greedy words ``[(text, start_s, end_s)]`` from a lattice."""
    tokens, spans = ctc_greedy_decode(lattice)
    words = hypothesis_words(tokens, spans, vocab, lattice.hop_seconds)
    return [(w, s + offset_seconds, e + offset_seconds) for w, s, e in words]


def lattice_text(lattice: PosteriorLattice, vocab) -> str:
    return " ".join(w for w, _, _ in lattice_words(lattice, vocab))
